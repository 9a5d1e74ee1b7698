//! Feed-forward substitute network: ReLU hidden layers, softmax output,
//! trained with Adam on cross-entropy. Single-threaded and fully
//! deterministic for a given seed. Besides prediction it exposes exact
//! input gradients, both of the loss and of logit differences, which the
//! gradient-based attacks consume.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_labels, LearnError, Reader, Result, FORMAT_VERSION, KIND_MLP, MAGIC};

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub input: usize,
    pub output: usize,
    /// Row-major `output x input`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Layer {
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.b.clone();
        for (o, row) in self.w.chunks_exact(self.input).enumerate() {
            let mut acc = 0.0;
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            out[o] += acc;
        }
        out
    }

    /// dz is the gradient at this layer's pre-activation output; returns
    /// the gradient at its input.
    fn backward_input(&self, dz: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.input];
        for (o, row) in self.w.chunks_exact(self.input).enumerate() {
            let d = dz[o];
            if d == 0.0 {
                continue;
            }
            for (dxi, wi) in dx.iter_mut().zip(row) {
                *dxi += wi * d;
            }
        }
        dx
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MlpParams {
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for MlpParams {
    fn default() -> Self {
        MlpParams {
            hidden_layers: 7,
            hidden_units: 50,
            lr: 1e-3,
            epochs: 200,
            batch: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub layers: Vec<Layer>,
    pub seed: u64,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

impl MlpModel {
    pub fn input_width(&self) -> usize {
        self.layers[0].input
    }

    pub fn n_classes(&self) -> usize {
        self.layers.last().unwrap().output
    }

    fn check_width(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_width() {
            return Err(LearnError::DimensionMismatch {
                got: x.len(),
                want: self.input_width(),
            });
        }
        Ok(())
    }

    /// Pre-activations per layer; the last entry holds the logits.
    fn forward_trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut zs = Vec::with_capacity(self.layers.len());
        let mut a = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&a);
            if i + 1 < self.layers.len() {
                a = z.iter().map(|&v| v.max(0.0)).collect();
            }
            zs.push(z);
        }
        zs
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_width(x)?;
        Ok(self.forward_trace(x).pop().unwrap())
    }

    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(x)?))
    }

    /// Argmax label with ties to the lowest class, plus the full softmax.
    pub fn predict(&self, x: &[f64]) -> Result<(usize, Vec<f64>)> {
        let probs = self.probabilities(x)?;
        let label = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap();
        Ok((label, probs))
    }

    pub fn cross_entropy(&self, x: &[f64], class: usize) -> Result<f64> {
        let probs = self.probabilities(x)?;
        Ok(-(probs[class] + 1e-12).ln())
    }

    /// Backpropagate a gradient at the logits down to the input.
    fn input_gradient_from_dlogits(&self, zs: &[Vec<f64>], dlogits: Vec<f64>) -> Vec<f64> {
        let mut dz = dlogits;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let da = layer.backward_input(&dz);
            dz = if i == 0 {
                da
            } else {
                da.iter()
                    .zip(&zs[i - 1])
                    .map(|(&d, &z)| if z > 0.0 { d } else { 0.0 })
                    .collect()
            };
        }
        dz
    }

    /// Exact gradient of the cross-entropy loss of `class` w.r.t. the
    /// input.
    pub fn loss_gradient(&self, x: &[f64], class: usize) -> Result<Vec<f64>> {
        self.check_width(x)?;
        let zs = self.forward_trace(x);
        let probs = softmax(zs.last().unwrap());
        let mut dlogits = probs;
        dlogits[class] -= 1.0;
        Ok(self.input_gradient_from_dlogits(&zs, dlogits))
    }

    /// Exact gradient of `logit[a] - logit[b]` w.r.t. the input, the
    /// building block of the CW objective.
    pub fn logit_diff_gradient(&self, x: &[f64], a: usize, b: usize) -> Result<Vec<f64>> {
        self.check_width(x)?;
        let zs = self.forward_trace(x);
        let mut dlogits = vec![0.0; self.n_classes()];
        dlogits[a] += 1.0;
        dlogits[b] -= 1.0;
        Ok(self.input_gradient_from_dlogits(&zs, dlogits))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(KIND_MLP);
        out.push(FORMAT_VERSION);
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for layer in &self.layers {
            out.extend_from_slice(&(layer.input as u32).to_le_bytes());
            out.extend_from_slice(&(layer.output as u32).to_le_bytes());
            for &w in &layer.w {
                out.extend_from_slice(&w.to_le_bytes());
            }
            for &b in &layer.b {
                out.extend_from_slice(&b.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<MlpModel> {
        let mut r = Reader::new(bytes);
        r.expect_header(KIND_MLP)?;
        let n_layers = r.u32()? as usize;
        let seed = r.u64()?;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let input = r.u32()? as usize;
            let output = r.u32()? as usize;
            let mut w = Vec::with_capacity(input * output);
            for _ in 0..input * output {
                w.push(r.f64()?);
            }
            let mut b = Vec::with_capacity(output);
            for _ in 0..output {
                b.push(r.f64()?);
            }
            layers.push(Layer {
                input,
                output,
                w,
                b,
            });
        }
        if n_layers == 0 || !r.done() {
            return Err(LearnError::BadModelFile("bad layer structure".into()));
        }
        Ok(MlpModel { layers, seed })
    }
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    lr: f64,
}

impl Adam {
    fn new(sizes: &[usize], lr: f64) -> Self {
        Adam {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>]) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..g.len() {
                m[i] = B1 * m[i] + (1.0 - B1) * g[i];
                v[i] = B2 * v[i] + (1.0 - B2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + EPS);
            }
        }
    }
}

/// Train the substitute on (already merged) real-valued inputs.
pub fn train_mlp(xs: &[Vec<f64>], ys: &[usize], params: MlpParams) -> Result<MlpModel> {
    let n_classes = check_labels(xs, ys)?;
    let input = xs[0].len();
    if xs.iter().any(|r| r.len() != input) {
        return Err(LearnError::DimensionMismatch {
            got: xs.iter().map(Vec::len).find(|&l| l != input).unwrap(),
            want: input,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut dims = vec![input];
    dims.extend(std::iter::repeat_n(params.hidden_units, params.hidden_layers));
    dims.push(n_classes);
    let mut layers: Vec<Layer> = dims
        .windows(2)
        .map(|d| {
            let (i, o) = (d[0], d[1]);
            let limit = (6.0 / (i + o) as f64).sqrt();
            Layer {
                input: i,
                output: o,
                w: (0..i * o).map(|_| rng.gen_range(-limit..limit)).collect(),
                b: vec![0.0; o],
            }
        })
        .collect();

    let mut grad_sizes = Vec::new();
    for l in &layers {
        grad_sizes.push(l.w.len());
        grad_sizes.push(l.b.len());
    }
    let mut adam = Adam::new(&grad_sizes, params.lr);

    let model_view = |layers: &[Layer]| MlpModel {
        layers: layers.to_vec(),
        seed: params.seed,
    };

    let mut order: Vec<usize> = (0..xs.len()).collect();
    for _epoch in 0..params.epochs {
        // Fisher-Yates driven by the model rng keeps epochs deterministic.
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for batch in order.chunks(params.batch) {
            let mut grads: Vec<Vec<f64>> = grad_sizes.iter().map(|&s| vec![0.0; s]).collect();
            let mut batch_loss = 0.0;
            for &s in batch {
                let x = &xs[s];
                // Forward pass keeping post-activation values per layer.
                let mut activations: Vec<Vec<f64>> = vec![x.clone()];
                let mut zs: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
                for (i, layer) in layers.iter().enumerate() {
                    let z = layer.forward(activations.last().unwrap());
                    if i + 1 < layers.len() {
                        activations.push(z.iter().map(|&v| v.max(0.0)).collect());
                    }
                    zs.push(z);
                }
                let probs = softmax(zs.last().unwrap());
                batch_loss -= (probs[ys[s]] + 1e-12).ln();

                let mut dz: Vec<f64> = probs;
                dz[ys[s]] -= 1.0;
                for (i, layer) in layers.iter().enumerate().rev() {
                    let a_prev = &activations[i];
                    let gw = &mut grads[2 * i];
                    for (o, &d) in dz.iter().enumerate() {
                        if d == 0.0 {
                            continue;
                        }
                        let row = &mut gw[o * layer.input..(o + 1) * layer.input];
                        for (g, &a) in row.iter_mut().zip(a_prev) {
                            *g += d * a;
                        }
                    }
                    for (g, &d) in grads[2 * i + 1].iter_mut().zip(&dz) {
                        *g += d;
                    }
                    if i > 0 {
                        let da = layer.backward_input(&dz);
                        dz = da
                            .iter()
                            .zip(&zs[i - 1])
                            .map(|(&d, &z)| if z > 0.0 { d } else { 0.0 })
                            .collect();
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(LearnError::Diverged);
            }
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grads {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
            let mut params_view: Vec<&mut [f64]> = Vec::with_capacity(grads.len());
            for l in &mut layers {
                params_view.push(&mut l.w);
                params_view.push(&mut l.b);
            }
            adam.step(&mut params_view, &grads);
        }
    }
    Ok(model_view(&layers))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn xor_dataset(copies: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
        let pts = [
            (vec![0.0, 0.0], 0usize),
            (vec![0.0, 1.0], 1),
            (vec![1.0, 0.0], 1),
            (vec![1.0, 1.0], 0),
        ];
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..copies {
            for (x, y) in &pts {
                xs.push(x.clone());
                ys.push(*y);
            }
        }
        (xs, ys)
    }

    #[test]
    fn xor_trains_to_high_accuracy() {
        let (xs, ys) = xor_dataset(16);
        let model = train_mlp(
            &xs,
            &ys,
            MlpParams {
                seed: 4,
                ..Default::default()
            },
        )
        .unwrap();
        let correct = xs
            .iter()
            .zip(&ys)
            .filter(|(x, &y)| model.predict(x).unwrap().0 == y)
            .count();
        assert!(
            correct as f64 / xs.len() as f64 >= 0.99,
            "only {correct}/{} correct",
            xs.len()
        );
    }

    #[test]
    fn architecture_is_seven_by_fifty_by_default() {
        let (xs, ys) = xor_dataset(2);
        let model = train_mlp(
            &xs,
            &ys,
            MlpParams {
                epochs: 0,
                seed: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(model.layers.len(), 8);
        for layer in &model.layers[..7] {
            assert_eq!(layer.output, 50);
        }
        assert_eq!(model.layers.last().unwrap().output, 2);
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let (xs, ys) = xor_dataset(8);
        let model = train_mlp(
            &xs,
            &ys,
            MlpParams {
                epochs: 0,
                seed: 2,
                ..Default::default()
            },
        )
        .unwrap();
        let correct = xs
            .iter()
            .zip(&ys)
            .filter(|(x, &y)| model.predict(x).unwrap().0 == y)
            .count();
        let acc = correct as f64 / xs.len() as f64;
        assert!(acc <= 0.75, "untrained accuracy suspiciously high: {acc}");
    }

    #[test]
    fn softmax_sums_to_one() {
        let (xs, ys) = xor_dataset(4);
        let model = train_mlp(
            &xs,
            &ys,
            MlpParams {
                epochs: 5,
                seed: 3,
                ..Default::default()
            },
        )
        .unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(9);
        for _ in 0..50 {
            let x = vec![
                rand::Rng::gen_range(&mut rng, -100.0..100.0),
                rand::Rng::gen_range(&mut rng, -100.0..100.0),
            ];
            let p = model.probabilities(&x).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(p.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let width = 6;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(17);
        let xs: Vec<Vec<f64>> = (0..24)
            .map(|_| {
                (0..width)
                    .map(|_| rand::Rng::gen_range(&mut rng, -2.0..2.0))
                    .collect()
            })
            .collect();
        let ys: Vec<usize> = (0..24).map(|i| i % 3).collect();
        let model = train_mlp(
            &xs,
            &ys,
            MlpParams {
                epochs: 30,
                seed: 5,
                ..Default::default()
            },
        )
        .unwrap();

        let x: Vec<f64> = (0..width)
            .map(|_| rand::Rng::gen_range(&mut rng, -1.5..1.5))
            .collect();
        let class = 1;
        let grad = model.loss_gradient(&x, class).unwrap();
        let h = 1e-4;
        let mut max_rel = 0.0f64;
        for _ in 0..20 {
            let i = rand::Rng::gen_range(&mut rng, 0..width);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (model.cross_entropy(&xp, class).unwrap()
                - model.cross_entropy(&xm, class).unwrap())
                / (2.0 * h);
            let rel = (grad[i] - fd).abs() / fd.abs().max(1e-3);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn zero_weight_network_has_zero_input_gradient() {
        let model = MlpModel {
            layers: vec![
                Layer {
                    input: 3,
                    output: 4,
                    w: vec![0.0; 12],
                    b: vec![0.0; 4],
                },
                Layer {
                    input: 4,
                    output: 2,
                    w: vec![0.0; 8],
                    b: vec![0.0; 2],
                },
            ],
            seed: 0,
        };
        let g = model.loss_gradient(&[1.0, -2.0, 3.0], 0).unwrap();
        assert_eq!(g, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn linear_probe_logit_gradient_is_input_invariant() {
        let (xs, ys) = xor_dataset(4);
        let model = train_mlp(
            &xs,
            &ys,
            MlpParams {
                hidden_layers: 0,
                epochs: 10,
                seed: 6,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(model.layers.len(), 1);
        let x = vec![0.5, -1.0];
        let x3: Vec<f64> = x.iter().map(|v| 3.0 * v).collect();
        assert_eq!(
            model.logit_diff_gradient(&x, 1, 0).unwrap(),
            model.logit_diff_gradient(&x3, 1, 0).unwrap()
        );
    }

    #[test]
    fn model_roundtrips_through_bytes() {
        let (xs, ys) = xor_dataset(4);
        let model = train_mlp(
            &xs,
            &ys,
            MlpParams {
                epochs: 3,
                seed: 8,
                ..Default::default()
            },
        )
        .unwrap();
        let reloaded = MlpModel::from_bytes(&model.to_bytes()).unwrap();
        assert_eq!(model, reloaded);
        assert!(matches!(
            MlpModel::from_bytes(&model.to_bytes()[..20]),
            Err(LearnError::BadModelFile(_))
        ));
    }

    #[test]
    fn same_seed_same_model() {
        let (xs, ys) = xor_dataset(4);
        let p = MlpParams {
            epochs: 10,
            seed: 21,
            ..Default::default()
        };
        assert_eq!(train_mlp(&xs, &ys, p).unwrap(), train_mlp(&xs, &ys, p).unwrap());
    }
}
