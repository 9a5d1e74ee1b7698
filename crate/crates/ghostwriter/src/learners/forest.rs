//! Bagged CART forest with Gini splits. Counts are integers, so split
//! thresholds are too: x goes left when x[column] <= threshold.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{check_labels, LearnError, Reader, Result, FORMAT_VERSION, KIND_RF, MAGIC};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Node {
    Split {
        column: usize,
        threshold: i64,
        left: usize,
        right: usize,
    },
    Leaf {
        histogram: Vec<u32>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tree {
    /// Arena, root at index 0.
    pub nodes: Vec<Node>,
}

impl Tree {
    fn leaf_of(&self, x: &[f64]) -> &[u32] {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                Node::Split {
                    column,
                    threshold,
                    left,
                    right,
                } => {
                    at = if x[*column] <= *threshold as f64 {
                        *left
                    } else {
                        *right
                    };
                }
                Node::Leaf { histogram } => return histogram,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomForestModel {
    pub trees: Vec<Tree>,
    pub n_classes: usize,
    pub n_features: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct RfParams {
    pub n_trees: usize,
    pub max_depth: Option<usize>,
    /// Columns examined per split; default is sqrt of the feature count.
    pub features_per_split: Option<usize>,
    pub seed: u64,
}

impl Default for RfParams {
    fn default() -> Self {
        RfParams {
            n_trees: 300,
            max_depth: None,
            features_per_split: None,
            seed: 0,
        }
    }
}

fn gini(counts: &[u32], total: u32) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let mut g = 1.0;
    for &c in counts {
        let p = c as f64 / total as f64;
        g -= p * p;
    }
    g
}

struct TreeBuilder<'a> {
    xs: &'a [Vec<f64>],
    ys: &'a [usize],
    n_classes: usize,
    n_features: usize,
    mtry: usize,
    max_depth: usize,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
}

impl TreeBuilder<'_> {
    fn histogram(&self, samples: &[usize]) -> Vec<u32> {
        let mut h = vec![0u32; self.n_classes];
        for &s in samples {
            h[self.ys[s]] += 1;
        }
        h
    }

    /// Best (column, integer threshold, weighted impurity) over a random
    /// column subset. Ties resolve to the lowest column then threshold so
    /// equal seeds give equal trees regardless of float quirks.
    fn best_split(&mut self, samples: &[usize]) -> Option<(usize, i64, f64)> {
        let mut columns: Vec<usize> = (0..self.n_features).collect();
        for i in 0..self.mtry.min(self.n_features) {
            let j = self.rng.gen_range(i..self.n_features);
            columns.swap(i, j);
        }
        columns.truncate(self.mtry.min(self.n_features));
        columns.sort_unstable();

        let total = samples.len() as u32;
        let mut best: Option<(f64, usize, i64)> = None;
        for &col in &columns {
            let mut ordered: Vec<(i64, usize)> = samples
                .iter()
                .map(|&s| (self.xs[s][col] as i64, self.ys[s]))
                .collect();
            ordered.sort_unstable();
            let mut left = vec![0u32; self.n_classes];
            let mut right = self.histogram(samples);
            let mut n_left = 0u32;
            for w in 0..ordered.len() - 1 {
                let (v, y) = ordered[w];
                left[y] += 1;
                right[y] -= 1;
                n_left += 1;
                if v == ordered[w + 1].0 {
                    continue;
                }
                let n_right = total - n_left;
                let weighted = (n_left as f64 * gini(&left, n_left)
                    + n_right as f64 * gini(&right, n_right))
                    / total as f64;
                let candidate = (weighted, col, v);
                let better = match &best {
                    None => true,
                    Some(b) => {
                        candidate.0 < b.0 - 1e-12
                            || ((candidate.0 - b.0).abs() <= 1e-12 && (candidate.1, candidate.2) < (b.1, b.2))
                    }
                };
                if better {
                    best = Some(candidate);
                }
            }
        }
        best.map(|(g, col, t)| (col, t, g))
    }

    fn grow(&mut self, samples: Vec<usize>, depth: usize) -> usize {
        let hist = self.histogram(&samples);
        let impurity = gini(&hist, samples.len() as u32);
        let make_leaf = |nodes: &mut Vec<Node>, histogram: Vec<u32>| {
            nodes.push(Node::Leaf { histogram });
            nodes.len() - 1
        };
        if impurity == 0.0 || depth >= self.max_depth {
            return make_leaf(&mut self.nodes, hist);
        }
        let Some((column, threshold, split_impurity)) = self.best_split(&samples) else {
            return make_leaf(&mut self.nodes, hist);
        };
        if split_impurity >= impurity - 1e-12 {
            return make_leaf(&mut self.nodes, hist);
        }
        let (ls, rs): (Vec<usize>, Vec<usize>) = samples
            .into_iter()
            .partition(|&s| self.xs[s][column] <= threshold as f64);
        if ls.is_empty() || rs.is_empty() {
            return make_leaf(&mut self.nodes, hist);
        }
        let at = self.nodes.len();
        self.nodes.push(Node::Split {
            column,
            threshold,
            left: 0,
            right: 0,
        });
        let left = self.grow(ls, depth + 1);
        let right = self.grow(rs, depth + 1);
        if let Node::Split {
            left: l, right: r, ..
        } = &mut self.nodes[at]
        {
            *l = left;
            *r = right;
        }
        at
    }
}

/// Train a bagged forest. Each tree draws its own bootstrap sample and
/// column subsets from a seed derived from (params.seed, tree index), so
/// the result is deterministic and independent of scheduling.
pub fn train_rf(xs: &[Vec<f64>], ys: &[usize], params: RfParams) -> Result<RandomForestModel> {
    let n_classes = check_labels(xs, ys)?;
    let n_features = xs[0].len();
    if xs.iter().any(|r| r.len() != n_features) {
        return Err(LearnError::DimensionMismatch {
            got: xs.iter().map(Vec::len).find(|&l| l != n_features).unwrap(),
            want: n_features,
        });
    }
    let mtry = params
        .features_per_split
        .unwrap_or_else(|| ((n_features as f64).sqrt().round() as usize).max(1));
    let max_depth = params.max_depth.unwrap_or(usize::MAX);

    let trees: Vec<Tree> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(
                params
                    .seed
                    .wrapping_add((t as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)),
            );
            let bootstrap: Vec<usize> = (0..xs.len()).map(|_| rng.gen_range(0..xs.len())).collect();
            let mut builder = TreeBuilder {
                xs,
                ys,
                n_classes,
                n_features,
                mtry,
                max_depth,
                rng,
                nodes: Vec::new(),
            };
            builder.grow(bootstrap, 0);
            Tree {
                nodes: builder.nodes,
            }
        })
        .collect();

    Ok(RandomForestModel {
        trees,
        n_classes,
        n_features,
        seed: params.seed,
    })
}

/// Average the per-tree leaf histograms into class probabilities. Ties on
/// the argmax go to the lowest class index.
pub fn predict_rf(model: &RandomForestModel, x: &[f64]) -> Result<(usize, Vec<f64>)> {
    if x.len() != model.n_features {
        return Err(LearnError::DimensionMismatch {
            got: x.len(),
            want: model.n_features,
        });
    }
    let mut probs = vec![0.0f64; model.n_classes];
    for tree in &model.trees {
        let hist = tree.leaf_of(x);
        let total: u32 = hist.iter().sum();
        if total == 0 {
            continue;
        }
        for (p, &c) in probs.iter_mut().zip(hist) {
            *p += c as f64 / total as f64;
        }
    }
    for p in &mut probs {
        *p /= model.trees.len() as f64;
    }
    let label = probs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap();
    Ok((label, probs))
}

impl RandomForestModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(KIND_RF);
        out.push(FORMAT_VERSION);
        out.extend_from_slice(&(self.trees.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_classes as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_features as u32).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for tree in &self.trees {
            out.extend_from_slice(&(tree.nodes.len() as u32).to_le_bytes());
            for node in &tree.nodes {
                match node {
                    Node::Split {
                        column,
                        threshold,
                        left,
                        right,
                    } => {
                        out.push(0);
                        out.extend_from_slice(&(*column as u32).to_le_bytes());
                        out.extend_from_slice(&threshold.to_le_bytes());
                        out.extend_from_slice(&(*left as u32).to_le_bytes());
                        out.extend_from_slice(&(*right as u32).to_le_bytes());
                    }
                    Node::Leaf { histogram } => {
                        out.push(1);
                        out.extend_from_slice(&(histogram.len() as u32).to_le_bytes());
                        for &c in histogram {
                            out.extend_from_slice(&c.to_le_bytes());
                        }
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<RandomForestModel> {
        let mut r = Reader::new(bytes);
        r.expect_header(KIND_RF)?;
        let n_trees = r.u32()? as usize;
        let n_classes = r.u32()? as usize;
        let n_features = r.u32()? as usize;
        let seed = r.u64()?;
        let mut trees = Vec::with_capacity(n_trees);
        for _ in 0..n_trees {
            let n_nodes = r.u32()? as usize;
            let mut nodes = Vec::with_capacity(n_nodes);
            for _ in 0..n_nodes {
                match r.u8()? {
                    0 => nodes.push(Node::Split {
                        column: r.u32()? as usize,
                        threshold: r.i64()?,
                        left: r.u32()? as usize,
                        right: r.u32()? as usize,
                    }),
                    1 => {
                        let len = r.u32()? as usize;
                        let mut histogram = Vec::with_capacity(len);
                        for _ in 0..len {
                            histogram.push(r.u32()?);
                        }
                        nodes.push(Node::Leaf { histogram });
                    }
                    t => {
                        return Err(LearnError::BadModelFile(format!("unknown node tag {t}")))
                    }
                }
            }
            trees.push(Tree { nodes });
        }
        if !r.done() {
            return Err(LearnError::BadModelFile("trailing bytes".into()));
        }
        Ok(RandomForestModel {
            trees,
            n_classes,
            n_features,
            seed,
        })
    }
}
