//! Linear feature correlation: Pearson coefficients over a dataset, the
//! connected-component partition they induce, and the merge/expand
//! transforms between raw counts and the merged z-score space the attacks
//! search in.
//!
//! Only linear correlation is modeled. Non-linear relations slip through
//! and are caught later when a rewritten binary is re-extracted and
//! re-checked against the target.

use rayon::prelude::*;

use crate::features::FeatureVector;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CorrelationError {
    #[error("series is constant, coefficient undefined")]
    ZeroVariance,
    #[error("vector length {got} does not match partition width {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error("malformed partition file: {0}")]
    Malformed(String),
}

type Result<T> = std::result::Result<T, CorrelationError>;

/// Pearson correlation coefficient, exact ±1 for exact linear relations on
/// representable inputs.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    assert_eq!(xs.len(), ys.len(), "series lengths differ");
    assert!(xs.len() >= 2, "need at least two observations");
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(CorrelationError::ZeroVariance);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Correlation structure of a feature set: per-column stats, the edges at
/// or above the threshold, and the connected components they form.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePartition {
    pub threshold: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub edges: Vec<(usize, usize)>,
    /// Disjoint, sorted index sets covering every column.
    pub partitions: Vec<Vec<usize>>,
    /// Lowest column index of each partition.
    pub representative: Vec<usize>,
    /// Column -> partition position.
    member_of: Vec<usize>,
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind((0..n).collect())
    }
    fn find(&mut self, i: usize) -> usize {
        if self.0[i] != i {
            let r = self.find(self.0[i]);
            self.0[i] = r;
        }
        self.0[i]
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Group columns whose pairwise correlation over the dataset reaches the
/// threshold. Zero-variance columns join no edge and stay singletons.
pub fn build_partition(dataset: &[Vec<f64>], threshold: f64) -> FeaturePartition {
    assert!(dataset.len() >= 2, "need at least two samples");
    let width = dataset[0].len();
    assert!(dataset.iter().all(|r| r.len() == width), "ragged dataset");

    let n = dataset.len() as f64;
    let mut mean = vec![0.0; width];
    for row in dataset {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut std = vec![0.0; width];
    for row in dataset {
        for ((s, &v), &m) in std.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    for s in &mut std {
        *s = (*s / n).sqrt();
    }

    let columns: Vec<Vec<f64>> = (0..width)
        .map(|i| dataset.iter().map(|r| r[i]).collect())
        .collect();
    let varying: Vec<usize> = (0..width).filter(|&i| std[i] > 0.0).collect();
    let mut edges: Vec<(usize, usize)> = varying
        .par_iter()
        .enumerate()
        .flat_map_iter(|(k, &i)| {
            let columns = &columns;
            let varying = &varying;
            varying[k + 1..].iter().filter_map(move |&j| {
                match pearson(&columns[i], &columns[j]) {
                    Ok(r) if r >= threshold => Some((i, j)),
                    _ => None,
                }
            })
        })
        .collect();
    edges.sort_unstable();

    let mut uf = UnionFind::new(width);
    for &(a, b) in &edges {
        uf.union(a, b);
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..width {
        groups.entry(uf.find(i)).or_default().push(i);
    }
    let partitions: Vec<Vec<usize>> = groups.into_values().collect();
    let representative: Vec<usize> = partitions.iter().map(|p| p[0]).collect();
    let mut member_of = vec![0usize; width];
    for (pi, p) in partitions.iter().enumerate() {
        for &i in p {
            member_of[i] = pi;
        }
    }
    FeaturePartition {
        threshold,
        mean,
        std,
        edges,
        partitions,
        representative,
        member_of,
    }
}

impl FeaturePartition {
    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn partition_of(&self, column: usize) -> usize {
        self.member_of[column]
    }

    fn zscore(&self, column: usize, value: f64) -> f64 {
        if self.std[column] == 0.0 {
            0.0
        } else {
            (value - self.mean[column]) / self.std[column]
        }
    }

    /// Project a raw count vector into merged space: one z-scored
    /// coordinate per partition, taken from its representative.
    pub fn merge(&self, x: &FeatureVector) -> Result<Vec<f64>> {
        if x.counts.len() != self.width() {
            return Err(CorrelationError::DimensionMismatch {
                got: x.counts.len(),
                want: self.width(),
            });
        }
        Ok(self
            .representative
            .iter()
            .map(|&r| self.zscore(r, x.counts[r] as f64))
            .collect())
    }

    /// Translate a merged-space delta back to integer count deltas: every
    /// member scales the partition delta by its own sigma, lands on the
    /// nearest non-negative integer, and zero-variance columns stay frozen.
    pub fn expand(&self, merged_delta: &[f64], x: &FeatureVector) -> Result<Vec<i64>> {
        if merged_delta.len() != self.partitions.len() {
            return Err(CorrelationError::DimensionMismatch {
                got: merged_delta.len(),
                want: self.partitions.len(),
            });
        }
        if x.counts.len() != self.width() {
            return Err(CorrelationError::DimensionMismatch {
                got: x.counts.len(),
                want: self.width(),
            });
        }
        let mut delta = vec![0i64; self.width()];
        for (p, members) in self.partitions.iter().enumerate() {
            for &i in members {
                if self.std[i] == 0.0 {
                    continue;
                }
                let raw = merged_delta[p] * self.std[i];
                let target = (x.counts[i] as f64 + raw).round().max(0.0);
                delta[i] = target as i64 - x.counts[i] as i64;
            }
        }
        Ok(delta)
    }

    /// Text form: partition member lines, a blank line, then per-column
    /// stats. The threshold rides in a comment header.
    pub fn to_text(&self) -> String {
        let mut out = format!("# threshold {}\n", self.threshold);
        for p in &self.partitions {
            let line: Vec<String> = p.iter().map(|i| i.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out.push('\n');
        for i in 0..self.width() {
            out.push_str(&format!("{i},{},{}\n", self.mean[i], self.std[i]));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<FeaturePartition> {
        let mut threshold = 0.9;
        let mut partitions: Vec<Vec<usize>> = Vec::new();
        let mut stats: Vec<(usize, f64, f64)> = Vec::new();
        let mut in_stats = false;
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("# threshold ") {
                threshold = rest
                    .trim()
                    .parse()
                    .map_err(|_| CorrelationError::Malformed("bad threshold".into()))?;
                continue;
            }
            if line.is_empty() {
                in_stats = true;
                continue;
            }
            if in_stats {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 3 {
                    return Err(CorrelationError::Malformed(format!("bad stats line {line:?}")));
                }
                let parse = |s: &str| {
                    s.parse::<f64>()
                        .map_err(|_| CorrelationError::Malformed(format!("bad float {s:?}")))
                };
                stats.push((
                    f[0].parse()
                        .map_err(|_| CorrelationError::Malformed("bad index".into()))?,
                    parse(f[1])?,
                    parse(f[2])?,
                ));
            } else {
                let members = line
                    .split(',')
                    .map(|s| {
                        s.parse::<usize>()
                            .map_err(|_| CorrelationError::Malformed(format!("bad member {s:?}")))
                    })
                    .collect::<Result<Vec<usize>>>()?;
                partitions.push(members);
            }
        }
        let width = stats.len();
        let mut mean = vec![0.0; width];
        let mut std = vec![0.0; width];
        for (i, m, s) in stats {
            if i >= width {
                return Err(CorrelationError::Malformed(format!("stats index {i} out of range")));
            }
            mean[i] = m;
            std[i] = s;
        }
        let mut member_of = vec![usize::MAX; width];
        for (pi, p) in partitions.iter().enumerate() {
            for &i in p {
                if i >= width {
                    return Err(CorrelationError::Malformed(format!("member {i} out of range")));
                }
                member_of[i] = pi;
            }
        }
        if member_of.contains(&usize::MAX) {
            return Err(CorrelationError::Malformed("partitions do not cover all columns".into()));
        }
        let representative = partitions.iter().map(|p| p[0]).collect();
        Ok(FeaturePartition {
            threshold,
            mean,
            std,
            edges: Vec::new(),
            partitions,
            representative,
            member_of,
        })
    }
}
