//! The two classifiers: a bagged random forest (the attack target) and a
//! feed-forward substitute network that supplies gradients.
//!
//! Both models persist to one binary container format, little-endian
//! throughout:
//!
//! ```text
//! magic  "GWML"
//! kind   u8   1 = random forest, 2 = mlp
//! ver    u8   1
//! rf:    u32 n_trees, u32 n_classes, u32 n_features, u64 seed,
//!        then per tree: u32 n_nodes, then per node:
//!          u8 0, u32 column, i64 threshold, u32 left, u32 right   (split)
//!          u8 1, u32 len, len * u32 class counts                  (leaf)
//! mlp:   u32 n_layers, u64 seed, then per layer:
//!        u32 in, u32 out, out*in f64 weights (row-major), out f64 biases
//! ```

mod forest;
mod mlp;

pub use forest::{predict_rf, train_rf, Node, RandomForestModel, RfParams, Tree};
pub use mlp::{train_mlp, Layer, MlpModel, MlpParams};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LearnError {
    #[error("dataset needs at least two classes with two samples each")]
    DegenerateDataset,
    #[error("input length {got} does not match model width {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error("training diverged (loss is not finite)")]
    Diverged,
    #[error("bad model file: {0}")]
    BadModelFile(String),
}

pub(crate) type Result<T> = std::result::Result<T, LearnError>;

/// Anything that maps a feature vector to a class label. The attack code
/// only ever needs the label, so both model kinds (and test stand-ins)
/// hide behind this.
pub trait Classifier: Sync {
    fn n_classes(&self) -> usize;
    fn predict_label(&self, x: &[f64]) -> Result<usize>;
}

impl Classifier for RandomForestModel {
    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn predict_label(&self, x: &[f64]) -> Result<usize> {
        predict_rf(self, x).map(|(label, _)| label)
    }
}

impl Classifier for MlpModel {
    fn n_classes(&self) -> usize {
        MlpModel::n_classes(self)
    }

    fn predict_label(&self, x: &[f64]) -> Result<usize> {
        self.predict(x).map(|(label, _)| label)
    }
}

pub(crate) const MAGIC: &[u8; 4] = b"GWML";
pub(crate) const KIND_RF: u8 = 1;
pub(crate) const KIND_MLP: u8 = 2;
pub(crate) const FORMAT_VERSION: u8 = 1;

/// Shared label sanity check: at least two classes, each seen at least
/// twice, labels dense in 0..n_classes.
pub(crate) fn check_labels(xs: &[Vec<f64>], ys: &[usize]) -> Result<usize> {
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(LearnError::DegenerateDataset);
    }
    let n_classes = ys.iter().max().map_or(0, |m| m + 1);
    if n_classes < 2 {
        return Err(LearnError::DegenerateDataset);
    }
    let mut counts = vec![0usize; n_classes];
    for &y in ys {
        counts[y] += 1;
    }
    if counts.iter().any(|&c| c < 2) {
        return Err(LearnError::DegenerateDataset);
    }
    Ok(n_classes)
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| LearnError::BadModelFile("truncated".into()))?;
        self.pos += n;
        Ok(s)
    }
    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
    pub fn expect_header(&mut self, kind: u8) -> Result<()> {
        if self.take(4)? != MAGIC {
            return Err(LearnError::BadModelFile("wrong magic".into()));
        }
        if self.u8()? != kind {
            return Err(LearnError::BadModelFile("wrong model kind".into()));
        }
        if self.u8()? != FORMAT_VERSION {
            return Err(LearnError::BadModelFile("unsupported version".into()));
        }
        Ok(())
    }
}
