//! Toolkit for attacking binary-code authorship classifiers.
//!
//! The pipeline has three stages, each usable on its own:
//!
//! 1. **Train**: extract instruction features from ELF64 binaries with two
//!    disassembly front-ends (a whole-file linear sweep and a symbol-guided
//!    code sweep), select features by information gain, and train a random
//!    forest target classifier plus a feed-forward substitute network.
//! 2. **Search**: generate adversarial feature vectors in a
//!    correlation-merged feature space with random, PGD, and CW-L0
//!    strategies, then post-process them down to a handful of changed
//!    features.
//! 3. **Rewrite**: translate the surviving feature deltas into concrete ELF
//!    edits (new sections, symbols, imports, trampolines) that preserve the
//!    program's run-time behaviour while flipping the classifier's verdict.
//!
//! See the `examples/` directory for one runnable program per capability and
//! the `ghostwriter` binary for the batch command-line interface.

pub mod correlation;
pub mod decoder;
pub mod elf;
pub mod features;
pub mod harness;
pub mod learners;
pub mod rewriter;
pub mod vecmod;

pub use elf::ElfImage;
pub use features::{FeatureKey, FeatureTable, FeatureVector};
