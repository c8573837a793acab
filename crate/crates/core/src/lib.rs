//! Anti-spoofing back-end with nested multi-scale blocks and sliding-window
//! local attention, an open-set API tracer, a detection-metric stack
//! (EER, minDCF, actDCF, macro-F1), and a deterministic synthetic corpus,
//! all on a small double-precision autodiff core.

pub mod attention;
pub mod audio;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod detector;
pub mod error;
pub mod frontend;
pub mod gradcheck;
pub mod metrics;
pub mod nesblock;
pub mod optim;
pub mod scores;
pub mod seeds;
pub mod tape;
pub mod train;
pub mod tensor;
pub mod tracer;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
