//! Error-feedback compressed preconditioners.
//!
//! Gradients are compressed (block Top-k or low-rank) with error feedback,
//! kept in a ring window of the last `m` compressed gradients, and used to
//! precondition updates with M-FAC (inverse empirical Fisher) or GGT
//! (full-matrix AdaGrad). Everything reduces to two window kernels: the
//! product of every stored row with a vector ([`GradientWindow::sp`]) and a
//! linear combination of stored rows ([`GradientWindow::lcg`]).

pub mod compress;
pub mod error;
pub mod ggt;
pub mod linalg;
pub mod lowrank;
pub mod memory;
pub mod mfac;
pub mod optim;
pub mod tasks;
pub mod verify;
pub mod window;

pub use compress::{
    block_quota, power_compress, topk_block, unfold_dims, BlockLayout, Compressed, Compressor,
    Densify, ErrorFeedback, Identity, LowRankCompressed, Precision, SparseCompressed, TopK,
};
pub use error::{EfcpError, Result};
pub use ggt::Ggt;
pub use linalg::{orthogonalize, sym_eig, DenseMatrix, EigenDecomposition};
pub use lowrank::{LowRankConfig, LowRankMfac};
pub use memory::{MemoryReport, WindowAccounting};
pub use mfac::{Coefficients, Mfac};
pub use optim::{
    run, run_task, OptimizerKind, RunArtifacts, RunConfig, RunMemory, RunOptions, Schedule,
    StepRecord, TaskSpec,
};
pub use tasks::{Dataset, Task, TaskKind};
pub use window::{DenseGradWindow, GradientWindow, RingCursor, SparseGradWindow};
