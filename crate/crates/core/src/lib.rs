//! Tooling for squeezing a trained transformer into a cheaper heterogeneous one.
//!
//! The crate is organized as a chain of stages that each consume the previous
//! stage's output:
//!
//! - [`arch_cost`]: parent architecture and the analytic cost model.
//! - [`block_library`]: per-layer block variants scored by local distillation.
//! - [`search`]: exact one-variant-per-layer selection under deployment constraints.
//! - [`ffn_fusion`]: collapses runs of attention-free blocks into one wide FFN.
//! - [`pipeline_planner`]: (tp, pp, cp, dp) planning with per-GPU memory accounting.
//! - [`rl_curriculum`]: pass-rate filtering, progressive batching and group advantages.
//! - [`cli`]: config parsing, artifact I/O and the orchestrating pipeline.

pub mod arch_cost;
pub mod block_library;
pub mod cli;
pub mod ffn_fusion;
pub mod linalg;
pub mod pipeline_planner;
pub mod rl_curriculum;
pub mod search;
pub mod seed;

pub use arch_cost::{BlockVariantSpec, CostModel, CostVector, ParentArch, Precision};
pub use block_library::{Catalog, CatalogEntry, ParentBlock, ScoredVariant};
pub use ffn_fusion::{FusableRun, FusedBlock};
pub use pipeline_planner::{ClusterShape, ParallelismPlan};
pub use rl_curriculum::{CurriculumPlan, PassRateRecord};
pub use search::{ConstraintSet, PuzzleSolution};
