//! Visual planning and acting on simulated block-manipulation worlds.
//!
//! The crate learns a causal generative model from self-supervised
//! interaction data, plans goal-directed trajectories in its latent space
//! (linear interpolation or classifier-pruned weighted A*), executes plans
//! with a learned inverse-dynamics controller, and benchmarks against a
//! batch-RL baseline.
//!
//! Start with the runnable examples, one per capability:
//!
//! ```text
//! cargo run --release --example collect_dataset
//! cargo run --release --example train_generative_stack
//! cargo run --release --example plan_with_interpolation
//! cargo run --release --example plan_with_astar
//! cargo run --release --example execute_vpa
//! cargo run --release --example select_plans
//! cargo run --release --example batch_rl_baseline
//! cargo run --release --example two_block_pipeline
//! cargo run --release --example block_wall_pipeline
//! cargo run --release --example context_generalization
//! ```
//!
//! The same capabilities are reachable through the thin `vpa` binary
//! (`vpa collect`, `vpa train-cigan`, `vpa plan`, ...).

pub mod baseline;
pub mod cigan;
pub mod config;
pub mod control;
pub mod data;
pub mod env;
pub mod error;
pub mod grid;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod planner;
pub mod report;
pub mod select;

pub use error::{Result, VpaError};

/// Progress lines on stderr; silence with `VPA_QUIET=1`.
#[macro_export]
macro_rules! progress {
    ($($arg:tt)*) => {
        if std::env::var_os("VPA_QUIET").is_none() {
            eprintln!($($arg)*);
        }
    };
}
