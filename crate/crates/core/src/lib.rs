//! Approximate-multiplier emulation for quantized neural networks with
//! mixture-of-experts routing and a MAC/power cost model.
//!
//! * [`axmul`]: 8-bit signed multipliers as 256x256 product tables.
//! * [`quant`], [`ops`], [`net`]: int8 symmetric quantization and a small
//!   layer engine whose conv/linear layers multiply through a table.
//! * [`moe`]: hard, soft and cluster routing, and graph substitution.
//! * [`cost`]: MAC counts, approximate fraction, normalized power, Pareto.
//! * [`retrain`]: SGD training and straight-through retraining.
//! * [`data`], [`checkpoint`]: datasets and parameter files.

pub mod arch;
pub mod axmul;
pub mod checkpoint;
pub mod cost;
pub mod data;
pub mod error;
pub mod graph;
pub mod moe;
pub mod net;
pub mod ops;
pub mod par;
pub mod quant;
pub mod retrain;
pub mod tensor;

pub use axmul::{build_exact_multiplier, build_truncation_multiplier, error_stats, AxMultiplier, ErrorStats};
pub use cost::{count_macs, effective_macs, normalized_power, pareto_frontier, MacReport, SweepPoint};
pub use error::{Error, Result};
pub use graph::{ArchSpec, ArithmeticMode, ModelGraph, Variant};
pub use net::{ExecCtx, ExecStats, Model, Network};
pub use ops::Arithmetic;
pub use tensor::Tensor;
