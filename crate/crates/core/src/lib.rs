//! Detail-faithfulness toolkit.

pub mod canonical;
pub mod jsonl;
pub mod metrics;
pub mod model;
pub mod perturb;
pub mod response;
pub mod seed;
pub mod synthgen;
pub mod templates;
pub mod toylm;

pub type ToyModelF64 = toylm::ToyModel<f64>;
pub type ToyModelF32 = toylm::ToyModel<f32>;
