//! Phase-boundary localization in long therapy-session recordings.

pub mod eval;
pub mod ingest;
pub mod net;
pub mod optim;
pub mod scalar;
pub mod session;
pub mod supervision;
pub mod synth;
pub mod windowing;

pub type Model32 = net::Model<f32>;
pub type Model64 = net::Model<f64>;
pub type TrainableParams32 = net::TrainableParams<f32>;
pub type EncodedExample32 = eval::EncodedExample<f32>;
