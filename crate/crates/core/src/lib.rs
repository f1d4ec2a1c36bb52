pub mod autodiff;
pub mod harness;
pub mod lm;
pub mod metrics;
pub mod normal;
pub mod objectives;
pub mod smoothing;
