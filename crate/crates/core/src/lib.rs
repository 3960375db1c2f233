pub mod augment;
pub mod cli;
pub mod data;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod trainer;
