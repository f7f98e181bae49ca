pub mod numerics;
pub mod frontend;
pub mod params;
pub mod text_encoder;
pub mod classifier;
pub mod negatives;
pub mod metrics;
pub mod data;
pub mod training;
pub mod inference;
