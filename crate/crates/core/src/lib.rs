pub mod config;
pub mod datagen;
pub mod evaluation;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod theory;
pub mod trainer;
