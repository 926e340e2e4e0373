pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod env;
pub mod expert;
pub mod graph;
pub mod injector;
pub mod params;
pub mod pipeline;
pub mod policy;
pub mod seeding;
pub mod surgeon;
pub mod tensor;
pub mod train;
