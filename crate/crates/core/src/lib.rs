pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod evaluation;
pub mod flow_net;
pub mod geometry;
pub mod graph;
pub mod io;
pub mod losses;
pub mod neural_warp;
pub mod nn;
pub mod raw_pipeline;
pub mod reconstruction;
pub mod tensor;
pub mod training;
