pub mod cdk;
pub mod cluster;
pub mod codebook;
pub mod delaunay;
pub mod error;
pub mod graph;
pub mod keypoint;
pub mod pipeline;
pub mod retrieval;
pub mod signature;
pub mod synthetic;
