pub mod corpus;
pub mod density;
pub mod geometry;
pub mod novelty;
pub mod probes;
pub mod report;
pub mod retrieval;
pub mod similarity;
pub mod stats;
pub mod topology;
