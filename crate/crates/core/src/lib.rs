pub mod analysis;
pub mod attention;
pub mod encoders;
pub mod error;
pub mod graph;
pub mod numerics;
pub mod pipeline;
pub mod qformer;

pub use error::{Error, Result};
pub use graph::{Modality, MultimodalGraph, NodeId, NodeRecord, Subgraph, SubgraphPolicy};
pub use numerics::{Matrix, Parameter, SeededRng};
