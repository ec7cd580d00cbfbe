//! Plackett-Luce ranking models with dynamic covariates on hypergraphs.

pub mod error;
pub mod design;
pub mod estimate;
pub mod experiments;
pub mod hypergraph;
pub mod io;
pub mod lp;
pub mod model;
pub mod randgraph;
pub mod rng;

pub use error::{Error, Result};
pub use hypergraph::Hypergraph;
pub use model::{Comparison, Dataset, Params};
