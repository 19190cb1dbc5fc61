pub mod data;
pub mod error;
pub mod nn;
pub mod optim;
pub mod search;
pub mod simplex;
pub mod supernet;
pub mod tensor;

pub use data::{synth_blobs, Dataset, Split};
pub use error::{Error, Result};
pub use search::{search, Algorithm, SearchConfig, SearchOutcome, SearchTrace};
pub use simplex::{AnnealSchedule, SimplexVector};
pub use supernet::{AlphaParams, Genotype, OpKind};
pub use tensor::{Elem, Tensor};
