pub mod autodiff;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod matcher;
pub mod meta;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pca;
pub mod smiles;
pub mod synth;
pub mod taskrel;

pub use autodiff::{Gradients, Graph, Tensor, Var};
pub use error::{Error, Result};
pub use model::{EncoderParams, MatchParams, ModelConfig, ModelParams};
pub use smiles::{mol_from_smiles, MolGraph, SmilesError};
