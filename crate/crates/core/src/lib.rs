//! Selective state-space blocks with repetitive contrastive pretraining.
//!
//! The crate covers a small reverse-mode [`graph`], the Mamba block
//! ([`mamba`]), repeated-step augmentation and contrastive losses ([`rcl`]),
//! a stacked forecaster with parameter transfer ([`forecaster`]),
//! selectivity metrics ([`selectivity`]), data handling ([`data`],
//! [`container`], [`config`]) and independent numerical oracles ([`verify`]).

pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod forecaster;
pub mod graph;
pub mod mamba;
pub mod optim;
pub mod rcl;
pub mod selectivity;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, NodeId};
pub use mamba::{BlockTrace, MambaConfig, MambaParams};
pub use tensor::Tensor;
