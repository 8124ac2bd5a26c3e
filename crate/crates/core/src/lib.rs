//! Imputation of mixed-type tables (numerical, categorical, text) with a cell
//! hypergraph, bidirectional hypergraph message passing and attention fusion
//! over a frozen text backbone.

pub mod autodiff;
pub mod baselines;
pub mod bihmp;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod hypergraph;
pub mod infer;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod masking;
pub mod scaler;
pub mod table;
pub mod train;

pub use error::{Error, Result};
pub use mask::MaskMatrix;
pub use table::{Cell, ColumnKind, Schema, Table};
