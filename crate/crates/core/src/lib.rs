mod cmat;
pub mod error;
pub mod green;
pub mod grid;
pub mod logdet;
pub mod model;
pub mod operator;
pub mod optim;
pub mod oracle;
pub mod simulate;
pub mod solve;

pub use error::{Error, Result};
