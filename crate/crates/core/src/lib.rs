pub mod binio;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fem;
pub mod forward;
pub mod inverse;
pub mod ionic;
pub mod ldnet;
pub mod monodomain;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod pecg;
pub mod plot;

pub use error::{Error, Result};
