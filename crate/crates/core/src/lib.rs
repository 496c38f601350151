mod binio;
pub mod analysis;
pub mod codebook;
pub mod data;
pub mod diagnostics;
pub mod encoders;
pub mod error;
pub mod losses;
pub mod training;
pub mod modality;
pub mod numerics;

pub use error::{Error, FormatError, Result};
pub use modality::{GridShape, Modality};
