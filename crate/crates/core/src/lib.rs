pub mod channel;
pub mod env;
pub mod error;
pub mod experiments;
pub mod instances;
pub mod learner;
pub mod ledger;
pub mod oracle;
pub mod topology;
pub mod traffic;

pub use error::{Error, Result};
