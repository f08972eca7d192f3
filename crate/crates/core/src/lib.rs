pub mod acceptance;
pub mod error;
pub mod harness;
pub mod ls;
pub mod model;
pub mod report;
pub mod stats;
pub mod svd;
pub mod tls;
