pub mod csvio;
pub mod engine;
pub mod error;
pub mod exec;
pub mod expr;
pub mod oracle;
pub mod plan;
pub mod policy;
pub mod provenance;
pub mod rewrite;
pub mod schema;
pub mod sql;
pub mod testkit;
pub mod value;
