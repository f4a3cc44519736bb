//! Crate-wide error type for enforcement entry points.

use thiserror::Error;

use crate::csvio::DataError;
use crate::exec::ExecError;
use crate::plan::PlanError;
use crate::policy::PolicyError;
use crate::schema::SchemaError;
use crate::sql::{ParseError, RenderError};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("an applicable policy references current_user but the session provides none")]
    MissingCurrentUser,
    #[error("statement is not a {0}")]
    WrongStatementKind(&'static str),
}
