//! Debug host for the mcds model.
//!
//! A [`Session`] owns one simulated device with its debug fabric. It is
//! driven by [`Command`]s, either directly (CLI, shell) or through the
//! single-writer [`api`] actor that backs the HTTP interface and the XCP
//! TCP transport.

pub mod api;
pub mod config;
pub mod export;
pub mod session;
pub mod shell;
pub mod xcp_tcp;

pub use config::{ConfigError, SessionConfig, Violation};
pub use session::{Command, ControlError, Phase, Session, SessionState};
