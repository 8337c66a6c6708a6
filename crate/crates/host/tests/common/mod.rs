#![allow(dead_code)]

use std::path::{Path, PathBuf};

use mcds_host::{Session, SessionConfig};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn golden() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

pub fn fixture_session(name: &str) -> Session {
    Session::load(&fixtures().join(name)).unwrap()
}

/// Builds a session from inline JSON, resolving files against the fixtures directory.
pub fn session_from(json: &str) -> Session {
    let cfg = SessionConfig::from_json(json).unwrap();
    Session::new(&cfg, &fixtures()).unwrap()
}
