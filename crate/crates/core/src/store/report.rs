use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::container::{load_container, save_container};
use crate::error::{Error, FormatError, Result};

pub const REPORT_KIND: &str = "report";

/// Saves a structured report as a tensor-free container; `name` tells
/// report types apart.
pub fn save_report<T: Serialize>(path: &Path, name: &str, report: &T) -> Result<()> {
    let body = serde_json::to_value(report).map_err(|e| Error::Config(format!("unserializable report: {e}")))?;
    let meta = serde_json::json!({ "name": name, "body": body });
    save_container(path, REPORT_KIND, meta, &[])
}

/// Loads a report saved under `name`.
pub fn load_report<T: DeserializeOwned>(path: &Path, name: &str) -> Result<T> {
    let c = load_container(path)?;
    let bad = |detail: String| -> Error { FormatError::Header(detail).into() };
    if c.kind() != REPORT_KIND {
        return Err(bad(format!("expected a {REPORT_KIND} container, found `{}`", c.kind())));
    }
    let found = c.meta().get("name").and_then(|v| v.as_str()).unwrap_or_default();
    if found != name {
        return Err(bad(format!("expected report `{name}`, found `{found}`")));
    }
    let body = c.meta().get("body").cloned().ok_or_else(|| bad("report has no body".into()))?;
    serde_json::from_value(body).map_err(|e| bad(e.to_string()))
}
