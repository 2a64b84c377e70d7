use std::path::{Path, PathBuf};

use iassl_core::data::Dataset;

use super::{create, ensure_dir, finish};
use crate::config::RunConfig;
use crate::error::Result;

/// Writes the config's dataset. `out` is taken as a file when it ends in
/// `.json`, otherwise as a directory receiving `dataset_<hash>.json`.
pub fn cmd_generate(config: &RunConfig, out: &Path) -> Result<PathBuf> {
    let data = config.load_data()?;
    let path = if out.extension().is_some_and(|e| e == "json") {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            ensure_dir(parent)?;
        }
        out.to_path_buf()
    } else {
        ensure_dir(out)?;
        out.join(format!("dataset_{}.json", config.hash()))
    };
    let dataset = Dataset {
        spec: data.spec,
        store: data.store,
    };
    let mut w = create(&path)?;
    dataset.write_json(&mut w)?;
    finish(&path, w)?;
    Ok(path)
}
