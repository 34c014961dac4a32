use std::fs;
use std::path::PathBuf;

use chrono::Utc;

use mpcn::error::{MpcnError, Result};

/// Output root: `MPCN_RUN_DIR` if set, `./runs` otherwise.
pub fn run_root() -> PathBuf {
    std::env::var_os("MPCN_RUN_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Creates `<root>/<kind>-<timestamp>-seed<seed>`, suffixing a counter when
/// several runs land in the same second.
pub fn create_run_dir(kind: &str, seed: u64) -> Result<PathBuf> {
    let stamp = Utc::now().format("%Y%m%d-%H%M%S");
    let base = run_root().join(format!("{kind}-{stamp}-seed{seed}"));
    for attempt in 0..1000u32 {
        let candidate = if attempt == 0 {
            base.clone()
        } else {
            base.with_file_name(format!(
                "{}-{}",
                base.file_name().unwrap().to_string_lossy(),
                attempt + 1
            ))
        };
        match fs::create_dir_all(candidate.parent().unwrap())
            .and_then(|_| fs::create_dir(&candidate))
        {
            Ok(()) => return Ok(candidate),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(MpcnError::Io(e)),
        }
    }
    Err(MpcnError::config("could not allocate a fresh run directory"))
}
