pub mod analyze;
pub mod compare;
pub mod passk;
pub mod refine;

use crate::CliError;
use std::path::Path;

pub(crate) fn ensure_out_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

pub(crate) fn path_string(path: &Path) -> String {
    path.display().to_string()
}
