pub mod convert;
pub mod eval;
pub mod gradcheck;
pub mod synth;
pub mod train;

use std::path::PathBuf;

use gmtl_core::{Error, Result};

/// Dataset root from --data, falling back to $GMTL_DATA_ROOT.
pub fn data_root(flag: Option<PathBuf>) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p);
    }
    match std::env::var_os("GMTL_DATA_ROOT") {
        Some(v) if !v.is_empty() => Ok(PathBuf::from(v)),
        _ => Err(Error::Config(
            "no dataset given: pass --data or set GMTL_DATA_ROOT".into(),
        )),
    }
}
