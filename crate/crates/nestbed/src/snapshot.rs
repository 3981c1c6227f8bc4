//! Binary snapshots of filter runs.
//!
//! A snapshot freezes one [`FilterHistory`] — every frame, particle,
//! inner-posterior state, and recorded weight — so smoothing passes and
//! degeneracy diagnostics can run offline against exactly the history the
//! filter produced. The format is a fixed magic, a format version, and a
//! bincode payload; the version is checked before any payload bytes are
//! touched, so a snapshot from a different format generation fails with a
//! typed error instead of a deserialization panic deep inside the payload.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::filter::FilterHistory;

const MAGIC: &[u8; 8] = b"NESTSNAP";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum SnapshotError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not a filter snapshot (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("{path} has snapshot version {found}, this build reads {expected}")]
    VersionMismatch { path: PathBuf, found: u32, expected: u32 },
    #[error("{path} payload is corrupt: {source}")]
    Corrupt {
        path: PathBuf,
        #[source]
        source: bincode::Error,
    },
}

/// Write `history` to `path`, replacing any existing file.
pub fn save_history(history: &FilterHistory, path: &Path) -> Result<(), SnapshotError> {
    let io_err = |source| SnapshotError::Io { path: path.to_path_buf(), source };
    let mut file = std::fs::File::create(path).map_err(io_err)?;
    file.write_all(MAGIC).map_err(io_err)?;
    file.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    bincode::serialize_into(&mut file, history).map_err(|source| SnapshotError::Corrupt {
        path: path.to_path_buf(),
        source,
    })?;
    file.flush().map_err(io_err)
}

/// Read a snapshot back; the exact inverse of [`save_history`].
pub fn load_history(path: &Path) -> Result<FilterHistory, SnapshotError> {
    let io_err = |source| SnapshotError::Io { path: path.to_path_buf(), source };
    let mut file = std::fs::File::open(path).map_err(io_err)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(SnapshotError::BadMagic { path: path.to_path_buf() });
    }
    let mut version = [0u8; 4];
    file.read_exact(&mut version).map_err(io_err)?;
    let found = u32::from_le_bytes(version);
    if found != VERSION {
        return Err(SnapshotError::VersionMismatch {
            path: path.to_path_buf(),
            found,
            expected: VERSION,
        });
    }
    bincode::deserialize_from(&mut file).map_err(|source| SnapshotError::Corrupt {
        path: path.to_path_buf(),
        source,
    })
}
