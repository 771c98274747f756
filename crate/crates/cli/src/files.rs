//! Loading and saving volumes in the forms the subcommands need.

use std::path::Path;

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};
use tomoseg_core::volgrid::{self, AnyVolume};
use tomoseg_core::{Axis, BinaryVolume, LabelPlane, LabelVolume, ScalarVolume};

pub fn load(path: &Path) -> Result<AnyVolume> {
    volgrid::load_volume(path).with_context(|| format!("reading {}", path.display()))
}

pub fn save(path: &Path, vol: AnyVolume) -> Result<()> {
    volgrid::write_volume(path, &vol).with_context(|| format!("writing {}", path.display()))
}

pub fn load_scalar(path: &Path) -> Result<ScalarVolume> {
    match load(path)? {
        AnyVolume::U16(v) => Ok(v),
        AnyVolume::U8(v) => Ok(v.map(|&x| x as u16)),
        other => bail!("{}: expected a u16 grayscale volume, found {}", path.display(), other.element().name()),
    }
}

/// Bit volumes as they are; label volumes by their nonzero voxels.
pub fn load_binary(path: &Path) -> Result<BinaryVolume> {
    Ok(match load(path)? {
        AnyVolume::Bit(v) => v,
        AnyVolume::U8(v) => v.map(|&x| x != 0),
        AnyVolume::U32(v) => v.foreground(),
        AnyVolume::U16(_) => bail!("{}: expected a binary or label volume, found u16", path.display()),
    })
}

pub fn load_labels(path: &Path) -> Result<LabelVolume> {
    Ok(match load(path)? {
        AnyVolume::U32(v) => v,
        AnyVolume::U8(v) => v.map(|&x| x as u32),
        other => bail!("{}: expected a label volume, found {}", path.display(), other.element().name()),
    })
}

/// A one-slice u8 or bit volume read as a mineral-code plane.
pub fn load_label_plane(path: &Path) -> Result<LabelPlane> {
    let vol = match load(path)? {
        AnyVolume::U8(v) => v,
        AnyVolume::Bit(v) => v.map(|&b| b as u8),
        other => bail!("{}: expected a u8 or bit plane, found {}", path.display(), other.element().name()),
    };
    if vol.dims().nz != 1 {
        bail!("{}: a plane must have nz = 1, got {}", path.display(), vol.dims());
    }
    Ok(volgrid::extract_slice(&vol, Axis::Z, 0)?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Hex SHA-256 of a file's bytes.
pub fn sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
