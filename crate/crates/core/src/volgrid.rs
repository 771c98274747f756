//! Grid containers, raw volume I/O and slice extraction.
//!
//! All grids are stored x-fastest: the linear index of voxel `(x, y, z)` is
//! `x + nx * (y + ny * z)`. On disk a volume is a headerless little-endian
//! payload plus a sidecar text file `<payload>.meta` holding
//!
//! ```text
//! dims=<nx>,<ny>,<nz>
//! spacing_um=<float>
//! element=<u8|u16|u32|bit>
//! ```
//!
//! Bit volumes are packed 8 voxels per byte, least significant bit first.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Extent of a 3D grid in voxels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims { nx, ny, nz }
    }

    pub fn cube(n: usize) -> Self {
        Dims::new(n, n, n)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let x = idx % self.nx;
        let rest = idx / self.nx;
        (x, rest % self.ny, rest / self.ny)
    }

    /// Index of `(x, y, z)` if it lies inside the grid.
    #[inline]
    pub fn checked_index(&self, x: i64, y: i64, z: i64) -> Option<usize> {
        if x < 0 || y < 0 || z < 0 {
            return None;
        }
        let (x, y, z) = (x as usize, y as usize, z as usize);
        if x >= self.nx || y >= self.ny || z >= self.nz {
            return None;
        }
        Some(self.index(x, y, z))
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn center(&self) -> [f64; 3] {
        [
            (self.nx as f64 - 1.0) / 2.0,
            (self.ny as f64 - 1.0) / 2.0,
            (self.nz as f64 - 1.0) / 2.0,
        ]
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

/// Dense 3D grid with voxel spacing in micrometers.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid3<T> {
    dims: Dims,
    spacing: f64,
    data: Vec<T>,
}

/// 16-bit grayscale volume.
pub type ScalarVolume = Grid3<u16>;
/// Foreground mask.
pub type BinaryVolume = Grid3<bool>;
/// Integer labeling; 0 is background.
pub type LabelVolume = Grid3<u32>;
/// Real-valued volume (distance maps, gradients, predictions).
pub type RealGrid = Grid3<f64>;

impl<T> Grid3<T> {
    pub fn from_vec(dims: Dims, spacing: f64, data: Vec<T>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Dimension(format!("dims must be positive, got {dims}")));
        }
        if data.len() != dims.len() {
            return Err(Error::Dimension(format!(
                "data length {} does not match dims {dims} ({} voxels)",
                data.len(),
                dims.len()
            )));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::InvalidParameter(format!("spacing must be > 0, got {spacing}")));
        }
        Ok(Grid3 { dims, spacing, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> &T {
        &self.data[self.dims.index(x, y, z)]
    }

    #[inline]
    pub fn at(&self, idx: usize) -> &T {
        &self.data[idx]
    }

    /// Value at signed coordinates, `None` outside the grid.
    #[inline]
    pub fn get_checked(&self, x: i64, y: i64, z: i64) -> Option<&T> {
        self.dims.checked_index(x, y, z).map(|i| &self.data[i])
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, value: T) {
        let i = self.dims.index(x, y, z);
        self.data[i] = value;
    }

    /// New grid with the same geometry and `f` applied to every voxel.
    pub fn map<U, F: Fn(&T) -> U>(&self, f: F) -> Grid3<U> {
        Grid3 {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// Same geometry, different payload.
    pub fn with_data<U>(&self, data: Vec<U>) -> Result<Grid3<U>> {
        Grid3::from_vec(self.dims, self.spacing, data)
    }

    pub fn same_shape<U>(&self, other: &Grid3<U>) -> bool {
        self.dims == other.dims
    }
}

impl<T: Clone> Grid3<T> {
    pub fn filled(dims: Dims, spacing: f64, value: T) -> Result<Self> {
        Grid3::from_vec(dims, spacing, vec![value; dims.len()])
    }
}

impl<T: Clone + Default> Grid3<T> {
    pub fn zeros(dims: Dims, spacing: f64) -> Result<Self> {
        Grid3::filled(dims, spacing, T::default())
    }
}

impl BinaryVolume {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

impl LabelVolume {
    pub fn max_label(&self) -> u32 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    pub fn foreground(&self) -> BinaryVolume {
        self.map(|&l| l > 0)
    }

    /// Renumbers labels to the contiguous range `1..=L` in order of first
    /// appearance in scan order. Returns the new volume and `L`.
    pub fn relabel_sequential(&self) -> (LabelVolume, u32) {
        let mut map = std::collections::HashMap::new();
        let mut next = 0u32;
        let data = self
            .data
            .iter()
            .map(|&l| {
                if l == 0 {
                    0
                } else {
                    *map.entry(l).or_insert_with(|| {
                        next += 1;
                        next
                    })
                }
            })
            .collect();
        (
            Grid3 {
                dims: self.dims,
                spacing: self.spacing,
                data,
            },
            next,
        )
    }
}

/// Dense 2D grid, x-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid2<T> {
    nx: usize,
    ny: usize,
    spacing: f64,
    data: Vec<T>,
}

/// Mineral-code image; 0 is background.
pub type LabelPlane = Grid2<u8>;
/// Binary section image.
pub type BinaryPlane = Grid2<bool>;

impl<T> Grid2<T> {
    pub fn from_vec(nx: usize, ny: usize, spacing: f64, data: Vec<T>) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::Dimension(format!("plane dims must be positive, got {nx}x{ny}")));
        }
        if data.len() != nx * ny {
            return Err(Error::Dimension(format!(
                "plane data length {} does not match {nx}x{ny}",
                data.len()
            )));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::InvalidParameter(format!("spacing must be > 0, got {spacing}")));
        }
        Ok(Grid2 { nx, ny, spacing, data })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        x + self.nx * y
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[x + self.nx * y]
    }

    #[inline]
    pub fn get_checked(&self, x: i64, y: i64) -> Option<&T> {
        if x < 0 || y < 0 || x as usize >= self.nx || y as usize >= self.ny {
            None
        } else {
            Some(&self.data[x as usize + self.nx * y as usize])
        }
    }

    pub fn set(&mut self, x: usize, y: usize, value: T) {
        let i = x + self.nx * y;
        self.data[i] = value;
    }

    pub fn map<U, F: Fn(&T) -> U>(&self, f: F) -> Grid2<U> {
        Grid2 {
            nx: self.nx,
            ny: self.ny,
            spacing: self.spacing,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// Plane viewed as a one-voxel-thick volume.
    pub fn to_volume(&self) -> Grid3<T>
    where
        T: Clone,
    {
        Grid3 {
            dims: Dims::new(self.nx, self.ny, 1),
            spacing: self.spacing,
            data: self.data.clone(),
        }
    }
}

impl<T: Clone> Grid2<T> {
    pub fn filled(nx: usize, ny: usize, spacing: f64, value: T) -> Result<Self> {
        Grid2::from_vec(nx, ny, spacing, vec![value; nx * ny])
    }
}

impl BinaryPlane {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            other => Err(Error::Parse(format!("unknown axis '{other}'"))),
        }
    }
}

/// Planar section of a volume perpendicular to `axis`.
///
/// Plane coordinates `(i, j)` are `(x, y)` for a z-slice, `(x, z)` for a
/// y-slice and `(y, z)` for an x-slice.
pub fn extract_slice<T: Clone>(vol: &Grid3<T>, axis: Axis, index: usize) -> Result<Grid2<T>> {
    let d = vol.dims;
    let (limit, nx, ny) = match axis {
        Axis::X => (d.nx, d.ny, d.nz),
        Axis::Y => (d.ny, d.nx, d.nz),
        Axis::Z => (d.nz, d.nx, d.ny),
    };
    if index >= limit {
        return Err(Error::Dimension(format!(
            "slice index {index} out of range for axis {axis:?} of length {limit}"
        )));
    }
    let mut data = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let v = match axis {
                Axis::X => vol.get(index, i, j),
                Axis::Y => vol.get(i, index, j),
                Axis::Z => vol.get(i, j, index),
            };
            data.push(v.clone());
        }
    }
    Grid2::from_vec(nx, ny, vol.spacing, data)
}

/// On-disk voxel element type.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Element {
    U8,
    U16,
    U32,
    Bit,
}

impl Element {
    /// Payload size in bytes for `n` voxels.
    pub fn payload_len(self, n: usize) -> usize {
        match self {
            Element::U8 => n,
            Element::U16 => 2 * n,
            Element::U32 => 4 * n,
            Element::Bit => n.div_ceil(8),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Element::U8 => "u8",
            Element::U16 => "u16",
            Element::U32 => "u32",
            Element::Bit => "bit",
        }
    }
}

impl FromStr for Element {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "u8" => Ok(Element::U8),
            "u16" => Ok(Element::U16),
            "u32" => Ok(Element::U32),
            "bit" => Ok(Element::Bit),
            other => Err(Error::Parse(format!("unknown element type '{other}'"))),
        }
    }
}

/// A volume loaded from disk, tagged by element type.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyVolume {
    U8(Grid3<u8>),
    U16(ScalarVolume),
    U32(LabelVolume),
    Bit(BinaryVolume),
}

impl AnyVolume {
    pub fn element(&self) -> Element {
        match self {
            AnyVolume::U8(_) => Element::U8,
            AnyVolume::U16(_) => Element::U16,
            AnyVolume::U32(_) => Element::U32,
            AnyVolume::Bit(_) => Element::Bit,
        }
    }

    pub fn dims(&self) -> Dims {
        match self {
            AnyVolume::U8(v) => v.dims(),
            AnyVolume::U16(v) => v.dims(),
            AnyVolume::U32(v) => v.dims(),
            AnyVolume::Bit(v) => v.dims(),
        }
    }

    pub fn into_scalar(self) -> Result<ScalarVolume> {
        match self {
            AnyVolume::U16(v) => Ok(v),
            AnyVolume::U8(v) => Ok(v.map(|&x| x as u16)),
            other => Err(Error::Contract(format!(
                "expected a grayscale volume, got element {}",
                other.element().name()
            ))),
        }
    }

    pub fn into_binary(self) -> Result<BinaryVolume> {
        match self {
            AnyVolume::Bit(v) => Ok(v),
            AnyVolume::U8(v) => Ok(v.map(|&x| x != 0)),
            other => Err(Error::Contract(format!(
                "expected a binary volume, got element {}",
                other.element().name()
            ))),
        }
    }

    pub fn into_labels(self) -> Result<LabelVolume> {
        match self {
            AnyVolume::U32(v) => Ok(v),
            AnyVolume::U16(v) => Ok(v.map(|&x| x as u32)),
            AnyVolume::U8(v) => Ok(v.map(|&x| x as u32)),
            AnyVolume::Bit(v) => Ok(v.map(|&x| x as u32)),
        }
    }
}

/// Sidecar metadata describing a raw payload.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VolumeMeta {
    pub dims: Dims,
    pub spacing: f64,
    pub element: Element,
}

impl VolumeMeta {
    pub fn to_text(&self) -> String {
        format!(
            "dims={},{},{}\nspacing_um={}\nelement={}\n",
            self.dims.nx,
            self.dims.ny,
            self.dims.nz,
            self.spacing,
            self.element.name()
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut dims = None;
        let mut spacing = None;
        let mut element = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("malformed metadata line '{line}'")))?;
            match key.trim() {
                "dims" => {
                    let parts: Vec<usize> = value
                        .split(',')
                        .map(|p| p.trim().parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| Error::Parse(format!("bad dims '{value}': {e}")))?;
                    if parts.len() != 3 {
                        return Err(Error::Parse(format!("dims needs 3 entries, got '{value}'")));
                    }
                    dims = Some(Dims::new(parts[0], parts[1], parts[2]));
                }
                "spacing_um" => {
                    spacing = Some(
                        value
                            .trim()
                            .parse::<f64>()
                            .map_err(|e| Error::Parse(format!("bad spacing '{value}': {e}")))?,
                    );
                }
                "element" => element = Some(value.parse::<Element>()?),
                other => return Err(Error::Parse(format!("unknown metadata key '{other}'"))),
            }
        }
        Ok(VolumeMeta {
            dims: dims.ok_or_else(|| Error::Parse("metadata lacks dims".into()))?,
            spacing: spacing.ok_or_else(|| Error::Parse("metadata lacks spacing_um".into()))?,
            element: element.ok_or_else(|| Error::Parse("metadata lacks element".into()))?,
        })
    }
}

/// Path of the sidecar metadata file belonging to a payload.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Reads a raw payload with explicitly given geometry.
pub fn read_volume(path: &Path, dims: Dims, spacing: f64, element: Element) -> Result<AnyVolume> {
    if dims.is_empty() {
        return Err(Error::Dimension(format!("dims must be positive, got {dims}")));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_payload(&bytes, dims, spacing, element)
}

/// Reads a payload whose geometry comes from its sidecar file.
pub fn load_volume(path: &Path) -> Result<AnyVolume> {
    let meta_file = meta_path(path);
    let text = fs::read_to_string(&meta_file).map_err(|e| Error::io(&meta_file, e))?;
    let meta = VolumeMeta::parse(&text)?;
    read_volume(path, meta.dims, meta.spacing, meta.element)
}

fn decode_payload(bytes: &[u8], dims: Dims, spacing: f64, element: Element) -> Result<AnyVolume> {
    let n = dims.len();
    let expected = element.payload_len(n);
    if bytes.len() != expected {
        return Err(Error::Dimension(format!(
            "payload has {} bytes, {dims} {} needs {expected}",
            bytes.len(),
            element.name()
        )));
    }
    Ok(match element {
        Element::U8 => AnyVolume::U8(Grid3::from_vec(dims, spacing, bytes.to_vec())?),
        Element::U16 => AnyVolume::U16(Grid3::from_vec(
            dims,
            spacing,
            bytes
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect(),
        )?),
        Element::U32 => AnyVolume::U32(Grid3::from_vec(
            dims,
            spacing,
            bytes
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        )?),
        Element::Bit => AnyVolume::Bit(Grid3::from_vec(
            dims,
            spacing,
            (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect(),
        )?),
    })
}

fn encode_payload(vol: &AnyVolume) -> Vec<u8> {
    match vol {
        AnyVolume::U8(v) => v.data().to_vec(),
        AnyVolume::U16(v) => v.data().iter().flat_map(|x| x.to_le_bytes()).collect(),
        AnyVolume::U32(v) => v.data().iter().flat_map(|x| x.to_le_bytes()).collect(),
        AnyVolume::Bit(v) => {
            let mut out = vec![0u8; Element::Bit.payload_len(v.len())];
            for (i, &b) in v.data().iter().enumerate() {
                if b {
                    out[i / 8] |= 1 << (i % 8);
                }
            }
            out
        }
    }
}

/// Writes the payload and its sidecar metadata.
pub fn write_volume(path: &Path, vol: &AnyVolume) -> Result<()> {
    let (dims, spacing) = match vol {
        AnyVolume::U8(v) => (v.dims(), v.spacing()),
        AnyVolume::U16(v) => (v.dims(), v.spacing()),
        AnyVolume::U32(v) => (v.dims(), v.spacing()),
        AnyVolume::Bit(v) => (v.dims(), v.spacing()),
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, encode_payload(vol)).map_err(|e| Error::io(path, e))?;
    let meta = VolumeMeta {
        dims,
        spacing,
        element: vol.element(),
    };
    let meta_file = meta_path(path);
    fs::write(&meta_file, meta.to_text()).map_err(|e| Error::io(&meta_file, e))
}

/// Index reflected into `0..n` without repeating the edge sample
/// (`... 2 1 | 0 1 2 ... n-1 | n-2 ...`).
#[inline]
pub fn reflect_index(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as i64 {
        m = period - m;
    }
    m as usize
}

/// Neighbor offsets of the 6- or 26-neighborhood.
pub fn neighbor_offsets(connectivity: u8) -> Vec<[i64; 3]> {
    let mut out = Vec::with_capacity(26);
    for dz in -1i64..=1 {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let l1 = dx.abs() + dy.abs() + dz.abs();
                if l1 == 0 || (connectivity == 6 && l1 > 1) {
                    continue;
                }
                out.push([dx, dy, dz]);
            }
        }
    }
    out
}
