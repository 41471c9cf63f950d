//! 3D scalar volumes, physical-space geometry, and MetaImage (.mhd/.raw) I/O.
//!
//! Voxel data is stored x-fastest (`idx = i + nx*(j + ny*k)`). Voxel centers
//! sit at `origin + index * spacing` (node-centered); axis directions are
//! always identity — a header carrying a non-identity `TransformMatrix` is
//! rejected rather than silently ignored.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Voxel-grid geometry: counts, physical spacing (mm) and origin (mm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry<T> {
    pub dims: [usize; 3],
    pub spacing: [T; 3],
    pub origin: [T; 3],
}

impl<T: Real> Geometry<T> {
    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// World position (mm) of the voxel center at integer index.
    pub fn index_to_world(&self, i: usize, j: usize, k: usize) -> Vector3<T> {
        Vector3::new(
            self.origin[0] + T::of(i as f64) * self.spacing[0],
            self.origin[1] + T::of(j as f64) * self.spacing[1],
            self.origin[2] + T::of(k as f64) * self.spacing[2],
        )
    }

    /// Continuous voxel index of a world point (inverse of `index_to_world`).
    pub fn world_to_index(&self, p: Vector3<T>) -> Vector3<T> {
        Vector3::new(
            (p.x - self.origin[0]) / self.spacing[0],
            (p.y - self.origin[1]) / self.spacing[1],
            (p.z - self.origin[2]) / self.spacing[2],
        )
    }

    /// Physical extent (mm) spanned by voxel centers along each axis.
    pub fn extent(&self) -> [T; 3] {
        let mut e = [T::zero(); 3];
        for a in 0..3 {
            e[a] = T::of((self.dims[a] - 1) as f64) * self.spacing[a];
        }
        e
    }

    /// World-space box spanned by the voxel centers: (low corner, high corner).
    pub fn world_bounds(&self) -> (Vector3<T>, Vector3<T>) {
        let lo = Vector3::new(self.origin[0], self.origin[1], self.origin[2]);
        let e = self.extent();
        (lo, lo + Vector3::new(e[0], e[1], e[2]))
    }
}

/// Inclusive voxel-index box used for volume-of-interest extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl BoundingBox {
    pub fn new(lo: [usize; 3], hi: [usize; 3]) -> Self {
        BoundingBox { lo, hi }
    }

    fn validate(&self, dims: [usize; 3]) -> Result<()> {
        for a in 0..3 {
            if self.lo[a] > self.hi[a] || self.hi[a] >= dims[a] {
                return Err(Error::BoxOutOfRange {
                    detail: format!("lo {:?} hi {:?}", self.lo, self.hi),
                    dims,
                });
            }
        }
        Ok(())
    }
}

/// A 3D scalar grid with physical spacing and origin; immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    geom: Geometry<T>,
    data: Vec<T>,
}

impl<T: Real> Volume<T> {
    pub fn new(dims: [usize; 3], spacing: [T; 3], origin: [T; 3], data: Vec<T>) -> Result<Self> {
        if dims.iter().any(|&d| d < 1) {
            return Err(Error::InvalidGeometry(format!(
                "dims {dims:?} must be >= 1 per axis"
            )));
        }
        if spacing.iter().any(|&s| s <= T::zero()) {
            return Err(Error::InvalidGeometry("spacing must be > 0 per axis".into()));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::InvalidGeometry(format!(
                "data length {} != {}x{}x{}",
                data.len(),
                dims[0],
                dims[1],
                dims[2]
            )));
        }
        Ok(Volume {
            geom: Geometry {
                dims,
                spacing,
                origin,
            },
            data,
        })
    }

    /// Build a volume by evaluating `f` at every voxel index.
    pub fn from_fn(
        dims: [usize; 3],
        spacing: [T; 3],
        origin: [T; 3],
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Volume::new(dims, spacing, origin, data)
    }

    pub fn geometry(&self) -> Geometry<T> {
        self.geom
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geom.dims
    }

    pub fn spacing(&self) -> [T; 3] {
        self.geom.spacing
    }

    pub fn origin(&self) -> [T; 3] {
        self.geom.origin
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn voxel_count(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.geom.dims[0] * (j + self.geom.dims[1] * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.linear_index(i, j, k)]
    }

    pub fn index_to_world(&self, i: usize, j: usize, k: usize) -> Vector3<T> {
        self.geom.index_to_world(i, j, k)
    }

    pub fn world_to_index(&self, p: Vector3<T>) -> Vector3<T> {
        self.geom.world_to_index(p)
    }

    pub fn min_max(&self) -> (T, T) {
        let mut lo = T::inf();
        let mut hi = T::neg_inf();
        for &v in &self.data {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        (lo, hi)
    }

    /// Apply `f` voxel-wise, keeping the geometry.
    pub fn map(&self, f: impl Fn(T) -> T) -> Volume<T> {
        Volume {
            geom: self.geom,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Extract the sub-volume covered by `bx` (inclusive bounds).
    ///
    /// Spacing is unchanged and the origin shifts by `lo * spacing`, so
    /// extracted voxels keep their world positions.
    pub fn extract_voi(&self, bx: BoundingBox) -> Result<Volume<T>> {
        bx.validate(self.geom.dims)?;
        let dims = [
            bx.hi[0] - bx.lo[0] + 1,
            bx.hi[1] - bx.lo[1] + 1,
            bx.hi[2] - bx.lo[2] + 1,
        ];
        let sp = self.geom.spacing;
        let origin = [
            self.geom.origin[0] + T::of(bx.lo[0] as f64) * sp[0],
            self.geom.origin[1] + T::of(bx.lo[1] as f64) * sp[1],
            self.geom.origin[2] + T::of(bx.lo[2] as f64) * sp[2],
        ];
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push(self.get(i + bx.lo[0], j + bx.lo[1], k + bx.lo[2]));
                }
            }
        }
        Volume::new(dims, sp, origin, data)
    }
}

// ---------------------------------------------------------------------------
// MetaImage I/O (uncompressed, little-endian, identity directions)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ElementType {
    Short,
    UShort,
    Float,
    Double,
}

impl ElementType {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "MET_SHORT" => Ok(ElementType::Short),
            "MET_USHORT" => Ok(ElementType::UShort),
            "MET_FLOAT" => Ok(ElementType::Float),
            "MET_DOUBLE" => Ok(ElementType::Double),
            other => Err(Error::UnsupportedElementType(other.to_string())),
        }
    }

    fn byte_size(self) -> usize {
        match self {
            ElementType::Short | ElementType::UShort => 2,
            ElementType::Float => 4,
            ElementType::Double => 8,
        }
    }
}

fn header_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Header {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn parse_triple<N: std::str::FromStr>(path: &Path, key: &str, value: &str) -> Result<[N; 3]> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(header_err(
            path,
            format!("{key} = \"{value}\" must hold exactly 3 values"),
        ));
    }
    let mut out: Vec<N> = Vec::with_capacity(3);
    for p in &parts {
        out.push(
            p.parse::<N>()
                .map_err(|_| header_err(path, format!("{key} value \"{p}\" is not numeric")))?,
        );
    }
    Ok([
        out.remove(0),
        out.remove(0),
        out.remove(0),
    ])
}

/// Load a MetaImage header (`.mhd`) and its raw data file, widening elements
/// to the scalar type `T`.
pub fn load_metaimage<T: Real>(path: impl AsRef<Path>) -> Result<Volume<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;

    let mut dims: Option<[usize; 3]> = None;
    let mut spacing = [1.0f64; 3];
    let mut origin = [0.0f64; 3];
    let mut elem_type: Option<ElementType> = None;
    let mut data_file: Option<String> = None;

    for raw_line in text.lines() {
        let line = raw_line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| header_err(path, format!("line \"{line}\" has no '='")))?;
        let key = key.trim();
        let value = value.trim();
        match key {
            "ObjectType" => {
                if value != "Image" {
                    return Err(header_err(path, format!("ObjectType = {value}, want Image")));
                }
            }
            "NDims" => {
                if value != "3" {
                    return Err(header_err(path, format!("NDims = {value}, only 3 supported")));
                }
            }
            "BinaryData" => {
                if !value.eq_ignore_ascii_case("true") {
                    return Err(header_err(path, "BinaryData must be True"));
                }
            }
            "CompressedData" => {
                if value.eq_ignore_ascii_case("true") {
                    return Err(header_err(path, "CompressedData = True is not supported"));
                }
            }
            "BinaryDataByteOrderMSB" | "ElementByteOrderMSB" => {
                if value.eq_ignore_ascii_case("true") {
                    return Err(header_err(path, format!("{key} = True: only little-endian raw data is supported")));
                }
            }
            "TransformMatrix" => {
                let vals: Vec<f64> = value
                    .split_whitespace()
                    .map(|v| v.parse::<f64>().unwrap_or(f64::NAN))
                    .collect();
                let identity = [1., 0., 0., 0., 1., 0., 0., 0., 1.];
                if vals.len() != 9 || vals.iter().zip(identity).any(|(a, b)| (a - b).abs() > 1e-9) {
                    return Err(header_err(
                        path,
                        "TransformMatrix is not identity; direction cosines are unsupported",
                    ));
                }
            }
            "DimSize" => {
                let d: [usize; 3] = parse_triple(path, key, value)?;
                dims = Some(d);
            }
            "ElementSpacing" => spacing = parse_triple(path, key, value)?,
            "Offset" | "Origin" | "Position" => origin = parse_triple(path, key, value)?,
            "ElementType" => elem_type = Some(ElementType::parse(value)?),
            "ElementDataFile" => {
                if value == "LOCAL" || value == "LIST" {
                    return Err(header_err(path, format!("ElementDataFile = {value} is not supported")));
                }
                data_file = Some(value.to_string());
            }
            // Other MetaImage keys carry no geometry we honor; skip them.
            _ => {}
        }
    }

    let dims = dims.ok_or_else(|| header_err(path, "missing DimSize"))?;
    let elem_type = elem_type.ok_or_else(|| header_err(path, "missing ElementType"))?;
    let data_file = data_file.ok_or_else(|| header_err(path, "missing ElementDataFile"))?;
    if dims.iter().any(|&d| d == 0) {
        return Err(header_err(path, format!("DimSize {dims:?} has a zero axis")));
    }
    if spacing.iter().any(|&s| s <= 0.0) {
        return Err(header_err(path, format!("ElementSpacing {spacing:?} must be > 0")));
    }

    let raw_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&data_file);
    let n = dims[0] * dims[1] * dims[2];
    let expected = (n * elem_type.byte_size()) as u64;
    let meta = std::fs::metadata(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    if meta.len() != expected {
        return Err(Error::RawSizeMismatch {
            path: raw_path,
            actual: meta.len(),
            expected,
            voxels: n,
            elem_size: elem_type.byte_size(),
        });
    }

    let mut reader = BufReader::new(File::open(&raw_path).map_err(|e| Error::io(&raw_path, e))?);
    let mut data: Vec<T> = Vec::with_capacity(n);
    match elem_type {
        ElementType::Short => {
            for _ in 0..n {
                let v = reader
                    .read_i16::<LittleEndian>()
                    .map_err(|e| Error::io(&raw_path, e))?;
                data.push(T::of(v as f64));
            }
        }
        ElementType::UShort => {
            for _ in 0..n {
                let v = reader
                    .read_u16::<LittleEndian>()
                    .map_err(|e| Error::io(&raw_path, e))?;
                data.push(T::of(v as f64));
            }
        }
        ElementType::Float => {
            for _ in 0..n {
                let v = reader
                    .read_f32::<LittleEndian>()
                    .map_err(|e| Error::io(&raw_path, e))?;
                data.push(T::of(v as f64));
            }
        }
        ElementType::Double => {
            for _ in 0..n {
                let v = reader
                    .read_f64::<LittleEndian>()
                    .map_err(|e| Error::io(&raw_path, e))?;
                data.push(T::of(v));
            }
        }
    }
    // Trailing bytes would have tripped the size check above.
    let mut probe = [0u8; 1];
    debug_assert_eq!(reader.read(&mut probe).unwrap_or(0), 0);

    let sp = [T::of(spacing[0]), T::of(spacing[1]), T::of(spacing[2])];
    let or = [T::of(origin[0]), T::of(origin[1]), T::of(origin[2])];
    Volume::new(dims, sp, or, data)
}

/// Write `vol` as a MetaImage pair: `<path>.mhd` header plus a little-endian
/// `MET_FLOAT` raw file next to it. `path` should end in `.mhd`.
///
/// The header line order is fixed, so identical volumes produce byte-identical
/// headers.
pub fn save_metaimage<T: Real>(vol: &Volume<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw_name: PathBuf = path.with_extension("raw");
    let raw_base = raw_name
        .file_name()
        .ok_or_else(|| header_err(path, "path has no file name"))?
        .to_string_lossy()
        .to_string();

    let d = vol.dims();
    let sp = vol.spacing();
    let or = vol.origin();
    let mut header = String::new();
    header.push_str("ObjectType = Image\n");
    header.push_str("NDims = 3\n");
    header.push_str("BinaryData = True\n");
    header.push_str(&format!("DimSize = {} {} {}\n", d[0], d[1], d[2]));
    header.push_str(&format!(
        "ElementSpacing = {} {} {}\n",
        sp[0].as_f64(),
        sp[1].as_f64(),
        sp[2].as_f64()
    ));
    header.push_str(&format!(
        "Offset = {} {} {}\n",
        or[0].as_f64(),
        or[1].as_f64(),
        or[2].as_f64()
    ));
    header.push_str("ElementType = MET_FLOAT\n");
    header.push_str("ElementByteOrderMSB = False\n");
    header.push_str(&format!("ElementDataFile = {raw_base}\n"));
    std::fs::write(path, header).map_err(|e| Error::io(path, e))?;

    let mut w = BufWriter::new(File::create(&raw_name).map_err(|e| Error::io(&raw_name, e))?);
    for &v in vol.data() {
        w.write_f32::<LittleEndian>(v.as_f64() as f32)
            .map_err(|e| Error::io(&raw_name, e))?;
    }
    w.flush().map_err(|e| Error::io(&raw_name, e))?;
    Ok(())
}
