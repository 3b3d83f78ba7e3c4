//! Volume files: a small `key=value` text header next to a raw payload.
//!
//! ```text
//! # gdr volume 1
//! dims=48 48
//! spacing=5 5
//! origin=0 0
//! element=f32
//! components=1
//! axis_order=first-fastest
//! data=template.raw
//! ```
//!
//! Payloads are little-endian. Real data is `f32`, masks are `u8` holding 0
//! or 1. Vector fields store their components one after another, each in
//! the same voxel order as a scalar grid (first axis varies fastest).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{GdrError, Result};
use crate::grid::{GridGeometry, ScalarGrid, VectorGrid};

pub const MAGIC: &str = "# gdr volume 1";
pub const AXIS_ORDER: &str = "first-fastest";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    F32,
    U8,
}

impl ElementType {
    pub fn size(self) -> usize {
        match self {
            ElementType::F32 => 4,
            ElementType::U8 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ElementType::F32 => "f32",
            ElementType::U8 => "u8",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(ElementType::F32),
            "u8" => Ok(ElementType::U8),
            other => Err(GdrError::UnknownElementType(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeHeader {
    pub geometry: GridGeometry,
    pub element: ElementType,
    pub components: usize,
    /// Payload file, relative to the header's directory.
    pub data: String,
}

impl VolumeHeader {
    pub fn payload_len(&self) -> u64 {
        (self.geometry.len() * self.components * self.element.size()) as u64
    }

    pub fn render(&self) -> String {
        let g = &self.geometry;
        let join = |xs: &[f64]| xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        let mut s = String::new();
        let _ = writeln!(s, "{MAGIC}");
        let _ = writeln!(s, "dims={}", g.dims().iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" "));
        let _ = writeln!(s, "spacing={}", join(g.spacing()));
        let _ = writeln!(s, "origin={}", join(g.origin()));
        let _ = writeln!(s, "element={}", self.element.name());
        let _ = writeln!(s, "components={}", self.components);
        let _ = writeln!(s, "axis_order={AXIS_ORDER}");
        let _ = writeln!(s, "data={}", self.data);
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |reason: String| GdrError::MalformedHeader { path: path.to_path_buf(), reason };
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(MAGIC) {
            return Err(bad(format!("first line must be {MAGIC:?}")));
        }
        let (mut dims, mut spacing, mut origin, mut element, mut components, mut data) =
            (None, None, None, None, None, None);
        for (n, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| bad(format!("line {}: expected key=value", n + 2)))?;
            let value = value.trim();
            let floats = |v: &str| -> Result<Vec<f64>> {
                v.split_whitespace()
                    .map(|x| x.parse::<f64>().map_err(|_| bad(format!("{key}: bad number {x:?}"))))
                    .collect()
            };
            match key.trim() {
                "dims" => {
                    dims = Some(
                        value
                            .split_whitespace()
                            .map(|x| x.parse::<usize>().map_err(|_| bad(format!("dims: bad size {x:?}"))))
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                "spacing" => spacing = Some(floats(value)?),
                "origin" => origin = Some(floats(value)?),
                "element" => element = Some(ElementType::parse(value)?),
                "components" => {
                    components = Some(value.parse::<usize>().map_err(|_| bad(format!("components: {value:?}")))?)
                }
                "axis_order" if value == AXIS_ORDER => {}
                "axis_order" => return Err(bad(format!("unsupported axis order {value:?}"))),
                "data" => data = Some(value.to_string()),
                other => return Err(bad(format!("unknown key {other:?}"))),
            }
        }
        let missing = |k: &str| bad(format!("missing key {k:?}"));
        let dims = dims.ok_or_else(|| missing("dims"))?;
        let spacing = spacing.ok_or_else(|| missing("spacing"))?;
        let origin = origin.ok_or_else(|| missing("origin"))?;
        let geometry = GridGeometry::new(&dims, &spacing, &origin).map_err(|e| bad(e.to_string()))?;
        let components = components.ok_or_else(|| missing("components"))?;
        if components == 0 {
            return Err(bad("components must be positive".into()));
        }
        let data = data.ok_or_else(|| missing("data"))?;
        if Path::new(&data).is_absolute() || data.contains("..") {
            return Err(bad(format!("data path {data:?} must be a plain relative name")));
        }
        Ok(VolumeHeader { geometry, element: element.ok_or_else(|| missing("element"))?, components, data })
    }
}

/// Header plus decoded values (component-major).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub header: VolumeHeader,
    pub values: Vec<f64>,
}

impl Volume {
    pub fn into_scalar(self) -> Result<ScalarGrid> {
        if self.header.components != 1 {
            return Err(GdrError::InvalidParameter(format!(
                "expected a scalar volume, got {} components",
                self.header.components
            )));
        }
        ScalarGrid::new(self.header.geometry, self.values)
    }

    pub fn into_vector(self) -> Result<VectorGrid> {
        let g = self.header.geometry;
        if self.header.components != g.ndim() {
            return Err(GdrError::InvalidParameter(format!(
                "expected {} components for a {}-D field, got {}",
                g.ndim(),
                g.ndim(),
                self.header.components
            )));
        }
        let comps = self.values.chunks(g.len()).map(<[f64]>::to_vec).collect();
        VectorGrid::new(g, comps)
    }
}

fn payload_path(header_path: &Path) -> PathBuf {
    header_path.with_extension("raw")
}

fn write_files(
    path: &Path,
    geometry: GridGeometry,
    element: ElementType,
    components: usize,
    bytes: Vec<u8>,
) -> Result<()> {
    let raw = payload_path(path);
    let data = raw
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| GdrError::InvalidParameter(format!("{}: unusable file name", path.display())))?
        .to_string();
    let header = VolumeHeader { geometry, element, components, data };
    fs::write(&raw, bytes).map_err(|e| GdrError::io(&raw, e))?;
    fs::write(path, header.render()).map_err(|e| GdrError::io(path, e))
}

fn f32_bytes(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(|x| (x as f32).to_le_bytes()).collect()
}

/// Writes a real image as `f32`.
pub fn write_scalar(path: &Path, grid: &ScalarGrid) -> Result<()> {
    write_files(path, *grid.geometry(), ElementType::F32, 1, f32_bytes(grid.values().iter().copied()))
}

/// Writes a 0/1 mask as `u8`.
pub fn write_mask(path: &Path, mask: &ScalarGrid) -> Result<()> {
    let bytes = mask
        .values()
        .iter()
        .enumerate()
        .map(|(index, &value)| match value {
            v if v == 0.0 => Ok(0u8),
            v if v == 1.0 => Ok(1u8),
            _ => Err(GdrError::InvalidMask { index, value }),
        })
        .collect::<Result<Vec<u8>>>()?;
    write_files(path, *mask.geometry(), ElementType::U8, 1, bytes)
}

pub fn write_vector(path: &Path, field: &VectorGrid) -> Result<()> {
    let values = field.components().iter().flatten().copied();
    write_files(path, *field.geometry(), ElementType::F32, field.ndim(), f32_bytes(values))
}

pub fn read_header(path: &Path) -> Result<VolumeHeader> {
    let text = fs::read_to_string(path).map_err(|e| GdrError::io(path, e))?;
    VolumeHeader::parse(&text, path)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let header = read_header(path)?;
    let raw = path.parent().unwrap_or(Path::new(".")).join(&header.data);
    let bytes = fs::read(&raw).map_err(|e| GdrError::io(&raw, e))?;
    let expected = header.payload_len();
    if bytes.len() as u64 != expected {
        return Err(GdrError::SizeMismatch { path: raw, expected, actual: bytes.len() as u64 });
    }
    let values = match header.element {
        ElementType::F32 => {
            bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect()
        }
        ElementType::U8 => bytes.iter().map(|&b| b as f64).collect(),
    };
    Ok(Volume { header, values })
}

pub fn read_scalar(path: &Path) -> Result<ScalarGrid> {
    read_volume(path)?.into_scalar()
}

/// Reads a mask; every voxel must be exactly 0 or 1.
pub fn read_mask(path: &Path) -> Result<ScalarGrid> {
    let grid = read_volume(path)?.into_scalar()?;
    if let Some((index, &value)) = grid.values().iter().enumerate().find(|(_, &v)| v != 0.0 && v != 1.0) {
        return Err(GdrError::InvalidMask { index, value });
    }
    Ok(grid)
}

pub fn read_vector(path: &Path) -> Result<VectorGrid> {
    read_volume(path)?.into_vector()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom() -> GridGeometry {
        GridGeometry::new(&[5, 3], &[1.25, 2.0], &[-3.5, 0.1]).unwrap()
    }

    #[test]
    fn scalar_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.vol");
        let g = ScalarGrid::from_fn(geom(), |x| ((x[0] * 0.37 + x[1]) as f32) as f64);
        write_scalar(&p, &g).unwrap();
        let back = read_scalar(&p).unwrap();
        assert_eq!(back.geometry(), g.geometry());
        let bits = |s: &ScalarGrid| s.values().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&g));
    }

    #[test]
    fn vector_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.vol");
        let v = VectorGrid::from_fn(geom(), |x| vec![x[0].floor(), -0.5 * x[1].floor()]);
        write_vector(&p, &v).unwrap();
        assert_eq!(read_vector(&p).unwrap(), v);
        assert!(read_scalar(&p).is_err());
    }

    #[test]
    fn truncated_payload_reports_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.vol");
        write_scalar(&p, &ScalarGrid::filled(geom(), 1.0)).unwrap();
        let raw = dir.path().join("a.raw");
        let bytes = fs::read(&raw).unwrap();
        fs::write(&raw, &bytes[..bytes.len() - 3]).unwrap();
        match read_scalar(&p) {
            Err(GdrError::SizeMismatch { expected, actual, .. }) => assert_eq!((expected, actual), (60, 57)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mask_value_two_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.vol");
        let mask = ScalarGrid::from_fn(geom(), |x| if x[0] > 0.0 { 1.0 } else { 0.0 });
        write_mask(&p, &mask).unwrap();
        assert_eq!(read_mask(&p).unwrap(), mask);
        let raw = dir.path().join("m.raw");
        let mut bytes = fs::read(&raw).unwrap();
        bytes[4] = 2;
        fs::write(&raw, bytes).unwrap();
        assert!(matches!(read_mask(&p), Err(GdrError::InvalidMask { index: 4, value }) if value == 2.0));
        assert!(matches!(write_mask(&p, &ScalarGrid::filled(geom(), 0.5)), Err(GdrError::InvalidMask { .. })));
    }

    #[test]
    fn header_errors_are_distinct() {
        let p = Path::new("x.vol");
        let good = VolumeHeader { geometry: geom(), element: ElementType::U8, components: 1, data: "x.raw".into() };
        assert_eq!(VolumeHeader::parse(&good.render(), p).unwrap(), good);
        let text = good.render().replace("element=u8", "element=f64");
        assert!(matches!(VolumeHeader::parse(&text, p), Err(GdrError::UnknownElementType(t)) if t == "f64"));
        let text = good.render().replace("dims=5 3", "dims=5 x");
        assert!(matches!(VolumeHeader::parse(&text, p), Err(GdrError::MalformedHeader { .. })));
        let text = good.render().replace(MAGIC, "# something else");
        assert!(matches!(VolumeHeader::parse(&text, p), Err(GdrError::MalformedHeader { .. })));
        let text = good.render().replace("data=x.raw\n", "");
        assert!(matches!(VolumeHeader::parse(&text, p), Err(GdrError::MalformedHeader { .. })));
        let text = good.render().replace("data=x.raw", "data=../x.raw");
        assert!(matches!(VolumeHeader::parse(&text, p), Err(GdrError::MalformedHeader { .. })));
    }
}
