//! 16-bit binary PGM slices for quick inspection.
//!
//! Values are mapped linearly so that `low` becomes 0 and `high` becomes
//! 65535, with clamping outside the window. The window is stored in a
//! comment line `# window low=<low> high=<high>` and can be read back.

use std::fs;
use std::path::Path;

use crate::error::{GdrError, Result};
use crate::grid::ScalarGrid;

pub const MAX_GRAY: u16 = u16::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub low: f64,
    pub high: f64,
}

impl Window {
    pub fn new(low: f64, high: f64) -> Result<Self> {
        if !(low.is_finite() && high.is_finite() && high >= low) {
            return Err(GdrError::InvalidParameter(format!("window [{low}, {high}] is empty or not finite")));
        }
        Ok(Window { low, high })
    }

    /// Window spanning the values; empty input gives `[0, 0]`.
    pub fn covering(values: &[f64]) -> Self {
        let low = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let high = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if low.is_finite() {
            Window { low, high }
        } else {
            Window { low: 0.0, high: 0.0 }
        }
    }

    /// A degenerate window maps everything to 0.
    pub fn gray(&self, v: f64) -> u16 {
        let width = self.high - self.low;
        if width <= 0.0 {
            return 0;
        }
        ((v - self.low) / width * MAX_GRAY as f64).round().clamp(0.0, MAX_GRAY as f64) as u16
    }

    fn comment(&self) -> String {
        format!("# window low={:?} high={:?}", self.low, self.high)
    }

    fn parse_comment(line: &str) -> Option<Self> {
        let rest = line.strip_prefix("# window ")?;
        let mut low = None;
        let mut high = None;
        for part in rest.split_whitespace() {
            match part.split_once('=')? {
                ("low", v) => low = v.parse().ok(),
                ("high", v) => high = v.parse().ok(),
                _ => {}
            }
        }
        Some(Window { low: low?, high: high? })
    }
}

/// The 2-D plane of `grid` orthogonal to `axis` at `index`, with its
/// width and height. A 2-D grid is its own single slice along axis 2.
pub fn extract_slice(grid: &ScalarGrid, axis: usize, index: usize) -> Result<(usize, usize, Vec<f64>)> {
    let g = grid.geometry();
    let mut dims = [1usize; 3];
    dims[..g.ndim()].copy_from_slice(g.dims());
    if axis > 2 || index >= dims[axis] {
        return Err(GdrError::InvalidParameter(format!(
            "slice {index} along axis {axis} is outside dims {:?}",
            g.dims()
        )));
    }
    let (p, q) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let (w, h) = (dims[p], dims[q]);
    let mut out = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            let mut idx = [0usize; 3];
            idx[axis] = index;
            idx[p] = c;
            idx[q] = r;
            out.push(grid.values()[g.linear_index(&idx[..g.ndim()])]);
        }
    }
    Ok((w, h, out))
}

/// Writes one slice. Without a window the slice's own range is used.
pub fn export_slice(
    grid: &ScalarGrid,
    axis: usize,
    index: usize,
    window: Option<Window>,
    path: &Path,
) -> Result<Window> {
    let (w, h, values) = extract_slice(grid, axis, index)?;
    let window = window.unwrap_or_else(|| Window::covering(&values));
    let mut bytes = format!("P5\n{}\n{w} {h}\n{MAX_GRAY}\n", window.comment()).into_bytes();
    for v in values {
        bytes.extend_from_slice(&window.gray(v).to_be_bytes());
    }
    fs::write(path, bytes).map_err(|e| GdrError::io(path, e))?;
    Ok(window)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u16>,
    pub window: Option<Window>,
}

/// Reads the 16-bit PGMs written by [`export_slice`].
pub fn read_pgm(path: &Path) -> Result<Pgm> {
    let bytes = fs::read(path).map_err(|e| GdrError::io(path, e))?;
    let bad = |reason: &str| GdrError::MalformedHeader { path: path.to_path_buf(), reason: reason.to_string() };
    let mut pos = 0;
    let mut window = None;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        let end = bytes[pos..].iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header"))? + pos;
        let line = std::str::from_utf8(&bytes[pos..end]).map_err(|_| bad("header is not text"))?;
        pos = end + 1;
        if line.starts_with('#') {
            window = window.or_else(|| Window::parse_comment(line));
            continue;
        }
        fields.extend(line.split_whitespace().map(str::to_string));
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number in header"));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != MAX_GRAY as usize {
        return Err(bad("only 16-bit PGMs are supported"));
    }
    let payload = &bytes[pos..];
    let expected = (width * height * 2) as u64;
    if payload.len() as u64 != expected {
        return Err(GdrError::SizeMismatch { path: path.to_path_buf(), expected, actual: payload.len() as u64 });
    }
    let pixels = payload.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Ok(Pgm { width, height, pixels, window })
}
