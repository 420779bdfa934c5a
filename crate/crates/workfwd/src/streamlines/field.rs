//! Regular-grid 3D vector fields: trilinear sampling, synthetic generators
//! and raw-file ingestion.
//!
//! File format: a JSON header with `dims`, `spacing`, `origin` and `data`
//! (path to the raw file, relative to the header), plus raw little-endian
//! 32-bit float triples in x-fastest order.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug)]
pub enum FieldError {
    Shape(String),
    Io(std::io::Error),
    Header(String),
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldError::Shape(m) => write!(f, "bad field shape: {m}"),
            FieldError::Io(e) => write!(f, "field io error: {e}"),
            FieldError::Header(m) => write!(f, "bad field header: {m}"),
        }
    }
}

impl std::error::Error for FieldError {}

impl From<std::io::Error> for FieldError {
    fn from(e: std::io::Error) -> Self {
        FieldError::Io(e)
    }
}

/// A 3D vector field sampled at the vertices of a regular grid.
#[derive(Debug, Clone)]
pub struct VectorField {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    values: Vec<[f64; 3]>,
}

impl VectorField {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        values: Vec<[f64; 3]>,
    ) -> Result<Self, FieldError> {
        if dims.iter().any(|&d| d < 2) {
            return Err(FieldError::Shape("each axis needs at least 2 vertices".into()));
        }
        if spacing.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(FieldError::Shape("spacing must be positive".into()));
        }
        let expect = dims[0] * dims[1] * dims[2];
        if values.len() != expect {
            return Err(FieldError::Shape(format!(
                "expected {expect} vertex values, got {}",
                values.len()
            )));
        }
        Ok(VectorField { dims, spacing, origin, values })
    }

    /// Evaluate `f` at every vertex position.
    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        f: impl Fn([f64; 3]) -> [f64; 3],
    ) -> Self {
        let mut values = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let pos = [
                        origin[0] + x as f64 * spacing[0],
                        origin[1] + y as f64 * spacing[1],
                        origin[2] + z as f64 * spacing[2],
                    ];
                    values.push(f(pos));
                }
            }
        }
        VectorField { dims, spacing, origin, values }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    /// Position of the last vertex on each axis.
    pub fn max_bound(&self) -> [f64; 3] {
        [
            self.origin[0] + (self.dims[0] - 1) as f64 * self.spacing[0],
            self.origin[1] + (self.dims[1] - 1) as f64 * self.spacing[1],
            self.origin[2] + (self.dims[2] - 1) as f64 * self.spacing[2],
        ]
    }

    pub fn vertex(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        self.values[x + self.dims[0] * (y + self.dims[1] * z)]
    }

    pub fn values(&self) -> &[[f64; 3]] {
        &self.values
    }

    /// Trilinear interpolation of the 8 surrounding vertex vectors.
    /// `None` outside the vertex bounding box (boundary inclusive).
    pub fn sample(&self, pos: [f64; 3]) -> Option<[f64; 3]> {
        let cf = cell_and_frac(self.dims, self.origin, self.spacing, pos)?;
        Some(lerp_cell(&cf, |x, y, z| self.vertex(x, y, z)))
    }

    /// Write header JSON plus the raw data file next to it.
    pub fn save(&self, header_path: &Path, data_name: &str) -> Result<(), FieldError> {
        let header = FieldHeader {
            dims: self.dims,
            spacing: self.spacing,
            origin: self.origin,
            data: data_name.to_string(),
        };
        let json = serde_json::to_string_pretty(&header)
            .map_err(|e| FieldError::Header(e.to_string()))?;
        std::fs::write(header_path, json)?;
        let data_path = header_path.parent().unwrap_or(Path::new(".")).join(data_name);
        let mut out = std::io::BufWriter::new(std::fs::File::create(data_path)?);
        for v in &self.values {
            for c in v {
                out.write_all(&(*c as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Load a field from its JSON header.
    pub fn load(header_path: &Path) -> Result<Self, FieldError> {
        let json = std::fs::read_to_string(header_path)?;
        let header: FieldHeader =
            serde_json::from_str(&json).map_err(|e| FieldError::Header(e.to_string()))?;
        let data_path = header_path.parent().unwrap_or(Path::new(".")).join(&header.data);
        let mut raw = Vec::new();
        std::fs::File::open(&data_path)?.read_to_end(&mut raw)?;
        let expect = header.dims[0] * header.dims[1] * header.dims[2] * 12;
        if raw.len() != expect {
            return Err(FieldError::Shape(format!(
                "raw file holds {} bytes, header implies {expect}",
                raw.len()
            )));
        }
        let values: Vec<[f64; 3]> = raw
            .chunks_exact(12)
            .map(|c| {
                [
                    f32::from_le_bytes(c[0..4].try_into().unwrap()) as f64,
                    f32::from_le_bytes(c[4..8].try_into().unwrap()) as f64,
                    f32::from_le_bytes(c[8..12].try_into().unwrap()) as f64,
                ]
            })
            .collect();
        VectorField::new(header.dims, header.spacing, header.origin, values)
    }
}

#[derive(Serialize, Deserialize)]
struct FieldHeader {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    data: String,
}

/// Cell index, interpolation weights and origin-referenced geometry shared
/// by the full field and the per-rank blocks, so both sample bit-identically.
pub(crate) struct CellFrac {
    pub cell: [usize; 3],
    pub frac: [f64; 3],
}

pub(crate) fn cell_and_frac(
    dims: [usize; 3],
    origin: [f64; 3],
    spacing: [f64; 3],
    pos: [f64; 3],
) -> Option<CellFrac> {
    let mut cell = [0usize; 3];
    let mut frac = [0f64; 3];
    for a in 0..3 {
        let u = (pos[a] - origin[a]) / spacing[a];
        // NaN positions are outside by definition
        if u.is_nan() || u < 0.0 || u > (dims[a] - 1) as f64 {
            return None;
        }
        let c = (u.floor() as usize).min(dims[a] - 2);
        cell[a] = c;
        frac[a] = u - c as f64;
    }
    Some(CellFrac { cell, frac })
}

pub(crate) fn lerp_cell(cf: &CellFrac, vertex: impl Fn(usize, usize, usize) -> [f64; 3]) -> [f64; 3] {
    let [cx, cy, cz] = cf.cell;
    let [fx, fy, fz] = cf.frac;
    let mut out = [0f64; 3];
    for (dz, wz) in [(0usize, 1.0 - fz), (1, fz)] {
        for (dy, wy) in [(0usize, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0usize, 1.0 - fx), (1, fx)] {
                let w = wx * wy * wz;
                let v = vertex(cx + dx, cy + dy, cz + dz);
                out[0] += w * v[0];
                out[1] += w * v[1];
                out[2] += w * v[2];
            }
        }
    }
    out
}

/// Uniform field `v` everywhere, over a unit-ish box.
pub fn constant_field(n: usize, v: [f64; 3]) -> VectorField {
    let dims = [n, n, n];
    let spacing = [1.0 / (n - 1) as f64; 3];
    VectorField::from_fn(dims, spacing, [0.0; 3], move |_| v)
}

/// Rigid rotation about the z axis through `center`: v = (-(y-cy), x-cx, 0).
pub fn rotation_field(n: usize, half_extent: f64, center: [f64; 3]) -> VectorField {
    let dims = [n, n, n];
    let spacing = [2.0 * half_extent / (n - 1) as f64; 3];
    let origin = [
        center[0] - half_extent,
        center[1] - half_extent,
        center[2] - half_extent,
    ];
    VectorField::from_fn(dims, spacing, origin, move |p| {
        [-(p[1] - center[1]), p[0] - center[0], 0.0]
    })
}

/// Arnold-Beltrami-Childress flow on [0, 2pi]^3 with A = B = C = 1.
pub fn abc_field(n: usize) -> VectorField {
    let two_pi = std::f64::consts::TAU;
    let dims = [n, n, n];
    let spacing = [two_pi / (n - 1) as f64; 3];
    VectorField::from_fn(dims, spacing, [0.0; 3], |p| {
        let (x, y, z) = (p[0], p[1], p[2]);
        [
            z.sin() + y.cos(),
            x.sin() + z.cos(),
            y.sin() + x.cos(),
        ]
    })
}

/// Parse a field source: `abc:N`, `const:N:vx,vy,vz`, `rot:N`, or a path to
/// a JSON header file.
pub fn load_field_spec(spec: &str) -> Result<VectorField, FieldError> {
    if let Some(rest) = spec.strip_prefix("abc:") {
        let n: usize = rest
            .parse()
            .map_err(|_| FieldError::Header(format!("bad abc size: {rest}")))?;
        return Ok(abc_field(n));
    }
    if let Some(rest) = spec.strip_prefix("rot:") {
        let n: usize = rest
            .parse()
            .map_err(|_| FieldError::Header(format!("bad rot size: {rest}")))?;
        return Ok(rotation_field(n, 2.0, [0.0; 3]));
    }
    if let Some(rest) = spec.strip_prefix("const:") {
        let mut parts = rest.splitn(2, ':');
        let n: usize = parts
            .next()
            .unwrap_or_default()
            .parse()
            .map_err(|_| FieldError::Header(format!("bad const spec: {rest}")))?;
        let v = match parts.next() {
            None => [1.0, 0.0, 0.0],
            Some(list) => {
                let comps: Vec<f64> = list
                    .split(',')
                    .map(|c| c.trim().parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| FieldError::Header(format!("bad const vector: {list}")))?;
                if comps.len() != 3 {
                    return Err(FieldError::Header("const vector needs 3 components".into()));
                }
                [comps[0], comps[1], comps[2]]
            }
        };
        return Ok(constant_field(n, v));
    }
    VectorField::load(Path::new(spec))
}
