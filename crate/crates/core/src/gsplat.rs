//! Gaussian scene representation and the binary PLY layout used by 3D
//! Gaussian splatting checkpoints.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Zeroth-order spherical harmonic basis constant.
pub const SH_C0: f64 = 0.28209479177387814;

pub type Mat3 = [[f64; 3]; 3];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mu: [f64; 3],
    /// Positive axis scales (decoded, not log).
    pub scale: [f64; 3],
    /// Rotation quaternion (w, x, y, z).
    pub rot: [f64; 4],
    /// Linear RGB in [0, 1].
    pub color: [f64; 3],
    /// Opacity in (0, 1) (decoded, not logit).
    pub opacity: f64,
}

impl Gaussian {
    pub fn is_finite(&self) -> bool {
        self.mu
            .iter()
            .chain(&self.scale)
            .chain(&self.rot)
            .chain(&self.color)
            .chain(std::iter::once(&self.opacity))
            .all(|v| v.is_finite())
    }

    pub fn isotropic(mu: [f64; 3], scale: f64, color: [f64; 3], opacity: f64) -> Self {
        Gaussian { mu, scale: [scale; 3], rot: [1.0, 0.0, 0.0, 0.0], color, opacity }
    }
}

/// Rotation matrix of a (not necessarily unit) quaternion (w, x, y, z).
pub fn quat_to_mat(q: [f64; 4]) -> Mat3 {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// `Σ = R S Sᵀ Rᵀ`.
pub fn covariance(g: &Gaussian) -> Result<Mat3> {
    if !g.scale.iter().chain(&g.rot).all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite scale or rotation".into()));
    }
    let qn = g.rot.iter().map(|v| v * v).sum::<f64>();
    if qn == 0.0 {
        return Err(Error::InvalidArgument("zero quaternion".into()));
    }
    let r = quat_to_mat(g.rot);
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = r[i][j] * g.scale[j];
        }
    }
    let mut cov = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            cov[i][j] = (0..3).map(|k| m[i][k] * m[j][k]).sum();
        }
    }
    Ok(cov)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    p.ln() - (-p).ln_1p()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            ScalarType::I8 => "char",
            ScalarType::U8 => "uchar",
            ScalarType::I16 => "short",
            ScalarType::U16 => "ushort",
            ScalarType::I32 => "int",
            ScalarType::U32 => "uint",
            ScalarType::F32 => "float",
            ScalarType::F64 => "double",
        }
    }

    fn size(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlyProperty {
    pub name: String,
    pub ty: ScalarType,
}

/// The vertex property names every checkpoint must carry, in the order the
/// decoded fields are laid out.
pub const REQUIRED_PROPERTIES: [&str; 14] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1",
    "rot_2", "rot_3",
];

/// Vertex layout and the raw bytes of any non-required properties, kept so a
/// loaded checkpoint is written back with its extra fields intact.
#[derive(Clone, Debug, PartialEq)]
pub struct PlyLayout {
    pub properties: Vec<PlyProperty>,
    /// Per-vertex concatenation of the extra properties' bytes.
    pub extra: Vec<Vec<u8>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianCloud {
    pub gaussians: Vec<Gaussian>,
    mask: Option<BTreeSet<usize>>,
    layout: Option<PlyLayout>,
}

impl GaussianCloud {
    pub fn new(gaussians: Vec<Gaussian>) -> Self {
        GaussianCloud { gaussians, mask: None, layout: None }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn mask(&self) -> Option<&BTreeSet<usize>> {
        self.mask.as_ref()
    }

    pub fn layout(&self) -> Option<&PlyLayout> {
        self.layout.as_ref()
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.mask.as_ref().is_some_and(|m| m.contains(&i))
    }

    /// Sets the editable subset. Indices must be unique and in range.
    pub fn set_mask(&mut self, indices: &[usize]) -> Result<()> {
        let mut set = BTreeSet::new();
        for &i in indices {
            if i >= self.gaussians.len() {
                return Err(Error::InvalidArgument(format!(
                    "mask index {i} out of range for {} gaussians",
                    self.gaussians.len()
                )));
            }
            if !set.insert(i) {
                return Err(Error::InvalidArgument(format!("duplicate mask index {i}")));
            }
        }
        self.mask = Some(set);
        Ok(())
    }

    pub fn clear_mask(&mut self) {
        self.mask = None;
    }

    pub fn mask_indices(&self) -> Vec<usize> {
        self.mask.iter().flatten().copied().collect()
    }

    /// Axis-aligned bounds of the centers, `None` when empty.
    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        let first = self.gaussians.first()?;
        let mut lo = first.mu;
        let mut hi = first.mu;
        for g in &self.gaussians {
            for k in 0..3 {
                lo[k] = lo[k].min(g.mu[k]);
                hi[k] = hi[k].max(g.mu[k]);
            }
        }
        Some((lo, hi))
    }
}

/// Reads a mask file of newline-separated decimal indices.
pub fn parse_mask(text: &str) -> Result<Vec<usize>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.parse::<usize>()
                .map_err(|_| Error::InvalidArgument(format!("bad mask index `{l}`")))
        })
        .collect()
}

pub fn format_mask(indices: &[usize]) -> String {
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    sorted.iter().map(|i| format!("{i}\n")).collect()
}

struct Header {
    count: usize,
    properties: Vec<PlyProperty>,
    body_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut offset = 0;
    let mut count = None;
    let mut properties = Vec::new();
    let mut in_vertex = false;
    let mut format_seen = false;
    let mut line_no = 0;
    loop {
        let rest = &bytes[offset..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| Error::PlyParse {
            offset,
            message: "unterminated header".into(),
        })?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| Error::PlyParse { offset, message: "header is not UTF-8".into() })?
            .trim_end_matches('\r');
        let err = |message: String| Error::PlyParse { offset, message };
        let mut words = line.split_whitespace();
        let head = words.next().unwrap_or("");
        if line_no == 0 {
            if line != "ply" {
                return Err(err("missing `ply` magic".into()));
            }
        } else {
            match head {
                "format" => {
                    if words.next() != Some("binary_little_endian") {
                        return Err(err(format!("unsupported format line `{line}`")));
                    }
                    format_seen = true;
                }
                "comment" | "obj_info" | "" => {}
                "element" => {
                    let name = words.next().ok_or_else(|| err("element without name".into()))?;
                    let n: usize = words
                        .next()
                        .and_then(|w| w.parse().ok())
                        .ok_or_else(|| err(format!("bad element count in `{line}`")))?;
                    in_vertex = name == "vertex";
                    if in_vertex {
                        if count.is_some() {
                            return Err(err("duplicate vertex element".into()));
                        }
                        count = Some(n);
                    } else if count.is_none() {
                        return Err(err(format!("element `{name}` precedes vertex element")));
                    }
                }
                "property" => {
                    let ty = words.next().ok_or_else(|| err("property without type".into()))?;
                    if ty == "list" {
                        if in_vertex {
                            return Err(err("list properties on vertices are not supported".into()));
                        }
                    } else if in_vertex {
                        let ty = ScalarType::parse(ty)
                            .ok_or_else(|| err(format!("unknown property type `{ty}`")))?;
                        let name = words.next().ok_or_else(|| err("property without name".into()))?;
                        properties.push(PlyProperty { name: name.to_string(), ty });
                    }
                }
                "end_header" => {
                    if !format_seen {
                        return Err(err("missing format line".into()));
                    }
                    let count = count.ok_or_else(|| err("no vertex element".into()))?;
                    return Ok(Header { count, properties, body_offset: offset + end + 1 });
                }
                other => return Err(err(format!("unexpected header keyword `{other}`"))),
            }
        }
        offset += end + 1;
        line_no += 1;
    }
}

fn read_scalar(b: &[u8], ty: ScalarType) -> f64 {
    match ty {
        ScalarType::I8 => b[0] as i8 as f64,
        ScalarType::U8 => b[0] as f64,
        ScalarType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
        ScalarType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
        ScalarType::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
        ScalarType::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
        ScalarType::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
        ScalarType::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
    }
}

fn write_scalar(out: &mut Vec<u8>, v: f64, ty: ScalarType) {
    match ty {
        ScalarType::I8 => out.push(v as i8 as u8),
        ScalarType::U8 => out.push(v as u8),
        ScalarType::I16 => out.extend((v as i16).to_le_bytes()),
        ScalarType::U16 => out.extend((v as u16).to_le_bytes()),
        ScalarType::I32 => out.extend((v as i32).to_le_bytes()),
        ScalarType::U32 => out.extend((v as u32).to_le_bytes()),
        ScalarType::F32 => out.extend((v as f32).to_le_bytes()),
        ScalarType::F64 => out.extend(v.to_le_bytes()),
    }
}

fn decode(raw: &[f64; 14]) -> Gaussian {
    let mut rot = [raw[10], raw[11], raw[12], raw[13]];
    let n = rot.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 && (n - 1.0).abs() > 5e-7 {
        rot.iter_mut().for_each(|v| *v /= n);
    }
    Gaussian {
        mu: [raw[0], raw[1], raw[2]],
        color: [0.5 + SH_C0 * raw[3], 0.5 + SH_C0 * raw[4], 0.5 + SH_C0 * raw[5]],
        opacity: sigmoid(raw[6]),
        scale: [raw[7].exp(), raw[8].exp(), raw[9].exp()],
        rot,
    }
}

fn encode(g: &Gaussian) -> [f64; 14] {
    [
        g.mu[0],
        g.mu[1],
        g.mu[2],
        (g.color[0] - 0.5) / SH_C0,
        (g.color[1] - 0.5) / SH_C0,
        (g.color[2] - 0.5) / SH_C0,
        logit(g.opacity),
        g.scale[0].ln(),
        g.scale[1].ln(),
        g.scale[2].ln(),
        g.rot[0],
        g.rot[1],
        g.rot[2],
        g.rot[3],
    ]
}

/// Parses a binary little-endian PLY held in memory.
pub fn parse_ply(bytes: &[u8]) -> Result<GaussianCloud> {
    let header = parse_header(bytes)?;
    let mut slots = [usize::MAX; 14];
    for (k, name) in REQUIRED_PROPERTIES.iter().enumerate() {
        slots[k] = header
            .properties
            .iter()
            .position(|p| p.name == *name)
            .ok_or_else(|| Error::PlyMissingProperty(name.to_string()))?;
    }
    let mut offsets = Vec::with_capacity(header.properties.len());
    let mut stride = 0;
    for p in &header.properties {
        offsets.push(stride);
        stride += p.ty.size();
    }
    let needed = header.count * stride;
    let body = &bytes[header.body_offset..];
    if body.len() < needed {
        return Err(Error::PlyParse {
            offset: bytes.len(),
            message: format!("vertex data truncated: need {needed} bytes, have {}", body.len()),
        });
    }
    let extra_props: Vec<usize> = (0..header.properties.len()).filter(|i| !slots.contains(i)).collect();
    let mut gaussians = Vec::with_capacity(header.count);
    let mut extra = Vec::with_capacity(header.count);
    for v in 0..header.count {
        let rec = &body[v * stride..(v + 1) * stride];
        let mut raw = [0.0; 14];
        for (k, &slot) in slots.iter().enumerate() {
            let p = &header.properties[slot];
            raw[k] = read_scalar(&rec[offsets[slot]..], p.ty);
        }
        let g = decode(&raw);
        if !g.is_finite() || g.rot.iter().all(|&q| q == 0.0) {
            return Err(Error::PlyParse {
                offset: header.body_offset + v * stride,
                message: format!("vertex {v} has non-finite or degenerate parameters"),
            });
        }
        gaussians.push(g);
        let mut bytes_v = Vec::new();
        for &i in &extra_props {
            let sz = header.properties[i].ty.size();
            bytes_v.extend_from_slice(&rec[offsets[i]..offsets[i] + sz]);
        }
        extra.push(bytes_v);
    }
    Ok(GaussianCloud {
        gaussians,
        mask: None,
        layout: Some(PlyLayout { properties: header.properties, extra }),
    })
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<GaussianCloud> {
    parse_ply(&fs::read(path)?)
}

fn default_layout() -> Vec<PlyProperty> {
    REQUIRED_PROPERTIES
        .iter()
        .map(|n| PlyProperty { name: n.to_string(), ty: ScalarType::F32 })
        .collect()
}

/// Serializes a cloud. A cloud that came from [`parse_ply`] keeps its
/// original property order and extra payload.
pub fn encode_ply(cloud: &GaussianCloud) -> Vec<u8> {
    let layout = cloud
        .layout
        .as_ref()
        .filter(|l| l.extra.len() == cloud.gaussians.len());
    let properties = layout.map(|l| l.properties.clone()).unwrap_or_else(default_layout);
    let mut out = Vec::new();
    out.extend_from_slice(b"ply\nformat binary_little_endian 1.0\n");
    out.extend(format!("element vertex {}\n", cloud.gaussians.len()).bytes());
    for p in &properties {
        out.extend(format!("property {} {}\n", p.ty.name(), p.name).bytes());
    }
    out.extend_from_slice(b"end_header\n");
    for (v, g) in cloud.gaussians.iter().enumerate() {
        let raw = encode(g);
        let mut extra = layout.map(|l| l.extra[v].as_slice()).unwrap_or(&[]);
        for p in &properties {
            match REQUIRED_PROPERTIES.iter().position(|n| *n == p.name) {
                Some(k) => write_scalar(&mut out, raw[k], p.ty),
                None => {
                    let sz = p.ty.size();
                    out.extend_from_slice(&extra[..sz]);
                    extra = &extra[sz..];
                }
            }
        }
    }
    out
}

pub fn save_ply(cloud: &GaussianCloud, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_ply(cloud))?;
    Ok(())
}
