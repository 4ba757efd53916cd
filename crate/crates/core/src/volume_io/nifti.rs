//! Single-file NIfTI-1 (`.nii`, `.nii.gz`) reading and writing.
//!
//! Scalar volumes are 3-D; vector fields are 4-D with the 3-vector axis
//! last. Every file written here carries a comment extension holding one
//! word naming the payload (`image`, `mask`, `labels`, `svf`, `disp`) and a
//! second comment extension with the full-precision affine and, for label
//! maps, the label table.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, BigEndian};
use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::{DataType, LabelTable, LabelVolume, MaskVolume, Volume};
use crate::error::{Error, Result};
use crate::geometry::{DisplacementField, Grid, Svf, VectorField};

const HEADER_SIZE: usize = 348;
const ECODE_COMMENT: i32 = 6;
const META_PREFIX: &str = "longreg-meta:";
const INTENT_LABEL: i16 = 1002;
const INTENT_VECTOR: i16 = 1007;

/// Payload kind recorded in the header extension.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VolumeKind {
    Image,
    Mask,
    Labels,
    Svf,
    Displacement,
}

impl VolumeKind {
    fn word(self) -> &'static str {
        match self {
            VolumeKind::Image => "image",
            VolumeKind::Mask => "mask",
            VolumeKind::Labels => "labels",
            VolumeKind::Svf => "svf",
            VolumeKind::Displacement => "disp",
        }
    }

    fn from_word(w: &str) -> Option<Self> {
        Some(match w {
            "image" => VolumeKind::Image,
            "mask" => VolumeKind::Mask,
            "labels" => VolumeKind::Labels,
            "svf" => VolumeKind::Svf,
            "disp" => VolumeKind::Displacement,
            _ => return None,
        })
    }
}

/// Any payload [`read_volume`] can return.
#[derive(Clone, Debug, PartialEq)]
pub enum LoadedVolume {
    Image(Volume),
    Mask(MaskVolume),
    Labels(LabelVolume),
    Svf(Svf),
    Displacement(DisplacementField),
}

impl LoadedVolume {
    pub fn kind(&self) -> VolumeKind {
        match self {
            LoadedVolume::Image(_) => VolumeKind::Image,
            LoadedVolume::Mask(_) => VolumeKind::Mask,
            LoadedVolume::Labels(_) => VolumeKind::Labels,
            LoadedVolume::Svf(_) => VolumeKind::Svf,
            LoadedVolume::Displacement(_) => VolumeKind::Displacement,
        }
    }

    pub fn grid(&self) -> &Grid {
        match self {
            LoadedVolume::Image(v) => v.grid(),
            LoadedVolume::Mask(v) => v.grid(),
            LoadedVolume::Labels(v) => v.grid(),
            LoadedVolume::Svf(v) => v.grid(),
            LoadedVolume::Displacement(v) => v.grid(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    affine: [f64; 16],
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    labels: Vec<(i32, String)>,
}

fn datatype_code(dt: DataType) -> (i16, i16) {
    match dt {
        DataType::U8 => (2, 8),
        DataType::I16 => (4, 16),
        DataType::I32 => (8, 32),
        DataType::F32 => (16, 32),
        DataType::F64 => (64, 64),
        DataType::I8 => (256, 8),
        DataType::U16 => (512, 16),
        DataType::U32 => (768, 32),
        DataType::I64 => (1024, 64),
    }
}

fn datatype_from_code(code: i16) -> Option<DataType> {
    Some(match code {
        2 => DataType::U8,
        4 => DataType::I16,
        8 => DataType::I32,
        16 => DataType::F32,
        64 => DataType::F64,
        256 => DataType::I8,
        512 => DataType::U16,
        768 => DataType::U32,
        1024 => DataType::I64,
        _ => return None,
    })
}

fn bytes_per_sample(dt: DataType) -> usize {
    (datatype_code(dt).1 / 8) as usize
}

struct Cursor<'a> {
    bytes: &'a [u8],
    path: &'a Path,
    big_endian: bool,
}

impl Cursor<'_> {
    fn need(&self, offset: usize, len: usize) -> Result<&[u8]> {
        self.bytes.get(offset..offset + len).ok_or_else(|| Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.bytes.len() as u64,
            message: format!(
                "file truncated: needed {len} bytes at offset {offset}, file has {}",
                self.bytes.len()
            ),
        })
    }

    fn i16(&self, offset: usize) -> Result<i16> {
        let b = self.need(offset, 2)?;
        Ok(if self.big_endian {
            BigEndian::read_i16(b)
        } else {
            LittleEndian::read_i16(b)
        })
    }

    fn i32(&self, offset: usize) -> Result<i32> {
        let b = self.need(offset, 4)?;
        Ok(if self.big_endian {
            BigEndian::read_i32(b)
        } else {
            LittleEndian::read_i32(b)
        })
    }

    fn f32(&self, offset: usize) -> Result<f32> {
        let b = self.need(offset, 4)?;
        Ok(if self.big_endian {
            BigEndian::read_f32(b)
        } else {
            LittleEndian::read_f32(b)
        })
    }

    fn sample(&self, dt: DataType, offset: usize) -> Result<f64> {
        let b = self.need(offset, bytes_per_sample(dt))?;
        let be = self.big_endian;
        Ok(match dt {
            DataType::U8 => b[0] as f64,
            DataType::I8 => b[0] as i8 as f64,
            DataType::I16 => (if be { BigEndian::read_i16(b) } else { LittleEndian::read_i16(b) }) as f64,
            DataType::U16 => (if be { BigEndian::read_u16(b) } else { LittleEndian::read_u16(b) }) as f64,
            DataType::I32 => (if be { BigEndian::read_i32(b) } else { LittleEndian::read_i32(b) }) as f64,
            DataType::U32 => (if be { BigEndian::read_u32(b) } else { LittleEndian::read_u32(b) }) as f64,
            DataType::I64 => (if be { BigEndian::read_i64(b) } else { LittleEndian::read_i64(b) }) as f64,
            DataType::F32 => (if be { BigEndian::read_f32(b) } else { LittleEndian::read_f32(b) }) as f64,
            DataType::F64 => if be { BigEndian::read_f64(b) } else { LittleEndian::read_f64(b) },
        })
    }
}

fn parse_error(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    }
}

struct Parsed {
    grid: Grid,
    datatype: DataType,
    samples: Vec<f64>,
    vector: bool,
    kind: Option<VolumeKind>,
    labels: Vec<(i32, String)>,
    intent: i16,
}

fn load_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        MultiGzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| parse_error(path, out.len(), format!("gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn parse(path: &Path, bytes: &[u8]) -> Result<Parsed> {
    let mut cur = Cursor {
        bytes,
        path,
        big_endian: false,
    };
    let size = cur.i32(0)?;
    if size != HEADER_SIZE as i32 {
        cur.big_endian = true;
        if cur.i32(0)? != HEADER_SIZE as i32 {
            return Err(parse_error(path, 0, format!("sizeof_hdr is {size}, expected 348")));
        }
    }
    let magic = cur.need(344, 4)?;
    if &magic[..3] != b"n+1" {
        return Err(parse_error(
            path,
            344,
            "magic is not n+1 (only single-file NIfTI-1 is supported)",
        ));
    }

    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = cur.i16(40 + 2 * i)?;
    }
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(parse_error(path, 40, format!("invalid dim[0] = {ndim}")));
    }
    let extent = |a: usize| -> usize {
        if (a as i16) <= ndim {
            dim[a].max(1) as usize
        } else {
            1
        }
    };
    let shape = [extent(1), extent(2), extent(3)];
    let vector = match ndim {
        1..=3 => false,
        4 if extent(4) == 1 => false,
        4 if extent(4) == 3 => true,
        5 if extent(4) == 1 && extent(5) == 3 => true,
        _ => {
            return Err(Error::UnsupportedDimensionality(format!(
                "{}: dims {:?} (expected 3-D, or 4-D with a length-3 last axis)",
                path.display(),
                &dim[..=ndim as usize]
            )))
        }
    };
    if ndim > 5 || (ndim == 5 && !vector) {
        return Err(Error::UnsupportedDimensionality(format!(
            "{}: dims {:?}",
            path.display(),
            &dim[..=ndim as usize]
        )));
    }

    let intent = cur.i16(68)?;
    let code = cur.i16(70)?;
    let datatype = datatype_from_code(code)
        .ok_or_else(|| parse_error(path, 70, format!("unsupported datatype code {code}")))?;
    let mut pixdim = [0f64; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = cur.f32(76 + 4 * i)? as f64;
    }
    let vox_offset = cur.f32(108)? as usize;
    let slope = cur.f32(112)? as f64;
    let inter = cur.f32(116)? as f64;
    let qform_code = cur.i16(252)?;
    let sform_code = cur.i16(254)?;

    // extensions
    let mut kind = None;
    let mut meta: Option<Meta> = None;
    if vox_offset > HEADER_SIZE + 4 {
        let flag = cur.need(HEADER_SIZE, 4)?;
        if flag[0] != 0 {
            let mut off = HEADER_SIZE + 4;
            while off + 8 <= vox_offset {
                let esize = cur.i32(off)?;
                let ecode = cur.i32(off + 4)?;
                if esize < 8 || off + esize as usize > vox_offset {
                    return Err(parse_error(path, off, format!("bad extension size {esize}")));
                }
                let content = cur.need(off + 8, esize as usize - 8)?;
                if ecode == ECODE_COMMENT {
                    let text = String::from_utf8_lossy(content);
                    let text = text.trim_end_matches('\0').trim();
                    if let Some(json) = text.strip_prefix(META_PREFIX) {
                        meta = serde_json::from_str(json).ok();
                    } else if let Some(k) = VolumeKind::from_word(text) {
                        kind = Some(k);
                    }
                }
                off += esize as usize;
            }
        }
    }

    let affine = header_affine(&cur, qform_code, sform_code, &pixdim)?;
    let affine = match &meta {
        // prefer the exact copy when it agrees with the float32 header
        Some(m) => {
            let exact = Matrix4::from_row_slice(&m.affine);
            if (exact - affine).amax() <= 1e-4 * (1.0 + affine.amax()) {
                exact
            } else {
                affine
            }
        }
        None => affine,
    };
    let grid = Grid::new(shape, affine)
        .map_err(|e| parse_error(path, 280, format!("invalid spatial transform: {e}")))?;

    let comps = if vector { 3 } else { 1 };
    let count = grid.len() * comps;
    let bps = bytes_per_sample(datatype);
    cur.need(vox_offset, count * bps)?;
    let scale = slope != 0.0 && !(slope == 1.0 && inter == 0.0);
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let v = cur.sample(datatype, vox_offset + i * bps)?;
        samples.push(if scale { v * slope + inter } else { v });
    }

    Ok(Parsed {
        grid,
        datatype,
        samples,
        vector,
        kind,
        labels: meta.map(|m| m.labels).unwrap_or_default(),
        intent,
    })
}

fn header_affine(cur: &Cursor, qform_code: i16, sform_code: i16, pixdim: &[f64; 8]) -> Result<Matrix4<f64>> {
    if sform_code > 0 {
        let mut m = Matrix4::identity();
        for r in 0..3 {
            for c in 0..4 {
                m[(r, c)] = cur.f32(280 + 16 * r + 4 * c)? as f64;
            }
        }
        return Ok(m);
    }
    let spacing = Vector3::new(
        if pixdim[1] > 0.0 { pixdim[1] } else { 1.0 },
        if pixdim[2] > 0.0 { pixdim[2] } else { 1.0 },
        if pixdim[3] > 0.0 { pixdim[3] } else { 1.0 },
    );
    if qform_code > 0 {
        let b = cur.f32(256)? as f64;
        let c = cur.f32(260)? as f64;
        let d = cur.f32(264)? as f64;
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let r = Matrix3::new(
            a * a + b * b - c * c - d * d,
            2.0 * (b * c - a * d),
            2.0 * (b * d + a * c),
            2.0 * (b * c + a * d),
            a * a + c * c - b * b - d * d,
            2.0 * (c * d - a * b),
            2.0 * (b * d - a * c),
            2.0 * (c * d + a * b),
            a * a + d * d - c * c - b * b,
        );
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let scale = Matrix3::from_diagonal(&Vector3::new(spacing.x, spacing.y, qfac * spacing.z));
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(r * scale));
        m[(0, 3)] = cur.f32(268)? as f64;
        m[(1, 3)] = cur.f32(272)? as f64;
        m[(2, 3)] = cur.f32(276)? as f64;
        return Ok(m);
    }
    let mut m = Matrix4::identity();
    m[(0, 0)] = spacing.x;
    m[(1, 1)] = spacing.y;
    m[(2, 2)] = spacing.z;
    Ok(m)
}

/// Reads any supported payload, dispatching on the recorded kind.
///
/// Files without a kind extension are classified by content: vector
/// payloads become SVFs, integer datatypes (or the label intent) become
/// label maps, anything else an image.
pub fn read_volume(path: impl AsRef<Path>) -> Result<LoadedVolume> {
    let path = path.as_ref();
    let bytes = load_bytes(path)?;
    let p = parse(path, &bytes)?;
    let kind = p.kind.unwrap_or(if p.vector {
        VolumeKind::Svf
    } else if p.datatype.is_integer() || p.intent == INTENT_LABEL {
        VolumeKind::Labels
    } else {
        VolumeKind::Image
    });
    if p.vector != matches!(kind, VolumeKind::Svf | VolumeKind::Displacement) {
        return Err(Error::UnsupportedDimensionality(format!(
            "{}: payload '{}' does not match the stored dimensionality",
            path.display(),
            kind.word()
        )));
    }
    match kind {
        VolumeKind::Image => Ok(LoadedVolume::Image(
            Volume::with_datatype(p.grid, p.samples, p.datatype)
                .map_err(|e| parse_error(path, 352, e.to_string()))?,
        )),
        VolumeKind::Mask => Ok(LoadedVolume::Mask(
            MaskVolume::new(p.grid, p.samples).map_err(|e| parse_error(path, 352, e.to_string()))?,
        )),
        VolumeKind::Labels => {
            let labels: Vec<i32> = p.samples.iter().map(|&v| v.round() as i32).collect();
            let table = if p.labels.is_empty() {
                LabelTable::from_labels(&labels)
            } else {
                LabelTable::new(p.labels)
            };
            Ok(LoadedVolume::Labels(LabelVolume::new(p.grid, labels, table)?))
        }
        VolumeKind::Svf | VolumeKind::Displacement => {
            let n = p.grid.len();
            let values = (0..n)
                .map(|i| Vector3::new(p.samples[i], p.samples[n + i], p.samples[2 * n + i]))
                .collect();
            let field = VectorField::new(p.grid, values)?;
            if !field.is_finite() {
                return Err(Error::NonFiniteField);
            }
            Ok(if kind == VolumeKind::Svf {
                LoadedVolume::Svf(Svf::new(field))
            } else {
                LoadedVolume::Displacement(DisplacementField::new(field))
            })
        }
    }
}

fn wrong_kind(path: &Path, want: &str, got: VolumeKind) -> Error {
    Error::UnsupportedDimensionality(format!(
        "{}: expected {want}, file holds '{}'",
        path.display(),
        got.word()
    ))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    match read_volume(path)? {
        LoadedVolume::Image(v) => Ok(v),
        LoadedVolume::Mask(m) => Volume::new(m.grid().clone(), m.probabilities().to_vec()),
        LoadedVolume::Labels(l) => Volume::with_datatype(
            l.grid().clone(),
            l.labels().iter().map(|&v| v as f64).collect(),
            DataType::I32,
        ),
        other => Err(wrong_kind(path, "a scalar image", other.kind())),
    }
}

/// Reads a mask; plain images are accepted when every value lies in `[0, 1]`.
pub fn read_mask(path: impl AsRef<Path>) -> Result<MaskVolume> {
    let path = path.as_ref();
    match read_volume(path)? {
        LoadedVolume::Mask(m) => Ok(m),
        LoadedVolume::Image(v) => MaskVolume::new(v.grid().clone(), v.into_data()),
        LoadedVolume::Labels(l) => {
            let inside: Vec<bool> = l.labels().iter().map(|&v| v != 0).collect();
            MaskVolume::from_binary(l.grid().clone(), &inside)
        }
        other => Err(wrong_kind(path, "a mask", other.kind())),
    }
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let path = path.as_ref();
    match read_volume(path)? {
        LoadedVolume::Labels(l) => Ok(l),
        LoadedVolume::Image(v) if v.data().iter().all(|x| x.fract() == 0.0) => {
            LabelVolume::from_labels(
                v.grid().clone(),
                v.data().iter().map(|&x| x as i32).collect(),
            )
        }
        other => Err(wrong_kind(path, "a label map", other.kind())),
    }
}

pub fn read_svf(path: impl AsRef<Path>) -> Result<Svf> {
    let path = path.as_ref();
    match read_volume(path)? {
        LoadedVolume::Svf(v) => Ok(v),
        other => Err(wrong_kind(path, "an SVF", other.kind())),
    }
}

pub fn read_displacement(path: impl AsRef<Path>) -> Result<DisplacementField> {
    let path = path.as_ref();
    match read_volume(path)? {
        LoadedVolume::Displacement(v) => Ok(v),
        other => Err(wrong_kind(path, "a displacement field", other.kind())),
    }
}

fn comment_extension(text: &str) -> Vec<u8> {
    let body = text.as_bytes();
    let esize = (8 + body.len() + 1).div_ceil(16) * 16;
    let mut out = vec![0u8; esize];
    LittleEndian::write_i32(&mut out[0..4], esize as i32);
    LittleEndian::write_i32(&mut out[4..8], ECODE_COMMENT);
    out[8..8 + body.len()].copy_from_slice(body);
    out
}

fn write_sample(buf: &mut Vec<u8>, dt: DataType, v: f64) {
    let mut tmp = [0u8; 8];
    let n = bytes_per_sample(dt);
    match dt {
        DataType::U8 => tmp[0] = v as u8,
        DataType::I8 => tmp[0] = v as i8 as u8,
        DataType::I16 => LittleEndian::write_i16(&mut tmp, v as i16),
        DataType::U16 => LittleEndian::write_u16(&mut tmp, v as u16),
        DataType::I32 => LittleEndian::write_i32(&mut tmp, v as i32),
        DataType::U32 => LittleEndian::write_u32(&mut tmp, v as u32),
        DataType::I64 => LittleEndian::write_i64(&mut tmp, v as i64),
        DataType::F32 => LittleEndian::write_f32(&mut tmp, v as f32),
        DataType::F64 => LittleEndian::write_f64(&mut tmp, v),
    }
    buf.extend_from_slice(&tmp[..n]);
}

fn encode(
    grid: &Grid,
    kind: VolumeKind,
    datatype: DataType,
    samples: &[f64],
    labels: Option<&LabelTable>,
) -> Vec<u8> {
    let vector = matches!(kind, VolumeKind::Svf | VolumeKind::Displacement);
    let mut h = vec![0u8; HEADER_SIZE];
    LittleEndian::write_i32(&mut h[0..4], HEADER_SIZE as i32);
    h[38] = b'r';
    let shape = grid.shape();
    let dims: [i16; 8] = [
        if vector { 4 } else { 3 },
        shape[0] as i16,
        shape[1] as i16,
        shape[2] as i16,
        if vector { 3 } else { 1 },
        1,
        1,
        1,
    ];
    for (i, d) in dims.iter().enumerate() {
        LittleEndian::write_i16(&mut h[40 + 2 * i..], *d);
    }
    let intent = match kind {
        VolumeKind::Labels => INTENT_LABEL,
        VolumeKind::Svf | VolumeKind::Displacement => INTENT_VECTOR,
        _ => 0,
    };
    LittleEndian::write_i16(&mut h[68..], intent);
    let (code, bitpix) = datatype_code(datatype);
    LittleEndian::write_i16(&mut h[70..], code);
    LittleEndian::write_i16(&mut h[72..], bitpix);

    // qform from the rotation part when the affine is a rotation times a diagonal
    let linear = grid.linear();
    let spacing = grid.spacing();
    let mut rot = linear * Matrix3::from_diagonal(&spacing.map(|s| 1.0 / s));
    let qfac = if rot.determinant() < 0.0 {
        rot.set_column(2, &(-rot.column(2)));
        -1.0
    } else {
        1.0
    };
    let orthonormal = (rot * rot.transpose() - Matrix3::identity()).amax() < 1e-6;
    let pix = [qfac, spacing.x, spacing.y, spacing.z, 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pix.iter().enumerate() {
        LittleEndian::write_f32(&mut h[76 + 4 * i..], *p as f32);
    }

    let word = comment_extension(kind.word());
    let meta = Meta {
        affine: {
            let mut a = [0.0; 16];
            for r in 0..4 {
                for c in 0..4 {
                    a[4 * r + c] = grid.affine()[(r, c)];
                }
            }
            a
        },
        labels: labels
            .map(|t| t.iter().map(|(k, v)| (k, v.to_string())).collect())
            .unwrap_or_default(),
    };
    let meta = comment_extension(&format!(
        "{META_PREFIX}{}",
        serde_json::to_string(&meta).expect("metadata serialises")
    ));
    let vox_offset = HEADER_SIZE + 4 + word.len() + meta.len();
    LittleEndian::write_f32(&mut h[108..], vox_offset as f32);
    LittleEndian::write_f32(&mut h[112..], 1.0);
    h[123] = 2; // mm
    let descrip = format!("longreg {}", kind.word());
    h[148..148 + descrip.len()].copy_from_slice(descrip.as_bytes());

    if orthonormal {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(rot));
        let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
        LittleEndian::write_i16(&mut h[252..], 2);
        LittleEndian::write_f32(&mut h[256..], q.i as f32);
        LittleEndian::write_f32(&mut h[260..], q.j as f32);
        LittleEndian::write_f32(&mut h[264..], q.k as f32);
    }
    LittleEndian::write_f32(&mut h[268..], grid.affine()[(0, 3)] as f32);
    LittleEndian::write_f32(&mut h[272..], grid.affine()[(1, 3)] as f32);
    LittleEndian::write_f32(&mut h[276..], grid.affine()[(2, 3)] as f32);
    LittleEndian::write_i16(&mut h[254..], 2);
    for r in 0..3 {
        for c in 0..4 {
            LittleEndian::write_f32(&mut h[280 + 16 * r + 4 * c..], grid.affine()[(r, c)] as f32);
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");

    let mut out = h;
    out.extend_from_slice(&[1, 0, 0, 0]);
    out.extend_from_slice(&word);
    out.extend_from_slice(&meta);
    out.reserve(samples.len() * bytes_per_sample(datatype));
    for &v in samples {
        write_sample(&mut out, datatype, v);
    }
    out
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let gz = path
        .file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.ends_with(".gz"));
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    if gz {
        let mut enc = GzEncoder::new(file, Compression::fast());
        enc.write_all(bytes)
            .and_then(|_| enc.finish().map(|_| ()))
            .map_err(|e| Error::io(path, e))
    } else {
        let mut file = file;
        file.write_all(bytes).map_err(|e| Error::io(path, e))
    }
}

fn vector_samples(field: &VectorField) -> Vec<f64> {
    let n = field.values().len();
    let mut out = vec![0.0; 3 * n];
    for (i, v) in field.values().iter().enumerate() {
        out[i] = v.x;
        out[n + i] = v.y;
        out[2 * n + i] = v.z;
    }
    out
}

/// Writes any payload; `.gz` suffixes are gzip-compressed.
pub fn write_volume(v: &LoadedVolume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = match v {
        LoadedVolume::Image(x) => encode(x.grid(), VolumeKind::Image, x.datatype(), x.data(), None),
        LoadedVolume::Mask(x) => {
            encode(x.grid(), VolumeKind::Mask, DataType::F64, x.probabilities(), None)
        }
        LoadedVolume::Labels(x) => {
            let s: Vec<f64> = x.labels().iter().map(|&l| l as f64).collect();
            encode(x.grid(), VolumeKind::Labels, DataType::I32, &s, Some(x.table()))
        }
        LoadedVolume::Svf(x) => {
            encode(x.grid(), VolumeKind::Svf, DataType::F64, &vector_samples(x), None)
        }
        LoadedVolume::Displacement(x) => encode(
            x.grid(),
            VolumeKind::Displacement,
            DataType::F64,
            &vector_samples(x),
            None,
        ),
    };
    write_bytes(path, &bytes)
}
