//! Binary and text file formats.
//!
//! ASFT tensor:
//! ```text
//! "ASFT" | u32 version = 1 | u8 rank = 4 | u32 N, C, H, W | N·C·H·W f32
//! ```
//! ASFC checkpoint:
//! ```text
//! "ASFC" | u32 version = 1 | u32 count | count × (u16 name_len | name | ASFT)
//! ```
//! All integers and floats are little-endian. PGM images are binary 8-bit P5.

use std::fs;
use std::path::Path;

use crate::density::SceneAnnotation;
use crate::error::{Error, Result};
use crate::params::Params;
use crate::prune::PruneMask;
use crate::tensor::Tensor;

pub const ASFT_MAGIC: &[u8; 4] = b"ASFT";
pub const ASFC_MAGIC: &[u8; 4] = b"ASFC";
pub const VERSION: u32 = 1;

/// Prefix of checkpoint entries that hold prune masks rather than parameters.
pub const MASK_PREFIX: &str = "mask:";
/// Checkpoint entry holding the mask provenance `[criterion, fraction]`.
pub const MASK_META: &str = "mask.meta";

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.buf.len(),
                format!("truncated {what}: need {n} bytes at offset {}", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn encode_asft(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(ASFT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(4);
    for d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.reserve(t.numel() * 4);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn asft_bytes(t: &Tensor) -> Vec<u8> {
    let mut v = Vec::with_capacity(25 + t.numel() * 4);
    encode_asft(t, &mut v);
    v
}

/// Encoded size of an ASFT payload with `numel` elements.
pub fn asft_len(numel: usize) -> usize {
    4 + 4 + 1 + 16 + 4 * numel
}

fn read_asft(r: &mut Reader<'_>) -> Result<Tensor> {
    let start = r.pos;
    if r.take(4, "ASFT magic")? != ASFT_MAGIC {
        return Err(Error::format(start, "bad magic, expected ASFT"));
    }
    let at = r.pos;
    let version = r.u32("ASFT version")?;
    if version != VERSION {
        return Err(Error::format(at, format!("unsupported ASFT version {version}")));
    }
    let at = r.pos;
    let rank = r.u8("ASFT rank")?;
    if rank != 4 {
        return Err(Error::format(at, format!("rank {rank}, expected 4")));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = r.u32("ASFT dims")? as usize;
    }
    let at = r.pos;
    let numel = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|n| n.checked_mul(4).map(|_| n))
        .ok_or_else(|| Error::format(at, format!("dims {dims:?} overflow")))?;
    let payload = r.take(numel * 4, "ASFT payload")?;
    let mut data = Vec::with_capacity(numel);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(at + 4 * i, format!("non-finite value {v}")));
        }
        data.push(v);
    }
    Tensor::new(dims, data)
}

/// Decodes one ASFT tensor occupying all of `bytes`.
pub fn decode_asft(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes);
    let t = read_asft(&mut r)?;
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos, "trailing bytes after ASFT payload"));
    }
    Ok(t)
}

/// Parameters plus an optional prune mask, as stored in an ASFC file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Params,
    pub mask: Option<PruneMask>,
}

pub fn encode_checkpoint(params: &Params, mask: Option<&PruneMask>) -> Vec<u8> {
    let mut entries: Vec<(String, &Tensor)> = params.iter().map(|(n, t)| (n.to_string(), t)).collect();
    let meta;
    if let Some(mask) = mask {
        for (name, m) in mask.iter() {
            entries.push((format!("{MASK_PREFIX}{name}"), m));
        }
        meta = mask.meta_tensor();
        entries.push((MASK_META.to_string(), &meta));
    }
    let mut out = Vec::new();
    out.extend_from_slice(ASFC_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        encode_asft(t, &mut out);
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    if r.take(4, "ASFC magic")? != ASFC_MAGIC {
        return Err(Error::format(0, "bad magic, expected ASFC"));
    }
    let version = r.u32("ASFC version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported ASFC version {version}")));
    }
    let count = r.u32("ASFC tensor count")?;
    let mut params = Params::new();
    let mut masks = Vec::new();
    let mut meta = None;
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..count {
        let len = r.u16("ASFC name length")? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len, "ASFC name")?)
            .map_err(|_| Error::format(at, "tensor name is not UTF-8"))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::format(at, format!("duplicate tensor `{name}`")));
        }
        let t = read_asft(&mut r)?;
        if name == MASK_META {
            meta = Some(t);
        } else if let Some(p) = name.strip_prefix(MASK_PREFIX) {
            masks.push((p.to_string(), t));
        } else {
            params.insert(name, t);
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos, "trailing bytes after last tensor"));
    }
    let mask = match (meta, masks.is_empty()) {
        (None, true) => None,
        (Some(meta), _) => Some(
            PruneMask::from_parts(&meta, masks, &params)
                .map_err(|e| Error::format(bytes.len(), format!("invalid mask entries: {e}")))?,
        ),
        (None, false) => return Err(Error::format(bytes.len(), "mask tensors without mask.meta")),
    };
    Ok(Checkpoint { params, mask })
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_bytes(path, &asft_bytes(t))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode_asft(&read_bytes(path)?)
}

pub fn write_checkpoint(path: &Path, params: &Params, mask: Option<&PruneMask>) -> Result<()> {
    write_bytes(path, &encode_checkpoint(params, mask))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_bytes(path)?)
}

/// Binary 8-bit PGM (P5) decoded to one channel in `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::format(0, "bad magic, expected P5"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos, "expected a header number"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits");
        *field = text
            .parse()
            .map_err(|_| Error::format(start, format!("header number {text} too large")))?;
        if k == 2 {
            if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
                return Err(Error::format(pos, "expected whitespace after maxval"));
            }
            pos += 1;
        }
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(Error::format(3, format!("empty image {w}x{h}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(pos - 1, format!("maxval {maxval} is not an 8-bit depth")));
    }
    let need = w
        .checked_mul(h)
        .ok_or_else(|| Error::format(pos, "image size overflows"))?;
    if bytes.len() - pos < need {
        return Err(Error::format(bytes.len(), format!("truncated pixel data: need {need} bytes at offset {pos}")));
    }
    if bytes.len() - pos > need {
        return Err(Error::format(pos + need, "trailing bytes after pixel data"));
    }
    let maxval = maxval as f32;
    let data = bytes[pos..].iter().map(|&b| (b as f32 / maxval).min(1.0)).collect();
    Tensor::new([1, 1, h, w], data)
}

/// 8-bit P5 encoding of a one-channel map with values in `[0, 1]` (clamped).
pub fn encode_pgm(plane: &[f32], width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(
        plane
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

/// Max-normalized 8-bit visualization of item 0, channel 0.
pub fn density_pgm(density: &Tensor) -> Vec<u8> {
    let plane = density.plane(0, 0);
    let max = plane.iter().cloned().fold(0.0f32, f32::max);
    let norm: Vec<f32> = if max > 0.0 {
        plane.iter().map(|&v| v / max).collect()
    } else {
        vec![0.0; plane.len()]
    };
    encode_pgm(&norm, density.w(), density.h())
}

/// Replicates a 1-channel image to `channels`.
pub fn replicate_channels(gray: &Tensor, channels: usize) -> Tensor {
    let [n, _, h, w] = gray.dims();
    Tensor::from_fn([n, channels, h, w], |[ni, _, hi, wi]| gray.at([ni, 0, hi, wi]))
}

/// Decodes an image file: P5 PGM (replicated to 3 channels) or a 1×3×H×W ASFT tensor.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    if bytes.starts_with(b"P5") {
        Ok(replicate_channels(&decode_pgm(bytes)?, 3))
    } else if bytes.starts_with(ASFT_MAGIC) {
        let t = decode_asft(bytes)?;
        let [n, c, h, w] = t.dims();
        if n != 1 || c != 3 || h == 0 || w == 0 {
            return Err(Error::format(9, format!("image tensor dims {:?}, expected 1x3xHxW", t.dims())));
        }
        Ok(t)
    } else {
        Err(Error::format(0, "unrecognized image format (expected P5 PGM or ASFT)"))
    }
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    decode_image(&read_bytes(path)?)
}

pub fn decode_annotation(bytes: &[u8]) -> Result<SceneAnnotation> {
    let ann: SceneAnnotation = parse_json(bytes, "annotation")?;
    ann.validate()?;
    Ok(ann)
}

pub fn load_annotation(path: &Path) -> Result<SceneAnnotation> {
    decode_annotation(&read_bytes(path)?).map_err(|e| match e {
        Error::Json { source, .. } => Error::Json {
            path: path.display().to_string(),
            source,
        },
        other => other,
    })
}

/// Parses JSON from memory; `origin` names the source in errors.
pub fn parse_json<T: serde::de::DeserializeOwned>(bytes: &[u8], origin: &str) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| Error::Json {
        path: origin.to_string(),
        source: e,
    })
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    parse_json(&read_bytes(path)?, &path.display().to_string())
}

/// Pretty JSON with a trailing newline.
pub fn json_bytes<T: serde::Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializable");
    v.push(b'\n');
    v
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, &json_bytes(value))
}
