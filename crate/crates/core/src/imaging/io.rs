//! On-disk raster formats.
//!
//! `SSCA-TENSOR v1` layout (all integers little-endian):
//!
//! ```text
//! "SSCA" | version: u8 = 1 | dtype: u8 = 1 (f32) | ndims: u32 | dims: ndims × u32 | payload: f32 row-major
//! ```
//!
//! Binary PPM (`P6`, 8-bit) export is provided for eyeballing results.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Image, RegionMask};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SSCA";
pub const TENSOR_VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;

/// A dense f32 tensor as stored in an `SSCA-TENSOR` file.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::dims(format!(
                "tensor dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(10 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(TENSOR_VERSION);
        out.push(DTYPE_F32);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic bytes, expected SSCA".into()));
        }
        let version = r.u8()?;
        if version != TENSOR_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: TENSOR_VERSION,
            });
        }
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported dtype code {dtype}")));
        }
        let ndims = r.u32()? as usize;
        let dims = (0..ndims)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let data = r.f32s(count)?;
        if !r.is_done() {
            return Err(Error::Format("trailing bytes after tensor payload".into()));
        }
        Tensor::new(dims, data)
    }
}

/// Minimal cursor over a byte slice with format errors on truncation.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Format("tensor too large".into()))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Writes `bytes` to a temporary sibling and renames it into place, so a
/// crash never leaves a partially written file at `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    write_atomic(path, &tensor.to_bytes())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes)
}

impl Image {
    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            dims: vec![self.height(), self.width(), self.channels()],
            data: self.data().to_vec(),
        }
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        match t.dims.as_slice() {
            &[h, w, c] => Image::new(h, w, c, t.data),
            &[h, w] => Image::new(h, w, 1, t.data),
            other => Err(Error::dims(format!(
                "expected 2 or 3 dims for an image, got {other:?}"
            ))),
        }
    }
}

pub fn save_image(path: &Path, image: &Image) -> Result<()> {
    write_tensor(path, &image.to_tensor())
}

pub fn load_image(path: &Path) -> Result<Image> {
    Image::from_tensor(read_tensor(path)?)
}

/// Stacks equally-sized images into one `[n, h, w, c]` tensor.
pub fn stack_images(images: &[Image]) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::EmptySource("cannot stack zero images".into()));
    };
    let (h, w, c) = first.dims();
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        first.same_dims(img)?;
        data.extend_from_slice(img.data());
    }
    Tensor::new(vec![images.len(), h, w, c], data)
}

pub fn unstack_images(t: &Tensor) -> Result<Vec<Image>> {
    let &[n, h, w, c] = t.dims.as_slice() else {
        return Err(Error::dims(format!(
            "expected [n, h, w, c], got {:?}",
            t.dims
        )));
    };
    let size = h * w * c;
    (0..n)
        .map(|i| Image::new(h, w, c, t.data[i * size..(i + 1) * size].to_vec()))
        .collect()
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes an image as a binary 8-bit PPM. Single-channel images are
/// replicated to gray.
pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let (h, w, c) = image.dims();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            let px = image.pixel(y, x);
            for ch in 0..3 {
                out.push(to_byte(px[if c >= 3 { ch } else { 0 }]));
            }
        }
    }
    out
}

/// Parses the header of a binary PPM, returning `(width, height)`.
pub fn ppm_dims(bytes: &[u8]) -> Result<(usize, usize)> {
    let text = String::from_utf8_lossy(&bytes[..bytes.len().min(64)]);
    let mut tokens = text.split_whitespace();
    if tokens.next() != Some("P6") {
        return Err(Error::Format("not a P6 PPM".into()));
    }
    let mut next = || -> Result<usize> {
        tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Format("truncated PPM header".into()))
    };
    Ok((next()?, next()?))
}

pub fn save_ppm(path: &Path, image: &Image) -> Result<()> {
    write_atomic(path, &encode_ppm(image))
}

/// Renders `image` with the selected cells of `mask` blended toward red.
pub fn overlay(image: &Image, mask: &RegionMask) -> Result<Image> {
    mask.grid().matches(image)?;
    let (h, w, c) = image.dims();
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let px = image.pixel(y, x);
            let rgb = if c >= 3 {
                [px[0], px[1], px[2]]
            } else {
                [px[0]; 3]
            };
            let hit = mask
                .selected()
                .iter()
                .any(|&id| mask.grid().cell(id).contains(y, x));
            if hit {
                data.extend([0.5 * rgb[0] + 0.5, 0.5 * rgb[1], 0.5 * rgb[2]]);
            } else {
                data.extend(rgb);
            }
        }
    }
    Image::new(h, w, 3, data)
}
