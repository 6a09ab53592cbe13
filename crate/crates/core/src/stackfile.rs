//! Binary stack files.
//!
//! A file is one line of JSON header terminated by `\n`, followed by the raw
//! little-endian payload in row-major order. `f32` stacks hold real pixels;
//! `c64` stacks hold complex values as interleaved `(re, im)` pairs of `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::coeffs::{CoeffStack, Layout};
use crate::error::{Error, Result};
use crate::image::Image;

pub const MAGIC: &str = "HMRA2D";
pub const VERSION: u32 = 1;
/// Longest header accepted by the reader.
const MAX_HEADER: u64 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "c64")]
    C64,
}

impl Dtype {
    pub fn element_size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::C64 => 16,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackMetadata {
    #[serde(rename = "L", default, skip_serializing_if = "Option::is_none")]
    pub side: Option<usize>,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis_hash: Option<String>,
    /// Radial counts per angular frequency, for coefficient stacks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<Vec<usize>>,
    #[serde(default)]
    pub has_nan: bool,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackHeader {
    pub magic: String,
    pub version: u32,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub endianness: String,
    pub payload_bytes: u64,
    #[serde(default)]
    pub metadata: StackMetadata,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StackData {
    F32(Vec<f32>),
    C64(Vec<Complex64>),
}

impl StackData {
    pub fn len(&self) -> usize {
        match self {
            StackData::F32(v) => v.len(),
            StackData::C64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            StackData::F32(_) => Dtype::F32,
            StackData::C64(_) => Dtype::C64,
        }
    }

    fn has_nan(&self) -> bool {
        match self {
            StackData::F32(v) => v.iter().any(|x| x.is_nan()),
            StackData::C64(v) => v.iter().any(|x| x.re.is_nan() || x.im.is_nan()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackFile {
    pub header: StackHeader,
    pub data: StackData,
}

impl StackFile {
    /// Builds a stack, filling in the derived header fields.
    pub fn new(shape: Vec<usize>, data: StackData, mut metadata: StackMetadata) -> Result<Self> {
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::SizeMismatch {
                expected: count,
                actual: data.len(),
            });
        }
        metadata.has_nan = data.has_nan();
        Ok(StackFile {
            header: StackHeader {
                magic: MAGIC.to_string(),
                version: VERSION,
                dtype: data.dtype(),
                shape,
                endianness: "LE".to_string(),
                payload_bytes: (count * data.dtype().element_size()) as u64,
                metadata,
            },
            data,
        })
    }

    /// Images as an `n x L x L` f32 stack.
    pub fn from_images(images: &[Image], metadata: StackMetadata) -> Result<Self> {
        let side = images.first().map_or(0, |im| im.side());
        let mut v = Vec::with_capacity(images.len() * side * side);
        for im in images {
            if im.side() != side {
                return Err(Error::SizeMismatch {
                    expected: side,
                    actual: im.side(),
                });
            }
            v.extend(im.pixels().iter().map(|&x| x as f32));
        }
        let metadata = StackMetadata {
            side: Some(side),
            ..metadata
        };
        StackFile::new(vec![images.len(), side, side], StackData::F32(v), metadata)
    }

    /// Coefficients as an `n x P` c64 stack; the layout goes into the metadata.
    pub fn from_coefficients(stack: &CoeffStack, metadata: StackMetadata) -> Result<Self> {
        let metadata = StackMetadata {
            layout: Some(stack.layout().counts().to_vec()),
            ..metadata
        };
        StackFile::new(
            vec![stack.len(), stack.layout().len()],
            StackData::C64(stack.data().to_vec()),
            metadata,
        )
    }

    pub fn to_images(&self) -> Result<Vec<Image>> {
        let StackData::F32(v) = &self.data else {
            return Err(Error::Format("expected an f32 image stack".into()));
        };
        let &[n, rows, cols] = self.header.shape.as_slice() else {
            return Err(Error::Format("image stacks have shape n x L x L".into()));
        };
        if rows != cols {
            return Err(Error::Format(format!(
                "images must be square, got {rows} x {cols}"
            )));
        }
        (0..n)
            .map(|i| {
                let px = v[i * rows * rows..(i + 1) * rows * rows]
                    .iter()
                    .map(|&x| x as f64)
                    .collect();
                Image::from_pixels(rows, px)
            })
            .collect()
    }

    pub fn to_coefficients(&self) -> Result<CoeffStack> {
        let StackData::C64(v) = &self.data else {
            return Err(Error::Format("expected a c64 coefficient stack".into()));
        };
        let Some(counts) = &self.header.metadata.layout else {
            return Err(Error::Format("coefficient stack without a layout".into()));
        };
        let layout = Layout::new(counts.clone());
        if self.header.shape.len() != 2 || self.header.shape[1] != layout.len() {
            return Err(Error::Format(format!(
                "shape {:?} does not match a layout of {} coefficients",
                self.header.shape,
                layout.len()
            )));
        }
        CoeffStack::from_data(std::sync::Arc::new(layout), v.clone())
    }
}

pub fn encode_stack(stack: &StackFile) -> Result<Vec<u8>> {
    let header = serde_json::to_string(&stack.header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(header.len() + 1 + stack.header.payload_bytes as usize);
    out.extend_from_slice(header.as_bytes());
    out.push(b'\n');
    match &stack.data {
        StackData::F32(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        StackData::C64(v) => {
            for x in v {
                out.extend_from_slice(&x.re.to_le_bytes());
                out.extend_from_slice(&x.im.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn write_stack(path: &Path, stack: &StackFile) -> Result<()> {
    let bytes = encode_stack(stack)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn read_stack(path: &Path) -> Result<StackFile> {
    let f = fs::File::open(path)?;
    decode_stack(BufReader::new(f))
}

pub fn decode_stack(mut r: impl BufRead) -> Result<StackFile> {
    let mut line = Vec::new();
    (&mut r).take(MAX_HEADER).read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::Format("missing header line".into()));
    }
    line.pop();
    let value: serde_json::Value = serde_json::from_slice(&line)
        .map_err(|e| Error::Format(format!("header is not JSON: {e}")))?;
    if value.get("magic").and_then(|m| m.as_str()) != Some(MAGIC) {
        return Err(Error::Format("bad magic".into()));
    }
    if value.get("version").and_then(|v| v.as_u64()) != Some(VERSION as u64) {
        return Err(Error::Format(format!(
            "unsupported version {}",
            value["version"]
        )));
    }
    if value.get("endianness").and_then(|v| v.as_str()) != Some("LE") {
        return Err(Error::Format(format!(
            "unsupported endianness {}",
            value["endianness"]
        )));
    }
    let header: StackHeader =
        serde_json::from_value(value).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    let count = header
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("shape overflows".into()))?;
    let expected = count
        .checked_mul(header.dtype.element_size())
        .ok_or_else(|| Error::Format("shape overflows".into()))? as u64;
    if header.payload_bytes != expected {
        return Err(Error::Format(format!(
            "header declares {} payload bytes, shape implies {expected}",
            header.payload_bytes
        )));
    }
    let mut payload = Vec::new();
    (&mut r).take(expected + 1).read_to_end(&mut payload)?;
    if payload.len() as u64 != expected {
        return Err(Error::Corrupt(format!(
            "payload has {} bytes, expected {expected}",
            payload.len()
        )));
    }
    let data = match header.dtype {
        Dtype::F32 => StackData::F32(
            payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect(),
        ),
        Dtype::C64 => StackData::C64(
            payload
                .chunks_exact(16)
                .map(|b| {
                    Complex64::new(
                        f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
                        f64::from_le_bytes(b[8..].try_into().expect("8 bytes")),
                    )
                })
                .collect(),
        ),
    };
    if data.has_nan() != header.metadata.has_nan {
        return Err(Error::Corrupt("NaN flag disagrees with the payload".into()));
    }
    Ok(StackFile { header, data })
}
