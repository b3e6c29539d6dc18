//! Core domain types: dense video tensors, boxes, token sequences, seeds,
//! and the VTNS tensor file format.
//!
//! VTNS layout (all little-endian):
//!
//! ```text
//! "VTNS" | u16 version = 1 | u32 T | u32 H | u32 W | u32 C | T*H*W*C x f32
//! ```
//!
//! Elements are row-major with the channel index varying fastest.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const VTNS_MAGIC: &[u8; 4] = b"VTNS";
pub const VTNS_VERSION: u16 = 1;
/// Bytes before the payload: magic, version and four dimensions.
pub const VTNS_HEADER_LEN: usize = 4 + 2 + 4 * 4;

#[derive(Debug, Error)]
pub enum VideoError {
    #[error("malformed VTNS header: {0}")]
    MalformedHeader(String),
    #[error("shape mismatch: expected {expected} elements, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("value out of range at element {index}: {value}")]
    ValueOutOfRange { index: usize, value: f32 },
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
}

/// Dimensions of a video: frames, height, width, channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Dims {
    pub fn new(t: usize, h: usize, w: usize, c: usize) -> Self {
        Self { t, h, w, c }
    }

    pub fn len(&self) -> usize {
        self.t * self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame_pixels(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn index(&self, t: usize, y: usize, x: usize, c: usize) -> usize {
        ((t * self.h + y) * self.w + x) * self.c + c
    }

    fn validate(&self) -> Result<(), VideoError> {
        if self.t == 0 || self.h == 0 || self.w == 0 {
            return Err(VideoError::InvalidDims(format!(
                "T, H and W must be positive, got {}x{}x{}",
                self.t, self.h, self.w
            )));
        }
        if self.c != 1 && self.c != 3 {
            return Err(VideoError::InvalidDims(format!("channel count must be 1 or 3, got {}", self.c)));
        }
        Ok(())
    }
}

/// Dense `T x H x W x C` video with every element finite and in `[0, 1]`.
///
/// Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    dims: Dims,
    data: Vec<f32>,
}

impl VideoTensor {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self, VideoError> {
        dims.validate()?;
        if data.len() != dims.len() {
            return Err(VideoError::ShapeMismatch { expected: dims.len(), found: data.len() });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(VideoError::ValueOutOfRange { index, value });
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: Dims, value: f32) -> Result<Self, VideoError> {
        Self::new(dims, vec![value; dims.len()])
    }

    /// Builds a tensor from `f64` samples, rounding to `f32`.
    pub fn from_f64(dims: Dims, data: &[f64]) -> Result<Self, VideoError> {
        Self::new(dims, data.iter().map(|&v| v as f32).collect())
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.dims.index(t, y, x, c)]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

/// Axis-aligned box in pixel coordinates with positive area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    /// Returns `None` unless the coordinates are finite with `x1 < x2` and `y1 < y2`.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Option<Self> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        (finite && x1 < x2 && y1 < y2).then_some(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) * 0.5, (self.y1 + self.y2) * 0.5)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self { x1: self.x1 + dx, y1: self.y1 + dy, x2: self.x2 + dx, y2: self.y2 + dy }
    }

    /// Clamps to `[0, width] x [0, height]`; `None` if nothing remains inside.
    pub fn clamp_to(&self, width: f64, height: f64) -> Option<Self> {
        Self::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    /// Corner-wise linear interpolation, `s = 0` gives `self`.
    pub fn lerp(&self, other: &Self, s: f64) -> Self {
        let l = |a: f64, b: f64| a + (b - a) * s;
        Self { x1: l(self.x1, other.x1), y1: l(self.y1, other.y1), x2: l(self.x2, other.x2), y2: l(self.y2, other.y2) }
    }
}

/// Ordered token ids drawn from a vocabulary of `vocab_size` entries.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<u32>,
    vocab_size: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("token id {id} outside vocabulary of size {vocab_size}")]
pub struct TokenOutOfVocab {
    pub id: u32,
    pub vocab_size: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, vocab_size: usize) -> Result<Self, TokenOutOfVocab> {
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(TokenOutOfVocab { id, vocab_size });
        }
        Ok(Self { ids, vocab_size })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// 64-bit seed. Every random stream in the engine is derived from one of these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Seed(pub u64);

impl Seed {
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Derives an independent child seed for a named sub-stream (splitmix64).
    pub fn derive(self, stream: u64) -> Seed {
        let mut z = self.0.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        Seed(z ^ (z >> 31))
    }
}

pub fn read_video_tensor(path: impl AsRef<Path>) -> Result<VideoTensor, VideoError> {
    let mut reader = BufReader::new(File::open(path)?);
    decode_vtns(&mut reader)
}

pub fn write_video_tensor(video: &VideoTensor, path: impl AsRef<Path>) -> Result<(), VideoError> {
    let mut writer = BufWriter::new(File::create(path)?);
    encode_vtns(video, &mut writer)?;
    writer.flush()?;
    Ok(())
}

pub fn encode_vtns(video: &VideoTensor, out: &mut impl Write) -> Result<(), VideoError> {
    let d = video.dims();
    out.write_all(VTNS_MAGIC)?;
    out.write_all(&VTNS_VERSION.to_le_bytes())?;
    for dim in [d.t, d.h, d.w, d.c] {
        let dim = u32::try_from(dim).map_err(|_| VideoError::InvalidDims(format!("dimension {dim} exceeds u32")))?;
        out.write_all(&dim.to_le_bytes())?;
    }
    let mut payload = Vec::with_capacity(video.data.len() * 4);
    for v in &video.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&payload)?;
    Ok(())
}

pub fn decode_vtns(input: &mut impl Read) -> Result<VideoTensor, VideoError> {
    let mut header = [0u8; VTNS_HEADER_LEN];
    input.read_exact(&mut header).map_err(|_| VideoError::MalformedHeader("file shorter than header".into()))?;
    if &header[0..4] != VTNS_MAGIC {
        return Err(VideoError::MalformedHeader("bad magic".into()));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != VTNS_VERSION {
        return Err(VideoError::MalformedHeader(format!("unsupported version {version}")));
    }
    let dim = |i: usize| {
        let o = 6 + 4 * i;
        u32::from_le_bytes([header[o], header[o + 1], header[o + 2], header[o + 3]]) as usize
    };
    let dims = Dims::new(dim(0), dim(1), dim(2), dim(3));
    dims.validate().map_err(|e| VideoError::MalformedHeader(e.to_string()))?;

    let mut payload = Vec::new();
    input.read_to_end(&mut payload)?;
    if payload.len() % 4 != 0 || payload.len() / 4 != dims.len() {
        return Err(VideoError::ShapeMismatch { expected: dims.len(), found: payload.len() / 4 });
    }
    let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    VideoTensor::new(dims, data)
}
