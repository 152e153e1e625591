//! Frame and tensor I/O.
//!
//! Frames are 8-bit binary PGM (`P5`, maxval 255). Tensors use a small
//! little-endian container: magic `IFNT`, `u32` rank, `rank` x `u32` dims,
//! then `product(dims)` x `f32` values in row-major order.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::scalar::Scalar;

/// Smallest frame side accepted by the motion pipeline (flow, pyramid, synth).
pub const MIN_FRAME_DIM: usize = 8;

const TENSOR_MAGIC: &[u8; 4] = b"IFNT";

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("malformed PGM header: {0}")]
    MalformedHeader(String),
    #[error("unsupported PGM maxval {0} (only 255 is accepted)")]
    UnsupportedMaxval(u32),
    #[error("truncated PGM payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("tensor magic mismatch (expected \"IFNT\")")]
    BadMagic,
    #[error("tensor rank {0} outside [1, 4]")]
    BadRank(usize),
    #[error("tensor payload length mismatch: header implies {expected} values, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ImagingError + '_ {
    move |source| {
        if source.kind() == io::ErrorKind::NotFound {
            ImagingError::MissingFile(path.to_path_buf())
        } else {
            ImagingError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

/// Unconstrained row-major 2-D field (band-pass levels, flow components,
/// intermediate results).
#[derive(Debug, Clone, PartialEq)]
pub struct Plane<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Plane<T> {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, T::zero())
    }

    pub fn filled(height: usize, width: usize, v: T) -> Self {
        Self {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    #[inline(always)]
    pub fn at(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline(always)]
    pub fn at_mut(&mut self, y: usize, x: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.dims(), other.dims(), "plane dims mismatch");
        Self {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Plane<U> {
        Plane {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Bilinear sample with clamp-to-edge addressing.
    pub fn sample_bilinear(&self, y: T, x: T) -> T {
        let maxy = T::lit((self.height - 1) as f64);
        let maxx = T::lit((self.width - 1) as f64);
        let y = y.max(T::zero()).min(maxy);
        let x = x.max(T::zero()).min(maxx);
        let y0 = y.floor();
        let x0 = x.floor();
        let fy = y - y0;
        let fx = x - x0;
        let y0 = y0.to_usize().unwrap_or(0);
        let x0 = x0.to_usize().unwrap_or(0);
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let one = T::one();
        let top = self.at(y0, x0) * (one - fx) + self.at(y0, x1) * fx;
        let bot = self.at(y1, x0) * (one - fx) + self.at(y1, x1) * fx;
        top * (one - fy) + bot * fy
    }

    pub fn mean_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.dims(), other.dims());
        let n = T::lit(self.data.len() as f64);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .sum::<T>()
            / n
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.dims(), other.dims());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }
}

/// Single-channel intensity frame with every value finite and in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    plane: Plane<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self, ImagingError> {
        Self::from_plane(Plane { height, width, data })
    }

    pub fn from_plane(plane: Plane<T>) -> Result<Self, ImagingError> {
        if plane.height == 0 || plane.width == 0 {
            return Err(ImagingError::InvalidImage("empty image".into()));
        }
        if plane.data.len() != plane.height * plane.width {
            return Err(ImagingError::InvalidImage(format!(
                "data length {} != {}x{}",
                plane.data.len(),
                plane.height,
                plane.width
            )));
        }
        if let Some(i) = plane
            .data
            .iter()
            .position(|v| !v.is_finite() || *v < T::zero() || *v > T::one())
        {
            return Err(ImagingError::InvalidImage(format!(
                "value {} at index {i} outside [0, 1]",
                plane.data[i]
            )));
        }
        Ok(Self { plane })
    }

    /// Clamps every value into `[0, 1]`; non-finite values become 0.
    pub fn from_plane_clamped(mut plane: Plane<T>) -> Self {
        for v in &mut plane.data {
            *v = if v.is_finite() {
                v.max(T::zero()).min(T::one())
            } else {
                T::zero()
            };
        }
        Self { plane }
    }

    pub fn filled(height: usize, width: usize, v: T) -> Self {
        Self::from_plane_clamped(Plane::filled(height, width, v))
    }

    pub fn height(&self) -> usize {
        self.plane.height
    }

    pub fn width(&self) -> usize {
        self.plane.width
    }

    pub fn dims(&self) -> (usize, usize) {
        self.plane.dims()
    }

    pub fn data(&self) -> &[T] {
        &self.plane.data
    }

    pub fn plane(&self) -> &Plane<T> {
        &self.plane
    }

    pub fn into_plane(self) -> Plane<T> {
        self.plane
    }

    pub fn at(&self, y: usize, x: usize) -> T {
        self.plane.at(y, x)
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            plane: self.plane.cast(),
        }
    }

    /// Checks the minimum frame size required by the motion pipeline.
    pub fn check_frame_dims(&self) -> Result<(), ImagingError> {
        if self.height() < MIN_FRAME_DIM || self.width() < MIN_FRAME_DIM {
            return Err(ImagingError::InvalidImage(format!(
                "frame {}x{} smaller than {MIN_FRAME_DIM}x{MIN_FRAME_DIM}",
                self.height(),
                self.width()
            )));
        }
        Ok(())
    }

    /// 8-bit quantisation, `round(v * 255)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.plane
            .data
            .iter()
            .map(|v| (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self, ImagingError> {
        if bytes.len() != height * width {
            return Err(ImagingError::TruncatedPayload {
                expected: height * width,
                found: bytes.len(),
            });
        }
        let data = bytes.iter().map(|&b| T::lit(b as f64 / 255.0)).collect();
        Self::new(height, width, data)
    }
}

/// Parses a binary PGM byte stream.
pub fn decode_pgm<T: Scalar>(bytes: &[u8]) -> Result<Image<T>, ImagingError> {
    let mut pos = 0usize;
    let mut token = |what: &str| -> Result<String, ImagingError> {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(ImagingError::MalformedHeader(format!("missing {what}")));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    let magic = token("magic")?;
    if magic != "P5" {
        return Err(ImagingError::MalformedHeader(format!(
            "magic {magic:?} is not P5"
        )));
    }
    let parse = |s: String, what: &str| -> Result<u32, ImagingError> {
        s.parse::<u32>()
            .map_err(|_| ImagingError::MalformedHeader(format!("bad {what} {s:?}")))
    };
    let width = parse(token("width")?, "width")? as usize;
    let height = parse(token("height")?, "height")? as usize;
    let maxval = parse(token("maxval")?, "maxval")?;
    if width == 0 || height == 0 {
        return Err(ImagingError::MalformedHeader("zero dimension".into()));
    }
    if maxval != 255 {
        return Err(ImagingError::UnsupportedMaxval(maxval));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(ImagingError::MalformedHeader(
            "missing separator after maxval".into(),
        ));
    }
    pos += 1;
    let payload = &bytes[pos..];
    let expected = width * height;
    if payload.len() < expected {
        return Err(ImagingError::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    Image::from_bytes(height, width, &payload[..expected])
}

pub fn encode_pgm<T: Scalar>(img: &Image<T>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.to_bytes());
    out
}

pub fn load_frame<T: Scalar>(path: impl AsRef<Path>) -> Result<Image<T>, ImagingError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_pgm(&bytes)
}

pub fn store_frame<T: Scalar>(img: &Image<T>, path: impl AsRef<Path>) -> Result<(), ImagingError> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(img)).map_err(io_err(path))
}

/// Rank 1-4 `f32` tensor as persisted on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorFile {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self, ImagingError> {
        let t = Self { dims, data };
        t.validate()?;
        Ok(t)
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn validate(&self) -> Result<(), ImagingError> {
        if !(1..=4).contains(&self.dims.len()) {
            return Err(ImagingError::BadRank(self.dims.len()));
        }
        let expected: usize = self.dims.iter().product();
        if expected != self.data.len() {
            return Err(ImagingError::LengthMismatch {
                expected,
                found: self.data.len(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ImagingError> {
        self.validate()?;
        let mut out = Vec::with_capacity(8 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ImagingError> {
        if bytes.len() < 8 || &bytes[..4] != TENSOR_MAGIC {
            return Err(ImagingError::BadMagic);
        }
        let read_u32 = |at: usize| -> Option<u32> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        };
        let rank = read_u32(4).unwrap_or(0) as usize;
        if !(1..=4).contains(&rank) {
            return Err(ImagingError::BadRank(rank));
        }
        let mut dims = Vec::with_capacity(rank);
        for i in 0..rank {
            let d = read_u32(8 + 4 * i).ok_or(ImagingError::LengthMismatch {
                expected: rank,
                found: i,
            })?;
            dims.push(d as usize);
        }
        let header = 8 + 4 * rank;
        let expected: usize = dims.iter().product();
        let payload = &bytes[header..];
        if payload.len() != expected * 4 {
            return Err(ImagingError::LengthMismatch {
                expected,
                found: payload.len() / 4,
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { dims, data })
    }
}

pub fn store_tensor(t: &TensorFile, path: impl AsRef<Path>) -> Result<(), ImagingError> {
    let path = path.as_ref();
    let bytes = t.to_bytes()?;
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&bytes).map_err(io_err(path))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<TensorFile, ImagingError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    TensorFile::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pgm(w: usize, h: usize, payload: &[u8]) -> Vec<u8> {
        let mut b = format!("P5\n{w} {h}\n255\n").into_bytes();
        b.extend_from_slice(payload);
        b
    }

    #[test]
    fn decodes_bytes_over_255() {
        let img: Image<f64> = decode_pgm(&pgm(2, 2, &[0, 255, 128, 64])).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn zero_payload_is_zero_image() {
        let img: Image<f64> = decode_pgm(&pgm(8, 8, &[0; 64])).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_payload_is_truncated() {
        let err = decode_pgm::<f64>(&pgm(4, 4, &[7; 8])).unwrap_err();
        assert!(matches!(
            err,
            ImagingError::TruncatedPayload {
                expected: 16,
                found: 8
            }
        ));
    }

    #[test]
    fn header_errors_are_distinct() {
        assert!(matches!(
            decode_pgm::<f64>(b"P2\n2 2\n255\n0000"),
            Err(ImagingError::MalformedHeader(_))
        ));
        assert!(matches!(
            decode_pgm::<f64>(b"P5\n2 x\n255\n0000"),
            Err(ImagingError::MalformedHeader(_))
        ));
        assert!(matches!(
            decode_pgm::<f64>(b"P5\n2 2\n65535\n0000"),
            Err(ImagingError::UnsupportedMaxval(65535))
        ));
        assert!(matches!(
            load_frame::<f64>("/nonexistent/frame.pgm"),
            Err(ImagingError::MissingFile(_))
        ));
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P5\n# made by hand\n1 1\n255\n\x80";
        let img: Image<f32> = decode_pgm(bytes).unwrap();
        assert_eq!(img.data(), &[128.0 / 255.0]);
    }

    #[test]
    fn image_rejects_out_of_range() {
        assert!(Image::<f64>::new(1, 2, vec![0.5, 1.5]).is_err());
        assert!(Image::<f64>::new(1, 2, vec![0.5, f64::NAN]).is_err());
        assert!(Image::<f64>::new(2, 2, vec![0.5]).is_err());
    }

    #[test]
    fn small_frames_fail_pipeline_check() {
        let img = Image::<f64>::filled(4, 9, 0.5);
        assert!(img.check_frame_dims().is_err());
        assert!(Image::<f64>::filled(8, 8, 0.5).check_frame_dims().is_ok());
    }

    #[test]
    fn rank1_tensor_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ifnt");
        let t = TensorFile::new(vec![1], vec![1.5]).unwrap();
        store_tensor(&t, &p).unwrap();
        assert_eq!(load_tensor(&p).unwrap(), t);
    }

    #[test]
    fn rank3_tensor_round_trip_and_layout() {
        let t = TensorFile::new(vec![3, 4, 4], (0..48).map(|i| i as f32).collect()).unwrap();
        let bytes = t.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"IFNT");
        assert_eq!(&bytes[4..8], &3u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(bytes.len(), 4 + 4 + 12 + 48 * 4);
        assert_eq!(TensorFile::from_bytes(&bytes).unwrap(), t);
    }

    #[test]
    fn tensor_load_errors() {
        let t = TensorFile::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = t.to_bytes().unwrap();
        let short = &bytes[..bytes.len() - 4];
        assert!(matches!(
            TensorFile::from_bytes(short),
            Err(ImagingError::LengthMismatch {
                expected: 4,
                found: 3
            })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            TensorFile::from_bytes(&bad),
            Err(ImagingError::BadMagic)
        ));
        assert!(TensorFile::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(TensorFile::new(vec![1, 1, 1, 1, 1], vec![0.0]).is_err());
        assert!(matches!(
            store_tensor(&t, "/nonexistent-dir/x.ifnt"),
            Err(ImagingError::MissingFile(_)) | Err(ImagingError::Io { .. })
        ));
    }

    proptest! {
        #[test]
        fn tensor_round_trip_is_bit_exact(bits in proptest::collection::vec(any::<u32>(), 1..64)) {
            let data: Vec<f32> = bits
                .iter()
                .map(|&b| f32::from_bits(b))
                .map(|v| if v.is_finite() { v } else { -0.0 })
                .collect();
            let t = TensorFile::new(vec![data.len()], data).unwrap();
            let back = TensorFile::from_bytes(&t.to_bytes().unwrap()).unwrap();
            let a: Vec<u32> = t.data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(back.dims, t.dims);
        }

        #[test]
        fn pgm_round_trip_is_quantisation_exact(bytes in proptest::collection::vec(any::<u8>(), 64)) {
            let img: Image<f64> = Image::from_bytes(8, 8, &bytes).unwrap();
            let back: Image<f64> = decode_pgm(&encode_pgm(&img)).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            prop_assert_eq!(back, img);
        }
    }
}
