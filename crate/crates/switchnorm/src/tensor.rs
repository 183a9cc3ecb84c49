//! Dense rank-4 tensor in `(N, C, H, W)` layout plus seeded random
//! generation and the `SNT1` file format.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, SnError};

/// Deterministic random source.
///
/// Backed by ChaCha8 keyed from a 64-bit seed: the same seed produces
/// the same value stream on every platform. Gaussian samples come from
/// the ziggurat transform of that stream, so they are reproducible too.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Standard normal sample.
    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        use rand::seq::SliceRandom;
        slice.shuffle(&mut self.inner);
    }
}

/// Dense 4D tensor of `f64` in row-major `(N, C, H, W)` order.
///
/// Element `(n, c, i, j)` lives at flat offset `((n*C + c)*H + i)*W + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

fn check_dims(n: usize, c: usize, h: usize, w: usize) -> Result<()> {
    if n == 0 || c == 0 || h == 0 || w == 0 {
        return Err(SnError::Shape(format!(
            "all dimensions must be >= 1, got ({n},{c},{h},{w})"
        )));
    }
    Ok(())
}

impl Tensor4 {
    /// Tensor of the requested shape with every element equal to `fill`.
    pub fn new(n: usize, c: usize, h: usize, w: usize, fill: f64) -> Result<Self> {
        check_dims(n, c, h, w)?;
        Ok(Self {
            n,
            c,
            h,
            w,
            data: vec![fill; n * c * h * w],
        })
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        Self::new(n, c, h, w, 0.0)
    }

    /// Build from an existing flat buffer; `data.len()` must equal `n*c*h*w`.
    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(n, c, h, w)?;
        if data.len() != n * c * h * w {
            return Err(SnError::Shape(format!(
                "data length {} does not match shape ({n},{c},{h},{w})",
                data.len()
            )));
        }
        Ok(Self { n, c, h, w, data })
    }

    /// Gaussian tensor with the given mean and standard deviation,
    /// deterministic per `rng` seed.
    pub fn randn(
        rng: &mut Rng,
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        mean: f64,
        std: f64,
    ) -> Result<Self> {
        if std.is_nan() || std < 0.0 {
            return Err(SnError::Parameter(format!("std must be >= 0, got {std}")));
        }
        check_dims(n, c, h, w)?;
        let data = (0..n * c * h * w)
            .map(|_| mean + std * rng.normal())
            .collect();
        Ok(Self { n, c, h, w, data })
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn c(&self) -> usize {
        self.c
    }
    pub fn h(&self) -> usize {
        self.h
    }
    pub fn w(&self) -> usize {
        self.w
    }

    /// Number of elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Flat offset of `(n, c, i, j)`.
    #[inline]
    pub fn offset(&self, n: usize, c: usize, i: usize, j: usize) -> usize {
        ((n * self.c + c) * self.h + i) * self.w + j
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, i: usize, j: usize) -> f64 {
        self.data[self.offset(n, c, i, j)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, i: usize, j: usize, v: f64) {
        let o = self.offset(n, c, i, j);
        self.data[o] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Same-shape check against another tensor.
    pub fn same_shape(&self, other: &Tensor4) -> bool {
        self.shape() == other.shape()
    }

    /// Maximum absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor4) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(SnError::Shape(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    // ── SNT1 container ─────────────────────────────────────────────

    /// Encode as `SNT1`: magic, four u32 LE dims, dtype byte `0x08`
    /// (f64), then little-endian row-major payload.
    pub fn to_snt_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(21 + self.data.len() * 8);
        out.extend_from_slice(b"SNT1");
        for dim in [self.n, self.c, self.h, self.w] {
            let d = u32::try_from(dim)
                .map_err(|_| SnError::Format(format!("dimension {dim} exceeds u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.push(0x08);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    /// Decode an `SNT1` byte stream. Rejects bad magic, unknown dtype,
    /// zero dims, and payload-length mismatches.
    pub fn from_snt_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 21 {
            return Err(SnError::Format("SNT1 header truncated".into()));
        }
        if &bytes[0..4] != b"SNT1" {
            return Err(SnError::Format("bad SNT1 magic".into()));
        }
        let mut dims = [0usize; 4];
        for (k, dim) in dims.iter_mut().enumerate() {
            let off = 4 + 4 * k;
            let raw: [u8; 4] = bytes[off..off + 4].try_into().unwrap();
            *dim = u32::from_le_bytes(raw) as usize;
        }
        if bytes[20] != 0x08 {
            return Err(SnError::Format(format!(
                "unsupported dtype code 0x{:02x}",
                bytes[20]
            )));
        }
        let [n, c, h, w] = dims;
        check_dims(n, c, h, w)?;
        let count = n * c * h * w;
        let payload = &bytes[21..];
        if payload.len() != count * 8 {
            return Err(SnError::Format(format!(
                "payload length {} does not match {count} f64 elements",
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(8)
            .map(|ch| f64::from_le_bytes(ch.try_into().unwrap()))
            .collect();
        Ok(Self { n, c, h, w, data })
    }

    pub fn write_snt(&self, path: &Path) -> Result<()> {
        let bytes = self.to_snt_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_snt(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_snt_bytes(&bytes)
    }
}
