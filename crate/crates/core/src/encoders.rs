//! Frozen visual encoders and the `JVEM` embedding file.
//!
//! Encoders hold plain tensors rather than graph parameters, so no
//! gradient can ever reach them.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::rng::{rng_for, Stream};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"JVEM";
pub const EMBEDDING_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 4 + 4;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("bad magic {0:?}, expected \"JVEM\"")]
    BadMagic([u8; 4]),
    #[error("unsupported embedding file version {0}")]
    VersionMismatch(u16),
    #[error("payload holds {got} bytes, header implies {expected}")]
    Truncated { expected: usize, got: usize },
    #[error("embedding dim must be positive")]
    ZeroDim,
    #[error("image has {got} patches, encoder expects {expected}")]
    PatchCountMismatch { expected: usize, got: usize },
    #[error("patch vectors have {got} values, encoder expects {expected}")]
    PatchWidthMismatch { expected: usize, got: usize },
    #[error("image index {index} outside file of {count}")]
    ImageOutOfRange { index: usize, count: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Precomputed per-patch embeddings, `count × n_patches × dim` little-endian f32.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub version: u16,
    pub count: u32,
    pub n_patches: u32,
    pub dim: u32,
    pub payload: Vec<f32>,
}

impl EmbeddingFile {
    pub fn new(count: u32, n_patches: u32, dim: u32, payload: Vec<f32>) -> Result<Self, EncoderError> {
        if dim == 0 {
            return Err(EncoderError::ZeroDim);
        }
        let expected = count as usize * n_patches as usize * dim as usize;
        if payload.len() != expected {
            return Err(EncoderError::Truncated {
                expected: expected * 4,
                got: payload.len() * 4,
            });
        }
        Ok(Self {
            version: EMBEDDING_VERSION,
            count,
            n_patches,
            dim,
            payload,
        })
    }

    /// Stacks per-image `[n_patches × dim]` tensors, narrowing to f32.
    pub fn from_images(images: &[Tensor]) -> Result<Self, EncoderError> {
        let (n, d) = images.first().map_or((0, 1), |t| (t.rows(), t.cols()));
        let mut payload = Vec::with_capacity(images.len() * n * d);
        for t in images {
            if t.rows() != n {
                return Err(EncoderError::PatchCountMismatch {
                    expected: n,
                    got: t.rows(),
                });
            }
            payload.extend(t.data().iter().map(|&v| v as f32));
        }
        Self::new(images.len() as u32, n as u32, d as u32, payload)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len() * 4);
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.count.to_le_bytes());
        out.extend_from_slice(&self.n_patches.to_le_bytes());
        out.extend_from_slice(&self.dim.to_le_bytes());
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EncoderError> {
        if bytes.len() < HEADER_LEN {
            let mut magic = [0u8; 4];
            let n = bytes.len().min(4);
            magic[..n].copy_from_slice(&bytes[..n]);
            if &magic != EMBEDDING_MAGIC {
                return Err(EncoderError::BadMagic(magic));
            }
            return Err(EncoderError::Truncated {
                expected: HEADER_LEN,
                got: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
        if &magic != EMBEDDING_MAGIC {
            return Err(EncoderError::BadMagic(magic));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != EMBEDDING_VERSION {
            return Err(EncoderError::VersionMismatch(version));
        }
        let (count, n_patches, dim) = (u32_at(6), u32_at(10), u32_at(14));
        if dim == 0 {
            return Err(EncoderError::ZeroDim);
        }
        let expected = count as usize * n_patches as usize * dim as usize * 4;
        let body = &bytes[HEADER_LEN..];
        if body.len() != expected {
            return Err(EncoderError::Truncated {
                expected,
                got: body.len(),
            });
        }
        let payload = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self {
            version,
            count,
            n_patches,
            dim,
            payload,
        })
    }

    /// Embeddings of one image as `[n_patches × dim]`.
    pub fn image(&self, index: usize) -> Result<Tensor, EncoderError> {
        if index >= self.count as usize {
            return Err(EncoderError::ImageOutOfRange {
                index,
                count: self.count as usize,
            });
        }
        let stride = self.n_patches as usize * self.dim as usize;
        let data = self.payload[index * stride..(index + 1) * stride]
            .iter()
            .map(|&v| v as f64)
            .collect();
        Ok(Tensor::new(vec![self.n_patches as usize, self.dim as usize], data).expect("stride"))
    }
}

pub fn write_embedding_file(file: &EmbeddingFile, path: &Path) -> Result<(), EncoderError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&file.to_bytes())?;
    Ok(())
}

pub fn read_embedding_file(path: &Path) -> Result<EmbeddingFile, EncoderError> {
    EmbeddingFile::from_bytes(&fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StubConfig {
    pub seed: u64,
    pub out_dim: usize,
    pub patch_pixels: usize,
    /// Apply `tanh` after the affine map.
    pub nonlinear: bool,
    pub zero_bias: bool,
}

impl Default for StubConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dim: 32,
            patch_pixels: 48,
            nonlinear: false,
            zero_bias: false,
        }
    }
}

/// Per-patch affine map with weights fixed by a seed.
#[derive(Debug, Clone, PartialEq)]
pub struct StubEncoder {
    cfg: StubConfig,
    weight: Tensor,
    bias: Vec<f64>,
}

impl StubEncoder {
    pub fn new(cfg: StubConfig) -> Self {
        let mut rng = rng_for(cfg.seed, Stream::Encoder, 0);
        let std = 1.0 / (cfg.patch_pixels.max(1) as f64).sqrt();
        let w = Normal::new(0.0, std).expect("std");
        let weight: Vec<f64> = (0..cfg.patch_pixels * cfg.out_dim).map(|_| w.sample(&mut rng)).collect();
        let b = Normal::new(0.0, 0.5).expect("std");
        let bias = (0..cfg.out_dim)
            .map(|_| if cfg.zero_bias { 0.0 } else { b.sample(&mut rng) })
            .collect();
        Self {
            weight: Tensor::new(vec![cfg.patch_pixels, cfg.out_dim], weight).expect("shape"),
            bias,
            cfg,
        }
    }

    pub fn config(&self) -> &StubConfig {
        &self.cfg
    }

    fn encode(&self, pixels: &Tensor) -> Result<Tensor, EncoderError> {
        if pixels.cols() != self.cfg.patch_pixels {
            return Err(EncoderError::PatchWidthMismatch {
                expected: self.cfg.patch_pixels,
                got: pixels.cols(),
            });
        }
        let mut out = Tensor::matmul_raw(pixels, &self.weight);
        let d = self.cfg.out_dim;
        for row in out.data_mut().chunks_mut(d) {
            for (o, b) in row.iter_mut().zip(&self.bias) {
                *o += b;
                if self.cfg.nonlinear {
                    *o = o.tanh();
                }
            }
        }
        Ok(out)
    }
}

/// A visual encoder that never trains.
#[derive(Debug, Clone, PartialEq)]
pub enum FrozenEncoder {
    Stub(StubEncoder),
    /// Serves rows of a precomputed embedding file, indexed by sample.
    File(EmbeddingFile),
}

impl FrozenEncoder {
    pub fn stub(cfg: StubConfig) -> Self {
        FrozenEncoder::Stub(StubEncoder::new(cfg))
    }

    pub fn out_dim(&self) -> usize {
        match self {
            FrozenEncoder::Stub(s) => s.cfg.out_dim,
            FrozenEncoder::File(f) => f.dim as usize,
        }
    }

    /// Encodes the full image; callers index the patches they need.
    pub fn encode(&self, sample_index: usize, pixels: &Tensor) -> Result<Tensor, EncoderError> {
        match self {
            FrozenEncoder::Stub(s) => s.encode(pixels),
            FrozenEncoder::File(f) => {
                if pixels.rows() != f.n_patches as usize {
                    return Err(EncoderError::PatchCountMismatch {
                        expected: f.n_patches as usize,
                        got: pixels.rows(),
                    });
                }
                f.image(sample_index)
            }
        }
    }

    /// Every fixed value the encoder holds, for bit-level freeze checks.
    pub fn payload(&self) -> Vec<u64> {
        match self {
            FrozenEncoder::Stub(s) => s
                .weight
                .data()
                .iter()
                .chain(&s.bias)
                .map(|v| v.to_bits())
                .collect(),
            FrozenEncoder::File(f) => f.payload.iter().map(|v| v.to_bits() as u64).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn pixels(n: usize, p: usize, seed: u64) -> Tensor {
        let mut rng = rng_for(seed, Stream::Scene, 0);
        Tensor::new(vec![n, p], (0..n * p).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn zero_image_zero_bias_gives_zero() {
        for nonlinear in [false, true] {
            let enc = FrozenEncoder::stub(StubConfig {
                zero_bias: true,
                nonlinear,
                ..StubConfig::default()
            });
            let out = enc.encode(0, &Tensor::zeros(&[4, 48])).unwrap();
            assert!(out.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn stub_is_deterministic() {
        let cfg = StubConfig { seed: 9, ..StubConfig::default() };
        let img = pixels(6, 48, 1);
        let a = FrozenEncoder::stub(cfg.clone()).encode(0, &img).unwrap();
        let b = FrozenEncoder::stub(cfg).encode(0, &img).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_decorrelate() {
        let img = pixels(64, 48, 2);
        let a = FrozenEncoder::stub(StubConfig { seed: 1, ..StubConfig::default() }).encode(0, &img).unwrap();
        let b = FrozenEncoder::stub(StubConfig {
            seed: 2,
            nonlinear: true,
            ..StubConfig::default()
        })
        .encode(0, &img)
        .unwrap();
        let (x, y) = (a.data(), b.data());
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let cov: f64 = x.iter().zip(y).map(|(p, q)| (p - mx) * (q - my)).sum();
        let vx: f64 = x.iter().map(|p| (p - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|q| (q - my).powi(2)).sum();
        let corr = cov / (vx * vy).sqrt();
        assert!(corr < 0.99, "correlation {corr}");
    }

    #[test]
    fn file_round_trip_zeros() {
        let f = EmbeddingFile::new(2, 4, 3, vec![0.0; 24]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.jvem");
        write_embedding_file(&f, &path).unwrap();
        assert_eq!(read_embedding_file(&path).unwrap(), f);
    }

    #[test]
    fn random_payload_is_bit_exact() {
        let mut rng = rng_for(4, Stream::Scene, 0);
        let payload: Vec<f32> = (0..3 * 5 * 7).map(|_| f32::from_bits(rng.random::<u32>() & 0x7f7f_ffff)).collect();
        let f = EmbeddingFile::new(3, 5, 7, payload).unwrap();
        let bytes = f.to_bytes();
        let back = EmbeddingFile::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert!(back.payload.iter().zip(&f.payload).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn header_errors() {
        let f = EmbeddingFile::new(1, 2, 2, vec![1.0; 4]).unwrap();
        let mut bytes = f.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(EmbeddingFile::from_bytes(&bytes), Err(EncoderError::BadMagic(_))));

        let mut bytes = f.to_bytes();
        bytes.truncate(bytes.len() - 1);
        assert!(matches!(EmbeddingFile::from_bytes(&bytes), Err(EncoderError::Truncated { .. })));

        let mut bytes = f.to_bytes();
        bytes[4] = 9;
        assert!(matches!(EmbeddingFile::from_bytes(&bytes), Err(EncoderError::VersionMismatch(9))));

        assert!(matches!(EmbeddingFile::new(1, 1, 0, vec![]), Err(EncoderError::ZeroDim)));
    }

    #[test]
    fn file_encoder_serves_stored_rows() {
        let stub = FrozenEncoder::stub(StubConfig::default());
        let imgs: Vec<Tensor> = (0..3).map(|s| stub.encode(0, &pixels(4, 48, s)).unwrap()).collect();
        let file = EmbeddingFile::from_images(&imgs).unwrap();
        let back = EmbeddingFile::from_bytes(&file.to_bytes()).unwrap();
        let enc = FrozenEncoder::File(back);
        for (i, img) in imgs.iter().enumerate() {
            let got = enc.encode(i, &Tensor::zeros(&[4, 48])).unwrap();
            let want = img.map(|v| v as f32 as f64);
            assert_eq!(got, want);
        }
        assert!(matches!(
            enc.encode(0, &Tensor::zeros(&[5, 48])),
            Err(EncoderError::PatchCountMismatch { expected: 4, got: 5 })
        ));
    }
}
