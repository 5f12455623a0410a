//! In-memory datasets, the CRTD file format, and synthetic generators.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numeric::matrix::Matrix;
use crate::numeric::rng::{normal_matrix, RngStream};
use crate::rate::SubspaceBasisSet;

pub const CRTD_MAGIC: &[u8; 4] = b"CRTD";
pub const CRTD_VERSION: u32 = 1;

/// `sample_count` inputs of shape `D×N`, with optional class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    patch_dim: usize,
    num_patches: usize,
    samples: Vec<Matrix<f64>>,
    labels: Option<Vec<u32>>,
}

impl Dataset {
    pub fn new(samples: Vec<Matrix<f64>>, labels: Option<Vec<u32>>) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::InvalidArgument("dataset has no samples".into()));
        };
        let (patch_dim, num_patches) = first.shape();
        if let Some(i) = samples.iter().position(|s| s.shape() != (patch_dim, num_patches)) {
            return shape_err(format!(
                "sample {i} is {:?}, sample 0 is {:?}",
                samples[i].shape(),
                (patch_dim, num_patches)
            ));
        }
        if let Some(l) = &labels {
            if l.len() != samples.len() {
                return shape_err(format!("{} labels for {} samples", l.len(), samples.len()));
            }
        }
        Ok(Self {
            patch_dim,
            num_patches,
            samples,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_dim
    }

    pub fn num_patches(&self) -> usize {
        self.num_patches
    }

    pub fn samples(&self) -> &[Matrix<f64>] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &Matrix<f64> {
        &self.samples[i]
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    /// First `n` samples (all of them if `n` is larger).
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len()).max(1);
        Self {
            patch_dim: self.patch_dim,
            num_patches: self.num_patches,
            samples: self.samples[..n].to_vec(),
            labels: self.labels.as_ref().map(|l| l[..n].to_vec()),
        }
    }

    pub fn write_crtd(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.encode(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_crtd(path: &Path) -> Result<Self> {
        Self::decode(&mut BufReader::new(File::open(path)?))
    }

    pub fn encode<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = [
            CRTD_VERSION,
            to_u32(self.len(), "sample count")?,
            to_u32(self.patch_dim, "D")?,
            to_u32(self.num_patches, "N")?,
            u32::from(self.labels.is_some()),
        ];
        w.write_all(CRTD_MAGIC)?;
        for h in header {
            w.write_all(&h.to_le_bytes())?;
        }
        for s in &self.samples {
            for &v in s.as_slice() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        if let Some(labels) = &self.labels {
            for l in labels {
                w.write_all(&l.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn decode<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != CRTD_MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected CRTD")));
        }
        let version = read_u32(r)?;
        if version != CRTD_VERSION {
            return Err(Error::Format(format!("unsupported CRTD version {version}")));
        }
        let count = read_u32(r)? as usize;
        let d = read_u32(r)? as usize;
        let n = read_u32(r)? as usize;
        let label_kind = read_u32(r)?;
        if label_kind > 1 {
            return Err(Error::Format(format!("unknown label kind {label_kind}")));
        }
        if count == 0 || d == 0 || n == 0 {
            return Err(Error::Format(format!("empty dataset ({count} samples of {d}×{n})")));
        }
        let mut buf = vec![0u8; d * n * 4];
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut buf).map_err(truncated)?;
            let data = buf
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            samples.push(Matrix::from_vec(d, n, data)?);
        }
        let labels = if label_kind == 1 {
            Some((0..count).map(|_| read_u32(r)).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after CRTD payload".into()));
        }
        Self::new(samples, labels)
    }
}

fn to_u32(x: usize, what: &str) -> Result<u32> {
    u32::try_from(x).map_err(|_| Error::Format(format!("{what} {x} does not fit in u32")))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("file ends before the declared payload".into())
    } else {
        Error::Io(e)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

/// Parameters for the synthetic union-of-subspaces generators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub samples: usize,
    /// Number of subspaces; also the number of classes for classification.
    pub subspaces: usize,
    pub subspace_dim: usize,
    pub patch_dim: usize,
    pub num_patches: usize,
    pub noise: f64,
    /// Per-token spread around the shared coefficient vector (MAE data only).
    pub token_spread: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.subspaces == 0 || self.num_patches == 0 {
            return Err(Error::InvalidArgument("synthetic data needs positive sizes".into()));
        }
        if self.subspace_dim == 0 || self.subspace_dim > self.patch_dim {
            return Err(Error::InvalidArgument(format!(
                "subspace_dim {} must lie in 1..={}",
                self.subspace_dim, self.patch_dim
            )));
        }
        if !(self.noise >= 0.0) || !(self.token_spread >= 0.0) {
            return Err(Error::InvalidArgument("noise levels must be nonnegative".into()));
        }
        Ok(())
    }

    fn root(&self) -> RngStream {
        RngStream::new(self.seed, 0x6461_7461)
    }

    pub fn bases(&self) -> Result<SubspaceBasisSet<f64>> {
        SubspaceBasisSet::random(
            self.patch_dim,
            self.subspace_dim,
            self.subspaces,
            &mut self.root().substream(u64::MAX).generator(),
        )
    }
}

/// Labelled samples whose tokens all lie near the subspace of their class:
/// `x_j = U_c a_j + noise·ξ_j` with `a_j ~ N(0, I)`. Labels cycle through
/// the classes.
pub fn gmm_classification(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let bases = cfg.bases()?;
    let root = cfg.root();
    let (mut samples, mut labels) = (Vec::with_capacity(cfg.samples), Vec::with_capacity(cfg.samples));
    for i in 0..cfg.samples {
        let class = i % cfg.subspaces;
        let mut rng = root.substream(i as u64).generator();
        let coeff = normal_matrix(cfg.subspace_dim, cfg.num_patches, 1.0, &mut rng);
        let mut x = bases.basis(class).matmul(&coeff)?;
        x.axpy(cfg.noise, &normal_matrix(cfg.patch_dim, cfg.num_patches, 1.0, &mut rng))?;
        samples.push(x);
        labels.push(class as u32);
    }
    Dataset::new(samples, Some(labels))
}

/// Unlabelled samples for masked autoencoding. Each sample picks one
/// subspace and one coefficient vector `a`; token `j` is
/// `U_s(a + spread·ξ_j) + noise·ζ_j`, so masked tokens are predictable from
/// the visible ones.
pub fn mae_tokens(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let bases = cfg.bases()?;
    let root = cfg.root();
    let mut samples = Vec::with_capacity(cfg.samples);
    for i in 0..cfg.samples {
        let mut rng = root.substream(i as u64).generator();
        let s = rng.random_range(0..cfg.subspaces);
        let shared = normal_matrix(cfg.subspace_dim, 1, 1.0, &mut rng);
        let mut coeff = normal_matrix(cfg.subspace_dim, cfg.num_patches, cfg.token_spread, &mut rng);
        for j in 0..cfg.num_patches {
            for r in 0..cfg.subspace_dim {
                coeff[(r, j)] += shared[(r, 0)];
            }
        }
        let mut x = bases.basis(s).matmul(&coeff)?;
        x.axpy(cfg.noise, &normal_matrix(cfg.patch_dim, cfg.num_patches, 1.0, &mut rng))?;
        samples.push(x);
    }
    Dataset::new(samples, None)
}
