//! Datasets: CIFAR-100 binary files, AXT1 sample/label pairs and a seeded
//! Gaussian-blob generator.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::tensor::{read_axt, Tensor};

pub const CIFAR_RECORD_BYTES: usize = 3074;
pub const CIFAR_CLASSES: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn sample_shape(&self) -> Option<&[usize]> {
        self.inputs.first().map(|t| t.shape())
    }

    /// First `n` samples and the rest.
    pub fn split(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let part = |r: std::ops::Range<usize>| Dataset {
            inputs: self.inputs[r.clone()].to_vec(),
            labels: self.labels[r].to_vec(),
            classes: self.classes,
        };
        (part(0..n), part(n..self.len()))
    }

    pub fn take(&self, n: usize) -> Dataset {
        self.split(n).0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    Cifar100,
    AxtPair,
    Synthetic,
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "cifar100" | "cifar-100" => DatasetFormat::Cifar100,
            "axt" | "axt_pair" | "axt1" => DatasetFormat::AxtPair,
            "synthetic" => DatasetFormat::Synthetic,
            other => bail!(Param, "unknown dataset format {other:?}"),
        })
    }
}

/// Decode CIFAR-100 records (coarse label, fine label, 3072 channel-planar
/// pixels); fine labels are used and pixels scaled to `[0, 1]`.
pub fn decode_cifar100(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        bail!(
            Format,
            "CIFAR-100 data is {} bytes, not a multiple of the {CIFAR_RECORD_BYTES}-byte record",
            bytes.len()
        );
    }
    let mut inputs = Vec::with_capacity(bytes.len() / CIFAR_RECORD_BYTES);
    let mut labels = Vec::with_capacity(inputs.capacity());
    for rec in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
        let fine = rec[1] as usize;
        if fine >= CIFAR_CLASSES {
            bail!(Format, "CIFAR-100 fine label {fine} out of range");
        }
        labels.push(fine);
        let px = rec[2..].iter().map(|&b| b as f32 / 255.0).collect();
        inputs.push(Tensor::new(vec![3, 32, 32], px)?);
    }
    Ok(Dataset {
        inputs,
        labels,
        classes: CIFAR_CLASSES,
    })
}

pub fn load_cifar100(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cifar100(&bytes)
}

/// Pair a `[N, ...]` sample tensor with an `[N]` tensor of integer labels.
pub fn from_axt_pair(samples: &Tensor, labels: &Tensor) -> Result<Dataset> {
    if samples.rank() < 2 || labels.rank() != 1 {
        bail!(Format, "expected [N, ...] samples and [N] labels, got {:?} and {:?}", samples.shape(), labels.shape());
    }
    let n = samples.shape()[0];
    if labels.len() != n {
        bail!(Format, "{n} samples but {} labels", labels.len());
    }
    let shape = samples.shape()[1..].to_vec();
    let per: usize = shape.iter().product();
    let mut ys = Vec::with_capacity(n);
    for &v in labels.data() {
        if !(v >= 0.0 && v.fract() == 0.0 && v.is_finite()) {
            bail!(Format, "label {v} is not a non-negative integer");
        }
        ys.push(v as usize);
    }
    let inputs = samples
        .data()
        .chunks_exact(per.max(1))
        .map(|c| Tensor::new(shape.clone(), c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let classes = ys.iter().max().map_or(0, |m| m + 1);
    Ok(Dataset {
        inputs,
        labels: ys,
        classes,
    })
}

/// `samples.axt` and `labels.axt` inside `dir`.
pub fn load_axt_pair(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    from_axt_pair(&read_axt(dir.join("samples.axt"))?, &read_axt(dir.join("labels.axt"))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub samples: usize,
    pub shape: Vec<usize>,
    /// Per-pixel noise standard deviation around the class prototype.
    pub noise: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            samples: 1000,
            shape: vec![3, 16, 16],
            noise: 1.0,
            seed: 0,
        }
    }
}

/// Seeded Gaussian blobs: one standard-normal prototype per class, samples
/// drawn as prototype plus isotropic noise, labels cycling through classes.
pub fn synthetic_blobs(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.shape.is_empty() || spec.shape.contains(&0) {
        bail!(Param, "synthetic data needs classes and a non-empty shape");
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        bail!(Param, "noise must be non-negative");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0f32, 1.0).expect("valid normal");
    let n: usize = spec.shape.iter().product();
    let protos: Vec<Vec<f32>> = (0..spec.classes).map(|_| (0..n).map(|_| unit.sample(&mut rng)).collect()).collect();
    let mut inputs = Vec::with_capacity(spec.samples);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let y = i % spec.classes;
        let x = protos[y].iter().map(|&p| p + spec.noise * unit.sample(&mut rng)).collect();
        inputs.push(Tensor::new(spec.shape.clone(), x)?);
        labels.push(y);
    }
    Ok(Dataset {
        inputs,
        labels,
        classes: spec.classes,
    })
}

/// Resolve `path` against `$AXMOE_DATA_DIR` when it is relative and missing.
pub fn resolve_data_path(path: &Path) -> PathBuf {
    if path.is_relative() && !path.exists() {
        if let Some(root) = std::env::var_os("AXMOE_DATA_DIR") {
            return Path::new(&root).join(path);
        }
    }
    path.to_path_buf()
}

pub fn load_dataset(path: impl AsRef<Path>, format: DatasetFormat) -> Result<Dataset> {
    let path = resolve_data_path(path.as_ref());
    match format {
        DatasetFormat::Cifar100 => {
            let file = if path.is_dir() { path.join("test.bin") } else { path };
            load_cifar100(file)
        }
        DatasetFormat::AxtPair => load_axt_pair(path),
        DatasetFormat::Synthetic => bail!(Param, "synthetic data is generated, not loaded"),
    }
}
