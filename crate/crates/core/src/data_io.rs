//! Datasets, run configuration and every on-disk format: dataset JSON,
//! IDX binaries, checkpoint JSON (v1) and the metrics / trade-off CSVs.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::diffcore::Activation;
use crate::error::{Error, Result};
use crate::gaussians::ClassSurrogate;
use crate::model::{Checkpoint, DecoderHead, EncoderModel, NoiseMode, TradeoffPoint};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CHECKPOINT_VERSION: u64 = 1;
pub const METRICS_HEADER: &str = "step,cross_entropy,kl_term,beta_prime,total,accuracy";
pub const TRADEOFF_HEADER: &str = "beta_prime,ce_test,kl_test,acc_test,ixt,ixt_given_y";

/// SplitMix64 finalizer over `seed` and a stream index.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SourceDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GmmSpec>,
    /// Analytic Bayes error of the generating mixture, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bayes_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<SourceDigest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    class_count: usize,
    #[serde(default)]
    provenance: Provenance,
}

impl Dataset {
    pub fn new(
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        class_count: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::InvalidArgument(
                "dataset needs at least one sample".into(),
            ));
        }
        if labels.len() != features.len() {
            return Err(Error::dims("dataset labels", features.len(), labels.len()));
        }
        let m = features[0].len();
        for (i, row) in features.iter().enumerate() {
            if row.len() != m {
                return Err(Error::dims(format!("feature row {i}"), m, row.len()));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("feature row {i}")));
            }
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::UnknownClass {
                label: y,
                classes: class_count,
            });
        }
        Ok(Self {
            features,
            labels,
            class_count,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.class_count];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    /// Keeps the rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            indices.iter().map(|&i| self.features[i].clone()).collect(),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.class_count,
            self.provenance.clone(),
        )
    }
}

/// Train/test pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

/// Per-dimension affine standardization fitted on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(data: &Dataset) -> Self {
        let n = data.len() as f64;
        let m = data.dim();
        let mut mean = vec![0.0; m];
        for row in data.features() {
            for (a, v) in mean.iter_mut().zip(row) {
                *a += v;
            }
        }
        mean.iter_mut().for_each(|a| *a /= n);
        let mut var = vec![0.0; m];
        for row in data.features() {
            for ((s, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - mu) * (v - mu);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        if data.dim() != self.mean.len() {
            return Err(Error::dims(
                "standardizer input",
                self.mean.len(),
                data.dim(),
            ));
        }
        let features = data
            .features()
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&self.mean)
                    .zip(&self.scale)
                    .map(|((v, mu), s)| (v - mu) / s)
                    .collect()
            })
            .collect();
        Dataset::new(
            features,
            data.labels.clone(),
            data.class_count,
            data.provenance.clone(),
        )
    }
}

/// Gaussian mixture with unit covariance and means at pairwise scale `sep`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub sep: f64,
    pub seed: u64,
}

impl GmmSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "gmm needs >= 2 classes, got {}",
                self.classes
            )));
        }
        if self.dim == 0 || self.per_class == 0 {
            return Err(Error::InvalidArgument(
                "gmm dim and per_class must be >= 1".into(),
            ));
        }
        if !(self.sep >= 0.0 && self.sep.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "gmm separation must be >= 0, got {}",
                self.sep
            )));
        }
        Ok(())
    }

    /// Class means: antipodal for two classes, a circle of radius `sep/2`
    /// for `dim = 2`, otherwise seeded random directions scaled by `sep/2`.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        let r = self.sep / 2.0;
        let k = self.classes;
        if k == 2 {
            let dir = if self.dim <= 2 {
                let mut d = vec![0.0; self.dim];
                d[0] = 1.0;
                d
            } else {
                random_direction(&mut rng_for(self.seed, STREAM_MEANS), self.dim)
            };
            return vec![
                dir.iter().map(|v| r * v).collect(),
                dir.iter().map(|v| -r * v).collect(),
            ];
        }
        if self.dim == 2 {
            return (0..k)
                .map(|c| {
                    let a = 2.0 * std::f64::consts::PI * c as f64 / k as f64;
                    vec![r * a.cos(), r * a.sin()]
                })
                .collect();
        }
        let mut rng = rng_for(self.seed, STREAM_MEANS);
        (0..k)
            .map(|_| {
                random_direction(&mut rng, self.dim)
                    .into_iter()
                    .map(|v| r * v)
                    .collect()
            })
            .collect()
    }

    /// `Φ(−sep/2)` for two classes; `None` otherwise.
    pub fn bayes_error(&self) -> Option<f64> {
        (self.classes == 2).then(|| standard_normal_cdf(-self.sep / 2.0))
    }
}

const STREAM_MEANS: u64 = 0x6d65616e;
const STREAM_TRAIN: u64 = 0x7472;
const STREAM_TEST: u64 = 0x7465;

fn random_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

pub fn standard_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn sample_gmm(spec: &GmmSpec, per_class: usize, stream: u64, split: &str) -> Result<Dataset> {
    spec.validate()?;
    let means = spec.class_means();
    let mut rng = rng_for(spec.seed, stream);
    let mut features = Vec::with_capacity(per_class * spec.classes);
    let mut labels = Vec::with_capacity(per_class * spec.classes);
    for (c, mu) in means.iter().enumerate() {
        for _ in 0..per_class {
            features.push(
                mu.iter()
                    .map(|m| m + rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            );
            labels.push(c);
        }
    }
    let provenance = Provenance {
        generator: Some(spec.clone()),
        bayes_error: spec.bayes_error(),
        sources: Vec::new(),
        split: Some(split.to_string()),
    };
    Dataset::new(features, labels, spec.classes, provenance)
}

/// Stratified draw of `per_class` samples per class.
pub fn gen_gmm(spec: &GmmSpec) -> Result<Dataset> {
    sample_gmm(spec, spec.per_class, STREAM_TRAIN, "train")
}

/// Held-out draw from the same mixture as [`gen_gmm`].
pub fn gen_gmm_test(spec: &GmmSpec, per_class: usize) -> Result<Dataset> {
    if per_class == 0 {
        return Err(Error::InvalidArgument("test per_class must be >= 1".into()));
    }
    sample_gmm(spec, per_class, STREAM_TEST, "test")
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Parsed IDX file: dimension sizes and the unsigned-byte payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8], expected_magic: u32, path: &Path) -> Result<IdxArray> {
    let mut cur = std::io::Cursor::new(bytes);
    let truncated = |expected: usize| Error::IdxTruncated {
        path: path.to_path_buf(),
        expected,
        found: bytes.len(),
    };
    let magic = cur.read_u32::<BigEndian>().map_err(|_| truncated(4))?;
    if magic != expected_magic {
        return Err(Error::IdxMagic {
            path: path.to_path_buf(),
            expected: expected_magic,
            found: magic,
        });
    }
    let ndims = (magic & 0xff) as usize;
    let header = 4 + 4 * ndims;
    let mut dims = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        dims.push(cur.read_u32::<BigEndian>().map_err(|_| truncated(header))? as usize);
    }
    let payload: usize = dims.iter().product();
    let data = &bytes[header..];
    if data.len() < payload {
        return Err(truncated(header + payload));
    }
    Ok(IdxArray {
        dims,
        data: data[..payload].to_vec(),
    })
}

pub fn encode_idx(magic: u32, dims: &[usize], data: &[u8]) -> Result<Vec<u8>> {
    if (magic & 0xff) as usize != dims.len() {
        return Err(Error::InvalidArgument(format!(
            "magic {magic:#010x} declares {} dims, got {}",
            magic & 0xff,
            dims.len()
        )));
    }
    if dims.iter().product::<usize>() != data.len() {
        return Err(Error::dims(
            "IDX payload",
            dims.iter().product(),
            data.len(),
        ));
    }
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + data.len());
    out.write_u32::<BigEndian>(magic).expect("vec write");
    for &d in dims {
        let d = u32::try_from(d)
            .map_err(|_| Error::InvalidArgument(format!("IDX dimension {d} too large")))?;
        out.write_u32::<BigEndian>(d).expect("vec write");
    }
    out.extend_from_slice(data);
    Ok(out)
}

pub fn write_idx(path: &Path, magic: u32, dims: &[usize], data: &[u8]) -> Result<()> {
    write_file(path, &encode_idx(magic, dims, data)?)
}

/// Reads an IDX image/label pair. Pixels are scaled to `[0, 1]`; the class
/// count is one more than the largest label.
pub fn read_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img_bytes = read_file(images)?;
    let lbl_bytes = read_file(labels)?;
    let img = parse_idx(&img_bytes, IDX_IMAGES_MAGIC, images)?;
    let lbl = parse_idx(&lbl_bytes, IDX_LABELS_MAGIC, labels)?;
    let n = img.dims[0];
    if n != lbl.dims[0] {
        return Err(Error::IdxCountMismatch {
            images: n,
            labels: lbl.dims[0],
        });
    }
    let width: usize = img.dims[1..].iter().product();
    let features = img
        .data
        .chunks(width.max(1))
        .take(n)
        .map(|c| c.iter().map(|&b| b as f64 / 255.0).collect())
        .collect();
    let labels_v: Vec<usize> = lbl.data.iter().map(|&b| b as usize).collect();
    let class_count = labels_v.iter().max().map_or(1, |m| m + 1);
    let provenance = Provenance {
        sources: vec![
            SourceDigest {
                path: images.display().to_string(),
                sha256: sha256_hex(&img_bytes),
            },
            SourceDigest {
                path: labels.display().to_string(),
                sha256: sha256_hex(&lbl_bytes),
            },
        ],
        ..Default::default()
    };
    Dataset::new(features, labels_v, class_count, provenance)
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn save_dataset(path: &Path, data: &Dataset) -> Result<()> {
    save_json(path, data)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let d: Dataset = load_json(path)?;
    Dataset::new(d.features, d.labels, d.class_count, d.provenance)
}

// ---------------------------------------------------------------- config

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Gmm {
        classes: usize,
        dim: usize,
        per_class: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_per_class: Option<usize>,
        sep: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Json {
        train: PathBuf,
        test: PathBuf,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    #[serde(flatten)]
    pub source: DatasetSource,
    #[serde(default)]
    pub standardize: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModeKind {
    FixedSigma,
    LearnedEta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub noise_mode: NoiseModeKind,
    /// Fixed noise variance, or the variance floor in learned mode.
    pub sigma2: f64,
}

impl EncoderConfig {
    pub fn noise(&self) -> NoiseMode {
        match self.noise_mode {
            NoiseModeKind::FixedSigma => NoiseMode::FixedSigma {
                sigma2: self.sigma2,
            },
            NoiseModeKind::LearnedEta => NoiseMode::LearnedEta {
                sigma2_floor: self.sigma2,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderVariant {
    Softmax,
    NaiveBayes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub variant: DecoderVariant,
    /// Predict from a latent sample instead of the encoder mean.
    #[serde(default)]
    pub sample_prediction: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_prime: Option<f64>,
    #[serde(default = "one")]
    pub mc_samples: usize,
}

impl LossConfig {
    /// The CIB weight, from whichever of `beta` / `beta_prime` is set.
    pub fn resolved_beta_prime(&self) -> Result<f64> {
        match (self.beta, self.beta_prime) {
            (Some(_), Some(_)) => Err(Error::InvalidArgument(
                "set only one of loss.beta and loss.beta_prime".into(),
            )),
            (None, None) => Err(Error::InvalidArgument(
                "loss.beta or loss.beta_prime is required".into(),
            )),
            (Some(b), None) => crate::objectives::beta_to_beta_prime(b),
            (None, Some(bp)) => {
                crate::objectives::beta_prime_to_beta(bp)?;
                Ok(bp)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    #[serde(default = "yes")]
    pub shuffle: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateUpdate {
    /// Gradient steps on `μ_y`, `log σ_y` together with the encoder.
    #[default]
    Joint,
    /// Closed-form moment matching before every encoder step.
    Alternating,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSource {
    #[default]
    Train,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    #[serde(default = "yes")]
    pub learn_sigma: bool,
    #[serde(default)]
    pub update: SurrogateUpdate,
    #[serde(default)]
    pub priors: PriorSource,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            learn_sigma: true,
            update: SurrogateUpdate::Joint,
            priors: PriorSource::Train,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    #[serde(default = "sixteen")]
    pub mc_samples: usize,
    #[serde(default = "hundred")]
    pub log_every: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mc_samples: 16,
            log_every: 100,
        }
    }
}

fn one() -> usize {
    1
}
fn sixteen() -> usize {
    16
}
fn hundred() -> usize {
    100
}
fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub dataset: DatasetConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub seed: u64,
    #[serde(default)]
    pub surrogate: SurrogateConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let c: Config = load_json(path)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.layer_dims.len() < 2 || e.layer_dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "encoder.layer_dims needs input and bottleneck sizes >= 1, got {:?}",
                e.layer_dims
            )));
        }
        if !(e.sigma2 > 0.0 && e.sigma2.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "encoder.sigma2 must be > 0, got {}",
                e.sigma2
            )));
        }
        self.loss.resolved_beta_prime()?;
        if self.loss.mc_samples == 0 || self.eval.mc_samples == 0 {
            return Err(Error::InvalidArgument("mc_samples must be >= 1".into()));
        }
        if !(self.optim.lr > 0.0 && self.optim.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "optim.lr must be > 0, got {}",
                self.optim.lr
            )));
        }
        if self.optim.batch == 0 {
            return Err(Error::InvalidArgument("optim.batch must be >= 1".into()));
        }
        if self.eval.log_every == 0 {
            return Err(Error::InvalidArgument("eval.log_every must be >= 1".into()));
        }
        if let DatasetSource::Gmm {
            classes,
            dim,
            per_class,
            sep,
            ..
        } = &self.dataset.source
        {
            self.gmm_spec_from(*classes, *dim, *per_class, *sep)
                .validate()?;
        }
        Ok(())
    }

    fn gmm_spec_from(&self, classes: usize, dim: usize, per_class: usize, sep: f64) -> GmmSpec {
        let seed = match &self.dataset.source {
            DatasetSource::Gmm { seed: Some(s), .. } => *s,
            _ => self.seed,
        };
        GmmSpec {
            classes,
            dim,
            per_class,
            sep,
            seed,
        }
    }

    /// The reference two-class mixture experiment.
    pub fn reference_gmm(beta_prime: f64) -> Self {
        Config {
            dataset: DatasetConfig {
                source: DatasetSource::Gmm {
                    classes: 2,
                    dim: 2,
                    per_class: 500,
                    test_per_class: Some(500),
                    sep: 4.0,
                    seed: None,
                },
                standardize: false,
            },
            encoder: EncoderConfig {
                layer_dims: vec![2, 16, 2],
                activation: Activation::Tanh,
                noise_mode: NoiseModeKind::FixedSigma,
                sigma2: 0.1,
            },
            decoder: DecoderConfig {
                variant: DecoderVariant::NaiveBayes,
                sample_prediction: false,
            },
            loss: LossConfig {
                beta: None,
                beta_prime: Some(beta_prime),
                mc_samples: 1,
            },
            optim: OptimConfig {
                kind: OptimizerKind::Adam,
                lr: 1e-2,
                steps: 2000,
                batch: 100,
                shuffle: true,
            },
            seed: 7,
            surrogate: SurrogateConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Materializes the configured train/test splits.
pub fn load_splits(config: &Config) -> Result<Splits> {
    let (train, test) = match &config.dataset.source {
        DatasetSource::Gmm {
            classes,
            dim,
            per_class,
            test_per_class,
            sep,
            ..
        } => {
            let spec = config.gmm_spec_from(*classes, *dim, *per_class, *sep);
            (
                gen_gmm(&spec)?,
                gen_gmm_test(&spec, test_per_class.unwrap_or(*per_class))?,
            )
        }
        DatasetSource::Json { train, test } => (load_dataset(train)?, load_dataset(test)?),
        DatasetSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => (
            read_idx(train_images, train_labels)?,
            read_idx(test_images, test_labels)?,
        ),
    };
    if train.dim() != test.dim() {
        return Err(Error::dims("test split features", train.dim(), test.dim()));
    }
    let classes = train.class_count().max(test.class_count());
    let widen = |d: Dataset| Dataset::new(d.features, d.labels, classes, d.provenance);
    let (train, test) = (widen(train)?, widen(test)?);
    if config.dataset.standardize {
        let s = Standardizer::fit(&train);
        Ok(Splits {
            train: s.apply(&train)?,
            test: s.apply(&test)?,
        })
    } else {
        Ok(Splits { train, test })
    }
}

// ------------------------------------------------------------ checkpoints

/// A real written with 17 significant digits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct F17(pub f64);

impl Serialize for F17 {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if !self.0.is_finite() {
            return Err(serde::ser::Error::custom(format!(
                "non-finite value {}",
                self.0
            )));
        }
        let raw = serde_json::value::RawValue::from_string(format!("{:.16e}", self.0))
            .map_err(serde::ser::Error::custom)?;
        raw.serialize(s)
    }
}

impl<'de> Deserialize<'de> for F17 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        f64::deserialize(d).map(F17)
    }
}

fn f17(v: &[f64]) -> Vec<F17> {
    v.iter().copied().map(F17).collect()
}

fn unf17(v: &[F17]) -> Vec<f64> {
    v.iter().map(|x| x.0).collect()
}

#[derive(Serialize, Deserialize)]
struct ParamDoc {
    name: String,
    shape: Vec<usize>,
    values: Vec<F17>,
}

#[derive(Serialize, Deserialize)]
struct SurrogateDoc {
    class_means: Vec<Vec<F17>>,
    class_log_sigma: Vec<F17>,
    priors: Vec<F17>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
enum HeadDoc {
    Softmax { w: Vec<F17>, b: Vec<F17> },
    NaiveBayes,
}

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    format_version: u64,
    config: Config,
    params: Vec<ParamDoc>,
    surrogate: SurrogateDoc,
    head: HeadDoc,
}

pub fn checkpoint_to_string(ck: &Checkpoint) -> Result<String> {
    let enc = &ck.encoder;
    let params = enc
        .params()
        .layout()
        .iter()
        .map(|s| ParamDoc {
            name: s.name.clone(),
            shape: s.shape.clone(),
            values: f17(&enc.params().values()[s.offset..s.offset + s.len]),
        })
        .collect();
    let surrogate = SurrogateDoc {
        class_means: ck.surrogate.class_means().iter().map(|m| f17(m)).collect(),
        class_log_sigma: f17(ck.surrogate.class_log_sigma()),
        priors: f17(ck.surrogate.priors()),
    };
    let head = match &ck.head {
        DecoderHead::Softmax { w, b } => HeadDoc::Softmax {
            w: f17(w),
            b: f17(b),
        },
        DecoderHead::NaiveBayes => HeadDoc::NaiveBayes,
    };
    let doc = CheckpointDoc {
        format_version: CHECKPOINT_VERSION,
        config: ck.config.clone(),
        params,
        surrogate,
        head,
    };
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    Ok(text)
}

pub fn checkpoint_from_str(text: &str) -> Result<Checkpoint> {
    let probe: serde_json::Value = serde_json::from_str(text)?;
    match probe
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
    {
        Some(CHECKPOINT_VERSION) => {}
        Some(v) => return Err(Error::UnsupportedVersion(v)),
        None => return Err(Error::ShapeMismatch("missing format_version".into())),
    }
    let doc: CheckpointDoc = serde_json::from_str(text)?;
    doc.config.validate()?;

    let blocks = doc
        .params
        .iter()
        .map(|p| (p.name.clone(), p.shape.clone(), unf17(&p.values)))
        .collect();
    let store = crate::diffcore::ParamStore::new(blocks)
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let encoder = EncoderModel::from_params(
        doc.config.encoder.layer_dims.clone(),
        doc.config.encoder.activation,
        doc.config.encoder.noise(),
        store,
    )
    .map_err(|e| Error::ShapeMismatch(e.to_string()))?;

    let surrogate = ClassSurrogate::new(
        doc.surrogate.class_means.iter().map(|m| unf17(m)).collect(),
        unf17(&doc.surrogate.class_log_sigma),
        unf17(&doc.surrogate.priors),
    )?;
    if surrogate.dim() != encoder.bottleneck_dim() {
        return Err(Error::ShapeMismatch(format!(
            "surrogate dimension {} vs bottleneck {}",
            surrogate.dim(),
            encoder.bottleneck_dim()
        )));
    }
    let head = match doc.head {
        HeadDoc::NaiveBayes => DecoderHead::NaiveBayes,
        HeadDoc::Softmax { w, b } => {
            let (k, d) = (surrogate.classes(), encoder.bottleneck_dim());
            if w.len() != k * d || b.len() != k {
                return Err(Error::ShapeMismatch(format!(
                    "softmax head is {}+{} values, expected {}x{} + {}",
                    w.len(),
                    b.len(),
                    k,
                    d,
                    k
                )));
            }
            DecoderHead::Softmax {
                w: unf17(&w),
                b: unf17(&b),
            }
        }
    };
    let expected = match doc.config.decoder.variant {
        DecoderVariant::Softmax => matches!(head, DecoderHead::Softmax { .. }),
        DecoderVariant::NaiveBayes => matches!(head, DecoderHead::NaiveBayes),
    };
    if !expected {
        return Err(Error::ShapeMismatch(
            "head variant differs from config".into(),
        ));
    }
    Ok(Checkpoint {
        config: doc.config,
        encoder,
        surrogate,
        head,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_file(path, checkpoint_to_string(ck)?.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes)
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
    checkpoint_from_str(&text)
}

// ---------------------------------------------------------------- metrics

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub cross_entropy: f64,
    pub kl_term: f64,
    pub beta_prime: f64,
    pub total: f64,
    pub accuracy: f64,
}

fn g17(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_f64(field: &str, column: &str) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|e| Error::InvalidArgument(format!("column {column}: `{field}`: {e}")))
}

pub fn metrics_to_csv(rows: &[MetricsRow]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(METRICS_HEADER.split(','))?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            g17(r.cross_entropy),
            g17(r.kl_term),
            g17(r.beta_prime),
            g17(r.total),
            g17(r.accuracy),
        ])?;
    }
    w.into_inner()
        .map_err(|e| Error::io("metrics buffer", e.into_error()))
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    write_file(path, &metrics_to_csv(rows)?)
}

pub fn parse_metrics(bytes: &[u8]) -> Result<Vec<MetricsRow>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(bytes);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != METRICS_HEADER {
        return Err(Error::InvalidArgument(format!(
            "unexpected metrics header `{}`",
            header.join(",")
        )));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let col = |i: usize| parse_f64(&rec[i], &header[i]);
        rows.push(MetricsRow {
            step: rec[0]
                .parse()
                .map_err(|e| Error::InvalidArgument(format!("column step: {e}")))?,
            cross_entropy: col(1)?,
            kl_term: col(2)?,
            beta_prime: col(3)?,
            total: col(4)?,
            accuracy: col(5)?,
        });
    }
    Ok(rows)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    parse_metrics(&read_file(path)?)
}

/// Trade-off rows sorted by `beta_prime`.
pub fn tradeoff_to_csv(points: &[TradeoffPoint]) -> Result<Vec<u8>> {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.beta_prime.total_cmp(&b.beta_prime));
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(TRADEOFF_HEADER.split(','))?;
    for p in &sorted {
        w.write_record([
            g17(p.beta_prime),
            g17(p.test_cross_entropy),
            g17(p.test_kl_term),
            g17(p.test_accuracy),
            g17(p.ixt),
            g17(p.ixt_given_y),
        ])?;
    }
    w.into_inner()
        .map_err(|e| Error::io("trade-off buffer", e.into_error()))
}

pub fn write_tradeoff(path: &Path, points: &[TradeoffPoint]) -> Result<()> {
    write_file(path, &tradeoff_to_csv(points)?)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}
