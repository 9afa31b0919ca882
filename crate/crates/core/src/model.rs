//! Stochastic encoder, decoder heads, the tape-built training loss, the
//! optimizer loop, evaluation and trade-off sweeps.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data_io::{
    derive_seed, rng_for, Config, Dataset, DatasetSource, DecoderVariant, MetricsRow,
    OptimizerKind, PriorSource, Splits, SurrogateUpdate,
};
use crate::diffcore::{
    grad_check, log_sum_exp, Activation, GradCheckReport, NodeId, ParamStore, Tape,
};
use crate::error::{Error, Result};
use crate::estimators::{bound_report, BoundReport, EmbeddedDataset, EstimatorOptions};
use crate::gaussians::{
    empirical_priors, kl_spherical_node, reparam_node, spherical_log_pdf, spherical_log_pdf_node,
    ClassSurrogate, DiagGaussian,
};
use crate::objectives::{cib_loss, LossBreakdown};

const STREAM_INIT: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_EVAL: u64 = 4;
const STREAM_PREDICT: u64 = 5;

const LOG_ETA2: &str = "enc.log_eta2";
const SUR_MEANS: &str = "sur.means";
const SUR_LOG_SIGMA: &str = "sur.log_sigma";
const DEC_W: &str = "dec.w";
const DEC_B: &str = "dec.b";

fn layer_w(l: usize) -> String {
    format!("enc.w{l}")
}

fn layer_b(l: usize) -> String {
    format!("enc.b{l}")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseMode {
    /// Variance `sigma2` on every coordinate.
    FixedSigma { sigma2: f64 },
    /// Variance `η² + sigma2_floor` with a learned global `ln η²`.
    LearnedEta { sigma2_floor: f64 },
}

impl NoiseMode {
    fn floor(self) -> f64 {
        match self {
            NoiseMode::FixedSigma { sigma2 } => sigma2,
            NoiseMode::LearnedEta { sigma2_floor } => sigma2_floor,
        }
    }
}

/// Maps `x` to `N(f(x), v·I)` with `f` a fully connected network whose last
/// layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    layer_dims: Vec<usize>,
    activation: Activation,
    noise: NoiseMode,
    params: ParamStore,
}

fn encoder_blocks(layer_dims: &[usize], noise: NoiseMode) -> Vec<(String, Vec<usize>)> {
    let mut blocks = Vec::new();
    for (l, pair) in layer_dims.windows(2).enumerate() {
        blocks.push((layer_w(l), vec![pair[1], pair[0]]));
        blocks.push((layer_b(l), vec![pair[1]]));
    }
    if matches!(noise, NoiseMode::LearnedEta { .. }) {
        blocks.push((LOG_ETA2.to_string(), vec![1]));
    }
    blocks
}

fn glorot<R: Rng>(rng: &mut R, fan_out: usize, fan_in: usize) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-a..a))
        .collect()
}

impl EncoderModel {
    pub fn init<R: Rng>(
        layer_dims: Vec<usize>,
        activation: Activation,
        noise: NoiseMode,
        rng: &mut R,
    ) -> Result<Self> {
        validate_layers(&layer_dims, noise)?;
        let blocks = encoder_blocks(&layer_dims, noise)
            .into_iter()
            .map(|(name, shape)| {
                let values = match shape.as_slice() {
                    [r, c] => glorot(rng, *r, *c),
                    [n] => vec![0.0; *n],
                    _ => unreachable!("encoder blocks are vectors or matrices"),
                };
                (name, shape, values)
            })
            .collect();
        Self::from_params(layer_dims, activation, noise, ParamStore::new(blocks)?)
    }

    /// Wraps an existing store, which must hold exactly the expected blocks.
    pub fn from_params(
        layer_dims: Vec<usize>,
        activation: Activation,
        noise: NoiseMode,
        params: ParamStore,
    ) -> Result<Self> {
        validate_layers(&layer_dims, noise)?;
        let expected = encoder_blocks(&layer_dims, noise);
        if expected.len() != params.layout().len() {
            return Err(Error::dims(
                "encoder parameter blocks",
                expected.len(),
                params.layout().len(),
            ));
        }
        for ((name, shape), got) in expected.iter().zip(params.layout()) {
            if *name != got.name || *shape != got.shape {
                return Err(Error::InvalidArgument(format!(
                    "encoder block `{}` {:?} where `{name}` {shape:?} was expected",
                    got.name, got.shape
                )));
            }
        }
        Ok(Self {
            layer_dims,
            activation,
            noise,
            params,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn noise(&self) -> NoiseMode {
        self.noise
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn bottleneck_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated layer dims")
    }

    /// Learned `η²`, or 0 in fixed mode.
    pub fn eta2(&self) -> f64 {
        match self.noise {
            NoiseMode::FixedSigma { .. } => 0.0,
            NoiseMode::LearnedEta { .. } => {
                self.params.get(LOG_ETA2).expect("learned mode block")[0].exp()
            }
        }
    }

    pub fn sigma2(&self) -> f64 {
        self.noise.floor()
    }

    pub fn variance(&self) -> f64 {
        self.eta2() + self.sigma2()
    }

    pub fn mean(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::dims("encoder input", self.input_dim(), x.len()));
        }
        let layers = self.layer_dims.len() - 1;
        let mut h = x.to_vec();
        for l in 0..layers {
            let w = self.params.get(&layer_w(l))?;
            let b = self.params.get(&layer_b(l))?;
            let cols = h.len();
            h = b
                .iter()
                .enumerate()
                .map(|(r, bias)| {
                    let z = bias
                        + w[r * cols..(r + 1) * cols]
                            .iter()
                            .zip(&h)
                            .map(|(a, v)| a * v)
                            .sum::<f64>();
                    if l + 1 < layers {
                        self.activation.apply(z)
                    } else {
                        z
                    }
                })
                .collect();
        }
        Ok(h)
    }

    pub fn encode(&self, x: &[f64]) -> Result<DiagGaussian> {
        DiagGaussian::spherical(self.mean(x)?, self.variance())
    }
}

fn validate_layers(layer_dims: &[usize], noise: NoiseMode) -> Result<()> {
    if layer_dims.len() < 2 || layer_dims.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "layer_dims needs at least input and bottleneck sizes >= 1, got {layer_dims:?}"
        )));
    }
    let floor = noise.floor();
    if !(floor > 0.0 && floor.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise variance must be > 0, got {floor}"
        )));
    }
    Ok(())
}

/// Tape form of [`EncoderModel::encode`]: returns `(mean, log_var)` nodes
/// reading `enc.*` blocks from `store`.
fn encoder_nodes(
    tape: &mut Tape,
    store: &ParamStore,
    encoder: &EncoderModel,
    x: &[f64],
) -> Result<(NodeId, NodeId)> {
    let layers = encoder.layer_dims.len() - 1;
    let mut h = tape.constant(x.to_vec());
    for l in 0..layers {
        h = tape.affine(store, h, &layer_w(l), &layer_b(l))?;
        if l + 1 < layers {
            h = tape.activation(h, encoder.activation);
        }
    }
    let d = encoder.bottleneck_dim();
    let log_var = match encoder.noise {
        NoiseMode::FixedSigma { sigma2 } => tape.constant(vec![sigma2.ln(); d]),
        NoiseMode::LearnedEta { sigma2_floor } => {
            let le = tape.param(store, LOG_ETA2)?;
            let e = tape.exp(le);
            let v = tape.shift(e, sigma2_floor);
            let lv = tape.ln(v);
            tape.broadcast(lv, d)
        }
    };
    Ok((h, log_var))
}

/// The decoder `q(ŷ | t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum DecoderHead {
    /// Logits `W t + b` with `W` stored row-major, one row per class.
    Softmax { w: Vec<f64>, b: Vec<f64> },
    /// Bayes rule over the surrogate components and class priors.
    NaiveBayes,
}

impl DecoderHead {
    pub fn variant(&self) -> DecoderVariant {
        match self {
            DecoderHead::Softmax { .. } => DecoderVariant::Softmax,
            DecoderHead::NaiveBayes => DecoderVariant::NaiveBayes,
        }
    }
}

/// Class log-probabilities `ln p(y) + ln N(t; μ_y, σ_y² I)`, normalized.
pub fn naive_bayes_log_probs(surrogate: &ClassSurrogate, t: &[f64]) -> Result<Vec<f64>> {
    if t.len() != surrogate.dim() {
        return Err(Error::dims("naive Bayes latent", surrogate.dim(), t.len()));
    }
    let scores: Vec<f64> = (0..surrogate.classes())
        .map(|c| {
            surrogate.priors()[c].ln()
                + spherical_log_pdf(
                    t,
                    &surrogate.class_means()[c],
                    surrogate.class_log_sigma()[c],
                )
        })
        .collect();
    let lse = log_sum_exp(&scores);
    Ok(scores.iter().map(|s| s - lse).collect())
}

pub fn softmax_log_probs(w: &[f64], b: &[f64], t: &[f64]) -> Result<Vec<f64>> {
    let d = t.len();
    if w.len() != b.len() * d {
        return Err(Error::dims("softmax weights", b.len() * d, w.len()));
    }
    let logits: Vec<f64> = b
        .iter()
        .enumerate()
        .map(|(r, bias)| {
            bias + w[r * d..(r + 1) * d]
                .iter()
                .zip(t)
                .map(|(a, v)| a * v)
                .sum::<f64>()
        })
        .collect();
    let lse = log_sum_exp(&logits);
    Ok(logits.iter().map(|l| l - lse).collect())
}

/// Encoder, class surrogate and decoder head.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub encoder: EncoderModel,
    pub surrogate: ClassSurrogate,
    pub head: DecoderHead,
}

/// Everything a trained network needs to be rebuilt.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub encoder: EncoderModel,
    pub surrogate: ClassSurrogate,
    pub head: DecoderHead,
}

impl Checkpoint {
    pub fn new(config: Config, network: Network) -> Self {
        Self {
            config,
            encoder: network.encoder,
            surrogate: network.surrogate,
            head: network.head,
        }
    }

    pub fn network(&self) -> Network {
        Network {
            encoder: self.encoder.clone(),
            surrogate: self.surrogate.clone(),
            head: self.head.clone(),
        }
    }
}

/// Handles of one tape-built batch loss.
#[derive(Clone, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub cross_entropy: NodeId,
    pub kl_term: NodeId,
    /// Per-sample `(cross-entropy, KL)` nodes, for diagnostics.
    pub per_sample: Vec<(NodeId, NodeId)>,
}

impl Network {
    /// Fresh network for `config` with the given class priors.
    pub fn init(config: &Config, priors: Vec<f64>) -> Result<Self> {
        let mut rng = rng_for(config.seed, STREAM_INIT);
        let enc = &config.encoder;
        let encoder = EncoderModel::init(
            enc.layer_dims.clone(),
            enc.activation,
            enc.noise(),
            &mut rng,
        )?;
        let d = encoder.bottleneck_dim();
        let k = priors.len();
        let surrogate = ClassSurrogate::initial(k, d, priors)?;
        let head = match config.decoder.variant {
            DecoderVariant::Softmax => DecoderHead::Softmax {
                w: glorot(&mut rng, k, d),
                b: vec![0.0; k],
            },
            DecoderVariant::NaiveBayes => DecoderHead::NaiveBayes,
        };
        Ok(Self {
            encoder,
            surrogate,
            head,
        })
    }

    pub fn classes(&self) -> usize {
        self.surrogate.classes()
    }

    pub fn log_probs(&self, t: &[f64]) -> Result<Vec<f64>> {
        match &self.head {
            DecoderHead::Softmax { w, b } => softmax_log_probs(w, b, t),
            DecoderHead::NaiveBayes => naive_bayes_log_probs(&self.surrogate, t),
        }
    }

    /// Arg-max class at latent point `t`; ties go to the lowest index.
    pub fn predict_latent(&self, t: &[f64]) -> Result<usize> {
        let lp = self.log_probs(t)?;
        let mut best = 0;
        for (c, v) in lp.iter().enumerate() {
            if *v > lp[best] {
                best = c;
            }
        }
        Ok(best)
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        self.predict_latent(&self.encoder.mean(x)?)
    }

    /// Value-level batch loss with frozen noise `noise[i][s]`.
    pub fn loss(
        &self,
        xs: &[Vec<f64>],
        labels: &[usize],
        beta_prime: f64,
        noise: &[Vec<Vec<f64>>],
    ) -> Result<LossBreakdown> {
        let encoded = xs
            .iter()
            .map(|x| self.encoder.encode(x))
            .collect::<Result<Vec<_>>>()?;
        cib_loss(
            &encoded,
            labels,
            |t| self.log_probs(t),
            &self.surrogate,
            beta_prime,
            noise,
        )
    }

    /// Packs every trainable block into one store. `log σ_y` is included
    /// only when `learn_sigma` is set.
    pub fn pack(&self, learn_sigma: bool) -> Result<ParamStore> {
        let mut blocks: Vec<(String, Vec<usize>, Vec<f64>)> = self
            .encoder
            .params
            .layout()
            .iter()
            .map(|s| {
                (
                    s.name.clone(),
                    s.shape.clone(),
                    self.encoder.params.values()[s.offset..s.offset + s.len].to_vec(),
                )
            })
            .collect();
        let (k, d) = (self.classes(), self.encoder.bottleneck_dim());
        blocks.push((
            SUR_MEANS.into(),
            vec![k, d],
            self.surrogate.class_means().concat(),
        ));
        if learn_sigma {
            blocks.push((
                SUR_LOG_SIGMA.into(),
                vec![k],
                self.surrogate.class_log_sigma().to_vec(),
            ));
        }
        if let DecoderHead::Softmax { w, b } = &self.head {
            blocks.push((DEC_W.into(), vec![k, d], w.clone()));
            blocks.push((DEC_B.into(), vec![k], b.clone()));
        }
        ParamStore::new(blocks)
    }

    /// Inverse of [`Network::pack`]; blocks missing from `store` keep their
    /// current values.
    pub fn unpack(&self, store: &ParamStore) -> Result<Network> {
        let enc_blocks = encoder_blocks(&self.encoder.layer_dims, self.encoder.noise)
            .into_iter()
            .map(|(name, shape)| Ok((name.clone(), shape, store.get(&name)?.to_vec())))
            .collect::<Result<Vec<_>>>()?;
        let encoder = EncoderModel::from_params(
            self.encoder.layer_dims.clone(),
            self.encoder.activation,
            self.encoder.noise,
            ParamStore::new(enc_blocks)?,
        )?;
        let d = encoder.bottleneck_dim();
        let means = store
            .get(SUR_MEANS)?
            .chunks(d)
            .map(<[f64]>::to_vec)
            .collect();
        let log_sigma = if store.contains(SUR_LOG_SIGMA) {
            store.get(SUR_LOG_SIGMA)?.to_vec()
        } else {
            self.surrogate.class_log_sigma().to_vec()
        };
        let surrogate = ClassSurrogate::new(means, log_sigma, self.surrogate.priors().to_vec())?;
        let head = match &self.head {
            DecoderHead::Softmax { .. } => DecoderHead::Softmax {
                w: store.get(DEC_W)?.to_vec(),
                b: store.get(DEC_B)?.to_vec(),
            },
            DecoderHead::NaiveBayes => DecoderHead::NaiveBayes,
        };
        Ok(Network {
            encoder,
            surrogate,
            head,
        })
    }

    /// Builds the batch loss on `tape`, reading parameters from a store laid
    /// out by [`Network::pack`]. `self` supplies shapes, priors and any
    /// frozen `log σ_y`.
    pub fn tape_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        xs: &[&[f64]],
        labels: &[usize],
        beta_prime: f64,
        noise: &[Vec<Vec<f64>>],
    ) -> Result<LossNodes> {
        if xs.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if labels.len() != xs.len() {
            return Err(Error::dims("batch labels", xs.len(), labels.len()));
        }
        if noise.len() != xs.len() {
            return Err(Error::dims("batch noise draws", xs.len(), noise.len()));
        }
        let k = self.classes();
        let d = self.encoder.bottleneck_dim();
        let means_off = store.slice(SUR_MEANS)?.offset;
        let sigma_off = store.slice(SUR_LOG_SIGMA).ok().map(|s| s.offset);
        let mut class_nodes = Vec::with_capacity(k);
        for c in 0..k {
            let mu = tape.param_range(store, means_off + c * d, d)?;
            let ls = match sigma_off {
                Some(off) => tape.param_range(store, off + c, 1)?,
                None => tape.scalar_const(self.surrogate.class_log_sigma()[c]),
            };
            class_nodes.push((mu, ls));
        }
        let log_priors: Vec<f64> = self.surrogate.priors().iter().map(|p| p.ln()).collect();

        let mut per_sample = Vec::with_capacity(xs.len());
        for (i, ((x, &y), draws)) in xs.iter().zip(labels).zip(noise).enumerate() {
            self.surrogate.check_class(y)?;
            if draws.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} has no Monte-Carlo draws"
                )));
            }
            let (mean, log_var) = encoder_nodes(tape, store, &self.encoder, x)?;
            let (mu, ls) = class_nodes[y];
            let kl = kl_spherical_node(tape, mean, log_var, mu, ls);
            let mut terms = Vec::with_capacity(draws.len());
            for eps in draws {
                if eps.len() != d {
                    return Err(Error::dims(
                        format!("noise draw for sample {i}"),
                        d,
                        eps.len(),
                    ));
                }
                let t = reparam_node(tape, mean, log_var, eps);
                let scores = match self.head {
                    DecoderHead::Softmax { .. } => tape.affine(store, t, DEC_W, DEC_B)?,
                    DecoderHead::NaiveBayes => {
                        let parts: Vec<NodeId> = class_nodes
                            .iter()
                            .zip(&log_priors)
                            .map(|(&(mu_c, ls_c), lp)| {
                                let l = spherical_log_pdf_node(tape, t, mu_c, ls_c);
                                tape.shift(l, *lp)
                            })
                            .collect();
                        tape.concat(&parts)
                    }
                };
                let lse = tape.log_sum_exp(scores);
                let true_score = tape.gather(scores, y);
                terms.push(tape.sub(true_score, lse));
            }
            let sum = tape.add_all(&terms);
            let ce = tape.scale(sum, -1.0 / draws.len() as f64);
            let (ce_v, kl_v) = (tape.scalar(ce), tape.scalar(kl));
            if !ce_v.is_finite() || !kl_v.is_finite() {
                return Err(Error::NonFiniteLoss {
                    sample_index: i,
                    cross_entropy: ce_v,
                    kl_term: kl_v,
                });
            }
            per_sample.push((ce, kl));
        }
        let n = xs.len() as f64;
        let ces: Vec<NodeId> = per_sample.iter().map(|p| p.0).collect();
        let kls: Vec<NodeId> = per_sample.iter().map(|p| p.1).collect();
        let ce_sum = tape.add_all(&ces);
        let kl_sum = tape.add_all(&kls);
        let cross_entropy = tape.scale(ce_sum, 1.0 / n);
        let kl_term = tape.scale(kl_sum, 1.0 / n);
        let weighted = tape.scale(kl_term, beta_prime);
        let total = tape.add(cross_entropy, weighted);
        Ok(LossNodes {
            total,
            cross_entropy,
            kl_term,
            per_sample,
        })
    }

    /// Codes `f(x_i)` of `data` with this encoder's noise variance.
    pub fn embed(&self, data: &Dataset) -> Result<EmbeddedDataset> {
        let codes = data
            .features()
            .iter()
            .map(|x| self.encoder.mean(x))
            .collect::<Result<Vec<_>>>()?;
        EmbeddedDataset::new(
            codes,
            data.labels().to_vec(),
            self.encoder.sigma2(),
            self.encoder.eta2(),
        )
    }
}

fn standard_normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn draw_noise(rng: &mut ChaCha8Rng, samples: usize, mc: usize, d: usize) -> Vec<Vec<Vec<f64>>> {
    (0..samples)
        .map(|_| (0..mc).map(|_| standard_normals(rng, d)).collect())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub cross_entropy: f64,
    pub kl_term: f64,
    pub beta_prime: f64,
    pub total: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Evaluation {
    pub fn metrics_row(&self, step: usize) -> MetricsRow {
        MetricsRow {
            step,
            cross_entropy: self.cross_entropy,
            kl_term: self.kl_term,
            beta_prime: self.beta_prime,
            total: self.total,
            accuracy: self.accuracy,
        }
    }
}

/// Loss terms with `mc_samples` draws per point and accuracy from the
/// encoder mean (or one latent sample when `sample_prediction` is set).
pub fn evaluate(
    network: &Network,
    data: &Dataset,
    beta_prime: f64,
    mc_samples: usize,
    seed: u64,
    sample_prediction: bool,
) -> Result<Evaluation> {
    if mc_samples == 0 {
        return Err(Error::InvalidArgument(
            "evaluation needs mc_samples >= 1".into(),
        ));
    }
    let d = network.encoder.bottleneck_dim();
    let noise = draw_noise(&mut rng_for(seed, STREAM_EVAL), data.len(), mc_samples, d);
    let loss = network.loss(data.features(), data.labels(), beta_prime, &noise)?;

    let k = network.classes();
    let mut confusion = vec![vec![0usize; k]; k];
    let mut pred_rng = rng_for(seed, STREAM_PREDICT);
    for (x, &y) in data.features().iter().zip(data.labels()) {
        let pred = if sample_prediction {
            let t = network
                .encoder
                .encode(x)?
                .sample_reparam(&standard_normals(&mut pred_rng, d))?;
            network.predict_latent(&t)?
        } else {
            network.predict(x)?
        };
        if y >= k {
            return Err(Error::UnknownClass {
                label: y,
                classes: k,
            });
        }
        confusion[y][pred] += 1;
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    Ok(Evaluation {
        accuracy: correct as f64 / data.len() as f64,
        cross_entropy: loss.cross_entropy,
        kl_term: loss.kl_term,
        beta_prime,
        total: loss.total,
        confusion,
    })
}

/// [`evaluate`] with the evaluation settings and seed of `config`.
pub fn evaluate_with_config(
    network: &Network,
    config: &Config,
    data: &Dataset,
) -> Result<Evaluation> {
    evaluate(
        network,
        data,
        config.loss.resolved_beta_prime()?,
        config.eval.mc_samples,
        config.seed,
        config.decoder.sample_prediction,
    )
}

/// Mixture-bound estimates of `I(X;T)` and `I(X;T|Y)` on `data`.
pub fn information_estimates(
    network: &Network,
    data: &Dataset,
    options: EstimatorOptions,
) -> Result<BoundReport> {
    bound_report(&network.embed(data)?, options)
}

enum Optimizer {
    Adam {
        lr: f64,
        m: Vec<f64>,
        v: Vec<f64>,
        t: i32,
    },
    Sgd {
        lr: f64,
    },
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(kind: OptimizerKind, lr: f64, len: usize) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam {
                lr,
                m: vec![0.0; len],
                v: vec![0.0; len],
                t: 0,
            },
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
        }
    }

    fn step(&mut self, values: &mut [f64], grad: &[f64]) {
        match self {
            Optimizer::Sgd { lr } => {
                for (p, g) in values.iter_mut().zip(grad) {
                    *p -= *lr * g;
                }
            }
            Optimizer::Adam { lr, m, v, t } => {
                *t += 1;
                let c1 = 1.0 - Self::BETA1.powi(*t);
                let c2 = 1.0 - Self::BETA2.powi(*t);
                for k in 0..values.len() {
                    m[k] = Self::BETA1 * m[k] + (1.0 - Self::BETA1) * grad[k];
                    v[k] = Self::BETA2 * v[k] + (1.0 - Self::BETA2) * grad[k] * grad[k];
                    values[k] -= *lr * (m[k] / c1) / ((v[k] / c2).sqrt() + Self::EPS);
                }
            }
        }
    }
}

/// Closed-form surrogate fit: per-class mean of codes and, when
/// `learn_sigma` is set, the spherical variance `v + scatter/d`.
pub fn moment_matched_surrogate(
    network: &Network,
    data: &Dataset,
    learn_sigma: bool,
) -> Result<ClassSurrogate> {
    let k = network.classes();
    let d = network.encoder.bottleneck_dim();
    let codes = data
        .features()
        .iter()
        .map(|x| network.encoder.mean(x))
        .collect::<Result<Vec<_>>>()?;
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (c, &y) in codes.iter().zip(data.labels()) {
        counts[y] += 1;
        for (a, v) in sums[y].iter_mut().zip(c) {
            *a += v;
        }
    }
    let mut means = network.surrogate.class_means().to_vec();
    let mut log_sigma = network.surrogate.class_log_sigma().to_vec();
    let mut scatter = vec![0.0; k];
    for y in 0..k {
        if counts[y] > 0 {
            means[y] = sums[y].iter().map(|s| s / counts[y] as f64).collect();
        }
    }
    for (c, &y) in codes.iter().zip(data.labels()) {
        scatter[y] += c
            .iter()
            .zip(&means[y])
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
    }
    if learn_sigma {
        for y in 0..k {
            if counts[y] > 0 {
                let var = network.encoder.variance() + scatter[y] / (counts[y] * d) as f64;
                log_sigma[y] = 0.5 * var.ln();
            }
        }
    }
    ClassSurrogate::new(means, log_sigma, network.surrogate.priors().to_vec())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub network: Network,
    pub metrics: Vec<MetricsRow>,
    pub beta_prime: f64,
}

/// Class priors as configured: from the train split, or from both splits.
pub fn configured_priors(config: &Config, splits: &Splits) -> Result<Vec<f64>> {
    let k = splits.train.class_count();
    match config.surrogate.priors {
        PriorSource::Train => empirical_priors(splits.train.labels(), k),
        PriorSource::All => {
            let all: Vec<usize> = splits
                .train
                .labels()
                .iter()
                .chain(splits.test.labels())
                .copied()
                .collect();
            empirical_priors(&all, k)
        }
    }
}

/// Runs `config.optim.steps` optimizer steps on the train split.
///
/// Metrics are logged at step 0, every `eval.log_every` steps and after the
/// final step, each row being [`evaluate_with_config`] on the train split.
pub fn train(config: &Config, splits: &Splits) -> Result<TrainRun> {
    config.validate()?;
    let train = &splits.train;
    if train.dim() != config.encoder.layer_dims[0] {
        return Err(Error::dims(
            "encoder input vs dataset features",
            config.encoder.layer_dims[0],
            train.dim(),
        ));
    }
    if let Some(c) = train.class_counts().iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass(c));
    }
    let beta_prime = config.loss.resolved_beta_prime()?;
    let priors = configured_priors(config, splits)?;
    let mut network = Network::init(config, priors)?;
    let learn_sigma = config.surrogate.learn_sigma;
    let alternating = config.surrogate.update == SurrogateUpdate::Alternating;

    let mut store = network.pack(learn_sigma)?;
    let frozen: Vec<bool> = (0..store.len())
        .map(|k| alternating && store.name_of(k).is_some_and(|n| n.starts_with("sur.")))
        .collect();
    let mut optimizer = Optimizer::new(config.optim.kind, config.optim.lr, store.len());
    let mut noise_rng = rng_for(config.seed, STREAM_NOISE);
    let mut shuffle_rng = rng_for(config.seed, STREAM_SHUFFLE);

    let n = train.len();
    let batch = config.optim.batch.min(n);
    let d = network.encoder.bottleneck_dim();
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;

    let mut metrics = vec![evaluate_with_config(&network, config, train)?.metrics_row(0)];
    for step in 1..=config.optim.steps {
        if alternating {
            network.surrogate = moment_matched_surrogate(&network, train, learn_sigma)?;
            store = network.pack(learn_sigma)?;
        }
        if cursor + batch > n {
            if config.optim.shuffle {
                order.shuffle(&mut shuffle_rng);
            }
            cursor = 0;
        }
        let mut idx = order[cursor..cursor + batch].to_vec();
        cursor += batch;
        idx.sort_unstable();

        let xs: Vec<&[f64]> = idx
            .iter()
            .map(|&i| train.features()[i].as_slice())
            .collect();
        let ys: Vec<usize> = idx.iter().map(|&i| train.labels()[i]).collect();
        let noise = draw_noise(&mut noise_rng, idx.len(), config.loss.mc_samples, d);

        let mut tape = Tape::new(&store);
        let nodes = network.tape_loss(&mut tape, &store, &xs, &ys, beta_prime, &noise)?;
        let mut grad = tape.backward(nodes.total, 1.0)?;
        for (g, &f) in grad.iter_mut().zip(&frozen) {
            if f {
                *g = 0.0;
            }
        }
        let mut values = store.values().to_vec();
        optimizer.step(&mut values, &grad);
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "parameter `{}` after step {step}",
                store.name_of(k).unwrap_or("?")
            )));
        }
        store.set_values(values)?;
        network = network.unpack(&store)?;

        if step % config.eval.log_every == 0 || step == config.optim.steps {
            metrics.push(evaluate_with_config(&network, config, train)?.metrics_row(step));
        }
    }
    Ok(TrainRun {
        network,
        metrics,
        beta_prime,
    })
}

/// One point of the trade-off curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub beta_prime: f64,
    pub train_cross_entropy: f64,
    pub test_cross_entropy: f64,
    pub train_kl_term: f64,
    pub test_kl_term: f64,
    pub test_accuracy: f64,
    /// Mixture upper bound on `I(X;T)` over test codes.
    pub ixt: f64,
    /// Class-weighted mixture upper bound on `I(X;T|Y)` over test codes.
    pub ixt_given_y: f64,
}

pub fn tradeoff_point(
    network: &Network,
    config: &Config,
    splits: &Splits,
) -> Result<TradeoffPoint> {
    let tr = evaluate_with_config(network, config, &splits.train)?;
    let te = evaluate_with_config(network, config, &splits.test)?;
    let bounds = information_estimates(network, &splits.test, EstimatorOptions::default())?;
    Ok(TradeoffPoint {
        beta_prime: tr.beta_prime,
        train_cross_entropy: tr.cross_entropy,
        test_cross_entropy: te.cross_entropy,
        train_kl_term: tr.kl_term,
        test_kl_term: te.kl_term,
        test_accuracy: te.accuracy,
        ixt: bounds.unconditional,
        ixt_given_y: bounds.aggregate,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub index: usize,
    pub config: Config,
    pub run: TrainRun,
    pub point: TradeoffPoint,
}

/// The configuration of sweep point `index`: `beta_prime` replaced and the
/// seed derived from the base seed and the index. A generated dataset keeps
/// the base seed so every point sees the same data.
pub fn point_config(base: &Config, index: usize, beta_prime: f64) -> Config {
    let mut c = base.clone();
    c.loss.beta = None;
    c.loss.beta_prime = Some(beta_prime);
    c.seed = derive_seed(base.seed, index as u64);
    if let DatasetSource::Gmm { seed, .. } = &mut c.dataset.source {
        seed.get_or_insert(base.seed);
    }
    c
}

fn run_point(base: &Config, splits: &Splits, index: usize, beta_prime: f64) -> Result<SweepPoint> {
    let config = point_config(base, index, beta_prime);
    let run = train(&config, splits)?;
    let point = tradeoff_point(&run.network, &config, splits)?;
    Ok(SweepPoint {
        index,
        config,
        run,
        point,
    })
}

/// Trains one network per `beta_prime` on up to `jobs` threads. Results are
/// in input order and do not depend on `jobs`.
pub fn sweep(
    base: &Config,
    splits: &Splits,
    beta_primes: &[f64],
    jobs: usize,
) -> Result<Vec<SweepPoint>> {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    if beta_primes.is_empty() {
        return Err(Error::InvalidArgument(
            "sweep needs at least one beta_prime".into(),
        ));
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<SweepPoint>>>> =
        Mutex::new((0..beta_primes.len()).map(|_| None).collect());
    let workers = jobs.clamp(1, beta_primes.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= beta_primes.len() {
                    break;
                }
                let r = run_point(base, splits, i, beta_primes[i]);
                results.lock().expect("sweep results lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("sweep results lock")
        .into_iter()
        .map(|r| r.expect("every sweep point ran"))
        .collect()
}

/// Analytic-versus-numeric gradient check of the full batch loss on a 2-2-2
/// network with random parameters and frozen noise.
pub fn network_grad_check(
    variant: DecoderVariant,
    noise_mode: crate::data_io::NoiseModeKind,
    learn_sigma: bool,
    seed: u64,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let mut config = Config::reference_gmm(0.7);
    config.seed = seed;
    config.encoder.layer_dims = vec![2, 2, 2];
    config.encoder.noise_mode = noise_mode;
    config.decoder.variant = variant;
    let mut rng = rng_for(seed, 0);
    let mut network = Network::init(&config, vec![0.3, 0.7])?;
    let base = network.pack(learn_sigma)?;
    let mut store = base.clone();
    store.set_values((0..base.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    network = network.unpack(&store)?;

    let xs: Vec<Vec<f64>> = (0..4).map(|_| standard_normals(&mut rng, 2)).collect();
    let ys = vec![0, 1, 1, 0];
    let noise = draw_noise(&mut rng, 4, 2, 2);
    let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    grad_check(
        |tape: &mut Tape, params: &ParamStore| {
            Ok(network
                .tape_loss(tape, params, &refs, &ys, 0.7, &noise)?
                .total)
        },
        &store,
        eps,
        tol,
    )
}
