//! Training of the 5-way linear classification head on cached backbone
//! features with softmax cross-entropy, L2 weight decay and Adam.
//!
//! Everything here runs in f64: the head is tiny, and the finite-difference
//! and recurrence checks need the headroom. Training is single-threaded so
//! a `(seed, config)` pair always reproduces the same trajectory.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grade::{KLGrade, NUM_GRADES};
use crate::kernels;
use crate::model_io::{FormatError, ModelArtifact, ARCH_KEY};
use crate::tensor::{fmt_dims, Tensor, TensorError};

pub const FEATURES_ARCH: &str = "kl5-features";
pub const HEAD_ARCH: &str = "kl5-head";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite gradient in {param}[{index}] at step {step}; step aborted")]
    NonFiniteGradient {
        param: &'static str,
        index: usize,
        step: u64,
    },
    #[error("not a probability distribution: {0}")]
    InvalidDistribution(String),
    #[error("bad feature cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// `f = W x + b` with `W` of shape `5 x dim`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    dim: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl LinearHead {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            weight: vec![0.0; NUM_GRADES * dim],
            bias: vec![0.0; NUM_GRADES],
        }
    }

    /// Uniform `±0.01` initialisation from `seed`.
    pub fn seeded(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weight = (0..NUM_GRADES * dim)
            .map(|_| rng.gen_range(-0.01..0.01))
            .collect();
        let bias = (0..NUM_GRADES)
            .map(|_| rng.gen_range(-0.01..0.01))
            .collect();
        Self { dim, weight, bias }
    }

    pub fn from_parts(dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self, TrainError> {
        if weight.len() != NUM_GRADES * dim || bias.len() != NUM_GRADES {
            return Err(TrainError::Dimension(format!(
                "head needs {}x{dim} weights and {NUM_GRADES} biases, got {} and {}",
                NUM_GRADES,
                weight.len(),
                bias.len()
            )));
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(TrainError::Config("head parameters must be finite".into()));
        }
        Ok(Self { dim, weight, bias })
    }

    /// Reads `fc.weight` / `fc.bias` from an artifact (any dtype).
    pub fn from_artifact(art: &ModelArtifact) -> Result<Self, TrainError> {
        let get = |n: &str| {
            art.get(n)
                .ok_or_else(|| TrainError::Cache(format!("missing tensor '{n}'")))
                .map(Tensor::to_f32)
        };
        let (w, b) = (get("fc.weight")?, get("fc.bias")?);
        let dim = match w.dims() {
            &[NUM_GRADES, d] => d,
            other => {
                return Err(TrainError::Dimension(format!(
                    "fc.weight {}",
                    fmt_dims(other)
                )))
            }
        };
        let widen = |t: &Tensor| -> Result<Vec<f64>, TrainError> {
            Ok(t.as_f32()?.iter().map(|&v| v as f64).collect())
        };
        Self::from_parts(dim, widen(&w)?, widen(&b)?)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut [f64] {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn logits(&self, x: &[f32]) -> [f64; NUM_GRADES] {
        let mut z = [0.0; NUM_GRADES];
        for (c, zc) in z.iter_mut().enumerate() {
            let row = &self.weight[c * self.dim..(c + 1) * self.dim];
            *zc = self.bias[c] + row.iter().zip(x).map(|(w, &v)| w * v as f64).sum::<f64>();
        }
        z
    }

    pub fn predict(&self, x: &[f32]) -> KLGrade {
        let z = self.logits(x);
        KLGrade::from_index(kernels::argmax(&z).expect("5 logits")).expect("index < 5")
    }

    /// `fc.weight` `[5, dim]` and `fc.bias` `[5]` as float32 tensors.
    pub fn to_tensors(&self) -> (Tensor, Tensor) {
        let w = self.weight.iter().map(|&v| v as f32).collect();
        let b = self.bias.iter().map(|&v| v as f32).collect();
        (
            Tensor::from_f32(&[NUM_GRADES, self.dim], w).expect("head dims"),
            Tensor::from_f32(&[NUM_GRADES], b).expect("head dims"),
        )
    }

    /// Standalone artifact holding only the head.
    pub fn to_artifact(&self) -> ModelArtifact {
        let mut art = ModelArtifact::new();
        art.set_meta(ARCH_KEY, HEAD_ARCH);
        let (w, b) = self.to_tensors();
        art.upsert("fc.weight", w);
        art.upsert("fc.bias", b);
        art
    }

    /// Replaces the head inside a full model artifact.
    pub fn install_into(&self, model: &mut ModelArtifact) {
        let (w, b) = self.to_tensors();
        model.upsert("fc.weight", w);
        model.upsert("fc.bias", b);
    }
}

/// Where Adam's epsilon enters the denominator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EpsilonPlacement {
    /// `sqrt(v_hat) + eps`
    #[default]
    OutsideSqrt,
    /// `sqrt(v_hat + eps)`
    InsideSqrt,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub epsilon_placement: EpsilonPlacement,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 25,
            batch_size: 32,
            seed: 42,
            epsilon_placement: EpsilonPlacement::OutsideSqrt,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        // A zero rate is allowed: it freezes the head, which is handy for
        // measuring a baseline.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and >= 0");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        Ok(())
    }
}

/// First/second moment accumulators shaped like the head.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m_weight: Vec<f64>,
    pub m_bias: Vec<f64>,
    pub v_weight: Vec<f64>,
    pub v_bias: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(head: &LinearHead) -> Self {
        Self {
            m_weight: vec![0.0; head.weight.len()],
            m_bias: vec![0.0; head.bias.len()],
            v_weight: vec![0.0; head.weight.len()],
            v_bias: vec![0.0; head.bias.len()],
            t: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadGradients {
    pub d_weight: Vec<f64>,
    pub d_bias: Vec<f64>,
    /// Mean cross-entropy over the batch, without the decay penalty.
    pub loss: f64,
    /// Samples whose argmax matched the label, before the update.
    pub correct: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub batch_losses: Vec<f64>,
}

/// Features `[n, dim]` with one grade per row.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    dim: usize,
    features: Vec<f32>,
    labels: Vec<KLGrade>,
}

impl FeatureSet {
    pub fn new(dim: usize, features: Vec<f32>, labels: Vec<KLGrade>) -> Result<Self, TrainError> {
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(TrainError::Dimension(format!(
                "{} feature values for {} labels at dim {dim}",
                features.len(),
                labels.len()
            )));
        }
        Ok(Self {
            dim,
            features,
            labels,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> &[KLGrade] {
        &self.labels
    }

    /// Cache artifact with `features` `[N, dim]` and `labels` `[N]` (f32).
    pub fn to_artifact(&self) -> Result<ModelArtifact, TrainError> {
        let mut art = ModelArtifact::new();
        art.set_meta(ARCH_KEY, FEATURES_ARCH);
        art.insert(
            "features",
            Tensor::from_f32(&[self.len().max(1), self.dim], self.features.clone())
                .map_err(|_| TrainError::EmptyDataset)?,
        )?;
        let labels = self.labels.iter().map(|g| g.value() as f32).collect();
        art.insert(
            "labels",
            Tensor::from_f32(&[self.len()], labels).map_err(|_| TrainError::EmptyDataset)?,
        )?;
        Ok(art)
    }

    pub fn from_artifact(art: &ModelArtifact) -> Result<Self, TrainError> {
        let f = art
            .get("features")
            .ok_or_else(|| TrainError::Cache("missing tensor 'features'".into()))?
            .to_f32();
        let l = art
            .get("labels")
            .ok_or_else(|| TrainError::Cache("missing tensor 'labels'".into()))?
            .to_f32();
        let (n, dim) = match f.dims() {
            &[n, d] => (n, d),
            other => {
                return Err(TrainError::Cache(format!(
                    "features has shape {}",
                    fmt_dims(other)
                )))
            }
        };
        if l.dims() != [n] {
            return Err(TrainError::Cache(format!(
                "labels has shape {}, expected [{n}]",
                fmt_dims(l.dims())
            )));
        }
        let labels = l
            .as_f32()?
            .iter()
            .map(|&v| {
                if v.fract() != 0.0 || !(0.0..5.0).contains(&v) {
                    return Err(TrainError::Cache(format!("label {v} is not a KL grade")));
                }
                Ok(KLGrade::new(v as u8).expect("checked range"))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(dim, f.into_f32_vec()?, labels)
    }
}

/// Result of [`cross_entropy`]; `clamped` marks a zero probability on the
/// true class that was floored at the smallest positive normal f64.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    pub clamped: bool,
}

/// `-ln p[true]` for a probability vector.
pub fn cross_entropy(probabilities: &[f64], truth: KLGrade) -> Result<CrossEntropy, TrainError> {
    if probabilities.len() != NUM_GRADES {
        return Err(TrainError::Dimension(format!(
            "expected {NUM_GRADES} probabilities, got {}",
            probabilities.len()
        )));
    }
    if probabilities.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(TrainError::InvalidDistribution(
            "entries must be finite and >= 0".into(),
        ));
    }
    let sum: f64 = probabilities.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(TrainError::InvalidDistribution(format!("sums to {sum}")));
    }
    let p = probabilities[truth.index()];
    if p <= 0.0 {
        log::warn!("cross_entropy: p[{truth}] = 0, clamped to f64::MIN_POSITIVE");
        return Ok(CrossEntropy {
            loss: -f64::MIN_POSITIVE.ln(),
            clamped: true,
        });
    }
    Ok(CrossEntropy {
        loss: (-p.ln()).max(0.0),
        clamped: false,
    })
}

/// `logsumexp(z) - z[true]`, the stable form used during training.
pub fn cross_entropy_from_logits(logits: &[f64], truth: KLGrade) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    (lse - logits[truth.index()]).max(0.0)
}

fn gradients_over<'a>(
    rows: impl ExactSizeIterator<Item = (&'a [f32], KLGrade)>,
    head: &LinearHead,
    weight_decay: f64,
) -> HeadGradients {
    let batch = rows.len() as f64;
    let d = head.dim;
    let mut d_weight = vec![0.0; head.weight.len()];
    let mut d_bias = vec![0.0; NUM_GRADES];
    let mut loss = 0.0;
    let mut correct = 0;
    for (x, y) in rows {
        let z = head.logits(x);
        loss += cross_entropy_from_logits(&z, y);
        if kernels::argmax(&z) == Some(y.index()) {
            correct += 1;
        }
        let p = kernels::softmax(&z).expect("finite logits");
        for c in 0..NUM_GRADES {
            let delta = p[c] - if c == y.index() { 1.0 } else { 0.0 };
            d_bias[c] += delta;
            let row = &mut d_weight[c * d..(c + 1) * d];
            for (g, &v) in row.iter_mut().zip(x) {
                *g += delta * v as f64;
            }
        }
    }
    for (g, w) in d_weight.iter_mut().zip(&head.weight) {
        *g = *g / batch + weight_decay * w;
    }
    for g in &mut d_bias {
        *g /= batch;
    }
    HeadGradients {
        d_weight,
        d_bias,
        loss: loss / batch,
        correct,
    }
}

/// Closed-form gradients of mean softmax cross-entropy plus `λ/2 ||W||²`:
/// `dW = (P - Y)ᵀX / B + λW`, `db = colsum(P - Y) / B`.
pub fn head_gradients(
    features: &Tensor,
    labels: &[KLGrade],
    head: &LinearHead,
    weight_decay: f64,
) -> Result<HeadGradients, TrainError> {
    let (b, d) = match features.dims() {
        &[b, d] => (b, d),
        other => {
            return Err(TrainError::Dimension(format!(
                "features {}",
                fmt_dims(other)
            )))
        }
    };
    if d != head.dim || labels.len() != b {
        return Err(TrainError::Dimension(format!(
            "features [{b},{d}] vs head dim {} and {} labels",
            head.dim,
            labels.len()
        )));
    }
    let x = features.as_f32()?;
    Ok(gradients_over(
        x.chunks(d).zip(labels.iter().copied()),
        head,
        weight_decay,
    ))
}

fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &TrainConfig,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        let denom = match cfg.epsilon_placement {
            EpsilonPlacement::OutsideSqrt => v_hat.sqrt() + cfg.epsilon,
            EpsilonPlacement::InsideSqrt => (v_hat + cfg.epsilon).sqrt(),
        };
        params[i] -= cfg.learning_rate * m_hat / denom;
    }
}

/// One bias-corrected Adam step over `(W, b)`. Non-finite gradients leave
/// head and state untouched.
pub fn adam_step(
    head: &mut LinearHead,
    d_weight: &[f64],
    d_bias: &[f64],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    if d_weight.len() != head.weight.len() || d_bias.len() != head.bias.len() {
        return Err(TrainError::Dimension(
            "gradient shape does not match head".into(),
        ));
    }
    for (param, g) in [("weight", d_weight), ("bias", d_bias)] {
        if let Some(index) = g.iter().position(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient {
                param,
                index,
                step: state.t + 1,
            });
        }
    }
    state.t += 1;
    adam_update(
        &mut head.weight,
        d_weight,
        &mut state.m_weight,
        &mut state.v_weight,
        state.t,
        cfg,
    );
    adam_update(
        &mut head.bias,
        d_bias,
        &mut state.m_bias,
        &mut state.v_bias,
        state.t,
        cfg,
    );
    Ok(())
}

pub fn accuracy(head: &LinearHead, data: &FeatureSet) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let hits = (0..data.len())
        .filter(|&i| head.predict(data.row(i)) == data.labels[i])
        .count();
    hits as f64 / data.len() as f64
}

/// Trains from the seeded `±0.01` head. See [`fit_from`].
pub fn fit(
    train: &FeatureSet,
    test: Option<&FeatureSet>,
    cfg: &TrainConfig,
) -> Result<(LinearHead, Vec<EpochLog>), TrainError> {
    fit_from(LinearHead::seeded(train.dim(), cfg.seed), train, test, cfg)
}

/// Runs `cfg.epochs` epochs of shuffled mini-batches. Training accuracy is
/// measured on each batch before its update; the epoch loss is the mean of
/// the batch losses.
pub fn fit_from(
    mut head: LinearHead,
    train: &FeatureSet,
    test: Option<&FeatureSet>,
    cfg: &TrainConfig,
) -> Result<(LinearHead, Vec<EpochLog>), TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if train.dim() != head.dim || test.is_some_and(|t| t.dim() != head.dim) {
        return Err(TrainError::Dimension(
            "feature dim does not match head".into(),
        ));
    }
    let mut state = AdamState::new(&head);
    // Separate stream from head init so changing epochs never perturbs it.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_BA7C_4E5_u64);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut batch_losses = Vec::new();
        let mut correct = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let rows = chunk.iter().map(|&i| (train.row(i), train.labels[i]));
            let g = gradients_over(rows, &head, cfg.weight_decay);
            adam_step(&mut head, &g.d_weight, &g.d_bias, &mut state, cfg)?;
            batch_losses.push(g.loss);
            correct += g.correct;
        }
        let loss = batch_losses.iter().sum::<f64>() / batch_losses.len() as f64;
        let log = EpochLog {
            epoch,
            loss,
            train_accuracy: correct as f64 / train.len() as f64,
            test_accuracy: test.map(|t| accuracy(&head, t)),
            batch_losses,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} train_acc {:.4}{}",
            log.loss,
            log.train_accuracy,
            log.test_accuracy
                .map(|a| format!(" test_acc {a:.4}"))
                .unwrap_or_default()
        );
        logs.push(log);
    }
    Ok((head, logs))
}

/// `epoch,loss,train_acc,test_acc` with an empty last field when no test set.
pub fn epoch_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from("epoch,loss,train_acc,test_acc\n");
    for l in logs {
        let test = l
            .test_accuracy
            .map(|a| format!("{a:.6}"))
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{:.9},{:.6},{}",
            l.epoch, l.loss, l.train_accuracy, test
        );
    }
    out
}
