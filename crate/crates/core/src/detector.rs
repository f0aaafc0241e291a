//! MINT detectors: a vanilla MLP over pooled activation vectors and/or the
//! outcome embedding, and a CNN over full activation blocks.

use std::collections::BTreeSet;
use std::path::Path;

use mint_tensor::{Adam, BatchNormStats, Conv2dSpec, Mode, Parameter, Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::aad::{pool, AadStore, Pooling, StageId};
use crate::container::Container;
use crate::dataset::{BalancedBatches, Membership, SampleId, SplitSpec};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 8] = b"MINTMDL1";
/// Sigmoid scores at or above this are predicted as members.
pub const DECISION_THRESHOLD: f64 = 0.5;
const PREDICT_BATCH: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VanillaMintConfig {
    /// Concatenated in this order.
    pub sources: Vec<StageId>,
    pub hidden: usize,
    pub l1: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Reduction used to turn stage blocks into vectors.
    pub pooling: Pooling,
}

impl Default for VanillaMintConfig {
    fn default() -> Self {
        VanillaMintConfig {
            sources: vec![StageId::Stage(1)],
            hidden: 128,
            l1: 0.1,
            dropout: 0.5,
            epochs: 20,
            batch: 128,
            lr: 0.001,
            pooling: Pooling::Max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnMintConfig {
    pub stage: u8,
    pub filters: usize,
    pub kernel: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub width_multiplier: f64,
}

impl Default for CnnMintConfig {
    fn default() -> Self {
        CnnMintConfig {
            stage: 1,
            filters: 64,
            kernel: 5,
            dropout: 0.5,
            epochs: 30,
            batch: 128,
            lr: 0.001,
            width_multiplier: 1.0,
        }
    }
}

impl CnnMintConfig {
    /// Largest kernel not above the configured one that leaves at least a
    /// 2×2 map for the pooling layer on an `h×w` input.
    pub fn fitted_kernel(&self, h: usize, w: usize) -> usize {
        self.kernel.min(h.saturating_sub(1)).min(w.saturating_sub(1)).max(1)
    }

    /// FC width: `C · width_multiplier`, rounded, at least 1.
    pub fn fc_width(&self, channels: usize) -> usize {
        ((channels as f64 * self.width_multiplier).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DetectorConfig {
    Vanilla(VanillaMintConfig),
    Cnn(CnnMintConfig),
}

impl DetectorConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            DetectorConfig::Vanilla(_) => "vanilla",
            DetectorConfig::Cnn(_) => "cnn",
        }
    }

    pub fn epochs(&self) -> usize {
        match self {
            DetectorConfig::Vanilla(c) => c.epochs,
            DetectorConfig::Cnn(c) => c.epochs,
        }
    }

    fn train_settings(&self) -> (usize, f64, usize) {
        match self {
            DetectorConfig::Vanilla(c) => (c.batch, c.lr, c.epochs),
            DetectorConfig::Cnn(c) => (c.batch, c.lr, c.epochs),
        }
    }

    /// Stages whose records the detector reads.
    pub fn stages(&self) -> Vec<StageId> {
        match self {
            DetectorConfig::Vanilla(c) => c.sources.clone(),
            DetectorConfig::Cnn(c) => vec![StageId::Stage(c.stage)],
        }
    }
}

/// What the detector consumes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputSpec {
    /// Vector length per source, in concatenation order.
    Vectors(Vec<(StageId, usize)>),
    /// `H×W×C` block of one stage.
    Block([usize; 3]),
}

impl InputSpec {
    pub fn dim(&self) -> usize {
        match self {
            InputSpec::Vectors(v) => v.iter().map(|(_, d)| d).sum(),
            InputSpec::Block(s) => s.iter().product(),
        }
    }
}

/// A layer in a detector, for structural introspection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Dense { inputs: usize, outputs: usize },
    Conv { kernel: usize, in_channels: usize, filters: usize },
    MaxPool { window: usize, stride: usize },
    Flatten,
    Relu,
    BatchNorm { features: usize },
    Dropout { rate_millis: u32 },
    Sigmoid,
}

#[derive(Debug, Clone)]
pub struct MintModel {
    pub config: DetectorConfig,
    pub input: InputSpec,
    pub params: Vec<Parameter<f32>>,
    /// Running statistics of the vanilla batch-norm layer.
    pub bn: Option<BatchNormStats<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    /// Eval-mode loss on the training set before the first update.
    pub initial: f64,
    /// Mean training loss of each epoch.
    pub epochs: Vec<f64>,
    /// Eval-mode loss on the training set after training.
    pub final_loss: f64,
}

impl LossCurve {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::format("loss curve", format!("line {}", e.line()), e.to_string()))
    }
}

fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let u = Uniform::new_inclusive(-limit, limit);
    Tensor::from_fn(shape, |_| u.sample(rng) as f32)
}

/// Vanilla detector over the vectors of `config.sources`; `input_dims` gives
/// each source's vector length.
pub fn build_vanilla(config: VanillaMintConfig, input_dims: &[usize], seed: u64) -> Result<MintModel> {
    if config.sources.is_empty() {
        return Err(Error::Config("vanilla detector needs at least one input source".into()));
    }
    if input_dims.len() != config.sources.len() || input_dims.contains(&0) {
        return Err(Error::Config(format!(
            "{} input dims given for {} sources",
            input_dims.len(),
            config.sources.len()
        )));
    }
    let unique: BTreeSet<_> = config.sources.iter().collect();
    if unique.len() != config.sources.len() {
        return Err(Error::Config("duplicate vanilla input source".into()));
    }
    if config.hidden == 0 || !(0.0..1.0).contains(&config.dropout) || config.l1 < 0.0 {
        return Err(Error::Config(format!("invalid vanilla hyperparameters {config:?}")));
    }
    let d: usize = input_dims.iter().sum();
    let h = config.hidden;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = vec![
        Parameter::new("hidden.weight", glorot_uniform(&[d, h], d, h, &mut rng)),
        Parameter::new("hidden.bias", Tensor::zeros(&[h])),
        Parameter::new("bn.gamma", Tensor::full(&[h], 1.0)),
        Parameter::new("bn.beta", Tensor::zeros(&[h])),
        Parameter::new("out.weight", glorot_uniform(&[h, 1], h, 1, &mut rng)),
        Parameter::new("out.bias", Tensor::zeros(&[1])),
    ];
    let input = InputSpec::Vectors(config.sources.iter().copied().zip(input_dims.iter().copied()).collect());
    Ok(MintModel {
        config: DetectorConfig::Vanilla(config),
        input,
        params,
        bn: Some(BatchNormStats::new(h)),
    })
}

/// CNN detector over one stage's `H×W×C` blocks.
pub fn build_cnn(config: CnnMintConfig, stage_shape: [usize; 3], seed: u64) -> Result<MintModel> {
    let [h, w, c] = stage_shape;
    if config.filters == 0 || config.kernel == 0 || c == 0 {
        return Err(Error::Config(format!("invalid cnn configuration {config:?} for {stage_shape:?}")));
    }
    if config.kernel > h || config.kernel > w || h - config.kernel + 1 < 2 || w - config.kernel + 1 < 2 {
        return Err(Error::Config(format!(
            "kernel {} too large for {h}×{w} activations (needs ≥2×2 before pooling)",
            config.kernel
        )));
    }
    if !(0.0..1.0).contains(&config.dropout) || config.width_multiplier <= 0.0 {
        return Err(Error::Config(format!("invalid cnn hyperparameters {config:?}")));
    }
    let k = config.kernel;
    let f = config.filters;
    let (ph, pw) = ((h - k + 1) / 2, (w - k + 1) / 2);
    let flat = ph * pw * f;
    let fc = config.fc_width(c);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = vec![
        Parameter::new("conv.kernel", glorot_uniform(&[k, k, c, f], k * k * c, k * k * f, &mut rng)),
        Parameter::new("conv.bias", Tensor::zeros(&[f])),
        Parameter::new("fc.weight", glorot_uniform(&[flat, fc], flat, fc, &mut rng)),
        Parameter::new("fc.bias", Tensor::zeros(&[fc])),
        Parameter::new("out.weight", glorot_uniform(&[fc, 1], fc, 1, &mut rng)),
        Parameter::new("out.bias", Tensor::zeros(&[1])),
    ];
    Ok(MintModel {
        config: DetectorConfig::Cnn(config),
        input: InputSpec::Block(stage_shape),
        params,
        bn: None,
    })
}

/// Vanilla graph: dense → ReLU → batch-norm → dropout → dense(1) → sigmoid.
/// Returns `(probabilities N×1, hidden weight var)`.
pub fn vanilla_graph<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    params: &[Var],
    x: Var,
    stats: &mut BatchNormStats<T>,
    dropout: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    let h = tape.dense(x, params[0], params[1])?;
    let h = tape.relu(h)?;
    let h = tape.batchnorm1d(h, params[2], params[3], stats, mode)?;
    let h = tape.dropout(h, dropout, mode, rng)?;
    let o = tape.dense(h, params[4], params[5])?;
    Ok(tape.sigmoid(o)?)
}

/// CNN graph: conv → ReLU → maxpool(2, 2) → flatten → dense → ReLU → dropout → dense(1) → sigmoid.
pub fn cnn_graph<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    params: &[Var],
    x: Var,
    dropout: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    let c = tape.conv2d(x, params[0], params[1], Conv2dSpec::default())?;
    let c = tape.relu(c)?;
    let p = tape.maxpool2d(c, 2, 2)?;
    let f = tape.flatten(p)?;
    let h = tape.dense(f, params[2], params[3])?;
    let h = tape.relu(h)?;
    let h = tape.dropout(h, dropout, mode, rng)?;
    let o = tape.dense(h, params[4], params[5])?;
    Ok(tape.sigmoid(o)?)
}

/// Full training objective: mean BCE plus the L1 term on the vanilla hidden weights.
pub fn loss_graph<T: Scalar, R: Rng + ?Sized>(
    config: &DetectorConfig,
    tape: &mut Tape<T>,
    params: &[Var],
    x: Var,
    targets: &[T],
    stats: Option<&mut BatchNormStats<T>>,
    mode: Mode,
    rng: &mut R,
) -> Result<(Var, Var)> {
    match config {
        DetectorConfig::Vanilla(c) => {
            let stats = stats.ok_or_else(|| Error::Config("vanilla detector without batch-norm statistics".into()))?;
            let p = vanilla_graph(tape, params, x, stats, c.dropout, mode, rng)?;
            let bce = tape.bce_loss(p, targets)?;
            let loss = if c.l1 > 0.0 {
                let l1 = tape.l1_penalty(params[0], c.l1)?;
                tape.add(bce, l1)?
            } else {
                bce
            };
            Ok((loss, p))
        }
        DetectorConfig::Cnn(c) => {
            let p = cnn_graph(tape, params, x, c.dropout, mode, rng)?;
            Ok((tape.bce_loss(p, targets)?, p))
        }
    }
}

/// Random inputs for this detector (used by gradient checks and tests).
pub fn random_features(input: &InputSpec, n: usize, rng: &mut impl Rng) -> Tensor<f32> {
    let mut shape = vec![n];
    match input {
        InputSpec::Vectors(_) => shape.push(input.dim()),
        InputSpec::Block(s) => shape.extend_from_slice(s),
    }
    Tensor::from_fn(&shape, |_| rng.gen_range(0.0..1.0))
}

impl MintModel {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn kind(&self) -> &'static str {
        self.config.kind()
    }

    /// Layer sequence in execution order.
    pub fn layers(&self) -> Vec<Layer> {
        let millis = |r: f64| (r * 1000.0).round() as u32;
        match (&self.config, &self.input) {
            (DetectorConfig::Vanilla(c), _) => vec![
                Layer::Dense { inputs: self.input.dim(), outputs: c.hidden },
                Layer::Relu,
                Layer::BatchNorm { features: c.hidden },
                Layer::Dropout { rate_millis: millis(c.dropout) },
                Layer::Dense { inputs: c.hidden, outputs: 1 },
                Layer::Sigmoid,
            ],
            (DetectorConfig::Cnn(c), InputSpec::Block([_, _, ch])) => {
                let fc = self.params[2].shape();
                vec![
                    Layer::Conv { kernel: c.kernel, in_channels: *ch, filters: c.filters },
                    Layer::Relu,
                    Layer::MaxPool { window: 2, stride: 2 },
                    Layer::Flatten,
                    Layer::Dense { inputs: fc[0], outputs: fc[1] },
                    Layer::Relu,
                    Layer::Dropout { rate_millis: millis(c.dropout) },
                    Layer::Dense { inputs: fc[1], outputs: 1 },
                    Layer::Sigmoid,
                ]
            }
            (DetectorConfig::Cnn(_), InputSpec::Vectors(_)) => unreachable!("cnn detector over vectors"),
        }
    }

    /// Batch feature tensor for `ids` from `store`.
    pub fn features(&self, store: &AadStore, ids: &[SampleId]) -> Result<Tensor<f32>> {
        let mut missing = Vec::new();
        let mut data = Vec::with_capacity(ids.len() * self.input.dim());
        for &id in ids {
            match &self.input {
                InputSpec::Vectors(sources) => {
                    let pooling = match &self.config {
                        DetectorConfig::Vanilla(c) => c.pooling,
                        DetectorConfig::Cnn(_) => Pooling::Max,
                    };
                    for &(stage, dim) in sources {
                        let Some(rec) = store.get(stage, id) else {
                            missing.push(id);
                            break;
                        };
                        let v = match (stage, pooling, &rec.block) {
                            (StageId::Stage(_), Pooling::Mean, Some(b)) => pool(b, Pooling::Mean)?.into_data(),
                            (StageId::Stage(_), Pooling::Mean, None) => {
                                return Err(Error::Config(format!("mean pooling of {stage} needs stored blocks")))
                            }
                            _ => rec.vector.clone(),
                        };
                        if v.len() != dim {
                            return Err(Error::Config(format!(
                                "{stage} vectors have length {}, detector expects {dim}",
                                v.len()
                            )));
                        }
                        data.extend_from_slice(&v);
                    }
                }
                InputSpec::Block(shape) => {
                    let DetectorConfig::Cnn(c) = &self.config else { unreachable!() };
                    let stage = StageId::Stage(c.stage);
                    match store.get(stage, id) {
                        None => missing.push(id),
                        Some(rec) => match &rec.block {
                            Some(b) if b.shape() == shape => data.extend_from_slice(b.data()),
                            Some(b) => {
                                return Err(Error::Config(format!(
                                    "{stage} blocks are {:?}, detector expects {shape:?}",
                                    b.shape()
                                )))
                            }
                            None => return Err(Error::Config(format!("store holds no {stage} blocks for the cnn detector"))),
                        },
                    }
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::Coverage { missing });
        }
        let mut shape = vec![ids.len()];
        match &self.input {
            InputSpec::Vectors(_) => shape.push(self.input.dim()),
            InputSpec::Block(s) => shape.extend_from_slice(s),
        }
        Ok(Tensor::new(&shape, data)?)
    }

    fn check_features(&self, x: &Tensor<f32>) -> Result<()> {
        let ok = match &self.input {
            InputSpec::Vectors(_) => x.rank() == 2 && x.shape()[1] == self.input.dim(),
            InputSpec::Block(s) => x.rank() == 4 && x.shape()[1..] == s[..],
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("features {:?} do not match detector input {:?}", x.shape(), self.input)))
        }
    }

    /// Eval-mode membership scores for a feature batch.
    pub fn predict_features(&self, x: &Tensor<f32>) -> Result<Vec<f64>> {
        self.check_features(x)?;
        let mut out = Vec::with_capacity(x.rows());
        for start in (0..x.rows()).step_by(PREDICT_BATCH) {
            let rows: Vec<usize> = (start..(start + PREDICT_BATCH).min(x.rows())).collect();
            let mut tape = Tape::new();
            let vars: Vec<Var> = self.params.iter().map(|p| tape.constant(p.value.clone())).collect();
            let xv = tape.constant(x.select_rows(&rows));
            let mut stats = self.bn.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let p = match &self.config {
                DetectorConfig::Vanilla(c) => {
                    vanilla_graph(&mut tape, &vars, xv, stats.as_mut().unwrap(), c.dropout, Mode::Eval, &mut rng)?
                }
                DetectorConfig::Cnn(c) => cnn_graph(&mut tape, &vars, xv, c.dropout, Mode::Eval, &mut rng)?,
            };
            out.extend(tape.value(p).data().iter().map(|&v| v as f64));
        }
        Ok(out)
    }

    /// Eval-mode loss (mean BCE plus L1) over a feature batch.
    pub fn eval_loss(&self, x: &Tensor<f32>, targets: &[f32]) -> Result<f64> {
        let scores = self.predict_features(x)?;
        let eps = mint_tensor::BCE_CLAMP;
        let bce: f64 = scores
            .iter()
            .zip(targets)
            .map(|(&p, &t)| {
                let p = p.clamp(eps, 1.0 - eps);
                -(t as f64 * p.ln() + (1.0 - t as f64) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / scores.len() as f64;
        let l1 = match &self.config {
            DetectorConfig::Vanilla(c) if c.l1 > 0.0 => {
                c.l1 * self.params[0].value.data().iter().map(|v| v.abs() as f64).sum::<f64>()
            }
            _ => 0.0,
        };
        Ok(bce + l1)
    }

    pub fn to_container(&self) -> Container {
        #[derive(Serialize)]
        struct Meta<'a> {
            detector: &'a DetectorConfig,
            input: &'a InputSpec,
        }
        let config = serde_json::to_string(&Meta {
            detector: &self.config,
            input: &self.input,
        })
        .expect("config serialises");
        let mut tensors: Vec<(String, Tensor<f32>)> =
            self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        if let Some(bn) = &self.bn {
            let n = bn.mean.len();
            tensors.push(("bn.running_mean".into(), Tensor::new(&[n], bn.mean.clone()).expect("bn dims")));
            tensors.push(("bn.running_var".into(), Tensor::new(&[n], bn.var.clone()).expect("bn dims")));
        }
        Container { config, tensors }
    }

    pub fn save(&self, path: &Path) -> Result<[u8; 32]> {
        self.to_container().write(MODEL_MAGIC, path)
    }

    pub fn load(path: &Path) -> Result<(Self, [u8; 32])> {
        #[derive(Deserialize)]
        struct Meta {
            detector: DetectorConfig,
            input: InputSpec,
        }
        let (mut c, hash) = Container::read("mint checkpoint", MODEL_MAGIC, path)?;
        let meta: Meta = serde_json::from_str(&c.config)
            .map_err(|e| Error::format("mint checkpoint", "config", e.to_string()))?;
        let mut model = match (&meta.detector, &meta.input) {
            (DetectorConfig::Vanilla(v), InputSpec::Vectors(dims)) => {
                let d: Vec<usize> = dims.iter().map(|(_, d)| *d).collect();
                build_vanilla(v.clone(), &d, 0)?
            }
            (DetectorConfig::Cnn(cc), InputSpec::Block(shape)) => build_cnn(cc.clone(), *shape, 0)?,
            _ => return Err(Error::format("mint checkpoint", "config", "detector kind does not match input")),
        };
        for p in &mut model.params {
            p.value = c.take(&p.name, &p.value.shape().to_vec())?;
        }
        if let Some(bn) = &mut model.bn {
            let dims = [bn.mean.len()];
            bn.mean = c.take("bn.running_mean", &dims)?.into_data();
            bn.var = c.take("bn.running_var", &dims)?.into_data();
        }
        if let Some((name, _)) = c.tensors.first() {
            return Err(Error::format("mint checkpoint", "parameters", format!("unexpected parameter `{name}`")));
        }
        Ok((model, hash))
    }
}

fn check_memberships(store: &AadStore, model: &MintModel, pairs: &[(SampleId, Membership)]) -> Result<()> {
    let stages = model.config.stages();
    for &(id, m) in pairs {
        for &s in &stages {
            if let Some(r) = store.get(s, id) {
                if r.membership != m {
                    return Err(Error::Label(format!(
                        "sample {id}: store labels {:?}, split says {m:?}",
                        r.membership
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Check the store covers every split id for the detector's stages.
pub fn check_coverage(store: &AadStore, stages: &[StageId], split: &SplitSpec) -> Result<()> {
    let missing: BTreeSet<SampleId> = split
        .all_ids()
        .filter(|&id| stages.iter().any(|&s| store.get(s, id).is_none()))
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Coverage { missing: missing.into_iter().collect() })
    }
}

/// Train on the split's balanced MINT-train side. Uses BCE (+L1 for the
/// vanilla detector) and Adam; dropout and batch-norm run in train mode.
pub fn train_mint(model: &mut MintModel, store: &AadStore, split: &SplitSpec, seed: u64) -> Result<LossCurve> {
    check_coverage(store, &model.config.stages(), split)?;
    let train: Vec<(SampleId, Membership)> = split.train().collect();
    check_memberships(store, model, &train)?;
    let (batch, lr, epochs) = model.config.train_settings();
    let batches = BalancedBatches::new(split, batch, seed)?;
    if batches.batches_per_epoch() == 0 && epochs > 0 {
        return Err(Error::Capacity(format!(
            "MINT-train side too small for one balanced batch of {batch}"
        )));
    }
    let adam = Adam::with_lr(lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5EED));

    let eval_loss = |model: &MintModel| -> Result<f64> {
        let mut total = 0.0;
        for chunk in train.chunks(PREDICT_BATCH * 4) {
            let ids: Vec<SampleId> = chunk.iter().map(|(i, _)| *i).collect();
            let t: Vec<f32> = chunk.iter().map(|(_, m)| m.label()).collect();
            total += model.eval_loss(&model.features(store, &ids)?, &t)? * chunk.len() as f64;
        }
        Ok(total / train.len().max(1) as f64)
    };
    let initial = eval_loss(model)?;
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut sum = 0.0;
        let mut count = 0usize;
        for b in batches.epoch(epoch) {
            let ids: Vec<SampleId> = b.iter().map(|(i, _)| *i).collect();
            let targets: Vec<f32> = b.iter().map(|(_, m)| m.label()).collect();
            let x = model.features(store, &ids)?;
            let mut tape = Tape::new();
            let vars: Vec<Var> = model.params.iter().map(|p| tape.param(p)).collect();
            let xv = tape.constant(x);
            let (loss, _) = loss_graph(&model.config, &mut tape, &vars, xv, &targets, model.bn.as_mut(), Mode::Train, &mut rng)?;
            sum += tape.value(loss).data()[0] as f64 * ids.len() as f64;
            count += ids.len();
            let grads = tape.backward(loss)?;
            for (v, p) in vars.iter().zip(model.params.iter_mut()) {
                grads.accumulate_into(*v, p)?;
            }
            adam.step(model.params.iter_mut())?;
        }
        curve.push(sum / count.max(1) as f64);
    }
    let final_loss = eval_loss(model)?;
    Ok(LossCurve {
        initial,
        epochs: curve,
        final_loss,
    })
}

/// Eval-mode scores for `ids`, in order.
pub fn predict_membership(model: &MintModel, store: &AadStore, ids: &[SampleId]) -> Result<Vec<f64>> {
    for s in model.config.stages() {
        if !store.stages().contains(&s) {
            return Err(Error::Config(format!("store has no {s} records for this detector")));
        }
    }
    let mut scores = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(PREDICT_BATCH * 4) {
        scores.extend(model.predict_features(&model.features(store, chunk)?)?);
    }
    Ok(scores)
}

/// Vanilla detector restricted to the outcome embedding, trained like any other.
pub fn outcome_only_baseline(
    store: &AadStore,
    split: &SplitSpec,
    base: &VanillaMintConfig,
    seed: u64,
) -> Result<(MintModel, LossCurve)> {
    let dim = store
        .vector_dim(StageId::Outcome)
        .ok_or_else(|| Error::Config("store holds no outcome records".into()))?;
    let config = VanillaMintConfig {
        sources: vec![StageId::Outcome],
        ..base.clone()
    };
    let mut model = build_vanilla(config, &[dim], seed)?;
    let curve = train_mint(&mut model, store, split, seed)?;
    Ok((model, curve))
}

/// Build the detector described by `config` with input dimensions read from `store`.
pub fn build_for_store(config: &DetectorConfig, store: &AadStore, seed: u64) -> Result<MintModel> {
    match config {
        DetectorConfig::Vanilla(c) => {
            let dims = c
                .sources
                .iter()
                .map(|&s| store.vector_dim(s).ok_or_else(|| Error::Config(format!("store has no {s} records"))))
                .collect::<Result<Vec<_>>>()?;
            build_vanilla(c.clone(), &dims, seed)
        }
        DetectorConfig::Cnn(c) => {
            let stage = StageId::Stage(c.stage);
            let shape = store
                .block_shape(stage)
                .ok_or_else(|| Error::Config(format!("store has no {stage} blocks")))?;
            build_cnn(c.clone(), shape, seed)
        }
    }
}
