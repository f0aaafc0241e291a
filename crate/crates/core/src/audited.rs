//! The model under audit: a staged convolutional classifier with one tap
//! point per stage and an embedding head.

use std::path::Path;

use mint_tensor::{Adam, Conv2dSpec, Parameter, Scalar, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::dataset::{preprocess_batch, RawImage, Source};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MINTCKP1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub blocks: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditedModelConfig {
    pub stages: Vec<StageConfig>,
    pub kernel: usize,
    /// Additive skip around every block after the first of a stage.
    pub skip_connections: bool,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub resolution: usize,
}

impl Default for AuditedModelConfig {
    fn default() -> Self {
        AuditedModelConfig {
            stages: [16, 32, 64, 128]
                .into_iter()
                .map(|channels| StageConfig { blocks: 1, channels })
                .collect(),
            kernel: 3,
            skip_connections: true,
            embedding_dim: 128,
            num_classes: 10,
            resolution: 32,
        }
    }
}

/// Shape of the activation captured at one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapPoint {
    /// 1-based stage index.
    pub stage: u8,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl TapPoint {
    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }
}

impl AuditedModelConfig {
    pub fn with_resolution(mut self, resolution: usize) -> Self {
        self.resolution = resolution;
        self
    }

    fn stride(stage: usize) -> usize {
        if stage == 0 {
            1
        } else {
            2
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stages.is_empty() || self.stages.len() > 8 {
            return bad(format!("{} stages; expected 1..=8", self.stages.len()));
        }
        if let Some(s) = self.stages.iter().find(|s| s.blocks == 0 || s.channels == 0) {
            return bad(format!("stage {s:?} needs ≥1 block and ≥1 channel"));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return bad(format!("kernel {} must be odd", self.kernel));
        }
        if self.embedding_dim < 8 {
            return bad(format!("embedding dim {} below 8", self.embedding_dim));
        }
        if self.num_classes < 2 {
            return bad(format!("{} classes is a degenerate classifier", self.num_classes));
        }
        if self.resolution < 8 {
            return bad(format!("resolution {} below 8", self.resolution));
        }
        Ok(())
    }

    /// Tap shapes in stage order.
    pub fn taps(&self) -> Vec<TapPoint> {
        let pad = self.kernel / 2;
        let mut side = self.resolution;
        self.stages
            .iter()
            .enumerate()
            .map(|(i, s)| {
                side = (side + 2 * pad - self.kernel) / Self::stride(i) + 1;
                TapPoint {
                    stage: i as u8 + 1,
                    height: side,
                    width: side,
                    channels: s.channels,
                }
            })
            .collect()
    }

    /// `(name, shape)` of every parameter in model order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = 3;
        for (i, s) in self.stages.iter().enumerate() {
            for b in 0..s.blocks {
                let k = self.kernel;
                out.push((format!("stage{}.block{}.kernel", i + 1, b + 1), vec![k, k, cin, s.channels]));
                out.push((format!("stage{}.block{}.bias", i + 1, b + 1), vec![s.channels]));
                cin = s.channels;
            }
        }
        let l = self.embedding_dim;
        out.push(("embed.weight".into(), vec![cin, l]));
        out.push(("embed.bias".into(), vec![l]));
        out.push(("head.weight".into(), vec![l, self.num_classes]));
        out.push(("head.bias".into(), vec![self.num_classes]));
        out
    }
}

#[derive(Debug, Clone)]
pub struct AuditedModel {
    pub config: AuditedModelConfig,
    pub params: Vec<Parameter<f32>>,
    pub taps: Vec<TapPoint>,
}

/// Variables produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub logits: Var,
    pub embedding: Var,
    pub taps: Vec<Var>,
    /// Stage outputs after any skip additions.
    pub stage_outputs: Vec<Var>,
}

/// Values of a tapped forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TapOutput {
    pub logits: Tensor<f32>,
    pub embedding: Tensor<f32>,
    /// One `N×H×W×C` block per stage.
    pub activations: Vec<Tensor<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    /// Accuracy over the whole training set after training (eval pass).
    pub final_train_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditedTrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AuditedTrainOptions {
    fn default() -> Self {
        AuditedTrainOptions {
            epochs: 10,
            lr: 0.001,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Deterministic He-normal initialisation; biases start at zero.
pub fn build_model(config: AuditedModelConfig, seed: u64) -> Result<AuditedModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = config
        .parameter_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let value = if shape.len() == 1 {
                Tensor::zeros(&shape)
            } else {
                let fan_in: usize = shape[..shape.len() - 1].iter().product();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                Tensor::from_fn(&shape, |_| normal.sample(&mut rng) as f32)
            };
            Parameter::new(name, value)
        })
        .collect();
    let taps = config.taps();
    Ok(AuditedModel { config, params, taps })
}

/// Record the network on `tape`. `params` are the bound parameter vars in model order.
pub fn forward_graph<T: Scalar>(
    config: &AuditedModelConfig,
    tape: &mut Tape<T>,
    params: &[Var],
    x: Var,
) -> Result<ForwardVars> {
    let mut p = params.iter().copied();
    let mut next = || p.next().ok_or_else(|| Error::Config("parameter list too short".into()));
    let mut h = x;
    let mut taps = Vec::with_capacity(config.stages.len());
    let mut stage_outputs = Vec::with_capacity(config.stages.len());
    for (i, stage) in config.stages.iter().enumerate() {
        let mut tap = h;
        for b in 0..stage.blocks {
            let spec = Conv2dSpec {
                stride: if b == 0 { AuditedModelConfig::stride(i) } else { 1 },
                padding: config.kernel / 2,
            };
            let (k, bias) = (next()?, next()?);
            let conv = tape.conv2d(h, k, bias, spec)?;
            tap = tape.relu(conv)?;
            h = if b > 0 && config.skip_connections {
                tape.add(tap, h)?
            } else {
                tap
            };
        }
        taps.push(tap);
        stage_outputs.push(h);
    }
    let pooled = tape.global_avg_pool(h)?;
    let (ew, eb) = (next()?, next()?);
    let embedding = tape.dense(pooled, ew, eb)?;
    let hidden = tape.relu(embedding)?;
    let (hw, hb) = (next()?, next()?);
    let logits = tape.dense(hidden, hw, hb)?;
    Ok(ForwardVars {
        logits,
        embedding,
        taps,
        stage_outputs,
    })
}

impl AuditedModel {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    fn check_batch(&self, batch: &Tensor<f32>) -> Result<()> {
        let r = self.config.resolution;
        if batch.rank() != 4 || batch.shape()[1..] != [r, r, 3] {
            return Err(mint_tensor::TensorError::Dimension {
                op: "audited forward",
                detail: format!("batch {:?} does not match resolution {r}×{r}×3", batch.shape()),
            }
            .into());
        }
        Ok(())
    }

    /// Record an inference pass and return the tape with its variables.
    pub fn trace(&self, batch: &Tensor<f32>) -> Result<(Tape<f32>, ForwardVars)> {
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|p| tape.constant(p.value.clone())).collect();
        let x = tape.constant(batch.clone());
        let fv = forward_graph(&self.config, &mut tape, &vars, x)?;
        Ok((tape, fv))
    }

    /// Logits only.
    pub fn forward(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (tape, fv) = self.trace(batch)?;
        Ok(tape.value(fv.logits).clone())
    }

    /// Logits, embedding and every stage's tap activation (the model has no
    /// train-only layers, so this is also the eval-mode forward).
    pub fn forward_with_taps(&self, batch: &Tensor<f32>) -> Result<TapOutput> {
        let (tape, fv) = self.trace(batch)?;
        Ok(TapOutput {
            logits: tape.value(fv.logits).clone(),
            embedding: tape.value(fv.embedding).clone(),
            activations: fv.taps.iter().map(|&v| tape.value(v).clone()).collect(),
        })
    }

    /// Fraction of `images` whose arg-max logit equals `labels`.
    pub fn accuracy(&self, inputs: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
        let mut correct = 0usize;
        for start in (0..labels.len()).step_by(256) {
            let rows: Vec<usize> = (start..(start + 256).min(labels.len())).collect();
            let logits = self.forward(&inputs.select_rows(&rows))?;
            correct += rows.iter().enumerate().filter(|(i, &r)| argmax(logits.row(*i)) == labels[r]).count();
        }
        Ok(correct as f64 / labels.len().max(1) as f64)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<[u8; 32]> {
        self.to_container().write(CHECKPOINT_MAGIC, path)
    }

    pub fn to_container(&self) -> Container {
        Container {
            config: serde_json::to_string(&self.config).expect("config serialises"),
            tensors: self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    /// Load a checkpoint; also returns the SHA-256 of the file.
    pub fn load_checkpoint(path: &Path) -> Result<(Self, [u8; 32])> {
        let (mut c, hash) = Container::read("audited checkpoint", CHECKPOINT_MAGIC, path)?;
        let config: AuditedModelConfig = serde_json::from_str(&c.config)
            .map_err(|e| Error::format("audited checkpoint", "config", e.to_string()))?;
        config.validate()?;
        let mut params = Vec::new();
        for (name, shape) in config.parameter_shapes() {
            let value = c.take(&name, &shape)?;
            params.push(Parameter::new(name, value));
        }
        if let Some((name, _)) = c.tensors.first() {
            return Err(Error::format("audited checkpoint", "parameters", format!("unexpected parameter `{name}`")));
        }
        let taps = config.taps();
        Ok((AuditedModel { config, params, taps }, hash))
    }
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Preprocessed training inputs and labels of a labelled source.
pub fn labelled_inputs(source: &Source, resolution: usize, num_classes: usize) -> Result<(Tensor<f32>, Vec<usize>)> {
    let mut labels = Vec::with_capacity(source.len());
    for e in &source.manifest.entries {
        match e.class_label {
            Some(c) if (c as usize) < num_classes => labels.push(c as usize),
            Some(c) => {
                return Err(Error::Label(format!(
                    "sample {} has class {c}, model has {num_classes} classes",
                    e.sample_id
                )))
            }
            None => return Err(Error::Label(format!("sample {} has no class label", e.sample_id))),
        }
    }
    if labels.is_empty() {
        return Err(Error::Label(format!("source `{}` is empty", source.id())));
    }
    let images: Vec<&RawImage> = source.images.iter().collect();
    Ok((preprocess_batch(&images, resolution)?, labels))
}

/// Softmax cross-entropy training with Adam on a labelled source.
pub fn train_audited(model: &mut AuditedModel, source: &Source, opts: &AuditedTrainOptions) -> Result<TrainingLog> {
    let (inputs, labels) = labelled_inputs(source, model.config.resolution, model.config.num_classes)?;
    train_on_inputs(model, &inputs, &labels, opts)
}

pub fn train_on_inputs(
    model: &mut AuditedModel,
    inputs: &Tensor<f32>,
    labels: &[usize],
    opts: &AuditedTrainOptions,
) -> Result<TrainingLog> {
    if opts.batch_size == 0 {
        return Err(Error::Parameter("batch size must be positive".into()));
    }
    let adam = Adam::with_lr(opts.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut epochs = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for rows in order.chunks(opts.batch_size) {
            let batch = inputs.select_rows(rows);
            let batch_labels: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
            let mut tape = Tape::new();
            let vars: Vec<Var> = model.params.iter().map(|p| tape.param(p)).collect();
            let x = tape.constant(batch);
            let fv = forward_graph(&model.config, &mut tape, &vars, x)?;
            let loss = tape.softmax_cross_entropy(fv.logits, &batch_labels)?;
            let logits = tape.value(fv.logits);
            correct += (0..rows.len()).filter(|&i| argmax(logits.row(i)) == batch_labels[i]).count();
            loss_sum += tape.value(loss).data()[0] as f64 * rows.len() as f64;
            let grads = tape.backward(loss)?;
            for (v, p) in vars.iter().zip(model.params.iter_mut()) {
                grads.accumulate_into(*v, p)?;
            }
            adam.step(model.params.iter_mut())?;
        }
        epochs.push(EpochLog {
            epoch: epoch + 1,
            loss: loss_sum / labels.len() as f64,
            accuracy: correct as f64 / labels.len() as f64,
        });
    }
    let final_train_accuracy = model.accuracy(inputs, labels)?;
    Ok(TrainingLog {
        epochs,
        final_train_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shapes_and_count() {
        let m = build_model(AuditedModelConfig::default(), 1).unwrap();
        let shapes: Vec<[usize; 3]> = m.taps.iter().map(|t| t.shape()).collect();
        assert_eq!(shapes, vec![[32, 32, 16], [16, 16, 32], [8, 8, 64], [4, 4, 128]]);
        let expected = (27 * 16 + 16) + (144 * 32 + 32) + (288 * 64 + 64) + (576 * 128 + 128) + (128 * 128 + 128) + (128 * 10 + 10);
        assert_eq!(m.param_count(), expected);
    }

    #[test]
    fn degenerate_configs_rejected() {
        let cfg = AuditedModelConfig { num_classes: 1, ..AuditedModelConfig::default() };
        assert!(matches!(build_model(cfg, 0), Err(Error::Config(_))));
        let cfg = AuditedModelConfig { embedding_dim: 4, ..AuditedModelConfig::default() };
        assert!(matches!(build_model(cfg, 0), Err(Error::Config(_))));
    }
}
