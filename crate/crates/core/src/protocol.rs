//! Experiment orchestration: plan files, case rotation, scenario sizing,
//! disjointness enforcement, per-seed runs, aggregation and ablation grids.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aad::{extract_aad, write_store, AadInput, Pooling, StageId};
use crate::audited::{build_model, train_audited, AuditedModel, AuditedModelConfig, AuditedTrainOptions, TrainingLog};
use crate::dataset::{
    dedup_check, load_source, make_membership_split, Membership, Role, SourceFormat, SourceManifest, SourceSet,
    SplitCounts, SplitOptions, SplitSpec,
};
use crate::detector::{
    build_for_store, outcome_only_baseline, predict_membership, train_mint, CnnMintConfig, DetectorConfig, LossCurve,
    MintModel, VanillaMintConfig,
};
use crate::error::{Error, IoContext, Result};
use crate::metrics::{round4, to_canonical_json, AggregateReport, DetectorEval, EvalReport, Scored, SideCounts, Summary};

/// Which external source is held out for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Case {
    /// Hold out the plan's designated eval source.
    Baseline,
    /// Hold out the k-th external source (0-based).
    Rotate(usize),
}

impl std::str::FromStr for Case {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "baseline" {
            return Ok(Case::Baseline);
        }
        let k = s
            .strip_prefix("rotate")
            .map(|r| r.trim_matches(|c| c == ':' || c == '(' || c == ')' || c == ' '))
            .and_then(|r| r.parse().ok());
        k.map(Case::Rotate)
            .ok_or_else(|| Error::Config(format!("unknown case `{s}` (expected baseline or rotate:<k>)")))
    }
}

/// Split external sources into MINT-training sources and the eval source.
pub fn assemble_case(
    case: Case,
    externals: &[String],
    default_eval: &str,
    pinned: &[String],
) -> Result<(Vec<String>, String)> {
    if externals.len() < 2 {
        return Err(Error::Capacity(format!(
            "{} external source(s); at least 2 are needed to hold one out",
            externals.len()
        )));
    }
    let eval = match case {
        Case::Baseline => externals
            .iter()
            .find(|s| *s == default_eval)
            .ok_or_else(|| Error::Config(format!("eval source `{default_eval}` is not an external source")))?
            .clone(),
        Case::Rotate(k) => externals
            .get(k)
            .ok_or_else(|| Error::Config(format!("rotation {k} out of range for {} sources", externals.len())))?
            .clone(),
    };
    if pinned.contains(&eval) {
        return Err(Error::Config(format!("source `{eval}` is pinned to training and cannot be held out")));
    }
    let train = externals.iter().filter(|s| **s != eval).cloned().collect();
    Ok((train, eval))
}

/// Every eval source a full rotation visits, skipping pinned sources.
pub fn all_rotations(externals: &[String], pinned: &[String]) -> Result<Vec<(Vec<String>, String)>> {
    (0..externals.len())
        .filter(|k| !pinned.contains(&externals[*k]))
        .map(|k| assemble_case(Case::Rotate(k), externals, "", pinned))
        .collect()
}

/// MINT-training data budget per side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    High,
    Medium,
    Low,
}

impl Scenario {
    /// Samples per side at full scale.
    pub fn per_side(self) -> usize {
        match self {
            Scenario::High => 50_000,
            Scenario::Medium => 25_000,
            Scenario::Low => 500,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scenario::High => "high",
            Scenario::Medium => "medium",
            Scenario::Low => "low",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "high" => Ok(Scenario::High),
            "medium" => Ok(Scenario::Medium),
            "low" => Ok(Scenario::Low),
            other => Err(Error::Config(format!("unknown scenario `{other}`"))),
        }
    }
}

/// Smallest scaled training side accepted.
pub const MIN_SIDE: usize = 50;

pub fn scenario_counts(scenario: Scenario, scale: f64, eval_per_side: usize) -> Result<SplitCounts> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::Config(format!("scale {scale} outside (0, 1]")));
    }
    let side = (scenario.per_side() as f64 * scale).round() as usize;
    if side < MIN_SIDE {
        return Err(Error::Config(format!(
            "scenario {} at scale {scale} gives {side} samples per side (< {MIN_SIDE})",
            scenario.name()
        )));
    }
    if eval_per_side == 0 {
        return Err(Error::Config("eval_per_side must be positive".into()));
    }
    Ok(SplitCounts {
        train_d: side,
        train_e: side,
        eval: eval_per_side,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn scenario_subsample(
    scenario: Scenario,
    scale: f64,
    eval_per_side: usize,
    d: &SourceManifest,
    e_train: &[&SourceManifest],
    e_eval: &SourceManifest,
    options: SplitOptions,
    seed: u64,
) -> Result<(SplitCounts, SplitSpec)> {
    let counts = scenario_counts(scenario, scale, eval_per_side)?;
    let split = make_membership_split(d, e_train, e_eval, counts, options, seed)?;
    Ok((counts, split))
}

/// Outcome of [`verify_disjointness`].
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DisjointnessReport {
    /// `(D id, E id)` pairs with identical content.
    pub collisions: Vec<(u64, u64)>,
    /// Human-readable split violations.
    pub split_violations: Vec<String>,
}

impl DisjointnessReport {
    pub fn is_ok(&self) -> bool {
        self.collisions.is_empty() && self.split_violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            return Ok(());
        }
        let mut parts = Vec::new();
        if !self.collisions.is_empty() {
            let shown: Vec<String> = self.collisions.iter().take(10).map(|(a, b)| format!("{a}↔{b}")).collect();
            parts.push(format!("{} D/E content collision(s): {}", self.collisions.len(), shown.join(", ")));
        }
        parts.extend(self.split_violations);
        Err(Error::Protocol(parts.join("; ")))
    }
}

/// D∩E must be empty by content hash, and every split must keep MINT-train
/// and MINT-eval apart by id and hash with a balanced eval side.
pub fn verify_disjointness(manifests: &[&SourceManifest], splits: &[SplitSpec]) -> DisjointnessReport {
    let d: Vec<&SourceManifest> = manifests.iter().copied().filter(|m| m.role == Role::AuditedTraining).collect();
    let e: Vec<&SourceManifest> = manifests.iter().copied().filter(|m| m.role == Role::External).collect();
    let mut collisions = Vec::new();
    for dm in &d {
        for em in &e {
            collisions.extend(dedup_check(&[dm, em]));
        }
    }
    collisions.sort_unstable();
    collisions.dedup();
    let split_violations = splits
        .iter()
        .filter_map(|s| s.validate().err().map(|e| format!("split seed {}: {e}", s.seed)))
        .collect();
    DisjointnessReport {
        collisions,
        split_violations,
    }
}

/// Audited-model training settings used when a plan needs to train one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditedPlan {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub model: AuditedModelConfig,
}

impl Default for AuditedPlan {
    fn default() -> Self {
        AuditedPlan {
            epochs: 10,
            lr: 0.001,
            batch: 64,
            seed: 0,
            model: AuditedModelConfig::default(),
        }
    }
}

impl AuditedPlan {
    pub fn train_options(&self) -> AuditedTrainOptions {
        AuditedTrainOptions {
            epochs: self.epochs,
            lr: self.lr,
            batch_size: self.batch,
            seed: self.seed,
        }
    }
}

/// Declarative description of one audit run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub audited_checkpoint: Option<PathBuf>,
    pub d_source: Option<PathBuf>,
    pub external_sources: Vec<PathBuf>,
    pub source_format: String,
    pub case: Case,
    /// Designated eval source for the baseline case; defaults to the last external source.
    pub eval_source: Option<String>,
    pub pinned: Vec<String>,
    pub scenario: Scenario,
    pub scale: f64,
    pub eval_per_side: usize,
    pub detector: DetectorConfig,
    /// Also train and report the outcome-only baseline.
    pub baseline: bool,
    pub seeds: Vec<u64>,
    pub resolution: usize,
    pub class_disjoint_eval: bool,
    pub persist_aad: bool,
    pub audited: AuditedPlan,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            audited_checkpoint: None,
            d_source: None,
            external_sources: Vec::new(),
            source_format: "records".into(),
            case: Case::Baseline,
            eval_source: None,
            pinned: Vec::new(),
            scenario: Scenario::High,
            scale: 0.08,
            eval_per_side: 1000,
            detector: DetectorConfig::Cnn(CnnMintConfig::default()),
            baseline: false,
            seeds: vec![1, 2, 3],
            resolution: 32,
            class_disjoint_eval: false,
            persist_aad: false,
            audited: AuditedPlan::default(),
        }
    }
}

/// Keys accepted in plan files.
pub const PLAN_KEYS: &[(&str, &str)] = &[
    ("audited", "path of the audited-model checkpoint"),
    ("d_source", "path of the audited model's training data (D)"),
    ("external", "comma-separated paths of external sources (E)"),
    ("format", "records | directory"),
    ("case", "baseline | rotate:<k>"),
    ("eval_source", "source id held out in the baseline case"),
    ("pin", "comma-separated source ids that are always used for training"),
    ("scenario", "high | medium | low"),
    ("scale", "desk scale factor in (0, 1]"),
    ("eval_per_side", "evaluation samples per side"),
    ("detector", "cnn | vanilla"),
    ("stages", "cnn: one stage; vanilla: comma list of stages and/or outcome"),
    ("seeds", "comma-separated seeds"),
    ("resolution", "input resolution of the audited model"),
    ("epochs", "detector epochs"),
    ("lr", "detector learning rate"),
    ("batch", "detector batch size (even)"),
    ("filters", "cnn filters"),
    ("kernel", "cnn kernel size"),
    ("width_multiplier", "cnn fully-connected width multiplier"),
    ("hidden", "vanilla hidden width"),
    ("l1", "vanilla L1 coefficient"),
    ("dropout", "detector dropout rate"),
    ("pooling", "vanilla channel pooling: max | mean"),
    ("baseline", "also train the outcome-only baseline (true | false)"),
    ("class_disjoint_eval", "exclude eval classes seen in external training data"),
    ("persist_aad", "write AAD stores into the run directory"),
    ("audited_epochs", "audited-model training epochs"),
    ("audited_lr", "audited-model learning rate"),
    ("audited_batch", "audited-model batch size"),
    ("audited_seed", "audited-model seed"),
    ("audited_channels", "comma-separated channels per stage"),
    ("audited_blocks", "blocks per stage"),
    ("audited_embedding", "embedding dimension"),
    ("audited_classes", "number of classes"),
];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{v}` for `{key}`"))),
    }
}

fn list(v: &str) -> Vec<String> {
    v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

impl ExperimentPlan {
    /// Parse `key = value` lines (`#` starts a comment). Relative paths are
    /// resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        Self::parse_with_overrides(text, base, &[])
    }

    /// As [`parse`](Self::parse), then apply `key=value` overrides in order.
    pub fn parse_with_overrides(text: &str, base: &Path, overrides: &[String]) -> Result<Self> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("plan line {}: expected `key = value`", i + 1)))?;
            let k = k.trim().to_string();
            if entries.iter().any(|(e, _)| *e == k) {
                return Err(Error::Config(format!("plan line {}: duplicate key `{k}`", i + 1)));
            }
            entries.push((k, v.trim().to_string()));
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}`: expected key=value")))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            match entries.iter_mut().find(|(e, _)| *e == k) {
                Some(slot) => slot.1 = v,
                None => entries.push((k, v)),
            }
        }
        let resolve = |p: &str| -> PathBuf {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let mut plan = ExperimentPlan::default();
        let map: BTreeMap<&str, &str> = entries.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        for k in map.keys() {
            if !PLAN_KEYS.iter().any(|(name, _)| name == k) {
                return Err(Error::Config(format!("unknown plan key `{k}`")));
            }
        }
        let get = |k: &str| map.get(k).copied();
        if let Some(v) = get("audited") {
            plan.audited_checkpoint = Some(resolve(v));
        }
        if let Some(v) = get("d_source") {
            plan.d_source = Some(resolve(v));
        }
        if let Some(v) = get("external") {
            plan.external_sources = list(v).iter().map(|p| resolve(p)).collect();
        }
        if let Some(v) = get("format") {
            match v {
                "records" | "directory" => plan.source_format = v.into(),
                _ => return Err(Error::Config(format!("unknown format `{v}`"))),
            }
        }
        if let Some(v) = get("case") {
            plan.case = v.parse()?;
        }
        if let Some(v) = get("eval_source") {
            plan.eval_source = Some(v.into());
        }
        if let Some(v) = get("pin") {
            plan.pinned = list(v);
        }
        if let Some(v) = get("scenario") {
            plan.scenario = v.parse()?;
        }
        if let Some(v) = get("scale") {
            plan.scale = parse_num("scale", v)?;
        }
        if let Some(v) = get("eval_per_side") {
            plan.eval_per_side = parse_num("eval_per_side", v)?;
        }
        if let Some(v) = get("seeds") {
            plan.seeds = list(v).iter().map(|s| parse_num("seeds", s)).collect::<Result<_>>()?;
        }
        if let Some(v) = get("resolution") {
            plan.resolution = parse_num("resolution", v)?;
        }
        if let Some(v) = get("baseline") {
            plan.baseline = parse_bool("baseline", v)?;
        }
        if let Some(v) = get("class_disjoint_eval") {
            plan.class_disjoint_eval = parse_bool("class_disjoint_eval", v)?;
        }
        if let Some(v) = get("persist_aad") {
            plan.persist_aad = parse_bool("persist_aad", v)?;
        }

        let kind = get("detector").unwrap_or("cnn");
        plan.detector = match kind {
            "cnn" => {
                let mut c = CnnMintConfig::default();
                if let Some(v) = get("stages") {
                    let s: StageId = v.parse()?;
                    match s {
                        StageId::Stage(k) => c.stage = k,
                        StageId::Outcome => {
                            return Err(Error::Config("the cnn detector needs a stage block, not the outcome".into()))
                        }
                    }
                }
                if let Some(v) = get("filters") {
                    c.filters = parse_num("filters", v)?;
                }
                if let Some(v) = get("kernel") {
                    c.kernel = parse_num("kernel", v)?;
                }
                if let Some(v) = get("width_multiplier") {
                    c.width_multiplier = parse_num("width_multiplier", v)?;
                }
                if let Some(v) = get("dropout") {
                    c.dropout = parse_num("dropout", v)?;
                }
                if let Some(v) = get("epochs") {
                    c.epochs = parse_num("epochs", v)?;
                }
                if let Some(v) = get("lr") {
                    c.lr = parse_num("lr", v)?;
                }
                if let Some(v) = get("batch") {
                    c.batch = parse_num("batch", v)?;
                }
                DetectorConfig::Cnn(c)
            }
            "vanilla" => {
                let mut c = VanillaMintConfig::default();
                if let Some(v) = get("stages") {
                    c.sources = list(v).iter().map(|s| s.parse()).collect::<Result<_>>()?;
                }
                if let Some(v) = get("hidden") {
                    c.hidden = parse_num("hidden", v)?;
                }
                if let Some(v) = get("l1") {
                    c.l1 = parse_num("l1", v)?;
                }
                if let Some(v) = get("dropout") {
                    c.dropout = parse_num("dropout", v)?;
                }
                if let Some(v) = get("pooling") {
                    c.pooling = match v {
                        "max" => Pooling::Max,
                        "mean" => Pooling::Mean,
                        _ => return Err(Error::Config(format!("unknown pooling `{v}`"))),
                    };
                }
                if let Some(v) = get("epochs") {
                    c.epochs = parse_num("epochs", v)?;
                }
                if let Some(v) = get("lr") {
                    c.lr = parse_num("lr", v)?;
                }
                if let Some(v) = get("batch") {
                    c.batch = parse_num("batch", v)?;
                }
                DetectorConfig::Vanilla(c)
            }
            other => return Err(Error::Config(format!("unknown detector `{other}`"))),
        };

        let a = &mut plan.audited;
        if let Some(v) = get("audited_epochs") {
            a.epochs = parse_num("audited_epochs", v)?;
        }
        if let Some(v) = get("audited_lr") {
            a.lr = parse_num("audited_lr", v)?;
        }
        if let Some(v) = get("audited_batch") {
            a.batch = parse_num("audited_batch", v)?;
        }
        if let Some(v) = get("audited_seed") {
            a.seed = parse_num("audited_seed", v)?;
        }
        let blocks: usize = match get("audited_blocks") {
            Some(v) => parse_num("audited_blocks", v)?,
            None => 1,
        };
        if let Some(v) = get("audited_channels") {
            a.model.stages = list(v)
                .iter()
                .map(|c| parse_num("audited_channels", c).map(|channels| crate::audited::StageConfig { blocks, channels }))
                .collect::<Result<_>>()?;
        } else {
            for s in &mut a.model.stages {
                s.blocks = blocks;
            }
        }
        if let Some(v) = get("audited_embedding") {
            a.model.embedding_dim = parse_num("audited_embedding", v)?;
        }
        if let Some(v) = get("audited_classes") {
            a.model.num_classes = parse_num("audited_classes", v)?;
        }
        a.model.resolution = plan.resolution;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("plan needs at least one seed".into()));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return Err(Error::Config("duplicate seed in plan".into()));
        }
        if !(self.scale > 0.0 && self.scale <= 1.0) {
            return Err(Error::Config(format!("scale {} outside (0, 1]", self.scale)));
        }
        let (batch, dropout) = match &self.detector {
            DetectorConfig::Cnn(c) => (c.batch, c.dropout),
            DetectorConfig::Vanilla(c) => {
                if c.sources.is_empty() {
                    return Err(Error::Config("vanilla detector needs at least one source".into()));
                }
                (c.batch, c.dropout)
            }
        };
        if batch == 0 || batch % 2 != 0 {
            return Err(Error::Config(format!("batch {batch} must be even and positive")));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout {dropout} outside [0, 1)")));
        }
        if self.resolution < crate::dataset::MIN_RESOLUTION {
            return Err(Error::Config(format!("resolution {} below 8", self.resolution)));
        }
        Ok(())
    }

    /// Canonical serialization used for hashing and `plan.lock`.
    pub fn canonical(&self) -> String {
        to_canonical_json(self)
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn split_options(&self) -> SplitOptions {
        SplitOptions {
            class_disjoint_eval: self.class_disjoint_eval,
        }
    }

    /// Stages the AAD extraction must cover.
    pub fn needed_stages(&self) -> Vec<StageId> {
        let mut s = self.detector.stages();
        if self.baseline && !s.contains(&StageId::Outcome) {
            s.push(StageId::Outcome);
        }
        s
    }
}

/// Row label of a detector.
pub fn detector_name(config: &DetectorConfig) -> String {
    match config {
        DetectorConfig::Cnn(c) => format!("cnn-stage{}", c.stage),
        DetectorConfig::Vanilla(c) => {
            let parts: Vec<String> = c.sources.iter().map(|s| s.to_string()).collect();
            format!("vanilla-{}", parts.join("+"))
        }
    }
}

pub const BASELINE_NAME: &str = "outcome-baseline";

/// Everything a run needs in memory: sources with roles, and the audited model.
#[derive(Debug, Clone)]
pub struct ExperimentContext {
    pub sources: SourceSet,
    pub audited: AuditedModel,
    pub model_hash: [u8; 32],
    pub audited_train_accuracy: f64,
}

fn audited_log_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".log.json");
    PathBuf::from(s)
}

/// Write a checkpoint and its training log next to it.
pub fn save_audited(model: &AuditedModel, log: &TrainingLog, path: &Path) -> Result<[u8; 32]> {
    let hash = model.save_checkpoint(path)?;
    let log_path = audited_log_path(path);
    fs::write(&log_path, to_canonical_json(log)).at(&log_path)?;
    Ok(hash)
}

pub fn load_plan_sources(plan: &ExperimentPlan) -> Result<SourceSet> {
    let format = match plan.source_format.as_str() {
        "directory" => SourceFormat::ImageDirectory,
        _ => SourceFormat::RawRecords,
    };
    let d_path = plan
        .d_source
        .as_ref()
        .ok_or_else(|| Error::Config("plan has no d_source".into()))?;
    let mut sources = vec![load_source(d_path, format)?.with_role(Role::AuditedTraining)];
    for p in &plan.external_sources {
        sources.push(load_source(p, format)?.with_role(Role::External));
    }
    SourceSet::new(sources)
}

impl ExperimentContext {
    /// Load the audited checkpoint and all plan sources. A missing checkpoint
    /// fails before any data is read.
    pub fn load(plan: &ExperimentPlan) -> Result<Self> {
        let ckpt = plan
            .audited_checkpoint
            .as_ref()
            .ok_or_else(|| Error::Provenance("plan names no audited checkpoint".into()))?;
        if !ckpt.is_file() {
            return Err(Error::Provenance(format!("audited checkpoint {} not found", ckpt.display())));
        }
        let (audited, model_hash) = AuditedModel::load_checkpoint(ckpt)?;
        if audited.config.resolution != plan.resolution {
            return Err(Error::Config(format!(
                "plan resolution {} differs from the checkpoint's {}",
                plan.resolution, audited.config.resolution
            )));
        }
        let sources = load_plan_sources(plan)?;
        let log: Option<TrainingLog> = fs::read_to_string(audited_log_path(ckpt))
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok());
        let audited_train_accuracy = match log {
            Some(l) => l.final_train_accuracy,
            None => d_accuracy(&audited, &sources)?,
        };
        Ok(ExperimentContext {
            sources,
            audited,
            model_hash,
            audited_train_accuracy,
        })
    }
}

/// Accuracy of the audited model on its own training source.
pub fn d_accuracy(model: &AuditedModel, sources: &SourceSet) -> Result<f64> {
    let d = sources
        .sources
        .iter()
        .find(|s| s.manifest.role == Role::AuditedTraining)
        .ok_or_else(|| Error::Config("no audited-training source".into()))?;
    let (inputs, labels) = crate::audited::labelled_inputs(d, model.config.resolution, model.config.num_classes)?;
    model.accuracy(&inputs, &labels)
}

/// Train an audited model on the D source of `sources` as `plan.audited` describes.
pub fn train_audited_for(plan: &AuditedPlan, resolution: usize, sources: &SourceSet) -> Result<(AuditedModel, TrainingLog)> {
    let d = sources
        .sources
        .iter()
        .find(|s| s.manifest.role == Role::AuditedTraining)
        .ok_or_else(|| Error::Config("no audited-training source".into()))?;
    let cfg = plan.model.clone().with_resolution(resolution);
    let mut model = build_model(cfg, plan.seed)?;
    let log = train_audited(&mut model, d, &plan.train_options())?;
    Ok((model, log))
}

/// The D source, E-train sources and E-eval source named by the plan's case.
pub fn case_sources<'a>(
    plan: &ExperimentPlan,
    sources: &'a SourceSet,
) -> Result<(&'a SourceManifest, Vec<&'a SourceManifest>, &'a SourceManifest)> {
    let d = sources
        .sources
        .iter()
        .find(|s| s.manifest.role == Role::AuditedTraining)
        .map(|s| &s.manifest)
        .ok_or_else(|| Error::Config("no audited-training source".into()))?;
    let externals: Vec<String> = sources
        .sources
        .iter()
        .filter(|s| s.manifest.role == Role::External)
        .map(|s| s.id().to_string())
        .collect();
    let default_eval = plan
        .eval_source
        .clone()
        .or_else(|| externals.last().cloned())
        .unwrap_or_default();
    let (train, eval) = assemble_case(plan.case, &externals, &default_eval, &plan.pinned)?;
    let by_id = |id: &str| &sources.by_id(id).expect("listed source exists").manifest;
    Ok((d, train.iter().map(|s| by_id(s)).collect(), by_id(&eval)))
}

/// Draw the split a plan uses for `seed`.
pub fn plan_split(plan: &ExperimentPlan, sources: &SourceSet, seed: u64) -> Result<SplitSpec> {
    let (d, e_train, e_eval) = case_sources(plan, sources)?;
    let (_, split) = scenario_subsample(
        plan.scenario,
        plan.scale,
        plan.eval_per_side,
        d,
        &e_train,
        e_eval,
        plan.split_options(),
        seed,
    )?;
    Ok(split)
}

/// Extract the AAD a plan needs for every id of `split`.
pub fn extract_for_split(
    ctx: &ExperimentContext,
    split: &SplitSpec,
    stages: &[StageId],
    store_blocks: bool,
) -> Result<crate::aad::AadStore> {
    let mut inputs = Vec::with_capacity(split.train_d.len() + split.train_e.len() + 2 * split.eval_d.len());
    for (id, m) in split.train().chain(split.eval()) {
        let image = ctx
            .sources
            .image(id)
            .ok_or_else(|| Error::Coverage { missing: vec![id] })?;
        inputs.push(AadInput {
            sample_id: id,
            membership: m,
            image,
        });
    }
    extract_aad(&ctx.audited, ctx.model_hash, &inputs, stages, store_blocks)
}

/// Score the eval side of `split` and collect metrics.
pub fn evaluate_split(
    model: &MintModel,
    store: &crate::aad::AadStore,
    split: &SplitSpec,
    name: &str,
    losses: &LossCurve,
) -> Result<DetectorEval> {
    split.validate()?;
    let pairs: Vec<(u64, Membership)> = split.eval().collect();
    let ids: Vec<u64> = pairs.iter().map(|(i, _)| *i).collect();
    let scores = predict_membership(model, store, &ids)?;
    let scored: Vec<Scored> = pairs
        .iter()
        .zip(&scores)
        .map(|(&(sample_id, membership), &score)| Scored {
            sample_id,
            score,
            membership,
        })
        .collect();
    DetectorEval::compute(name, model.kind(), model.param_count(), &scored, (losses.initial, losses.final_loss))
}

/// Where per-seed artifacts go.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn aad(&self) -> PathBuf {
        self.root.join("aad")
    }
    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn seed_report(&self, seed: u64) -> PathBuf {
        self.reports().join(format!("seed-{seed}.json"))
    }
    pub fn roc(&self, seed: u64) -> PathBuf {
        self.reports().join(format!("roc-{seed}.csv"))
    }
    pub fn aggregate(&self) -> PathBuf {
        self.reports().join("aggregate.json")
    }
    pub fn incomplete_marker(&self) -> PathBuf {
        self.root.join("INCOMPLETE")
    }

    /// Create the layout. An existing non-empty directory is refused unless `force`.
    pub fn create(root: &Path, force: bool) -> Result<Self> {
        if root.exists() && fs::read_dir(root).at(root)?.next().is_some() {
            if !force {
                return Err(Error::Config(format!(
                    "{} already exists; pass --force to overwrite",
                    root.display()
                )));
            }
            fs::remove_dir_all(root).at(root)?;
        }
        let dir = RunDir { root: root.to_path_buf() };
        for d in [dir.root.clone(), dir.aad(), dir.models(), dir.reports()] {
            fs::create_dir_all(&d).at(&d)?;
        }
        Ok(dir)
    }
}

/// One seed of a plan: split → AAD → detector(s) → evaluation.
pub fn run_seed(
    plan: &ExperimentPlan,
    ctx: &ExperimentContext,
    seed: u64,
    plan_hash: &str,
    dir: Option<&RunDir>,
) -> Result<EvalReport> {
    let split = plan_split(plan, &ctx.sources, seed).map_err(|e| e.in_stage("split"))?;
    verify_disjointness(&ctx.sources.manifests(), std::slice::from_ref(&split))
        .into_result()
        .map_err(|e| e.in_stage("split"))?;

    let store_blocks = matches!(plan.detector, DetectorConfig::Cnn(_))
        || matches!(&plan.detector, DetectorConfig::Vanilla(c) if c.pooling == Pooling::Mean);
    let store = extract_for_split(ctx, &split, &plan.needed_stages(), store_blocks).map_err(|e| e.in_stage("extract"))?;
    if let Some(d) = dir {
        if plan.persist_aad {
            write_store(&store, &d.aad().join(format!("seed-{seed}.aad"))).map_err(|e| e.in_stage("extract"))?;
        }
    }

    let train_seed = seed.wrapping_mul(1_000_003).wrapping_add(17);
    let mut detector = build_for_store(&plan.detector, &store, train_seed).map_err(|e| e.in_stage("train"))?;
    let curve = train_mint(&mut detector, &store, &split, train_seed).map_err(|e| e.in_stage("train"))?;
    let name = detector_name(&plan.detector);
    let mut rows = vec![evaluate_split(&detector, &store, &split, &name, &curve).map_err(|e| e.in_stage("evaluate"))?];
    if let Some(d) = dir {
        detector
            .save(&d.models().join(format!("seed-{seed}-{name}.mdl")))
            .map_err(|e| e.in_stage("train"))?;
    }

    if plan.baseline {
        let base = match &plan.detector {
            DetectorConfig::Vanilla(c) => c.clone(),
            DetectorConfig::Cnn(c) => VanillaMintConfig {
                epochs: c.epochs,
                batch: c.batch,
                lr: c.lr,
                ..VanillaMintConfig::default()
            },
        };
        let (model, curve) = outcome_only_baseline(&store, &split, &base, train_seed).map_err(|e| e.in_stage("train"))?;
        rows.push(evaluate_split(&model, &store, &split, BASELINE_NAME, &curve).map_err(|e| e.in_stage("evaluate"))?);
        if let Some(d) = dir {
            model
                .save(&d.models().join(format!("seed-{seed}-{BASELINE_NAME}.mdl")))
                .map_err(|e| e.in_stage("train"))?;
        }
    }

    let report = EvalReport {
        plan_hash: plan_hash.to_string(),
        seed,
        resolution: ctx.audited.config.resolution,
        audited_train_accuracy: ctx.audited_train_accuracy,
        counts: SideCounts {
            train_d: split.train_d.len(),
            train_e: split.train_e.len(),
            eval_d: split.eval_d.len(),
            eval_e: split.eval_e.len(),
        },
        detectors: rows,
    };
    report.check_balanced().map_err(|e| e.in_stage("report"))?;
    if let Some(d) = dir {
        crate::metrics::emit_report(&report, &d.seed_report(seed), &d.roc(seed)).map_err(|e| e.in_stage("report"))?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub os: String,
    pub arch: String,
    pub cpus: usize,
    pub version: String,
}

impl Environment {
    pub fn current() -> Self {
        Environment {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub plan_hash: String,
    pub overrides: Vec<String>,
    pub reports: Vec<String>,
    pub aggregate: String,
    pub environment: Environment,
    pub wall_clock_secs: f64,
    pub complete: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub record: RunRecord,
    pub reports: Vec<EvalReport>,
    pub aggregate: AggregateReport,
}

/// Run every seed of `plan` against an in-memory context, optionally writing
/// the run-directory layout.
pub fn run_in_context(
    plan: &ExperimentPlan,
    ctx: &ExperimentContext,
    dir: Option<&RunDir>,
    overrides: &[String],
) -> Result<RunOutcome> {
    plan.validate()?;
    let start = Instant::now();
    let hash = plan.hash();
    if let Some(d) = dir {
        fs::write(d.incomplete_marker(), "run in progress or failed\n").at(&d.incomplete_marker())?;
        let lock = d.root.join("plan.lock");
        fs::write(&lock, format!("# plan hash {hash}\n{}", plan.canonical())).at(&lock)?;
    }
    verify_disjointness(&ctx.sources.manifests(), &[])
        .into_result()
        .map_err(|e| e.in_stage("verify"))?;
    let mut reports = Vec::with_capacity(plan.seeds.len());
    for &seed in &plan.seeds {
        reports.push(run_seed(plan, ctx, seed, &hash, dir)?);
    }
    let aggregate = AggregateReport::from_reports(&reports).map_err(|e| e.in_stage("report"))?;
    let record = RunRecord {
        plan_hash: hash,
        overrides: overrides.to_vec(),
        reports: plan.seeds.iter().map(|s| format!("reports/seed-{s}.json")).collect(),
        aggregate: "reports/aggregate.json".into(),
        environment: Environment::current(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
        complete: true,
    };
    if let Some(d) = dir {
        let agg = d.aggregate();
        fs::write(&agg, to_canonical_json(&aggregate)).at(&agg)?;
        let rec = d.root.join("run.json");
        fs::write(&rec, to_canonical_json(&record)).at(&rec)?;
        fs::remove_file(d.incomplete_marker()).at(&d.incomplete_marker())?;
    }
    Ok(RunOutcome {
        record,
        reports,
        aggregate,
    })
}

/// Load everything named by the plan and run it into `run_dir`.
pub fn run_experiment(plan: &ExperimentPlan, run_dir: &Path, force: bool, overrides: &[String]) -> Result<RunOutcome> {
    plan.validate()?;
    let ctx = ExperimentContext::load(plan).map_err(|e| e.in_stage("load"))?;
    let dir = RunDir::create(run_dir, force)?;
    run_in_context(plan, &ctx, Some(&dir), overrides)
}

/// Ablation axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Layers,
    Scenario,
    Resolution,
    Complexity,
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layers" => Ok(Axis::Layers),
            "scenario" => Ok(Axis::Scenario),
            "resolution" => Ok(Axis::Resolution),
            "complexity" => Ok(Axis::Complexity),
            _ => Err(Error::Config(format!("unknown axis `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub detector: String,
    pub param_count: usize,
    pub accuracy: Summary,
    pub auc: Summary,
    pub audited_train_accuracy: f64,
    pub plan_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: Axis,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Markdown table; metrics rounded to four decimals, ties to even.
    pub fn to_markdown(&self) -> String {
        let mut out = format!(
            "| {:?} | detector | params | accuracy (mean ± sd) | AUC (mean ± sd) |\n|---|---|---|---|---|\n",
            self.axis
        )
        .to_lowercase();
        for r in &self.rows {
            out.push_str(&format!(
                "| {} | {} | {} | {:.4} ± {:.4} | {:.4} ± {:.4} |\n",
                r.label,
                r.detector,
                r.param_count,
                round4(r.accuracy.mean),
                round4(r.accuracy.std),
                round4(r.auc.mean),
                round4(r.auc.std)
            ));
        }
        out
    }
}

/// Plans for each row of an ablation axis. `values` overrides the default grid.
pub fn axis_plans(plan: &ExperimentPlan, axis: Axis, values: &[String], stage_shapes: &[[usize; 3]]) -> Result<Vec<(String, ExperimentPlan)>> {
    let mut rows = Vec::new();
    let base = ExperimentPlan {
        baseline: false,
        ..plan.clone()
    };
    let cnn_template = match &plan.detector {
        DetectorConfig::Cnn(c) => Some(c.clone()),
        DetectorConfig::Vanilla(_) => None,
    };
    let vanilla_template = match &plan.detector {
        DetectorConfig::Vanilla(c) => c.clone(),
        DetectorConfig::Cnn(c) => VanillaMintConfig {
            epochs: c.epochs,
            batch: c.batch,
            lr: c.lr,
            ..VanillaMintConfig::default()
        },
    };
    match axis {
        Axis::Layers => {
            let labels: Vec<String> = if values.is_empty() {
                (1..=stage_shapes.len())
                    .map(|k| format!("stage{k}"))
                    .chain(["outcome".to_string(), "combination".to_string()])
                    .collect()
            } else {
                values.to_vec()
            };
            for label in labels {
                let detector = match label.as_str() {
                    "combination" => DetectorConfig::Vanilla(VanillaMintConfig {
                        sources: (1..=stage_shapes.len() as u8).map(StageId::Stage).collect(),
                        ..vanilla_template.clone()
                    }),
                    "outcome" => DetectorConfig::Vanilla(VanillaMintConfig {
                        sources: vec![StageId::Outcome],
                        ..vanilla_template.clone()
                    }),
                    other => {
                        let StageId::Stage(k) = other.parse::<StageId>()? else { unreachable!() };
                        let shape = stage_shapes
                            .get(k as usize - 1)
                            .ok_or_else(|| Error::Config(format!("model has no stage {k}")))?;
                        match &cnn_template {
                            Some(c) => DetectorConfig::Cnn(CnnMintConfig {
                                stage: k,
                                kernel: c.fitted_kernel(shape[0], shape[1]),
                                ..c.clone()
                            }),
                            None => DetectorConfig::Vanilla(VanillaMintConfig {
                                sources: vec![StageId::Stage(k)],
                                ..vanilla_template.clone()
                            }),
                        }
                    }
                };
                rows.push((label, ExperimentPlan { detector, ..base.clone() }));
            }
        }
        Axis::Scenario => {
            let labels: Vec<String> = if values.is_empty() {
                vec!["high".into(), "medium".into(), "low".into()]
            } else {
                values.to_vec()
            };
            for label in labels {
                let plan = match label.parse::<Scenario>() {
                    Ok(s) => ExperimentPlan { scenario: s, ..base.clone() },
                    Err(_) => {
                        // `<scenario>@<scale>` pins an explicit scale.
                        let (s, scale) = label
                            .split_once('@')
                            .ok_or_else(|| Error::Config(format!("unknown scenario row `{label}`")))?;
                        ExperimentPlan {
                            scenario: s.parse()?,
                            scale: parse_num("scale", scale)?,
                            ..base.clone()
                        }
                    }
                };
                rows.push((label, plan));
            }
        }
        Axis::Resolution => {
            let labels: Vec<String> = if values.is_empty() {
                vec!["16".into(), "32".into(), "64".into()]
            } else {
                values.to_vec()
            };
            for label in labels {
                let r: usize = parse_num("resolution", &label)?;
                let mut p = base.clone();
                p.resolution = r;
                p.audited.model.resolution = r;
                rows.push((label, p));
            }
        }
        Axis::Complexity => {
            let c = cnn_template.ok_or_else(|| Error::Config("complexity ablation needs the cnn detector".into()))?;
            let labels: Vec<String> = if values.is_empty() {
                vec!["0.333".into(), "1".into(), "3".into()]
            } else {
                values.to_vec()
            };
            for label in labels {
                let m: f64 = match label.split_once('/') {
                    Some((a, b)) => parse_num::<f64>("width", a)? / parse_num::<f64>("width", b)?,
                    None => parse_num("width", &label)?,
                };
                let detector = DetectorConfig::Cnn(CnnMintConfig {
                    width_multiplier: m,
                    ..c.clone()
                });
                rows.push((label, ExperimentPlan { detector, ..base.clone() }));
            }
        }
    }
    Ok(rows)
}

/// Supplies an experiment context for a given resolution (training audited
/// models on demand for the resolution axis).
pub trait ContextProvider {
    fn context(&mut self, resolution: usize) -> Result<&ExperimentContext>;
}

/// Fixed context plus lazily trained audited models for other resolutions.
pub struct TrainingProvider {
    pub base: ExperimentContext,
    pub plan: AuditedPlan,
    pub extra: BTreeMap<usize, ExperimentContext>,
    /// Where trained checkpoints are written, if anywhere.
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainingProvider {
    pub fn new(base: ExperimentContext, plan: AuditedPlan) -> Self {
        TrainingProvider {
            base,
            plan,
            extra: BTreeMap::new(),
            checkpoint_dir: None,
        }
    }
}

impl ContextProvider for TrainingProvider {
    fn context(&mut self, resolution: usize) -> Result<&ExperimentContext> {
        if resolution == self.base.audited.config.resolution {
            return Ok(&self.base);
        }
        if !self.extra.contains_key(&resolution) {
            let (model, log) = train_audited_for(&self.plan, resolution, &self.base.sources)?;
            let hash = match &self.checkpoint_dir {
                Some(dir) => save_audited(&model, &log, &dir.join(format!("audited-r{resolution}.ckpt")))?,
                None => Sha256::digest(model.to_container().encode(crate::audited::CHECKPOINT_MAGIC)).into(),
            };
            self.extra.insert(
                resolution,
                ExperimentContext {
                    sources: self.base.sources.clone(),
                    audited: model,
                    model_hash: hash,
                    audited_train_accuracy: log.final_train_accuracy,
                },
            );
        }
        Ok(&self.extra[&resolution])
    }
}

/// Run every row of an ablation axis. With `dir`, each row gets its own run
/// directory under it and the table is written as `ablation-<axis>.md/.json`.
pub fn ablate(
    plan: &ExperimentPlan,
    axis: Axis,
    values: &[String],
    provider: &mut dyn ContextProvider,
    dir: Option<&Path>,
) -> Result<AblationTable> {
    let shapes: Vec<[usize; 3]> = provider
        .context(plan.resolution)?
        .audited
        .taps
        .iter()
        .map(|t| t.shape())
        .collect();
    let mut rows = Vec::new();
    for (label, row_plan) in axis_plans(plan, axis, values, &shapes)? {
        let ctx = provider.context(row_plan.resolution)?;
        let run_dir = match dir {
            Some(d) => Some(RunDir::create(&d.join(format!("{axis:?}-{label}").to_lowercase()), true)?),
            None => None,
        };
        let out = run_in_context(&row_plan, ctx, run_dir.as_ref(), &[])?;
        let agg = &out.aggregate.detectors[0];
        rows.push(AblationRow {
            label,
            detector: agg.name.clone(),
            param_count: agg.param_count,
            accuracy: agg.accuracy.clone(),
            auc: agg.auc.clone(),
            audited_train_accuracy: ctx.audited_train_accuracy,
            plan_hash: out.record.plan_hash.clone(),
        });
    }
    let table = AblationTable { axis, rows };
    if let Some(d) = dir {
        let name = format!("ablation-{axis:?}").to_lowercase();
        let md = d.join(format!("{name}.md"));
        fs::write(&md, table.to_markdown()).at(&md)?;
        let js = d.join(format!("{name}.json"));
        fs::write(&js, to_canonical_json(&table)).at(&js)?;
    }
    Ok(table)
}
