use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mint_core::aad::{extract_aad, read_store, write_store, AadInput, AadStore, StageId};
use mint_core::audited::AuditedModel;
use mint_core::dataset::{load_source, write_records, Role, SourceFormat, SourceSet};
use mint_core::detector::{build_for_store, train_mint, LossCurve, MintModel};
use mint_core::metrics::{emit_report, parse_report, to_canonical_json, AggregateReport, EvalReport, SideCounts};
use mint_core::protocol::{
    ablate, detector_name, evaluate_split, plan_split, run_experiment, save_audited, train_audited_for, Axis,
    ExperimentContext, ExperimentPlan, RunDir, TrainingProvider, PLAN_KEYS,
};
use mint_core::synth::CorpusSpec;
use mint_core::{Error, Result};

#[derive(Parser)]
#[command(name = "mint", version, about = "Membership inference testing for image classifiers")]
struct Cli {
    /// Root that relative paths are resolved against.
    #[arg(long, global = true, env = "MINT_WORKSPACE")]
    workspace: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct PlanArgs {
    /// Plan file (`key = value` lines).
    #[arg(long, alias = "config")]
    plan: PathBuf,
    /// Override a plan key, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic desk corpus as raw-record files.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8000)]
        d_count: usize,
        /// Comma-separated external source sizes.
        #[arg(long, default_value = "2000,2000,1000", value_delimiter = ',')]
        external: Vec<usize>,
        /// Native image side.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Stripe amplitude carried by the audited-training source.
        #[arg(long, default_value_t = 0.06)]
        stripe: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        force: bool,
    },
    /// Train the audited classifier on the plan's training source.
    TrainAudited {
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Extract auxiliary auditing data from the audited model.
    Extract {
        /// Audited-model checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Source used to train the audited model (members).
        #[arg(long)]
        d_source: Option<PathBuf>,
        /// External sources (non-members), comma-separated.
        #[arg(long, value_delimiter = ',')]
        sources: Vec<PathBuf>,
        /// Stages to tap, e.g. `1,4,outcome`.
        #[arg(long, value_delimiter = ',', required = true)]
        stages: Vec<StageId>,
        /// Keep the full activation blocks (needed by the CNN detector).
        #[arg(long)]
        blocks: bool,
        /// `records` or `directory`.
        #[arg(long, default_value = "records")]
        format: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train a membership detector on an AAD store.
    TrainMint {
        #[arg(long)]
        store: PathBuf,
        #[command(flatten)]
        plan: PlanArgs,
        /// `cnn` or `vanilla`; overrides the plan.
        #[arg(long)]
        detector: Option<String>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Score the eval side with a trained detector and write a report.
    Evaluate {
        /// Trained detector.
        #[arg(long)]
        mint: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Report JSON; the ROC CSV is written next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Run a whole plan (all seeds) into a run directory.
    Run {
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Run one ablation axis and write its table.
    Ablate {
        #[command(flatten)]
        plan: PlanArgs,
        /// layers | scenario | resolution | complexity
        #[arg(long)]
        axis: Axis,
        /// Row values replacing the default grid, comma-separated.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Aggregate per-seed reports from run directories or report files.
    Report {
        /// Run directories or report JSON files.
        #[arg(long, value_delimiter = ',', required = true)]
        runs: Vec<PathBuf>,
        /// Aggregate JSON; a markdown table is written next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// List accepted plan keys.
    PlanKeys,
}

struct Ctx {
    workspace: Option<PathBuf>,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        match &self.workspace {
            Some(w) if p.is_relative() => w.join(p),
            _ => p.to_path_buf(),
        }
    }

    fn plan(&self, args: &PlanArgs) -> Result<ExperimentPlan> {
        let path = self.path(&args.plan);
        let text = fs::read_to_string(&path).map_err(|source| Error::Io { path: path.clone(), source })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        ExperimentPlan::parse_with_overrides(&text, &base, &args.overrides)
    }

    /// Resolve an output path, refusing to clobber without `force`.
    fn out(&self, p: &Path, force: bool) -> Result<PathBuf> {
        let p = self.path(p);
        if p.exists() && !force {
            return Err(Error::Config(format!("{} already exists; pass --force to overwrite", p.display())));
        }
        if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|source| Error::Io { path: parent.to_path_buf(), source })?;
        }
        Ok(p)
    }
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn format_of(name: &str) -> Result<SourceFormat> {
    match name {
        "records" => Ok(SourceFormat::RawRecords),
        "directory" => Ok(SourceFormat::ImageDirectory),
        other => Err(Error::Config(format!("unknown source format `{other}`"))),
    }
}

fn load_store_for(ctx: &ExperimentContext, path: &Path) -> Result<AadStore> {
    read_store(path, Some(&ctx.model_hash))
}

fn run(cli: Cli) -> Result<()> {
    let c = Ctx { workspace: cli.workspace };
    match cli.command {
        Command::Synth {
            out,
            d_count,
            external,
            size,
            stripe,
            seed,
            force,
        } => {
            let dir = c.path(&out);
            let mut spec = CorpusSpec {
                d_count,
                external_counts: external,
                stripe_amplitude: stripe,
                seed,
                ..CorpusSpec::default()
            };
            spec.style.size = size;
            let sources = spec.generate()?;
            fs::create_dir_all(&dir).map_err(|source| Error::Io { path: dir.clone(), source })?;
            for s in &sources {
                let path = c.out(&dir.join(format!("{}.bin", s.id())), force)?;
                let items: Vec<_> = s
                    .manifest
                    .entries
                    .iter()
                    .zip(&s.images)
                    .map(|(e, img)| (e.sample_id, e.class_label, img))
                    .collect();
                write_records(&path, &items)?;
                println!("{}\t{} images", path.display(), s.len());
            }
        }
        Command::TrainAudited { plan, seed, out, force } => {
            let mut plan = c.plan(&plan)?;
            let out = c.out(&out, force)?;
            if let Some(s) = seed {
                plan.audited.seed = s;
            }
            let d = plan.d_source.clone().ok_or_else(|| Error::Config("plan has no d_source".into()))?;
            let format = format_of(&plan.source_format)?;
            let source = load_source(&d, format).map_err(|e| e.in_stage("load"))?.with_role(Role::AuditedTraining);
            let set = SourceSet::new(vec![source])?;
            let (model, log) = train_audited_for(&plan.audited, plan.resolution, &set).map_err(|e| e.in_stage("train"))?;
            let hash = save_audited(&model, &log, &out)?;
            for e in &log.epochs {
                println!("epoch {}\tloss {:.6}\taccuracy {:.4}", e.epoch, e.loss, e.accuracy);
            }
            println!("final train accuracy {:.4}", log.final_train_accuracy);
            println!("checkpoint {} sha256 {}", out.display(), hex(&hash));
        }
        Command::Extract {
            model,
            d_source,
            sources,
            stages,
            blocks,
            format,
            out,
            force,
        } => {
            let (audited, hash) = AuditedModel::load_checkpoint(&c.path(&model)).map_err(|e| e.in_stage("load"))?;
            let out_path = c.path(&out);
            if out_path.exists() {
                if let Ok(bytes) = fs::read(&out_path) {
                    if let Err(e) = AadStore::decode(&bytes, Some(&hash)) {
                        if matches!(e, Error::Provenance(_)) {
                            return Err(e);
                        }
                    }
                }
            }
            let out_path = c.out(&out, force)?;
            let format = format_of(&format)?;
            let mut all = Vec::new();
            if let Some(d) = d_source {
                all.push(load_source(&c.path(&d), format)?.with_role(Role::AuditedTraining));
            }
            for p in &sources {
                all.push(load_source(&c.path(p), format)?.with_role(Role::External));
            }
            let set = SourceSet::new(all)?;
            let mut inputs = Vec::new();
            for s in &set.sources {
                let m = match s.manifest.role {
                    Role::AuditedTraining => mint_core::dataset::Membership::D,
                    Role::External => mint_core::dataset::Membership::E,
                };
                for (e, img) in s.manifest.entries.iter().zip(&s.images) {
                    inputs.push(AadInput {
                        sample_id: e.sample_id,
                        membership: m,
                        image: img,
                    });
                }
            }
            let store = extract_aad(&audited, hash, &inputs, &stages, blocks).map_err(|e| e.in_stage("extract"))?;
            write_store(&store, &out_path)?;
            println!("{} records ({} samples × {} stages) -> {}", store.len(), inputs.len(), stages.len(), out_path.display());
        }
        Command::TrainMint {
            store,
            plan,
            detector,
            seed,
            out,
            force,
        } => {
            let mut args = plan;
            if let Some(d) = detector {
                args.overrides.insert(0, format!("detector={d}"));
            }
            let plan = c.plan(&args)?;
            let out = c.out(&out, force)?;
            let ctx = ExperimentContext::load(&plan).map_err(|e| e.in_stage("load"))?;
            let store = load_store_for(&ctx, &c.path(&store))?;
            let split = plan_split(&plan, &ctx.sources, seed).map_err(|e| e.in_stage("split"))?;
            let mut model = build_for_store(&plan.detector, &store, seed).map_err(|e| e.in_stage("train"))?;
            let curve = train_mint(&mut model, &store, &split, seed).map_err(|e| e.in_stage("train"))?;
            let hash = model.save(&out)?;
            write(&sibling(&out, ".loss.json"), &to_canonical_json(&curve))?;
            println!("initial loss {:.6} final loss {:.6}", curve.initial, curve.final_loss);
            println!("detector {} sha256 {}", out.display(), hex(&hash));
        }
        Command::Evaluate {
            mint,
            store,
            plan,
            seed,
            out,
            force,
        } => {
            let plan = c.plan(&plan)?;
            let out = c.out(&out, force)?;
            let ctx = ExperimentContext::load(&plan).map_err(|e| e.in_stage("load"))?;
            let store = load_store_for(&ctx, &c.path(&store))?;
            let mint_path = c.path(&mint);
            let (model, _) = MintModel::load(&mint_path)?;
            let loss_path = sibling(&mint_path, ".loss.json");
            let text = fs::read_to_string(&loss_path).map_err(|source| Error::Io { path: loss_path, source })?;
            let curve = LossCurve::parse(&text)?;
            let split = plan_split(&plan, &ctx.sources, seed).map_err(|e| e.in_stage("split"))?;
            let row = evaluate_split(&model, &store, &split, &detector_name(&model.config), &curve)
                .map_err(|e| e.in_stage("evaluate"))?;
            let report = EvalReport {
                plan_hash: plan.hash(),
                seed,
                resolution: plan.resolution,
                audited_train_accuracy: ctx.audited_train_accuracy,
                counts: SideCounts {
                    train_d: split.train_d.len(),
                    train_e: split.train_e.len(),
                    eval_d: split.eval_d.len(),
                    eval_e: split.eval_e.len(),
                },
                detectors: vec![row],
            };
            report.check_balanced()?;
            let csv = out.with_extension("csv");
            emit_report(&report, &out, &csv)?;
            let p = report.primary();
            println!("accuracy {:.4} auc {:.4} -> {}", p.accuracy, p.auc, out.display());
        }
        Command::Run { plan: args, out, force } => {
            let plan = c.plan(&args)?;
            let outcome = run_experiment(&plan, &c.path(&out), force, &args.overrides)?;
            print!("{}", outcome.aggregate.to_markdown());
            println!("plan {} -> {}", outcome.record.plan_hash, c.path(&out).display());
        }
        Command::Ablate {
            plan: args,
            axis,
            values,
            out,
            force,
        } => {
            let plan = c.plan(&args)?;
            let root = RunDir::create(&c.path(&out), force)?.root;
            let ctx = ExperimentContext::load(&plan).map_err(|e| e.in_stage("load"))?;
            let mut provider = TrainingProvider::new(ctx, plan.audited.clone());
            provider.checkpoint_dir = Some(root.join("models"));
            let table = ablate(&plan, axis, &values, &mut provider, Some(&root))?;
            print!("{}", table.to_markdown());
        }
        Command::Report { runs, out, force } => {
            let out = c.out(&out, force)?;
            let mut files = Vec::new();
            for r in &runs {
                let p = c.path(r);
                if p.is_dir() {
                    let dir = p.join("reports");
                    let mut found: Vec<PathBuf> = fs::read_dir(&dir)
                        .map_err(|source| Error::Io { path: dir.clone(), source })?
                        .filter_map(|e| e.ok().map(|e| e.path()))
                        .filter(|f| {
                            f.file_name()
                                .and_then(|n| n.to_str())
                                .is_some_and(|n| n.starts_with("seed-") && n.ends_with(".json"))
                        })
                        .collect();
                    found.sort();
                    files.extend(found);
                } else {
                    files.push(p);
                }
            }
            let mut reports = Vec::new();
            for f in &files {
                let text = fs::read_to_string(f).map_err(|source| Error::Io { path: f.clone(), source })?;
                reports.push(parse_report(&text)?);
            }
            reports.sort_by_key(|r| r.seed);
            let agg = AggregateReport::from_reports(&reports)?;
            write(&out, &to_canonical_json(&agg))?;
            let table = agg.to_markdown();
            write(&out.with_extension("md"), &table)?;
            print!("{table}");
        }
        Command::PlanKeys => {
            for (k, doc) in PLAN_KEYS {
                println!("{k:<22}{doc}");
            }
        }
    }
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
