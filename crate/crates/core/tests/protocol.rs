use std::path::Path;

use mint_core::audited::{build_model, train_audited, AuditedModelConfig, AuditedTrainOptions, StageConfig};
use mint_core::dataset::{
    make_membership_split, RawImage, Role, Source, SourceSet, SplitCounts, SplitOptions,
};
use mint_core::detector::{CnnMintConfig, DetectorConfig, LossCurve};
use mint_core::protocol::*;
use mint_core::synth::{generate_source, SynthStyle};
use mint_core::Error;
use proptest::prelude::*;
use sha2::{Digest, Sha256};

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[test]
fn rotation_holds_out_the_requested_source() {
    let srcs = names(&["S1", "S2", "S3"]);
    let (train, eval) = assemble_case(Case::Rotate(1), &srcs, "S3", &[]).unwrap();
    assert_eq!(train, names(&["S1", "S3"]));
    assert_eq!(eval, "S2");
    let (train, eval) = assemble_case(Case::Baseline, &srcs, "S3", &[]).unwrap();
    assert_eq!((train, eval.as_str()), (names(&["S1", "S2"]), "S3"));
}

#[test]
fn rotation_needs_two_sources_and_respects_pins() {
    let one = names(&["S1"]);
    assert!(matches!(assemble_case(Case::Baseline, &one, "S1", &[]), Err(Error::Capacity(_))));
    let srcs = names(&["S1", "S2", "S3"]);
    let pins = names(&["S2"]);
    assert!(assemble_case(Case::Rotate(1), &srcs, "", &pins).is_err());
    let all = all_rotations(&srcs, &pins).unwrap();
    let evals: Vec<&str> = all.iter().map(|(_, e)| e.as_str()).collect();
    assert_eq!(evals, vec!["S1", "S3"]);
    for (train, eval) in &all {
        assert!(train.contains(&"S2".to_string()));
        assert!(!train.contains(eval));
        assert_eq!(train.len() + 1, srcs.len());
    }
}

#[test]
fn scenario_counts_scale_and_floor() {
    let c = scenario_counts(Scenario::High, 0.08, 1000).unwrap();
    assert_eq!((c.train_d, c.train_e, c.eval), (4000, 4000, 1000));
    assert_eq!(scenario_counts(Scenario::Medium, 1.0, 10).unwrap().train_d, 25_000);
    assert_eq!(scenario_counts(Scenario::Low, 0.1, 10).unwrap().train_d, 50);
    assert!(matches!(scenario_counts(Scenario::Low, 0.05, 10), Err(Error::Config(_))));
    assert!(scenario_counts(Scenario::High, 0.0, 10).is_err());
    assert!(scenario_counts(Scenario::High, 1.5, 10).is_err());
}

#[test]
fn plan_parsing_defaults_overrides_and_errors() {
    let base = Path::new("/data");
    let text = "# desk plan\naudited = model.ckpt\nd_source = d.bin\nexternal = a.bin, b.bin\n\
                detector = cnn\nstages = 2\nseeds = 4,5\nscenario = low\nscale = 0.5\n";
    let plan = ExperimentPlan::parse(text, base).unwrap();
    assert_eq!(plan.audited_checkpoint.as_deref(), Some(Path::new("/data/model.ckpt")));
    assert_eq!(plan.external_sources.len(), 2);
    assert_eq!(plan.seeds, vec![4, 5]);
    assert_eq!(plan.scenario, Scenario::Low);
    match &plan.detector {
        DetectorConfig::Cnn(c) => {
            assert_eq!(c.stage, 2);
            assert_eq!((c.filters, c.kernel, c.epochs), (64, 5, 30));
        }
        other => panic!("unexpected {other:?}"),
    }
    let over = ExperimentPlan::parse_with_overrides(text, base, &["epochs=3".into(), "case=rotate:0".into()]).unwrap();
    assert_eq!(over.detector.epochs(), 3);
    assert_eq!(over.case, Case::Rotate(0));

    let default = ExperimentPlan::parse("", base).unwrap();
    assert_eq!(default.seeds, vec![1, 2, 3]);

    for bad in ["bogus = 1", "seeds = 1\nseeds = 2", "detector = rnn", "batch = 3", "scale = 2", "no equals sign"] {
        assert!(matches!(ExperimentPlan::parse(bad, base), Err(Error::Config(_))), "{bad}");
    }
    let v = ExperimentPlan::parse("detector = vanilla\nstages = 1, outcome\npooling = mean", base).unwrap();
    assert_eq!(v.detector.stages().len(), 2);
}

#[test]
fn plan_hash_tracks_every_field() {
    let base = Path::new("/x");
    let plan = ExperimentPlan::parse("seeds = 1,2", base).unwrap();
    let same = ExperimentPlan::parse("# comment\nseeds=1, 2\n", base).unwrap();
    assert_eq!(plan.hash(), same.hash());
    for change in [
        "seeds = 1,3",
        "seeds = 1,2\nscale = 0.5",
        "seeds = 1,2\nepochs = 29",
        "seeds = 1,2\nlr = 0.002",
        "seeds = 1,2\nbaseline = true",
        "seeds = 1,2\ncase = rotate:1",
        "seeds = 1,2\nresolution = 64",
        "seeds = 1,2\naudited_epochs = 3",
        "seeds = 1,2\nwidth_multiplier = 3",
    ] {
        let other = ExperimentPlan::parse(change, base).unwrap();
        assert_ne!(plan.hash(), other.hash(), "{change}");
    }
}

fn small_sources(seed: u64, counts: (usize, usize, usize)) -> Vec<Source> {
    let style = SynthStyle { size: 12, ..SynthStyle::default() };
    vec![
        generate_source("d", Role::AuditedTraining, counts.0, 0, &style.with_stripes(0.06), seed).unwrap(),
        generate_source("e1", Role::External, counts.1, 1_000_000, &style, seed + 1).unwrap(),
        generate_source("e2", Role::External, counts.2, 2_000_000, &style, seed + 2).unwrap(),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn random_splits_are_disjoint(seed in any::<u64>(), train in 1usize..20, eval in 1usize..10, corpus in 0u64..4) {
        let sources = small_sources(corpus, (40, 30, 20));
        let manifests: Vec<_> = sources.iter().map(|s| &s.manifest).collect();
        let counts = SplitCounts { train_d: train, train_e: train, eval };
        let split = make_membership_split(manifests[0], &[manifests[1]], manifests[2], counts, SplitOptions::default(), seed).unwrap();
        prop_assert!(verify_disjointness(&manifests, std::slice::from_ref(&split)).is_ok());
        let train_ids: std::collections::BTreeSet<_> = split.train().map(|(i, _)| i).collect();
        for (id, _) in split.eval() {
            prop_assert!(!train_ids.contains(&id));
        }
        prop_assert_eq!(split.eval_d.len(), split.eval_e.len());
    }
}

fn tiny_context(plant_duplicate: bool) -> ExperimentContext {
    let mut sources = small_sources(7, (200, 100, 100));
    sources.push(generate_source("e3", Role::External, 60, 3_000_000, &SynthStyle { size: 12, ..SynthStyle::default() }, 99).unwrap());
    if plant_duplicate {
        // Copy one D image into an external source under a new id.
        let img: RawImage = sources[0].images[5].clone();
        let mut items: Vec<(u64, Option<u32>, RawImage)> = (0..sources[3].len())
            .map(|i| {
                let e = &sources[3].manifest.entries[i];
                (e.sample_id, e.class_label, sources[3].images[i].clone())
            })
            .collect();
        items.push((3_999_999, Some(0), img));
        sources[3] = Source::from_images("e3", Role::External, items).unwrap();
    }
    let set = SourceSet::new(sources).unwrap();
    let config = AuditedModelConfig {
        stages: vec![StageConfig { blocks: 1, channels: 4 }, StageConfig { blocks: 1, channels: 6 }],
        embedding_dim: 8,
        resolution: 16,
        ..AuditedModelConfig::default()
    };
    let mut model = build_model(config, 3).unwrap();
    let d = set.by_id("d").unwrap();
    let log = train_audited(&mut model, d, &AuditedTrainOptions { epochs: 1, ..Default::default() }).unwrap();
    let hash: [u8; 32] = Sha256::digest(model.to_container().encode(mint_core::audited::CHECKPOINT_MAGIC)).into();
    ExperimentContext {
        sources: set,
        audited: model,
        model_hash: hash,
        audited_train_accuracy: log.final_train_accuracy,
    }
}

fn tiny_plan() -> ExperimentPlan {
    ExperimentPlan {
        scenario: Scenario::Low,
        scale: 0.1,
        eval_per_side: 20,
        seeds: vec![1, 2],
        resolution: 16,
        baseline: true,
        detector: DetectorConfig::Cnn(CnnMintConfig { filters: 4, kernel: 3, epochs: 2, batch: 20, ..Default::default() }),
        ..ExperimentPlan::default()
    }
}

#[test]
fn end_to_end_run_is_deterministic_and_complete() {
    let ctx = tiny_context(false);
    let plan = tiny_plan();
    let tmp = tempfile::tempdir().unwrap();
    let mut aggregates = Vec::new();
    for run in ["a", "b"] {
        let dir = RunDir::create(&tmp.path().join(run), false).unwrap();
        let out = run_in_context(&plan, &ctx, Some(&dir), &[]).unwrap();
        assert_eq!(out.reports.len(), 2);
        for r in &out.reports {
            assert_eq!(r.detectors.len(), 2);
            assert_eq!(r.detectors[0].name, "cnn-stage1");
            assert_eq!(r.detectors[1].name, BASELINE_NAME);
            assert_eq!((r.counts.train_d, r.counts.eval_d, r.counts.eval_e), (50, 20, 20));
            assert_eq!(r.plan_hash, plan.hash());
        }
        assert!(!dir.incomplete_marker().exists());
        assert!(dir.root.join("plan.lock").is_file());
        assert!(dir.roc(1).is_file() && dir.seed_report(2).is_file());
        aggregates.push(std::fs::read(dir.aggregate()).unwrap());
    }
    assert_eq!(aggregates[0], aggregates[1]);
    assert!(RunDir::create(&tmp.path().join("a"), false).is_err());
    assert!(RunDir::create(&tmp.path().join("a"), true).is_ok());
}

#[test]
fn rotation_run_uses_other_eval_source() {
    let ctx = tiny_context(false);
    let plan = ExperimentPlan { case: Case::Rotate(0), ..tiny_plan() };
    let split = plan_split(&plan, &ctx.sources, 1).unwrap();
    assert!(split.eval_e.iter().all(|id| (1_000_000..2_000_000).contains(id)));
    assert!(split.train_e.iter().all(|id| *id >= 2_000_000));
}

#[test]
fn planted_duplicate_aborts_the_run() {
    let ctx = tiny_context(true);
    let report = verify_disjointness(&ctx.sources.manifests(), &[]);
    assert_eq!(report.collisions, vec![(5, 3_999_999)]);
    let err = run_in_context(&tiny_plan(), &ctx, None, &[]).unwrap_err();
    assert!(matches!(err.root(), Error::Protocol(_)), "{err}");
    assert!(err.to_string().contains("3999999"), "{err}");
}

#[test]
fn missing_checkpoint_fails_before_loading_data() {
    let plan = ExperimentPlan {
        audited_checkpoint: Some("/nonexistent/model.ckpt".into()),
        d_source: Some("/nonexistent/d.bin".into()),
        ..ExperimentPlan::default()
    };
    let tmp = tempfile::tempdir().unwrap();
    let err = run_experiment(&plan, &tmp.path().join("run"), false, &[]).unwrap_err();
    assert!(matches!(err.root(), Error::Provenance(_)), "{err}");
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn unbalanced_eval_is_rejected() {
    let ctx = tiny_context(false);
    let plan = tiny_plan();
    let mut split = plan_split(&plan, &ctx.sources, 1).unwrap();
    let store = extract_for_split(&ctx, &split, &[mint_core::aad::StageId::Stage(1)], true).unwrap();
    let model = mint_core::detector::build_for_store(&plan.detector, &store, 1).unwrap();
    split.eval_e.pop();
    let curve = LossCurve { initial: 0.7, epochs: vec![], final_loss: 0.7 };
    assert!(evaluate_split(&model, &store, &split, "x", &curve).is_err());
}

#[test]
fn layer_axis_covers_stages_outcome_and_combination() {
    let plan = ExperimentPlan::default();
    let shapes = AuditedModelConfig::default().taps().iter().map(|t| t.shape()).collect::<Vec<_>>();
    let rows = axis_plans(&plan, Axis::Layers, &[], &shapes).unwrap();
    let labels: Vec<&str> = rows.iter().map(|(l, _)| l.as_str()).collect();
    assert_eq!(labels, ["stage1", "stage2", "stage3", "stage4", "outcome", "combination"]);
    match &rows[3].1.detector {
        DetectorConfig::Cnn(c) => assert_eq!((c.stage, c.kernel), (4, 3)),
        other => panic!("{other:?}"),
    }
    assert_eq!(rows[5].1.detector.stages().len(), 4);
    let widths = axis_plans(&plan, Axis::Complexity, &["1/3".into(), "3".into()], &shapes).unwrap();
    assert_eq!(widths.len(), 2);
    let res = axis_plans(&plan, Axis::Resolution, &[], &shapes).unwrap();
    assert_eq!(res.iter().map(|(_, p)| p.resolution).collect::<Vec<_>>(), [16, 32, 64]);
}

#[test]
fn small_ablation_produces_a_table() {
    let ctx = tiny_context(false);
    let plan = ExperimentPlan { seeds: vec![1], baseline: false, ..tiny_plan() };
    let mut provider = TrainingProvider::new(ctx, Default::default());
    let tmp = tempfile::tempdir().unwrap();
    let table = ablate(&plan, Axis::Complexity, &["1/3".into(), "1".into()], &mut provider, Some(tmp.path())).unwrap();
    assert_eq!(table.rows.len(), 2);
    assert!(table.rows[0].param_count < table.rows[1].param_count);
    let md = std::fs::read_to_string(tmp.path().join("ablation-complexity.md")).unwrap();
    assert!(md.lines().count() == 4, "{md}");
}
