use std::fs;

use crs_debias::dataset::SyntheticParams;
use crs_debias::experiment::*;
use crs_debias::recommender::TrainMode;
use crs_debias::Error;

fn small_config(dir: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.synthetic = Some(SyntheticParams {
        n_users: 60,
        n_items: 150,
        n_attrs: 10,
        attrs_per_item: 2,
        interactions_per_user: 10,
        ..SyntheticParams::default()
    });
    cfg.recommender.pal.dim = 8;
    cfg.recommender.pal.epochs = 4;
    cfg.csm.mapper.epochs = 20;
    cfg.policy.train.pretrain_episodes = 40;
    cfg.policy.train.rl_episodes = 48;
    cfg.output_dir = dir.to_path_buf();
    cfg.seed = 7;
    cfg
}

#[test]
fn pipeline_writes_the_run_layout_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let (a, report_a) = run_pipeline(&cfg).unwrap();
    let (b, report_b) = run_pipeline(&ExperimentConfig { parallelism: 1, ..cfg.clone() }).unwrap();
    assert_ne!(a.path, b.path);
    for f in [
        "manifest.json",
        "stats.json",
        "catalog.json",
        "split.json",
        "model.bin",
        "mapper.bin",
        "policy_pop.bin",
        "policy_unpop.bin",
        "episodes.jsonl",
        "metrics.json",
    ] {
        assert!(a.path.join(f).is_file(), "missing {f}");
    }
    assert_eq!(report_a, report_b);
    assert_eq!(fs::read(a.file(METRICS)).unwrap(), fs::read(b.file(METRICS)).unwrap());
    assert_eq!(fs::read(a.file("episodes.jsonl")).unwrap(), fs::read(b.file("episodes.jsonl")).unwrap());

    let manifest = RunDir::open(&a.path).unwrap().manifest;
    assert_eq!(manifest.seeds, Seeds::derive(7));
    assert_eq!(manifest.stages, ["prepare", "train-rec", "fit-csm", "train-policy", "simulate"]);
    assert_eq!(manifest.outputs["metrics.json"], sha256_file(&a.file(METRICS)).unwrap());
}

#[test]
fn staged_run_matches_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        policy: PolicyConfig {
            kind: PolicyKind::SingleRl,
            ..small_config(tmp.path()).policy
        },
        ..small_config(tmp.path())
    };
    let (_, direct) = run_pipeline(&cfg).unwrap();

    let mut run = RunDir::create(&cfg).unwrap();
    run.prepare().unwrap();
    let mut run = RunDir::open(&run.path).unwrap();
    let data = run.load_prepared().unwrap();
    run.train_recommender(&data).unwrap();
    let model = run.load_model().unwrap();
    run.fit_csm(&data, &model).unwrap();
    let model = run.load_model().unwrap();
    run.train_policy(&data, &model).unwrap();
    let policy = run.load_policy(&data).unwrap();
    let staged = run.simulate(&data, &model, &policy).unwrap();
    assert_eq!(staged, direct);
    assert_eq!(run.load_episodes().unwrap().len(), data.split.test.len());
}

#[test]
fn baseline_path_with_maxent() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(tmp.path());
    cfg.recommender.mode = TrainMode::Bpr;
    cfg.csm.enabled = false;
    cfg.policy.kind = PolicyKind::Maxent;
    let (run, report) = run_pipeline(&cfg).unwrap();
    assert!(report.sr.value().is_some());
    assert!(!run.file("mapper.bin").exists());
    assert!(!run.file("policy_single.bin").exists());
}

#[test]
fn csm_without_trained_model_is_rejected() {
    let mut cfg = small_config(std::path::Path::new("unused"));
    cfg.recommender.mode = TrainMode::None;
    match cfg.validate() {
        Err(Error::Validation(m)) => assert_eq!(m, "CSM requires trained model"),
        other => panic!("unexpected {other:?}"),
    }
    assert!(run_pipeline(&cfg).unwrap_err().is_validation());
}

#[test]
fn overrides_and_validation() {
    let mut cfg = ExperimentConfig::default();
    cfg.set("recommender.mode=bpr").unwrap();
    cfg.set("session.max_turns=9").unwrap();
    cfg.set("policy.kind=maxent").unwrap();
    assert_eq!(cfg.recommender.mode, TrainMode::Bpr);
    assert_eq!(cfg.session.max_turns, 9);
    assert_eq!(cfg.policy.kind, PolicyKind::Maxent);
    assert!(cfg.set("nonsense").is_err());
    assert!(cfg.set("recommender.mode=sideways").is_err());
    assert!(ExperimentConfig::from_json(r#"{"sed": 1}"#).is_err());

    let mut bad = ExperimentConfig::default();
    bad.dataset.split = [0.5, 0.2, 0.1];
    assert!(bad.validate().is_err());
    bad = ExperimentConfig::default();
    bad.dataset.synthetic = None;
    assert!(bad.validate().is_err());
    bad.dataset.files = Some(crs_debias::dataset::CatalogFiles {
        interactions: "/nonexistent/interactions.tsv".into(),
        items: "/nonexistent/items.tsv".into(),
        categories: None,
    });
    assert!(bad.validate().is_err());
}

#[test]
fn ablation_table_has_the_requested_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let variants = ablation_variants(&[], PolicyKind::SingleRl);
    assert_eq!(variants.iter().map(|v| v.name.as_str()).collect::<Vec<_>>(), ["full", "baseline"]);

    let (dir, report) = run_ablation_dir(&cfg, &[Stage::Dpl, Stage::Pal, Stage::Csm, Stage::Pal], PolicyKind::Maxent).unwrap();
    let names: Vec<&str> = report.variants.iter().map(|v| v.variant.name.as_str()).collect();
    assert_eq!(names, ["full", "-PAL", "-CSM", "-DPL", "baseline"]);

    let md = fs::read_to_string(emit_report(&dir, ReportFormat::Markdown).unwrap()).unwrap();
    let lines: Vec<&str> = md.lines().collect();
    assert_eq!(lines.len(), 7);
    assert_eq!(lines[0], "| Variant | PER | PSR | PCU | SR | HSR | TSR | AT |");
    assert!(lines[2].starts_with("| full |") && lines[6].starts_with("| baseline |"));

    let csv = fs::read_to_string(emit_report(&dir, ReportFormat::Csv).unwrap()).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.starts_with("variant,per,psr,pcu,sr,at,hsr,tsr\n"));

    let json_path = emit_report(&dir, ReportFormat::Json).unwrap();
    let first = fs::read(&json_path).unwrap();
    emit_report(&dir, ReportFormat::Json).unwrap();
    assert_eq!(first, fs::read(&json_path).unwrap());
}

#[test]
fn report_needs_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(emit_report(tmp.path(), ReportFormat::Json).is_err());
}

#[test]
fn shipped_configs_parse() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let synthetic = ExperimentConfig::load(&root.join("synthetic.json")).unwrap();
    synthetic.validate().unwrap();
    assert_eq!(synthetic.policy.kind, PolicyKind::DualRl);
    let lastfm = ExperimentConfig::load(&root.join("lastfm.json")).unwrap();
    assert!(lastfm.dataset.synthetic.is_none() && lastfm.dataset.files.is_some());
}
