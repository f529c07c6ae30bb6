//! Experiment orchestration: configuration, the staged pipeline, run
//! directories, ablations and report rendering.
//!
//! A run directory holds:
//!
//! | file | written by |
//! |---|---|
//! | `manifest.json` | every stage (config, seeds, content hashes) |
//! | `stats.json`, `catalog.json`, `split.json` | prepare |
//! | `model.bin` | train-rec, then rewritten by fit-csm |
//! | `mapper.bin` | fit-csm |
//! | `policy_single.bin` or `policy_pop.bin` + `policy_unpop.bin` | train-policy |
//! | `episodes.jsonl`, `metrics.json` | simulate |

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::coldstart::{apply_csm, fit_mapper, AttributeMapper, MapperConfig};
use crate::dataset::{
    compute_popularity_and_tiers, filter_min_interactions, generate_synthetic, load_catalog,
    split_interactions, Catalog, CatalogFiles, CatalogStats, DataSplit, ItemId, SyntheticParams,
    UserId, DEFAULT_SPLIT,
};
use crate::error::{Error, Result};
use crate::metrics::{MetricsReport, ReportConfig, METRIC_COLUMNS};
use crate::policy::{
    train_dual, train_policy, DualAgent, DualPolicy, MaxEntropyAgent, NetworkAgent, NetworkMode,
    PolicyNetwork, PolicyTrainConfig, RewardConfig,
};
use crate::recommender::{train, FactorizationModel, PalConfig, TrainMode};
use crate::seed;
use crate::simulator::{read_episodes_jsonl, run_suite, write_episodes_jsonl, Agent, Components, EpisodeLog, SessionConfig};

pub const MANIFEST: &str = "manifest.json";
pub const METRICS: &str = "metrics.json";
pub const ABLATION: &str = "ablation.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub synthetic: Option<SyntheticParams>,
    pub files: Option<CatalogFiles>,
    pub min_interactions: usize,
    pub split: [f64; 3],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            synthetic: Some(SyntheticParams::default()),
            files: None,
            min_interactions: 0,
            split: DEFAULT_SPLIT,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecommenderConfig {
    pub mode: TrainMode,
    pub pal: PalConfig,
}

impl Default for RecommenderConfig {
    fn default() -> Self {
        RecommenderConfig {
            mode: TrainMode::Pal,
            pal: PalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsmConfig {
    pub enabled: bool,
    pub mapper: MapperConfig,
}

impl Default for CsmConfig {
    fn default() -> Self {
        CsmConfig {
            enabled: true,
            mapper: MapperConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    #[serde(alias = "max-entropy")]
    Maxent,
    SingleRl,
    DualRl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub train: PolicyTrainConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            kind: PolicyKind::DualRl,
            train: PolicyTrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Popularity above which a shown item counts as popular. Defaults to
    /// the catalog's head threshold.
    pub head_threshold: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub session: SessionConfig,
    pub recommender: RecommenderConfig,
    pub csm: CsmConfig,
    pub policy: PolicyConfig,
    pub metrics: MetricsConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Worker threads for episode simulation; results do not depend on it.
    pub parallelism: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            session: SessionConfig::default(),
            recommender: RecommenderConfig::default(),
            csm: CsmConfig::default(),
            policy: PolicyConfig::default(),
            metrics: MetricsConfig::default(),
            output_dir: PathBuf::from("runs"),
            seed: 0,
            parallelism: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

/// Seeds handed to each component, all derived from the master seed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub dataset: u64,
    pub split: u64,
    pub recommender: u64,
    pub mapper: u64,
    pub policy: u64,
    pub simulation: u64,
}

impl Seeds {
    pub fn derive(master: u64) -> Self {
        let d = |name| seed::derive_named(master, name);
        Seeds {
            master,
            dataset: d("dataset"),
            split: d("split"),
            recommender: d("recommender"),
            mapper: d("mapper"),
            policy: d("policy"),
            simulation: d("simulation"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::derive(self.seed)
    }

    /// Copy with every component seed replaced by its derived value.
    pub fn seeded(&self) -> Self {
        let s = self.seeds();
        let mut cfg = self.clone();
        if let Some(p) = cfg.dataset.synthetic.as_mut() {
            p.seed = s.dataset;
        }
        cfg.recommender.pal.seed = s.recommender;
        cfg.csm.mapper.seed = s.mapper;
        cfg.policy.train.seed = s.policy;
        cfg.session.seed = s.simulation;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: &str| Err(Error::Validation(m.to_string()));
        match (&self.dataset.synthetic, &self.dataset.files) {
            (Some(_), Some(_)) => return invalid("dataset must be either synthetic or files, not both"),
            (None, None) => return invalid("dataset needs synthetic parameters or files"),
            (None, Some(files)) => {
                for p in [Some(&files.interactions), Some(&files.items), files.categories.as_ref()]
                    .into_iter()
                    .flatten()
                {
                    if !p.is_file() {
                        return Err(Error::Validation(format!("missing input file {}", p.display())));
                    }
                }
            }
            (Some(_), None) => {}
        }
        let r = self.dataset.split;
        if r.iter().any(|v| !(0.0..=1.0).contains(v)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return invalid("split ratios must lie in [0, 1] and sum to 1");
        }
        if self.csm.enabled && self.recommender.mode == TrainMode::None {
            return invalid("CSM requires trained model");
        }
        self.session.validate().map_err(|e| Error::Validation(e.to_string()))?;
        self.policy.train.reward.validate().map_err(|e| Error::Validation(e.to_string()))?;
        if self.recommender.pal.dim == 0 || self.recommender.pal.learning_rate <= 0.0 {
            return invalid("recommender needs a positive dimension and learning rate");
        }
        if !(0.0..=100.0).contains(&self.policy.train.select_percentile) {
            return invalid("select_percentile must lie in [0, 100]");
        }
        Ok(())
    }

    /// Apply a `dotted.key=value` override. The value is parsed as JSON,
    /// falling back to a plain string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Validation(format!("override {assignment:?} is not key=value")))?;
        let value: serde_json::Value =
            serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self)?;
        let mut slot = &mut doc;
        for part in key.split('.') {
            let obj = slot
                .as_object_mut()
                .ok_or_else(|| Error::Validation(format!("override key {key:?} does not name a field")))?;
            slot = obj.entry(part.to_string()).or_insert(serde_json::Value::Null);
        }
        *slot = value;
        *self = serde_json::from_value(doc)
            .map_err(|e| Error::Validation(format!("override {key}: {e}")))?;
        Ok(())
    }
}

/// Data after preparation: annotated catalog and split.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub catalog: Catalog,
    pub split: DataSplit,
}

impl Prepared {
    pub fn stats(&self) -> CatalogStats {
        self.catalog.stats()
    }

    /// Episodes used for policy learning: train plus validation pairs.
    pub fn policy_pool(&self) -> Vec<(UserId, ItemId)> {
        self.split.train.iter().chain(&self.split.valid).copied().collect()
    }
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Prepared> {
    let cfg = cfg.seeded();
    let raw = match (&cfg.dataset.synthetic, &cfg.dataset.files) {
        (Some(params), _) => generate_synthetic(params)?,
        (None, Some(files)) => load_catalog(files)?,
        (None, None) => return Err(Error::Validation("no dataset configured".into())),
    };
    let filtered = filter_min_interactions(&raw, cfg.dataset.min_interactions);
    let split = split_interactions(&filtered, cfg.dataset.split, cfg.seeds().split)?;
    let catalog = compute_popularity_and_tiers(&filtered, &split)?;
    let s = catalog.stats();
    log::info!(
        "prepared {} users, {} items, {} interactions, {} attributes",
        s.users,
        s.items,
        s.interactions,
        s.attributes
    );
    Ok(Prepared { catalog, split })
}

pub fn train_recommender(cfg: &ExperimentConfig, data: &Prepared) -> Result<FactorizationModel> {
    let cfg = cfg.seeded();
    train(&data.catalog, &data.split, &cfg.recommender.pal, cfg.recommender.mode)
}

pub fn fit_cold_start(
    cfg: &ExperimentConfig,
    data: &Prepared,
    model: &FactorizationModel,
) -> Result<(AttributeMapper, FactorizationModel)> {
    let cfg = cfg.seeded();
    let mapper = fit_mapper(model, &data.catalog, &cfg.csm.mapper)?;
    let model = apply_csm(model, &mapper, &data.catalog)?;
    Ok((mapper, model))
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainedPolicy {
    Maxent { rec_threshold: usize },
    Single(PolicyNetwork),
    Dual(DualPolicy),
}

impl TrainedPolicy {
    pub fn agent(&self) -> Box<dyn Agent + '_> {
        match self {
            TrainedPolicy::Maxent { rec_threshold } => Box::new(MaxEntropyAgent {
                rec_threshold: *rec_threshold,
            }),
            TrainedPolicy::Single(policy) => Box::new(NetworkAgent {
                policy,
                mode: NetworkMode::Greedy,
            }),
            TrainedPolicy::Dual(dual) => Box::new(DualAgent {
                dual,
                mode: NetworkMode::Greedy,
            }),
        }
    }

    pub fn kind(&self) -> PolicyKind {
        match self {
            TrainedPolicy::Maxent { .. } => PolicyKind::Maxent,
            TrainedPolicy::Single(_) => PolicyKind::SingleRl,
            TrainedPolicy::Dual(_) => PolicyKind::DualRl,
        }
    }
}

pub fn train_agent(cfg: &ExperimentConfig, data: &Prepared, model: &FactorizationModel) -> Result<TrainedPolicy> {
    let cfg = cfg.seeded();
    let pool = data.policy_pool();
    let train_cfg = &cfg.policy.train;
    Ok(match cfg.policy.kind {
        PolicyKind::Maxent => TrainedPolicy::Maxent {
            rec_threshold: train_cfg.rec_threshold,
        },
        PolicyKind::SingleRl => {
            // the exposure term belongs to dual-policy learning
            let single = PolicyTrainConfig {
                reward: RewardConfig {
                    w_bias: 0.0,
                    ..train_cfg.reward.clone()
                },
                ..train_cfg.clone()
            };
            TrainedPolicy::Single(train_policy(&data.catalog, model, &pool, &cfg.session, &single, "single")?)
        }
        PolicyKind::DualRl => TrainedPolicy::Dual(train_dual(&data.catalog, model, &pool, &cfg.session, train_cfg)?),
    })
}

pub fn report_config(cfg: &ExperimentConfig, catalog: &Catalog) -> Result<ReportConfig> {
    let thresholds = catalog.require_annotated()?;
    Ok(ReportConfig {
        head_threshold: cfg.metrics.head_threshold.unwrap_or(thresholds.head),
        top_k: cfg.session.top_k,
        max_turns: cfg.session.max_turns,
    })
}

pub fn simulate(
    cfg: &ExperimentConfig,
    data: &Prepared,
    model: &FactorizationModel,
    policy: &TrainedPolicy,
) -> Result<(Vec<EpisodeLog>, MetricsReport)> {
    let cfg = cfg.seeded();
    let agent = policy.agent();
    let comps = Components {
        catalog: &data.catalog,
        model,
        agent: agent.as_ref(),
    };
    let logs = run_suite(&data.split.test, &comps, &cfg.session, cfg.parallelism, cfg.session.seed)?;
    let report = MetricsReport::compute(&logs, report_config(&cfg, &data.catalog)?);
    Ok((logs, report))
}

// ---------------------------------------------------------------------------
// run directories

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub created: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub seeds: Seeds,
    /// Input files and their SHA-256 digests.
    pub inputs: BTreeMap<String, String>,
    /// Output files in the run directory and their SHA-256 digests.
    pub outputs: BTreeMap<String, String>,
    pub stages: Vec<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::Validation(format!("cannot read {}: {e}", path.display()))
    })?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug)]
pub struct RunDir {
    pub path: PathBuf,
    pub manifest: Manifest,
}

impl RunDir {
    /// Create `output_dir/run-<timestamp>-s<seed>` and write the manifest.
    pub fn create(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let now = chrono::Utc::now();
        let stem = format!("run-{}-s{}", now.format("%Y%m%dT%H%M%S%3fZ"), cfg.seed);
        let mut path = cfg.output_dir.join(&stem);
        let mut n = 1;
        while path.exists() {
            path = cfg.output_dir.join(format!("{stem}-{n}"));
            n += 1;
        }
        Self::create_at(cfg, &path, now.to_rfc3339())
    }

    pub fn create_at(cfg: &ExperimentConfig, path: &Path, created: String) -> Result<Self> {
        cfg.validate()?;
        fs::create_dir_all(path)?;
        let mut inputs = BTreeMap::new();
        if let Some(files) = &cfg.dataset.files {
            for p in [Some(&files.interactions), Some(&files.items), files.categories.as_ref()]
                .into_iter()
                .flatten()
            {
                inputs.insert(p.display().to_string(), sha256_file(p)?);
            }
        }
        let mut run = RunDir {
            path: path.to_path_buf(),
            manifest: Manifest {
                created,
                version: env!("CARGO_PKG_VERSION").to_string(),
                config: cfg.clone(),
                seeds: cfg.seeds(),
                inputs,
                outputs: BTreeMap::new(),
                stages: Vec::new(),
            },
        };
        run.save_manifest()?;
        Ok(run)
    }

    pub fn open(path: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&path.join(MANIFEST))?;
        Ok(RunDir {
            path: path.to_path_buf(),
            manifest,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.manifest.config
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn save_manifest(&mut self) -> Result<()> {
        let mut outputs = BTreeMap::new();
        let mut names: Vec<String> = fs::read_dir(&self.path)?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n != MANIFEST)
            .collect();
        names.sort();
        for n in names {
            outputs.insert(n.clone(), sha256_file(&self.file(&n))?);
        }
        self.manifest.outputs = outputs;
        write_json(&self.file(MANIFEST), &self.manifest)
    }

    fn finish_stage(&mut self, stage: &str) -> Result<()> {
        self.manifest.stages.push(stage.to_string());
        self.save_manifest()
    }

    pub fn load_prepared(&self) -> Result<Prepared> {
        Ok(Prepared {
            catalog: read_json(&self.file("catalog.json"))?,
            split: read_json(&self.file("split.json"))?,
        })
    }

    pub fn load_model(&self) -> Result<FactorizationModel> {
        FactorizationModel::from_checkpoint(&Checkpoint::load(&self.file("model.bin"))?)
    }

    pub fn load_policy(&self, data: &Prepared) -> Result<TrainedPolicy> {
        let cfg = self.config();
        let net = |name: &str| PolicyNetwork::from_checkpoint(&Checkpoint::load(&self.file(name))?);
        Ok(match cfg.policy.kind {
            PolicyKind::Maxent => TrainedPolicy::Maxent {
                rec_threshold: cfg.policy.train.rec_threshold,
            },
            PolicyKind::SingleRl => TrainedPolicy::Single(net("policy_single.bin")?),
            PolicyKind::DualRl => TrainedPolicy::Dual(DualPolicy {
                pn_pop: net("policy_pop.bin")?,
                pn_unpop: net("policy_unpop.bin")?,
                select_percentile: cfg.policy.train.select_percentile,
                select_threshold: data.catalog.popularity_percentile(cfg.policy.train.select_percentile),
            }),
        })
    }

    pub fn prepare(&mut self) -> Result<Prepared> {
        let data = prepare_data(self.config()).map_err(|e| e.in_stage("prepare"))?;
        write_json(&self.file("stats.json"), &data.stats())?;
        write_json(&self.file("catalog.json"), &data.catalog)?;
        write_json(&self.file("split.json"), &data.split)?;
        self.finish_stage("prepare")?;
        Ok(data)
    }

    pub fn train_recommender(&mut self, data: &Prepared) -> Result<FactorizationModel> {
        let model = train_recommender(self.config(), data).map_err(|e| e.in_stage("train-rec"))?;
        self.save_model(&model, false)?;
        self.finish_stage("train-rec")?;
        Ok(model)
    }

    fn save_model(&self, model: &FactorizationModel, csm: bool) -> Result<()> {
        let meta = serde_json::json!({
            "mode": self.config().recommender.mode,
            "csm": csm,
            "seed": self.manifest.seeds.recommender,
        });
        model.to_checkpoint(meta).save(&self.file("model.bin"))
    }

    /// Fit the mapper and overwrite `model.bin` with the reconstructed
    /// model. Refuses to run before the recommender has been trained.
    pub fn fit_csm(&mut self, data: &Prepared, model: &FactorizationModel) -> Result<FactorizationModel> {
        let cfg = self.config();
        if cfg.recommender.mode == TrainMode::None || !self.manifest.stages.iter().any(|s| s == "train-rec") {
            return Err(Error::Validation("CSM requires trained model".into()));
        }
        let (mapper, model) = fit_cold_start(cfg, data, model).map_err(|e| e.in_stage("fit-csm"))?;
        mapper.to_checkpoint().save(&self.file("mapper.bin"))?;
        self.save_model(&model, true)?;
        self.finish_stage("fit-csm")?;
        Ok(model)
    }

    pub fn train_policy(&mut self, data: &Prepared, model: &FactorizationModel) -> Result<TrainedPolicy> {
        let policy = train_agent(self.config(), data, model).map_err(|e| e.in_stage("train-policy"))?;
        match &policy {
            TrainedPolicy::Maxent { .. } => {}
            TrainedPolicy::Single(net) => net.to_checkpoint().save(&self.file("policy_single.bin"))?,
            TrainedPolicy::Dual(dual) => {
                dual.pn_pop.to_checkpoint().save(&self.file("policy_pop.bin"))?;
                dual.pn_unpop.to_checkpoint().save(&self.file("policy_unpop.bin"))?;
            }
        }
        self.finish_stage("train-policy")?;
        Ok(policy)
    }

    pub fn simulate(&mut self, data: &Prepared, model: &FactorizationModel, policy: &TrainedPolicy) -> Result<MetricsReport> {
        let (logs, report) = simulate(self.config(), data, model, policy).map_err(|e| e.in_stage("simulate"))?;
        write_episodes_jsonl(&logs, &self.file("episodes.jsonl"))?;
        write_json(&self.file(METRICS), &report)?;
        self.finish_stage("simulate")?;
        Ok(report)
    }

    pub fn load_episodes(&self) -> Result<Vec<EpisodeLog>> {
        read_episodes_jsonl(&self.file("episodes.jsonl"))
    }
}

/// Run every enabled stage in order (prepare, recommender, CSM, policy,
/// simulation) in a fresh timestamped run directory. On failure the
/// directory keeps whatever earlier stages wrote.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<(RunDir, MetricsReport)> {
    let mut run = RunDir::create(cfg)?;
    let report = run_stages(&mut run)?;
    Ok((run, report))
}

pub fn run_stages(run: &mut RunDir) -> Result<MetricsReport> {
    log::info!("run directory {}", run.path.display());
    let data = run.prepare()?;
    let mut model = run.train_recommender(&data)?;
    if run.config().csm.enabled {
        model = run.fit_csm(&data, &model)?;
    }
    let policy = run.train_policy(&data, &model)?;
    run.simulate(&data, &model, &policy)
}

// ---------------------------------------------------------------------------
// ablation

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pal,
    Csm,
    Dpl,
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pal" => Ok(Stage::Pal),
            "csm" => Ok(Stage::Csm),
            "dpl" => Ok(Stage::Dpl),
            other => Err(Error::Validation(format!("unknown stage {other:?}"))),
        }
    }
}

/// One row of an ablation: which stages are on, and which policy stands in
/// when dual-policy learning is off.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub pal: bool,
    pub csm: bool,
    pub dpl: bool,
    pub fallback_policy: PolicyKind,
}

impl Variant {
    pub fn full() -> Self {
        Variant {
            name: "full".into(),
            pal: true,
            csm: true,
            dpl: true,
            fallback_policy: PolicyKind::SingleRl,
        }
    }

    pub fn skipping(stage: Stage) -> Self {
        let mut v = Variant::full();
        match stage {
            Stage::Pal => v.pal = false,
            Stage::Csm => v.csm = false,
            Stage::Dpl => v.dpl = false,
        }
        v.name = format!("-{}", format!("{stage:?}").to_uppercase());
        v
    }

    pub fn baseline(policy: PolicyKind) -> Self {
        Variant {
            name: "baseline".into(),
            pal: false,
            csm: false,
            dpl: false,
            fallback_policy: policy,
        }
    }

    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        cfg.recommender.mode = if self.pal { TrainMode::Pal } else { TrainMode::Bpr };
        cfg.csm.enabled = self.csm;
        cfg.policy.kind = if self.dpl { PolicyKind::DualRl } else { self.fallback_policy };
        cfg
    }
}

/// Variants for an ablation skipping each stage in `skip`, framed by the
/// full pipeline and the baseline.
pub fn ablation_variants(skip: &[Stage], baseline_policy: PolicyKind) -> Vec<Variant> {
    let mut skip = skip.to_vec();
    skip.sort();
    skip.dedup();
    let mut out = vec![Variant::full()];
    out.extend(skip.into_iter().map(Variant::skipping));
    out.push(Variant::baseline(baseline_policy));
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub variants: Vec<VariantResult>,
}

impl AblationReport {
    pub fn get(&self, name: &str) -> Option<&MetricsReport> {
        self.variants.iter().find(|v| v.variant.name == name).map(|v| &v.metrics)
    }
}

/// Runs variants of one base configuration, sharing prepared data and
/// trained models between variants that agree on the earlier stages.
pub struct AblationRunner {
    base: ExperimentConfig,
    data: Prepared,
    models: BTreeMap<(bool, bool), FactorizationModel>,
}

impl AblationRunner {
    pub fn new(base: &ExperimentConfig) -> Result<Self> {
        base.validate()?;
        let data = prepare_data(base).map_err(|e| e.in_stage("prepare"))?;
        Ok(AblationRunner {
            base: base.clone(),
            data,
            models: BTreeMap::new(),
        })
    }

    pub fn data(&self) -> &Prepared {
        &self.data
    }

    pub fn model(&mut self, pal: bool, csm: bool) -> Result<&FactorizationModel> {
        if !self.models.contains_key(&(pal, false)) {
            let cfg = Variant { pal, ..Variant::full() }.apply(&self.base);
            let model = train_recommender(&cfg, &self.data).map_err(|e| e.in_stage("train-rec"))?;
            self.models.insert((pal, false), model);
        }
        if csm && !self.models.contains_key(&(pal, true)) {
            let cfg = Variant { pal, ..Variant::full() }.apply(&self.base);
            let (_, model) = fit_cold_start(&cfg, &self.data, &self.models[&(pal, false)])
                .map_err(|e| e.in_stage("fit-csm"))?;
            self.models.insert((pal, true), model);
        }
        Ok(&self.models[&(pal, csm)])
    }

    pub fn run(&mut self, variant: &Variant) -> Result<VariantResult> {
        log::info!("ablation variant {}", variant.name);
        let cfg = variant.apply(&self.base);
        self.model(variant.pal, variant.csm)?;
        let model = &self.models[&(variant.pal, variant.csm)];
        let policy = train_agent(&cfg, &self.data, model).map_err(|e| e.in_stage("train-policy"))?;
        let (_, metrics) = simulate(&cfg, &self.data, model, &policy).map_err(|e| e.in_stage("simulate"))?;
        Ok(VariantResult {
            variant: variant.clone(),
            metrics,
        })
    }
}

pub fn run_ablation(cfg: &ExperimentConfig, skip: &[Stage], baseline_policy: PolicyKind) -> Result<AblationReport> {
    let mut runner = AblationRunner::new(cfg)?;
    let variants = ablation_variants(skip, baseline_policy)
        .iter()
        .map(|v| runner.run(v))
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport { seed: cfg.seed, variants })
}

/// Run an ablation and write `ablation.json` plus a manifest to a fresh
/// directory under `output_dir`.
pub fn run_ablation_dir(cfg: &ExperimentConfig, skip: &[Stage], baseline_policy: PolicyKind) -> Result<(PathBuf, AblationReport)> {
    let mut run = RunDir::create(&ExperimentConfig {
        output_dir: cfg.output_dir.clone(),
        ..cfg.clone()
    })?;
    let report = run_ablation(cfg, skip, baseline_policy)?;
    write_json(&run.file(ABLATION), &report)?;
    run.finish_stage("ablate")?;
    Ok((run.path, report))
}

// ---------------------------------------------------------------------------
// reports

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(Error::Validation(format!("unknown report format {other:?}"))),
        }
    }
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
            ReportFormat::Markdown => "md",
        }
    }
}

/// Column order of the markdown table.
pub const TABLE_COLUMNS: [&str; 7] = ["per", "psr", "pcu", "sr", "hsr", "tsr", "at"];

fn load_rows(dir: &Path) -> Result<Vec<(String, MetricsReport)>> {
    let ablation = dir.join(ABLATION);
    if ablation.is_file() {
        let report: AblationReport = read_json(&ablation)?;
        return Ok(report.variants.into_iter().map(|v| (v.variant.name, v.metrics)).collect());
    }
    let metrics = dir.join(METRICS);
    if !metrics.is_file() {
        return Err(Error::Validation(format!("{} holds no metrics report", dir.display())));
    }
    let name = dir.file_name().map_or_else(|| "run".to_string(), |n| n.to_string_lossy().into_owned());
    Ok(vec![(name, read_json(&metrics)?)])
}

pub fn render_report(rows: &[(String, MetricsReport)], format: ReportFormat) -> Result<String> {
    Ok(match format {
        ReportFormat::Json => {
            let map: BTreeMap<&str, &MetricsReport> = rows.iter().map(|(n, r)| (n.as_str(), r)).collect();
            let mut s = if rows.len() == 1 {
                serde_json::to_string_pretty(&rows[0].1)?
            } else {
                serde_json::to_string_pretty(&map)?
            };
            s.push('\n');
            s
        }
        ReportFormat::Csv => {
            let mut s = format!("variant,{}\n", METRIC_COLUMNS.join(","));
            for (name, r) in rows {
                s.push_str(&format!("{name},{}\n", r.csv_row()));
            }
            s
        }
        ReportFormat::Markdown => {
            let header: Vec<String> = TABLE_COLUMNS.iter().map(|c| c.to_uppercase()).collect();
            let mut s = format!("| Variant | {} |\n", header.join(" | "));
            s.push_str(&format!("|---|{}\n", "---:|".repeat(TABLE_COLUMNS.len())));
            for (name, r) in rows {
                let cells: Vec<String> = TABLE_COLUMNS
                    .iter()
                    .map(|c| match r.metric(c).expect("known column").value() {
                        Some(v) => format!("{v:.4}"),
                        None => r.metric(c).expect("known column").to_string(),
                    })
                    .collect();
                s.push_str(&format!("| {name} | {} |\n", cells.join(" | ")));
            }
            s
        }
    })
}

/// Render the run's (or ablation's) metrics into `report.<ext>` inside the
/// directory and return its path.
pub fn emit_report(dir: &Path, format: ReportFormat) -> Result<PathBuf> {
    let rows = load_rows(dir)?;
    let out = dir.join(format!("report.{}", format.extension()));
    fs::write(&out, render_report(&rows, format)?)?;
    Ok(out)
}
