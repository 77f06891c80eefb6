//! Run configuration and the experiment drivers behind the command line:
//! training, evaluation, the ablation matrix and zero-shot grids.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::ablation::AblationKind;
use crate::encoder::{DualEncoderParams, ModelConfig, PromptMode};
use crate::error::{Error, Result};
use crate::gradcheck::GradCheckReport;
use crate::joint::{
    joint_tables, tables_to_csv, ConditionalNormalization, EncoderScorer, LabelSpace,
};
use crate::metrics::{
    evaluate_examples, label_space, results_csv, results_table, MetricsQuad, ResultRow,
    HARNESS_DEFAULT_K,
};
use crate::prompt::DEFAULT_CONTEXT_LEN;
use crate::train::{
    gradient_check, train, EpochRecord, TrainConfig, TrainScope, TrainerState, TRAIN_LOG_FILE,
};
use crate::world::{content_hash, generate_world, split_zero_shot, write_file, World, WorldSpec};

pub const CONFIG_FORMAT_VERSION: u32 = 1;
pub const REPORT_FORMAT_VERSION: u32 = 1;
/// Environment variable naming the root directory for all outputs.
pub const OUTPUT_ROOT_ENV: &str = "RATIONALE_OUT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";
pub const DEFAULT_ZERO_SHOT_CATEGORIES: usize = 5;
/// Parameters before the first update, written next to the training checkpoints.
pub const INIT_CHECKPOINT_FILE: &str = "init_checkpoint.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldPreset {
    Tiny,
    Small,
    Large,
}

impl WorldPreset {
    pub fn spec(self, seed: u64) -> WorldSpec {
        match self {
            WorldPreset::Tiny => WorldSpec::tiny(seed),
            WorldPreset::Small => WorldSpec::small(seed),
            WorldPreset::Large => WorldSpec::large(seed),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            WorldPreset::Tiny => "tiny",
            WorldPreset::Small => "small",
            WorldPreset::Large => "large",
        }
    }
}

impl std::str::FromStr for WorldPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(WorldPreset::Tiny),
            "small" => Ok(WorldPreset::Small),
            "large" => Ok(WorldPreset::Large),
            other => Err(Error::Config(format!("unknown world preset {other:?}"))),
        }
    }
}

/// Architecture choices; vocabulary size and image geometry come from the
/// world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    pub d_model: usize,
    pub d_embed: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub n_text_layers: usize,
    pub n_image_layers: usize,
    pub prompt_mode: PromptMode,
    pub n_prompts: usize,
    pub context_len: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let d = ModelConfig::desk(1, 1, 1);
        ModelSettings {
            d_model: d.d_model,
            d_embed: d.d_embed,
            n_heads: d.n_heads,
            mlp_ratio: d.mlp_ratio,
            n_text_layers: d.n_text_layers,
            n_image_layers: d.n_image_layers,
            prompt_mode: d.prompt_mode,
            n_prompts: d.n_prompts,
            context_len: DEFAULT_CONTEXT_LEN,
        }
    }
}

impl ModelSettings {
    pub fn model_config(&self, world: &World, init_seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: world.vocabulary.size(),
            context_len: self.context_len,
            d_model: self.d_model,
            d_embed: self.d_embed,
            n_heads: self.n_heads,
            mlp_ratio: self.mlp_ratio,
            n_text_layers: self.n_text_layers,
            n_image_layers: self.n_image_layers,
            patch_count: world.spec.patch_count,
            patch_dim: world.spec.patch_dim,
            prompt_mode: self.prompt_mode,
            n_prompts: self.n_prompts,
            init_seed,
        }
    }
}

/// One experiment. `seed` drives parameter init, batch order and, for
/// preset worlds, world generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub format_version: u32,
    pub run_id: String,
    pub preset: WorldPreset,
    /// Explicit world, used instead of the preset.
    pub world: Option<WorldSpec>,
    /// Saved world directory, used instead of generating one.
    pub dataset: Option<PathBuf>,
    pub zero_shot_categories: usize,
    pub model: ModelSettings,
    pub train: TrainConfig,
    /// Pairs kept before voting; the harness default applies when unset.
    pub k: Option<usize>,
    pub normalization: ConditionalNormalization,
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            format_version: CONFIG_FORMAT_VERSION,
            run_id: "run".into(),
            preset: WorldPreset::Small,
            world: None,
            dataset: None,
            zero_shot_categories: DEFAULT_ZERO_SHOT_CATEGORIES,
            model: ModelSettings::default(),
            train: TrainConfig::default(),
            k: None,
            normalization: ConditionalNormalization::PerRationaleSet,
            output_dir: None,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = load_document(path)?;
        if cfg.format_version != CONFIG_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported config format_version {}",
                cfg.format_version
            )));
        }
        Ok(cfg)
    }

    /// Propagate the run seed and check every field.
    pub fn effective(&self) -> Result<RunConfig> {
        let mut cfg = self.clone();
        cfg.train.seed = cfg.seed;
        cfg.train.validate()?;
        if cfg.k == Some(0) {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if cfg.run_id.is_empty() || cfg.run_id.contains(['/', '\\', ',']) {
            return Err(Error::Config(format!("invalid run_id {:?}", cfg.run_id)));
        }
        if let Some(spec) = &cfg.world {
            spec.validate()?;
        }
        if let Some(path) = &cfg.dataset {
            if !path.join("manifest.json").exists() {
                return Err(Error::Config(format!(
                    "dataset {} has no manifest.json",
                    path.display()
                )));
            }
        }
        let probe = ModelConfig {
            prompt_mode: cfg.model.prompt_mode,
            ..ModelConfig::desk(1, 1, 1)
        };
        ModelConfig {
            d_model: cfg.model.d_model,
            d_embed: cfg.model.d_embed,
            n_heads: cfg.model.n_heads,
            mlp_ratio: cfg.model.mlp_ratio,
            n_text_layers: cfg.model.n_text_layers,
            n_image_layers: cfg.model.n_image_layers,
            n_prompts: cfg.model.n_prompts,
            context_len: cfg.model.context_len,
            ..probe
        }
        .validate()?;
        Ok(cfg)
    }

    pub fn k(&self) -> usize {
        self.k.unwrap_or(HARNESS_DEFAULT_K)
    }

    pub fn world_spec(&self) -> WorldSpec {
        self.world
            .clone()
            .unwrap_or_else(|| self.preset.spec(self.seed))
    }

    pub fn dataset_name(&self) -> String {
        match (&self.dataset, &self.world) {
            (Some(p), _) => p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into()),
            (None, Some(_)) => "custom".into(),
            (None, None) => self.preset.label().into(),
        }
    }

    pub fn load_world(&self) -> Result<World> {
        match &self.dataset {
            Some(dir) => World::load(dir),
            None => generate_world(&self.world_spec()),
        }
    }

    pub fn init_params(&self, world: &World) -> Result<DualEncoderParams> {
        DualEncoderParams::init(self.model.model_config(world, self.seed))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

/// Read a TOML (`.toml`) or JSON (`.json`) document.
pub fn load_document<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |e: &dyn std::fmt::Display| Error::Config(format!("{}: {e}", path.display()));
    match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text).map_err(|e| bad(&e)),
        Some("json") => serde_json::from_str(&text).map_err(|e| bad(&e)),
        _ => Err(Error::Config(format!(
            "{}: config files must end in .toml or .json",
            path.display()
        ))),
    }
}

/// Output root: explicit value, then the environment, then the default.
pub fn output_root(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub train_world: String,
    pub eval_world: String,
    pub ablation: AblationKind,
    pub k: usize,
    pub quad: MetricsQuad,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub config: RunConfig,
    pub loss_curve: Vec<EpochRecord>,
    pub cells: Vec<ReportCell>,
    /// Which pair explains the voted category.
    pub rationale_rule: String,
    pub wall_ms: u64,
    pub artifact_hashes: BTreeMap<String, String>,
}

pub const RATIONALE_RULE: &str = "best-scoring pair of the voted category";

impl RunReport {
    pub fn rows(&self) -> Vec<ResultRow> {
        self.cells
            .iter()
            .map(|c| ResultRow {
                run_id: self.config.run_id.clone(),
                dataset: if c.train_world == c.eval_world {
                    c.eval_world.clone()
                } else {
                    format!("{}->{}", c.train_world, c.eval_world)
                },
                ablation: c.ablation.label().into(),
                quad: c.quad,
                seed: self.config.seed,
            })
            .collect()
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(content_hash(&[&bytes]))
}

/// Write `results.csv`, `results.txt` and `report.json` into `dir` and
/// record their hashes in the report.
pub fn write_report(dir: &Path, report: &mut RunReport, stem: &str) -> Result<()> {
    ensure_dir(dir)?;
    let rows = report.rows();
    let csv_name = format!("{stem}.csv");
    let txt_name = format!("{stem}.txt");
    write_file(&dir.join(&csv_name), results_csv(&rows).as_bytes())?;
    write_file(&dir.join(&txt_name), results_table(&rows).as_bytes())?;
    for name in [&csv_name, &txt_name] {
        report
            .artifact_hashes
            .insert(name.clone(), hash_file(&dir.join(name))?);
    }
    let log = dir.join(TRAIN_LOG_FILE);
    if log.exists() {
        report
            .artifact_hashes
            .insert(TRAIN_LOG_FILE.into(), hash_file(&log)?);
    }
    let json = serde_json::to_string_pretty(report).expect("report serialises");
    write_file(&dir.join("report.json"), json.as_bytes())
}

pub struct TrainedRun {
    pub params: DualEncoderParams,
    pub log: Vec<EpochRecord>,
    pub state: TrainerState,
}

/// Train from fresh parameters (or `resume`) on the world's train split.
/// With `dir`, the effective config and all training artifacts land there.
pub fn run_training(
    cfg: &RunConfig,
    world: &World,
    dir: Option<&Path>,
    resume: Option<(DualEncoderParams, TrainerState)>,
) -> Result<TrainedRun> {
    let cfg = cfg.effective()?;
    let space = label_space(world, cfg.model.context_len)?;
    let (mut params, state) = match resume {
        Some((p, s)) => {
            let expected = cfg.model.model_config(world, cfg.seed);
            if p.config() != &expected {
                return Err(Error::Config(
                    "checkpoint config does not match the run config".into(),
                ));
            }
            (p, Some(s))
        }
        None => (cfg.init_params(world)?, None),
    };
    if let Some(d) = dir {
        ensure_dir(d)?;
        write_file(&d.join("effective_config.json"), cfg.to_json().as_bytes())?;
        if state.is_none() {
            params.save(&d.join(INIT_CHECKPOINT_FILE), None)?;
        }
    }
    let outcome = train(&mut params, &world.train, &space, &cfg.train, state, dir)?;
    Ok(TrainedRun {
        params,
        log: outcome.log,
        state: outcome.state,
    })
}

/// Evaluate frozen parameters on one split of `world`.
pub fn evaluate_on(
    cfg: &RunConfig,
    params: &DualEncoderParams,
    world: &World,
    test_split: bool,
) -> Result<MetricsQuad> {
    let space = label_space(world, params.config().context_len)?;
    let factorization = cfg.train.ablation.factorization(cfg.normalization);
    let examples = if test_split {
        &world.test
    } else {
        &world.train
    };
    Ok(evaluate_examples(params, &space, examples, factorization, cfg.k())?.1)
}

/// Joint-table dump of the first `limit` test images.
pub fn dump_tables(
    cfg: &RunConfig,
    params: &DualEncoderParams,
    world: &World,
    limit: usize,
) -> Result<String> {
    let space: LabelSpace = label_space(world, params.config().context_len)?;
    let examples: Vec<_> = world.test.iter().take(limit).collect();
    let images: Vec<_> = examples.iter().map(|e| &e.image).collect();
    let ids: Vec<usize> = examples.iter().map(|e| e.id).collect();
    let scorer = EncoderScorer::new(params, &images)?;
    let tables = joint_tables(
        &scorer,
        &space,
        cfg.train.ablation.factorization(cfg.normalization),
        &ids,
    )?;
    Ok(tables_to_csv(&tables, &space))
}

/// Train and evaluate one configuration on its world's test split.
pub fn train_and_evaluate(cfg: &RunConfig, dir: Option<&Path>) -> Result<RunReport> {
    let started = Instant::now();
    let cfg = cfg.effective()?;
    let world = cfg.load_world()?;
    let run = run_training(&cfg, &world, dir, None)?;
    let quad = evaluate_on(&cfg, &run.params, &world, true)?;
    let name = cfg.dataset_name();
    let mut report = RunReport {
        format_version: REPORT_FORMAT_VERSION,
        config: cfg.clone(),
        loss_curve: run.log,
        cells: vec![ReportCell {
            train_world: name.clone(),
            eval_world: name,
            ablation: cfg.train.ablation,
            k: cfg.k(),
            quad,
        }],
        rationale_rule: RATIONALE_RULE.into(),
        wall_ms: started.elapsed().as_millis() as u64,
        artifact_hashes: BTreeMap::new(),
    };
    if let Some(d) = dir {
        write_report(d, &mut report, "results")?;
    }
    Ok(report)
}

/// Train every ablation from the same initial parameters and evaluate each
/// on the test split: seven rows, full method first.
pub fn ablation_matrix(cfg: &RunConfig, dir: Option<&Path>) -> Result<RunReport> {
    let started = Instant::now();
    let base = cfg.effective()?;
    let world = base.load_world()?;
    let name = base.dataset_name();
    let mut cells = Vec::with_capacity(AblationKind::ALL.len());
    let mut loss_curve = Vec::new();
    for kind in AblationKind::ALL {
        let mut run_cfg = base.clone();
        run_cfg.train.ablation = kind;
        let sub = dir.map(|d| d.join(kind.label()));
        let run = run_training(&run_cfg, &world, sub.as_deref(), None)?;
        let quad = evaluate_on(&run_cfg, &run.params, &world, true)?;
        if kind == AblationKind::Ecor {
            loss_curve = run.log;
        }
        cells.push(ReportCell {
            train_world: name.clone(),
            eval_world: name.clone(),
            ablation: kind,
            k: base.k(),
            quad,
        });
    }
    let mut report = RunReport {
        format_version: REPORT_FORMAT_VERSION,
        config: base,
        loss_curve,
        cells,
        rationale_rule: RATIONALE_RULE.into(),
        wall_ms: started.elapsed().as_millis() as u64,
        artifact_hashes: BTreeMap::new(),
    };
    if let Some(d) = dir {
        write_report(d, &mut report, "ablation")?;
    }
    Ok(report)
}

/// Zero-shot grid over a split pair: train on world A, then evaluate the
/// trained and the untrained parameters on A's and B's test splits.
pub fn zero_shot_grid(cfg: &RunConfig, dir: Option<&Path>) -> Result<RunReport> {
    let started = Instant::now();
    let cfg = cfg.effective()?;
    let (a, b) = split_zero_shot(&cfg.world_spec(), cfg.zero_shot_categories)?;
    let init = cfg.init_params(&a)?;
    let run = run_training(&cfg, &a, dir.map(|d| d.join("A")).as_deref(), None)?;
    let mut cells = Vec::new();
    for (train_name, params) in [("A", &run.params), ("untrained", &init)] {
        for (eval_name, world) in [("A", &a), ("B", &b)] {
            cells.push(ReportCell {
                train_world: train_name.into(),
                eval_world: eval_name.into(),
                ablation: cfg.train.ablation,
                k: cfg.k(),
                quad: evaluate_on(&cfg, params, world, true)?,
            });
        }
    }
    let mut report = RunReport {
        format_version: REPORT_FORMAT_VERSION,
        config: cfg,
        loss_curve: run.log,
        cells,
        rationale_rule: RATIONALE_RULE.into(),
        wall_ms: started.elapsed().as_millis() as u64,
        artifact_hashes: BTreeMap::new(),
    };
    if let Some(d) = dir {
        write_report(d, &mut report, "zeroshot")?;
    }
    Ok(report)
}

/// Examples in the gradient-check batch.
pub const GRADCHECK_BATCH: usize = 8;

/// Finite-difference check of the full training loss on the tiny model and
/// tiny world, over every parameter array.
pub fn tiny_gradient_check(
    seed: u64,
    ablation: AblationKind,
    epsilon: f64,
) -> Result<GradCheckReport> {
    let world = generate_world(&WorldPreset::Tiny.spec(seed))?;
    let model = ModelConfig {
        patch_count: world.spec.patch_count,
        init_seed: seed,
        ..ModelConfig::tiny(world.vocabulary.size(), world.spec.patch_dim)
    };
    let params = DualEncoderParams::init(model)?;
    let space = label_space(&world, params.config().context_len)?;
    // Every third example, so the batch spans several categories.
    let batch: Vec<_> = world
        .train
        .iter()
        .step_by(3)
        .take(GRADCHECK_BATCH)
        .collect();
    gradient_check(&params, &batch, &space, ablation, TrainScope::All, epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            preset: WorldPreset::Tiny,
            train: TrainConfig {
                epochs: 2,
                ..TrainConfig::default()
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn config_round_trips_through_toml_and_json() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let json = dir.path().join("c.json");
        fs::write(&json, cfg.to_json()).unwrap();
        assert_eq!(RunConfig::load(&json).unwrap(), cfg);
        let toml_path = dir.path().join("c.toml");
        fs::write(
            &toml_path,
            "run_id = \"t\"\npreset = \"tiny\"\nseed = 3\n[train]\nepochs = 4\nablation = \"AB6\"\n[model]\nprompt_mode = \"deep\"\n",
        )
        .unwrap();
        let t = RunConfig::load(&toml_path).unwrap();
        assert_eq!(t.seed, 3);
        assert_eq!(t.train.epochs, 4);
        assert_eq!(t.train.ablation, AblationKind::Ab6);
        assert_eq!(t.model.prompt_mode, PromptMode::Deep);
        assert!(RunConfig::load(&dir.path().join("c.yaml")).is_err());
        fs::write(&toml_path, "bogus_field = 1\n").unwrap();
        assert!(matches!(RunConfig::load(&toml_path), Err(Error::Config(_))));
    }

    #[test]
    fn deep_mode_needs_two_image_layers() {
        let mut cfg = tiny_cfg();
        cfg.model.prompt_mode = PromptMode::Deep;
        cfg.model.n_image_layers = 1;
        assert!(matches!(cfg.effective(), Err(Error::Config(_))));
        cfg.model.n_image_layers = 2;
        assert!(cfg.effective().is_ok());
    }

    #[test]
    fn seed_propagates_to_training() {
        let cfg = RunConfig {
            seed: 9,
            ..tiny_cfg()
        };
        assert_eq!(cfg.effective().unwrap().train.seed, 9);
        assert_eq!(cfg.world_spec().seed, 9);
    }

    #[test]
    fn default_k_is_five() {
        assert_eq!(tiny_cfg().k(), 5);
    }

    #[test]
    fn ablation_matrix_has_seven_rows() {
        let cfg = RunConfig {
            train: TrainConfig {
                epochs: 1,
                ..TrainConfig::default()
            },
            ..tiny_cfg()
        };
        let dir = tempfile::tempdir().unwrap();
        let report = ablation_matrix(&cfg, Some(dir.path())).unwrap();
        let labels: Vec<_> = report.rows().iter().map(|r| r.ablation.clone()).collect();
        assert_eq!(labels, ["ECOR", "AB1", "AB2", "AB3", "AB4", "AB5", "AB6"]);
        for c in &report.cells {
            assert_eq!(c.quad.counts.iter().sum::<usize>(), c.quad.n);
        }
        let audit = fs::read_to_string(dir.path().join("AB2").join("prompt_audit.json")).unwrap();
        assert!(!audit.contains("\"R\""));
        assert!(audit.contains("C_ONLY"));
        assert!(dir.path().join("ablation.csv").exists());
    }

    #[test]
    fn zero_shot_grid_covers_all_cells() {
        let cfg = RunConfig {
            zero_shot_categories: 2,
            ..tiny_cfg()
        };
        let report = zero_shot_grid(&cfg, None).unwrap();
        let cells: Vec<_> = report
            .cells
            .iter()
            .map(|c| (c.train_world.as_str(), c.eval_world.as_str()))
            .collect();
        assert_eq!(
            cells,
            [
                ("A", "A"),
                ("A", "B"),
                ("untrained", "A"),
                ("untrained", "B")
            ]
        );
    }
}
