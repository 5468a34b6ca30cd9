//! Config-driven experiment runs.
//!
//! One experiment = one JSON config = N seeded trials. Each trial builds
//! a fresh poison set, pre-trains a clean and a poisoned encoder, runs
//! linear evaluation on both, then executes the selected defenses for
//! side-by-side metrics. Trials write into private directories that are
//! renamed into place on completion, so interrupted runs resume without
//! recomputing finished work, and re-running a finished experiment with
//! the same master seed reproduces the metrics tables byte-exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{
    build_icp_poison, build_poison, optimize_poison_alignment, save_poison, AttackSpec,
    AttackTask, CombineMethod, PoisonBatch,
};
use crate::data::{
    generate_synthetic, merge_poison, read_container, LabeledDataset, Provenance,
    UnlabeledDataset,
};
use crate::defense::{run_defense_pipeline, DefenseContext, DefenseKind, DefenseParams};
use crate::downstream::{
    evaluate_accuracy, evaluate_asr, outer_objective, train_linear_on, DownstreamConfig,
    MetricsReport,
};
use crate::error::{Error, Result};
use crate::model::save_checkpoint;
use crate::pretrain::{pretrain, PretrainConfig};
use crate::rng::{self, tag};

/// Where the images come from: generated on the fly, or loaded from
/// dataset containers on disk. Container paths must exist when the
/// config is validated.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic {
        #[serde(default = "default_n_classes")]
        n_classes: usize,
        #[serde(default = "default_pretrain_per_class")]
        pretrain_per_class: usize,
        #[serde(default = "default_downstream_per_class")]
        downstream_per_class: usize,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
        #[serde(default = "default_attacker_pool_per_class")]
        attacker_pool_per_class: usize,
        #[serde(default = "default_image_side")]
        image_side: usize,
    },
    Containers {
        pretrain: PathBuf,
        downstream: PathBuf,
        test: PathBuf,
        /// Labeled pool the attacker samples targets and references from.
        attacker_pool: PathBuf,
    },
}

fn default_n_classes() -> usize {
    4
}
fn default_pretrain_per_class() -> usize {
    500
}
fn default_downstream_per_class() -> usize {
    50
}
fn default_test_per_class() -> usize {
    50
}
fn default_attacker_pool_per_class() -> usize {
    25
}
fn default_image_side() -> usize {
    32
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic {
            n_classes: default_n_classes(),
            pretrain_per_class: default_pretrain_per_class(),
            downstream_per_class: default_downstream_per_class(),
            test_per_class: default_test_per_class(),
            attacker_pool_per_class: default_attacker_pool_per_class(),
            image_side: default_image_side(),
        }
    }
}

/// Per-trial attack shape. The poison budget is a fraction of the clean
/// pre-training pool rather than an absolute count, so the same config
/// scales with the dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub n_targets: usize,
    pub n_references: usize,
    pub poison_rate: f64,
    pub methods: Vec<CombineMethod>,
    pub evasion_crop_scale: f64,
    /// Use the interpolation schedule instead of concatenation.
    pub use_icp: bool,
    pub icp_steps: usize,
    /// When positive, refine the poison pixels by gradient-alignment
    /// ascent against a surrogate encoder trained on the clean pool.
    pub alignment_steps: usize,
    pub alignment_step_size: f32,
    pub alignment_probe: f32,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            n_targets: 1,
            n_references: 10,
            poison_rate: 0.01,
            methods: CombineMethod::ALL.to_vec(),
            evasion_crop_scale: 1.0,
            use_icp: false,
            icp_steps: 5,
            alignment_steps: 0,
            alignment_step_size: 2.0 / 255.0,
            alignment_probe: 1.0 / 255.0,
        }
    }
}

/// Optional one-trial parameter sweeps, plotted as ASR curves.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub poison_rate: Vec<f64>,
    pub crop_scale: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub attack: AttackConfig,
    pub pretrain: PretrainConfig,
    pub downstream: DownstreamConfig,
    pub defenses: Vec<DefenseKind>,
    pub defense_params: DefenseParams,
    pub n_trials: usize,
    pub workers: usize,
    pub output_dir: PathBuf,
    pub master_seed: u64,
    pub sweeps: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSpec::default(),
            attack: AttackConfig::default(),
            pretrain: PretrainConfig::default(),
            downstream: DownstreamConfig::default(),
            defenses: Vec::new(),
            defense_params: DefenseParams::default(),
            n_trials: 5,
            workers: 1,
            output_dir: PathBuf::from("runs/experiment"),
            master_seed: 7,
            sweeps: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trials == 0 {
            return Err(Error::invalid("n_trials must be at least 1"));
        }
        if self.workers == 0 {
            return Err(Error::invalid("workers must be at least 1"));
        }
        self.pretrain.validate()?;
        self.downstream.validate()?;
        self.defense_params.validate()?;

        let a = &self.attack;
        if a.n_targets == 0 || a.n_references == 0 {
            return Err(Error::invalid(
                "n_targets and n_references must be at least 1",
            ));
        }
        if !(a.poison_rate > 0.0 && a.poison_rate <= 1.0) {
            return Err(Error::invalid(format!(
                "poison_rate {} is outside (0,1]",
                a.poison_rate
            )));
        }
        if a.methods.is_empty() {
            return Err(Error::invalid("at least one combination method is required"));
        }
        if !(a.evasion_crop_scale > 0.0 && a.evasion_crop_scale <= 1.0) {
            return Err(Error::invalid(format!(
                "evasion_crop_scale {} is outside (0,1]",
                a.evasion_crop_scale
            )));
        }
        if a.use_icp && a.icp_steps < 2 {
            return Err(Error::invalid("icp_steps must be at least 2"));
        }
        if a.alignment_steps > 0 && !(a.alignment_step_size > 0.0 && a.alignment_probe > 0.0) {
            return Err(Error::invalid(
                "alignment_step_size and alignment_probe must be positive",
            ));
        }

        match &self.dataset {
            DatasetSpec::Synthetic {
                n_classes,
                pretrain_per_class,
                downstream_per_class,
                test_per_class,
                attacker_pool_per_class,
                image_side,
            } => {
                if *n_classes < 2 {
                    return Err(Error::invalid("n_classes must be at least 2"));
                }
                if *pretrain_per_class == 0
                    || *downstream_per_class == 0
                    || *test_per_class == 0
                    || *attacker_pool_per_class == 0
                {
                    return Err(Error::invalid("per-class dataset counts must be positive"));
                }
                if *image_side < 8 {
                    return Err(Error::invalid("image_side must be at least 8"));
                }
            }
            DatasetSpec::Containers {
                pretrain,
                downstream,
                test,
                attacker_pool,
            } => {
                for path in [pretrain, downstream, test, attacker_pool] {
                    if !path.exists() {
                        return Err(Error::invalid(format!(
                            "dataset container {} does not exist",
                            path.display()
                        )));
                    }
                }
            }
        }

        let mut seen = BTreeSet::new();
        for kind in &self.defenses {
            if !seen.insert(kind.name()) {
                return Err(Error::invalid(format!(
                    "defense {} is listed more than once",
                    kind.name()
                )));
            }
        }
        for v in &self.sweeps.poison_rate {
            if !(*v > 0.0 && *v <= 1.0) {
                return Err(Error::invalid(format!(
                    "swept poison_rate {v} is outside (0,1]"
                )));
            }
        }
        for v in &self.sweeps.crop_scale {
            if !(*v > 0.0 && *v <= 1.0) {
                return Err(Error::invalid(format!(
                    "swept crop_scale {v} is outside (0,1]"
                )));
            }
        }
        Ok(())
    }
}

/// Parses and validates a config file. Parse failures name the JSON
/// field path that caused them.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let offset = line_col_to_offset(&text, e.inner().line(), e.inner().column());
        Error::format(path, offset, format!("at {}: {}", e.path(), e.inner()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn line_col_to_offset(text: &str, line: usize, column: usize) -> u64 {
    if line == 0 {
        return 0;
    }
    let before: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (before + column.saturating_sub(1)) as u64
}

/// One trial's complete result, as stored in `trial_NNN/report.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: usize,
    pub seed: u64,
    pub poison_budget: usize,
    /// Metrics of the clean encoder (its `pa` equals its `ca`).
    pub clean: MetricsReport,
    /// Metrics of the undefended poisoned encoder.
    pub poisoned: MetricsReport,
    /// Post-defense metrics, keyed by defense name.
    pub defenses: BTreeMap<String, MetricsReport>,
}

/// Aggregate statistics for one metric column across trials.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// Result of a full run: per-trial reports in trial order plus the
/// aggregate table.
#[derive(Debug)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub reports: Vec<TrialReport>,
    pub resumed: usize,
    pub summary: Vec<SummaryRow>,
}

/// The four datasets one trial operates on.
pub struct TrialData {
    pub clean_pool: UnlabeledDataset,
    pub downstream_train: LabeledDataset,
    pub test: LabeledDataset,
    pub attacker_pool: LabeledDataset,
}

/// Everything a trial needs before any encoder is trained: datasets,
/// the drawn attack description, the built poison, and the poisoned
/// pre-training pool. Standalone pipeline steps (poison construction,
/// defense runs) start from here so they agree with full runs.
pub struct TrialSetup {
    pub trial_seed: u64,
    pub data: TrialData,
    pub spec: AttackSpec,
    pub poison: PoisonBatch,
    pub merged: UnlabeledDataset,
}

pub fn prepare_trial(cfg: &ExperimentConfig, trial: usize) -> Result<TrialSetup> {
    let trial_seed = rng::derive_seed(cfg.master_seed, &[tag::TRIAL, trial as u64]);
    let data = build_data(cfg, trial_seed)?;
    let spec = build_attack_spec(cfg, &data, trial_seed)?;
    let poison = build_poison_batch(cfg, &spec, &data.clean_pool, trial_seed)?;
    let merged = merge_poison(&data.clean_pool, &poison.to_dataset(), trial_seed)?;
    Ok(TrialSetup {
        trial_seed,
        data,
        spec,
        poison,
        merged,
    })
}

fn build_data(cfg: &ExperimentConfig, trial_seed: u64) -> Result<TrialData> {
    match &cfg.dataset {
        DatasetSpec::Synthetic {
            n_classes,
            pretrain_per_class,
            downstream_per_class,
            test_per_class,
            attacker_pool_per_class,
            image_side,
        } => {
            let pre = generate_synthetic(
                *pretrain_per_class,
                *n_classes,
                *image_side,
                rng::derive_seed(trial_seed, &[tag::SYNTH, 0]),
            )?;
            let n = pre.images.len();
            let clean_pool = UnlabeledDataset::new(pre.images, vec![Provenance::Clean; n])?;
            let downstream_train = generate_synthetic(
                *downstream_per_class,
                *n_classes,
                *image_side,
                rng::derive_seed(trial_seed, &[tag::SYNTH, 1]),
            )?;
            let test = generate_synthetic(
                *test_per_class,
                *n_classes,
                *image_side,
                rng::derive_seed(trial_seed, &[tag::SYNTH, 2]),
            )?;
            let attacker_pool = generate_synthetic(
                *attacker_pool_per_class,
                *n_classes,
                *image_side,
                rng::derive_seed(trial_seed, &[tag::SYNTH, 3]),
            )?;
            Ok(TrialData {
                clean_pool,
                downstream_train,
                test,
                attacker_pool,
            })
        }
        DatasetSpec::Containers {
            pretrain,
            downstream,
            test,
            attacker_pool,
        } => Ok(TrialData {
            clean_pool: read_container(pretrain)?.into_unlabeled()?,
            downstream_train: read_container(downstream)?.into_labeled()?,
            test: read_container(test)?.into_labeled()?,
            attacker_pool: read_container(attacker_pool)?.into_labeled()?,
        }),
    }
}

/// Draws the trial's attack description from the attacker pool. Draw
/// order per trial: target indices (one sample without replacement),
/// then per target its desired class followed by its reference sample.
fn build_attack_spec(
    cfg: &ExperimentConfig,
    data: &TrialData,
    trial_seed: u64,
) -> Result<AttackSpec> {
    let pool = &data.attacker_pool;
    let n_classes = pool.class_names.len();
    if n_classes < 2 {
        return Err(Error::invalid("attacker pool needs at least 2 classes"));
    }
    let a = &cfg.attack;
    if a.n_targets > pool.len() {
        return Err(Error::invalid(format!(
            "{} targets requested from a pool of {}",
            a.n_targets,
            pool.len()
        )));
    }
    let mut draw = rng::stream_for(trial_seed, &[tag::TARGETS]);
    let target_indices =
        rand::seq::index::sample(&mut draw, pool.len(), a.n_targets).into_vec();
    let taken: BTreeSet<usize> = target_indices.iter().copied().collect();

    let mut targets = Vec::with_capacity(a.n_targets);
    let mut target_classes = Vec::with_capacity(a.n_targets);
    let mut references = Vec::with_capacity(a.n_targets);
    for &ti in &target_indices {
        let true_class = pool.labels[ti];
        let r = draw.random_range(0..n_classes as u32 - 1);
        let desired = if r >= true_class { r + 1 } else { r };

        let candidates: Vec<usize> = (0..pool.len())
            .filter(|&j| pool.labels[j] == desired && !taken.contains(&j))
            .collect();
        if candidates.len() < a.n_references {
            return Err(Error::invalid(format!(
                "class {desired} offers {} reference candidates but {} are required",
                candidates.len(),
                a.n_references
            )));
        }
        let picks = rand::seq::index::sample(&mut draw, candidates.len(), a.n_references);
        references.push(
            picks
                .iter()
                .map(|p| pool.images[candidates[p]].clone())
                .collect(),
        );
        targets.push(pool.images[ti].clone());
        target_classes.push(desired);
    }

    let budget = ((a.poison_rate * data.clean_pool.len() as f64).round() as usize).max(1);
    Ok(AttackSpec {
        tasks: vec![AttackTask {
            targets,
            target_classes,
            references,
        }],
        budget,
        methods: a.methods.clone(),
        evasion_crop_scale: a.evasion_crop_scale,
        seed: trial_seed,
    })
}

fn build_poison_batch(
    cfg: &ExperimentConfig,
    spec: &AttackSpec,
    clean_pool: &UnlabeledDataset,
    trial_seed: u64,
) -> Result<PoisonBatch> {
    let a = &cfg.attack;
    let mut batch = if a.use_icp {
        build_icp_poison(spec, a.icp_steps)?
    } else {
        build_poison(spec)?
    };
    if a.alignment_steps > 0 {
        let mut scfg = cfg.pretrain.clone();
        scfg.seed = rng::derive_seed(trial_seed, &[tag::ALIGN]);
        let surrogate = pretrain(clean_pool, &scfg, None)?;
        batch = optimize_poison_alignment(
            &surrogate,
            &batch,
            spec,
            &scfg,
            a.alignment_steps,
            a.alignment_step_size,
            a.alignment_probe,
        )?;
    }
    Ok(batch)
}

#[derive(Serialize)]
struct LossLine<'a> {
    phase: &'a str,
    epoch: usize,
    loss: f64,
}

/// Runs one trial end to end and writes its artifacts (report, loss
/// log, loss plot, poison container, encoder checkpoints) into
/// `out_dir`, which must already exist.
pub fn run_trial(cfg: &ExperimentConfig, trial: usize, out_dir: &Path) -> Result<TrialReport> {
    let TrialSetup {
        trial_seed,
        data,
        spec,
        poison,
        merged,
    } = prepare_trial(cfg, trial)?;
    save_poison(
        &poison,
        &out_dir.join("poison.penc"),
        &out_dir.join("poison.json"),
    )?;

    // Clean encoder.
    let mut clean_losses: Vec<f64> = Vec::new();
    let mut clean_cb = |_epoch: usize, loss: f64| {
        clean_losses.push(loss);
        true
    };
    let mut ccfg = cfg.pretrain.clone();
    ccfg.seed = rng::derive_seed(trial_seed, &[tag::CLEAN]);
    let state_clean = pretrain(&data.clean_pool, &ccfg, Some(&mut clean_cb))?;
    let clf_clean = train_linear_on(
        &state_clean,
        &data.downstream_train,
        &cfg.downstream,
        rng::derive_seed(trial_seed, &[tag::CLEAN, tag::LINEAR]),
    )?;
    let (ca, clean_per_class) = evaluate_accuracy(&clf_clean, &state_clean, &data.test)?;
    let clean_asr = evaluate_asr(
        &vec![clf_clean; spec.tasks.len()],
        &state_clean,
        &spec,
    )?;
    let outer_clean = outer_objective(&state_clean, &spec)?;
    save_checkpoint(&state_clean, &out_dir.join("clean.penw"))?;

    // Poisoned encoder. Seed derivations mirror the defense module's
    // undefended baseline so defense reports compare like for like.
    let mut poisoned_losses: Vec<f64> = Vec::new();
    let mut poisoned_cb = |_epoch: usize, loss: f64| {
        poisoned_losses.push(loss);
        true
    };
    let mut pcfg = cfg.pretrain.clone();
    pcfg.seed = rng::derive_seed(trial_seed, &[tag::DEFENSE]);
    let state_poisoned = pretrain(&merged, &pcfg, Some(&mut poisoned_cb))?;
    let clf_poisoned = train_linear_on(
        &state_poisoned,
        &data.downstream_train,
        &cfg.downstream,
        rng::derive_seed(trial_seed, &[tag::LINEAR]),
    )?;
    let (pa, poisoned_per_class) = evaluate_accuracy(&clf_poisoned, &state_poisoned, &data.test)?;
    let asr = evaluate_asr(
        &vec![clf_poisoned; spec.tasks.len()],
        &state_poisoned,
        &spec,
    )?;
    let outer_poisoned = outer_objective(&state_poisoned, &spec)?;
    save_checkpoint(&state_poisoned, &out_dir.join("poisoned.penw"))?;

    // Training log and loss curves.
    let mut jsonl = String::new();
    for (phase, losses) in [("clean", &clean_losses), ("poisoned", &poisoned_losses)] {
        for (epoch, &loss) in losses.iter().enumerate() {
            let line = serde_json::to_string(&LossLine { phase, epoch, loss })
                .expect("loss line serializes");
            jsonl.push_str(&line);
            jsonl.push('\n');
        }
    }
    write_file(&out_dir.join("losses.jsonl"), jsonl.as_bytes())?;
    let curve = |losses: &[f64]| -> Vec<(f64, f64)> {
        losses
            .iter()
            .enumerate()
            .map(|(e, &l)| (e as f64, l))
            .collect()
    };
    let svg = svg_line_chart(
        &format!("Pre-training loss, trial {trial}"),
        "epoch",
        "mean loss",
        &[
            ("clean".to_string(), curve(&clean_losses)),
            ("poisoned".to_string(), curve(&poisoned_losses)),
        ],
    );
    write_file(&out_dir.join("loss_curves.svg"), svg.as_bytes())?;

    let clean_report = MetricsReport {
        asr: clean_asr,
        ca,
        pa: ca,
        outer_objective: outer_clean,
        per_class_accuracy: clean_per_class,
        fpr: None,
        fnr: None,
        metadata: serde_json::json!({
            "phase": "clean",
            "trial": trial,
            "seed": trial_seed,
        }),
    };
    clean_report.validate()?;
    let poisoned_report = MetricsReport {
        asr,
        ca,
        pa,
        outer_objective: outer_poisoned,
        per_class_accuracy: poisoned_per_class,
        fpr: None,
        fnr: None,
        metadata: serde_json::json!({
            "phase": "poisoned",
            "trial": trial,
            "seed": trial_seed,
            "poison_budget": spec.budget,
        }),
    };
    poisoned_report.validate()?;

    // Defenses, each seeded identically so they share the baseline.
    let ctx = DefenseContext {
        poisoned: &merged,
        clean: &data.clean_pool,
        downstream_train: &data.downstream_train,
        test: &data.test,
        spec: &spec,
        pretrain: &cfg.pretrain,
        downstream: &cfg.downstream,
        params: &cfg.defense_params,
        clean_accuracy: ca,
    };
    let mut defenses = BTreeMap::new();
    for kind in &cfg.defenses {
        let report = run_defense_pipeline(*kind, &ctx, trial_seed)?;
        defenses.insert(kind.name().to_string(), report);
    }

    let report = TrialReport {
        trial,
        seed: trial_seed,
        poison_budget: spec.budget,
        clean: clean_report,
        poisoned: poisoned_report,
        defenses,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(&out_dir.join("report.json"), format!("{json}\n").as_bytes())?;
    Ok(report)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn trial_dir(run_dir: &Path, trial: usize) -> PathBuf {
    run_dir.join(format!("trial_{trial:03}"))
}

fn read_trial_report(path: &Path) -> Result<TrialReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::format(path, 0, format!("bad trial report: {e}")))
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: String,
    trials: Vec<String>,
    checkpoints: Vec<String>,
    tables: Vec<String>,
    plots: Vec<String>,
}

/// Runs the whole experiment: all trials (skipping ones already
/// finalized in the output directory), aggregate tables, optional
/// sweeps, and the run manifest.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let run_dir = cfg.output_dir.clone();
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;

    // The resolved config is the run's identity: resuming into a
    // directory whose snapshot differs is refused.
    let snapshot = format!(
        "{}\n",
        serde_json::to_string_pretty(cfg).expect("config serializes")
    );
    let cfg_path = run_dir.join("config.json");
    if cfg_path.exists() {
        let existing = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        if existing != snapshot {
            return Err(Error::invalid(format!(
                "{} already holds a different experiment; use a fresh output_dir",
                run_dir.display()
            )));
        }
    } else {
        write_file(&cfg_path, snapshot.as_bytes())?;
    }

    let mut reports: Vec<Option<TrialReport>> = (0..cfg.n_trials).map(|_| None).collect();
    let mut pending: Vec<usize> = Vec::new();
    let mut resumed = 0usize;
    for i in 0..cfg.n_trials {
        let dir = trial_dir(&run_dir, i);
        let expected_seed = rng::derive_seed(cfg.master_seed, &[tag::TRIAL, i as u64]);
        match read_trial_report(&dir.join("report.json")) {
            Ok(r) if r.trial == i && r.seed == expected_seed => {
                reports[i] = Some(r);
                resumed += 1;
            }
            _ => pending.push(i),
        }
    }

    // Discard partial leftovers for the trials being (re)computed.
    for &i in &pending {
        let dir = trial_dir(&run_dir, i);
        let tmp = run_dir.join(format!("trial_{i:03}.tmp"));
        let _ = fs::remove_dir_all(&dir);
        let _ = fs::remove_dir_all(&tmp);
    }

    if cfg.workers <= 1 || pending.len() <= 1 {
        for &i in &pending {
            reports[i] = Some(execute_trial(cfg, &run_dir, i)?);
        }
    } else {
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<(usize, Result<TrialReport>)>> = Mutex::new(Vec::new());
        std::thread::scope(|scope| {
            for _ in 0..cfg.workers.min(pending.len()) {
                scope.spawn(|| loop {
                    let slot = next.fetch_add(1, Ordering::SeqCst);
                    if slot >= pending.len() {
                        break;
                    }
                    let i = pending[slot];
                    let result = execute_trial(cfg, &run_dir, i);
                    results.lock().expect("results lock").push((i, result));
                });
            }
        });
        let mut collected = results.into_inner().expect("results lock");
        collected.sort_by_key(|(i, _)| *i);
        for (i, result) in collected {
            reports[i] = Some(result?);
        }
    }
    let reports: Vec<TrialReport> = reports
        .into_iter()
        .map(|r| r.expect("every trial produced a report"))
        .collect();

    let defense_names = defense_name_union(&reports);
    write_file(
        &run_dir.join("trials.csv"),
        trials_csv(&reports, &defense_names).as_bytes(),
    )?;
    let summary = summarize(&reports, &defense_names);
    write_file(
        &run_dir.join("summary.csv"),
        summary_csv(&summary).as_bytes(),
    )?;

    let mut plots: Vec<String> = (0..cfg.n_trials)
        .map(|i| format!("trial_{i:03}/loss_curves.svg"))
        .collect();
    let mut tables = vec!["trials.csv".to_string(), "summary.csv".to_string()];
    run_sweeps(cfg, &run_dir, &mut tables, &mut plots)?;

    let manifest = Manifest {
        config: "config.json".to_string(),
        trials: (0..cfg.n_trials)
            .map(|i| format!("trial_{i:03}/report.json"))
            .collect(),
        checkpoints: (0..cfg.n_trials)
            .flat_map(|i| {
                [
                    format!("trial_{i:03}/clean.penw"),
                    format!("trial_{i:03}/poisoned.penw"),
                ]
            })
            .collect(),
        tables,
        plots,
    };
    let manifest_json =
        serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(
        &run_dir.join("manifest.json"),
        format!("{manifest_json}\n").as_bytes(),
    )?;
    verify_run_dir(&run_dir)?;

    Ok(RunSummary {
        run_dir,
        reports,
        resumed,
        summary,
    })
}

fn execute_trial(cfg: &ExperimentConfig, run_dir: &Path, trial: usize) -> Result<TrialReport> {
    let tmp = run_dir.join(format!("trial_{trial:03}.tmp"));
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let report = run_trial(cfg, trial, &tmp)?;
    let final_dir = trial_dir(run_dir, trial);
    fs::rename(&tmp, &final_dir).map_err(|e| Error::io(&final_dir, e))?;
    Ok(report)
}

/// Re-runs the trial-0 pipeline once per swept value, measuring ASR only.
fn run_sweeps(
    cfg: &ExperimentConfig,
    run_dir: &Path,
    tables: &mut Vec<String>,
    plots: &mut Vec<String>,
) -> Result<()> {
    let sweeps: [(&str, &[f64]); 2] = [
        ("poison_rate", &cfg.sweeps.poison_rate),
        ("crop_scale", &cfg.sweeps.crop_scale),
    ];
    for (param, values) in sweeps {
        if values.is_empty() {
            continue;
        }
        let mut points = Vec::with_capacity(values.len());
        for &v in values {
            let mut swept = cfg.clone();
            match param {
                "poison_rate" => swept.attack.poison_rate = v,
                _ => swept.attack.evasion_crop_scale = v,
            }
            points.push((v, sweep_asr(&swept)?));
        }
        let mut csv = String::from("param,value,asr\r\n");
        for &(v, asr) in &points {
            let _ = write!(csv, "{param},{v:.6},{asr:.6}\r\n");
        }
        let table = format!("sweep_{param}.csv");
        write_file(&run_dir.join(&table), csv.as_bytes())?;
        tables.push(table);

        let svg = svg_line_chart(
            &format!("ASR vs {param}"),
            param,
            "ASR",
            &[("asr".to_string(), points)],
        );
        let plot = format!("asr_vs_{param}.svg");
        write_file(&run_dir.join(&plot), svg.as_bytes())?;
        plots.push(plot);
    }
    Ok(())
}

/// One reduced trial (no clean encoder, no defenses, no artifacts) that
/// returns the poisoned-encoder ASR for a sweep point.
fn sweep_asr(cfg: &ExperimentConfig) -> Result<f64> {
    let TrialSetup {
        trial_seed,
        data,
        spec,
        merged,
        ..
    } = prepare_trial(cfg, 0)?;
    let mut pcfg = cfg.pretrain.clone();
    pcfg.seed = rng::derive_seed(trial_seed, &[tag::DEFENSE]);
    let state = pretrain(&merged, &pcfg, None)?;
    let clf = train_linear_on(
        &state,
        &data.downstream_train,
        &cfg.downstream,
        rng::derive_seed(trial_seed, &[tag::LINEAR]),
    )?;
    evaluate_asr(&vec![clf; spec.tasks.len()], &state, &spec)
}

/// Confirms every artifact the manifest names is present on disk.
pub fn verify_run_dir(run_dir: &Path) -> Result<()> {
    let manifest_path = run_dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(&manifest_path, 0, format!("bad manifest: {e}")))?;
    let mut missing = Vec::new();
    let all = std::iter::once(&manifest.config)
        .chain(&manifest.trials)
        .chain(&manifest.checkpoints)
        .chain(&manifest.tables)
        .chain(&manifest.plots);
    for rel in all {
        if !run_dir.join(rel).exists() {
            missing.push(rel.clone());
        }
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "run directory {} is missing {}",
            run_dir.display(),
            missing.join(", ")
        )))
    }
}

/// Aggregated view of an existing run directory, tolerant of damaged
/// trial files: unreadable reports are listed and skipped.
#[derive(Debug)]
pub struct RunReport {
    pub n_valid: usize,
    pub skipped: Vec<(PathBuf, String)>,
    pub summary: Vec<SummaryRow>,
}

pub fn report(run_dir: &Path) -> Result<RunReport> {
    let mut trial_paths: Vec<PathBuf> = fs::read_dir(run_dir)
        .map_err(|e| Error::io(run_dir, e))?
        .filter_map(|entry| entry.ok())
        .map(|entry| entry.path())
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .map(|n| n.starts_with("trial_") && !n.ends_with(".tmp"))
                    .unwrap_or(false)
        })
        .collect();
    trial_paths.sort();

    let mut valid = Vec::new();
    let mut skipped = Vec::new();
    for dir in trial_paths {
        let path = dir.join("report.json");
        match read_trial_report(&path) {
            Ok(r) => valid.push(r),
            Err(e) => skipped.push((path, e.to_string())),
        }
    }
    if valid.is_empty() {
        return Err(Error::invalid(format!(
            "{} contains no readable trial reports",
            run_dir.display()
        )));
    }
    let names = defense_name_union(&valid);
    Ok(RunReport {
        n_valid: valid.len(),
        skipped,
        summary: summarize(&valid, &names),
    })
}

// ---- tables -------------------------------------------------------------

fn defense_name_union(reports: &[TrialReport]) -> Vec<String> {
    let mut names = BTreeSet::new();
    for r in reports {
        for name in r.defenses.keys() {
            names.insert(name.clone());
        }
    }
    names.into_iter().collect()
}

fn metric_columns(defense_names: &[String]) -> Vec<String> {
    let mut cols: Vec<String> = [
        "ca",
        "pa",
        "asr",
        "clean_asr",
        "outer_clean",
        "outer_poisoned",
    ]
    .into_iter()
    .map(String::from)
    .collect();
    for name in defense_names {
        for suffix in ["asr", "pa", "outer", "fpr", "fnr"] {
            cols.push(format!("{name}_{suffix}"));
        }
    }
    cols
}

fn metric_value(report: &TrialReport, column: &str) -> Option<f64> {
    match column {
        "ca" => return Some(report.clean.ca),
        "pa" => return Some(report.poisoned.pa),
        "asr" => return Some(report.poisoned.asr),
        "clean_asr" => return Some(report.clean.asr),
        "outer_clean" => return Some(report.clean.outer_objective),
        "outer_poisoned" => return Some(report.poisoned.outer_objective),
        _ => {}
    }
    for (name, metrics) in &report.defenses {
        let Some(suffix) = column
            .strip_prefix(name.as_str())
            .and_then(|rest| rest.strip_prefix('_'))
        else {
            continue;
        };
        return match suffix {
            "asr" => Some(metrics.asr),
            "pa" => Some(metrics.pa),
            "outer" => Some(metrics.outer_objective),
            "fpr" => metrics.fpr,
            "fnr" => metrics.fnr,
            _ => None,
        };
    }
    None
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn csv_row(fields: &[String]) -> String {
    let mut row = fields
        .iter()
        .map(|f| csv_field(f))
        .collect::<Vec<_>>()
        .join(",");
    row.push_str("\r\n");
    row
}

fn trials_csv(reports: &[TrialReport], defense_names: &[String]) -> String {
    let columns = metric_columns(defense_names);
    let mut header = vec!["trial".to_string(), "seed".to_string()];
    header.extend(columns.iter().cloned());
    let mut out = csv_row(&header);
    for r in reports {
        let mut fields = vec![r.trial.to_string(), r.seed.to_string()];
        for col in &columns {
            fields.push(match metric_value(r, col) {
                Some(v) => format!("{v:.6}"),
                None => String::new(),
            });
        }
        out.push_str(&csv_row(&fields));
    }
    out
}

fn summarize(reports: &[TrialReport], defense_names: &[String]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for col in metric_columns(defense_names) {
        let values: Vec<f64> = reports.iter().filter_map(|r| metric_value(r, &col)).collect();
        if values.is_empty() {
            continue;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        rows.push(SummaryRow {
            metric: col,
            n,
            mean,
            std: var.sqrt(),
            min,
            max,
        });
    }
    rows
}

fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = csv_row(&[
        "metric".to_string(),
        "n".to_string(),
        "mean".to_string(),
        "std".to_string(),
        "min".to_string(),
        "max".to_string(),
    ]);
    for row in rows {
        out.push_str(&csv_row(&[
            row.metric.clone(),
            row.n.to_string(),
            format!("{:.6}", row.mean),
            format!("{:.6}", row.std),
            format!("{:.6}", row.min),
            format!("{:.6}", row.max),
        ]));
    }
    out
}

// ---- plots --------------------------------------------------------------

const SVG_COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn fmt_tick(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 && v.abs() < 1e7 {
        format!("{:.0}", v.round())
    } else {
        format!("{v:.3}")
    }
}

/// Minimal self-contained polyline chart. Axes, ticks, legend, one
/// polyline per series; deterministic output for identical input.
fn svg_line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const ML: f64 = 64.0;
    const MR: f64 = 24.0;
    const MT: f64 = 42.0;
    const MB: f64 = 52.0;

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {W} {H}\" \
         font-family=\"sans-serif\">\n"
    );
    let _ = write!(
        svg,
        "<rect width=\"{W}\" height=\"{H}\" fill=\"#ffffff\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\" fill=\"#222\">{}</text>\n",
        W / 2.0,
        xml_escape(title)
    );

    let points: Vec<(f64, f64)> = series.iter().flat_map(|(_, pts)| pts.iter().copied()).collect();
    if points.is_empty() {
        let _ = write!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\" fill=\"#666\">no data</text>\n</svg>\n",
            W / 2.0,
            H / 2.0
        );
        return svg;
    }
    let (mut x0, mut x1) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.0), hi.max(p.0))
        });
    let (mut y0, mut y1) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.1), hi.max(p.1))
        });
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| ML + (x - x0) / (x1 - x0) * (W - ML - MR);
    let sy = |y: f64| H - MB - (y - y0) / (y1 - y0) * (H - MT - MB);

    // Axes and ticks.
    let _ = write!(
        svg,
        "<line x1=\"{ML}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#333\"/>\n\
         <line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{}\" stroke=\"#333\"/>\n",
        H - MB,
        W - MR,
        H - MB,
        H - MB
    );
    for i in 0..5 {
        let t = i as f64 / 4.0;
        let xv = x0 + t * (x1 - x0);
        let yv = y0 + t * (y1 - y0);
        let _ = write!(
            svg,
            "<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"#333\"/>\n\
             <text x=\"{0}\" y=\"{3}\" text-anchor=\"middle\" font-size=\"11\" fill=\"#333\">{4}</text>\n",
            sx(xv),
            H - MB,
            H - MB + 5.0,
            H - MB + 18.0,
            fmt_tick(xv)
        );
        let _ = write!(
            svg,
            "<line x1=\"{1}\" y1=\"{0}\" x2=\"{2}\" y2=\"{0}\" stroke=\"#333\"/>\n\
             <text x=\"{3}\" y=\"{4}\" text-anchor=\"end\" font-size=\"11\" fill=\"#333\">{5}</text>\n",
            sy(yv),
            ML - 5.0,
            ML,
            ML - 8.0,
            sy(yv) + 4.0,
            fmt_tick(yv)
        );
    }
    let _ = write!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\" fill=\"#333\">{}</text>\n\
         <text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\" fill=\"#333\" \
         transform=\"rotate(-90 16 {})\">{}</text>\n",
        (ML + W - MR) / 2.0,
        H - 14.0,
        xml_escape(x_label),
        (MT + H - MB) / 2.0,
        (MT + H - MB) / 2.0,
        xml_escape(y_label)
    );

    for (s, (name, pts)) in series.iter().enumerate() {
        let color = SVG_COLORS[s % SVG_COLORS.len()];
        if !pts.is_empty() {
            let path: Vec<String> = pts
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            let _ = write!(
                svg,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
                path.join(" ")
            );
        }
        // Legend entry.
        let ly = MT + 14.0 * s as f64;
        let _ = write!(
            svg,
            "<line x1=\"{0}\" y1=\"{ly}\" x2=\"{1}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n\
             <text x=\"{2}\" y=\"{3}\" font-size=\"11\" fill=\"#333\">{4}</text>\n",
            W - MR - 110.0,
            W - MR - 90.0,
            W - MR - 84.0,
            ly + 4.0,
            xml_escape(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arch;
    use tempfile::TempDir;

    fn tiny_arch() -> Arch {
        Arch {
            input_channels: 3,
            widths: vec![4, 8],
            groups: 4,
            feature_dim: 8,
            head_width: 8,
            proj_dim: 4,
        }
    }

    fn tiny_config(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetSpec::Synthetic {
                n_classes: 2,
                pretrain_per_class: 12,
                downstream_per_class: 4,
                test_per_class: 4,
                attacker_pool_per_class: 6,
                image_side: 8,
            },
            attack: AttackConfig {
                n_targets: 1,
                n_references: 2,
                poison_rate: 0.2,
                ..AttackConfig::default()
            },
            pretrain: PretrainConfig {
                epochs: 1,
                batch_size: 8,
                arch: tiny_arch(),
                ..PretrainConfig::default()
            },
            downstream: DownstreamConfig {
                epochs: 2,
                ..DownstreamConfig::default()
            },
            defenses: vec![DefenseKind::EarlyStop],
            defense_params: DefenseParams {
                early_stop_epochs: 1,
                ..DefenseParams::default()
            },
            n_trials: 1,
            workers: 1,
            output_dir: dir.to_path_buf(),
            master_seed: 99,
            sweeps: SweepConfig::default(),
        }
    }

    #[test]
    fn empty_json_parses_to_defaults() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("config.json");
        fs::write(&path, "{}").unwrap();
        let cfg = load_config(&path).unwrap();
        assert_eq!(cfg.n_trials, 5);
        assert_eq!(cfg.attack.n_references, 10);
        assert!(matches!(cfg.dataset, DatasetSpec::Synthetic { .. }));
    }

    #[test]
    fn parse_errors_name_the_field_path() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("config.json");
        fs::write(&path, r#"{"pretrain": {"temperature": "hot"}}"#).unwrap();
        let err = load_config(&path).unwrap_err().to_string();
        assert!(err.contains("pretrain.temperature"), "{err}");

        // Validation failures surface too.
        fs::write(&path, r#"{"n_trials": 0}"#).unwrap();
        assert!(load_config(&path).is_err());
        fs::write(&path, r#"{"attack": {"poison_rate": 2.0}}"#).unwrap();
        assert!(load_config(&path).is_err());
    }

    #[test]
    fn container_paths_must_exist() {
        let cfg = ExperimentConfig {
            dataset: DatasetSpec::Containers {
                pretrain: PathBuf::from("/nonexistent/a.penc"),
                downstream: PathBuf::from("/nonexistent/b.penc"),
                test: PathBuf::from("/nonexistent/c.penc"),
                attacker_pool: PathBuf::from("/nonexistent/d.penc"),
            },
            ..ExperimentConfig::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("does not exist"));
    }

    #[test]
    fn duplicate_defenses_are_rejected() {
        let cfg = ExperimentConfig {
            defenses: vec![DefenseKind::Bagging, DefenseKind::Bagging],
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn full_run_writes_every_artifact() {
        let dir = TempDir::new().unwrap();
        let cfg = tiny_config(dir.path());
        let summary = run_experiment(&cfg).unwrap();
        assert_eq!(summary.reports.len(), 1);
        assert_eq!(summary.resumed, 0);

        for rel in [
            "config.json",
            "trials.csv",
            "summary.csv",
            "manifest.json",
            "trial_000/report.json",
            "trial_000/losses.jsonl",
            "trial_000/loss_curves.svg",
            "trial_000/poison.penc",
            "trial_000/poison.json",
            "trial_000/clean.penw",
            "trial_000/poisoned.penw",
        ] {
            assert!(dir.path().join(rel).exists(), "missing {rel}");
        }
        verify_run_dir(dir.path()).unwrap();

        let r = &summary.reports[0];
        r.clean.validate().unwrap();
        r.poisoned.validate().unwrap();
        assert_eq!(r.clean.pa, r.clean.ca);
        assert!(r.defenses.contains_key("early_stop"));
        // budget = round(0.2 * 24) = 5
        assert_eq!(r.poison_budget, 5);

        // The early-stop defense ran the same epoch count as the
        // baseline, so its report matches the undefended metrics.
        let stopped = &r.defenses["early_stop"];
        assert_eq!(stopped.asr, r.poisoned.asr);
        assert_eq!(stopped.pa, r.poisoned.pa);

        // Loss log has one line per phase-epoch.
        let jsonl = fs::read_to_string(dir.path().join("trial_000/losses.jsonl")).unwrap();
        assert_eq!(jsonl.lines().count(), 2);
        assert!(jsonl.contains("\"phase\":\"clean\""));
    }

    #[test]
    fn reruns_are_byte_identical() {
        let dir_a = TempDir::new().unwrap();
        let dir_b = TempDir::new().unwrap();
        let mut cfg_a = tiny_config(dir_a.path());
        cfg_a.defenses = vec![];
        let mut cfg_b = cfg_a.clone();
        cfg_b.output_dir = dir_b.path().to_path_buf();
        run_experiment(&cfg_a).unwrap();
        run_experiment(&cfg_b).unwrap();
        for table in ["trials.csv", "summary.csv"] {
            let a = fs::read(dir_a.path().join(table)).unwrap();
            let b = fs::read(dir_b.path().join(table)).unwrap();
            assert_eq!(a, b, "{table} differs between identical runs");
        }
        // The trial reports agree too (paths aside, content is seeded).
        let ra = fs::read(dir_a.path().join("trial_000/report.json")).unwrap();
        let rb = fs::read(dir_b.path().join("trial_000/report.json")).unwrap();
        assert_eq!(ra, rb);
    }

    #[test]
    fn finished_trials_are_not_recomputed() {
        let dir = TempDir::new().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.defenses = vec![];
        run_experiment(&cfg).unwrap();

        // A canary inside the finalized trial dir survives a re-run;
        // leftover tmp dirs from a crashed run are cleared.
        let canary = dir.path().join("trial_000/canary");
        fs::write(&canary, "x").unwrap();
        fs::create_dir_all(dir.path().join("trial_999.tmp")).unwrap();
        let summary = run_experiment(&cfg).unwrap();
        assert_eq!(summary.resumed, 1);
        assert!(canary.exists());

        // A config change refuses to reuse the directory.
        cfg.master_seed += 1;
        let err = run_experiment(&cfg).unwrap_err().to_string();
        assert!(err.contains("different experiment"), "{err}");
    }

    #[test]
    fn zero_epoch_smoke_run_completes() {
        let dir = TempDir::new().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.pretrain.epochs = 0;
        cfg.downstream.epochs = 0;
        cfg.defenses = vec![];
        let summary = run_experiment(&cfg).unwrap();
        let r = &summary.reports[0];
        assert!(r.clean.outer_objective.is_finite());
        assert!(r.poisoned.outer_objective.is_finite());
        verify_run_dir(dir.path()).unwrap();
    }

    fn fake_report(trial: usize, asr: f64, pa: f64) -> TrialReport {
        let metrics = |asr, pa| MetricsReport {
            asr,
            ca: 0.9,
            pa,
            outer_objective: 0.1,
            per_class_accuracy: vec![pa; 2],
            fpr: None,
            fnr: None,
            metadata: serde_json::Value::Null,
        };
        TrialReport {
            trial,
            seed: trial as u64,
            poison_budget: 5,
            clean: metrics(0.1, 0.9),
            poisoned: metrics(asr, pa),
            defenses: BTreeMap::new(),
        }
    }

    #[test]
    fn aggregation_arithmetic() {
        let reports = vec![fake_report(0, 0.6, 0.8), fake_report(1, 0.8, 0.7)];
        let rows = summarize(&reports, &[]);
        let asr = rows.iter().find(|r| r.metric == "asr").unwrap();
        assert!((asr.mean - 0.7).abs() < 1e-12);
        assert!((asr.std - 0.1).abs() < 1e-12);
        assert_eq!((asr.min, asr.max), (0.6, 0.8));
        assert_eq!(asr.n, 2);

        let csv = trials_csv(&reports, &[]);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "trial,seed,ca,pa,asr,clean_asr,outer_clean,outer_poisoned"
        );
        assert!(lines.next().unwrap().starts_with("0,0,0.900000,0.800000,0.600000"));
        assert!(csv.ends_with("\r\n"));
    }

    #[test]
    fn report_skips_corrupt_trials() {
        let dir = TempDir::new().unwrap();
        let run = dir.path();
        fs::create_dir_all(run.join("trial_000")).unwrap();
        fs::create_dir_all(run.join("trial_001")).unwrap();
        let good = serde_json::to_string(&fake_report(0, 0.5, 0.9)).unwrap();
        fs::write(run.join("trial_000/report.json"), good).unwrap();
        fs::write(run.join("trial_001/report.json"), "{ not json").unwrap();

        let rr = report(run).unwrap();
        assert_eq!(rr.n_valid, 1);
        assert_eq!(rr.skipped.len(), 1);
        assert!(rr.skipped[0].0.ends_with("trial_001/report.json"));
        let asr = rr.summary.iter().find(|r| r.metric == "asr").unwrap();
        assert_eq!(asr.mean, 0.5);

        // Nothing readable at all is an error.
        fs::write(run.join("trial_000/report.json"), "junk").unwrap();
        assert!(report(run).is_err());
    }

    #[test]
    fn sweeps_emit_tables_and_plots() {
        let dir = TempDir::new().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.defenses = vec![];
        cfg.sweeps.poison_rate = vec![0.1, 0.2];
        run_experiment(&cfg).unwrap();
        let csv = fs::read_to_string(dir.path().join("sweep_poison_rate.csv")).unwrap();
        assert!(csv.starts_with("param,value,asr\r\n"));
        assert_eq!(csv.lines().count(), 3);
        assert!(dir.path().join("asr_vs_poison_rate.svg").exists());
        verify_run_dir(dir.path()).unwrap();
    }

    #[test]
    fn csv_quoting_follows_the_rules() {
        assert_eq!(csv_field("plain"), "plain");
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
    }

    #[test]
    fn line_chart_is_well_formed() {
        let svg = svg_line_chart(
            "t < v & w",
            "x",
            "y",
            &[("s1".to_string(), vec![(0.0, 1.0), (1.0, 0.5), (2.0, 0.25)])],
        );
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("<polyline"));
        assert!(svg.contains("t &lt; v &amp; w"));

        let empty = svg_line_chart("nothing", "x", "y", &[]);
        assert!(empty.contains("no data"));

        // Degenerate ranges still render.
        let flat = svg_line_chart(
            "flat",
            "x",
            "y",
            &[("s".to_string(), vec![(1.0, 2.0), (1.0, 2.0)])],
        );
        assert!(flat.contains("<polyline"));
    }

    #[test]
    fn offset_computation_points_into_the_text() {
        let text = "line1\nline2\nline3";
        assert_eq!(line_col_to_offset(text, 1, 1), 0);
        assert_eq!(line_col_to_offset(text, 2, 1), 6);
        assert_eq!(line_col_to_offset(text, 3, 3), 14);
    }

    #[test]
    fn workers_share_the_trial_queue() {
        let dir = TempDir::new().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.defenses = vec![];
        cfg.n_trials = 2;
        cfg.workers = 2;
        let summary = run_experiment(&cfg).unwrap();
        assert_eq!(summary.reports.len(), 2);
        assert_eq!(summary.reports[0].trial, 0);
        assert_eq!(summary.reports[1].trial, 1);
        assert_ne!(summary.reports[0].seed, summary.reports[1].seed);
        verify_run_dir(dir.path()).unwrap();
    }
}
