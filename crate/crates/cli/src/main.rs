//! Command-line front end for the poisoning laboratory.
//!
//! Thin shell over `enclab-core`: each subcommand parses arguments,
//! calls one library entry point, and reports where the artifacts
//! landed. Exit codes: 0 success, 1 invalid input or config, 2
//! runtime failure (I/O, corrupt files, numerical trouble).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use enclab_core::attack::save_poison;
use enclab_core::data::{
    dedup, generate_synthetic, read_container, write_container, Dataset, Provenance,
    UnlabeledDataset,
};
use enclab_core::defense::{kmeans_detect, run_defense_pipeline, DefenseContext, DefenseKind};
use enclab_core::downstream::{
    evaluate_accuracy, train_linear_on, LinearClassifier, MetricsReport,
};
use enclab_core::experiment::{
    self, load_config, prepare_trial, run_experiment, ExperimentConfig, SummaryRow,
};
use enclab_core::model::{load_checkpoint, save_checkpoint};
use enclab_core::rng::{derive_seed, tag};
use enclab_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "enclab",
    version,
    about = "Poisoning laboratory for contrastive encoders: attacks, training, defenses"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset container.
    GenData {
        /// Destination container file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long = "per-class", default_value_t = 500)]
        per_class: usize,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Drop the labels (for pre-training pools).
        #[arg(long)]
        unlabeled: bool,
    },
    /// Build one trial's poison set from an experiment config.
    Attack {
        #[arg(long)]
        config: PathBuf,
        /// Directory for poison.penc + poison.json.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pre-train an encoder on a dataset container.
    Pretrain {
        /// Experiment config supplying the pre-training settings
        /// (defaults are used when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training images (labels, if present, are ignored).
        #[arg(long)]
        data: PathBuf,
        /// Destination checkpoint file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a linear classifier on a frozen encoder.
    Downstream {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Encoder checkpoint.
        #[arg(long)]
        encoder: PathBuf,
        /// Labeled training container.
        #[arg(long)]
        data: PathBuf,
        /// Destination classifier JSON.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Measure classifier accuracy on a labeled test container.
    Evaluate {
        #[arg(long)]
        encoder: PathBuf,
        /// Classifier JSON from `downstream`.
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the configured defenses against one trial's poisoned pool.
    Defend {
        #[arg(long)]
        config: PathBuf,
        /// Directory for the defense reports.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Run a single defense instead of the config's list.
        #[arg(long)]
        defense: Option<String>,
    },
    /// Run the full multi-trial experiment from a config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Summarize an existing run directory.
    Report {
        /// The experiment's output directory.
        run_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version print to stdout and are not failures.
            let code = if e.use_stderr() { 1u8 } else { 0u8 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            out,
            classes,
            per_class,
            size,
            seed,
            unlabeled,
        } => cmd_gen_data(&out, classes, per_class, size, seed, unlabeled),
        Command::Attack { config, out, seed } => cmd_attack(&config, &out, seed),
        Command::Pretrain {
            config,
            data,
            out,
            seed,
        } => cmd_pretrain(config.as_deref(), &data, &out, seed),
        Command::Downstream {
            config,
            encoder,
            data,
            out,
            seed,
        } => cmd_downstream(config.as_deref(), &encoder, &data, &out, seed),
        Command::Evaluate {
            encoder,
            classifier,
            data,
        } => cmd_evaluate(&encoder, &classifier, &data),
        Command::Defend {
            config,
            out,
            seed,
            defense,
        } => cmd_defend(&config, &out, seed, defense.as_deref()),
        Command::Run {
            config,
            out,
            seed,
            trials,
            workers,
        } => cmd_run(&config, out, seed, trials, workers),
        Command::Report { run_dir } => cmd_report(&run_dir),
    }
}

/// Config problems are user input problems: exit code 1, whatever the
/// underlying error variant.
fn load_cli_config(path: &Path) -> Result<ExperimentConfig> {
    load_config(path).map_err(|e| Error::invalid(e.to_string()))
}

fn load_config_or_default(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => load_cli_config(p),
        None => Ok(ExperimentConfig::default()),
    }
}

/// Accepts either container flavor as a pre-training pool.
fn read_unlabeled(path: &Path) -> Result<UnlabeledDataset> {
    match read_container(path)? {
        Dataset::Unlabeled(ds) => Ok(ds),
        Dataset::Labeled(ds) => {
            let n = ds.images.len();
            UnlabeledDataset::new(ds.images, vec![Provenance::Clean; n])
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn pretty<T: serde::Serialize>(value: &T) -> String {
    let json = serde_json::to_string_pretty(value).expect("report serializes");
    format!("{json}\n")
}

fn cmd_gen_data(
    out: &Path,
    classes: usize,
    per_class: usize,
    size: usize,
    seed: u64,
    unlabeled: bool,
) -> Result<()> {
    let ds = generate_synthetic(per_class, classes, size, seed)?;
    let n = ds.images.len();
    let dataset = if unlabeled {
        Dataset::Unlabeled(UnlabeledDataset::new(ds.images, vec![Provenance::Clean; n])?)
    } else {
        Dataset::Labeled(ds)
    };
    write_container(&dataset, out)?;
    let kind = if unlabeled { "unlabeled" } else { "labeled" };
    println!("wrote {n} {kind} images ({classes} classes, {size}x{size}) to {}", out.display());
    Ok(())
}

fn cmd_attack(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_cli_config(config)?;
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    let setup = prepare_trial(&cfg, 0)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    save_poison(
        &setup.poison,
        &out.join("poison.penc"),
        &out.join("poison.json"),
    )?;
    println!(
        "built {} poison images (budget {}) into {}",
        setup.poison.len(),
        setup.spec.budget,
        out.display()
    );
    Ok(())
}

fn cmd_pretrain(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config_or_default(config)?;
    let pool = read_unlabeled(data)?;
    let mut pcfg = cfg.pretrain.clone();
    if let Some(s) = seed {
        pcfg.seed = s;
    }
    let mut log = |epoch: usize, loss: f64| {
        println!("epoch {epoch}: loss {loss:.6}");
        true
    };
    let state = enclab_core::pretrain::pretrain(&pool, &pcfg, Some(&mut log))?;
    save_checkpoint(&state, out)?;
    println!("saved encoder to {}", out.display());
    Ok(())
}

fn cmd_downstream(
    config: Option<&Path>,
    encoder: &Path,
    data: &Path,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config_or_default(config)?;
    let state = load_checkpoint(encoder)?;
    let train = read_container(data)?.into_labeled()?;
    let clf = train_linear_on(
        &state,
        &train,
        &cfg.downstream,
        seed.unwrap_or(cfg.master_seed),
    )?;
    write_text(out, &pretty(&clf))?;
    println!(
        "trained {}-class linear classifier on {} images, saved to {}",
        clf.n_classes(),
        train.len(),
        out.display()
    );
    Ok(())
}

fn cmd_evaluate(encoder: &Path, classifier: &Path, data: &Path) -> Result<()> {
    let state = load_checkpoint(encoder)?;
    let text = fs::read_to_string(classifier).map_err(|e| Error::io(classifier, e))?;
    let clf: LinearClassifier = serde_json::from_str(&text)
        .map_err(|e| Error::format(classifier, 0, format!("bad classifier file: {e}")))?;
    let test = read_container(data)?.into_labeled()?;
    let (accuracy, per_class) = evaluate_accuracy(&clf, &state, &test)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&serde_json::json!({
            "accuracy": accuracy,
            "per_class_accuracy": per_class,
        }))
        .expect("metrics serialize")
    );
    Ok(())
}

fn cmd_defend(
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    defense: Option<&str>,
) -> Result<()> {
    let mut cfg = load_cli_config(config)?;
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    if let Some(name) = defense {
        cfg.defenses = vec![name.parse::<DefenseKind>()?];
    }
    if cfg.defenses.is_empty() {
        return Err(Error::invalid(
            "config selects no defenses; set \"defenses\" or pass --defense",
        ));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let setup = prepare_trial(&cfg, 0)?;

    // Clean baseline, seeded as in a full run, so reports carry a CA
    // comparable to `run`'s.
    let mut ccfg = cfg.pretrain.clone();
    ccfg.seed = derive_seed(setup.trial_seed, &[tag::CLEAN]);
    let state_clean = enclab_core::pretrain::pretrain(&setup.data.clean_pool, &ccfg, None)?;
    let clf_clean = train_linear_on(
        &state_clean,
        &setup.data.downstream_train,
        &cfg.downstream,
        derive_seed(setup.trial_seed, &[tag::CLEAN, tag::LINEAR]),
    )?;
    let (ca, _) = evaluate_accuracy(&clf_clean, &state_clean, &setup.data.test)?;

    let ctx = DefenseContext {
        poisoned: &setup.merged,
        clean: &setup.data.clean_pool,
        downstream_train: &setup.data.downstream_train,
        test: &setup.data.test,
        spec: &setup.spec,
        pretrain: &cfg.pretrain,
        downstream: &cfg.downstream,
        params: &cfg.defense_params,
        clean_accuracy: ca,
    };
    let mut reports: BTreeMap<String, MetricsReport> = BTreeMap::new();
    for kind in &cfg.defenses {
        let report = run_defense_pipeline(*kind, &ctx, setup.trial_seed)?;
        println!(
            "{}: ASR {:.3}  PA {:.3}  (clean accuracy {:.3})",
            kind.name(),
            report.asr,
            report.pa,
            ca
        );
        reports.insert(kind.name().to_string(), report);
    }
    write_text(&out.join("defense_reports.json"), &pretty(&reports))?;

    // The detection defense additionally exports its verdict: the
    // DetectionResult JSON plus a plain index list (indices into the
    // deduplicated pool) for external filtering.
    if cfg
        .defenses
        .iter()
        .any(|k| matches!(k, DefenseKind::DedupKmeans))
    {
        let (survivors, removed) = dedup(&setup.merged);
        let detection = kmeans_detect(
            &survivors,
            cfg.defense_params.kmeans_clusters,
            cfg.defense_params.kmeans_flagged,
            setup.trial_seed,
        )?;
        let mut lines = String::new();
        for i in &detection.flagged_indices {
            lines.push_str(&format!("{i}\n"));
        }
        write_text(&out.join("flagged_indices.txt"), &lines)?;
        write_text(&out.join("detection.json"), &pretty(&detection))?;
        println!(
            "dedup removed {} duplicates; flagged {} of {} survivors (see flagged_indices.txt)",
            removed.len(),
            detection.flagged_indices.len(),
            survivors.len()
        );
    }
    println!("reports saved to {}", out.display());
    Ok(())
}

fn cmd_run(
    config: &Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
    trials: Option<usize>,
    workers: Option<usize>,
) -> Result<()> {
    let mut cfg = load_cli_config(config)?;
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    if let Some(t) = trials {
        cfg.n_trials = t;
    }
    if let Some(w) = workers {
        cfg.workers = w;
    }
    let summary = run_experiment(&cfg)?;
    println!(
        "{} trial(s) complete ({} resumed) in {}",
        summary.reports.len(),
        summary.resumed,
        summary.run_dir.display()
    );
    print_summary(&summary.summary);
    Ok(())
}

fn cmd_report(run_dir: &Path) -> Result<()> {
    let report = experiment::report(run_dir)?;
    println!("{} valid trial report(s)", report.n_valid);
    for (path, why) in &report.skipped {
        eprintln!("skipped {}: {why}", path.display());
    }
    print_summary(&report.summary);
    Ok(())
}

fn print_summary(rows: &[SummaryRow]) {
    for row in rows {
        println!(
            "{:<26} {:>9.6} ± {:.6}  [{:.6}, {:.6}]  n={}",
            row.metric, row.mean, row.std, row.min, row.max, row.n
        );
    }
}
