use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cfdebias::corpus::{self, CorpusManifest, DistributionCheck, IngestOptions, SynthConfig, SPLIT_TEST, REFERENCE_TRAIN, REFERENCE_TEST};
use cfdebias::harness::{self, Checkpoint, ExperimentConfig, GridConfig, ReportFormat};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cfdebias", version, about = "Counterfactual gender debiasing for speech-based depression detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic tabular corpus with controlled gender leakage.
    Synth {
        /// JSON synthesis config; omitted fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build manifests from a DAIC-WOZ directory tree.
    Ingest {
        #[arg(long)]
        root: PathBuf,
        /// PHQ-8 score at or above which a session is labelled depressed.
        #[arg(long, default_value_t = 10)]
        threshold: u32,
        /// Value of the score table's gender column that denotes male.
        #[arg(long, default_value_t = 1)]
        male_code: u8,
        /// Participant ids to drop (repeatable or comma separated).
        #[arg(long, value_delimiter = ',')]
        exclude: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one configuration and save its checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a test manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Directory for predictions and report; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "text")]
        format: ReportFormat,
    },
    /// Run a grid of configurations against one test manifest.
    Compare {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value = "text")]
        format: ReportFormat,
    },
    /// Render the comparison table for every run under a directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "text")]
        format: ReportFormat,
    },
}

/// Relative paths in a config file are taken relative to that file.
fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn resolve_experiment(mut cfg: ExperimentConfig, base: &Path) -> ExperimentConfig {
    cfg.corpus.train = resolve(base, &cfg.corpus.train);
    cfg.corpus.test = resolve(base, &cfg.corpus.test);
    cfg.output_dir = cfg.output_dir.map(|d| resolve(base, &d));
    cfg
}

fn load_experiment(path: &Path) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(resolve_experiment(cfg, &config_dir(path)))
}

fn describe(m: &CorpusManifest) -> String {
    let d = &m.distribution;
    format!(
        "{}: {} sessions (F/0 {}, F/1 {}, M/0 {}, M/1 {})",
        m.split_name,
        m.len(),
        d.female_non_depressed,
        d.female_depressed,
        d.male_non_depressed,
        d.male_depressed
    )
}

fn synth(config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg: SynthConfig = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SynthConfig::default(),
    };
    let (train, test) = corpus::generate_synthetic(&cfg)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for m in [&train, &test] {
        let path = out.join(format!("{}.json", m.split_name));
        m.save(&path)?;
        println!("{} -> {}", describe(m), path.display());
    }
    Ok(())
}

fn ingest(root: &Path, opts: IngestOptions, out: &Path) -> Result<()> {
    let (spec, scores) = corpus::load_daicwoz_splits(root)?;
    let corpus = corpus::ingest_daicwoz(root, &spec, &scores, &opts)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (m, expected) in [(&corpus.train_combined, REFERENCE_TRAIN), (&corpus.test, REFERENCE_TEST)] {
        let path = out.join(format!("{}.json", m.split_name));
        m.save(&path)?;
        println!("{} -> {}", describe(m), path.display());
        if let DistributionCheck::Fail(diffs) = corpus::validate_distribution(m, &expected) {
            for d in diffs {
                eprintln!("warning: {} differs from the reference distribution: {d:?}", m.split_name);
            }
        }
    }
    Ok(())
}

fn train(config: &Path) -> Result<()> {
    let cfg = load_experiment(config)?;
    let out = match &cfg.output_dir {
        Some(d) => d.clone(),
        None => PathBuf::from("runs").join(&cfg.hash()[..12]),
    };
    let ckpt = harness::train(&cfg)?;
    let path = harness::save_checkpoint(&ckpt, &out)?;
    println!(
        "trained {} / {} on {} sessions; best epoch {} of {} (loss {:.6})",
        cfg.backbone.label(),
        cfg.method.label(),
        ckpt.meta.train_size,
        ckpt.meta.epoch,
        ckpt.meta.epochs_run,
        ckpt.meta.train_loss
    );
    println!("checkpoint -> {}", path.display());
    Ok(())
}

fn eval(checkpoint: &Path, test: &Path, out: Option<&Path>, format: ReportFormat) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let manifest = CorpusManifest::load(test)?;
    if manifest.split_name != SPLIT_TEST {
        eprintln!("warning: evaluating on split '{}'", manifest.split_name);
    }
    let (mut result, debug) = harness::evaluate_with_debug(&ckpt, &manifest, &harness::AccessLog::new())?;
    result.checkpoint = Some(checkpoint.to_path_buf());
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => config_dir(checkpoint),
    };
    harness::write_run(&dir, &result, ckpt.meta.config.debug_log.then_some(debug.as_slice()))?;
    print!("{}", harness::emit_report(&[result], format)?);
    Ok(())
}

fn compare(grid_path: &Path, format: ReportFormat) -> Result<()> {
    let grid = GridConfig::load(grid_path).with_context(|| format!("loading {}", grid_path.display()))?;
    let base = config_dir(grid_path);
    let configs: Vec<ExperimentConfig> = grid.expand().into_iter().map(|c| resolve_experiment(c, &base)).collect();
    if configs.is_empty() {
        bail!("grid {} defines no runs", grid_path.display());
    }
    let results = harness::compare(&configs)?;
    print!("{}", harness::emit_report(&results, format)?);
    Ok(())
}

fn report(input: &Path, format: ReportFormat) -> Result<()> {
    let runs = harness::collect_runs(input)?;
    if runs.is_empty() {
        bail!("no runs found under {}", input.display());
    }
    print!("{}", harness::emit_report(&runs, format)?);
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth { config, out } => synth(config.as_deref(), &out),
        Command::Ingest { root, threshold, male_code, exclude, out } => ingest(
            &root,
            IngestOptions { phq_threshold: threshold, male_code, exclude },
            &out,
        ),
        Command::Train { config } => train(&config),
        Command::Eval { checkpoint, test, out, format } => eval(&checkpoint, &test, out.as_deref(), format),
        Command::Compare { grid, format } => compare(&grid, format),
        Command::Report { input, format } => report(&input, format),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        assert_eq!(resolve(Path::new("/a/b"), Path::new("c.json")), PathBuf::from("/a/b/c.json"));
        assert_eq!(resolve(Path::new("/a/b"), Path::new("/c.json")), PathBuf::from("/c.json"));
    }

}
