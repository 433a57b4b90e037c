//! Command-line entry point wiring the pipeline modules into batch jobs.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{FlatConfig, RunConfig};
use crate::dataio::{ingest_odir, kfold_split, load_manifest, synth_generate, SynthParams};
use crate::error::{Error, Result};
use crate::metrics::{
    age_metric_row, gender_metric_row, read_age_predictions, read_gender_predictions, F1Variant,
    MetricTable,
};
use crate::reports::{cv_table, progression_grid};
use crate::trainer::{evaluate_fold, train_fagnet, train_fgcnet};

pub const RUNS_DIR_ENV: &str = "FUNDUS_LAB_RUNS_DIR";

#[derive(Parser, Debug)]
#[command(name = "fundus-lab", version, about = "Fundus-image trait estimation and age-conditioned generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a deterministic synthetic fundus dataset.
    Synth(SynthArgs),
    /// Build a manifest from an ODIR-style metadata table.
    Ingest(IngestArgs),
    /// Assign subject-grouped cross-validation folds.
    Split(SplitArgs),
    /// Train FAG-Net or FGC-Net on one fold.
    Train(TrainArgs),
    /// Score a checkpoint on its fold's test split.
    Evaluate(EvaluateArgs),
    /// Generate an age-progression difference grid from one image.
    Generate(GenerateArgs),
    /// Turn prediction dumps or per-fold evaluations into report tables.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory for PNGs, manifest.csv and truth.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 10)]
    age_min: u32,
    #[arg(long, default_value_t = 80)]
    age_max: u32,
    #[arg(long, default_value_t = 0.005)]
    disc_brightness_slope: f64,
    #[arg(long, default_value_t = 0.01)]
    tortuosity_slope: f64,
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// ODIR-style metadata CSV.
    #[arg(long)]
    metadata: PathBuf,
    /// Directory holding the referenced image files.
    #[arg(long)]
    images: PathBuf,
    /// Manifest CSV to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Assignment CSV to write (image_path, subject_id, fold).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Flat key = value run configuration.
    #[arg(long)]
    config: PathBuf,
    /// key=value entries overriding the config file (repeatable).
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Which model to train.
    #[arg(long, value_parser = ["fagnet", "fgcnet"])]
    model: String,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    /// Run name under the runs root.
    #[arg(long, default_value = "run")]
    name: String,
    /// Manifest CSV (falls back to data.manifest from the config).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Runs root directory (default `runs/`, or $FUNDUS_LAB_RUNS_DIR).
    #[arg(long)]
    runs_dir: Option<PathBuf>,
    /// Shortcut for `--override train.seed=<SEED>`.
    #[arg(long)]
    seed: Option<u64>,
    /// Print the effective configuration and exit.
    #[arg(long, default_value_t = false)]
    print_config: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    /// Evaluation CSV to write (also printed as an aligned table).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Comma-separated ages in years, e.g. 10,20,30,40.
    #[arg(long)]
    ages: String,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Grid PNG to write; per-age PNGs and metadata land next to it.
    #[arg(long)]
    out: PathBuf,
    /// Min-max stretch each difference panel for printability.
    #[arg(long, default_value_t = false)]
    contrast_stretch: bool,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Prediction dump CSV (age or gender layout, auto-detected).
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Per-fold evaluation CSVs to combine into an FCV table.
    #[arg(long, num_args = 1..)]
    cv: Vec<PathBuf>,
    /// Output CSV path (aligned text always goes to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses argv and runs; returns the process exit code.
pub fn main_entry() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap reports usage errors with exit code 2
            let _ = e.print();
            return if e.exit_code() == 0 { 0 } else { 2 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(args) => cmd_synth(args),
        Command::Ingest(args) => cmd_ingest(args),
        Command::Split(args) => cmd_split(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Generate(args) => cmd_generate(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let params = SynthParams {
        count: args.count,
        seed: args.seed,
        image_size: args.size,
        age_range: (args.age_min, args.age_max),
        disc_brightness_slope: args.disc_brightness_slope,
        tortuosity_slope: args.tortuosity_slope,
        ..Default::default()
    };
    let manifest = synth_generate(&params, &args.out)?;
    println!(
        "wrote {} synthetic images + manifest.csv + truth.csv to {}",
        manifest.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_ingest(args: IngestArgs) -> Result<()> {
    let manifest = ingest_odir(&args.metadata, &args.images)?;
    manifest.save(&args.out)?;
    println!("wrote manifest with {} records to {}", manifest.len(), args.out.display());
    println!("{}", manifest.provenance());
    Ok(())
}

fn cmd_split(args: SplitArgs) -> Result<()> {
    let manifest = load_manifest(&args.manifest)?;
    let split = kfold_split(&manifest, args.k, args.seed)?;
    let mut out = String::from("image_path,subject_id,fold\n");
    for (i, record) in manifest.records().iter().enumerate() {
        out.push_str(&format!("{},{},{}\n", record.image_path, record.subject_id, split.fold_of(i)));
    }
    std::fs::write(&args.out, out).map_err(|e| Error::io(&args.out, e))?;
    println!("wrote {}-fold assignment for {} samples to {}", args.k, manifest.len(), args.out.display());
    Ok(())
}

fn runs_root(cli_value: Option<PathBuf>) -> PathBuf {
    cli_value
        .or_else(|| std::env::var_os(RUNS_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut flat = FlatConfig::from_file(&args.config)?;
    flat.apply_overrides(&args.overrides)?;
    if let Some(seed) = args.seed {
        flat.set("train.seed", seed);
    }
    let run_config = RunConfig::from_flat(&flat)?;
    if args.print_config {
        print!("{}", run_config.to_flat().to_text());
        return Ok(());
    }
    let manifest_path = args
        .manifest
        .clone()
        .or_else(|| run_config.data.manifest.as_ref().map(PathBuf::from))
        .ok_or_else(|| {
            Error::InvalidConfig("no manifest given (use --manifest or data.manifest)".into())
        })?;
    let manifest = load_manifest(&manifest_path)?;
    let run_dir = runs_root(args.runs_dir)
        .join(&args.name)
        .join(format!("fold-{}", args.fold));
    let result = match args.model.as_str() {
        "fagnet" => train_fagnet(&run_config, &manifest, args.fold, &run_dir)?,
        _ => train_fgcnet(&run_config, &manifest, args.fold, &run_dir)?,
    };
    println!(
        "trained {} epochs in {:.1}s; best val loss {:.6}",
        result.history.len(),
        result.wall_seconds,
        result.best_val_loss
    );
    println!("run directory: {}", run_dir.display());
    println!("best checkpoint: {}", result.best_checkpoint.display());
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let manifest = load_manifest(&args.manifest)?;
    let table = evaluate_fold(&args.checkpoint, &manifest, args.fold)?;
    print!("{}", table.to_aligned_text());
    if let Some(out) = args.out {
        table.write_csv(&out)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let ages = parse_ages(&args.ages)?;
    let grid = progression_grid(
        &args.checkpoint,
        &args.image,
        &ages,
        args.seed,
        &args.out,
        args.contrast_stretch,
    )?;
    println!(
        "wrote progression grid with {} panels to {}",
        grid.panels.len() + 1,
        args.out.display()
    );
    Ok(())
}

fn parse_ages(spec: &str) -> Result<Vec<f64>> {
    let mut ages = Vec::new();
    for part in spec.split(',') {
        let age: f64 = part
            .trim()
            .parse()
            .map_err(|_| Error::InvalidInput(format!("bad age `{part}` in --ages")))?;
        ages.push(age);
    }
    if ages.is_empty() {
        return Err(Error::InvalidInput("--ages list is empty".into()));
    }
    Ok(ages)
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let table = if let Some(path) = &args.predictions {
        prediction_report(path)?
    } else if !args.cv.is_empty() {
        cv_report(&args.cv)?
    } else {
        return Err(Error::InvalidInput(
            "report needs --predictions or --cv inputs".into(),
        ));
    };
    print!("{}", table.to_aligned_text());
    if let Some(out) = args.out {
        table.write_csv(&out)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

/// Auto-detects the dump layout from its header.
fn prediction_report(path: &Path) -> Result<MetricTable> {
    let head = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path, e))?
        .lines()
        .next()
        .unwrap_or_default()
        .to_string();
    if head.contains("actual_age") {
        let batch = read_age_predictions(path)?;
        let (columns, values) = age_metric_row(&batch);
        let mut table = MetricTable::new(&columns);
        table.push_row("all", values)?;
        Ok(table)
    } else if head.contains("actual_gender") {
        let counts = read_gender_predictions(path)?;
        let (columns, values) = gender_metric_row(&counts, F1Variant::Paper)?;
        let mut table = MetricTable::new(&columns);
        table.push_row("all", values)?;
        Ok(table)
    } else {
        Err(Error::format(
            path.display().to_string(),
            "unrecognized prediction dump header",
        ))
    }
}

/// Combines per-fold evaluation CSVs (one data row each) into an FCV table
/// with an Average row.
fn cv_report(paths: &[PathBuf]) -> Result<MetricTable> {
    let mut columns: Option<Vec<String>> = None;
    let mut rows = Vec::new();
    for (i, path) in paths.iter().enumerate() {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .unwrap_or_default()
            .split(',')
            .skip(1)
            .map(|s| s.to_string())
            .collect();
        match &columns {
            None => columns = Some(header),
            Some(existing) => {
                if *existing != header {
                    return Err(Error::InvalidInput(format!(
                        "column set of {} differs from the first file",
                        path.display()
                    )));
                }
            }
        }
        let data_line = lines.next().ok_or_else(|| {
            Error::format(path.display().to_string(), "no data row in evaluation csv")
        })?;
        let values: Vec<f64> = data_line
            .split(',')
            .skip(1)
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(path.display().to_string(), "non-numeric cell"))?;
        rows.push((format!("FCV-{}", i + 1), values));
    }
    let columns = columns.expect("at least one path");
    let column_refs: Vec<&str> = columns.iter().map(|s| s.as_str()).collect();
    cv_table(&column_refs, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn age_list_parsing() {
        assert_eq!(parse_ages("10, 20,30").unwrap(), vec![10.0, 20.0, 30.0]);
        assert!(parse_ages("10,x").is_err());
    }

    #[test]
    fn cli_parses_known_subcommands() {
        let cli = Cli::try_parse_from(["fundus-lab", "synth", "--out", "/tmp/x", "--count", "3"]);
        assert!(cli.is_ok());
        let bad = Cli::try_parse_from(["fundus-lab", "frobnicate"]);
        assert!(bad.is_err());
    }
}
