use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tofad::engine::{
    evaluate, load_checkpoint, load_dataset, load_prepared, save_checkpoint, smooth_scores, train, EvalReport,
    ReportGrid, RunConfig,
};
use tofad::fgmask::{export_masks, mask_sequence, MaskParams};
use tofad::frameio::{load_annotations, load_sequence, CategoryMap, Modality};
use tofad::synth::{generate_corpus, write_corpus, CorpusSpec};
use tofad::{io, Error, Result};

/// Anomaly detection on time-of-flight depth and IR video.
#[derive(Debug, Parser)]
#[command(name = "tofad", version)]
struct Cli {
    /// Log progress to stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute foreground masks for a depth sequence.
    Mask {
        /// Sequence directory (holding `depth/`) or a directory of depth frames.
        seq_dir: PathBuf,
        /// Mask parameter file; defaults apply when omitted.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Output directory for mask images [default: <seq_dir>/mask].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint with its config snapshot.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for `model.ckpt`, `config.toml` and `losses.csv`.
        #[arg(long)]
        out: PathBuf,
        /// Training dataset root; overrides `data.train_dir`.
        #[arg(long)]
        train: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write the per-frame anomaly scores of one sequence as CSV.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        seq_dir: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on an annotated test set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test dataset root [default: `data.test_dir` of the snapshot].
        #[arg(long)]
        test: Option<PathBuf>,
        /// Annotation file [default: `data.annotations` of the snapshot].
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Token to category map [default: `category_map.txt` next to the annotations].
        #[arg(long)]
        category_map: Option<PathBuf>,
        /// Report directory.
        #[arg(long)]
        out: PathBuf,
        /// Also write score-curve images.
        #[arg(long)]
        curves: bool,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate evaluation reports into a networks x losses grid.
    Report {
        /// Directory searched recursively for `report.toml` files.
        #[arg(long)]
        runs: PathBuf,
        /// Also write the grid to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_target(false).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error kind={} msg={msg:?}", e.kind());
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Mask { seq_dir, params, out } => mask(&seq_dir, params.as_deref(), out),
        Command::Train {
            config,
            out,
            train,
            seed,
        } => train_cmd(&config, &out, train, seed),
        Command::Score { checkpoint, seq_dir, out } => score(&checkpoint, &seq_dir, out.as_deref()),
        Command::Eval {
            checkpoint,
            test,
            annotations,
            category_map,
            out,
            curves,
        } => eval(&checkpoint, test, annotations, category_map, &out, curves),
        Command::Synth { spec, out } => synth(&spec, &out),
        Command::Report { runs, out } => report(&runs, out.as_deref()),
    }
}

fn mask(seq_dir: &Path, params: Option<&Path>, out: Option<PathBuf>) -> Result<()> {
    let params = match params {
        Some(p) => toml::from_str::<MaskParams>(&io::read_to_string(p)?)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => MaskParams::default(),
    };
    let depth_dir = seq_dir.join(Modality::Depth.dir_name());
    let frames_dir = if depth_dir.is_dir() { depth_dir } else { seq_dir.to_path_buf() };
    let seq = load_sequence(&frames_dir, Modality::Depth)?;
    let masks = mask_sequence(&seq, &params)?;
    let out = out.unwrap_or_else(|| seq_dir.join("mask"));
    export_masks(&masks, &out)?;
    log::info!("wrote {} masks to {}", masks.len(), out.display());
    Ok(())
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(p).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

fn train_cmd(config: &Path, out: &Path, train_dir: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(dir) = train_dir {
        cfg.data.train_dir = Some(dir);
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let root = cfg
        .data
        .train_dir
        .clone()
        .ok_or_else(|| Error::Config("no training data: set data.train_dir or pass --train".into()))?;
    // The snapshot must stay valid wherever it is read from.
    let data = &mut cfg.data;
    for p in [&mut data.train_dir, &mut data.test_dir, &mut data.annotations, &mut data.category_map, &mut data.mask_cache_dir]
        .into_iter()
        .flatten()
    {
        if p.exists() {
            *p = absolute(p)?;
        }
    }
    let sequences = load_dataset(&root, &cfg)?;
    log::info!("training {} {} on {} sequences", cfg.model.label(), cfg.loss.label(), sequences.len());
    let outcome = train(&cfg, &sequences)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let losses: String = std::iter::once("step,loss\n".to_string())
        .chain(outcome.losses.iter().enumerate().map(|(i, l)| format!("{i},{l}\n")))
        .collect();
    io::atomic_write(&out.join("losses.csv"), losses.as_bytes())?;
    io::atomic_write(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    save_checkpoint(&outcome.model, &cfg, &out.join("model.ckpt"))
}

fn score(checkpoint: &Path, seq_dir: &Path, out: Option<&Path>) -> Result<()> {
    let (model, cfg) = load_checkpoint(checkpoint)?;
    let seq = load_prepared(seq_dir, &cfg)?;
    let raw = tofad::engine::score_sequence(&model, &seq, &cfg)?;
    let smoothed = smooth_scores(&raw, cfg.smoothing_window_frames)?;
    let mut csv = String::from("frame,raw,smoothed\n");
    for ((i, r), s) in raw.indices.iter().zip(&raw.scores).zip(&smoothed.scores) {
        csv.push_str(&format!("{i},{r},{s}\n"));
    }
    match out {
        Some(path) => io::atomic_write(path, csv.as_bytes()),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn eval(
    checkpoint: &Path,
    test: Option<PathBuf>,
    annotations: Option<PathBuf>,
    category_map: Option<PathBuf>,
    out: &Path,
    curves: bool,
) -> Result<()> {
    let (model, cfg) = load_checkpoint(checkpoint)?;
    let missing = |what: &str, flag: &str| Error::Config(format!("no {what}: pass {flag} or set it in the run config"));
    let test = test
        .or_else(|| cfg.data.test_dir.clone())
        .ok_or_else(|| missing("test set", "--test"))?;
    let annotations = annotations
        .or_else(|| cfg.data.annotations.clone())
        .ok_or_else(|| missing("annotations", "--annotations"))?;
    let map_path = category_map
        .or_else(|| cfg.data.category_map.clone())
        .or_else(|| Some(annotations.with_file_name("category_map.txt")).filter(|p| p.is_file()));
    let categories = match map_path {
        Some(p) => CategoryMap::load(&p)?,
        None => CategoryMap::default(),
    };
    let table = load_annotations(&annotations, &categories)?;
    for w in &table.warnings {
        log::warn!("{w}");
    }
    let test_set = load_dataset(&test, &cfg)?;
    let report = evaluate(&model, &test_set, &table, &cfg)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    report.write(out, curves)?;
    println!(
        "{} {} auc raw {:.2} smoothed {:.2}",
        report.run.model.label(),
        report.run.loss.label(),
        report.overall.raw_percent,
        report.overall.smoothed_percent
    );
    Ok(())
}

fn synth(spec: &Path, out: &Path) -> Result<()> {
    let spec = CorpusSpec::from_toml(&io::read_to_string(spec)?)
        .map_err(|e| Error::Config(format!("{}: {e}", spec.display())))?;
    let corpus = generate_corpus(&spec)?;
    write_corpus(&corpus, &spec, out)?;
    log::info!(
        "wrote {} training and {} test sequences to {}",
        corpus.train.len(),
        corpus.test.len(),
        out.display()
    );
    Ok(())
}

fn find_reports(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for p in paths {
        if p.is_dir() {
            find_reports(&p, found)?;
        } else if p.file_name().is_some_and(|n| n == "report.toml") {
            found.push(p);
        }
    }
    Ok(())
}

fn report(runs: &Path, out: Option<&Path>) -> Result<()> {
    let mut paths = Vec::new();
    find_reports(runs, &mut paths)?;
    if paths.is_empty() {
        return Err(Error::Eval(format!("no report.toml under {}", runs.display())));
    }
    let reports = paths
        .iter()
        .map(|p| {
            EvalReport::from_toml(&io::read_to_string(p)?).map_err(|e| Error::Eval(format!("{}: {e}", p.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    let text = ReportGrid::from_reports(&reports).to_text();
    print!("{text}");
    match out {
        Some(path) => io::atomic_write(path, text.as_bytes()),
        None => Ok(()),
    }
}
