//! Command-line front end.
//!
//! Exit status: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure (including a failed self-check).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_pairs, RunConfig, SplitKind};
use crate::data::{
    export_split, make_closed_split, make_split, parse_split, scan_dataset, synthetic_dataset, IdentityDataset,
    RetrievalSplit,
};
use crate::error::{Error, Result};
use crate::evaluation::{aggregate, evaluate, EvalReport};
use crate::network::{Network, NetworkConfig};
use crate::selfcheck;
use crate::training::{train_loop, TOY_IDENTITIES, TOY_IMAGES_PER_IDENTITY, TOY_IMAGE_SIZE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Row labels of the cumulative ablation, in order.
pub const ABLATION_ROWS: [&str; 4] = [
    "Global (ResNet50)",
    "+ Spatial attention",
    "+ Channel attention",
    "+ Relative position",
];

#[derive(Debug, Parser)]
#[command(name = "mbanet", version, about = "Multi-branch attentive retrieval network")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Flat key=value config file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub dataset_root: Option<PathBuf>,
    /// Use the built-in synthetic identities and toy-scale defaults.
    #[arg(long)]
    pub toy: bool,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on repetition 0 and write checkpoints and metrics.
    Train(CommonArgs),
    /// Score a checkpoint over the configured repetitions.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Gallery/query file exported from another dataset.
        #[arg(long, value_name = "PATH")]
        foreign_split: Option<PathBuf>,
    },
    /// Train and score the four cumulative component configurations.
    Ablate(CommonArgs),
    /// Run the built-in oracle and invariant checks.
    Selfcheck {
        #[arg(long, hide = true)]
        corrupt_softmax: bool,
    },
    /// Write gallery/query/train assignments for each repetition.
    ExportSplit {
        #[command(flatten)]
        common: CommonArgs,
        /// Only this repetition.
        #[arg(long, value_name = "N")]
        repetition: Option<u64>,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidArgument { .. } => EXIT_USAGE,
        Error::Data(_)
        | Error::Io { .. }
        | Error::Image { .. }
        | Error::Checkpoint(_)
        | Error::Shape { .. }
        | Error::ElementCount { .. } => EXIT_DATA,
        Error::NonFinite { .. } | Error::Numeric(_) | Error::NotScalar(_) => EXIT_NUMERIC,
    }
}

/// Resolve defaults, config file, `--set` overrides and flags, in that order.
pub fn resolve_config(args: &CommonArgs) -> Result<RunConfig> {
    let file_pairs = match &args.config {
        Some(path) => parse_pairs(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?,
        None => Vec::new(),
    };
    let set_pairs = args
        .set
        .iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got {kv:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut toy = args.toy;
    for (k, v) in file_pairs.iter().chain(&set_pairs) {
        if k == "toy" {
            let mut probe = RunConfig::default();
            probe.set(k, v)?;
            toy = probe.toy || args.toy;
        }
    }
    let mut cfg = if toy { RunConfig::toy() } else { RunConfig::default() };
    for (k, v) in file_pairs.iter().chain(&set_pairs) {
        cfg.set(k, v)?;
    }
    cfg.toy = toy;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(root) = &args.dataset_root {
        cfg.dataset_root = Some(root.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset(cfg: &RunConfig) -> Result<IdentityDataset> {
    if cfg.toy {
        return Ok(synthetic_dataset(TOY_IDENTITIES, TOY_IMAGES_PER_IDENTITY, TOY_IMAGE_SIZE, cfg.seed));
    }
    let root = cfg
        .dataset_root
        .as_ref()
        .ok_or_else(|| Error::Config("no dataset: pass --dataset-root or --toy".into()))?;
    scan_dataset(root, &cfg.layout())
}

fn split_for(cfg: &RunConfig, ds: &IdentityDataset, distractors: Option<&IdentityDataset>, rep: u64) -> Result<RetrievalSplit> {
    let split = match cfg.split {
        SplitKind::Open => make_split(ds, cfg.seed, rep, distractors)?,
        SplitKind::Closed => make_closed_split(ds, cfg.seed, rep)?,
    };
    for w in &split.warnings {
        log::warn!("{w}");
    }
    Ok(split)
}

fn distractors(cfg: &RunConfig) -> Result<Option<IdentityDataset>> {
    cfg.distractor_root
        .as_ref()
        .map(|root| scan_dataset(root, &crate::data::Layout::FolderPerIdentity))
        .transpose()
}

fn out_dir(args: &CommonArgs, default: &str) -> Result<PathBuf> {
    let dir = args.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn network_for(cfg: &RunConfig, num_ids: usize, base: &NetworkConfig) -> Result<Network<f32>> {
    let mut net = Network::new(NetworkConfig {
        num_ids,
        seed: cfg.seed,
        ..base.clone()
    })?;
    if let Some(weights) = &cfg.backbone_weights {
        net.import_backbone(weights)?;
    }
    Ok(net)
}

fn cmd_train(args: &CommonArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve_config(args)?;
    let dir = out_dir(args, "mbanet-train")?;
    write_file(&dir.join("config.txt"), &cfg.to_text())?;
    let ds = load_dataset(&cfg)?;
    let extra = distractors(&cfg)?;
    let split = split_for(&cfg, &ds, extra.as_ref(), 0)?;
    write_file(&dir.join("split.tsv"), &export_split(&split))?;
    let mut net = network_for(&cfg, split.num_classes(), &cfg.network)?;
    let summary = train_loop(&mut net, &split, &cfg.train, &cfg.augmentation, Some(&dir))?;
    let metrics = evaluate(&mut net, &split, &cfg.augmentation, cfg.eval_batch)?;
    let report = aggregate(vec![metrics]);
    write_file(&dir.join("eval.csv"), &report.to_csv())?;
    let _ = writeln!(
        out,
        "trained {} epochs: final loss {:.6}, rank-1 {:.4}, mAP {:.4}",
        summary.epochs.len(),
        summary.final_loss,
        report.mean_rank1,
        report.mean_map
    );
    let _ = writeln!(out, "artifacts in {}", dir.display());
    Ok(())
}

fn cmd_eval(args: &CommonArgs, checkpoint: &Path, foreign: Option<&Path>, out: &mut dyn Write) -> Result<EvalReport> {
    let cfg = resolve_config(args)?;
    let mut net = Network::<f32>::load(checkpoint)?;
    if net.cfg.input_hw != (cfg.augmentation.crop as usize, cfg.augmentation.crop as usize) {
        return Err(Error::Config(format!(
            "checkpoint expects {}x{} inputs but crop is {}",
            net.cfg.input_hw.0, net.cfg.input_hw.1, cfg.augmentation.crop
        )));
    }
    let mut reps = Vec::new();
    if let Some(path) = foreign {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = cfg.dataset_root.clone().unwrap_or_default();
        let split = parse_split(&text, &base)?;
        reps.push(evaluate(&mut net, &split, &cfg.augmentation, cfg.eval_batch)?);
    } else {
        let ds = load_dataset(&cfg)?;
        let extra = distractors(&cfg)?;
        for rep in 0..cfg.repetitions {
            let split = split_for(&cfg, &ds, extra.as_ref(), rep)?;
            reps.push(evaluate(&mut net, &split, &cfg.augmentation, cfg.eval_batch)?);
        }
    }
    let report = aggregate(reps);
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join("config.txt"), &cfg.to_text())?;
        write_file(&dir.join("eval.csv"), &report.to_csv())?;
        write_file(&dir.join("eval.json"), &report.to_json())?;
    }
    let _ = write!(out, "{}", report.to_csv());
    Ok(report)
}

/// The four cumulative configurations, built on top of `base`.
pub fn ablation_configs(base: &NetworkConfig) -> Vec<(&'static str, NetworkConfig)> {
    let flags = [(false, false, false), (true, false, false), (true, true, false), (true, true, true)];
    ABLATION_ROWS
        .iter()
        .zip(flags)
        .map(|(&label, (spatial, channel, rpe))| {
            let mut cfg = base.clone();
            cfg.branches.spatial = spatial;
            cfg.branches.channel = channel;
            cfg.use_rpe = rpe;
            (label, cfg)
        })
        .collect()
}

pub struct AblationRow {
    pub label: &'static str,
    pub report: EvalReport,
}

pub fn run_ablation(cfg: &RunConfig, dir: Option<&Path>) -> Result<Vec<AblationRow>> {
    let ds = load_dataset(cfg)?;
    let extra = distractors(cfg)?;
    let mut rows = Vec::new();
    for (i, (label, net_cfg)) in ablation_configs(&cfg.network).into_iter().enumerate() {
        let mut reps = Vec::new();
        for rep in 0..cfg.repetitions {
            let split = split_for(cfg, &ds, extra.as_ref(), rep)?;
            let mut net = network_for(cfg, split.num_classes(), &net_cfg)?;
            let run_dir = dir.map(|d| d.join(format!("row{}_rep{rep}", i + 1)));
            train_loop(&mut net, &split, &cfg.train, &cfg.augmentation, run_dir.as_deref())?;
            reps.push(evaluate(&mut net, &split, &cfg.augmentation, cfg.eval_batch)?);
        }
        let report = aggregate(reps);
        log::info!("{label}: rank-1 {:.4} mAP {:.4}", report.mean_rank1, report.mean_map);
        rows.push(AblationRow { label, report });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("configuration,rank1,mAP\n");
    for r in rows {
        out.push_str(&format!("{},{:.6},{:.6}\n", r.label, r.report.mean_rank1, r.report.mean_map));
    }
    out
}

fn cmd_ablate(args: &CommonArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve_config(args)?;
    let dir = out_dir(args, "mbanet-ablate")?;
    write_file(&dir.join("config.txt"), &cfg.to_text())?;
    let rows = run_ablation(&cfg, Some(&dir))?;
    let csv = ablation_csv(&rows);
    write_file(&dir.join("ablation.csv"), &csv)?;
    let _ = write!(out, "{csv}");
    Ok(())
}

fn cmd_export_split(args: &CommonArgs, only: Option<u64>, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve_config(args)?;
    let ds = load_dataset(&cfg)?;
    let extra = distractors(&cfg)?;
    let reps: Vec<u64> = match only {
        Some(r) => vec![r],
        None => (0..cfg.repetitions).collect(),
    };
    for rep in reps {
        let text = export_split(&split_for(&cfg, &ds, extra.as_ref(), rep)?);
        match &args.out {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                write_file(&dir.join(format!("split_rep{rep}.tsv")), &text)?;
            }
            None => {
                let _ = write!(out, "{text}");
            }
        }
    }
    Ok(())
}

/// Run a parsed command, writing user-facing output to `out` and errors to
/// `err`; returns the process exit status.
pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let result = match &cli.command {
        Command::Train(args) => cmd_train(args, out),
        Command::Eval {
            common,
            checkpoint,
            foreign_split,
        } => cmd_eval(common, checkpoint, foreign_split.as_deref(), out).map(|_| ()),
        Command::Ablate(args) => cmd_ablate(args, out),
        Command::ExportSplit { common, repetition } => cmd_export_split(common, *repetition, out),
        Command::Selfcheck { corrupt_softmax } => {
            let report = selfcheck::run(selfcheck::Options {
                corrupt_softmax: *corrupt_softmax,
            });
            let _ = writeln!(out, "{report}");
            if report.passed() {
                return EXIT_OK;
            }
            for f in report.failures() {
                let _ = writeln!(err, "self-check failed: {} ({})", f.invariant, f.category);
            }
            return EXIT_NUMERIC;
        }
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}
