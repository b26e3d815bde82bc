//! Command-line interface: corpus generation, training, evaluation, and
//! the lambda sweep. A JSON config file can supply any option; explicit
//! command-line flags take precedence over the file.

use crate::data::{apply_relabel, load_dataset, resize_to_unit, split_dataset, AnnotatedImage, Preprocessor};
use crate::eval::{evaluate, run_inference, ScoredDetection};
use crate::model::checkpoint::Checkpoint;
use crate::model::ModelConfig;
use crate::render::render_annotated;
use crate::report::{format_tables, write_detections, write_report};
use crate::synthgen::CorpusConfig;
use crate::train::{sweep_lambda, TrainConfig, TrainSession};
use crate::{Error, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "algaedet",
    version,
    about = "Multi-target algal detection: synthetic corpus generation, training, evaluation, and lambda sweeps"
)]
pub struct Cli {
    /// JSON file supplying defaults for any option of the chosen
    /// subcommand (snake_case keys); explicit flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic annotated microscopy corpus.
    Gen(GenArgs),
    /// Train a detector and write checkpoint plus training log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split and write reports.
    Eval(EvalArgs),
    /// Train once per lambda and tabulate final held-out scores.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// CPU-sized three-level pyramid at 800 px.
    Desk,
    /// Minimal two-level model at 128 px for smoke runs.
    Tiny,
}

impl ModelKind {
    fn config(self) -> ModelConfig {
        match self {
            // the genus count is replaced once the dataset is known
            ModelKind::Desk => ModelConfig::desk(1),
            ModelKind::Tiny => ModelConfig::tiny(1),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileKind {
    /// Long-tailed genus frequencies.
    Desk,
    /// Equal frequency for every genus.
    Uniform,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Test,
    All,
}

#[derive(Parser)]
pub struct GenArgs {
    /// Number of images to generate (must be at least 1).
    #[arg(long)]
    pub n_images: Option<usize>,
    /// Corpus RNG seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output dataset directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Genus frequency profile [default: desk].
    #[arg(long, value_enum)]
    pub profile: Option<ProfileKind>,
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct GenOverlay {
    n_images: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    profile: Option<ProfileKind>,
}

#[derive(Parser)]
pub struct TrainArgs {
    /// Dataset directory (images/ + annotations.jsonl + taxonomy.csv).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Class-branch loss weight [default: 0.2].
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Total optimization steps [default: 500].
    #[arg(long)]
    pub steps: Option<u64>,
    /// Split/init/sampling seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for checkpoint and training log.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Model preset [default: desk].
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    /// Checkpoint cadence in steps; 0 = final only [default: 0].
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Held-out evaluation cadence in steps; 0 = final only [default: 0].
    #[arg(long)]
    pub eval_every: Option<u64>,
    /// Fold genera with fewer instances than this into the catch-all
    /// [default: 10].
    #[arg(long)]
    pub merge_threshold: Option<u64>,
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct TrainOverlay {
    data: Option<PathBuf>,
    lambda: Option<f64>,
    steps: Option<u64>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    model: Option<ModelKind>,
    checkpoint_every: Option<u64>,
    eval_every: Option<u64>,
    merge_threshold: Option<u64>,
}

#[derive(Parser)]
pub struct EvalArgs {
    /// Dataset directory the checkpoint was trained from.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint file written by `train`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory for report.csv, report.txt, detections.jsonl.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write one annotated PNG per evaluated image under render/.
    #[arg(long)]
    pub render: bool,
    /// Which split to evaluate [default: test].
    #[arg(long, value_enum)]
    pub split: Option<SplitKind>,
    /// Override the split seed recorded in the checkpoint.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct EvalOverlay {
    data: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
    render: Option<bool>,
    split: Option<SplitKind>,
    seed: Option<u64>,
}

#[derive(Parser)]
pub struct SweepArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated lambda values [default: 0,0.1,0.2,0.3,0.4,0.5].
    #[arg(long)]
    pub lambdas: Option<String>,
    /// Steps per sweep member [default: 100].
    #[arg(long)]
    pub steps: Option<u64>,
    /// Seed shared by every member [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for sweep.csv and per-lambda runs.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Parallel worker threads [default: 1].
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Model preset [default: desk].
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    /// Fold genera with fewer instances than this into the catch-all
    /// [default: 10].
    #[arg(long)]
    pub merge_threshold: Option<u64>,
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct SweepOverlay {
    data: Option<PathBuf>,
    lambdas: Option<String>,
    steps: Option<u64>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    jobs: Option<usize>,
    model: Option<ModelKind>,
    merge_threshold: Option<u64>,
}

fn load_overlay<T: serde::de::DeserializeOwned + Default>(path: Option<&PathBuf>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Ingestion(format!("cannot read config file {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Ingestion(format!("config file {}: {e}", p.display())))
        }
    }
}

fn need<T>(flag: &str, cli: Option<T>, file: Option<T>) -> Result<T> {
    cli.or(file).ok_or_else(|| {
        Error::Config(format!("missing required option --{flag} (pass the flag or set it in the config file)"))
    })
}

fn pick<T>(cli: Option<T>, file: Option<T>, default: T) -> T {
    cli.or(file).unwrap_or(default)
}

/// Parse a comma-separated lambda list.
pub fn parse_lambdas(s: &str) -> Result<Vec<f64>> {
    let vals: Vec<f64> = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| Error::Config(format!("invalid lambda value {t:?}"))))
        .collect::<Result<_>>()?;
    if vals.is_empty() {
        return Err(Error::Config("--lambdas must list at least one value".into()));
    }
    Ok(vals)
}

fn cmd_gen(args: GenArgs, config: Option<&PathBuf>) -> Result<()> {
    let file: GenOverlay = load_overlay(config)?;
    let n_images = pick(args.n_images, file.n_images, 0);
    if n_images == 0 {
        return Err(Error::Config("--n-images must be at least 1".into()));
    }
    let seed = pick(args.seed, file.seed, 0);
    let out = need("out", args.out, file.out)?;
    let profile = pick(args.profile, file.profile, ProfileKind::Desk);
    let mut cc = CorpusConfig::desk(n_images, seed);
    if profile == ProfileKind::Uniform {
        let n = cc.profile.len() as f64;
        for (_, frac) in &mut cc.profile {
            *frac = 1.0 / n;
        }
    }
    crate::synthgen::emit_corpus(&cc, &out)?;
    println!("wrote {n_images} images to {}", out.display());
    Ok(())
}

fn cmd_train(args: TrainArgs, config: Option<&PathBuf>) -> Result<()> {
    let file: TrainOverlay = load_overlay(config)?;
    let data = need("data", args.data, file.data)?;
    let out = need("out", args.out, file.out)?;
    let steps = pick(args.steps, file.steps, 500);
    let model = pick(args.model, file.model, ModelKind::Desk).config();
    let mut cfg = TrainConfig::desk(steps);
    cfg.lambda = pick(args.lambda, file.lambda, cfg.lambda);
    cfg.seed = pick(args.seed, file.seed, 0);
    cfg.checkpoint_every = pick(args.checkpoint_every, file.checkpoint_every, 0);
    cfg.eval_every = pick(args.eval_every, file.eval_every, 0);
    cfg.merge_threshold = pick(args.merge_threshold, file.merge_threshold, cfg.merge_threshold);
    let mut session = TrainSession::prepare(&data, model, cfg)?;
    println!(
        "training on {} images ({} held out), {} genera after merging, lambda {}",
        session.train_images.len(),
        session.test_images.len(),
        session.taxonomy.genera().len(),
        session.config.lambda
    );
    let outcome = session.run(&out)?;
    if let Some(msg) = outcome.aborted {
        return Err(Error::Numeric(format!(
            "training aborted: {msg}; last good checkpoint kept at {}",
            outcome.checkpoint_path.display()
        )));
    }
    println!("completed {} steps; checkpoint {}", outcome.steps_completed, outcome.checkpoint_path.display());
    if let (Some(g), Some(c)) = (outcome.final_map_genus, outcome.final_map_class) {
        println!("final map_genus {g:.4} map_class {c:.4}");
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs, config: Option<&PathBuf>) -> Result<()> {
    let file: EvalOverlay = load_overlay(config)?;
    let data = need("data", args.data, file.data)?;
    let checkpoint = need("checkpoint", args.checkpoint, file.checkpoint)?;
    let out = need("out", args.out, file.out)?;
    let render = args.render || file.render.unwrap_or(false);
    let split_kind = pick(args.split, file.split, SplitKind::Test);
    let ckpt = Checkpoint::load(&checkpoint)?;
    let (mut images, dataset_tax) = load_dataset(&data)?;
    ckpt.validate_source_taxonomy(&dataset_tax)?;
    let taxonomy = ckpt.taxonomy()?;
    apply_relabel(&mut images, &ckpt.relabel);
    let split_seed = pick(args.seed, file.seed, ckpt.split_seed);
    let ids: Vec<String> = images.iter().map(|i| i.image_id.clone()).collect();
    let split = split_dataset(&ids, split_seed)?;
    let chosen_ids: Vec<&String> = match split_kind {
        SplitKind::Train => split.train.iter().collect(),
        SplitKind::Test => split.test.iter().collect(),
        SplitKind::All => split.train.iter().chain(&split.test).collect(),
    };
    let by_id: BTreeMap<&str, &AnnotatedImage> = images.iter().map(|i| (i.image_id.as_str(), i)).collect();
    let chosen: Vec<&AnnotatedImage> = chosen_ids.iter().map(|id| by_id[id.as_str()]).collect();
    if chosen.is_empty() {
        return Err(Error::Validation("selected split contains no images".into()));
    }
    let detector = ckpt.restore()?;
    let pre = Preprocessor::new(ckpt.stats.clone()).with_target(ckpt.model.image_size);
    let (dets, gts) = run_inference(&detector, &pre, &taxonomy, &chosen, 0.05, 0.5)?;
    let report = evaluate(&dets, &gts, &taxonomy)?;
    write_report(&report, &out)?;
    write_detections(&dets, &out.join("detections.jsonl"))?;
    if render {
        render_split(&chosen, &dets, &pre.target, &out.join("render"))?;
    }
    print!("{}", format_tables(&report));
    println!("\nartifacts written to {}", out.display());
    Ok(())
}

fn render_split(
    images: &[&AnnotatedImage],
    dets: &[ScoredDetection],
    target: &usize,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut per_image: BTreeMap<&str, Vec<&ScoredDetection>> = BTreeMap::new();
    for d in dets {
        per_image.entry(d.image_id.as_str()).or_default().push(d);
    }
    for img in images {
        let px = img.read_pixels()?;
        let unit = resize_to_unit(&px, *target, *target);
        let canvas = unit.mapv(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8);
        let boxes: Vec<_> = per_image
            .get(img.image_id.as_str())
            .map(|ds| ds.iter().map(|d| (d.bbox, d.label.clone(), Some(d.score))).collect())
            .unwrap_or_default();
        render_annotated(&canvas, &boxes, &dir.join(format!("{}.png", img.image_id)))?;
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs, config: Option<&PathBuf>) -> Result<()> {
    let file: SweepOverlay = load_overlay(config)?;
    let data = need("data", args.data, file.data)?;
    let out = need("out", args.out, file.out)?;
    let lambdas = parse_lambdas(&pick(args.lambdas, file.lambdas, "0,0.1,0.2,0.3,0.4,0.5".into()))?;
    let steps = pick(args.steps, file.steps, 100);
    let jobs = pick(args.jobs, file.jobs, 1);
    let model = pick(args.model, file.model, ModelKind::Desk).config();
    let mut cfg = TrainConfig::desk(steps);
    cfg.seed = pick(args.seed, file.seed, 0);
    cfg.merge_threshold = pick(args.merge_threshold, file.merge_threshold, cfg.merge_threshold);
    let outcome = sweep_lambda(&data, &model, &cfg, &lambdas, &out, jobs)?;
    for row in &outcome.rows {
        println!("lambda {} map_genus {:.4} map_class {:.4}", row.lambda, row.final_map_genus, row.final_map_class);
    }
    println!("sweep table written to {}", outcome.csv_path.display());
    if !outcome.failures.is_empty() {
        for (lambda, msg) in &outcome.failures {
            eprintln!("lambda {lambda} failed: {msg}");
        }
        return Err(Error::Numeric(format!(
            "{} of {} sweep member(s) failed; partial results kept",
            outcome.failures.len(),
            lambdas.len()
        )));
    }
    Ok(())
}

/// Entry point: parses arguments, runs the command, maps errors to exit
/// codes (usage 2, ingestion 3, validation 4, numeric 5, generation 6).
pub fn run() -> u8 {
    let cli = Cli::parse();
    let config = cli.config.as_ref();
    let result = match cli.command {
        Command::Gen(args) => cmd_gen(args, config),
        Command::Train(args) => cmd_train(args, config),
        Command::Eval(args) => cmd_eval(args, config),
        Command::Sweep(args) => cmd_sweep(args, config),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code() as u8
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_list_parsing() {
        assert_eq!(parse_lambdas("0,0.1,0.5").unwrap(), vec![0.0, 0.1, 0.5]);
        assert_eq!(parse_lambdas(" 0.2 ").unwrap(), vec![0.2]);
        assert!(parse_lambdas("").is_err());
        assert!(parse_lambdas("a,b").is_err());
    }

    #[test]
    fn overlay_resolution_prefers_cli_then_file_then_default() {
        assert_eq!(pick(Some(1), Some(2), 3), 1);
        assert_eq!(pick(None, Some(2), 3), 2);
        assert_eq!(pick::<u64>(None, None, 3), 3);
        assert_eq!(need("x", Some(1), Some(2)).unwrap(), 1);
        assert_eq!(need("x", None, Some(2)).unwrap(), 2);
        let err = need::<u64>("steps", None, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("--steps"));
    }

    #[test]
    fn overlay_file_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        std::fs::write(&p, r#"{"steps": 5, "bogus": 1}"#).unwrap();
        let r: Result<TrainOverlay> = load_overlay(Some(&p));
        assert!(matches!(r, Err(Error::Ingestion(_))));
        std::fs::write(&p, r#"{"steps": 5, "lambda": 0.3}"#).unwrap();
        let r: TrainOverlay = load_overlay(Some(&p)).unwrap();
        assert_eq!(r.steps, Some(5));
        assert_eq!(r.lambda, Some(0.3));
    }

    #[test]
    fn cli_parses_subcommands() {
        let cli = Cli::try_parse_from(["algaedet", "gen", "--n-images", "3", "--out", "/tmp/x"]).unwrap();
        match cli.command {
            Command::Gen(g) => {
                assert_eq!(g.n_images, Some(3));
                assert_eq!(g.out.as_deref(), Some(Path::new("/tmp/x")));
            }
            _ => panic!("wrong subcommand"),
        }
        let cli = Cli::try_parse_from([
            "algaedet", "train", "--data", "d", "--out", "o", "--lambda", "0.3", "--model", "tiny",
        ])
        .unwrap();
        match cli.command {
            Command::Train(t) => {
                assert_eq!(t.lambda, Some(0.3));
                assert!(matches!(t.model, Some(ModelKind::Tiny)));
            }
            _ => panic!("wrong subcommand"),
        }
        assert!(Cli::try_parse_from(["algaedet", "nope"]).is_err());
    }
}
