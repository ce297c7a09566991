//! Command-line interface.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use promptfuse_core::degrade::{make_sample, DegradeSpec};
use promptfuse_core::derive_seed;
use promptfuse_core::imgproc::ycbcr_to_rgb;
use promptfuse_core::prompt::{IrDegradation, PromptTemplate, ViDegradation};
use promptfuse_core::train::{Ablation, RunConfig};

use crate::dataset::{prepare, DatasetManifest, ManifestRecord};
use crate::encoder::select_encoder;
use crate::fit::{fit, load_checkpoint, FitOptions, LOG_FILE};
use crate::imageio::{load_image, save_png, with_channels};
use crate::report::{evaluate_triples, triples_from_dirs, triples_from_manifest, write_report};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const RUN_CONFIG_FILE: &str = "run_config.txt";

#[derive(Debug, Parser)]
#[command(name = "promptfuse", version, about = "Prompt-guided infrared/visible image fusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a manifest from directories of pairs matched by file name.
    Prepare(PrepareArgs),
    /// Synthesize degraded inputs for every manifest record.
    Degrade(DegradeArgs),
    /// Train a network on a manifest.
    Train(TrainArgs),
    /// Fuse image pairs with a trained checkpoint.
    Fuse(FuseArgs),
    /// Compute fusion quality metrics.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub ir_dir: PathBuf,
    #[arg(long)]
    pub vi_dir: PathBuf,
    #[arg(long, requires = "vi_ref_dir")]
    pub ir_ref_dir: Option<PathBuf>,
    #[arg(long, requires = "ir_ref_dir")]
    pub vi_ref_dir: Option<PathBuf>,
    /// Output manifest file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DegradeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for images and the new manifest.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "none")]
    pub ir_mode: IrDegradation,
    #[arg(long, default_value = "none")]
    pub vi_mode: ViDegradation,
    #[arg(long, default_value_t = 0.5)]
    pub severity: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// `key = value` run configuration; defaults apply to missing keys.
    #[arg(long, conflicts_with = "resume")]
    pub config: Option<PathBuf>,
    /// Output directory for the log and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, conflicts_with = "resume")]
    pub seed: Option<u64>,
    #[arg(long, conflicts_with = "resume")]
    pub ablation: Option<Ablation>,
    /// Continue from a checkpoint, using its configuration.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many steps and checkpoint.
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// GloVe-style word-vector file; the stub encoder is used without it.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Infrared image file or directory.
    #[arg(long, requires = "vi", conflicts_with = "manifest")]
    pub ir: Option<PathBuf>,
    /// Visible image file or directory.
    #[arg(long, requires = "ir")]
    pub vi: Option<PathBuf>,
    /// Read the pairs from a manifest instead of `--ir`/`--vi`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub prompt_ir: Option<String>,
    #[arg(long)]
    pub prompt_vi: Option<String>,
    /// Use each manifest record's own prompts.
    #[arg(long, requires = "manifest", conflicts_with_all = ["prompt_ir", "prompt_vi"])]
    pub prompt_auto: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub encoder: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of fused images.
    #[arg(long)]
    pub fused: PathBuf,
    #[arg(long, requires = "vi", conflicts_with = "manifest")]
    pub ir: Option<PathBuf>,
    #[arg(long, requires = "ir")]
    pub vi: Option<PathBuf>,
    /// Take the source images from a manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory for the CSV and JSON reports.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Prepare(a) => cmd_prepare(&a),
        Command::Degrade(a) => cmd_degrade(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Fuse(a) => cmd_fuse(&a),
        Command::Eval(a) => cmd_eval(&a),
    }
}

pub fn cmd_prepare(a: &PrepareArgs) -> anyhow::Result<()> {
    let refs = a.ir_ref_dir.as_deref().zip(a.vi_ref_dir.as_deref());
    let prepared = prepare(&a.ir_dir, &a.vi_dir, refs)?;
    for p in &prepared.unmatched {
        eprintln!("warning: no counterpart for {}, skipped", p.display());
    }
    prepared.manifest.save(&a.out)?;
    eprintln!("{} pairs written to {}", prepared.manifest.records.len(), a.out.display());
    Ok(())
}

pub fn cmd_degrade(a: &DegradeArgs) -> anyhow::Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let mut records = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        let sample = manifest.load_sample(r)?;
        let spec = DegradeSpec::new(a.ir_mode, a.vi_mode, a.severity, derive_seed(a.seed, &r.name))?;
        let out = make_sample(&sample.ir_reference, &sample.vi_reference, &spec)?;
        let ir_path = a.out.join("ir").join(format!("{}.png", r.name));
        let vi_path = a.out.join("vi").join(format!("{}.png", r.name));
        save_png(&out.ir_degraded, &ir_path)?;
        save_png(&out.vi_degraded, &vi_path)?;
        records.push(ManifestRecord {
            name: r.name.clone(),
            ir_path,
            vi_path,
            ir_ref_path: Some(manifest.resolve(r.ir_ref_path.as_ref().unwrap_or(&r.ir_path))),
            vi_ref_path: Some(manifest.resolve(r.vi_ref_path.as_ref().unwrap_or(&r.vi_path))),
            prompt_ir: out.prompt_ir,
            prompt_vi: out.prompt_vi,
            spec,
        });
    }
    DatasetManifest { root: PathBuf::new(), records }.save(a.out.join(MANIFEST_FILE))?;
    Ok(())
}

fn read_run_config(a: &TrainArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::from_text(&text).with_context(|| format!("invalid configuration {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(ablation) = a.ablation {
        cfg.train.ablation = ablation;
    }
    Ok(RunConfig::new(cfg.network, cfg.train)?)
}

pub fn cmd_train(a: &TrainArgs) -> anyhow::Result<()> {
    let (cfg, state) = match &a.resume {
        Some(p) => {
            let (cfg, state) = load_checkpoint(p)?;
            (cfg, Some(state))
        }
        None => (read_run_config(a)?, None),
    };
    let encoder = select_encoder(a.encoder.as_deref(), cfg.network.prompt_dim)?;
    let samples = DatasetManifest::load(&a.manifest)?.load_samples()?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    std::fs::write(a.out.join(RUN_CONFIG_FILE), cfg.to_text())?;
    let opts = FitOptions { max_steps: a.max_steps };
    let outcome = fit(&samples, &cfg, encoder.as_ref(), state, &a.out, &opts)?;
    eprintln!(
        "{} steps, log {}, checkpoint {}",
        outcome.state.step,
        a.out.join(LOG_FILE).display(),
        outcome.checkpoint.display()
    );
    Ok(())
}

/// `(name, ir, vi)` triples from a file pair or from same-named files in two directories.
fn input_pairs(ir: &Path, vi: &Path) -> anyhow::Result<Vec<(String, PathBuf, PathBuf)>> {
    if ir.is_file() && vi.is_file() {
        let name = ir.file_stem().and_then(|s| s.to_str()).context("infrared file has no name")?;
        return Ok(vec![(name.to_owned(), ir.to_path_buf(), vi.to_path_buf())]);
    }
    if !(ir.is_dir() && vi.is_dir()) {
        bail!("--ir and --vi must both be files or both be directories");
    }
    let prepared = prepare(ir, vi, None)?;
    for p in &prepared.unmatched {
        eprintln!("warning: no counterpart for {}, skipped", p.display());
    }
    Ok(prepared.manifest.records.into_iter().map(|r| (r.name, r.ir_path, r.vi_path)).collect())
}

pub fn cmd_fuse(a: &FuseArgs) -> anyhow::Result<()> {
    let (cfg, state) = load_checkpoint(&a.checkpoint)?;
    let net = state.network;
    let encoder = select_encoder(a.encoder.as_deref(), cfg.network.prompt_dim)?;
    let clean = PromptTemplate::clean();
    let fixed = (
        a.prompt_ir.clone().unwrap_or_else(|| clean.render_ir()),
        a.prompt_vi.clone().unwrap_or_else(|| clean.render_vi()),
    );
    let jobs: Vec<(String, PathBuf, PathBuf, (String, String))> = match (&a.manifest, &a.ir, &a.vi) {
        (Some(m), _, _) => {
            let manifest = DatasetManifest::load(m)?;
            manifest
                .records
                .iter()
                .map(|r| {
                    let prompts =
                        if a.prompt_auto { (r.prompt_ir.clone(), r.prompt_vi.clone()) } else { fixed.clone() };
                    (r.name.clone(), manifest.resolve(&r.ir_path), manifest.resolve(&r.vi_path), prompts)
                })
                .collect()
        }
        (None, Some(ir), Some(vi)) => {
            input_pairs(ir, vi)?.into_iter().map(|(n, i, v)| (n, i, v, fixed.clone())).collect()
        }
        _ => bail!("give either --manifest or both --ir and --vi"),
    };
    for (name, ir_path, vi_path, (p_ir, p_vi)) in jobs {
        let ir = with_channels(&load_image(&ir_path)?, 1);
        let vi = with_channels(&load_image(&vi_path)?, 3);
        let fused = net.fuse(&ir, &vi, &p_ir, &p_vi, encoder.as_ref()).with_context(|| format!("fusing `{name}`"))?;
        save_png(&ycbcr_to_rgb(&fused), a.out.join(format!("{name}.png")))?;
    }
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> anyhow::Result<()> {
    let triples = match (&a.manifest, &a.ir, &a.vi) {
        (Some(m), _, _) => triples_from_manifest(&a.fused, &DatasetManifest::load(m)?),
        (None, Some(ir), Some(vi)) => triples_from_dirs(&a.fused, ir, vi)?,
        _ => bail!("give either --manifest or both --ir and --vi"),
    };
    if triples.is_empty() {
        bail!("no fused images in {}", a.fused.display());
    }
    let report = evaluate_triples(&triples)?;
    write_report(&report, &a.out)?;
    Ok(())
}
