//! Command-line interface.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use crate::backbone::Sampler;
use crate::checkpoint::{sidecar_path, Checkpoint, CheckpointMeta};
use crate::config::{hex_digest, ExperimentConfig};
use crate::dataio::{load_manifest, write_synthetic_corpus, Split, DEFAULT_TRAIN_FRACTION};
use crate::degrade::SynthConfig;
use crate::error::{validation, Error, Result};
use crate::imaging::{load_image, save_image, BitDepth};
use crate::infer::{guidance_dump, infer_image, save_guidance_dump};
use crate::metrics::{eval_corpus, profile_csv, ReportMeta};
use crate::model::Model;
use crate::train::{train_ar, train_vqvae, training_pairs};

#[derive(Debug, Parser)]
#[command(name = "iisr", version, about = "Infrared image super-resolution toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired corpus with a manifest.
    Synth(SynthArgs),
    /// Train the tokenizer (VQ-VAE) stage.
    TrainVqvae(TrainVqvaeArgs),
    /// Train the guided autoregressive stage on top of a tokenizer checkpoint.
    TrainAr(TrainArArgs),
    /// Super-resolve one image or every record of a manifest split.
    Infer(InferArgs),
    /// Score SR predictions against HR references.
    Eval(EvalArgs),
    /// Dump the intensity profile of one row of several images as CSV.
    Profile(ProfileArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub hr_size: usize,
    #[arg(long, default_value_t = 4)]
    pub scale: usize,
    #[arg(long, default_value_t = SynthConfig::default().defocus_fraction)]
    pub defocus_fraction: f64,
    #[arg(long, default_value_t = 0.01)]
    pub noise_sigma: f64,
    /// Shift each HR by a random sub-factor offset before degradation.
    #[arg(long)]
    pub jitter: bool,
    #[arg(long, default_value_t = DEFAULT_TRAIN_FRACTION)]
    pub train_fraction: f64,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Manifest overriding the configured data source.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainVqvaeArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Checkpoint path; the loss curve goes to `<out>.loss.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    NoToc,
    NoCac,
    NoTsg,
}

#[derive(Debug, Args)]
pub struct TrainArArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Tokenizer checkpoint from `train-vqvae`.
    #[arg(long)]
    pub vqvae: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub ablate: Vec<Ablation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SamplerKind {
    Argmax,
    Topk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Single LR image; requires `--out`.
    #[arg(long, conflicts_with = "manifest", requires = "out")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Manifest whose records are super-resolved into `--out-dir` as `<id>_SR.png`.
    #[arg(long, requires = "out_dir")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value_t = SamplerKind::Argmax)]
    pub sampler: SamplerKind,
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write heat, edge and gate maps next to each output.
    #[arg(long)]
    pub dump_guidance: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred_dir: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    pub report: ReportFormat,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Checkpoint that produced the predictions, recorded in the metadata.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub patch: usize,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[arg(long)]
    pub row: usize,
    #[arg(long = "image", required = true)]
    pub images: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::TrainVqvae(a) => train_vqvae_cmd(a),
        Command::TrainAr(a) => train_ar_cmd(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Profile(a) => profile(a),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        count: a.count,
        hr_size: a.hr_size,
        scale: a.scale,
        defocus_fraction: a.defocus_fraction,
        noise_sigma: a.noise_sigma,
        jitter: a.jitter,
        seed: a.seed,
    };
    let text = toml::to_string(&cfg).map_err(|e| validation(e.to_string()))?;
    info!("synth: config hash {} seed {}", hex_digest(text.as_bytes()), cfg.seed);
    let m = write_synthetic_corpus(&cfg, &a.out, a.train_fraction)?;
    info!("wrote {} pairs to {}", m.len(), a.out.display());
    Ok(())
}

fn resolve_config(a: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(m) = &a.manifest {
        cfg.data.manifest = Some(m.clone());
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn log_config(stage: &str, cfg: &ExperimentConfig) -> Result<()> {
    info!("{stage}: config hash {} seed {}", cfg.hash()?, cfg.seed);
    Ok(())
}

fn loss_csv_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".loss.csv");
    PathBuf::from(s)
}

fn train_vqvae_cmd(a: TrainVqvaeArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.cfg)?;
    if let Some(n) = a.cfg.iterations {
        cfg.vqvae_optimizer.iterations = n;
    }
    log_config("train-vqvae", &cfg)?;
    let model = Model::new(&cfg)?;
    let pairs = training_pairs(&cfg)?;
    let curve = train_vqvae(&model, &pairs, None)?;
    model
        .checkpoint("vqvae", cfg.vqvae_optimizer.iterations)?
        .save(&a.out)?;
    curve.save_csv(loss_csv_path(&a.out))?;
    info!("saved {}", a.out.display());
    Ok(())
}

fn train_ar_cmd(a: TrainArArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.cfg)?;
    if let Some(n) = a.cfg.iterations {
        cfg.optimizer.iterations = n;
    }
    for ab in &a.ablate {
        match ab {
            Ablation::NoToc => cfg.ablations.use_toc = false,
            Ablation::NoCac => cfg.ablations.use_cac = false,
            Ablation::NoTsg => cfg.ablations.use_tsg = false,
        }
    }
    log_config("train-ar", &cfg)?;
    info!(
        "ablations: tsg {} cac {} toc {} (lambda_toc effective {})",
        cfg.ablations.use_tsg,
        cfg.ablations.use_cac,
        cfg.ablations.use_toc,
        if cfg.ablations.use_toc { cfg.loss.lambda_toc } else { 0.0 }
    );
    let model = Model::new(&cfg)?;
    let tok = Checkpoint::load(&a.vqvae)?;
    let n = model.load_tokenizer(&tok)?;
    info!("restored {n} tokenizer tensors from {}", a.vqvae.display());
    let pairs = training_pairs(&cfg)?;
    let curve = train_ar(&model, &pairs, None)?;
    model.checkpoint("ar", cfg.optimizer.iterations)?.save(&a.out)?;
    curve.save_csv(loss_csv_path(&a.out))?;
    info!("saved {}", a.out.display());
    Ok(())
}

fn sampler(a: &InferArgs) -> Result<Sampler> {
    Ok(match a.sampler {
        SamplerKind::Argmax => Sampler::Argmax,
        SamplerKind::Topk => {
            if a.k == 0 || !(a.temperature > 0.0) {
                return Err(validation("top-k sampling needs k >= 1 and temperature > 0"));
            }
            Sampler::TopK {
                k: a.k,
                temperature: a.temperature,
            }
        }
    })
}

fn infer(a: InferArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    let model = Model::from_checkpoint(&ck)?;
    info!("infer: config hash {} seed {}", ck.meta.config_hash, a.seed);
    let sampler = sampler(&a)?;
    let mut jobs: Vec<(PathBuf, PathBuf)> = Vec::new();
    if let Some(input) = &a.input {
        let out = a.out.clone().ok_or_else(|| validation("--input requires --out"))?;
        jobs.push((input.clone(), out));
    } else if let Some(mpath) = &a.manifest {
        let dir = a.out_dir.clone().ok_or_else(|| validation("--manifest requires --out-dir"))?;
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let m = load_manifest(mpath)?;
        for r in &m.records {
            let keep = match a.split {
                SplitArg::All => true,
                SplitArg::Train => r.split == Split::Train,
                SplitArg::Test => r.split == Split::Test,
            };
            if keep {
                jobs.push((m.resolve(&r.lr_path), dir.join(format!("{}_SR.png", r.id))));
            }
        }
    } else {
        return Err(validation("give either --input with --out or --manifest with --out-dir"));
    }
    for (input, out) in jobs {
        let lr = load_image(&input)?;
        let sr = infer_image(&model, &lr, sampler, a.seed)?;
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        save_image(&sr, &out, BitDepth::Sixteen)?;
        if a.dump_guidance {
            save_guidance_dump(&guidance_dump(&model, &lr)?, &out)?;
        }
        info!("{} -> {}", input.display(), out.display());
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let manifest = load_manifest(&a.manifest)?;
    let mut meta = ReportMeta {
        toc_patch: a.patch,
        ..ReportMeta::default()
    };
    if let Some(ck) = &a.ckpt {
        let side = sidecar_path(ck);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let cm: CheckpointMeta = serde_json::from_str(&text)?;
        meta.checkpoint = ck.file_name().map(|n| n.to_string_lossy().into_owned());
        meta.config_hash = Some(cm.config_hash);
    }
    info!(
        "eval: config hash {} seed n/a",
        meta.config_hash.as_deref().unwrap_or("none")
    );
    let report = eval_corpus(&a.pred_dir, &manifest, meta)?;
    if !report.missing.is_empty() {
        log::warn!("{} predictions missing", report.missing.len());
    }
    let text = match a.report {
        ReportFormat::Json => report.to_json()?,
        ReportFormat::Csv => report.to_csv()?,
    };
    emit(a.out.as_deref(), &text)
}

fn profile(a: ProfileArgs) -> Result<()> {
    let mut images = Vec::new();
    for p in &a.images {
        let name = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| p.display().to_string());
        images.push((name, load_image(p)?));
    }
    info!("profile: row {} over {} images", a.row, images.len());
    emit(a.out.as_deref(), &profile_csv(&images, a.row)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn ablation_flags_parse() {
        let cli = Cli::try_parse_from([
            "iisr", "train-ar", "--vqvae", "v", "--out", "o", "--ablate", "no-toc", "--ablate", "no-cac",
        ])
        .unwrap();
        let Command::TrainAr(a) = cli.command else { panic!() };
        assert_eq!(a.ablate, vec![Ablation::NoToc, Ablation::NoCac]);
    }

    #[test]
    fn unknown_flag_is_a_usage_error() {
        let e = Cli::try_parse_from(["iisr", "synth", "--out", "d", "--bogus"]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }
}
