//! Command-line front end. [`run`] parses arguments and dispatches;
//! `main` only maps the outcome to an exit code.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::config::{training_fingerprint, RunConfig};
use crate::data::augment::{crop, prepare, CropParams};
use crate::data::{crop_region, generate, generate_samples, pgm, split, Manifest, Region, Sample};
use crate::error::{Error, Result};
use crate::explain::{self, DEFAULT_LAYER};
use crate::fusion::{late_fuse, Ensemble, FusedModel, FusionMode, MemberRef};
use crate::gradcheck;
use crate::model::{Arch, Model};
use crate::tensor::Tensor;
use crate::train::{self, history_csv, mae, predict_set, Checkpoint, GroupBy, MaeReport, PreparedSet, Regressor};

#[derive(Debug, Parser)]
#[command(name = "bonenet", version, about = "Whole-body bone age regression with hierarchical CNN features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset as PGM files plus manifest.csv.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model; writes model.ckpt and history.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "hier")]
        arch: ArchArg,
        #[arg(long, value_enum, default_value = "full")]
        region: Region,
        /// Dataset manifest; defaults to paths.manifest, else the dataset
        /// described by the config is rendered in memory.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Report eval-mode MAE of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        by_gender: bool,
        /// Override the body region recorded in the checkpoint.
        #[arg(long, value_enum)]
        region: Option<Region>,
        /// Directory for report.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build an ensemble from trained checkpoints.
    Fuse {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: FusionMode,
        #[arg(long, num_args = 2.., required = true)]
        checkpoints: Vec<PathBuf>,
        /// Early fusion: manifest the fused head is trained on (split into
        /// train/validation per the config).
        #[arg(long)]
        train_head: Option<PathBuf>,
        /// Early fusion: train member weights along with the head.
        #[arg(long)]
        unfreeze: bool,
        /// Late fusion: evaluate members and the ensemble on this manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grad-CAM heatmap and upper/lower mass for one image or a manifest.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
        image: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = DEFAULT_LAYER)]
        layer: String,
        /// Heatmap PGM for --image; output directory for --manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 10)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ArchArg {
    Hier,
    Plain,
}

impl From<ArchArg> for Arch {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::Hier => Arch::Hier,
            ArchArg::Plain => Arch::Plain,
        }
    }
}

/// Exit status for a failed command: 3 for divergence, 2 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::DivergedTraining { .. } => 3,
        _ => 2,
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if common.seed.is_some() {
        cfg.seed = common.seed;
        cfg.apply_seed();
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A checkpoint's model, whatever its kind.
enum Loaded {
    Single(Model),
    Fused(FusedModel),
}

impl Loaded {
    fn open(path: &Path) -> Result<(Self, Checkpoint)> {
        let ckpt = Checkpoint::load(path)?;
        let model = match ckpt.meta.get("kind").and_then(|k| k.as_str()) {
            Some("fused") => Loaded::Fused(FusedModel::from_checkpoint(&ckpt)?),
            _ => Loaded::Single(ckpt.load_model()?),
        };
        Ok((model, ckpt))
    }

    fn input_size(&self) -> usize {
        match self {
            Loaded::Single(m) => m.input_size(),
            Loaded::Fused(m) => m.input_size(),
        }
    }

    fn predict(&self, set: &PreparedSet) -> Result<Vec<f64>> {
        match self {
            Loaded::Single(m) => predict_set(m, set),
            Loaded::Fused(m) => predict_set(m, set),
        }
    }
}

fn checkpoint_region(ckpt: &Checkpoint) -> Result<Region> {
    match ckpt.meta.get("region") {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::Format(format!("checkpoint region: {e}"))),
        None => Ok(Region::Full),
    }
}

fn load_dataset(manifest: Option<&Path>, cfg: &RunConfig) -> Result<Vec<Sample>> {
    match manifest.or(cfg.paths.manifest.as_deref()) {
        Some(m) => Manifest::load(m)?.load_samples(),
        None => generate_samples(&cfg.data),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out } => {
            let cfg = load_config(&common)?;
            let m = generate(&cfg.data, &out)?;
            println!(
                "wrote {} images ({} female, {} male) to {}",
                m.len(),
                m.count(crate::data::Gender::Female),
                m.count(crate::data::Gender::Male),
                out.display()
            );
            Ok(())
        }
        Command::Train { common, arch, region, manifest, out } => {
            let cfg = load_config(&common)?;
            cmd_train(&cfg, arch.into(), region, manifest.as_deref(), &out)
        }
        Command::Eval { checkpoint, manifest, by_gender, region, out } => {
            let (model, ckpt) = Loaded::open(&checkpoint)?;
            let region = match region {
                Some(r) => r,
                None => checkpoint_region(&ckpt)?,
            };
            let samples = Manifest::load(&manifest)?.load_samples()?;
            let set = PreparedSet::new(&samples, model.input_size(), region);
            let group_by = if by_gender { GroupBy::Gender } else { GroupBy::None };
            let report = MaeReport::from_predictions(&model.predict(&set)?, &set, group_by)?;
            println!("{report}");
            if let Some(dir) = out {
                create_dir(&dir)?;
                write(&dir.join("report.csv"), &report.to_csv())?;
            }
            Ok(())
        }
        Command::Fuse { common, mode, checkpoints, train_head, unfreeze, manifest, out } => {
            let cfg = load_config(&common)?;
            create_dir(&out)?;
            match mode {
                FusionMode::Late => cmd_late(&checkpoints, manifest.as_deref(), &out),
                FusionMode::Early => {
                    let head = train_head.ok_or_else(|| {
                        Error::InvalidConfig("early fusion needs --train-head MANIFEST".into())
                    })?;
                    cmd_early(&cfg, &checkpoints, &head, unfreeze, &out)
                }
            }
        }
        Command::Explain { checkpoint, image, manifest, layer, out } => {
            cmd_explain(&checkpoint, image.as_deref(), manifest.as_deref(), &layer, &out)
        }
        Command::Gradcheck { cases, seed } => {
            let reports = gradcheck::run_suite(cases, seed)?;
            let mut failed = 0;
            for r in &reports {
                let status = if r.passed() { "ok" } else { "FAIL" };
                println!("{:<28} cases={:<3} max_rel_err={:.3e} {status}", r.name, r.cases, r.max_rel_err);
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                return Err(Error::InvalidConfig(format!("{failed} gradient checks failed")));
            }
            println!("all {} gradient checks passed", reports.len());
            Ok(())
        }
    }
}

fn cmd_train(cfg: &RunConfig, arch: Arch, region: Region, manifest: Option<&Path>, out: &Path) -> Result<()> {
    let model_cfg = cfg.model.with_arch(arch);
    let samples = load_dataset(manifest, cfg)?;
    let (tr, va) = split(&samples, cfg.train.train_fraction, cfg.train.seed)?;
    let side = model_cfg.input_size;
    let (tr, va) = (PreparedSet::new(&tr, side, region), PreparedSet::new(&va, side, region));
    let model = Model::build(&model_cfg, cfg.train.seed)?;
    println!(
        "training {arch:?} on {region} ({} train / {} val), {} trainable parameters",
        tr.len(),
        va.len(),
        model.count_params(true)
    );
    let outcome = train::train(model, &tr, &va, &cfg.train)?;
    create_dir(out)?;
    let meta = json!({
        "kind": "model",
        "model": model_cfg,
        "train": cfg.train,
        "arch": arch,
        "region": region,
        "best_epoch": outcome.best_epoch,
    });
    let ckpt = Checkpoint::from_regressor(
        &outcome.best,
        training_fingerprint(&model_cfg, &cfg.train),
        outcome.history.len() as u32,
        outcome.final_lr,
        meta,
    );
    ckpt.save(out.join("model.ckpt"))?;
    write(&out.join("history.csv"), &history_csv(&outcome.history))?;
    println!(
        "best val MAE {:.4} years at epoch {}; final lr {:e}",
        outcome.best_val_mae, outcome.best_epoch, outcome.final_lr
    );
    Ok(())
}

fn cmd_late(checkpoints: &[PathBuf], manifest: Option<&Path>, out: &Path) -> Result<()> {
    let mut members = Vec::new();
    let mut loaded = Vec::new();
    for p in checkpoints {
        let (m, ckpt) = Loaded::open(p)?;
        members.push(MemberRef {
            path: p.clone(),
            fingerprint: ckpt.fingerprint_hex(),
        });
        loaded.push((m, checkpoint_region(&ckpt)?));
    }
    let ensemble = Ensemble {
        mode: FusionMode::Late,
        members,
        head_checkpoint: None,
    };
    ensemble.validate()?;
    write(&out.join("ensemble.json"), &ensemble.to_json())?;
    if let Some(manifest) = manifest {
        let samples = Manifest::load(manifest)?.load_samples()?;
        let mut preds = Vec::new();
        let mut csv = String::from("member,mae\n");
        let ages: Vec<f64> = samples.iter().map(|s| s.age_years).collect();
        for (i, (m, region)) in loaded.iter().enumerate() {
            let set = PreparedSet::new(&samples, m.input_size(), *region);
            let p = m.predict(&set)?;
            println!("member {i}: MAE {:.4}", mae(&p, &ages));
            csv.push_str(&format!("{i},{:.9}\n", mae(&p, &ages)));
            preds.push(Tensor::from_vec(&[p.len(), 1], p)?);
        }
        let fused = late_fuse(&preds)?;
        let fused_mae = mae(fused.data(), &ages);
        println!("late fusion: MAE {fused_mae:.4}");
        csv.push_str(&format!("fused,{fused_mae:.9}\n"));
        write(&out.join("fusion.csv"), &csv)?;
    }
    println!("wrote {}", out.join("ensemble.json").display());
    Ok(())
}

fn cmd_early(cfg: &RunConfig, checkpoints: &[PathBuf], head_manifest: &Path, unfreeze: bool, out: &Path) -> Result<()> {
    let mut members = Vec::new();
    let mut refs = Vec::new();
    let mut region = None;
    for p in checkpoints {
        let ckpt = Checkpoint::load(p)?;
        let r = checkpoint_region(&ckpt)?;
        if region.is_some_and(|prev| prev != r) {
            return Err(Error::InvalidConfig("early fusion members must share a body region".into()));
        }
        region = Some(r);
        members.push(ckpt.load_model()?);
        refs.push(MemberRef {
            path: p.clone(),
            fingerprint: ckpt.fingerprint_hex(),
        });
    }
    let region = region.unwrap_or_default();
    let fused = FusedModel::build(members, cfg.model.head_dims, cfg.model.dropout_rate, cfg.train.seed)?
        .with_unfrozen(unfreeze);
    let samples = Manifest::load(head_manifest)?.load_samples()?;
    let (tr, va) = split(&samples, cfg.train.train_fraction, cfg.train.seed)?;
    let side = fused.input_size();
    let (tr, va) = (PreparedSet::new(&tr, side, region), PreparedSet::new(&va, side, region));
    println!("training fused head over {} features, {} trainable parameters", fused.feature_width(), fused.count_params(true));
    let outcome = train::train(fused, &tr, &va, &cfg.train)?;
    let meta = json!({
        "kind": "fused",
        "fused": outcome.best.spec(),
        "train": cfg.train,
        "region": region,
        "best_epoch": outcome.best_epoch,
    });
    let fp = crate::train::fingerprint(&json!({ "fused": outcome.best.spec(), "train": cfg.train }));
    let ckpt = Checkpoint::from_regressor(&outcome.best, fp, outcome.history.len() as u32, outcome.final_lr, meta);
    let head_path = out.join("fused.ckpt");
    ckpt.save(&head_path)?;
    write(&out.join("history.csv"), &history_csv(&outcome.history))?;
    let ensemble = Ensemble {
        mode: FusionMode::Early,
        members: refs,
        head_checkpoint: Some(head_path),
    };
    ensemble.validate()?;
    write(&out.join("ensemble.json"), &ensemble.to_json())?;
    println!("early fusion: best val MAE {:.4} at epoch {}", outcome.best_val_mae, outcome.best_epoch);
    Ok(())
}

fn explain_one(model: &Model, sample: &Sample, region: Region, layer: &str) -> Result<explain::Heatmap> {
    let side = model.input_size();
    let x: Tensor = crop(&prepare(&crop_region(&sample.image, region), side), side, CropParams::center());
    explain::grad_cam(model, &x, layer)
}

fn masses(h: &explain::Heatmap) -> Result<(f64, f64)> {
    Ok((explain::region_mass(h, Region::Upper)?, explain::region_mass(h, Region::Lower)?))
}

fn cmd_explain(checkpoint: &Path, image: Option<&Path>, manifest: Option<&Path>, layer: &str, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.load_model()?;
    let region = checkpoint_region(&ckpt)?;
    if let Some(path) = image {
        let sample = Sample {
            id: 0,
            image: pgm::load(path)?,
            age_years: 0.0,
            gender: crate::data::Gender::Female,
        };
        let h = explain_one(&model, &sample, region, layer)?;
        explain::export(&h, out)?;
        match masses(&h) {
            Ok((u, l)) => println!("layer {layer}: upper_mass={u:.6} lower_mass={l:.6}"),
            Err(Error::Undefined) => println!("layer {layer}: heatmap is identically zero, region mass undefined"),
            Err(e) => return Err(e),
        }
        return Ok(());
    }
    let manifest = manifest.ok_or_else(|| Error::InvalidConfig("explain needs --image or --manifest".into()))?;
    let samples = Manifest::load(manifest)?.load_samples()?;
    let maps_dir = out.join("heatmaps");
    create_dir(&maps_dir)?;
    let mut rows = Vec::with_capacity(samples.len());
    for s in &samples {
        let h = explain_one(&model, s, region, layer)?;
        explain::export(&h, maps_dir.join(format!("{:05}.pgm", s.id)))?;
        rows.push((s.id, masses(&h)));
    }
    write(&out.join("region_mass.csv"), &explain::mass_csv(&rows))?;
    let mut uppers: Vec<f64> = rows.iter().filter_map(|(_, m)| m.as_ref().ok().map(|m| m.0)).collect();
    uppers.sort_by(f64::total_cmp);
    if let Some(&median) = uppers.get(uppers.len() / 2) {
        println!("median upper_mass over {} heatmaps: {median:.4}", uppers.len());
    }
    Ok(())
}
