use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use humanscene_core::formats::{
    self, load_checkpoint, peek_kind, read_document, render_svg, save_checkpoint, write_document, FormatError, HumansFile,
    Manifest, ProjectConfig, RefineTrace, RenderOptions, SceneFile,
};
use humanscene_core::geometry::BinaryMask;
use humanscene_core::metrics::{evaluate, EvalItem, MetricsError};
use humanscene_core::model::{Model, ModelError};
use humanscene_core::pipeline::{sample_scene, train_until, Conditioning, PipelineError};
use humanscene_core::refine::{refine_scene, RefineError};
use humanscene_core::scenegen::{dataset_split, derive_seed, generate_sample, SceneError, SceneLayout, TrainingSample};

#[derive(Parser)]
#[command(name = "humanscene", version, about = "Human-conditioned indoor layout synthesis")]
struct Cli {
    /// Project config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic rooms populated with humans, plus a split manifest.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on the training split of a dataset.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Continue from the existing checkpoint.
        #[arg(long)]
        resume: bool,
        /// Save a checkpoint every this many iterations (0: only at the end).
        #[arg(long, default_value_t = 1000)]
        save_every: u64,
    },
    /// Sample scenes from a checkpoint for one conditioning.
    Sample {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Conditioning or training-sample document.
        #[arg(long)]
        conditioning: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Drop contacts and free-space humans from the conditioning.
        #[arg(long)]
        ablate: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refine scenes against human geometry.
    Refine {
        /// Humans or training-sample document.
        #[arg(long)]
        humans: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        scenes: Vec<PathBuf>,
    },
    /// Score generated scenes.
    Eval {
        /// Conditioning or training-sample documents, one per scene or one for all.
        #[arg(long, required = true, num_args = 1..)]
        conditioning: Vec<PathBuf>,
        /// Reference scenes (scene or training-sample documents) for the category distribution.
        #[arg(long, required = true, num_args = 1..)]
        references: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(required = true)]
        scenes: Vec<PathBuf>,
    },
    /// Draw a scene as a top-down SVG.
    Render {
        #[arg(long)]
        scene: PathBuf,
        /// Humans, conditioning or training-sample document.
        #[arg(long)]
        humans: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for invalid input, 3 for numeric failure, 1 otherwise.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(PipelineError::Diverged { .. }) = cause.downcast_ref::<PipelineError>() {
            return 3;
        }
        if cause.is::<FormatError>()
            || cause.is::<ModelError>()
            || cause.is::<SceneError>()
            || cause.is::<MetricsError>()
            || cause.is::<RefineError>()
            || cause.is::<PipelineError>()
            || cause.is::<Invalid>()
        {
            return 2;
        }
    }
    1
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Invalid(String);

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => ProjectConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ProjectConfig::default(),
    };
    match cli.command {
        Command::GenData { out } => gen_data(&cfg, &out.unwrap_or_else(|| cfg.paths.data_dir.clone())),
        Command::Train { data, checkpoint, resume, save_every } => train_cmd(
            &cfg,
            &data.unwrap_or_else(|| cfg.paths.data_dir.clone()),
            &checkpoint.unwrap_or_else(|| cfg.paths.checkpoint.clone()),
            resume,
            save_every,
        ),
        Command::Sample { checkpoint, conditioning, count, seed, ablate, out } => sample_cmd(
            &cfg,
            &checkpoint.unwrap_or_else(|| cfg.paths.checkpoint.clone()),
            &conditioning,
            count,
            seed,
            ablate,
            &out,
        ),
        Command::Refine { humans, out, scenes } => refine_cmd(&cfg, &humans, &out, &scenes),
        Command::Eval { conditioning, references, out, scenes } => eval_cmd(&cfg, &conditioning, &references, &scenes, out.as_deref()),
        Command::Render { scene, humans, out } => render_cmd(&scene, humans.as_deref(), &out),
    }
}

fn sample_name(i: usize) -> String {
    format!("sample_{i:05}.json")
}

fn gen_data(cfg: &ProjectConfig, out: &Path) -> Result<()> {
    let n = cfg.dataset.scenes;
    if n == 0 {
        return Err(invalid("dataset.scenes is 0; the manifest would be empty"));
    }
    let grid = cfg.dataset.grid()?;
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(n);
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::thread::scope(|scope| -> Result<()> {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let grid = &grid;
                scope.spawn(move || -> Result<()> {
                    for i in (w..n).step_by(workers) {
                        let sample = generate_sample(cfg.room_type, derive_seed(cfg.seed, i as u64), grid, &cfg.scenegen)?;
                        write_document(&out.join(sample_name(i)), &sample)?;
                    }
                    Ok(())
                })
            })
            .collect();
        for h in handles {
            h.join().expect("worker panicked")?;
        }
        Ok(())
    })?;
    let names: Vec<String> = (0..n).map(sample_name).collect();
    let (train, val, test) = dataset_split(names, cfg.dataset.split, derive_seed(cfg.seed, 0x5350_4c49))?;
    let manifest = Manifest { room_type: cfg.room_type, seed: cfg.seed, config_hash: cfg.hash(), train, val, test };
    write_document(&out.join("manifest.json"), &manifest)?;
    println!(
        "wrote {n} samples to {} (train {}, val {}, test {})",
        out.display(),
        manifest.train.len(),
        manifest.val.len(),
        manifest.test.len()
    );
    Ok(())
}

fn load_split(dir: &Path, names: &[String]) -> Result<Vec<TrainingSample>> {
    names
        .iter()
        .map(|n| {
            let p = dir.join(n);
            read_document(&p).with_context(|| format!("reading {}", p.display()))
        })
        .collect()
}

fn train_cmd(cfg: &ProjectConfig, data: &Path, ckpt: &Path, resume: bool, save_every: u64) -> Result<()> {
    let manifest: Manifest = read_document(&data.join("manifest.json")).with_context(|| format!("reading manifest in {}", data.display()))?;
    if manifest.room_type != cfg.room_type {
        return Err(invalid(format!("dataset is {:?} but the config is {:?}", manifest.room_type, cfg.room_type)));
    }
    let dataset = load_split(data, &manifest.train)?;
    let hash = cfg.hash();
    let mut model = if resume {
        let (m, _) = load_checkpoint(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
        if m.config != cfg.model {
            return Err(invalid("checkpoint model config differs from the project config"));
        }
        m
    } else {
        Model::new(cfg.model.clone(), cfg.seed)?
    };
    let total = cfg.train.iterations;
    let chunk = if save_every == 0 { total.max(1) } else { save_every };
    let start = std::time::Instant::now();
    while model.params.step() < total {
        let end = (model.params.step() / chunk + 1).saturating_mul(chunk).min(total);
        train_until(&mut model, &dataset, &cfg.train, end, |r| {
            eprintln!("iter {:>6}  nll {:.4}  ({:.0}s)", r.iteration, r.nll, start.elapsed().as_secs_f64())
        })?;
        save_checkpoint(ckpt, &model, &hash)?;
    }
    if total == 0 || model.params.step() == 0 {
        save_checkpoint(ckpt, &model, &hash)?;
    }
    println!("checkpoint at step {} written to {}", model.params.step(), ckpt.display());
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_conditioning(path: &Path) -> Result<(Conditioning, Option<TrainingSample>)> {
    let text = read_text(path)?;
    let kind = peek_kind(&text).with_context(|| path.display().to_string())?;
    Ok(match kind.as_str() {
        "conditioning" => (formats::from_json(&text)?, None),
        "training_sample" => {
            let s: TrainingSample = formats::from_json(&text)?;
            (Conditioning::from_sample(&s), Some(s))
        }
        other => return Err(invalid(format!("{}: expected a conditioning document, found {other}", path.display()))),
    })
}

fn sample_cmd(cfg: &ProjectConfig, ckpt: &Path, cond: &Path, count: usize, seed: u64, ablate: bool, out: &Path) -> Result<()> {
    let (model, hash) = load_checkpoint(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let (mut cond, _) = load_conditioning(cond)?;
    if ablate {
        cond = cond.ablated();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        let g = sample_scene(&model, &cond, &cfg.sample, &mut rng)?;
        let file = SceneFile {
            scene: g.scene,
            truncated: g.truncated,
            log_likelihoods: g.log_likelihoods,
            seed: Some(seed),
            config_hash: Some(hash.clone()),
        };
        write_document(&out.join(format!("scene_{i:04}.json")), &file)?;
    }
    println!("wrote {count} scenes to {}", out.display());
    Ok(())
}

fn load_humans(path: &Path) -> Result<(HumansFile, Option<BinaryMask>)> {
    let text = read_text(path)?;
    let kind = peek_kind(&text).with_context(|| path.display().to_string())?;
    Ok(match kind.as_str() {
        "humans" => (formats::from_json(&text)?, None),
        "training_sample" => {
            let s: TrainingSample = formats::from_json(&text)?;
            (HumansFile { contacts: s.contacts, free: s.free_humans }, Some(s.free_mask))
        }
        "conditioning" => {
            let c: Conditioning = formats::from_json(&text)?;
            (HumansFile { contacts: c.contacts, free: Default::default() }, Some(c.free_mask))
        }
        other => return Err(invalid(format!("{}: expected a humans document, found {other}", path.display()))),
    })
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(|| "scene.json".into(), |s| s.to_string_lossy().into_owned())
}

fn refine_cmd(cfg: &ProjectConfig, humans: &Path, out: &Path, scenes: &[PathBuf]) -> Result<()> {
    let (h, _) = load_humans(humans)?;
    for p in scenes {
        let mut file: SceneFile = read_document(p).with_context(|| format!("reading {}", p.display()))?;
        let r = refine_scene(&file.scene, &h.contacts, &h.free, &cfg.refine)?;
        println!("{}: loss {:.4e} -> {:.4e}", p.display(), r.initial_loss, r.final_loss);
        file.scene = r.scene;
        let name = file_name(p);
        write_document(&out.join(&name), &file)?;
        let trace = RefineTrace { scene: name.clone(), records: r.trace, halvings: r.halvings };
        write_document(&out.join(name.replace(".json", ".trace.json")), &trace)?;
    }
    Ok(())
}

fn load_scene(path: &Path) -> Result<(SceneLayout, Option<Vec<f64>>)> {
    let text = read_text(path)?;
    let kind = peek_kind(&text).with_context(|| path.display().to_string())?;
    Ok(match kind.as_str() {
        "scene" => {
            let f: SceneFile = formats::from_json(&text)?;
            let ll = (!f.log_likelihoods.is_empty()).then_some(f.log_likelihoods);
            (f.scene, ll)
        }
        "training_sample" => (formats::from_json::<TrainingSample>(&text)?.scene, None),
        other => return Err(invalid(format!("{}: expected a scene document, found {other}", path.display()))),
    })
}

fn eval_cmd(cfg: &ProjectConfig, conds: &[PathBuf], refs: &[PathBuf], scenes: &[PathBuf], out: Option<&Path>) -> Result<()> {
    if conds.len() != 1 && conds.len() != scenes.len() {
        bail!(invalid("pass one conditioning for all scenes or one per scene"));
    }
    let conditionings = conds.iter().map(|p| load_conditioning(p)).collect::<Result<Vec<_>>>()?;
    let generated = scenes.iter().map(|p| load_scene(p)).collect::<Result<Vec<_>>>()?;
    let references = refs.iter().map(|p| load_scene(p).map(|s| s.0)).collect::<Result<Vec<_>>>()?;
    let items: Vec<EvalItem> = generated
        .iter()
        .enumerate()
        .map(|(i, (scene, ll))| {
            let (c, sample) = &conditionings[if conditionings.len() == 1 { 0 } else { i }];
            EvalItem {
                scene,
                confidences: ll.as_deref(),
                free_mask: &c.free_mask,
                contacts: &c.contacts,
                reference: sample.as_ref().map(|s| &s.scene),
            }
        })
        .collect();
    let mut report = evaluate(&items, &references)?;
    report.config_hash = Some(cfg.hash());
    print!("{}", report.to_table());
    if let Some(out) = out {
        write_document(out, &report)?;
    }
    Ok(())
}

fn render_cmd(scene: &Path, humans: Option<&Path>, out: &Path) -> Result<()> {
    let (scene, _) = load_scene(scene)?;
    let (humans, mask) = match humans {
        Some(p) => {
            let (h, m) = load_humans(p)?;
            (Some(h), m)
        }
        None => (None, None),
    };
    let svg = render_svg(&scene, mask.as_ref(), humans.as_ref(), &RenderOptions::default());
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(out, svg).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}
