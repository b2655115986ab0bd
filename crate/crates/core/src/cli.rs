//! `nebla` command-line interface.
//!
//! Every command writes `manifest.json` next to its outputs: the command
//! line, the resolved-config digest, SHA-256 of every input and output
//! file, and crate and format versions.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{hex_digest, Preset, RunConfig};
use crate::error::{Error, Result};
use crate::geometry::{validate_no_intersection, RayBundle};
use crate::metrics::{psnr_volume, ssim_volume, CaseMetrics, MetricReport};
use crate::model::Model;
use crate::optim::{
    reconstruct, split_811, Checkpoint, Pair, Trainer, CHECKPOINT_VERSION, METRICS_CSV_HEADER,
};
use crate::projector::{default_mu_scale, mip, render_px, Image2D, Plane};
use crate::volume::{export_pgm_slices, load_volume, make_phantom, preprocess, save_volume, PhantomSpec, Volume};

#[derive(Parser, Debug)]
#[command(name = "nebla", version, about = "Single-view panoramic X-ray to 3D volume reconstruction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate procedural jaw phantoms.
    Phantom(PhantomArgs),
    /// Render a panoramic X-ray and the three MIPs of a volume.
    RenderPx(RenderArgs),
    /// Train on a directory of volumes.
    Train(TrainArgs),
    /// Reconstruct coarse and refined volumes from one PX image.
    Reconstruct(ReconstructArgs),
    /// PSNR / SSIM over the test split of a data directory.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Spatial dims `H,W,D`; defaults to the preset's volume.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub dims: Option<Vec<usize>>,
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: Preset,
    /// Number of phantoms, seeds `seed..seed+count`; more than one writes
    /// `phantom-NNNN.vol` files into `--out`.
    #[arg(long, default_value_t = 1)]
    pub count: u64,
    #[arg(long, env = "NEBLA_OUT")]
    pub out: PathBuf,
    /// Also write one PGM per axial slice into this directory.
    #[arg(long)]
    pub export_pgm: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub vol: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "NEBLA_OUT")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "NEBLA_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    #[arg(long, env = "NEBLA_OUT")]
    pub out: PathBuf,
    /// Validate the config, print parameter counts and exit.
    #[arg(long)]
    pub dry_run: bool,
    /// Continue from a checkpoint written by a previous run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub px: PathBuf,
    #[arg(long, env = "NEBLA_OUT")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, env = "NEBLA_DATA_DIR")]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Score every pair instead of the test split.
    #[arg(long)]
    pub all: bool,
    /// Write `metrics.csv`, `report.md` and a manifest here.
    #[arg(long, env = "NEBLA_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct FileHash {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    crate_version: &'static str,
    volume_format: &'static str,
    checkpoint_version: u32,
    config_sha256: Option<String>,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
}

fn file_hash(path: &Path) -> Result<FileHash> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(FileHash {
        path: path.display().to_string(),
        sha256: hex_digest(&bytes),
    })
}

fn write_manifest(dir: &Path, command: &str, cfg: Option<&RunConfig>, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<()> {
    let manifest = Manifest {
        command: command.to_string(),
        crate_version: env!("CARGO_PKG_VERSION"),
        volume_format: "VNBLAVOL1",
        checkpoint_version: CHECKPOINT_VERSION,
        config_sha256: cfg.map(|c| c.digest()).transpose()?,
        inputs: inputs.iter().map(|p| file_hash(p)).collect::<Result<_>>()?,
        outputs: outputs.iter().map(|p| file_hash(p)).collect::<Result<_>>()?,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(&path, e.to_string()))?;
    write_text(&path, &text)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::preset(Preset::Desk)),
    }
}

fn mu_scale(cfg: &RunConfig, bundle: &RayBundle) -> f64 {
    if cfg.render.mu_scale > 0.0 {
        cfg.render.mu_scale
    } else {
        default_mu_scale(bundle)
    }
}

fn save_mips(vol: &Volume, dir: &Path, stem: &str, outputs: &mut Vec<PathBuf>) -> Result<()> {
    for plane in Plane::ALL {
        let path = dir.join(format!("{stem}_mip_{plane}.pgm"));
        mip(vol, plane).save_pgm(&path)?;
        outputs.push(path);
    }
    Ok(())
}

/// Volumes (`*.vol`) of a data directory in name order.
pub fn list_volumes(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e == "vol") {
            paths.push(p);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Degenerate(format!("no .vol files in {}", dir.display())));
    }
    Ok(paths)
}

/// Loads each volume and renders its PX with the config's geometry.
pub fn load_pairs(paths: &[PathBuf], cfg: &RunConfig) -> Result<Vec<Pair>> {
    let bundle = RayBundle::build(&cfg.model.trajectory)?;
    let mu = mu_scale(cfg, &bundle);
    paths
        .iter()
        .map(|p| {
            let mut volume = load_volume(p)?;
            if volume.dims() != cfg.model.volume {
                return Err(Error::ShapeMismatch {
                    op: "dataset volume",
                    lhs: volume.dims().to_vec(),
                    rhs: cfg.model.volume.to_vec(),
                });
            }
            if cfg.data.preprocess {
                volume = preprocess(&volume, &cfg.data.preprocess_options)?;
            }
            let px = render_px(&volume, &bundle, mu)?;
            let name = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
            Ok(Pair { name, px, volume })
        })
        .collect()
}

/// Scores `predict` against every pair.
pub fn evaluate_pairs(pairs: &[Pair], mut predict: impl FnMut(&Pair) -> Result<Volume>) -> Result<MetricReport> {
    let mut cases = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let pred = predict(pair)?;
        cases.push(CaseMetrics {
            case: pair.name.clone(),
            psnr_db: psnr_volume(&pred, &pair.volume)?,
            ssim: ssim_volume(&pred, &pair.volume)?,
        });
    }
    MetricReport::new(cases)
}

fn cmd_phantom(a: &PhantomArgs, line: &str) -> Result<()> {
    let mut model = a.preset.model();
    if let Some(d) = &a.dims {
        model.volume = [1, d[0], d[1], d[2]];
    }
    model.unet.check_dims([model.volume[1], model.volume[2], model.volume[3]])?;
    if a.count == 0 {
        return Err(Error::Config("--count must be >= 1".into()));
    }
    let dir = if a.count == 1 {
        a.out.parent().map(Path::to_path_buf).unwrap_or_default()
    } else {
        a.out.clone()
    };
    if !dir.as_os_str().is_empty() {
        create_dir(&dir)?;
    }
    let mut outputs = Vec::new();
    for seed in a.seed..a.seed + a.count {
        let vol = make_phantom(&PhantomSpec::for_dims(model.volume, seed))?;
        let path = if a.count == 1 { a.out.clone() } else { a.out.join(format!("phantom-{seed:04}.vol")) };
        save_volume(&vol, &path)?;
        if let Some(pgm_dir) = &a.export_pgm {
            let stem = path.file_stem().map_or("phantom".into(), |s| s.to_string_lossy().into_owned());
            outputs.extend(export_pgm_slices(&vol, pgm_dir, &stem)?);
        }
        outputs.push(path);
    }
    let manifest_dir = if dir.as_os_str().is_empty() { PathBuf::from(".") } else { dir };
    write_manifest(&manifest_dir, line, None, &[], &outputs)?;
    println!("wrote {} phantom(s) to {}", a.count, manifest_dir.display());
    Ok(())
}

fn cmd_render(a: &RenderArgs, line: &str) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let vol = load_volume(&a.vol)?;
    if vol.dims() != cfg.model.volume {
        return Err(Error::ShapeMismatch {
            op: "render-px",
            lhs: vol.dims().to_vec(),
            rhs: cfg.model.volume.to_vec(),
        });
    }
    let report = validate_no_intersection(&cfg.model.trajectory)?;
    if !report.pass {
        let (a_ray, b_ray, pt) = report.offending.unwrap_or_default();
        return Err(Error::Config(format!(
            "focal segments of rays {a_ray} and {b_ray} meet at ({:.3}, {:.3}) after {} pair checks",
            pt[0], pt[1], report.pairs_checked
        )));
    }
    create_dir(&a.out)?;
    let bundle = RayBundle::build(&cfg.model.trajectory)?;
    let px = render_px(&vol, &bundle, mu_scale(&cfg, &bundle))?;
    let px_path = a.out.join("px.pgm");
    px.save_pgm(&px_path)?;
    let mut outputs = vec![px_path];
    save_mips(&vol, &a.out, "gt", &mut outputs)?;
    let mut inputs = vec![a.vol.clone()];
    inputs.extend(a.config.clone());
    write_manifest(&a.out, line, Some(&cfg), &inputs, &outputs)?;
    println!(
        "rendered {}x{} PX ({} valid rays, {} segment pairs checked) into {}",
        px.dims()[0],
        px.dims()[1],
        bundle.valid_count(),
        report.pairs_checked,
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs, line: &str) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let trainer = match &a.resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            if ckpt.model != cfg.model {
                return Err(Error::Config(format!("{} was trained with a different model config", p.display())));
            }
            Trainer::from_checkpoint(&ckpt, &cfg.train)?
        }
        None => Trainer::new(&cfg.model, &cfg.train)?,
    };
    if a.dry_run {
        let mut groups: Vec<(String, usize)> = Vec::new();
        for (_, name, t) in trainer.store.iter() {
            let group = name.split(['.', '/']).next().unwrap_or(name).to_string();
            match groups.iter_mut().find(|(g, _)| *g == group) {
                Some((_, n)) => *n += t.len(),
                None => groups.push((group, t.len())),
            }
        }
        println!("config ok: preset {}, volume {:?}, image {:?}", cfg.preset, cfg.model.volume, cfg.model.image());
        for (g, n) in &groups {
            println!("  {g:<16} {n:>12}");
        }
        println!("  {:<16} {:>12}", "total", trainer.store.numel());
        return Ok(());
    }
    let data_dir = a
        .data_dir
        .as_ref()
        .ok_or_else(|| Error::Config("--data-dir (or NEBLA_DATA_DIR) is required".into()))?;
    let paths = list_volumes(data_dir)?;
    let (train_p, val_p, test_p) = split_811(&paths);
    let train = load_pairs(&train_p, &cfg)?;
    let val = load_pairs(&val_p, &cfg)?;

    create_dir(&a.out)?;
    let cfg_path = a.out.join("config.toml");
    write_text(&cfg_path, &cfg.to_toml()?)?;
    let names = |ps: &[PathBuf]| ps.iter().map(|p| p.display().to_string()).collect::<Vec<_>>();
    let split = serde_json::json!({ "train": names(&train_p), "val": names(&val_p), "test": names(&test_p) });
    let split_path = a.out.join("split.json");
    write_text(&split_path, &serde_json::to_string_pretty(&split).unwrap_or_default())?;

    let csv_path = a.out.join("metrics.csv");
    let mut csv = if a.resume.is_some() && csv_path.exists() {
        fs::OpenOptions::new().append(true).open(&csv_path)
    } else {
        fs::File::create(&csv_path).and_then(|mut f| writeln!(f, "{METRICS_CSV_HEADER}").map(|_| f))
    }
    .map_err(|e| Error::io(&csv_path, e))?;
    let last = a.out.join("last.ckpt");
    let best = a.out.join("best.ckpt");
    let mut trainer = trainer;
    let mut io_err = None;
    let outcome = trainer.train(&train, &val, |log, t| {
        let res = writeln!(csv, "{}", log.csv_row())
            .map_err(|e| Error::io(&csv_path, e))
            .and_then(|_| t.checkpoint().save(&last))
            .and_then(|_| t.best_checkpoint().save(&best));
        if let Err(e) = res {
            io_err.get_or_insert(e);
        }
        println!(
            "epoch {:>4}  L_total {:.6e}  monitor {:.6e}  lr {:.2e}",
            log.epoch, log.train.total, log.monitor, log.lr
        );
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    drop(csv);
    if outcome.history.is_empty() {
        trainer.checkpoint().save(&last)?;
        trainer.best_checkpoint().save(&best)?;
    }
    let mut inputs = paths.clone();
    inputs.extend(a.config.clone());
    inputs.extend(a.resume.clone());
    write_manifest(&a.out, line, Some(&cfg), &inputs, &[cfg_path, split_path, csv_path, last, best])?;
    println!(
        "{} epochs{}; best monitored loss {:.6e}",
        trainer.epoch,
        if outcome.stopped_early { " (early stop)" } else { "" },
        outcome.best_monitor
    );
    Ok(())
}

fn load_model(ckpt: &Checkpoint) -> Result<Model> {
    let mut store = crate::autodiff::ParamStore::<f32>::new();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let model = Model::new(&mut store, &ckpt.model, &mut rng)?;
    ckpt.restore_into(&mut store)?;
    Ok(model)
}

fn cmd_reconstruct(a: &ReconstructArgs, line: &str) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let model = load_model(&ckpt)?;
    let px = Image2D::load_pgm(&a.px)?;
    let (coarse, refined) = reconstruct(&model, &ckpt.params, &px)?;
    create_dir(&a.out)?;
    let mut outputs = Vec::new();
    for (stem, vol) in [("coarse", &coarse), ("refined", &refined)] {
        let path = a.out.join(format!("{stem}.vol"));
        save_volume(vol, &path)?;
        outputs.push(path);
        save_mips(vol, &a.out, stem, &mut outputs)?;
    }
    write_manifest(&a.out, line, None, &[a.ckpt.clone(), a.px.clone()], &outputs)?;
    println!("wrote coarse and refined volumes to {}", a.out.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs, line: &str) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let mut cfg = load_config(a.config.as_deref())?;
    cfg.model = ckpt.model.clone();
    let model = load_model(&ckpt)?;
    let paths = list_volumes(&a.data_dir)?;
    let chosen = if a.all { paths.clone() } else { split_811(&paths).2 };
    if chosen.is_empty() {
        return Err(Error::Degenerate(format!(
            "test split of {} volumes is empty (pass --all to score every volume)",
            paths.len()
        )));
    }
    let pairs = load_pairs(&chosen, &cfg)?;
    let report = evaluate_pairs(&pairs, |p| Ok(reconstruct(&model, &ckpt.params, &p.px)?.1))?;
    print!("{}", report.table());
    if let Some(out) = &a.out {
        create_dir(out)?;
        let csv = out.join("metrics.csv");
        let md = out.join("report.md");
        write_text(&csv, &report.to_csv())?;
        write_text(&md, &report.table())?;
        let mut inputs = vec![a.ckpt.clone()];
        inputs.extend(chosen);
        inputs.extend(a.config.clone());
        write_manifest(out, line, Some(&cfg), &inputs, &[csv, md])?;
    }
    Ok(())
}

/// Runs a parsed command line; `line` is recorded in manifests.
pub fn run(cli: &Cli, line: &str) -> Result<()> {
    match &cli.command {
        Command::Phantom(a) => cmd_phantom(a, line),
        Command::RenderPx(a) => cmd_render(a, line),
        Command::Train(a) => cmd_train(a, line),
        Command::Reconstruct(a) => cmd_reconstruct(a, line),
        Command::Eval(a) => cmd_eval(a, line),
    }
}

/// Entry point of the `nebla` binary; returns the process exit code.
pub fn main_with_args(args: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli, &args.join(" ")) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
