//! Command-line driver. Every subcommand resolves its configuration (built-in
//! defaults, then `--config`, then flags), logs it, and runs one pipeline step.
//!
//! Exit codes: 0 success, 2 bad flags or invalid configuration, 3 I/O or
//! malformed input, 4 training divergence, 5 grid or patch-size mismatch.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::evaluation::{crossval_with, dice, make_folds, summary_table, ClassSet, NetworkMethod, PbsMethod};
use crate::inference::{segment_batched, SegmentationSidecar, DEFAULT_BLOCK};
use crate::network::{load_checkpoint, save_checkpoint};
use crate::patching::{build_roi_mask, build_training_pool, PoolOptions, RoiMask};
use crate::pbs::{pbs_segment, select_atlases, Bandwidth, PbsConfig};
use crate::phantom::{generate_corpus, read_corpus, write_corpus, PhantomSpec, Subject};
use crate::training::{train_with, write_train_log, TrainConfig, TrainHooks};
use crate::volume::{load_volume, save_volume};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;
pub const EXIT_DIMS: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "patchseg", version, about = "Patch-based segmentation of 3D volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic phantom corpus with known labels.
    Phantom(PhantomArgs),
    /// Build an ROI mask from atlas label volumes.
    Mask(MaskArgs),
    /// Train a network on corpus atlases.
    Train(TrainArgs),
    /// Segment an image with a trained checkpoint.
    Segment(SegmentArgs),
    /// Segment an image by SSD patch label fusion over corpus atlases.
    Pbs(PbsArgs),
    /// Dice overlap of two label volumes, as JSON on stdout.
    Dice(DiceArgs),
    /// Cross-validate the network or the fusion baseline on a corpus.
    Crossval(CrossvalArgs),
}

#[derive(Debug, Args)]
struct PhantomArgs {
    /// Number of subjects.
    #[arg(long, default_value_t = 10)]
    n: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Generator seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Phantom specification JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Additive Gaussian noise sd [default: 10].
    #[arg(long)]
    noise: Option<f32>,
    /// Maximum per-axis centre displacement in voxels [default: 2].
    #[arg(long)]
    jitter: Option<f64>,
}

#[derive(Debug, Args)]
struct AtlasSource {
    /// Corpus directory containing corpus.json.
    #[arg(long)]
    corpus: PathBuf,
    /// Comma-separated subject ids to use [default: all].
    #[arg(long, value_delimiter = ',')]
    ids: Option<Vec<usize>>,
}

impl AtlasSource {
    fn load(&self) -> Result<Vec<Subject>> {
        select(read_corpus(&self.corpus)?, self.ids.as_deref())
    }
}

fn select(corpus: Vec<Subject>, ids: Option<&[usize]>) -> Result<Vec<Subject>> {
    let Some(ids) = ids else { return Ok(corpus) };
    for id in ids {
        if !corpus.iter().any(|s| s.id == *id) {
            return Err(Error::InvalidConfig(format!("subject {id} not in corpus")));
        }
    }
    Ok(corpus.into_iter().filter(|s| ids.contains(&s.id)).collect())
}

#[derive(Debug, Args)]
struct MaskArgs {
    #[command(flatten)]
    source: AtlasSource,
    /// Chebyshev dilation radius in voxels.
    #[arg(long, default_value_t = 3)]
    radius: usize,
    /// Output mask volume.
    #[arg(long)]
    out: PathBuf,
}

/// Training flags shared by `train` and `crossval`. Unset flags fall back to
/// the `--config` file, then to the built-in defaults.
#[derive(Debug, Args)]
struct TrainFlags {
    /// TrainConfig JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Learning rate [default: 1e-5].
    #[arg(long)]
    eta: Option<f64>,
    /// Mini-batch size, even [default: 200].
    #[arg(long)]
    batch: Option<usize>,
    /// SGD steps [default: 20000].
    #[arg(long)]
    steps: Option<u64>,
    /// Dropout rate [default: 0.5].
    #[arg(long)]
    dropout: Option<f64>,
    /// Momentum coefficient [default: 0].
    #[arg(long)]
    momentum: Option<f64>,
    /// Patch side, odd [default: 13].
    #[arg(long)]
    patch: Option<usize>,
    /// Network output classes [default: 2].
    #[arg(long)]
    classes: Option<usize>,
    /// ROI dilation radius [default: 3].
    #[arg(long)]
    radius: Option<usize>,
    /// Seed for initialisation, sampling and dropout [default: 0].
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainFlags {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => TrainConfig::from_json_file(p)?,
            None => TrainConfig::default(),
        };
        set(&mut c.learning_rate, self.eta);
        set(&mut c.batch_size, self.batch);
        set(&mut c.steps, self.steps);
        set(&mut c.dropout, self.dropout);
        set(&mut c.momentum, self.momentum);
        set(&mut c.patch_size, self.patch);
        set(&mut c.classes, self.classes);
        set(&mut c.mask_radius, self.radius);
        set(&mut c.seed, self.seed);
        c.validate()?;
        Ok(c)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    source: AtlasSource,
    #[command(flatten)]
    flags: TrainFlags,
    /// Save ckpt_{step}.pdnn every this many steps; 0 disables [default: 0].
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Score held-out Dice every this many steps; 0 disables [default: 0].
    #[arg(long)]
    eval_every: Option<u64>,
    /// Corpus subject scored at each evaluation.
    #[arg(long)]
    heldout: Option<usize>,
    /// Also write the training pool as pool.jsonl.
    #[arg(long)]
    pool_manifest: bool,
    /// Output directory: model.pdnn, mask.pseg, train_log.csv, config.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SegmentArgs {
    /// Network checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Target intensity volume.
    #[arg(long)]
    image: PathBuf,
    /// ROI mask volume on the target grid.
    #[arg(long)]
    mask: PathBuf,
    /// Output label volume; a .json sidecar is written beside it.
    #[arg(long)]
    out: PathBuf,
    /// Voxels classified per matrix product.
    #[arg(long, default_value_t = DEFAULT_BLOCK)]
    block: usize,
}

#[derive(Debug, Args)]
struct PbsFlags {
    /// PbsConfig JSON.
    #[arg(long)]
    pbs_config: Option<PathBuf>,
    /// Cubic patch side [default: 5].
    #[arg(long)]
    pbs_patch: Option<usize>,
    /// Cubic search window side [default: 11].
    #[arg(long)]
    window: Option<usize>,
    /// Atlases kept after SSD ranking [default: 10].
    #[arg(long)]
    atlases: Option<usize>,
    /// Fixed bandwidth h; adaptive (min SSD + 1e-6) when unset.
    #[arg(long)]
    bandwidth: Option<f64>,
}

impl PbsFlags {
    fn resolve(&self) -> Result<PbsConfig> {
        let mut c = match &self.pbs_config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text)?
            }
            None => PbsConfig::default(),
        };
        set(&mut c.patch_side, self.pbs_patch);
        set(&mut c.window_side, self.window);
        set(&mut c.atlases, self.atlases);
        if let Some(h) = self.bandwidth {
            c.bandwidth = Bandwidth::Fixed { h };
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
struct PbsArgs {
    #[command(flatten)]
    source: AtlasSource,
    #[command(flatten)]
    flags: PbsFlags,
    /// Target intensity volume.
    #[arg(long)]
    image: PathBuf,
    /// ROI mask volume on the target grid.
    #[arg(long)]
    mask: PathBuf,
    /// Output label volume; a .json sidecar is written beside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DiceArgs {
    /// First label volume.
    #[arg(long)]
    a: PathBuf,
    /// Second label volume.
    #[arg(long)]
    b: PathBuf,
    /// Comma-separated classes to score together [default: every label > 0].
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<u16>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum MethodName {
    Patchdnn,
    Pbs,
}

#[derive(Debug, Args)]
struct CrossvalArgs {
    #[command(flatten)]
    source: AtlasSource,
    #[command(flatten)]
    flags: TrainFlags,
    #[command(flatten)]
    pbs: PbsFlags,
    /// Number of folds.
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Method under evaluation.
    #[arg(long, value_enum, default_value_t = MethodName::Patchdnn)]
    method: MethodName,
    /// Directory for report.json, report.csv and summary.txt; JSON goes to stdout when unset.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code. Failures print one `error category=<c>: <message>` line.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error category={}: {}", e.category(), one_line(&e.to_string()));
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e.category() {
        "io" | "format" => EXIT_IO,
        "divergence" => EXIT_DIVERGENCE,
        "dims" => EXIT_DIMS,
        _ => EXIT_USAGE,
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Sizes the rayon pool from `PATCHSEG_THREADS` when set. Only the first call
/// in a process takes effect.
pub fn configure_threads() {
    let Some(n) = std::env::var("PATCHSEG_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) else {
        return;
    };
    if n > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn echo<T: Serialize>(command: &str, config: &T) -> Result<()> {
    log::info!("{command} config {}", serde_json::to_string(config)?);
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn sidecar_path(out: &Path) -> PathBuf {
    out.with_extension("json")
}

fn load_mask(path: &Path) -> Result<RoiMask> {
    Ok(RoiMask::from_volume(&load_volume(path)?))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Phantom(a) => phantom(a),
        Command::Mask(a) => mask(a),
        Command::Train(a) => train(a),
        Command::Segment(a) => segment(a),
        Command::Pbs(a) => pbs(a),
        Command::Dice(a) => dice_cmd(a),
        Command::Crossval(a) => crossval(a),
    }
}

fn phantom(a: PhantomArgs) -> Result<()> {
    let mut spec = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text)?
        }
        None => PhantomSpec::default(),
    };
    set(&mut spec.seed, a.seed);
    set(&mut spec.noise, a.noise);
    set(&mut spec.jitter, a.jitter);
    spec.validate()?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        n: usize,
        out: &'a Path,
        spec: &'a PhantomSpec,
    }
    echo("phantom", &Resolved { n: a.n, out: &a.out, spec: &spec })?;
    let subjects = generate_corpus(&spec, a.n)?;
    create_dir(&a.out)?;
    write_corpus(&a.out, Some(&spec), &subjects)
}

fn mask(a: MaskArgs) -> Result<()> {
    #[derive(Serialize)]
    struct Resolved<'a> {
        corpus: &'a Path,
        ids: &'a Option<Vec<usize>>,
        radius: usize,
        out: &'a Path,
    }
    echo(
        "mask",
        &Resolved {
            corpus: &a.source.corpus,
            ids: &a.source.ids,
            radius: a.radius,
            out: &a.out,
        },
    )?;
    let corpus = a.source.load()?;
    let labels: Vec<_> = corpus.iter().map(|s| &s.labels).collect();
    let m = build_roi_mask(&labels, a.radius)?;
    log::info!("mask: {} voxels", m.count());
    save_volume(&m.to_volume(), &a.out)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut config = a.flags.resolve()?;
    set(&mut config.checkpoint_interval, a.checkpoint_every);
    set(&mut config.eval_interval, a.eval_every);
    config.validate()?;
    echo("train", &config)?;

    let all = read_corpus(&a.source.corpus)?;
    let heldout = match a.heldout {
        Some(id) => Some(
            all.iter()
                .find(|s| s.id == id)
                .cloned()
                .ok_or_else(|| Error::InvalidConfig(format!("held-out subject {id} not in corpus")))?,
        ),
        None => None,
    };
    let atlases: Vec<Subject> = select(all, a.source.ids.as_deref())?
        .into_iter()
        .filter(|s| Some(s.id) != a.heldout)
        .collect();
    if atlases.is_empty() {
        return Err(Error::Empty("training atlases"));
    }
    let images: Vec<_> = atlases.iter().map(|s| &s.image).collect();
    let labels: Vec<_> = atlases.iter().map(|s| &s.labels).collect();
    let mask = build_roi_mask(&labels, config.mask_radius)?;
    let options = PoolOptions {
        normalization: config.normalization,
        classes: config.classes as u32,
    };
    let pool = build_training_pool(&images, &labels, &mask, config.patch_size, &options)?;
    log::info!(
        "train: {} atlases, pool {} ({} foreground, {} background)",
        atlases.len(),
        pool.len(),
        pool.foreground_len(),
        pool.background_len()
    );

    create_dir(&a.out)?;
    save_volume(&mask.to_volume(), a.out.join("mask.pseg"))?;
    write_json(&a.out.join("config.json"), &config)?;
    if a.pool_manifest {
        let path = a.out.join("pool.jsonl");
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        pool.write_manifest(std::io::BufWriter::new(file))?;
    }
    let eval = |net: &crate::network::PatchDnn<f32>| -> Result<f64> {
        let s = heldout.as_ref().expect("held-out subject");
        let r = segment_batched(net, &s.image, &mask, DEFAULT_BLOCK)?;
        dice(&r.labels, &s.labels, &ClassSet::Foreground)
    };
    let progress = |r: &crate::training::TrainLogRecord| {
        if r.step % 100 == 0 {
            log::info!("step {} loss {:.5}", r.step, r.loss);
        }
        if let Some(d) = r.heldout_dice {
            log::info!("step {} held-out dice {d:.4}", r.step);
        }
    };
    let hooks = TrainHooks {
        checkpoint_dir: Some(a.out.clone()),
        heldout: heldout.as_ref().map(|_| &eval as &dyn Fn(&crate::network::PatchDnn<f32>) -> Result<f64>),
        on_step: Some(&progress),
    };
    let outcome = train_with(&pool, &config, &hooks)?;
    write_train_log(&outcome.log, a.out.join("train_log.csv"))?;
    save_checkpoint(&outcome.net, a.out.join("model.pdnn"))
}

fn segment(a: SegmentArgs) -> Result<()> {
    echo("segment", &serde_json::json!({
        "ckpt": a.ckpt, "image": a.image, "mask": a.mask, "out": a.out, "block": a.block,
    }))?;
    let io_started = Instant::now();
    let net = load_checkpoint(&a.ckpt)?;
    let image = load_volume(&a.image)?;
    let mask = load_mask(&a.mask)?;
    let mut io_seconds = io_started.elapsed().as_secs_f64();
    let r = segment_batched(&net, &image, &mask, a.block)?;
    log::info!("segment: {} voxels in {:.3}s", r.voxels_classified, r.seconds);
    let io_started = Instant::now();
    save_volume(&r.labels, &a.out)?;
    io_seconds += io_started.elapsed().as_secs_f64();
    let sidecar = SegmentationSidecar {
        voxels_classified: r.voxels_classified,
        seconds: r.seconds,
        io_seconds,
        checkpoint: a.ckpt.display().to_string(),
        checkpoint_step: net.step(),
        method: "patchdnn".into(),
    };
    write_json(&sidecar_path(&a.out), &sidecar)
}

fn pbs(a: PbsArgs) -> Result<()> {
    let config = a.flags.resolve()?;
    echo("pbs", &serde_json::json!({
        "corpus": a.source.corpus, "ids": a.source.ids, "image": a.image,
        "mask": a.mask, "out": a.out, "pbs": config,
    }))?;
    let io_started = Instant::now();
    let atlases = a.source.load()?;
    let image = load_volume(&a.image)?;
    let mask = load_mask(&a.mask)?;
    let mut io_seconds = io_started.elapsed().as_secs_f64();
    if atlases.is_empty() {
        return Err(Error::Empty("atlases"));
    }
    let started = Instant::now();
    let images: Vec<_> = atlases.iter().map(|s| &s.image).collect();
    let chosen = select_atlases(&image, &images, &mask, config.atlases.min(atlases.len()))?;
    let pairs: Vec<_> = chosen
        .iter()
        .map(|&(i, _)| (&atlases[i].image, &atlases[i].labels))
        .collect();
    let r = pbs_segment(&image, &pairs, &mask, &config)?;
    let seconds = started.elapsed().as_secs_f64();
    log::info!("pbs: {} voxels in {seconds:.3}s", r.voxels_classified);
    let io_started = Instant::now();
    save_volume(&r.labels, &a.out)?;
    io_seconds += io_started.elapsed().as_secs_f64();
    let sidecar = SegmentationSidecar {
        voxels_classified: r.voxels_classified,
        seconds,
        io_seconds,
        checkpoint: String::new(),
        checkpoint_step: 0,
        method: format!("pbs-{}", config.patch_side),
    };
    write_json(&sidecar_path(&a.out), &sidecar)
}

fn dice_cmd(a: DiceArgs) -> Result<()> {
    echo("dice", &serde_json::json!({ "a": a.a, "b": a.b, "classes": a.classes }))?;
    let va = load_volume(&a.a)?;
    let vb = load_volume(&a.b)?;
    let set = match &a.classes {
        Some(c) => ClassSet::Classes(c.clone()),
        None => ClassSet::Foreground,
    };
    let d = dice(&va, &vb, &set)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", serde_json::json!({ "dice": d })).map_err(|e| Error::io("<stdout>", e))
}

fn crossval(a: CrossvalArgs) -> Result<()> {
    let config = a.flags.resolve()?;
    let corpus = a.source.load()?;
    let ids: Vec<usize> = corpus.iter().map(|s| s.id).collect();
    let plan = make_folds(&ids, a.folds, config.seed)?;
    let report = match a.method {
        MethodName::Patchdnn => {
            echo("crossval", &serde_json::json!({
                "corpus": a.source.corpus, "ids": a.source.ids, "folds": a.folds,
                "method": a.method, "train": config,
            }))?;
            let mut method = NetworkMethod::new(config.clone());
            method.on_step = Some(Box::new(|fold, r| {
                if r.step % 1000 == 0 {
                    log::info!("fold {fold} step {} loss {:.5}", r.step, r.loss);
                }
            }));
            crossval_with(&corpus, &plan, config.mask_radius, &mut method)?
        }
        MethodName::Pbs => {
            let pbs_config = a.pbs.resolve()?;
            echo("crossval", &serde_json::json!({
                "corpus": a.source.corpus, "ids": a.source.ids, "folds": a.folds,
                "method": a.method, "seed": config.seed, "mask_radius": config.mask_radius,
                "pbs": pbs_config,
            }))?;
            let mut method = PbsMethod { config: pbs_config };
            crossval_with(&corpus, &plan, config.mask_radius, &mut method)?
        }
    };
    log::info!("crossval: median dice {:.4}", report.median());
    match &a.out {
        Some(dir) => {
            create_dir(dir)?;
            write_json(&dir.join("report.json"), &report)?;
            report.write_csv(dir.join("report.csv"))?;
            let table = summary_table(std::slice::from_ref(&report));
            std::fs::write(dir.join("summary.txt"), table).map_err(|e| Error::io(dir, e))
        }
        None => {
            let mut out = std::io::stdout().lock();
            writeln!(out, "{}", serde_json::to_string_pretty(&report)?).map_err(|e| Error::io("<stdout>", e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn clap_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn unknown_flag_is_a_usage_error() {
        assert_eq!(run(["patchseg", "dice", "--a", "x", "--b", "y", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["patchseg", "frobnicate"]), EXIT_USAGE);
    }

    #[test]
    fn help_exits_cleanly() {
        assert_eq!(run(["patchseg", "train", "--help"]), EXIT_OK);
    }

    #[test]
    fn flags_override_config_file_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"steps": 7, "batch_size": 10}"#).unwrap();
        let flags = TrainFlags {
            config: Some(path),
            eta: None,
            batch: Some(4),
            steps: None,
            dropout: None,
            momentum: None,
            patch: None,
            classes: None,
            radius: None,
            seed: None,
        };
        let c = flags.resolve().unwrap();
        assert_eq!(c.steps, 7);
        assert_eq!(c.batch_size, 4);
        assert_eq!(c.learning_rate, 1e-5);
        assert_eq!(c.patch_size, 13);
    }

    #[test]
    fn missing_input_is_an_io_error() {
        let code = run(["patchseg", "dice", "--a", "/nonexistent/a.pseg", "--b", "/nonexistent/b.pseg"]);
        assert_eq!(code, EXIT_IO);
    }
}
