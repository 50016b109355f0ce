//! Command-line front end. `run` parses arguments, executes one command and
//! returns the process exit code; failures print one line of the form
//! `error[<category>]: <message>` on stderr.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{error::ErrorKind, Args, Parser, Subcommand, ValueEnum};

use crate::config::FlatConfig;
use crate::gaussians::{read_ply, write_ply, GaussianCloud};
use crate::image_io::Image;
use crate::metrics::{distribution_stats, MetricReport};
use crate::pruner::{prune, Keep, PruneConfig, VolumeSpace};
use crate::rasterizer::{rasterize, Camera};
use crate::refiner::train::TRAIN_KEYS;
use crate::refiner::{refine, train, Model, TrainConfig, TrainScene, MODEL_KEYS};
use crate::synthscene::{generate, read_cameras, render_views, write_cameras, SceneSpec, Split, SPEC_KEYS};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING_FILE: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;

pub const SCENE_PLY: &str = "scene.ply";
pub const PRUNED_PLY: &str = "pruned.ply";
pub const CAMERAS_FILE: &str = "cameras.txt";
pub const TARGETS_DIR: &str = "targets";
pub const FLOAT_DUMP_EXT: &str = "spfd";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{}", .0.display())]
    MissingFile(PathBuf),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Failure(String),
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            Self::Usage(_) => "usage",
            Self::MissingFile(_) => "missing_file",
            Self::Config(_) => "config",
            Self::Failure(_) => "failure",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::MissingFile(_) => EXIT_MISSING_FILE,
            Self::Config(_) => EXIT_CONFIG,
            Self::Failure(_) => EXIT_FAILURE,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn fail(e: impl std::fmt::Display) -> CliError {
    CliError::Failure(e.to_string().replace('\n', " "))
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string().replace('\n', " "))
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingFile(path.to_path_buf()))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(fail)?;
    }
    fs::write(path, text).map_err(|e| fail(format!("{}: {e}", path.display())))
}

fn load_ply(path: &Path) -> Result<GaussianCloud> {
    require(path)?;
    read_ply(path).map_err(|e| fail(format!("{}: {e}", path.display())))
}

fn load_config(path: &Path) -> Result<FlatConfig> {
    require(path)?;
    FlatConfig::load(path).map_err(config_err)
}

#[derive(Debug, Parser)]
#[command(name = "splatrefine", version, about = "Prune and refine 3D Gaussian splat clouds")]
pub struct Cli {
    /// Seed for every random choice a command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene, its cameras and ground-truth renders.
    Synth(SynthArgs),
    /// Keep the highest-scoring Gaussians.
    Prune(PruneArgs),
    /// Render a cloud from every camera in a camera file.
    Render(RenderArgs),
    /// PSNR and SSIM of renders against targets.
    Eval(EvalArgs),
    /// Opacity and volume histograms of selected against rejected Gaussians.
    Stats(StatsArgs),
    /// Train a refiner on one or more synthesized scenes.
    Train(TrainArgs),
    /// Apply a trained refiner to a cloud.
    Refine(RefineArgs),
    /// Markdown table of pruned against refined evaluations.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scene config (`key = value`); defaults apply when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VolumeArg {
    Raw,
    Log,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0.3)]
    pub lambda_alpha: f64,
    #[arg(long, default_value_t = 0.5, conflicts_with = "keep_count")]
    pub keep_fraction: f64,
    #[arg(long)]
    pub keep_count: Option<usize>,
    #[arg(long, value_enum, default_value_t = VolumeArg::Raw)]
    pub volume_space: VolumeArg,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-Gaussian score CSV.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ViewSet {
    All,
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub cameras: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write lossless float dumps next to the PNGs.
    #[arg(long)]
    pub float_dump: bool,
    #[arg(long, value_enum, default_value_t = ViewSet::All)]
    pub views: ViewSet,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub renders: PathBuf,
    #[arg(long)]
    pub targets: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Prune report CSV or one index per line; when absent the default
    /// selection is recomputed with the flags below.
    #[arg(long)]
    pub selected: Option<PathBuf>,
    #[arg(long, default_value_t = 0.3)]
    pub lambda_alpha: f64,
    #[arg(long, default_value_t = 0.5)]
    pub keep_fraction: f64,
    /// Histogram CSV; the medians go to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directories written by `synth`.
    #[arg(long, num_args = 1.., required = true)]
    pub scenes: Vec<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Loss curve, one record per iteration.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// One sub-directory per run holding `pruned.txt` and `refined.txt`
    /// written by `eval`.
    #[arg(long)]
    pub runs: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parse `args` (program name first), execute, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return EXIT_USAGE;
        }
    };
    match execute(&cli) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            e.exit_code()
        }
    }
}

/// Execute a parsed command and return what it prints on success.
pub fn execute(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Synth(a) => synth(a, cli.seed),
        Command::Prune(a) => prune_cmd(a),
        Command::Render(a) => render(a),
        Command::Eval(a) => eval(a),
        Command::Stats(a) => stats(a),
        Command::Train(a) => train_cmd(a, cli.seed),
        Command::Refine(a) => refine_cmd(a),
        Command::Report(a) => report(a),
    }
}

fn view_name(i: usize) -> String {
    format!("view{i:03}")
}

fn write_images(dir: &Path, images: &[(usize, Image)], float_dump: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(fail)?;
    for (i, img) in images {
        let stem = dir.join(view_name(*i));
        img.write_png(&stem.with_extension("png")).map_err(fail)?;
        if float_dump {
            img.write_float_dump(&stem.with_extension(FLOAT_DUMP_EXT)).map_err(fail)?;
        }
    }
    Ok(())
}

fn synth(a: &SynthArgs, seed: Option<u64>) -> Result<String> {
    let mut spec = match &a.spec {
        Some(p) => {
            let cfg = load_config(p)?;
            cfg.check_known(SPEC_KEYS).map_err(config_err)?;
            SceneSpec::from_config(&cfg).map_err(config_err)?
        }
        None => SceneSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let scene = generate(&spec).map_err(fail)?;
    let targets = render_views(&scene.cloud, &scene.cameras).map_err(fail)?;
    fs::create_dir_all(&a.out).map_err(fail)?;
    write_ply(&scene.cloud, a.out.join(SCENE_PLY)).map_err(fail)?;
    write_cameras(&a.out.join(CAMERAS_FILE), &scene.cameras, &scene.split).map_err(fail)?;
    write_text(&a.out.join("spec.txt"), &spec.to_config_text())?;
    let indexed: Vec<(usize, Image)> = targets.into_iter().enumerate().collect();
    write_images(&a.out.join(TARGETS_DIR), &indexed, true)?;
    Ok(format!(
        "gaussians={}\ncameras={}\ntrain_views={}\ntest_views={}\n",
        scene.cloud.len(),
        scene.cameras.len(),
        scene.split.train.len(),
        scene.split.test.len()
    ))
}

fn prune_config(lambda_alpha: f64, keep_fraction: f64, keep_count: Option<usize>, vs: VolumeArg) -> PruneConfig {
    PruneConfig {
        lambda_alpha,
        keep: keep_count.map_or(Keep::Fraction(keep_fraction), Keep::Count),
        volume_space: match vs {
            VolumeArg::Raw => VolumeSpace::Raw,
            VolumeArg::Log => VolumeSpace::Log,
        },
    }
}

fn prune_cmd(a: &PruneArgs) -> Result<String> {
    let cloud = load_ply(&a.input)?;
    let cfg = prune_config(a.lambda_alpha, a.keep_fraction, a.keep_count, a.volume_space);
    cfg.validate().map_err(config_err)?;
    let (kept, rep) = prune(&cloud, &cfg).map_err(fail)?;
    write_ply(&kept, &a.out).map_err(fail)?;
    if let Some(r) = &a.report {
        write_text(r, &rep.to_csv(&cloud))?;
    }
    Ok(format!("input={}\nkept={}\nbytes={}\n{}", cloud.len(), kept.len(), kept.ply_size_bytes(), rep.to_kv_text()))
}

fn select_views(split: &Split, n: usize, set: ViewSet) -> Vec<usize> {
    match set {
        ViewSet::All => (0..n).collect(),
        ViewSet::Train => split.train.clone(),
        ViewSet::Test => split.test.clone(),
    }
}

fn render(a: &RenderArgs) -> Result<String> {
    let cloud = load_ply(&a.input)?;
    require(&a.cameras)?;
    let (cams, split) = read_cameras(&a.cameras).map_err(config_err)?;
    let views = select_views(&split, cams.len(), a.views);
    let chosen: Vec<Camera> = views.iter().map(|&i| cams[i].clone()).collect();
    let mut overdraw = 0.0;
    let mut images = Vec::with_capacity(views.len());
    for (&i, cam) in views.iter().zip(&chosen) {
        let r = rasterize(&cloud, cam).map_err(fail)?;
        overdraw += r.mean_overdraw();
        images.push((i, Image::from_render(&r)));
    }
    write_images(&a.out, &images, a.float_dump)?;
    Ok(format!(
        "views={}\nmean_overdraw={:.6}\n",
        images.len(),
        overdraw / images.len().max(1) as f64
    ))
}

/// Stems of the images in `dir`, sorted.
fn image_stems(dir: &Path) -> Result<Vec<String>> {
    require(dir)?;
    let mut stems: Vec<String> = fs::read_dir(dir)
        .map_err(fail)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png" || x == FLOAT_DUMP_EXT))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    stems.sort();
    stems.dedup();
    Ok(stems)
}

/// Float dump when both sides have one, PNG otherwise.
fn load_pair(a: &Path, b: &Path, stem: &str) -> Result<(Image, Image)> {
    let (fa, fb) = (a.join(stem).with_extension(FLOAT_DUMP_EXT), b.join(stem).with_extension(FLOAT_DUMP_EXT));
    if fa.exists() && fb.exists() {
        return Ok((Image::read_float_dump(&fa).map_err(fail)?, Image::read_float_dump(&fb).map_err(fail)?));
    }
    let (pa, pb) = (a.join(stem).with_extension("png"), b.join(stem).with_extension("png"));
    require(&pa)?;
    require(&pb)?;
    Ok((Image::read_png(&pa).map_err(fail)?, Image::read_png(&pb).map_err(fail)?))
}

fn eval(a: &EvalArgs) -> Result<String> {
    require(&a.targets)?;
    let stems = image_stems(&a.renders)?;
    if stems.is_empty() {
        return Err(fail(format!("no images in {}", a.renders.display())));
    }
    let mut pairs = Vec::with_capacity(stems.len());
    for s in &stems {
        pairs.push((s.clone(), load_pair(&a.renders, &a.targets, s)?));
    }
    let rep = MetricReport::from_pairs(pairs.iter().map(|(s, (r, t))| (s.clone(), r, t))).map_err(fail)?;
    let text = rep.to_kv_text();
    write_text(&a.report, &text)?;
    Ok(format!("psnr={:.6}\nssim={:.6}\n", rep.psnr, rep.ssim))
}

fn parse_selection(text: &str, n: usize) -> Result<Vec<usize>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let Some(first) = lines.next() else {
        return Ok(Vec::new());
    };
    let bad = |l: &str| config_err(format!("bad selection line `{l}`"));
    let mut out = Vec::new();
    if first.starts_with("index") {
        let cols: Vec<&str> = first.split(',').map(str::trim).collect();
        let sel = cols.iter().position(|c| *c == "selected").ok_or_else(|| bad(first))?;
        for l in lines {
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            if f.get(sel).ok_or_else(|| bad(l))? == &"1" {
                out.push(f[0].parse::<usize>().map_err(|_| bad(l))?);
            }
        }
    } else {
        for l in std::iter::once(first).chain(lines) {
            out.push(l.trim().parse::<usize>().map_err(|_| bad(l))?);
        }
    }
    if let Some(&i) = out.iter().find(|&&i| i >= n) {
        return Err(config_err(format!("selected index {i} out of range for {n} Gaussians")));
    }
    Ok(out)
}

fn stats(a: &StatsArgs) -> Result<String> {
    let cloud = load_ply(&a.input)?;
    let selected = match &a.selected {
        Some(p) => {
            require(p)?;
            parse_selection(&fs::read_to_string(p).map_err(fail)?, cloud.len())?
        }
        None => {
            let cfg = PruneConfig::with_fraction(a.lambda_alpha, a.keep_fraction);
            cfg.validate().map_err(config_err)?;
            prune(&cloud, &cfg).map_err(fail)?.1.selected
        }
    };
    let st = distribution_stats(&cloud, &selected).map_err(fail)?;
    if let Some(o) = &a.out {
        write_text(o, &st.to_csv())?;
    }
    Ok(st.to_kv_text())
}

/// Load a scene directory written by `synth`, pruning it unless it already
/// holds a pruned cloud.
fn load_train_scene(dir: &Path, prune_cfg: &PruneConfig) -> Result<TrainScene> {
    let cam_path = dir.join(CAMERAS_FILE);
    require(&cam_path)?;
    let (cameras, split) = read_cameras(&cam_path).map_err(config_err)?;
    let pruned_path = dir.join(PRUNED_PLY);
    let cloud = if pruned_path.exists() {
        load_ply(&pruned_path)?
    } else {
        prune(&load_ply(&dir.join(SCENE_PLY))?, prune_cfg).map_err(fail)?.0
    };
    let tdir = dir.join(TARGETS_DIR);
    let mut targets = Vec::with_capacity(cameras.len());
    for i in 0..cameras.len() {
        let stem = tdir.join(view_name(i));
        let fd = stem.with_extension(FLOAT_DUMP_EXT);
        let img = if fd.exists() {
            Image::read_float_dump(&fd)
        } else {
            let png = stem.with_extension("png");
            require(&png)?;
            Image::read_png(&png)
        };
        targets.push(img.map_err(fail)?);
    }
    Ok(TrainScene {
        cloud,
        cameras,
        targets,
        train_views: split.train,
    })
}

fn train_cmd(a: &TrainArgs, seed: Option<u64>) -> Result<String> {
    let cfg = match &a.config {
        Some(p) => load_config(p)?,
        None => FlatConfig::parse("").map_err(config_err)?,
    };
    let known: Vec<&str> = MODEL_KEYS
        .iter()
        .chain(TRAIN_KEYS)
        .copied()
        .chain(["prune.lambda_alpha", "prune.keep_fraction"])
        .collect();
    cfg.check_known(&known).map_err(config_err)?;
    let (enc, rf) = Model::configs_from_flat(&cfg, false).map_err(config_err)?;
    let mut tcfg = TrainConfig::from_flat(&cfg).map_err(config_err)?;
    if let Some(s) = seed {
        tcfg.seed = s;
    }
    let mut pcfg = PruneConfig::default();
    cfg.set("prune.lambda_alpha", &mut pcfg.lambda_alpha).map_err(config_err)?;
    let mut frac = 0.5;
    cfg.set("prune.keep_fraction", &mut frac).map_err(config_err)?;
    pcfg.keep = Keep::Fraction(frac);
    pcfg.validate().map_err(config_err)?;

    let scenes = a
        .scenes
        .iter()
        .map(|d| load_train_scene(d, &pcfg))
        .collect::<Result<Vec<_>>>()?;
    let mut model = Model::init(enc, rf, tcfg.seed).map_err(fail)?;
    let mut log = String::new();
    let records = train(&scenes, &mut model, &tcfg, |r| {
        let _ = writeln!(log, "{r}");
    })
    .map_err(fail)?;
    model.save(&a.checkpoint).map_err(fail)?;
    if let Some(p) = &a.log {
        write_text(p, &log)?;
    }
    let mut out = format!("iterations={}\nparameters={}\n", records.len(), model.params.count_scalars());
    if let (Some(f), Some(l)) = (records.first(), records.last()) {
        let _ = writeln!(out, "initial_loss={:.8}\nfinal_loss={:.8}", f.total, l.total);
    }
    Ok(out)
}

fn refine_cmd(a: &RefineArgs) -> Result<String> {
    let cloud = load_ply(&a.input)?;
    require(&a.checkpoint)?;
    let model = Model::load(&a.checkpoint).map_err(fail)?;
    let out = refine(&cloud, &model).map_err(fail)?;
    write_ply(&out, &a.out).map_err(fail)?;
    Ok(format!("gaussians={}\n", out.len()))
}

fn read_eval(path: &Path) -> Result<(f64, f64)> {
    require(path)?;
    let cfg = FlatConfig::parse(&fs::read_to_string(path).map_err(fail)?).map_err(config_err)?;
    let get = |k: &str| -> Result<f64> {
        cfg.get::<f64>(k)
            .map_err(config_err)?
            .ok_or_else(|| config_err(format!("{}: no `{k}`", path.display())))
    };
    Ok((get("psnr")?, get("ssim")?))
}

fn report(a: &ReportArgs) -> Result<String> {
    require(&a.runs)?;
    let mut runs: Vec<PathBuf> = fs::read_dir(&a.runs)
        .map_err(fail)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    runs.sort();
    if runs.is_empty() {
        return Err(fail(format!("no runs in {}", a.runs.display())));
    }
    let mut t = String::from("| Run | Method | PSNR | SSIM |\n|---|---|---|---|\n");
    let mut sums = [[0.0; 2]; 2];
    for r in &runs {
        let name = r.file_name().unwrap_or_default().to_string_lossy();
        for (m, (label, file)) in [("pruned", "pruned.txt"), ("pruned + refined", "refined.txt")].iter().enumerate() {
            let (p, s) = read_eval(&r.join(file))?;
            sums[m][0] += p;
            sums[m][1] += s;
            let _ = writeln!(t, "| {name} | {label} | {p:.2} | {s:.4} |");
        }
    }
    let n = runs.len() as f64;
    for (m, label) in ["pruned", "pruned + refined"].iter().enumerate() {
        let _ = writeln!(t, "| mean | {label} | {:.2} | {:.4} |", sums[m][0] / n, sums[m][1] / n);
    }
    if let Some(o) = &a.out {
        write_text(o, &t)?;
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_formats() {
        let csv = "index,score,opacity,log10_volume,selected\n0,1,0.5,-3,1\n1,0,0.5,-3,0\n2,2,0.5,-3,1\n";
        assert_eq!(parse_selection(csv, 3).unwrap(), vec![0, 2]);
        assert_eq!(parse_selection("4\n1\n", 5).unwrap(), vec![4, 1]);
        assert!(parse_selection("9\n", 5).is_err());
    }

    #[test]
    fn clap_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
