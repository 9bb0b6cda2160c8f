//! `cascade`: synthesize scenes, run multi-view or stereo cascades, fuse
//! depth maps and evaluate results.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cascade_core::cascade::{run_mvs, run_stereo, CascadeRun, View};
use cascade_core::error::{Error, ErrorKind};
use cascade_core::fusion::{filter_geometric, filter_photometric, fuse};
use cascade_core::io::{
    load_scene_spec, read_cam, read_depth_pfm, read_pfm, read_ply, read_pnm, read_scene_view, scene_paths, write_depth_pfm,
    write_pfm, write_ply, write_scene, PfmImage, RunConfig,
};
use cascade_core::metrics::{
    abs_errors, cloud_acc_comp, coverage_curve, map_scores, stage_table, write_cloud_scores_csv, write_coverage_csv,
    write_map_scores_csv, write_stage_table_csv, StageRow,
};
use cascade_core::regress::ground_truth_at;
use cascade_core::synth::render;
use cascade_core::{DepthMap, GrayImage, SweepMode};
use clap::{Args, Parser, Subcommand};
use log::info;

#[derive(Parser)]
#[command(name = "cascade", version, about = "Coarse-to-fine cost-volume depth and disparity estimation")]
struct Cli {
    /// Worker threads (default: available parallelism). Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a scene from a spec file into a directory.
    Synth(SynthArgs),
    /// Multi-view cascade for one reference view of a scene directory.
    Mvs(MvsArgs),
    /// Two-view rectified stereo cascade.
    Stereo(StereoArgs),
    /// Filter and fuse per-view depth maps into a point cloud.
    Fuse(FuseArgs),
    /// Compare a predicted map or cloud with ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Surface samples in surface.ply need this many other views to see them.
    #[arg(long, default_value_t = 2)]
    surface_min_views: u16,
    /// Pixel stride of the surface samples.
    #[arg(long, default_value_t = 2)]
    surface_stride: usize,
}

#[derive(Args)]
struct MvsArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    #[arg(long = "ref", default_value_t = 0)]
    reference: usize,
    /// Source view indices (default: every other view).
    #[arg(long, value_delimiter = ',')]
    src: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StereoArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    left: PathBuf,
    #[arg(long)]
    right: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Full-resolution ground-truth disparity.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Pixels set in this image are left out of the evaluation.
    #[arg(long, requires = "gt")]
    mask: Option<PathBuf>,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    scene: PathBuf,
    /// Directory with `<view>_depth.pfm` and `<view>_confidence.pfm` files.
    #[arg(long)]
    depths: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    ascii: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted `.pfm` map or `.ply` cloud.
    #[arg(long)]
    pred: PathBuf,
    /// Ground truth of the same kind.
    #[arg(long)]
    gt: PathBuf,
    /// Pixels set in this image are left out (maps only).
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Nearest-neighbor distance cap (clouds only).
    #[arg(long, default_value_t = 10.0)]
    cap: f64,
    /// Inlier thresholds of the coverage table (maps only).
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 1.0, 2.0, 4.0, 8.0])]
    thresholds: Vec<f64>,
    /// Scores CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Coverage table CSV (maps only).
    #[arg(long)]
    coverage: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Data => 2,
                ErrorKind::Numeric => 3,
            },
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Files and directories a command may create; removed again when it fails.
struct Outputs {
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
}

impl Outputs {
    fn new() -> Self {
        Self {
            files: Vec::new(),
            dirs: Vec::new(),
        }
    }

    fn dir(&mut self, dir: &Path) -> CliResult<()> {
        let mut missing = Vec::new();
        let mut d = Some(dir);
        while let Some(p) = d.filter(|p| !p.as_os_str().is_empty() && !p.exists()) {
            missing.push(p.to_path_buf());
            d = p.parent();
        }
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        self.dirs.extend(missing);
        Ok(())
    }

    fn file(&mut self, path: PathBuf) -> PathBuf {
        self.files.push(path.clone());
        path
    }

    fn remove(&self) {
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        // deepest first; only directories this command created
        for d in &self.dirs {
            let _ = fs::remove_dir_all(d);
        }
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| io_err(path, e))
}

fn csv<F>(path: &Path, write: F) -> CliResult<String>
where
    F: FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
{
    let mut buf = Vec::new();
    write(&mut buf).map_err(|e| io_err(path, e))?;
    let text = String::from_utf8(buf).expect("csv writers emit utf-8");
    write_text(path, &text)?;
    Ok(text)
}

fn write_confidence_pfm(path: &Path, map: &DepthMap) -> CliResult<()> {
    let data = (0..map.values().len())
        .map(|m| if map.is_valid(m) { map.confidence()[m] as f32 } else { 0.0 })
        .collect();
    Ok(write_pfm(
        path,
        &PfmImage {
            width: map.width(),
            height: map.height(),
            data,
        },
    )?)
}

fn read_map_with_confidence(depth: &Path, confidence: &Path) -> CliResult<DepthMap> {
    let map = read_depth_pfm(depth)?;
    if !confidence.exists() {
        return Ok(map);
    }
    let conf = read_pfm(confidence)?;
    if conf.width != map.width() || conf.height != map.height() {
        return Err(Error::Dimensions(format!("{} and {} differ in size", depth.display(), confidence.display())).into());
    }
    let c = conf.data.iter().map(|&v| (v as f64).clamp(0.0, 1.0)).collect();
    Ok(DepthMap::new(map.width(), map.height(), map.values().to_vec(), c, map.valid_mask().to_vec())?)
}

/// Ground truth with the pixels set in `mask` removed.
fn masked(gt: DepthMap, mask: Option<&Path>) -> CliResult<DepthMap> {
    let Some(path) = mask else { return Ok(gt) };
    let m = read_pnm(path)?;
    if m.width() != gt.width() || m.height() != gt.height() {
        return Err(Error::Dimensions(format!("mask {} does not match the ground truth size", path.display())).into());
    }
    let valid = gt.valid_mask().iter().zip(m.data()).map(|(&v, &o)| v && o < 0.5).collect();
    Ok(gt.with_mask(valid)?)
}

fn print_stage_table(rows: &[StageRow]) {
    let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    println!("stage  size       planes  interval  error     coverage  cells");
    for r in rows {
        println!(
            "{:<6} {:<10} {:<7} {:<9} {:<9} {:<9} {}",
            r.stage,
            format!("{}x{}", r.width, r.height),
            r.planes,
            format!("{:.4}", r.interval),
            f(r.error),
            f(r.coverage),
            r.cost_cells
        );
    }
}

fn write_stage_maps(out: &mut Outputs, dir: &Path, prefix: &str, run: &CascadeRun) -> CliResult<()> {
    for k in 0..run.stages().len() {
        let map = run.full_scale_map(k);
        write_depth_pfm(&out.file(dir.join(format!("{prefix}stage{}_{}.pfm", k + 1, value_name(run)))), &map)?;
        write_confidence_pfm(&out.file(dir.join(format!("{prefix}stage{}_confidence.pfm", k + 1))), &map)?;
    }
    Ok(())
}

fn value_name(run: &CascadeRun) -> &'static str {
    match run.schedule().mode() {
        SweepMode::Depth => "depth",
        SweepMode::Disparity => "disparity",
    }
}

fn synth(args: &SynthArgs, out: &mut Outputs) -> CliResult<()> {
    let spec = load_scene_spec(&args.spec)?;
    let scene = render(&spec)?;
    out.dir(&args.out)?;
    let paths = scene_paths(&args.out);
    for d in ["images", "cams", "depths", "occlusion"] {
        out.dir(&args.out.join(d))?;
    }
    for i in 0..scene.views.len() {
        for p in [paths.image(i), paths.cam(i), paths.depth(i), paths.occlusion(i)] {
            out.file(p);
        }
    }
    if scene.disparity.is_some() {
        out.file(paths.disparity());
    }
    write_scene(&args.out, &scene)?;
    if scene.views.len() > 1 {
        let surface = out.file(args.out.join("surface.ply"));
        write_ply(&scene.surface_samples(args.surface_min_views, args.surface_stride), &surface, true)?;
    }
    println!("wrote {} views to {}", scene.views.len(), args.out.display());
    Ok(())
}

fn mvs(args: &MvsArgs, out: &mut Outputs) -> CliResult<()> {
    let config = RunConfig::load(&args.config)?;
    if config.mode != SweepMode::Depth {
        return Err(CliError::Usage(format!("{} is not an mvs config", args.config.display())));
    }
    let paths = scene_paths(&args.scene);
    let count = paths.view_count();
    if args.reference >= count {
        return Err(Error::Scene(format!("reference view {} not found ({count} views in {})", args.reference, args.scene.display())).into());
    }
    let sources: Vec<usize> = if args.src.is_empty() {
        (0..count).filter(|&j| j != args.reference).collect()
    } else {
        args.src.clone()
    };
    if let Some(&bad) = sources.iter().find(|&&j| j >= count || j == args.reference) {
        return Err(Error::Scene(format!("source view {bad} is missing or is the reference")).into());
    }
    let reference = read_scene_view(&args.scene, args.reference)?;
    let source_views = sources
        .iter()
        .map(|&j| read_scene_view(&args.scene, j))
        .collect::<cascade_core::Result<Vec<View>>>()?;
    let schedule = config.schedule(reference.camera.depth_interval)?;
    let run = run_mvs(&reference, &source_views, &schedule, &config.options)?;
    info!("mvs view {} done in {:.0} ms", args.reference, run.stages().iter().map(|s| s.timings.total_ms()).sum::<f64>() + run.pyramid_ms());

    out.dir(&args.out)?;
    let prefix = format!("{:08}_", args.reference);
    write_stage_maps(out, &args.out, &prefix, &run)?;
    write_depth_pfm(&out.file(args.out.join(format!("{prefix}depth.pfm"))), run.final_map())?;
    write_confidence_pfm(&out.file(args.out.join(format!("{prefix}confidence.pfm"))), run.final_map())?;

    let gt_path = paths.depth(args.reference);
    if gt_path.exists() {
        let occ = paths.occlusion(args.reference);
        let gt = masked(read_depth_pfm(&gt_path)?, occ.exists().then_some(occ.as_path()))?;
        let rows = stage_table(&run, &gt)?;
        csv(&out.file(args.out.join(format!("{prefix}stage_table.csv"))), |b| write_stage_table_csv(&rows, b))?;
        print_stage_table(&rows);
        println!("weighted loss {:.4}", run.loss(&gt, &config.loss_weights)?.total);
    }
    Ok(())
}

fn stereo(args: &StereoArgs, out: &mut Outputs) -> CliResult<()> {
    let config = RunConfig::load(&args.config)?;
    if config.mode != SweepMode::Disparity {
        return Err(CliError::Usage(format!("{} is not a stereo config", args.config.display())));
    }
    let left = read_pnm(&args.left)?;
    let right = read_pnm(&args.right)?;
    let schedule = config.schedule(1.0)?;
    let run = run_stereo(&left, &right, &schedule, &config.options)?;
    out.dir(&args.out)?;
    write_stage_maps(out, &args.out, "", &run)?;
    if let Some(gt_path) = &args.gt {
        let gt = masked(read_depth_pfm(gt_path)?, args.mask.as_deref())?;
        let rows = stage_table(&run, &gt)?;
        csv(&out.file(args.out.join("stage_table.csv")), |b| write_stage_table_csv(&rows, b))?;
        print_stage_table(&rows);
        println!("weighted loss {:.4}", run.loss(&gt, &config.loss_weights)?.total);
        let last = run.full_scale_map(run.stages().len() - 1);
        let scores = map_scores(&last, &ground_truth_at(&gt, last.width(), last.height())?)?;
        csv(&out.file(args.out.join("metrics.csv")), |b| write_map_scores_csv(&scores, b))?;
    }
    Ok(())
}

fn fuse_cmd(args: &FuseArgs, out: &mut Outputs) -> CliResult<()> {
    let config = RunConfig::load(&args.config)?;
    let paths = scene_paths(&args.scene);
    let mut maps = Vec::new();
    let mut cams = Vec::new();
    let mut images: Vec<GrayImage> = Vec::new();
    for i in 0..paths.view_count() {
        let depth = args.depths.join(format!("{i:08}_depth.pfm"));
        if !depth.exists() {
            continue;
        }
        let map = read_map_with_confidence(&depth, &args.depths.join(format!("{i:08}_confidence.pfm")))?;
        let image = read_pnm(&paths.image(i))?;
        let cam = read_cam(&paths.cam(i))?;
        if map.width() == image.width() && map.height() == image.height() {
            cams.push(cam);
            images.push(image);
        } else {
            cams.push(cam.scaled(map.width() as f64 / image.width() as f64));
        }
        maps.push(map);
    }
    if maps.len() < 2 {
        return Err(Error::Scene(format!("need depth maps of at least two views in {}", args.depths.display())).into());
    }
    if images.len() != maps.len() {
        images.clear();
    }
    let params = config.fusion;
    let photometric: Vec<DepthMap> = maps.iter().map(|m| filter_photometric(m, params.photometric_threshold)).collect();
    let geometric = filter_geometric(&photometric, &cams, &params)?;
    let cloud = fuse(&geometric, &cams, &images, &params)?;
    let kept: usize = geometric.iter().map(|m| m.valid_count()).sum();
    let total: usize = maps.iter().map(|m| m.valid_count()).sum();
    if let Some(parent) = args.out.parent() {
        out.dir(parent)?;
    }
    write_ply(&cloud, &out.file(args.out.clone()), !args.ascii)?;
    println!("{} views, {kept} of {total} pixels consistent, {} points", maps.len(), cloud.len());
    Ok(())
}

fn has_extension(path: &Path, ext: &str) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

fn eval(args: &EvalArgs, out: &mut Outputs) -> CliResult<()> {
    if has_extension(&args.pred, "ply") && has_extension(&args.gt, "ply") {
        let scores = cloud_acc_comp(&read_ply(&args.pred)?, &read_ply(&args.gt)?, args.cap)?;
        let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        println!(
            "accuracy {}  completeness {}  overall {}",
            f(scores.accuracy),
            f(scores.completeness),
            f(scores.overall)
        );
        if let Some(p) = &args.out {
            csv(&out.file(p.clone()), |b| write_cloud_scores_csv(&scores, b))?;
        }
        return Ok(());
    }
    if !(has_extension(&args.pred, "pfm") && has_extension(&args.gt, "pfm")) {
        return Err(CliError::Usage("eval compares two .pfm maps or two .ply clouds".into()));
    }
    let pred = read_depth_pfm(&args.pred)?;
    let gt = masked(read_depth_pfm(&args.gt)?, args.mask.as_deref())?;
    let gt = ground_truth_at(&gt, pred.width(), pred.height())?;
    let scores = map_scores(&pred, &gt)?;
    let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    println!(
        "error {}  >1 {}  >2 {}  >3 {}  d1 {}  pixels {}",
        f(scores.epe),
        f(scores.over_1),
        f(scores.over_2),
        f(scores.over_3),
        f(scores.d1),
        scores.pixels
    );
    let curve = coverage_curve(&abs_errors(&pred, &gt)?, &args.thresholds);
    println!("threshold  inliers");
    for (t, frac) in &curve {
        println!("{t:<10} {:.2}%", 100.0 * frac);
    }
    if let Some(p) = &args.out {
        csv(&out.file(p.clone()), |b| write_map_scores_csv(&scores, b))?;
    }
    if let Some(p) = &args.coverage {
        csv(&out.file(p.clone()), |b| write_coverage_csv(&curve, b))?;
    }
    Ok(())
}

fn run(cli: &Cli, out: &mut Outputs) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Synth(a) => synth(a, out),
        Command::Mvs(a) => mvs(a, out),
        Command::Stereo(a) => stereo(a, out),
        Command::Fuse(a) => fuse_cmd(a, out),
        Command::Eval(a) => eval(a, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let line: Vec<&str> = msg
                .lines()
                .map(str::trim)
                .take_while(|l| !l.starts_with("Usage:"))
                .filter(|l| !l.is_empty())
                .collect();
            eprintln!("{}", line.join(" "));
            return ExitCode::from(1);
        }
    };
    let mut out = Outputs::new();
    match run(&cli, &mut out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            out.remove();
            eprintln!("cascade: {}", e.to_string().replace('\n', " "));
            ExitCode::from(e.exit_code())
        }
    }
}
