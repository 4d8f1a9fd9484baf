//! `tgh`: fit, render, inspect and benchmark temporal Gaussian hierarchy models.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 internal failure.

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use tgh::bench::{duration_sweep, level_sweep, sweep_csv, working_set_stats, DensitySpec};
use tgh::codec;
use tgh::gaussians::{condition_at_time, influence_range};
use tgh::optimizer::{camera_extent, train, write_metrics_csv, TrainConfig};
use tgh::renderer::{render, RenderOptions};
use tgh::scene_io::{
    build_hierarchy, init_gaussians, load_camera, load_init_clouds, load_scene, ply, DiskScene, InitConfig,
    SynthScene, SynthSpec,
};
use tgh::{Error, Hierarchy};

#[derive(Parser, Debug)]
#[command(name = "tgh", version, about = "Temporal Gaussian Hierarchy models for long volumetric videos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on a scene and write it as .tgh with a metrics CSV alongside.
    Fit(FitArgs),
    /// Render frames of a model from a camera.
    Render(RenderArgs),
    /// Print header fields, per-level occupancy and section sizes.
    Info(InfoArgs),
    /// Working-set statistics, a duration sweep and a level sweep.
    Bench(BenchArgs),
    /// Write the synthetic moving-blob scene to a directory.
    Synth(SynthArgs),
    /// Write the Gaussian centers and base colors of a model as a PLY point cloud.
    Export(ExportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// Reference learning rates and thresholds.
    Reference,
    /// Raised rates and densification threshold for small, short runs.
    Desk,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 9)]
    levels: usize,
    #[arg(long, default_value_t = 10.0)]
    root_seconds: f64,
    /// Defaults to 50000 per 1200 frames.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Preset::Reference)]
    preset: Preset,
    #[arg(long)]
    lambda_h: Option<f64>,
    #[arg(long)]
    g_th: Option<f64>,
    /// Train every residual: g_th = 0 and no ratio cutoff.
    #[arg(long, conflicts_with_all = ["g_th", "lambda_h"])]
    full_sh: bool,
    #[arg(long)]
    o_th: Option<f64>,
    #[arg(long)]
    lr_position: Option<f64>,
    #[arg(long)]
    lr_scale_mult: Option<f64>,
    #[arg(long)]
    lr_rotor_mult: Option<f64>,
    #[arg(long)]
    lr_opacity_mult: Option<f64>,
    #[arg(long)]
    lr_color_mult: Option<f64>,
    #[arg(long)]
    lr_sh_mult: Option<f64>,
    #[arg(long)]
    lambda_mse: Option<f64>,
    #[arg(long)]
    lambda_ssim: Option<f64>,
    #[arg(long)]
    densify_interval: Option<usize>,
    #[arg(long)]
    densify_from: Option<usize>,
    #[arg(long)]
    densify_until: Option<usize>,
    #[arg(long)]
    grad_threshold: Option<f64>,
    #[arg(long)]
    prune_opacity: Option<f64>,
    #[arg(long)]
    max_gaussians: Option<usize>,
    /// Uniform subsampling cap on initialization points.
    #[arg(long)]
    max_init_points: Option<usize>,
    #[arg(long)]
    log_interval: Option<usize>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    camera: PathBuf,
    #[arg(long, required_unless_present = "times_csv", conflicts_with = "times_csv")]
    time: Option<f64>,
    /// One timestamp per line; `--out` is then a directory receiving frame_%06d.png.
    #[arg(long)]
    times_csv: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InfoArgs {
    #[arg(long)]
    model: PathBuf,
    /// Also print every non-empty segment.
    #[arg(long)]
    segments: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    /// Synthetic video durations in seconds, at the model's density.
    #[arg(long, value_delimiter = ',', default_value = "40,400,4000")]
    durations: Vec<f64>,
    #[arg(long = "level-sweep", value_delimiter = ',', default_value = "1,3,6,9")]
    level_sweep: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for working_set.csv, duration_sweep.csv and level_sweep.csv.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 60)]
    frames: usize,
    #[arg(long, default_value_t = 30.0)]
    frame_rate: f64,
    #[arg(long, default_value_t = 4)]
    cameras: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 24)]
    points_per_blob: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Only the Gaussians influencing this timestamp, at their conditioned centers.
    #[arg(long)]
    time: Option<f64>,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

/// Errors from reading or interpreting inputs are data errors; broken
/// invariants are internal.
fn classify(context: &str, e: Error) -> Failure {
    let code = match e {
        Error::Audit(_) | Error::NotFound(_) => 3,
        _ => 2,
    };
    Failure {
        code,
        message: format!("{context}: {e}"),
    }
}

fn internal(context: &str, e: impl fmt::Display) -> Failure {
    Failure {
        code: 3,
        message: format!("{context}: {e}"),
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Render(a) => cmd_render(a),
        Command::Info(a) => cmd_info(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Export(a) => cmd_export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}

fn fit_config(a: &FitArgs) -> Result<(TrainConfig, InitConfig), Failure> {
    let iterations = a.iters.unwrap_or(0);
    let mut cfg = match a.preset {
        Preset::Reference => TrainConfig {
            iterations,
            ..TrainConfig::default()
        },
        Preset::Desk => TrainConfig::desk_scale(iterations),
    };
    cfg.seed = a.seed;
    if a.full_sh {
        cfg.g_th = 0.0;
        cfg.lambda_h = 1.0;
    }
    let set = |slot: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *slot = v;
        }
    };
    set(&mut cfg.g_th, a.g_th);
    set(&mut cfg.lambda_h, a.lambda_h);
    set(&mut cfg.lr_position, a.lr_position);
    set(&mut cfg.lr_multipliers.scale, a.lr_scale_mult);
    set(&mut cfg.lr_multipliers.rotor, a.lr_rotor_mult);
    set(&mut cfg.lr_multipliers.opacity, a.lr_opacity_mult);
    set(&mut cfg.lr_multipliers.color, a.lr_color_mult);
    set(&mut cfg.lr_multipliers.sh, a.lr_sh_mult);
    set(&mut cfg.loss.mse, a.lambda_mse);
    set(&mut cfg.loss.ssim, a.lambda_ssim);
    set(&mut cfg.control.grad_threshold, a.grad_threshold);
    set(&mut cfg.control.prune_opacity, a.prune_opacity);
    cfg.densify_interval = a.densify_interval.unwrap_or(cfg.densify_interval);
    cfg.densify_from = a.densify_from.unwrap_or(cfg.densify_from);
    cfg.densify_until = a.densify_until.unwrap_or(cfg.densify_until);
    cfg.log_interval = a.log_interval.unwrap_or(cfg.log_interval);
    if let Some(m) = a.max_gaussians {
        cfg.control.max_gaussians = m;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;

    let mut init = InitConfig {
        seed: a.seed,
        max_points: a.max_init_points,
        ..InitConfig::default()
    };
    set(&mut init.o_th, a.o_th);
    tgh::gaussians::validate_threshold(init.o_th).map_err(|e| usage(e.to_string()))?;
    if a.levels == 0 || a.levels > tgh::hierarchy::MAX_LEVELS {
        return Err(usage(format!("--levels must lie in 1..={}", tgh::hierarchy::MAX_LEVELS)));
    }
    if !(a.root_seconds > 0.0 && a.root_seconds.is_finite()) {
        return Err(usage("--root-seconds must be positive"));
    }
    Ok((cfg, init))
}

fn cmd_fit(a: FitArgs) -> CmdResult {
    let (mut cfg, init_cfg) = fit_config(&a)?;
    let scene = load_scene(&a.scene).map_err(|e| classify("loading scene", e))?;
    let clouds = load_init_clouds(&scene).map_err(|e| classify("loading initialization clouds", e))?;
    let source = DiskScene { scene };
    if a.iters.is_none() {
        cfg.iterations = TrainConfig::iterations_for_frames(source.scene.frames);
        if a.preset == Preset::Desk && a.densify_until.is_none() {
            cfg.densify_until = cfg.iterations / 2;
        }
    }
    let duration = source.scene.duration();
    cfg = cfg.with_extents(camera_extent(&source), duration);
    info!("fit configuration: {cfg:?}");
    info!(
        "hierarchy: duration {duration} s, root {} s, {} levels, o_th {}; init: {init_cfg:?}",
        a.root_seconds, a.levels, init_cfg.o_th
    );

    let gaussians = init_gaussians(&clouds, &init_cfg).map_err(|e| classify("initializing", e))?;
    let h = build_hierarchy(gaussians, duration, a.root_seconds, a.levels, init_cfg.o_th)
        .map_err(|e| classify("building hierarchy", e))?;
    info!("initialized {} Gaussians", h.len());
    if a.levels == 1 {
        let ws = working_set_stats(&h, 100, a.seed).map_err(|e| internal("working set", e))?;
        info!(
            "single level: mean working set {:.1} of {} Gaussians",
            ws.mean_size,
            h.len()
        );
    }

    let outcome = train(h, &source, &cfg, &mut ()).map_err(|e| classify("training", e))?;
    outcome.hierarchy.audit().map_err(|e| classify("final audit", e))?;
    let bytes = codec::encode(&outcome.hierarchy).map_err(|e| classify("encoding", e))?;
    std::fs::write(&a.out, &bytes).map_err(|e| classify("writing model", e.into()))?;
    let metrics_path = metrics_path(&a.out);
    let file = std::fs::File::create(&metrics_path).map_err(|e| classify("writing metrics", e.into()))?;
    write_metrics_csv(&outcome.metrics, std::io::BufWriter::new(file)).map_err(|e| classify("writing metrics", e))?;
    let last_psnr = outcome.metrics.last().map(|m| m.psnr);
    info!(
        "wrote {} ({} bytes, {} Gaussians, view-dependent fraction {:.3}); metrics {}; final PSNR {}",
        a.out.display(),
        bytes.len(),
        outcome.hierarchy.len(),
        tgh::appearance::view_dependent_fraction(&outcome.hierarchy),
        metrics_path.display(),
        last_psnr.map_or("n/a".into(), |p| format!("{p:.2} dB"))
    );
    Ok(())
}

fn metrics_path(model: &Path) -> PathBuf {
    model.with_extension("metrics.csv")
}

fn load(path: &Path) -> Result<Hierarchy, Failure> {
    codec::load_model(path).map_err(|e| classify(&format!("reading {}", path.display()), e))
}

fn read_times(path: &Path) -> Result<Vec<f64>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| classify("reading times", e.into()))?;
    let mut times = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let field = line.split(',').next().unwrap_or("").trim();
        if field.is_empty() || (i == 0 && field.parse::<f64>().is_err()) {
            continue;
        }
        let t: f64 = field.parse().map_err(|_| Failure {
            code: 2,
            message: format!("{} line {}: `{field}` is not a number", path.display(), i + 1),
        })?;
        times.push(t);
    }
    Ok(times)
}

fn cmd_render(a: RenderArgs) -> CmdResult {
    let h = load(&a.model)?;
    let cam = load_camera(&a.camera).map_err(|e| classify("loading camera", e))?;
    let opts = RenderOptions::default();
    let frame = |t: f64, out: &Path| -> CmdResult {
        let fb = render(&h, t, &cam, &opts).map_err(|e| classify(&format!("rendering t = {t}"), e))?;
        fb.into_image()
            .save_png(out)
            .map_err(|e| classify(&format!("writing {}", out.display()), e))
    };
    match (a.time, &a.times_csv) {
        (Some(t), None) => {
            frame(t, &a.out)?;
            info!("wrote {}", a.out.display());
        }
        (None, Some(csv)) => {
            let times = read_times(csv)?;
            if let Some(&t) = times.iter().find(|&&t| !(0.0..=h.duration()).contains(&t)) {
                return Err(classify("times", Error::OutOfRange { t, duration: h.duration() }));
            }
            std::fs::create_dir_all(&a.out).map_err(|e| classify("creating output directory", e.into()))?;
            for (i, &t) in times.iter().enumerate() {
                frame(t, &a.out.join(format!("frame_{i:06}.png")))?;
            }
            info!("wrote {} frames to {}", times.len(), a.out.display());
        }
        _ => return Err(usage("exactly one of --time and --times-csv is required")),
    }
    Ok(())
}

fn cmd_info(a: InfoArgs) -> CmdResult {
    let bytes = std::fs::read(&a.model).map_err(|e| classify("reading model", e.into()))?;
    let header = codec::read_header(&bytes).map_err(|e| classify("reading header", e))?;
    let sizes = codec::size_report(&bytes).map_err(|e| classify("reading sections", e))?;
    let h = codec::decode(&bytes).map_err(|e| classify("decoding", e))?;
    let occ = h.occupancy();
    let mut out = String::new();
    use std::fmt::Write as _;
    let _ = writeln!(out, "version           {}", header.version);
    let _ = writeln!(out, "duration          {} s", header.duration);
    let _ = writeln!(out, "root length       {} s", header.root_length);
    let _ = writeln!(out, "levels            {}", header.num_levels);
    let _ = writeln!(out, "opacity threshold {}", header.opacity_threshold);
    let _ = writeln!(out, "gaussians         {}", header.num_gaussians);
    let _ = writeln!(out, "view-dependent    {}", header.num_view_dependent);
    let _ = writeln!(out, "segments          {}", header.num_segments);
    let _ = writeln!(out, "occupancy");
    for (l, n) in occ.per_level.iter().enumerate() {
        let _ = writeln!(out, "  level {l:<2}        {n}");
    }
    let _ = writeln!(out, "  global          {}", occ.global);
    let _ = writeln!(out, "sections (bytes)");
    for (name, n) in [
        ("header", sizes.header),
        ("directory", sizes.directory),
        ("geometry", sizes.geometry),
        ("appearance table", sizes.appearance_table),
        ("appearance stream", sizes.appearance_stream),
        ("checksum", sizes.checksum),
    ] {
        let _ = writeln!(out, "  {name:<17} {n}");
    }
    let _ = writeln!(out, "  {:<17} {}", "total", sizes.total);
    let _ = writeln!(out, "  {:<17} {}", "appearance raw", sizes.appearance_raw);
    if a.segments {
        out.push_str(&occ.to_csv());
    }
    print!("{out}");
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> CmdResult {
    if a.samples == 0 {
        return Err(usage("--samples must be positive"));
    }
    if a.durations.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
        return Err(usage("--durations must be positive"));
    }
    if a.level_sweep.iter().any(|&l| l == 0 || l > tgh::hierarchy::MAX_LEVELS) {
        return Err(usage(format!("--level-sweep entries must lie in 1..={}", tgh::hierarchy::MAX_LEVELS)));
    }
    let h = load(&a.model)?;
    let ws = working_set_stats(&h, a.samples, a.seed).map_err(|e| internal("working set", e))?;
    let model_row = format!(
        "samples,mean_segments,mean_working_set,min_working_set,max_working_set,std_working_set,mean_query_seconds\n\
         {},{},{},{},{},{},{:e}\n",
        ws.samples, ws.mean_segments, ws.mean_size, ws.min_size, ws.max_size, ws.std_size, ws.mean_query_seconds
    );

    // Synthetic populations at the model's density and influence-radius span.
    let radii: Vec<f64> = h
        .iter()
        .filter_map(|(_, g)| influence_range(g, h.opacity_threshold()).ok())
        .map(|r| 0.5 * (r.end - r.start))
        .filter(|r| *r > 0.0 && r.is_finite())
        .collect();
    let spec = DensitySpec {
        root_length: h.root_length(),
        num_levels: h.num_levels(),
        o_th: h.opacity_threshold(),
        per_second: (h.len() as f64 / h.duration()).max(1.0),
        min_radius: radii.iter().copied().fold(f64::INFINITY, f64::min).min(0.01),
        max_radius: radii.iter().copied().fold(0.0, f64::max).clamp(0.01, h.root_length() / 16.0),
        seed: a.seed,
    };
    info!("duration sweep density: {spec:?}");
    let durations = duration_sweep(&a.durations, &spec, a.samples).map_err(|e| internal("duration sweep", e))?;
    let levels = level_sweep(&h, &a.level_sweep, a.samples, a.seed).map_err(|e| internal("level sweep", e))?;
    let (d_csv, l_csv) = (sweep_csv(&durations), sweep_csv(&levels));
    match &a.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| classify("creating output directory", e.into()))?;
            for (name, text) in [
                ("working_set.csv", &model_row),
                ("duration_sweep.csv", &d_csv),
                ("level_sweep.csv", &l_csv),
            ] {
                std::fs::write(dir.join(name), text).map_err(|e| classify("writing csv", e.into()))?;
            }
            info!("wrote working_set.csv, duration_sweep.csv and level_sweep.csv to {}", dir.display());
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            let _ = write!(stdout, "# model working set\n{model_row}# duration sweep\n{d_csv}# level sweep\n{l_csv}");
        }
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let spec = SynthSpec {
        frames: a.frames,
        frame_rate: a.frame_rate,
        num_cameras: a.cameras,
        width: a.width,
        height: a.height,
        focal: a.width as f64,
        points_per_blob: a.points_per_blob,
        seed: a.seed,
        ..SynthSpec::two_blobs()
    };
    let scene = SynthScene::new(spec).map_err(|e| usage(e.to_string()))?;
    std::fs::create_dir_all(&a.out).map_err(|e| classify("creating output directory", e.into()))?;
    scene.export(&a.out).map_err(|e| classify("exporting", e))?;
    info!(
        "wrote {}/scene.json with {} cameras x {} frames and held_out_camera.json",
        a.out.display(),
        a.cameras,
        a.frames
    );
    Ok(())
}

fn cmd_export(a: ExportArgs) -> CmdResult {
    let h = load(&a.model)?;
    let mut cloud = ply::PointCloud::default();
    match a.time {
        Some(t) => {
            let ws = h.query(t).map_err(|e| classify("time", e))?;
            let set = h.materialize(&ws);
            for g in &set.gaussians {
                let c = condition_at_time(g, t).map_err(|e| internal("conditioning", e))?;
                if c.opacity_t >= h.opacity_threshold() * g.opacity {
                    cloud.positions.push(c.mean3);
                    cloud.colors.push(g.base_color.map(|v| v.clamp(0.0, 1.0)));
                }
            }
        }
        None => {
            for (_, g) in h.iter() {
                cloud.positions.push(g.position());
                cloud.colors.push(g.base_color.map(|v| v.clamp(0.0, 1.0)));
            }
        }
    }
    let file = std::fs::File::create(&a.out).map_err(|e| classify("writing point cloud", e.into()))?;
    ply::write_ply_ascii(&cloud, std::io::BufWriter::new(file)).map_err(|e| classify("writing point cloud", e))?;
    info!("wrote {} points to {}", cloud.len(), a.out.display());
    Ok(())
}
