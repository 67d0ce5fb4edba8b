//! Command-line pipeline: synth -> init -> train -> extract -> eval.
//!
//! Exit codes: 0 success, 1 completed with warnings (e.g. empty mesh),
//! 2 bad input, 3 numerical abort during training.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use svrecon::config::{Profile, TrainConfig};
use svrecon::lattice::OctreeState;
use svrecon::synth::{SceneParams, ShadingParams, Shape};

#[derive(Parser)]
#[command(name = "svrecon", version, about = "Sparse-voxel SDF surface reconstruction")]
struct Cli {
    /// Worker threads (also honored from SVRECON_THREADS; 0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Force single-threaded execution for bit-stable runs.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic oracle scene (images, masks, point maps,
    /// cameras, ground truth).
    Synth(SynthArgs),
    /// Initialize a coarse SDF checkpoint from a scene's point maps.
    Init(InitArgs),
    /// Optimize a checkpoint against a scene.
    Train(TrainArgs),
    /// Extract a triangle mesh from a checkpoint via marching cubes.
    Extract(ExtractArgs),
    /// Compare a mesh (or point set) against ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// sphere | cuboid | torus
    #[arg(long, default_value = "sphere")]
    shape: String,
    #[arg(long, default_value_t = 16)]
    views: usize,
    #[arg(long, default_value_t = 128)]
    width: u32,
    #[arg(long, default_value_t = 128)]
    height: u32,
    /// Scene cube edge length.
    #[arg(long, default_value_t = 4.0)]
    edge: f64,
    #[arg(long, default_value_t = 3.0)]
    camera_radius: f64,
    #[arg(long, default_value_t = 60.0)]
    fov: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Emit estimated poses (a known similarity away from ground truth)
    /// and point maps in the estimated frame.
    #[arg(long)]
    perturb_poses: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InitArgs {
    /// Scene directory produced by `synth` (or following its layout).
    #[arg(long)]
    scene: PathBuf,
    /// Output checkpoint path (default: <scene>/init.svrx).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 6)]
    level: u8,
    #[arg(long, default_value_t = 0.1)]
    conf_threshold: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Input checkpoint (e.g. from `init`).
    #[arg(long)]
    checkpoint: PathBuf,
    /// dtu | tnt | synthetic | baseline
    #[arg(long, default_value = "synthetic")]
    profile: String,
    /// JSON config overlay (flag > file > profile defaults).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the final checkpoint and run log.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rays: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Resume schedules from this iteration.
    #[arg(long, default_value_t = 0)]
    start_iter: u64,
    /// Train the naive baseline (ray-Eikonal only, no continuity losses).
    #[arg(long)]
    baseline_ray_eikonal: bool,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Extraction lattice level (default: finest leaf level).
    #[arg(long)]
    level: Option<u8>,
    /// Output basename; writes <out>.obj and <out>.ply.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Mesh or point set under evaluation (.obj or .ply).
    #[arg(long)]
    mesh: PathBuf,
    /// Ground-truth mesh or point set.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    threshold: f64,
    /// Surface samples per mesh for the metrics.
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    /// Metrics JSON output (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = if cli.deterministic {
        1
    } else {
        cli.threads
            .or_else(|| {
                std::env::var("SVRECON_THREADS")
                    .ok()
                    .and_then(|v| v.parse().ok())
            })
            .unwrap_or(0)
    };
    if threads > 0 {
        if let Err(err) = svrecon::build_thread_pool(threads) {
            eprintln!("error: {err}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err
                .downcast_ref::<svrecon::Error>()
                .map(|e| match e {
                    svrecon::Error::NonFinite { .. } => 3u8,
                    _ => 2u8,
                })
                .unwrap_or(2);
            ExitCode::from(code)
        }
    }
}

fn run(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Synth(args) => cmd_synth(args),
        Command::Init(args) => cmd_init(args),
        Command::Train(args) => cmd_train(args),
        Command::Extract(args) => cmd_extract(args),
        Command::Eval(args) => cmd_eval(args),
    }
}

fn parse_shape(name: &str) -> anyhow::Result<Shape> {
    Ok(match name.to_ascii_lowercase().as_str() {
        "sphere" => Shape::Sphere { radius: 1.0 },
        "cuboid" | "box" => Shape::Cuboid {
            half: [0.9, 0.7, 0.5],
        },
        "torus" => Shape::Torus {
            major: 0.9,
            minor: 0.35,
        },
        other => anyhow::bail!(svrecon::Error::Domain(format!("unknown shape `{other}`"))),
    })
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<ExitCode> {
    let params = SceneParams {
        shape: parse_shape(&args.shape)?,
        views: args.views,
        width: args.width,
        height: args.height,
        edge: args.edge,
        camera_radius: args.camera_radius,
        fov_deg: args.fov,
        seed: args.seed,
        perturb_poses: args.perturb_poses,
        shading: ShadingParams::default(),
        gt_samples: 100_000,
    };
    let meta = svrecon::synth::generate_scene(&args.out, &params)?;
    println!(
        "scene written to {} ({} views, {} + 2 elevated, bounds edge {})",
        args.out.display(),
        params.views,
        params.views,
        meta.bounds.edge
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_init(args: InitArgs) -> anyhow::Result<ExitCode> {
    let meta = svrecon::synth::read_scene_meta(&args.scene)?;
    let cam_path = args.scene.join("cameras.json");
    if !cam_path.exists() {
        anyhow::bail!(svrecon::Error::MissingInputs(vec![cam_path]));
    }
    let cams_json = svrecon::io::read_cameras_json(&cam_path)?;
    let mut cameras = Vec::new();
    let mut estimated = Vec::new();
    let mut pointmaps = svrecon::geoinit::PointMapSet::default();
    let mut missing = Vec::new();
    for (i, view) in cams_json.views.iter().enumerate() {
        let cam = view.camera(&cam_path)?;
        let pm_path = args.scene.join(format!("pointmaps/view_{i:04}.ply"));
        if !pm_path.exists() {
            missing.push(pm_path);
            continue;
        }
        let (points, confidence) = svrecon::io::read_pointmap_ply(&pm_path)?;
        pointmaps.views.push(svrecon::geoinit::PointMapView {
            width: cam.width,
            height: cam.height,
            points,
            confidence,
        });
        estimated.push(view.estimated_pose(&cam_path)?);
        cameras.push(cam);
    }
    if !missing.is_empty() {
        anyhow::bail!(svrecon::Error::MissingInputs(missing));
    }
    let est: Option<Vec<_>> = estimated.into_iter().collect();
    let params = svrecon::geoinit::InitParams {
        level: args.level,
        conf_threshold: args.conf_threshold,
        ..Default::default()
    };
    let (octree, report) =
        svrecon::geoinit::run_init(meta.bounds, 10, &cameras, est.as_deref(), &pointmaps, &params)?;
    let out = args.out.unwrap_or_else(|| args.scene.join("init.svrx"));
    let mut file = std::io::BufWriter::new(std::fs::File::create(&out)?);
    octree.write_checkpoint(&mut file)?;
    drop(file);
    let report_path = out.with_extension("init.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    if report.aligned {
        println!(
            "aligned estimated poses (scale {:.6}); {} corners flipped visible, {} outside frustums",
            report.similarity_scale, report.carve.flipped_visible, report.carve.flipped_outside
        );
    } else {
        println!(
            "no estimated poses: identity alignment; {} corners flipped visible, {} outside frustums",
            report.carve.flipped_visible, report.carve.flipped_outside
        );
    }
    println!("checkpoint written to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<ExitCode> {
    let profile = if args.baseline_ray_eikonal {
        Profile::Baseline
    } else {
        Profile::from_str(&args.profile)?
    };
    let mut cfg = match &args.config {
        Some(path) => {
            let mut overlay: serde_json::Value =
                serde_json::from_str(&std::fs::read_to_string(path)?)?;
            if overlay.get("profile").is_none() {
                overlay["profile"] = serde_json::json!(profile.to_string());
            }
            TrainConfig::from_overlay(overlay)?
        }
        None => TrainConfig::for_profile(profile),
    };
    if let Some(iters) = args.iters {
        cfg.iters = iters;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(rays) = args.rays {
        cfg.rays_per_batch = rays;
    }
    if let Some(every) = args.checkpoint_every {
        cfg.checkpoint_every = every;
    }

    let mut file = std::io::BufReader::new(std::fs::File::open(&args.checkpoint)?);
    let octree = OctreeState::read_checkpoint(&mut file)?;
    std::fs::create_dir_all(&args.out)?;

    if cfg.iters <= args.start_iter {
        // nothing to do: copy the checkpoint through
        let out = args.out.join("final.svrx");
        let mut w = std::io::BufWriter::new(std::fs::File::create(&out)?);
        octree.write_checkpoint(&mut w)?;
        println!("0 iterations requested; checkpoint copied to {}", out.display());
        return Ok(ExitCode::SUCCESS);
    }

    let scene = svrecon::trainer::SceneData::load(&args.scene, 0.1)?;
    let mut trainer = svrecon::trainer::Trainer::resume(octree, cfg, args.start_iter)?;
    let log_path = args.out.join("run_log.ndjson");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    trainer.run(&scene, Some(&mut log), Some(&args.out))?;
    std::io::Write::flush(&mut log)?;

    let out = args.out.join("final.svrx");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&out)?);
    trainer.octree.write_checkpoint(&mut w)?;
    println!(
        "trained {} iterations; {} voxels at level {}; checkpoint {}",
        trainer.iter,
        trainer.octree.len(),
        trainer.octree.finest_leaf_level(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_extract(args: ExtractArgs) -> anyhow::Result<ExitCode> {
    let mut file = std::io::BufReader::new(std::fs::File::open(&args.checkpoint)?);
    let octree = OctreeState::read_checkpoint(&mut file)?;
    let finest = octree.finest_leaf_level();
    let level = args.level.unwrap_or(finest);
    let index = svrecon::assoc::AssociationIndex::rebuild(&octree, level.max(finest))?;
    // nodes with no occupied neighbor count as outside by the final band
    let outside = 2.0 * octree.bounds.cell_size(finest);
    let mesh = svrecon::meshx::marching_cubes(&octree, &index, level, outside)?;
    svrecon::io::write_obj(&args.out.with_extension("obj"), &mesh)?;
    svrecon::io::write_mesh_ply(&args.out.with_extension("ply"), &mesh)?;
    println!(
        "mesh: {} vertices, {} triangles -> {}.{{obj,ply}}",
        mesh.vertices.len(),
        mesh.triangles.len(),
        args.out.display()
    );
    if mesh.is_empty() {
        eprintln!("warning: no zero crossings found; mesh is empty");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<ExitCode> {
    let pred = svrecon::io::read_mesh_auto(&args.mesh)?;
    let gt = svrecon::io::read_mesh_auto(&args.gt)?;
    let pred_points = if pred.triangles.is_empty() {
        pred.vertices.clone()
    } else {
        pred.sample_surface(args.samples, 0)
    };
    let gt_points = if gt.triangles.is_empty() {
        gt.vertices.clone()
    } else {
        gt.sample_surface(args.samples, 1)
    };
    let chamfer = svrecon::meshx::chamfer(&pred_points, &gt_points)?;
    let (precision, recall, f1) = svrecon::meshx::f1_score(&pred_points, &gt_points, args.threshold)?;
    let metrics = svrecon::io::MetricsJson {
        chamfer,
        precision,
        recall,
        f1,
        threshold: args.threshold,
    };
    let text = serde_json::to_string_pretty(&metrics)?;
    match &args.out {
        Some(path) => std::fs::write(path, &text)?,
        None => println!("{text}"),
    }
    eprintln!(
        "chamfer {chamfer:.6}  precision {precision:.4}  recall {recall:.4}  f1 {f1:.4} @ {}",
        args.threshold
    );
    Ok(ExitCode::SUCCESS)
}
