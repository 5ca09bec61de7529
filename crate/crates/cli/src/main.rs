use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use symslice::data::{ManifestRow, Split};
use symslice::geometry::{plane_box_polygon, Plane, Vec3};
use symslice::io::{load_cloud, read_csv, save_ply, save_xyz, write_csv, IoError, LoadOptions};
use symslice::metrics::{angular_error, gte, sde, GroundTruth, MetricRow, DEFAULT_SDE_SAMPLES};
use symslice::network::{forward, load_params, save_params};
use symslice::refine::{
    read_boxes, refine_all, refine_box, simulate_detections, vehicle_scene, write_boxes, write_report, Box3D,
    ModelEstimator, RefineOptions, RefinementReport,
};
use symslice::train::{build_samples, evaluate, train, RunConfig, Summary};
use symslice::verify::{gradcheck_suite, suite_passed, SEEDS};
use symslice::grid::normalize_cloud;

/// Exit code for unreadable or malformed input files.
const EXIT_INPUT: u8 = 2;

#[derive(Parser)]
#[command(name = "symslice", version, about = "Planar reflective symmetry estimation for point clouds")]
struct Cli {
    /// Run configuration (JSON); defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Pin every parallel section to one thread.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Dataset root holding manifest.csv.
    #[arg(long, global = true, env = "SYMSLICE_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a dataset manifest (and optionally the held-out clouds).
    GenData(GenDataArgs),
    /// Train a model; writes model.symw, its JSON sidecar and train_log.csv.
    Train(TrainArgs),
    /// Per-object metrics on one split plus a summary line.
    Eval(EvalArgs),
    /// Estimate the symmetry plane of one cloud file.
    Estimate(EstimateArgs),
    /// Refine detection boxes with estimated symmetry planes.
    Refine(RefineArgs),
    /// Finite-difference check of every differentiable operator.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory (default: the data dir, else "data").
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write every sample's cloud (augmentation draw 0) and planes.
    #[arg(long)]
    clouds: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Output directory (default: out_dir from the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "gt_as_pred")]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Evaluate on partial views instead of full clouds.
    #[arg(long)]
    partial: bool,
    /// Score the ground-truth planes themselves (oracle upper bound).
    #[arg(long)]
    gt_as_pred: bool,
    #[arg(long, default_value = "metrics.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct EstimateArgs {
    input: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Write the input points and the plane clipped to the unit box.
    #[arg(long)]
    ply: Option<PathBuf>,
    /// Ground-truth plane "nx,ny,nz,d" in the input frame, for metrics.
    #[arg(long, value_parser = parse_plane)]
    gt: Option<Plane>,
    /// Sample this many surface points from mesh inputs.
    #[arg(long)]
    surface_samples: Option<usize>,
}

#[derive(Args)]
struct RefineArgs {
    /// Detections CSV (id,cx,cy,cz,l,w,h,yaw).
    #[arg(long, required_unless_present = "simulate", requires = "clouds")]
    boxes: Option<PathBuf>,
    /// Directory with one `<id>.xyz` cloud per box.
    #[arg(long)]
    clouds: Option<PathBuf>,
    /// Ground-truth boxes, for the report and for --oracle-planes.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long, required_unless_present = "oracle_planes")]
    checkpoint: Option<PathBuf>,
    /// Use each ground-truth box's mid-plane instead of the network.
    #[arg(long)]
    oracle_planes: bool,
    /// Generate this many vehicle scenes with simulated detections.
    #[arg(long, conflicts_with = "boxes")]
    simulate: Option<usize>,
    #[arg(long, default_value_t = 5.0)]
    yaw_sigma_deg: f64,
    #[arg(long, default_value_t = 0.1)]
    center_sigma: f64,
    /// Points per simulated vehicle.
    #[arg(long, default_value_t = 2048)]
    points: usize,
    /// Sensor noise on simulated vehicles (metres).
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    /// With --simulate, also write each scene cloud to `<out>/clouds/<id>.xyz`.
    #[arg(long, requires = "simulate")]
    save_clouds: bool,
    /// Only rotate boxes; keep their centres.
    #[arg(long)]
    no_translate: bool,
    #[arg(long, default_value = "refine_out")]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Also write the table to this CSV file.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_plane(s: &str) -> Result<Plane, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<Result<_, _>>()?;
    if v.len() != 4 {
        return Err(format!("expected nx,ny,nz,d, got {} numbers", v.len()));
    }
    Plane::new(Vec3::new(v[0], v[1], v[2]), v[3]).map_err(|e| e.to_string())
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if cli.deterministic {
        cfg.threads = 1;
    }
    if cli.data_dir.is_some() {
        cfg.data_dir.clone_from(&cli.data_dir);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The manifest under the data dir when one exists, else the generated one.
fn manifest(cfg: &RunConfig) -> Result<Vec<ManifestRow>> {
    if let Some(dir) = &cfg.data_dir {
        let p = dir.join("manifest.csv");
        if p.exists() {
            return Ok(read_csv(&p)?);
        }
    }
    Ok(cfg.manifest())
}

fn cmd_gen_data(cfg: &RunConfig, a: &GenDataArgs) -> Result<()> {
    let out = a
        .out
        .clone()
        .or_else(|| cfg.data_dir.clone())
        .unwrap_or_else(|| PathBuf::from("data"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let rows = cfg.manifest();
    write_csv(&out.join("manifest.csv"), &rows)?;
    if a.clouds {
        #[derive(Serialize)]
        struct PlaneRow<'a> {
            id: &'a str,
            plane: usize,
            nx: f64,
            ny: f64,
            nz: f64,
            d: f64,
        }
        let dir = out.join("clouds");
        fs::create_dir_all(&dir)?;
        let samples = build_samples(&rows, cfg, false)?;
        let mut planes = Vec::new();
        for s in &samples {
            save_xyz(&dir.join(format!("{}.xyz", s.id)), &s.cloud.points)?;
            for (i, p) in s.gt.planes().iter().enumerate() {
                let n = p.normal();
                planes.push(PlaneRow {
                    id: &s.id,
                    plane: i,
                    nx: n.x,
                    ny: n.y,
                    nz: n.z,
                    d: p.offset(),
                });
            }
        }
        write_csv(&out.join("planes.csv"), &planes)?;
    }
    println!("wrote {} manifest rows to {}", rows.len(), out.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, a: &TrainArgs) -> Result<()> {
    let out = a.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("run_config.json"), serde_json::to_string_pretty(cfg)?)?;
    let rows = manifest(cfg)?;
    let log_path = out.join("train_log.csv");
    let mut log = csv::Writer::from_path(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut write_err = None;
    let trained = train(cfg, &rows, |r| {
        if write_err.is_none() {
            write_err = log.serialize(r).and_then(|_| Ok(log.flush()?)).err();
        }
        eprintln!(
            "epoch {} {}: offsets={} gte={} sde={} angle={}",
            r.epoch,
            r.split,
            opt(r.offsets_loss),
            opt(r.gte),
            opt(r.sde),
            opt(r.angular_error)
        );
    })?;
    if let Some(e) = write_err {
        return Err(e).context(format!("writing {}", log_path.display()));
    }
    let model = out.join("model.symw");
    let mcfg = symslice::ModelConfig {
        seed: cfg.seed,
        ..cfg.model.clone()
    };
    save_params(&model, &trained.params, &mcfg)?;
    println!("wrote {} and {}", model.display(), log_path.display());
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4e}"))
}

fn gt_rows(cfg: &RunConfig, split: Split, partial: bool) -> Result<Vec<symslice::train::Sample>> {
    let rows: Vec<ManifestRow> = manifest(cfg)?.into_iter().filter(|r| r.split == split).collect();
    Ok(build_samples(&rows, cfg, partial)?)
}

fn cmd_eval(cfg: &RunConfig, a: &EvalArgs) -> Result<()> {
    let mut cfg = cfg.clone();
    let loaded = match &a.checkpoint {
        Some(p) if !a.gt_as_pred => {
            let (params, mcfg) = load_params(p)?;
            cfg.model = mcfg;
            Some(params)
        }
        _ => None,
    };
    let samples = gt_rows(&cfg, a.split, a.partial)?;
    let rows: Vec<MetricRow> = match &loaded {
        Some(params) => evaluate(params, &cfg.model, &samples, cfg.sde_samples, cfg.threads),
        None => samples
            .iter()
            .map(|s| {
                let p = s.gt.planes()[0];
                let e = sde(&p, &s.gt, cfg.sde_samples, 0);
                MetricRow {
                    object_id: s.id.clone(),
                    offsets_loss: None,
                    gte: Some(gte(&p, &s.gt)),
                    sde: Some(e),
                    sde_floor: Some(e),
                    angular_error_deg: Some(angular_error(&p, &s.gt)),
                    eigengap: None,
                    status: "ok".into(),
                }
            })
            .collect(),
    };
    write_csv(&a.out, &rows)?;
    println!("{}", Summary::from_rows(&rows));
    Ok(())
}

fn cmd_estimate(a: &EstimateArgs) -> Result<()> {
    let cloud = load_cloud(
        &a.input,
        &LoadOptions {
            surface_samples: a.surface_samples,
            seed: 0,
        },
    )?;
    let (params, mcfg) = load_params(&a.checkpoint)?;
    let (normed, rec) = normalize_cloud(&cloud)?;
    let out = forward(&normed, &params, &mcfg)?;
    let plane = rec.invert_plane(&out.plane).canonical();
    let n = plane.normal();
    let (gte_s, sde_s) = match &a.gt {
        Some(g) => {
            let gt = GroundTruth::new(vec![*g], cloud.points.clone());
            (
                gte(&plane, &gt).to_string(),
                sde(&plane, &gt, DEFAULT_SDE_SAMPLES, 0).to_string(),
            )
        }
        None => ("?".into(), "?".into()),
    };
    println!("n=({},{},{}) d={} gte={gte_s} sde={sde_s}", n.x, n.y, n.z, plane.offset());
    if let Some(path) = &a.ply {
        // Clip in the normalized frame, then map back; the map is a similarity
        // so the vertices stay on the plane.
        let quad: Vec<Vec3> = plane_box_polygon(&out.plane, 0.5)
            .iter()
            .map(|q| rec.invert(q))
            .collect();
        let base = cloud.points.len();
        let mut verts = cloud.points.clone();
        verts.extend(&quad);
        let faces = if quad.len() >= 3 {
            vec![(base..base + quad.len()).collect()]
        } else {
            Vec::new()
        };
        save_ply(path, &verts, &faces)?;
    }
    Ok(())
}

fn read_scene_clouds(dir: &Path, ids: &[String]) -> Result<Vec<symslice::Cloud>> {
    ids.iter()
        .map(|id| Ok(load_cloud(&dir.join(format!("{id}.xyz")), &LoadOptions::default())?))
        .collect()
}

fn cmd_refine(cfg: &RunConfig, a: &RefineArgs) -> Result<()> {
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let (ids, clouds, dets, gt): (Vec<String>, Vec<symslice::Cloud>, Vec<Box3D>, Option<Vec<Box3D>>) =
        match a.simulate {
            Some(count) => {
                let scenes: Vec<_> = (0..count)
                    .map(|i| vehicle_scene(cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64), a.points, a.noise))
                    .collect();
                let gt: Vec<Box3D> = scenes.iter().map(|s| s.gt_box).collect();
                let dets = simulate_detections(&gt, a.yaw_sigma_deg.to_radians(), a.center_sigma, cfg.seed);
                let ids: Vec<String> = (0..count).map(|i| format!("veh_{i:05}")).collect();
                let named = |bs: &[Box3D]| ids.iter().cloned().zip(bs.iter().copied()).collect::<Vec<_>>();
                write_boxes(&a.out.join("gt_boxes.csv"), &named(&gt))?;
                write_boxes(&a.out.join("detections.csv"), &named(&dets))?;
                if a.save_clouds {
                    let dir = a.out.join("clouds");
                    fs::create_dir_all(&dir)?;
                    for (id, s) in ids.iter().zip(&scenes) {
                        save_xyz(&dir.join(format!("{id}.xyz")), &s.cloud.points)?;
                    }
                }
                (ids, scenes.into_iter().map(|s| s.cloud).collect(), dets, Some(gt))
            }
            None => {
                let boxes = read_boxes(a.boxes.as_deref().expect("clap requires --boxes"))?;
                let (ids, dets): (Vec<String>, Vec<Box3D>) = boxes.into_iter().unzip();
                let clouds = read_scene_clouds(a.clouds.as_deref().expect("clap requires --clouds"), &ids)?;
                let gt = match &a.gt {
                    Some(p) => {
                        let g = read_boxes(p)?;
                        if g.len() != dets.len() {
                            bail!("{} ground-truth boxes for {} detections", g.len(), dets.len());
                        }
                        Some(g.into_iter().map(|(_, b)| b).collect())
                    }
                    None => None,
                };
                (ids, clouds, dets, gt)
            }
        };
    let opts = RefineOptions {
        translate: !a.no_translate,
    };
    let refined: Vec<(Box3D, String)> = if a.oracle_planes {
        let Some(gt) = &gt else {
            bail!("--oracle-planes needs ground-truth boxes (--gt or --simulate)");
        };
        dets.iter()
            .zip(gt)
            .map(|(d, g)| match refine_box(d, &g.mid_plane(), &opts) {
                Ok(b) => (b, "ok".to_string()),
                Err(e) => (*d, format!("unchanged: {e}")),
            })
            .collect()
    } else {
        let (params, mcfg) = load_params(a.checkpoint.as_deref().expect("clap requires --checkpoint"))?;
        let est = ModelEstimator {
            params: &params,
            config: &mcfg,
        };
        refine_all(&clouds, &dets, &est, &opts)?
            .into_iter()
            .map(|r| (r.boxed, r.status))
            .collect()
    };
    let after: Vec<Box3D> = refined.iter().map(|r| r.0).collect();
    let status: Vec<String> = refined.iter().map(|r| r.1.clone()).collect();
    let named: Vec<(String, Box3D)> = ids.iter().cloned().zip(after.iter().copied()).collect();
    write_boxes(&a.out.join("refined.csv"), &named)?;
    let unchanged = status.iter().filter(|s| *s != "ok").count();
    match gt {
        Some(gt) => {
            let report = RefinementReport::new(&ids, &dets, &after, &gt, &status)?;
            write_report(&a.out.join("report.csv"), &report)?;
            println!(
                "boxes={} unchanged={unchanged} mean_error_before_deg={} mean_error_after_deg={} relative_reduction={}",
                ids.len(),
                report.mean_before.to_degrees(),
                report.mean_after.to_degrees(),
                report.relative_reduction()
            );
        }
        None => println!("boxes={} unchanged={unchanged}", ids.len()),
    }
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let rows = gradcheck_suite(&SEEDS);
    let mut w = csv::Writer::from_writer(std::io::stdout());
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    if let Some(p) = &a.out {
        write_csv(p, &rows)?;
    }
    Ok(suite_passed(&rows))
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = run_config(cli)?;
    // Best effort: a pool may already exist when embedded.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    match &cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(&cfg, a)?,
        Cmd::Train(a) => cmd_train(&cfg, a)?,
        Cmd::Eval(a) => cmd_eval(&cfg, a)?,
        Cmd::Estimate(a) => cmd_estimate(a)?,
        Cmd::Refine(a) => cmd_refine(&cfg, a)?,
        Cmd::Gradcheck(a) => return cmd_gradcheck(a),
    }
    Ok(true)
}

fn is_input_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| c.downcast_ref::<IoError>().is_some())
}

/// The error chain, skipping causes already spelled out by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !msg.contains(&c) {
            msg = format!("{msg}: {c}");
        }
    }
    msg
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {}", describe(&e));
            if is_input_error(&e) {
                ExitCode::from(EXIT_INPUT)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
