use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use csitrack::active::{ActiveTracker, PfConfig};
use csitrack::calibration::fit;
use csitrack::eval::evaluate;
use csitrack::io::{CsiReader, CsiWriter};
use csitrack::latency::latency_benchmark;
use csitrack::simulator::{advance_scene, calibration_recording, reference_points, uplink_frame};
use csitrack::{
    CalibrationDataset, CalibrationParams, CsiFrame, CsiWindow, Pipeline, PipelineConfig, Point3, Room, SceneSpec,
    TrackSet, TrackState, TruthRecord,
};

#[derive(Parser)]
#[command(name = "csitrack", version, about = "Contact-free tracking from distributed massive-MIMO CSI")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a scene description into a CSI container.
    Simulate {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth CSV `t,id,x,y` at every frame.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Also record the reference-point calibration sweep to this container.
        #[arg(long, requires = "rp_out")]
        calibration_out: Option<PathBuf>,
        /// Reference-point positions `x,y,z`, one per calibration frame.
        #[arg(long, requires = "calibration_out")]
        rp_out: Option<PathBuf>,
        /// Reference points per side of the calibration lattice.
        #[arg(long, default_value_t = 4)]
        rp_grid: usize,
        /// Emit the uplink of this target instead of the sensing downlink.
        #[arg(long)]
        uplink_target: Option<u32>,
        /// Overrides the scene seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimate hardware impairments from reference-point recordings.
    Calibrate {
        #[arg(long)]
        csi: PathBuf,
        /// CSV `x,y,z` of the transmitter position for each frame.
        #[arg(long)]
        rps: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Track targets, writing CSV `t,label,x,y,vx,vy`.
    Track {
        #[arg(long)]
        csi: PathBuf,
        /// Calibration parameters; identity when omitted.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Pipeline configuration JSON; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Particle-filter tracking of one transmitting UE, writing CSV `t,x,y`.
    BenchmarkTrack {
        #[arg(long)]
        csi: PathBuf,
        #[arg(long)]
        ue: u32,
        /// Particle filter configuration JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score tracks against ground truth.
    Evaluate {
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Report JSON.
        #[arg(long)]
        out: PathBuf,
        /// Empirical error CDF CSV `error,fraction`.
        #[arg(long)]
        cdf: Option<PathBuf>,
        #[arg(long, default_value_t = 0.2)]
        torso_radius: f64,
        /// Largest allowed gap between a track frame and its truth frame, s.
        #[arg(long, default_value_t = 0.05)]
        tolerance: f64,
    },
    /// Per-window latency of the tracking pipeline.
    BenchLatency {
        /// Recorded CSI; a scene is simulated instead when `--scene` is given.
        #[arg(long, required_unless_present = "scene", conflicts_with = "scene")]
        csi: Option<PathBuf>,
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        repetitions: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        /// Summary JSON; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the scene seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Serialize, Deserialize)]
struct TruthRow {
    t: f64,
    id: u32,
    x: f64,
    y: f64,
}

#[derive(Serialize, Deserialize)]
struct TrackRow {
    t: f64,
    label: u32,
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
}

#[derive(Serialize, Deserialize)]
struct PointRow {
    x: f64,
    y: f64,
    z: f64,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_params(path: Option<&Path>, n_antennas: usize) -> Result<CalibrationParams> {
    match path {
        None => Ok(CalibrationParams::identity(n_antennas)),
        Some(p) => CalibrationParams::from_json(&read_text(p)?).with_context(|| format!("parsing {}", p.display())),
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        None => Ok(PipelineConfig::default()),
        Some(p) => PipelineConfig::from_json(&read_text(p)?).with_context(|| format!("parsing {}", p.display())),
    }
}

fn load_scene(path: &Path, seed: Option<u64>) -> Result<SceneSpec> {
    let mut spec = SceneSpec::from_json(&read_text(path)?).with_context(|| format!("parsing {}", path.display()))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    Ok(spec)
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    r.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .with_context(|| format!("parsing {}", path.display()))
}

fn simulate(
    scene: &Path,
    out: &Path,
    truth_out: Option<&Path>,
    calibration: Option<(&Path, &Path, usize)>,
    uplink_target: Option<u32>,
    seed: Option<u64>,
) -> Result<()> {
    let spec = load_scene(scene, seed).context("simulate: scene")?;
    let (mut sim, impairments) = spec.build().context("simulate: building scene")?;
    let array = sim.array.clone();
    let n_windows = (spec.duration / (sim.window_len() as f64 * array.sample_interval())).round() as usize;
    let mut truth = Vec::new();
    match uplink_target {
        None => {
            let mut w = CsiWriter::create(out, &array, 0).context("simulate: output")?;
            for _ in 0..n_windows {
                let (window, t) = sim.next_window().context("simulate: window")?;
                for f in window.frames() {
                    w.write_frame(f).context("simulate: output")?;
                }
                truth.extend(t);
            }
            w.finish().context("simulate: output")?;
        }
        Some(id) => {
            let mut w = CsiWriter::create(out, &array, id).context("simulate: output")?;
            let mut scene = sim.scene.clone();
            if !scene.targets.iter().any(|t| t.id == id) {
                bail!("simulate: scene has no target {id}");
            }
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let dt = array.sample_interval();
            let reflectors = scene.static_field.reflectors.clone();
            for k in 0..n_windows * sim.window_len() {
                let t = k as f64 * dt;
                scene.time = t;
                for (tid, p) in scene.positions_at(t) {
                    truth.push(TruthRecord { t, id: tid, x: p[0], y: p[1] });
                    if tid == id {
                        let tx: Point3 = [p[0], p[1], scene.target_height];
                        let f = uplink_frame(&array, &tx, &reflectors, t, id, spec.noise_std, &mut rng)
                            .context("simulate: uplink frame")?;
                        w.write_frame(&f).context("simulate: output")?;
                    }
                }
                advance_scene(&mut scene, dt);
            }
            w.finish().context("simulate: output")?;
        }
    }
    if let Some(path) = truth_out {
        write_csv(path, truth.iter().map(|r| TruthRow { t: r.t, id: r.id, x: r.x, y: r.y }))
            .context("simulate: truth")?;
    }
    if let Some((cal_out, rp_out, n)) = calibration {
        let rps = reference_points(&Room::default(), n, spec.target_height);
        let params = impairments.unwrap_or_else(|| CalibrationParams::identity(array.n_antennas()));
        let frames = calibration_recording(
            &array,
            &params,
            &rps,
            &sim.scene.static_field.reflectors,
            spec.noise_std,
            spec.seed,
        )
        .context("simulate: calibration recording")?;
        let mut w = CsiWriter::create(cal_out, &array, 0).context("simulate: calibration output")?;
        for f in &frames {
            w.write_frame(f)?;
        }
        w.finish()?;
        write_csv(rp_out, rps.iter().map(|p| PointRow { x: p[0], y: p[1], z: p[2] })).context("simulate: rps")?;
    }
    Ok(())
}

fn calibrate(csi: &Path, rps: &Path, out: &Path) -> Result<()> {
    let reader = CsiReader::open(csi).context("calibrate: input")?;
    let array = reader.array().clone();
    let frames = reader.collect::<Result<Vec<_>, _>>().context("calibrate: input")?;
    let points: Vec<Point3> = read_csv::<PointRow>(rps)
        .context("calibrate: reference points")?
        .into_iter()
        .map(|p| [p.x, p.y, p.z])
        .collect();
    let ds = CalibrationDataset::new(&array, frames, points).context("calibrate: dataset")?;
    let params = fit(&ds).context("calibrate: fit")?;
    fs::write(out, params.save_json()).context("calibrate: output")?;
    Ok(())
}

/// Feeds the container through `f` one window of `n_t` frames at a time.
fn for_each_window(
    reader: CsiReader<std::io::BufReader<fs::File>>,
    n_t: usize,
    dt: f64,
    mut f: impl FnMut(CsiWindow) -> Result<()>,
) -> Result<()> {
    let mut buf: Vec<CsiFrame> = Vec::with_capacity(n_t);
    for frame in reader {
        buf.push(frame.context("input")?);
        if buf.len() == n_t {
            f(CsiWindow::new(std::mem::take(&mut buf), dt).context("input")?)?;
        }
    }
    Ok(())
}

fn track(csi: &Path, params: Option<&Path>, config: Option<&Path>, out: &Path) -> Result<()> {
    let reader = CsiReader::open(csi).context("input")?;
    let array = reader.array().clone();
    let params = load_params(params, array.n_antennas()).context("calibration")?;
    let cfg = load_config(config).context("config")?;
    let n_t = cfg.window_len(array.sample_rate_hz());
    let mut pipeline = Pipeline::new(&array, &params, cfg)?;
    let mut rows = Vec::new();
    for_each_window(reader, n_t, array.sample_interval(), |w| {
        let o = pipeline.run_window(&w)?;
        rows.extend(o.tracks.states.iter().map(|s| TrackRow {
            t: o.tracks.timestamp,
            label: s.label,
            x: s.x,
            y: s.y,
            vx: s.vx,
            vy: s.vy,
        }));
        Ok(())
    })?;
    write_csv(out, rows).context("output")
}

fn benchmark_track(csi: &Path, ue: u32, config: Option<&Path>, out: &Path, seed: u64) -> Result<()> {
    let reader = CsiReader::open(csi).context("input")?;
    let array = reader.array().clone();
    let cfg = match config {
        None => PfConfig::default(),
        Some(p) => serde_json::from_str(&read_text(p)?).with_context(|| format!("parsing {}", p.display()))?,
    };
    let mut tracker = ActiveTracker::new(cfg, array, Room::default(), seed).context("config")?;
    let mut rows = Vec::new();
    for frame in reader {
        let frame = frame.context("input")?;
        if frame.ue_id != ue {
            continue;
        }
        let step = tracker.step(&frame).context("tracking")?;
        rows.push((frame.timestamp, step.estimate[0], step.estimate[1]));
    }
    if rows.is_empty() {
        bail!("input: no frames from UE {ue}");
    }
    let mut w = csv::Writer::from_path(out).context("output")?;
    w.write_record(["t", "x", "y"])?;
    for (t, x, y) in rows {
        w.serialize((t, x, y))?;
    }
    w.flush().context("output")
}

/// Groups track rows into per-window sets. Windows without any track leave
/// no row, so the window grid is rebuilt over the truth time span.
fn track_sets(rows: Vec<TrackRow>, truth: &[TruthRecord], window: f64) -> Vec<TrackSet> {
    let start = truth.iter().map(|r| r.t).fold(f64::INFINITY, f64::min);
    let end = truth.iter().map(|r| r.t).fold(f64::NEG_INFINITY, f64::max);
    let mut sets: Vec<TrackSet> = Vec::new();
    if let Some(mut t) = rows.first().map(|r| r.t) {
        while t - window >= start - 1e-9 {
            t -= window;
        }
        while t <= end + 1e-9 {
            sets.push(TrackSet { timestamp: t, states: Vec::new() });
            t += window;
        }
    }
    for r in rows {
        let state = TrackState { label: r.label, x: r.x, y: r.y, vx: r.vx, vy: r.vy };
        match sets.iter_mut().find(|s| (s.timestamp - r.t).abs() < 1e-6) {
            Some(s) => s.states.push(state),
            None => sets.push(TrackSet { timestamp: r.t, states: vec![state] }),
        }
    }
    sets.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    sets
}

fn evaluate_cmd(
    tracks: &Path,
    truth: &Path,
    out: &Path,
    cdf: Option<&Path>,
    torso_radius: f64,
    tolerance: f64,
) -> Result<()> {
    let truth: Vec<TruthRecord> = read_csv::<TruthRow>(truth)
        .context("truth")?
        .into_iter()
        .map(|r| TruthRecord { t: r.t, id: r.id, x: r.x, y: r.y })
        .collect();
    let rows: Vec<TrackRow> = read_csv(tracks).context("tracks")?;
    let window = infer_window(&rows).unwrap_or(0.1);
    let sets = track_sets(rows, &truth, window);
    let report = evaluate(&sets, &truth, torso_radius, tolerance).context("evaluate")?;
    fs::write(out, serde_json::to_string_pretty(&report)?).context("output")?;
    if let Some(path) = cdf {
        let mut w = csv::Writer::from_path(path).context("output")?;
        w.write_record(["error", "fraction"])?;
        for (e, p) in report.cdf() {
            w.serialize((e, p))?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Smallest positive gap between consecutive track timestamps.
fn infer_window(rows: &[TrackRow]) -> Option<f64> {
    let mut ts: Vec<f64> = rows.iter().map(|r| r.t).collect();
    ts.sort_by(f64::total_cmp);
    ts.dedup_by(|a, b| (*a - *b).abs() < 1e-6);
    ts.windows(2).map(|w| w[1] - w[0]).min_by(f64::total_cmp)
}

#[allow(clippy::too_many_arguments)]
fn bench_latency(
    csi: Option<&Path>,
    scene: Option<&Path>,
    params: Option<&Path>,
    config: Option<&Path>,
    repetitions: usize,
    warmup: usize,
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config).context("config")?;
    let (array, windows) = match (csi, scene) {
        (Some(p), _) => {
            let reader = CsiReader::open(p).context("input")?;
            let array = reader.array().clone();
            let n_t = cfg.window_len(array.sample_rate_hz());
            let mut windows = Vec::new();
            for_each_window(reader, n_t, array.sample_interval(), |w| {
                windows.push(w);
                Ok(())
            })?;
            (array, windows)
        }
        (None, Some(p)) => {
            let spec = load_scene(p, seed).context("input")?;
            let (mut sim, _) = spec.build().context("input")?;
            let n = (spec.duration / (sim.window_len() as f64 * sim.array.sample_interval())).round() as usize;
            let windows = (0..n)
                .map(|_| sim.next_window().map(|w| w.0))
                .collect::<Result<Vec<_>, _>>()
                .context("input")?;
            (sim.array.clone(), windows)
        }
        (None, None) => return Err(anyhow!("input: need --csi or --scene")),
    };
    let params = load_params(params, array.n_antennas()).context("calibration")?;
    let mut pipeline = Pipeline::new(&array, &params, cfg)?;
    let summary = latency_benchmark(&mut pipeline, &windows, repetitions.max(1), warmup)?;
    let json = serde_json::to_string_pretty(&summary)?;
    match out {
        Some(p) => fs::write(p, json).context("output")?,
        None => println!("{json}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            scene,
            out,
            truth,
            calibration_out,
            rp_out,
            rp_grid,
            uplink_target,
            seed,
        } => {
            let cal = calibration_out.as_deref().zip(rp_out.as_deref()).map(|(c, r)| (c, r, rp_grid));
            simulate(&scene, &out, truth.as_deref(), cal, uplink_target, seed)
        }
        Command::Calibrate { csi, rps, out } => calibrate(&csi, &rps, &out),
        Command::Track {
            csi,
            params,
            config,
            out,
        } => track(&csi, params.as_deref(), config.as_deref(), &out),
        Command::BenchmarkTrack {
            csi,
            ue,
            config,
            out,
            seed,
        } => benchmark_track(&csi, ue, config.as_deref(), &out, seed),
        Command::Evaluate {
            tracks,
            truth,
            out,
            cdf,
            torso_radius,
            tolerance,
        } => evaluate_cmd(&tracks, &truth, &out, cdf.as_deref(), torso_radius, tolerance),
        Command::BenchLatency {
            csi,
            scene,
            params,
            config,
            repetitions,
            warmup,
            out,
            seed,
        } => bench_latency(
            csi.as_deref(),
            scene.as_deref(),
            params.as_deref(),
            config.as_deref(),
            repetitions,
            warmup,
            out.as_deref(),
            seed,
        ),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
