//! Synthetic CSI generator with static multipath, cylindrical-torso
//! scatterers, receiver noise and optional hardware phase impairments.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationParams, FrequencyErrors};
use crate::csi::{CsiFrame, CsiWindow};
use crate::error::{CalibrationError, GeometryError};
use crate::geometry::{distance3, AntennaArray, Point2, Point3, Room, SPEED_OF_LIGHT};

const STATIC_STREAM: u64 = u64::MAX - 1;
const MOTION_STREAM: u64 = u64::MAX - 2;
const IMPAIRMENT_STREAM: u64 = u64::MAX - 3;
const CALIBRATION_STREAM: u64 = u64::MAX - 4;

/// Maximum pedestrian speed, m/s.
pub const MAX_SPEED: f64 = 3.0;

fn default_rcs() -> f64 {
    1.0
}

fn default_radius() -> f64 {
    0.2
}

/// A person modelled as a vertical cylinder of radius `torso_radius`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub id: u32,
    pub position: Point2,
    #[serde(default)]
    pub velocity: Point2,
    #[serde(default = "default_radius")]
    pub torso_radius: f64,
    #[serde(default = "default_rcs")]
    pub rcs_gain: f64,
    /// Optional closed polyline followed at `speed`; overrides `velocity`.
    #[serde(default)]
    pub waypoints: Vec<Point2>,
    #[serde(default)]
    pub speed: Option<f64>,
    #[serde(skip)]
    next_waypoint: usize,
}

impl Target {
    pub fn new(id: u32, position: Point2, velocity: Point2, torso_radius: f64) -> Self {
        Self {
            id,
            position,
            velocity,
            torso_radius,
            rcs_gain: 1.0,
            waypoints: Vec::new(),
            speed: None,
            next_waypoint: 0,
        }
    }

    /// Target walking from `start` through `waypoints`, cycling forever.
    pub fn following(id: u32, start: Point2, waypoints: Vec<Point2>, speed: f64) -> Self {
        let mut t = Self::new(id, start, [0.0, 0.0], 0.2);
        t.waypoints = waypoints;
        t.speed = Some(speed);
        t.aim_at_waypoint();
        t
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(0.10..=0.40).contains(&self.torso_radius) {
            return Err(GeometryError::InvalidParameter(format!(
                "target {}: torso radius {} outside [0.10, 0.40] m",
                self.id, self.torso_radius
            )));
        }
        let speed = self.speed.unwrap_or(self.velocity[0].hypot(self.velocity[1]));
        if !(speed <= MAX_SPEED) {
            return Err(GeometryError::InvalidParameter(format!(
                "target {}: speed {speed} m/s exceeds {MAX_SPEED}",
                self.id
            )));
        }
        let finite = self.position.iter().chain(&self.velocity).all(|v| v.is_finite())
            && self.rcs_gain.is_finite()
            && self.waypoints.iter().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(GeometryError::NonFinite("target state"));
        }
        Ok(())
    }

    fn aim_at_waypoint(&mut self) {
        let (Some(speed), false) = (self.speed, self.waypoints.is_empty()) else {
            return;
        };
        let goal = self.waypoints[self.next_waypoint % self.waypoints.len()];
        let (dx, dy) = (goal[0] - self.position[0], goal[1] - self.position[1]);
        let n = dx.hypot(dy);
        self.velocity = if n > 1e-12 {
            [speed * dx / n, speed * dy / n]
        } else {
            [0.0, 0.0]
        };
    }

    /// Position after `dt` seconds of straight-line motion.
    pub fn position_at(&self, dt: f64) -> Point2 {
        [
            self.position[0] + self.velocity[0] * dt,
            self.position[1] + self.velocity[1] * dt,
        ]
    }
}

/// Point on the torso surface nearest `toward`, at the torso height.
pub fn scatter_point(center: Point3, radius: f64, toward: &Point3) -> Result<Point3, GeometryError> {
    if radius == 0.0 {
        return Ok(center);
    }
    let (dx, dy) = (toward[0] - center[0], toward[1] - center[1]);
    let n = dx.hypot(dy);
    if n <= radius {
        return Err(GeometryError::Degenerate(format!(
            "observer {toward:?} is inside the torso at {center:?}"
        )));
    }
    Ok([
        center[0] + radius * dx / n,
        center[1] + radius * dy / n,
        center[2],
    ])
}

/// First-order change of the bistatic path length over `t` seconds:
/// `-(u_rx + u_tx) . v * t`, with `u_x` the unit vector from `x` toward the
/// scatter point.
pub fn doppler_path_delta(
    scatter: &Point3,
    velocity: Point2,
    rx: &Point3,
    tx: &Point3,
    t: f64,
) -> Result<f64, GeometryError> {
    let mut sum = [0.0; 3];
    for x in [rx, tx] {
        let d = distance3(scatter, x);
        if d < 1e-9 {
            return Err(GeometryError::Degenerate("target coincides with an antenna".into()));
        }
        for k in 0..3 {
            sum[k] += (scatter[k] - x[k]) / d;
        }
    }
    Ok(-(sum[0] * velocity[0] + sum[1] * velocity[1]) * t)
}

/// Static background: one complex gain per (antenna, subcarrier).
#[derive(Debug, Clone, PartialEq)]
pub struct StaticField {
    pub gains: Vec<Complex64>,
    pub reflectors: Vec<(Point3, f64)>,
}

/// Adds `amplitude * exp(-j 2 pi (fc + f_k) d / c)` across subcarriers.
fn add_path(row: &mut [Complex64], amplitude: f64, d: f64, carrier: f64, offsets: &[f64]) {
    if offsets.is_empty() {
        return;
    }
    let k = -2.0 * PI * d / SPEED_OF_LIGHT;
    let base = Complex64::from_polar(amplitude, k * (carrier + offsets[0]));
    if offsets.len() == 1 {
        row[0] += base;
        return;
    }
    // offsets are uniformly spaced: advance by a fixed rotation
    let step = Complex64::from_polar(1.0, k * (offsets[1] - offsets[0]));
    let mut z = base;
    for (i, r) in row.iter_mut().enumerate() {
        if i % 32 == 0 {
            z = Complex64::from_polar(amplitude, k * (carrier + offsets[i]));
        }
        *r += z;
        z *= step;
    }
}

impl StaticField {
    /// LoS from `tx` plus `n_reflectors` single-bounce point reflectors
    /// placed at random inside the room.
    pub fn generate(array: &AntennaArray, room: &Room, tx: &Point3, n_reflectors: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STATIC_STREAM);
        let reflectors: Vec<(Point3, f64)> = (0..n_reflectors)
            .map(|_| {
                let p = [
                    rng.random_range(0.0..room.width),
                    rng.random_range(0.0..room.depth),
                    rng.random_range(0.3..2.5),
                ];
                (p, rng.random_range(0.3..1.0))
            })
            .collect();
        let gains = Self::channel(array, tx, &reflectors);
        Self { gains, reflectors }
    }

    /// Channel from a transmitter at `tx` through LoS and the reflectors.
    pub fn channel(array: &AntennaArray, tx: &Point3, reflectors: &[(Point3, f64)]) -> Vec<Complex64> {
        let nf = array.n_subcarriers();
        let offsets = array.subcarrier_offsets();
        let mut gains = vec![Complex64::new(0.0, 0.0); array.n_antennas() * nf];
        for (a, rx) in array.positions().iter().enumerate() {
            let row = &mut gains[a * nf..(a + 1) * nf];
            let d = distance3(tx, rx);
            add_path(row, 1.0 / d, d, array.carrier_hz(), &offsets);
            for (p, g) in reflectors {
                let d = distance3(tx, p) + distance3(p, rx);
                add_path(row, g / d, d, array.carrier_hz(), &offsets);
            }
        }
        gains
    }

    pub fn zero(array: &AntennaArray) -> Self {
        Self {
            gains: vec![Complex64::new(0.0, 0.0); array.n_antennas() * array.n_subcarriers()],
            reflectors: Vec::new(),
        }
    }
}

/// Ground-truth scene state at time `time`.
#[derive(Debug, Clone)]
pub struct Scene {
    pub targets: Vec<Target>,
    pub static_field: StaticField,
    pub noise_std: f64,
    pub rng_seed: u64,
    pub target_height: f64,
    /// Process noise on velocity, m/s per second.
    pub velocity_noise: f64,
    /// Targets bounce off these walls (with a margin) when set.
    pub bounds: Option<Room>,
    pub time: f64,
    motion_rng: ChaCha8Rng,
}

impl Scene {
    pub fn new(
        targets: Vec<Target>,
        static_field: StaticField,
        noise_std: f64,
        rng_seed: u64,
        target_height: f64,
    ) -> Result<Self, GeometryError> {
        for t in &targets {
            t.validate()?;
        }
        if !(noise_std >= 0.0) || !target_height.is_finite() {
            return Err(GeometryError::InvalidParameter(
                "noise_std must be >= 0 and target height finite".into(),
            ));
        }
        let mut motion_rng = ChaCha8Rng::seed_from_u64(rng_seed);
        motion_rng.set_stream(MOTION_STREAM);
        Ok(Self {
            targets,
            static_field,
            noise_std,
            rng_seed,
            target_height,
            velocity_noise: 0.0,
            bounds: None,
            time: 0.0,
            motion_rng,
        })
    }

    /// Scene in the default room with a randomly drawn static field.
    pub fn in_room(
        array: &AntennaArray,
        targets: Vec<Target>,
        n_reflectors: usize,
        noise_std: f64,
        seed: u64,
    ) -> Result<Self, GeometryError> {
        let room = Room::default();
        let field = StaticField::generate(array, &room, &array.tx_position(), n_reflectors, seed);
        let mut scene = Self::new(targets, field, noise_std, seed, 1.0)?;
        scene.bounds = Some(room);
        Ok(scene)
    }

    /// Truth positions of all targets `dt` seconds after `self.time`.
    pub fn positions_at(&self, t: f64) -> Vec<(u32, Point2)> {
        self.targets
            .iter()
            .map(|tg| (tg.id, tg.position_at(t - self.time)))
            .collect()
    }
}

/// Per-antenna dynamic contribution of all targets at absolute time `t`.
fn dynamic_row(
    scene: &Scene,
    array: &AntennaArray,
    antenna: usize,
    t: f64,
    offsets: &[f64],
    row: &mut [Complex64],
) -> Result<(), GeometryError> {
    let tx = array.tx_position();
    let rx = array.positions()[antenna];
    for tg in &scene.targets {
        let p = tg.position_at(t - scene.time);
        let center = [p[0], p[1], scene.target_height];
        let s = scatter_point(center, tg.torso_radius, &tx)?;
        let d = distance3(&s, &tx) + distance3(&s, &rx);
        add_path(row, tg.rcs_gain / d, d, array.carrier_hz(), offsets);
    }
    Ok(())
}

/// Generates `n_t` frames starting at `t0`, with targets moving linearly
/// from their state at `scene.time`.
pub fn simulate_window(
    scene: &Scene,
    array: &AntennaArray,
    t0: f64,
    n_t: usize,
) -> Result<CsiWindow, GeometryError> {
    if n_t == 0 {
        return Err(GeometryError::InvalidParameter("n_t must be >= 1".into()));
    }
    let (na, nf) = (array.n_antennas(), array.n_subcarriers());
    if scene.static_field.gains.len() != na * nf {
        return Err(GeometryError::DimensionMismatch {
            expected: format!("{na}x{nf} static field"),
            got: format!("{} entries", scene.static_field.gains.len()),
        });
    }
    let dt = array.sample_interval();
    let offsets = array.subcarrier_offsets();
    let start_index = (t0 / dt).round().max(0.0) as u64;
    let normal = Normal::new(0.0, scene.noise_std / 2f64.sqrt())
        .map_err(|e| GeometryError::InvalidParameter(e.to_string()))?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(scene.rng_seed);
    noise_rng.set_stream(start_index);

    let mut frames = Vec::with_capacity(n_t);
    for i in 0..n_t {
        let t = t0 + i as f64 * dt;
        let mut h = scene.static_field.gains.clone();
        h.par_chunks_mut(nf)
            .enumerate()
            .try_for_each(|(a, row)| dynamic_row(scene, array, a, t, &offsets, row))?;
        if scene.noise_std > 0.0 {
            for v in h.iter_mut() {
                *v += Complex64::new(normal.sample(&mut noise_rng), normal.sample(&mut noise_rng));
            }
        }
        frames.push(CsiFrame::new(t, 0, na, nf, h)?);
    }
    CsiWindow::new(frames, dt)
}

/// Multiplies every entry by the hardware phase error of `params`.
pub fn apply_impairments(
    window: &CsiWindow,
    params: &CalibrationParams,
) -> Result<CsiWindow, CalibrationError> {
    let Some(first) = window.frames().first() else {
        return Ok(window.clone());
    };
    let table = params.error_phasors(first.n_antennas(), first.n_subcarriers())?;
    let mut out = window.clone();
    for f in out.frames_mut() {
        apply_error_table(f, &table);
    }
    Ok(out)
}

pub(crate) fn apply_error_table(frame: &mut CsiFrame, table: &[Complex64]) {
    for (h, e) in frame.data_mut().iter_mut().zip(table) {
        *h *= e;
    }
}

/// Draws impairments of the magnitude seen on real radios.
pub fn random_impairments(n_antennas: usize, n_subcarriers: usize, seed: u64) -> CalibrationParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(IMPAIRMENT_STREAM);
    let bound = 0.5 * PI / (2.0 * n_subcarriers as f64);
    CalibrationParams {
        frequency: FrequencyErrors {
            eps_g: rng.random_range(0.9..1.1),
            eps_t: rng.random_range(-bound..bound),
            eps_p: rng.random_range(-0.1..0.1),
            sfo_sto: rng.random_range(-0.05..0.05),
            cpo: rng.random_range(-PI..PI),
        },
        ant_offsets: (0..n_antennas).map(|_| rng.random_range(-PI..PI)).collect(),
    }
}

/// Moves the scene forward by `dt` seconds.
///
/// Free-moving targets integrate their velocity and then receive a
/// Gaussian velocity kick of std `velocity_noise * dt` per axis. Waypoint
/// targets walk their polyline at constant speed instead.
pub fn advance_scene(scene: &mut Scene, dt: f64) {
    if dt <= 0.0 {
        return;
    }
    let sigma = scene.velocity_noise * dt;
    for tg in scene.targets.iter_mut() {
        if tg.speed.is_some() && !tg.waypoints.is_empty() {
            walk_polyline(tg, dt);
            continue;
        }
        tg.position = tg.position_at(dt);
        if sigma > 0.0 {
            for v in tg.velocity.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut scene.motion_rng);
                *v += sigma * n;
            }
        }
        let speed = tg.velocity[0].hypot(tg.velocity[1]);
        if speed > MAX_SPEED {
            tg.velocity = [tg.velocity[0] * MAX_SPEED / speed, tg.velocity[1] * MAX_SPEED / speed];
        }
        if let Some(room) = scene.bounds {
            let margin = 0.5;
            let lims = [room.width, room.depth];
            for k in 0..2 {
                if tg.position[k] < margin && tg.velocity[k] < 0.0
                    || tg.position[k] > lims[k] - margin && tg.velocity[k] > 0.0
                {
                    tg.velocity[k] = -tg.velocity[k];
                }
            }
        }
    }
    scene.time += dt;
}

fn walk_polyline(tg: &mut Target, dt: f64) {
    let speed = tg.speed.unwrap_or(0.0);
    let mut remaining = speed * dt;
    let n = tg.waypoints.len();
    for _ in 0..=4 * n {
        let goal = tg.waypoints[tg.next_waypoint % n];
        let (dx, dy) = (goal[0] - tg.position[0], goal[1] - tg.position[1]);
        let dist = dx.hypot(dy);
        if dist > remaining {
            tg.position = [
                tg.position[0] + remaining * dx / dist,
                tg.position[1] + remaining * dy / dist,
            ];
            break;
        }
        tg.position = goal;
        remaining -= dist;
        tg.next_waypoint = (tg.next_waypoint + 1) % n;
    }
    tg.aim_at_waypoint();
}

/// Ground-truth position of one target at one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub t: f64,
    pub id: u32,
    pub x: f64,
    pub y: f64,
}

/// Streams consecutive windows from an evolving scene.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub scene: Scene,
    pub array: AntennaArray,
    impairment_table: Option<Vec<Complex64>>,
    n_t: usize,
    next_index: u64,
}

impl Simulation {
    pub fn new(
        scene: Scene,
        array: AntennaArray,
        n_t: usize,
        impairments: Option<&CalibrationParams>,
    ) -> Result<Self, CalibrationError> {
        if n_t == 0 {
            return Err(GeometryError::InvalidParameter("window must hold >= 1 sample".into()).into());
        }
        let impairment_table = impairments
            .map(|p| p.error_phasors(array.n_antennas(), array.n_subcarriers()))
            .transpose()?;
        Ok(Self {
            scene,
            array,
            impairment_table,
            n_t,
            next_index: 0,
        })
    }

    /// Next window of frames plus the truth at each frame time.
    pub fn next_window(&mut self) -> Result<(CsiWindow, Vec<TruthRecord>), GeometryError> {
        let dt = self.array.sample_interval();
        let t0 = self.next_index as f64 * dt;
        self.scene.time = t0;
        let mut window = simulate_window(&self.scene, &self.array, t0, self.n_t)?;
        if let Some(table) = &self.impairment_table {
            for f in window.frames_mut() {
                apply_error_table(f, table);
            }
        }
        let truth = window
            .frames()
            .iter()
            .flat_map(|f| {
                self.scene.positions_at(f.timestamp).into_iter().map(move |(id, p)| TruthRecord {
                    t: f.timestamp,
                    id,
                    x: p[0],
                    y: p[1],
                })
            })
            .collect();
        advance_scene(&mut self.scene, self.n_t as f64 * dt);
        self.next_index += self.n_t as u64;
        Ok((window, truth))
    }

    pub fn window_len(&self) -> usize {
        self.n_t
    }
}

/// Uplink CSI of a UE transmitting from `ue` (used for calibration and the
/// active benchmark): LoS plus the static reflectors, with noise.
pub fn uplink_frame(
    array: &AntennaArray,
    ue: &Point3,
    reflectors: &[(Point3, f64)],
    t: f64,
    ue_id: u32,
    noise_std: f64,
    rng: &mut ChaCha8Rng,
) -> Result<CsiFrame, GeometryError> {
    let mut h = StaticField::channel(array, ue, reflectors);
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std / 2f64.sqrt())
            .map_err(|e| GeometryError::InvalidParameter(e.to_string()))?;
        for v in h.iter_mut() {
            *v += Complex64::new(normal.sample(rng), normal.sample(rng));
        }
    }
    CsiFrame::new(t, ue_id, array.n_antennas(), array.n_subcarriers(), h)
}

/// One impaired uplink frame per reference point, as recorded for
/// calibration. Noise draws are seeded by `seed`.
pub fn calibration_recording(
    array: &AntennaArray,
    impairments: &CalibrationParams,
    reference_points: &[Point3],
    reflectors: &[(Point3, f64)],
    noise_std: f64,
    seed: u64,
) -> Result<Vec<CsiFrame>, CalibrationError> {
    let table = impairments.error_phasors(array.n_antennas(), array.n_subcarriers())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(CALIBRATION_STREAM);
    let dt = array.sample_interval();
    reference_points
        .iter()
        .enumerate()
        .map(|(i, rp)| {
            let mut f = uplink_frame(array, rp, reflectors, i as f64 * dt, 0, noise_std, &mut rng)?;
            apply_error_table(&mut f, &table);
            Ok(f)
        })
        .collect()
}

/// Reference points on a regular `n x n` lattice inside the room.
pub fn reference_points(room: &Room, n_per_side: usize, height: f64) -> Vec<Point3> {
    let mut out = Vec::with_capacity(n_per_side * n_per_side);
    for iy in 0..n_per_side {
        for ix in 0..n_per_side {
            out.push([
                room.width * (ix as f64 + 1.0) / (n_per_side as f64 + 1.0),
                room.depth * (iy as f64 + 1.0) / (n_per_side as f64 + 1.0),
                height,
            ]);
        }
    }
    out
}

fn d_duration() -> f64 {
    10.0
}
fn d_reflectors() -> usize {
    5
}
fn d_height() -> f64 {
    1.0
}
fn d_window() -> f64 {
    0.1
}

/// JSON scene description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    #[serde(default = "d_duration")]
    pub duration: f64,
    pub targets: Vec<Target>,
    #[serde(default = "d_reflectors")]
    pub n_reflectors: usize,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub velocity_noise: f64,
    #[serde(default = "d_height")]
    pub target_height: f64,
    #[serde(default = "d_window")]
    pub window: f64,
    #[serde(default)]
    pub impairments: Option<CalibrationParams>,
    #[serde(default)]
    pub random_impairments: bool,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to the 64-antenna distributed room layout.
    #[serde(default)]
    pub array: Option<AntennaArray>,
}

impl SceneSpec {
    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn array(&self) -> Result<AntennaArray, GeometryError> {
        match &self.array {
            None => Ok(AntennaArray::distributed_room()),
            // re-run validation on deserialized input
            Some(a) => AntennaArray::with_wavelength(
                a.positions().to_vec(),
                a.tx_position(),
                a.wavelength(),
                a.carrier_hz(),
                a.bandwidth_hz(),
                a.n_subcarriers(),
                a.sample_rate_hz(),
            ),
        }
    }

    /// Builds the streaming simulation and returns the injected impairments.
    pub fn build(&self) -> Result<(Simulation, Option<CalibrationParams>), CalibrationError> {
        let array = self.array()?;
        let mut targets = self.targets.clone();
        for t in targets.iter_mut() {
            t.aim_at_waypoint();
        }
        let room = Room::default();
        let field = StaticField::generate(&array, &room, &array.tx_position(), self.n_reflectors, self.seed);
        let mut scene = Scene::new(targets, field, self.noise_std, self.seed, self.target_height)?;
        scene.velocity_noise = self.velocity_noise;
        scene.bounds = Some(room);
        let impairments = match (&self.impairments, self.random_impairments) {
            (Some(p), _) => Some(p.clone()),
            (None, true) => Some(random_impairments(array.n_antennas(), array.n_subcarriers(), self.seed)),
            (None, false) => None,
        };
        let n_t = crate::csi::window_len(self.window, array.sample_rate_hz()).max(1);
        let sim = Simulation::new(scene, array, n_t, impairments.as_ref())?;
        Ok((sim, impairments))
    }
}
