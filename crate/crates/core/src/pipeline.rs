//! Window-by-window contact-free tracking: calibration, background removal,
//! per-antenna ToI extraction, sparse localization and GM-PHD filtering.

use std::time::Instant;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::calibration::{apply_correction_table, CalibrationParams};
use crate::cbcs::{cbcs_solve, extract_locations, merge_measurements, CbcsConfig, Dictionary, MeasurementSet};
use crate::csi::{CsiFrame, CsiWindow};
use crate::error::{CbcsError, StageError};
use crate::geometry::{AntennaArray, Grid2D, Room};
use crate::gmphd::{GmphdConfig, TrackSet, Tracker};
use crate::toi::{extract_window, BackgroundRemover, DftPlans};

/// Which receive antennas feed the tracker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AntennaSelection {
    All,
    /// The first `n` antennas in index order.
    Sequential(usize),
    /// `n` antennas spread over the eight linear arrays of the room layout.
    Distributed(usize),
    Explicit(Vec<usize>),
}

impl AntennaSelection {
    /// Zero-based antenna indices for an array of `total` elements.
    pub fn indices(&self, total: usize) -> Result<Vec<usize>, String> {
        let idx: Vec<usize> = match self {
            Self::All => (0..total).collect(),
            Self::Sequential(n) => (0..*n).collect(),
            Self::Distributed(n) => distributed_indices(*n, total)?,
            Self::Explicit(v) => v.clone(),
        };
        if idx.is_empty() {
            return Err("antenna selection is empty".into());
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= total) {
            return Err(format!("antenna index {bad} out of range for {total} antennas"));
        }
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != idx.len() {
            return Err("antenna selection has duplicates".into());
        }
        Ok(idx)
    }
}

/// Eight antennas are the middle pair of every other array; larger
/// multiples of eight take a centred run from each of the eight arrays.
fn distributed_indices(n: usize, total: usize) -> Result<Vec<usize>, String> {
    const ARRAYS: usize = 8;
    if total % ARRAYS != 0 || n == 0 || n % ARRAYS != 0 || n > total {
        return Err(format!("distributed selection needs a multiple of 8 antennas up to {total}, got {n}"));
    }
    let per_array = total / ARRAYS;
    if n == ARRAYS {
        let start = (per_array - 2) / 2;
        return Ok((0..ARRAYS)
            .step_by(2)
            .flat_map(|a| [a * per_array + start, a * per_array + start + 1])
            .collect());
    }
    let k = n / ARRAYS;
    let start = (per_array - k) / 2;
    Ok((0..ARRAYS)
        .flat_map(|a| (0..k).map(move |e| a * per_array + start + e))
        .collect())
}

/// End-to-end tracker settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Location update window, s.
    pub window: f64,
    /// Background averaging window, s.
    pub avg_window: f64,
    pub room: Room,
    pub grid_cell: f64,
    pub target_height: f64,
    /// Average subcarriers before ToI extraction.
    pub fast_path: bool,
    pub antennas: AntennaSelection,
    pub n_doppler: usize,
    pub p_th_db: f64,
    pub cbcs: CbcsConfig,
    /// Relative magnitude floor for turning coefficients into locations.
    pub magnitude_floor: f64,
    /// Measurements closer than this to a stronger one are merged into it, m.
    pub merge_radius: f64,
    /// Windows whose ToI RMS is below this fraction of the background RMS
    /// carry no measurements.
    pub presence_threshold: f64,
    pub gmphd: GmphdConfig,
    pub latency_budget_ms: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            window: 0.1,
            avg_window: 1.0,
            room: Room::default(),
            grid_cell: 0.05,
            target_height: 1.0,
            fast_path: false,
            antennas: AntennaSelection::All,
            n_doppler: 128,
            p_th_db: 30.0,
            cbcs: CbcsConfig::default(),
            magnitude_floor: 0.3,
            merge_radius: 0.45,
            presence_threshold: 1e-6,
            gmphd: GmphdConfig::default(),
            latency_budget_ms: 100.0,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn window_len(&self, sample_rate: f64) -> usize {
        crate::csi::window_len(self.window, sample_rate)
    }

    pub fn validate(&self, array: &AntennaArray) -> Result<(), StageError> {
        let cfg = |m: String| StageError::new("config", m);
        if self.window_len(array.sample_rate_hz()) < 2 {
            return Err(cfg(format!(
                "window {} s at {} Hz spans fewer than 2 samples",
                self.window,
                array.sample_rate_hz()
            )));
        }
        if !(self.grid_cell > 0.0) || !(self.magnitude_floor > 0.0 && self.magnitude_floor <= 1.0) {
            return Err(cfg("grid cell must be > 0 and magnitude floor in (0, 1]".into()));
        }
        if !(self.merge_radius >= 0.0) {
            return Err(cfg("merge radius must be >= 0".into()));
        }
        if self.n_doppler < self.window_len(array.sample_rate_hz()) {
            return Err(cfg("Doppler grid must be at least the window length".into()));
        }
        Ok(())
    }
}

/// Wall-clock time of each stage for one window, ms.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub stages: Vec<(String, f64)>,
    pub total_ms: f64,
}

impl StageTimings {
    fn push(&mut self, stage: &str, since: Instant) -> Instant {
        let now = Instant::now();
        self.stages.push((stage.to_string(), (now - since).as_secs_f64() * 1e3));
        now
    }

    pub fn get(&self, stage: &str) -> Option<f64> {
        self.stages.iter().find(|(s, _)| s == stage).map(|(_, v)| *v)
    }
}

/// Result of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowOutput {
    pub tracks: TrackSet,
    pub measurements: MeasurementSet,
    /// SICAR iterations per antenna; empty while the background warms up.
    pub toi_iterations: Vec<usize>,
    pub timings: StageTimings,
}

/// Stateful tracker over consecutive windows.
pub struct Pipeline {
    cfg: PipelineConfig,
    antennas: Vec<usize>,
    correction: Vec<Complex64>,
    full_antennas: usize,
    n_subcarriers: usize,
    grid: Grid2D,
    dict: Dictionary,
    plans: DftPlans,
    background: BackgroundRemover,
    tracker: Tracker,
}

impl Pipeline {
    pub fn new(array: &AntennaArray, params: &CalibrationParams, cfg: PipelineConfig) -> Result<Self, StageError> {
        cfg.validate(array)?;
        let antennas = cfg
            .antennas
            .indices(array.n_antennas())
            .map_err(|m| StageError::new("config", m))?;
        let correction = params
            .error_phasors(array.n_antennas(), array.n_subcarriers())
            .map_err(|e| StageError::new("calibration", e))?;
        let sub = array.subset(&antennas).map_err(|e| StageError::new("config", e))?;
        let grid = Grid2D::covering(&cfg.room, cfg.grid_cell, cfg.target_height)
            .map_err(|e| StageError::new("config", e))?;
        let dict = Dictionary::build(&grid, &sub).map_err(|e| StageError::new("cbcs", e))?;
        let n_t = cfg.window_len(array.sample_rate_hz());
        let n_f = if cfg.fast_path { 1 } else { array.n_subcarriers() };
        let plans = DftPlans::new(n_t, n_f, cfg.n_doppler, n_f, cfg.p_th_db).map_err(|e| StageError::new("toi", e))?;
        let background = BackgroundRemover::from_duration(cfg.avg_window, array.sample_rate_hz())
            .map_err(|e| StageError::new("background", e))?;
        let gm = GmphdConfig {
            dt: cfg.window,
            ..cfg.gmphd
        };
        let tracker = Tracker::new(gm).map_err(|e| StageError::new("gmphd", e))?;
        Ok(Self {
            cfg,
            antennas,
            correction,
            full_antennas: array.n_antennas(),
            n_subcarriers: array.n_subcarriers(),
            grid,
            dict,
            plans,
            background,
            tracker,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn antennas(&self) -> &[usize] {
        &self.antennas
    }

    pub fn tracker(&self) -> &Tracker {
        &self.tracker
    }

    /// Processes one window. On error the filter state is unchanged; the
    /// background average has still absorbed the window's frames.
    pub fn run_window(&mut self, window: &CsiWindow) -> Result<WindowOutput, StageError> {
        let frames = window.frames();
        if frames.len() != self.plans.n_t {
            return Err(StageError::new(
                "input",
                format!("window has {} frames, expected {}", frames.len(), self.plans.n_t),
            ));
        }
        if let Some(f) = frames
            .iter()
            .find(|f| f.n_antennas() != self.full_antennas || f.n_subcarriers() != self.n_subcarriers)
        {
            return Err(StageError::new(
                "input",
                format!(
                    "frame at {} s is {}x{}, expected {}x{}",
                    f.timestamp,
                    f.n_antennas(),
                    f.n_subcarriers(),
                    self.full_antennas,
                    self.n_subcarriers
                ),
            ));
        }
        let timestamp = frames[frames.len() / 2].timestamp;
        let start = Instant::now();
        let mut timings = StageTimings::default();

        let calibrated: Vec<CsiFrame> = frames
            .iter()
            .map(|f| apply_correction_table(f, &self.correction).select_antennas(&self.antennas))
            .collect();
        let t = timings.push("calibration", start);

        let mut warm = true;
        let mut bg_energy = 0.0;
        let dynamic: Vec<CsiFrame> = calibrated
            .iter()
            .map(|f| {
                let (out, w) = self.background.push(f);
                warm &= w;
                bg_energy += f
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(a, b)| (a - b).norm_sqr())
                    .sum::<f64>();
                out
            })
            .collect();
        let mut t = timings.push("background", t);

        let mut toi_iterations = Vec::new();
        let mut measurements = MeasurementSet {
            timestamp,
            points: Vec::new(),
        };
        if warm {
            let toi = extract_window(&dynamic, &self.plans, self.cfg.fast_path).map_err(|e| StageError::new("toi", e))?;
            t = timings.push("toi", t);
            toi_iterations = toi.iter().map(|e| e.iterations).collect();
            let y: Vec<Complex64> = toi.iter().map(|e| e.value).collect();
            let n_values = (calibrated.len() * calibrated[0].data().len()) as f64;
            let bg_rms = (bg_energy / n_values).sqrt();
            let toi_rms = (y.iter().map(|v| v.norm_sqr()).sum::<f64>() / y.len() as f64).sqrt();
            if toi_rms > self.cfg.presence_threshold * bg_rms {
                match cbcs_solve(&y, &self.dict, &self.cfg.cbcs) {
                    Ok(sol) => {
                        let raw = extract_locations(&sol.coefficients, &self.grid, self.cfg.magnitude_floor, timestamp);
                        measurements = merge_measurements(&raw, self.cfg.merge_radius);
                    }
                    Err(CbcsError::ZeroInput) => {}
                    Err(e) => return Err(StageError::new("cbcs", e)),
                }
            }
            t = timings.push("cbcs", t);
        }

        let tracks = self.tracker.step(&measurements).map_err(|e| StageError::new("gmphd", e))?;
        timings.push("gmphd", t);
        timings.total_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(WindowOutput {
            tracks,
            measurements,
            toi_iterations,
            timings,
        })
    }
}
