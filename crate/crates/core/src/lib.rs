//! Contact-free multi-target tracking from distributed massive-MIMO OFDM
//! channel state information.

pub mod calibration;
pub mod active;
pub mod assignment;
pub mod cbcs;
pub mod csi;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gmphd;
pub mod io;
pub mod latency;
pub mod pipeline;
pub mod simulator;
pub mod toi;

pub use calibration::{CalibrationDataset, CalibrationParams, FrequencyErrors};
pub use csi::{CsiFrame, CsiWindow};
pub use error::*;
pub use geometry::{AntennaArray, Grid2D, Point2, Point3, Room};
pub use simulator::{Scene, SceneSpec, Simulation, Target, TruthRecord};
pub use gmphd::{GaussianComponent, GmphdConfig, TrackSet, TrackState, Tracker};
pub use active::{ActiveTracker, PfConfig};
pub use eval::{compensated_error, EvaluationReport, LatencySummary};
pub use pipeline::{AntennaSelection, Pipeline, PipelineConfig, StageTimings, WindowOutput};
