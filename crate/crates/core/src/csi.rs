use num_complex::Complex64;

use crate::error::GeometryError;
use crate::geometry::AntennaArray;

/// One CSI snapshot: a complex gain per (antenna, subcarrier), stored
/// antenna-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiFrame {
    pub timestamp: f64,
    pub ue_id: u32,
    n_antennas: usize,
    n_subcarriers: usize,
    h: Vec<Complex64>,
}

impl CsiFrame {
    pub fn new(
        timestamp: f64,
        ue_id: u32,
        n_antennas: usize,
        n_subcarriers: usize,
        h: Vec<Complex64>,
    ) -> Result<Self, GeometryError> {
        if h.len() != n_antennas * n_subcarriers {
            return Err(GeometryError::DimensionMismatch {
                expected: format!("{n_antennas}x{n_subcarriers}"),
                got: format!("{} entries", h.len()),
            });
        }
        if !timestamp.is_finite() || h.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(GeometryError::NonFinite("CSI frame"));
        }
        Ok(Self {
            timestamp,
            ue_id,
            n_antennas,
            n_subcarriers,
            h,
        })
    }

    pub fn zeros(timestamp: f64, ue_id: u32, n_antennas: usize, n_subcarriers: usize) -> Self {
        Self {
            timestamp,
            ue_id,
            n_antennas,
            n_subcarriers,
            h: vec![Complex64::new(0.0, 0.0); n_antennas * n_subcarriers],
        }
    }

    pub fn n_antennas(&self) -> usize {
        self.n_antennas
    }

    pub fn n_subcarriers(&self) -> usize {
        self.n_subcarriers
    }

    pub fn get(&self, antenna: usize, subcarrier: usize) -> Complex64 {
        self.h[antenna * self.n_subcarriers + subcarrier]
    }

    pub fn set(&mut self, antenna: usize, subcarrier: usize, v: Complex64) {
        self.h[antenna * self.n_subcarriers + subcarrier] = v;
    }

    pub fn antenna(&self, antenna: usize) -> &[Complex64] {
        let n = self.n_subcarriers;
        &self.h[antenna * n..(antenna + 1) * n]
    }

    pub fn antenna_mut(&mut self, antenna: usize) -> &mut [Complex64] {
        let n = self.n_subcarriers;
        &mut self.h[antenna * n..(antenna + 1) * n]
    }

    pub fn data(&self) -> &[Complex64] {
        &self.h
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.h
    }

    pub fn matches(&self, array: &AntennaArray) -> bool {
        self.n_antennas == array.n_antennas() && self.n_subcarriers == array.n_subcarriers()
    }

    /// Mean over subcarriers, one value per antenna.
    pub fn subcarrier_mean(&self) -> Vec<Complex64> {
        (0..self.n_antennas)
            .map(|a| {
                let row = self.antenna(a);
                row.iter().sum::<Complex64>() / row.len() as f64
            })
            .collect()
    }

    /// Keeps only the listed antennas, in the order given.
    pub fn select_antennas(&self, indices: &[usize]) -> Self {
        let mut h = Vec::with_capacity(indices.len() * self.n_subcarriers);
        for &a in indices {
            h.extend_from_slice(self.antenna(a));
        }
        Self {
            timestamp: self.timestamp,
            ue_id: self.ue_id,
            n_antennas: indices.len(),
            n_subcarriers: self.n_subcarriers,
            h,
        }
    }
}

/// Consecutive frames at a uniform sampling interval.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiWindow {
    frames: Vec<CsiFrame>,
}

impl CsiWindow {
    /// Validates ordering and spacing (uniform to within 1 us).
    pub fn new(frames: Vec<CsiFrame>, sample_interval: f64) -> Result<Self, GeometryError> {
        if let Some(first) = frames.first() {
            let (na, nf) = (first.n_antennas, first.n_subcarriers);
            for (i, f) in frames.iter().enumerate() {
                if f.n_antennas != na || f.n_subcarriers != nf {
                    return Err(GeometryError::DimensionMismatch {
                        expected: format!("{na}x{nf}"),
                        got: format!("{}x{} at frame {i}", f.n_antennas, f.n_subcarriers),
                    });
                }
            }
            for (i, w) in frames.windows(2).enumerate() {
                let dt = w[1].timestamp - w[0].timestamp;
                if dt <= 0.0 || (dt - sample_interval).abs() > 1e-6 {
                    return Err(GeometryError::InvalidParameter(format!(
                        "frame {} spacing {dt} s, expected {sample_interval} s",
                        i + 1
                    )));
                }
            }
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[CsiFrame] {
        &self.frames
    }

    pub fn frames_mut(&mut self) -> &mut [CsiFrame] {
        &mut self.frames
    }

    pub fn into_frames(self) -> Vec<CsiFrame> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn start_time(&self) -> Option<f64> {
        self.frames.first().map(|f| f.timestamp)
    }
}

/// Number of samples in a window of the given duration.
pub fn window_len(duration: f64, sample_rate: f64) -> usize {
    (duration * sample_rate).round() as usize
}
