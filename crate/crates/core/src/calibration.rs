//! Frequency- and antenna-domain phase calibration.
//!
//! Raw CSI carries a phase error that depends on the subcarrier index `n`
//! (1-based):
//!
//! ```text
//! e(n) = atan(eps_g * sin(n*eps_t + eps_p) / cos(n*eps_t)) + n*sfo_sto + cpo
//! ```
//!
//! plus a constant offset per receive antenna. Both are estimated once from
//! frames recorded with the UE at known reference points and reused for all
//! later captures.

use std::f64::consts::PI;

use nalgebra::{SMatrix, SVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::csi::CsiFrame;
use crate::error::CalibrationError;
use crate::geometry::{distance3, AntennaArray, Point3, SPEED_OF_LIGHT};

/// Wraps an angle into (-pi, pi].
pub fn wrap_phase(x: f64) -> f64 {
    let y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y <= -PI {
        y + 2.0 * PI
    } else {
        y
    }
}

/// 1-D phase unwrapping.
pub fn unwrap_phases(phases: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(phases.len());
    let mut offset = 0.0;
    for (i, &p) in phases.iter().enumerate() {
        if i > 0 {
            let d = p - phases[i - 1];
            offset -= 2.0 * PI * ((d + PI) / (2.0 * PI)).floor();
        }
        out.push(p + offset);
    }
    out
}

/// Phase error caused by I/Q imbalance at subcarrier `n_f`.
pub fn iq_phase(n_f: usize, eps_g: f64, eps_t: f64, eps_p: f64) -> Result<f64, CalibrationError> {
    let arg = n_f as f64 * eps_t;
    let c = arg.cos();
    if c.abs() < 1e-12 {
        return Err(CalibrationError::CosineSingularity { n_f });
    }
    Ok((eps_g * (arg + eps_p).sin() / c).atan())
}

/// Frequency-domain error vector `[eps_g, eps_t, eps_p, sfo_sto, cpo]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyErrors {
    pub eps_g: f64,
    pub eps_t: f64,
    pub eps_p: f64,
    pub sfo_sto: f64,
    pub cpo: f64,
}

impl Default for FrequencyErrors {
    fn default() -> Self {
        Self {
            eps_g: 1.0,
            eps_t: 0.0,
            eps_p: 0.0,
            sfo_sto: 0.0,
            cpo: 0.0,
        }
    }
}

impl FrequencyErrors {
    fn to_vector(self) -> SVector<f64, 5> {
        SVector::from([self.eps_g, self.eps_t, self.eps_p, self.sfo_sto, self.cpo])
    }

    fn from_vector(v: &SVector<f64, 5>) -> Self {
        Self {
            eps_g: v[0],
            eps_t: v[1],
            eps_p: v[2],
            sfo_sto: v[3],
            cpo: v[4],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }

    /// Total frequency-dependent phase at subcarrier `n_f` (1-based).
    pub fn phase(&self, n_f: usize) -> Result<f64, CalibrationError> {
        Ok(iq_phase(n_f, self.eps_g, self.eps_t, self.eps_p)?
            + n_f as f64 * self.sfo_sto
            + self.cpo)
    }

    /// Sum of squared wrapped residuals against a phase curve indexed from n_f = 1.
    pub fn residual(&self, curve: &[f64]) -> f64 {
        curve
            .iter()
            .enumerate()
            .map(|(i, &y)| match self.phase(i + 1) {
                Ok(p) => wrap_phase(y - p).powi(2),
                Err(_) => f64::INFINITY,
            })
            .sum()
    }
}

/// Full calibration state: frequency errors plus per-antenna offsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    #[serde(flatten)]
    pub frequency: FrequencyErrors,
    pub ant_offsets: Vec<f64>,
}

impl CalibrationParams {
    pub fn identity(n_antennas: usize) -> Self {
        Self {
            frequency: FrequencyErrors {
                eps_g: 1.0,
                ..FrequencyErrors::default()
            },
            ant_offsets: vec![0.0; n_antennas],
        }
    }

    /// All-zero error vector (eps_g = 0 switches the I/Q term off too).
    pub fn zero(n_antennas: usize) -> Self {
        Self {
            frequency: FrequencyErrors {
                eps_g: 0.0,
                ..FrequencyErrors::default()
            },
            ant_offsets: vec![0.0; n_antennas],
        }
    }

    /// Phase error `e(n_f) + phi_ant(n_r)` for every (antenna, subcarrier),
    /// antenna-major, as unit phasors.
    pub fn error_phasors(
        &self,
        n_antennas: usize,
        n_subcarriers: usize,
    ) -> Result<Vec<Complex64>, CalibrationError> {
        if self.ant_offsets.len() != n_antennas {
            return Err(CalibrationError::NotEnoughData {
                what: "antenna offsets",
                needed: n_antennas,
                got: self.ant_offsets.len(),
            });
        }
        let freq: Vec<f64> = (1..=n_subcarriers)
            .map(|n| self.frequency.phase(n))
            .collect::<Result<_, _>>()?;
        let mut out = Vec::with_capacity(n_antennas * n_subcarriers);
        for &ant in &self.ant_offsets {
            out.extend(freq.iter().map(|&f| Complex64::from_polar(1.0, f + ant)));
        }
        Ok(out)
    }

    pub fn save_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("params serialize")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Removes the calibrated phase error from a frame. Amplitudes are untouched.
pub fn apply_calibration(
    frame: &CsiFrame,
    params: &CalibrationParams,
) -> Result<CsiFrame, CalibrationError> {
    let table = params.error_phasors(frame.n_antennas(), frame.n_subcarriers())?;
    Ok(apply_correction_table(frame, &table))
}

/// Multiplies each entry by the conjugate of a precomputed error phasor.
pub fn apply_correction_table(frame: &CsiFrame, table: &[Complex64]) -> CsiFrame {
    let mut out = frame.clone();
    for (h, e) in out.data_mut().iter_mut().zip(table) {
        *h *= e.conj();
    }
    out
}

/// Reference-point recordings with LoS removed.
#[derive(Debug, Clone)]
pub struct CalibrationDataset {
    pub raw_frames: Vec<CsiFrame>,
    pub rp_positions: Vec<Point3>,
    n_antennas: usize,
    n_subcarriers: usize,
    /// Residual phase after LoS removal, indexed [rp][antenna][subcarrier].
    delta_phi: Vec<f64>,
}

impl CalibrationDataset {
    /// `raw_frames[i]` is the UE transmitting from `rp_positions[i]`.
    pub fn new(
        array: &AntennaArray,
        raw_frames: Vec<CsiFrame>,
        rp_positions: Vec<Point3>,
    ) -> Result<Self, CalibrationError> {
        if raw_frames.len() != rp_positions.len() {
            return Err(CalibrationError::NotEnoughData {
                what: "reference positions (one per frame)",
                needed: raw_frames.len(),
                got: rp_positions.len(),
            });
        }
        if raw_frames.len() < 2 {
            return Err(CalibrationError::NotEnoughData {
                what: "reference points",
                needed: 2,
                got: raw_frames.len(),
            });
        }
        let (na, nf) = (array.n_antennas(), array.n_subcarriers());
        let freqs: Vec<f64> = array
            .subcarrier_offsets()
            .iter()
            .map(|f| array.carrier_hz() + f)
            .collect();
        let mut delta_phi = Vec::with_capacity(raw_frames.len() * na * nf);
        for (frame, rp) in raw_frames.iter().zip(&rp_positions) {
            if !frame.matches(array) {
                return Err(crate::error::GeometryError::DimensionMismatch {
                    expected: format!("{na}x{nf}"),
                    got: format!("{}x{}", frame.n_antennas(), frame.n_subcarriers()),
                }
                .into());
            }
            for (a, pos) in array.positions().iter().enumerate() {
                let d = distance3(pos, rp);
                for (k, f) in freqs.iter().enumerate() {
                    let los = Complex64::from_polar(1.0, 2.0 * PI * f * d / SPEED_OF_LIGHT);
                    delta_phi.push((frame.get(a, k) * los).arg());
                }
            }
        }
        Ok(Self {
            raw_frames,
            rp_positions,
            n_antennas: na,
            n_subcarriers: nf,
            delta_phi,
        })
    }

    pub fn n_reference_points(&self) -> usize {
        self.rp_positions.len()
    }

    pub fn delta_phi(&self, rp: usize, antenna: usize, subcarrier: usize) -> f64 {
        self.delta_phi[(rp * self.n_antennas + antenna) * self.n_subcarriers + subcarrier]
    }

    /// Frequency-error curve shared by every antenna: each (RP, antenna)
    /// series is de-rotated by its own circular mean, the phasors are summed
    /// across series and the resulting angle is unwrapped along subcarriers.
    pub fn frequency_curve(&self) -> Vec<f64> {
        let nf = self.n_subcarriers;
        let mut acc = vec![Complex64::new(0.0, 0.0); nf];
        for series in self.delta_phi.chunks(nf) {
            let z: Vec<Complex64> = series.iter().map(|&p| Complex64::from_polar(1.0, p)).collect();
            let mean: Complex64 = z.iter().sum();
            let norm = mean.norm();
            if norm == 0.0 {
                continue;
            }
            let rot = mean.conj() / norm;
            for (a, v) in acc.iter_mut().zip(&z) {
                *a += v * rot;
            }
        }
        unwrap_phases(&acc.iter().map(|c| c.arg()).collect::<Vec<_>>())
    }
}

/// Result of the nonlinear regression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrequencyFit {
    pub errors: FrequencyErrors,
    pub residual: f64,
}

fn model_and_jacobian(p: &SVector<f64, 5>, n: usize) -> (f64, SVector<f64, 5>) {
    let (eg, et, ep) = (p[0], p[1], p[2]);
    let nf = n as f64;
    let c = (nf * et).cos();
    let u = nf * et + ep;
    let x = eg * u.sin() / c;
    let dphi = 1.0 / (1.0 + x * x);
    let model = x.atan() + nf * p[3] + p[4];
    let jac = SVector::from([
        dphi * u.sin() / c,
        dphi * eg * nf * ep.cos() / (c * c),
        dphi * eg * u.cos() / c,
        nf,
        1.0,
    ]);
    (model, jac)
}

fn linear_fit(curve: &[f64]) -> (f64, f64) {
    let n = curve.len() as f64;
    let xs = (1..=curve.len()).map(|v| v as f64);
    let mx = xs.clone().sum::<f64>() / n;
    let my = curve.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (x, y) in xs.zip(curve) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, my - slope * mx)
}

const LM_MAX_ITER: usize = 3000;

/// Damped Gauss-Newton from one start. Returns (params, cost, converged).
fn levenberg_marquardt(
    curve: &[f64],
    start: SVector<f64, 5>,
    eps_t_bound: f64,
) -> (SVector<f64, 5>, f64, bool) {
    let cost = |p: &SVector<f64, 5>| FrequencyErrors::from_vector(p).residual(curve);
    let mut p = start;
    let mut c = cost(&p);
    let mut lambda = 1e-3;
    let mut history = Vec::with_capacity(LM_MAX_ITER);
    for _ in 0..LM_MAX_ITER {
        history.push(c);
        let mut jtj = SMatrix::<f64, 5, 5>::zeros();
        let mut jtr = SVector::<f64, 5>::zeros();
        for (i, &y) in curve.iter().enumerate() {
            let (m, j) = model_and_jacobian(&p, i + 1);
            let r = wrap_phase(y - m);
            jtj += j * j.transpose();
            jtr += j * r;
        }
        let mut improved = false;
        while lambda < 1e12 {
            let mut a = jtj;
            for d in 0..5 {
                a[(d, d)] += lambda * (jtj[(d, d)] + 1e-9);
            }
            let Some(step) = a.lu().solve(&jtr) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial = p + step;
            trial[0] = trial[0].clamp(0.05, 20.0);
            trial[1] = trial[1].clamp(-eps_t_bound, eps_t_bound);
            let tc = cost(&trial);
            if tc < c {
                let rel = (c - tc) / c.max(1e-300);
                let small_step = step.norm() < 1e-12;
                p = trial;
                c = tc;
                lambda = (lambda / 10.0).max(1e-12);
                improved = true;
                if rel < 1e-12 || small_step || c < 1e-28 {
                    return (p, c, true);
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            // no descent direction left at any damping: a stationary point
            return (p, c, true);
        }
    }
    // slow creep along a bound or a flat gain/phase valley still counts as
    // converged once the cost moves by less than 0.1% over 20 iterations
    let earlier = history[history.len().saturating_sub(20)];
    (p, c, (earlier - c) <= 1e-3 * earlier.max(1e-300))
}

/// Nonlinear least-squares fit of the frequency-error vector to a residual
/// phase curve indexed from n_f = 1.
///
/// Multi-start damped least squares over a small grid of `eps_t` starts,
/// plus the pure linear model. Near-degenerate solutions (the I/Q term can
/// mimic a linear slope when `eps_t` is small) are resolved in favour of
/// the smallest `|eps_t|`.
pub fn fit_frequency_curve(curve: &[f64]) -> Result<FrequencyFit, CalibrationError> {
    if curve.len() < 5 {
        return Err(CalibrationError::NotEnoughData {
            what: "subcarriers",
            needed: 5,
            got: curve.len(),
        });
    }
    let n = curve.len();
    let eps_t_bound = 0.95 * PI / (2.0 * n as f64);
    let (slope, intercept) = linear_fit(curve);

    let linear = FrequencyErrors {
        eps_g: 1.0,
        eps_t: 0.0,
        eps_p: 0.0,
        sfo_sto: slope,
        cpo: intercept,
    };
    let mut candidates = vec![(linear, linear.residual(curve), true)];
    for k in [-2.0, -1.0, 0.0, 1.0, 2.0] {
        let start = SVector::from([1.0, k * 0.25 * eps_t_bound, 0.0, slope, intercept]);
        let (p, c, ok) = levenberg_marquardt(curve, start, eps_t_bound);
        candidates.push((FrequencyErrors::from_vector(&p), c, ok));
    }
    let best = candidates
        .iter()
        .map(|c| c.1)
        .fold(f64::INFINITY, f64::min);
    let tol = 1e-10 + 1e-6 * best;
    let chosen = candidates
        .iter()
        .filter(|c| c.1 <= best + tol)
        .min_by(|a, b| a.0.eps_t.abs().total_cmp(&b.0.eps_t.abs()))
        .expect("at least the linear candidate");
    if !chosen.2 {
        return Err(CalibrationError::NotConverged {
            iterations: LM_MAX_ITER,
            residual: chosen.1,
            best: chosen.0,
        });
    }
    Ok(FrequencyFit {
        errors: chosen.0,
        residual: chosen.1,
    })
}

/// Fits the frequency-domain errors from reference-point data.
pub fn fit_frequency_errors(
    dataset: &CalibrationDataset,
) -> Result<FrequencyErrors, CalibrationError> {
    Ok(fit_frequency_curve(&dataset.frequency_curve())?.errors)
}

/// Closed-form antenna offset: the angle of the summed residual phasors.
pub fn antenna_offset(residuals: impl IntoIterator<Item = f64>) -> Option<f64> {
    let s: Complex64 = residuals
        .into_iter()
        .map(|p| Complex64::from_polar(1.0, p))
        .sum();
    if s.norm() < 1e-12 {
        None
    } else {
        Some(wrap_phase(s.arg()))
    }
}

/// Per-antenna constant offsets after the frequency correction.
pub fn fit_antenna_offsets(
    dataset: &CalibrationDataset,
    frequency: &FrequencyErrors,
) -> Result<Vec<f64>, CalibrationError> {
    let nf = dataset.n_subcarriers;
    let freq: Vec<f64> = (1..=nf)
        .map(|n| frequency.phase(n))
        .collect::<Result<_, _>>()?;
    (0..dataset.n_antennas)
        .map(|a| {
            let residuals = (0..dataset.n_reference_points()).flat_map(|rp| {
                let freq = &freq;
                (0..nf).map(move |k| dataset.delta_phi(rp, a, k) - freq[k])
            });
            antenna_offset(residuals).ok_or(CalibrationError::UndefinedOffset { antenna: a })
        })
        .collect()
}

/// Runs both fits.
pub fn fit(dataset: &CalibrationDataset) -> Result<CalibrationParams, CalibrationError> {
    let frequency = fit_frequency_errors(dataset)?;
    let ant_offsets = fit_antenna_offsets(dataset, &frequency)?;
    Ok(CalibrationParams {
        frequency,
        ant_offsets,
    })
}

/// Mean absolute wrapped phase difference between measured CSI and the
/// ideal LoS phase from `tx` to every antenna, over antennas and subcarriers.
pub fn mean_los_phase_error(frame: &CsiFrame, array: &AntennaArray, tx: &Point3) -> f64 {
    let offsets = array.subcarrier_offsets();
    let mut sum = 0.0;
    for (a, pos) in array.positions().iter().enumerate() {
        let d = distance3(pos, tx);
        for (k, f) in offsets.iter().enumerate() {
            let ideal = -2.0 * PI * (array.carrier_hz() + f) * d / SPEED_OF_LIGHT;
            sum += wrap_phase(frame.get(a, k).arg() - ideal).abs();
        }
    }
    sum / (array.n_antennas() * array.n_subcarriers()) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn wrap_range() {
        assert_relative_eq!(wrap_phase(PI), PI);
        assert_relative_eq!(wrap_phase(-PI), PI);
        assert_relative_eq!(wrap_phase(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-12);
        let u = unwrap_phases(&[3.0, -3.0, -2.9]);
        assert_relative_eq!(u[1], -3.0 + 2.0 * PI, epsilon = 1e-12);
        assert_relative_eq!(u[2], -2.9 + 2.0 * PI, epsilon = 1e-12);
    }

    #[test]
    fn iq_phase_examples() {
        for n in 1..=100 {
            assert_eq!(iq_phase(n, 1.3, 0.0, 0.0).unwrap(), 0.0);
            let small = iq_phase(n, 1.0, 1e-4, 0.0).unwrap();
            assert_relative_eq!(small, n as f64 * 1e-4, epsilon = 1e-9);
        }
        // direct evaluation: 50 * 0.01 = 0.5; atan(1.2 * sin(0.55) / cos(0.5))
        let expected = (1.2 * 0.55f64.sin() / 0.5f64.cos()).atan();
        assert_relative_eq!(iq_phase(50, 1.2, 0.01, 0.05).unwrap(), expected, epsilon = 1e-15);
        assert_relative_eq!(expected, 0.6205361392630843, epsilon = 1e-12);
        assert!(matches!(
            iq_phase(1, 1.0, PI / 2.0, 0.0),
            Err(CalibrationError::CosineSingularity { n_f: 1 })
        ));
    }

    #[test]
    fn fit_zero_curve() {
        let fit = fit_frequency_curve(&[0.0; 100]).unwrap();
        let e = fit.errors;
        assert_eq!(e.eps_g, 1.0);
        assert!(e.eps_t.abs() < 1e-12 && e.eps_p.abs() < 1e-12);
        assert!(e.sfo_sto.abs() < 1e-12 && e.cpo.abs() < 1e-12);
    }

    #[test]
    fn fit_linear_curve() {
        let curve: Vec<f64> = (1..=100).map(|n| 0.003 * n as f64 + 0.4).collect();
        let fit = fit_frequency_curve(&curve).unwrap();
        assert_relative_eq!(fit.errors.sfo_sto, 0.003, epsilon = 1e-9);
        assert_relative_eq!(fit.errors.cpo, 0.4, epsilon = 1e-9);
        assert!(fit.errors.eps_t.abs() < 1e-9 && fit.errors.eps_p.abs() < 1e-9);
        assert!(fit.residual < 1e-9);
    }

    #[test]
    fn fit_recovers_nonlinear_curve() {
        let truth = FrequencyErrors {
            eps_g: 1.05,
            eps_t: 0.01,
            eps_p: 0.02,
            sfo_sto: -0.02,
            cpo: 0.3,
        };
        let curve: Vec<f64> = (1..=100).map(|n| truth.phase(n).unwrap()).collect();
        let fit = fit_frequency_curve(&curve).unwrap();
        assert!(fit.residual < 1e-12, "residual {}", fit.residual);
        let rms = ((1..=100)
            .map(|n| (fit.errors.phase(n).unwrap() - curve[n - 1]).powi(2))
            .sum::<f64>()
            / 100.0)
            .sqrt();
        assert!(rms < 1e-6);
    }

    #[test]
    fn fit_beats_random_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let truth = FrequencyErrors {
            eps_g: 0.9,
            eps_t: -0.006,
            eps_p: 0.1,
            sfo_sto: 0.01,
            cpo: -1.0,
        };
        let curve: Vec<f64> = (1..=100)
            .map(|n| truth.phase(n).unwrap() + rng.random_range(-0.05..0.05))
            .collect();
        let fit = fit_frequency_curve(&curve).unwrap();
        assert!(fit.residual <= FrequencyErrors { eps_g: 0.0, ..Default::default() }.residual(&curve));
        for _ in 0..100 {
            let draw = FrequencyErrors {
                eps_g: rng.random_range(0.5..1.5),
                eps_t: rng.random_range(-0.015..0.015),
                eps_p: rng.random_range(-0.5..0.5),
                sfo_sto: rng.random_range(-0.05..0.05),
                cpo: rng.random_range(-PI..PI),
            };
            assert!(fit.residual <= draw.residual(&curve) + 1e-12);
        }
    }

    #[test]
    fn too_few_subcarriers() {
        assert!(matches!(
            fit_frequency_curve(&[0.0; 4]),
            Err(CalibrationError::NotEnoughData { needed: 5, .. })
        ));
    }

    #[test]
    fn antenna_offset_examples() {
        assert_relative_eq!(antenna_offset(vec![0.7; 50]).unwrap(), 0.7, epsilon = 1e-12);
        let sym = [0.4, -0.4, 0.4, -0.4];
        assert_relative_eq!(antenna_offset(sym).unwrap(), 0.0, epsilon = 1e-12);
        assert!(antenna_offset([0.0, PI]).is_none());
    }

    #[test]
    fn antenna_offset_matches_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples: Vec<f64> = (0..400)
            .map(|_| wrap_phase(2.9 + rng.random_range(-0.6..0.6)))
            .collect();
        assert!(samples.iter().any(|&s| s < 0.0), "wraparound present");
        let objective = |phi: f64| {
            samples
                .iter()
                .map(|&s| Complex64::from_polar(1.0, s) - Complex64::from_polar(1.0, phi))
                .sum::<Complex64>()
                .norm_sqr()
        };
        let mut best = (f64::INFINITY, 0.0);
        let mut phi = -PI;
        while phi <= PI {
            let v = objective(phi);
            if v < best.0 {
                best = (v, phi);
            }
            phi += 1e-4;
        }
        let got = antenna_offset(samples.iter().copied()).unwrap();
        assert!(wrap_phase(got - best.1).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn calibration_inverts_impairment(
            eps_g in 0.5f64..1.5, eps_t in -0.015f64..0.015, eps_p in -0.5f64..0.5,
            sfo in -0.05f64..0.05, cpo in -PI..PI,
            offs in prop::collection::vec(-PI..PI, 3),
            vals in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 3 * 8),
        ) {
            let params = CalibrationParams {
                frequency: FrequencyErrors { eps_g, eps_t, eps_p, sfo_sto: sfo, cpo },
                ant_offsets: offs,
            };
            let h: Vec<Complex64> = vals.iter().map(|&(r, i)| Complex64::new(r, i)).collect();
            let frame = CsiFrame::new(0.0, 0, 3, 8, h).unwrap();
            let table = params.error_phasors(3, 8).unwrap();
            let mut impaired = frame.clone();
            for (v, e) in impaired.data_mut().iter_mut().zip(&table) {
                *v *= e;
            }
            let back = apply_calibration(&impaired, &params).unwrap();
            for ((a, b), c) in back.data().iter().zip(frame.data()).zip(impaired.data()) {
                prop_assert!((a - b).norm() <= 1e-6 * b.norm().max(1e-12));
                // phase-only correction
                prop_assert!((a.norm() - c.norm()).abs() <= 1e-12 * c.norm().max(1.0));
            }
        }
    }

    #[test]
    fn zero_params_are_identity() {
        let h: Vec<Complex64> = (0..6).map(|i| Complex64::new(i as f64, 1.0)).collect();
        let frame = CsiFrame::new(0.0, 0, 2, 3, h).unwrap();
        let out = apply_calibration(&frame, &CalibrationParams::zero(2)).unwrap();
        assert_eq!(out, frame);
    }

    #[test]
    fn params_json_schema() {
        let p = CalibrationParams::identity(2);
        let v: serde_json::Value = serde_json::from_str(&p.save_json()).unwrap();
        for key in ["eps_g", "eps_t", "eps_p", "sfo_sto", "cpo", "ant_offsets"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(CalibrationParams::from_json(&p.save_json()).unwrap(), p);
    }
}
