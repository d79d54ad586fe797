//! Device-based tracking of a transmitting UE: synthetic-aperture matching
//! of calibrated uplink CSI, tracked with a particle filter.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::csi::CsiFrame;
use crate::error::TrackingError;
use crate::geometry::{distance3, AntennaArray, Point2, Room};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle {
    /// `[x, y, vx, vy]`
    pub state: [f64; 4],
    pub weight: f64,
}

impl Particle {
    pub fn position(&self) -> Point2 {
        [self.state[0], self.state[1]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PfConfig {
    pub n_particles: usize,
    pub sigma_v: f64,
    /// Fixed score spread; `None` uses the std of the current scores.
    pub sigma_c: Option<f64>,
    /// Resample when the effective sample size drops below this fraction.
    pub resample_threshold: f64,
    pub known_height: f64,
    /// Cell of the initial exhaustive search, m.
    pub init_cell: f64,
    /// Std of the initial particle cloud around the search peak, m.
    pub init_spread: f64,
}

impl Default for PfConfig {
    fn default() -> Self {
        Self {
            n_particles: 1000,
            sigma_v: 0.3,
            sigma_c: None,
            resample_threshold: 0.5,
            known_height: 1.0,
            init_cell: 0.02,
            init_spread: 0.01,
        }
    }
}

impl PfConfig {
    pub fn validate(&self) -> Result<(), TrackingError> {
        if self.n_particles < 100 {
            return Err(TrackingError::InvalidConfig("need at least 100 particles".into()));
        }
        if let Some(s) = self.sigma_c {
            if !(s > 0.0) {
                return Err(TrackingError::InvalidConfig("sigma_c must be > 0".into()));
            }
        }
        if !(self.sigma_v >= 0.0) || !(self.init_cell > 0.0) || !(self.init_spread >= 0.0) {
            return Err(TrackingError::InvalidConfig("noise and search cell must be positive".into()));
        }
        Ok(())
    }
}

/// Per-antenna complex values used for matching: the subcarrier mean.
pub fn matching_column(frame: &CsiFrame) -> Vec<Complex64> {
    frame.subcarrier_mean()
}

/// Normalized coherence between `column` and the ideal LoS phases from a
/// candidate at `p`. Lies in `[0, 1]`, reaching 1 for a perfect match.
pub fn matching_function(
    p: &Point2,
    column: &[Complex64],
    array: &AntennaArray,
    height: f64,
) -> Result<f64, TrackingError> {
    let total: f64 = column.iter().map(|h| h.norm()).sum();
    if !(total > 0.0) {
        return Err(TrackingError::ZeroAmplitude);
    }
    Ok(coherence(p, column, array, height) / total)
}

fn coherence(p: &Point2, column: &[Complex64], array: &AntennaArray, height: f64) -> f64 {
    let k = 2.0 * PI / array.wavelength();
    let q = [p[0], p[1], height];
    column
        .iter()
        .zip(array.positions())
        .map(|(h, rx)| h * Complex64::from_polar(1.0, k * distance3(rx, &q)))
        .sum::<Complex64>()
        .norm()
}

/// Particle weights from matching scores, normalized to sum to one.
pub fn particle_weights(scores: &[f64], sigma_c: f64) -> Vec<f64> {
    if scores.is_empty() {
        return Vec::new();
    }
    let pw: Vec<f64> = scores.iter().map(|c| (1.0 - c).powi(2)).collect();
    let min = pw.iter().copied().fold(f64::INFINITY, f64::min);
    let mut w: Vec<f64> = pw
        .iter()
        .map(|p| ((min - p) / (2.0 * sigma_c * sigma_c)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

fn population_std(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()
}

/// Systematic resampling; returns the chosen indices.
pub fn systematic_resample(weights: &[f64], rng: &mut impl Rng) -> Vec<usize> {
    let n = weights.len();
    let u0: f64 = rng.random::<f64>() / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut cum = weights.first().copied().unwrap_or(0.0);
    let mut i = 0;
    for k in 0..n {
        let u = u0 + k as f64 / n as f64;
        while u > cum && i + 1 < n {
            i += 1;
            cum += weights[i];
        }
        out.push(i);
    }
    out
}

/// Outcome of one filter step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PfStep {
    pub estimate: Point2,
    pub resampled: bool,
    pub reinitialized: bool,
}

/// Particle-filter tracker for one UE.
#[derive(Debug, Clone)]
pub struct ActiveTracker {
    pub cfg: PfConfig,
    array: AntennaArray,
    room: Room,
    particles: Vec<Particle>,
    rng: ChaCha8Rng,
    last_time: Option<f64>,
    reinit_events: usize,
}

impl ActiveTracker {
    pub fn new(cfg: PfConfig, array: AntennaArray, room: Room, seed: u64) -> Result<Self, TrackingError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            array,
            room,
            particles: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            last_time: None,
            reinit_events: 0,
        })
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn reinit_events(&self) -> usize {
        self.reinit_events
    }

    /// Places the particle cloud around `start`.
    pub fn initialize_at(&mut self, start: Point2) {
        let k = self.cfg.n_particles;
        let spread = Normal::new(0.0, self.cfg.init_spread.max(1e-12)).expect("finite spread");
        let vel = Normal::new(0.0, self.cfg.sigma_v.max(1e-12)).expect("finite sigma_v");
        self.particles = (0..k)
            .map(|_| Particle {
                state: [
                    start[0] + spread.sample(&mut self.rng),
                    start[1] + spread.sample(&mut self.rng),
                    vel.sample(&mut self.rng),
                    vel.sample(&mut self.rng),
                ],
                weight: 1.0 / k as f64,
            })
            .collect();
    }

    /// Exhaustive search over the room for the best-matching cell.
    pub fn coarse_search(&self, column: &[Complex64]) -> Point2 {
        let cell = self.cfg.init_cell;
        let nx = (self.room.width / cell).floor() as usize + 1;
        let ny = (self.room.depth / cell).floor() as usize + 1;
        let h = self.cfg.known_height;
        let (best, _) = (0..nx * ny)
            .into_par_iter()
            .map(|m| {
                let p = [(m % nx) as f64 * cell, (m / nx) as f64 * cell];
                (m, coherence(&p, column, &self.array, h))
            })
            .reduce(
                || (usize::MAX, f64::NEG_INFINITY),
                |a, b| if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) { b } else { a },
            );
        [(best % nx) as f64 * cell, (best / nx) as f64 * cell]
    }

    /// One predict / weight / estimate / resample cycle on a calibrated frame.
    pub fn step(&mut self, frame: &CsiFrame) -> Result<PfStep, TrackingError> {
        let column = matching_column(frame);
        let total: f64 = column.iter().map(|h| h.norm()).sum();
        if !(total > 0.0) {
            return Err(TrackingError::ZeroAmplitude);
        }
        let mut reinitialized = false;
        if self.particles.is_empty() {
            let start = self.coarse_search(&column);
            self.initialize_at(start);
        } else {
            let dt = self.last_time.map_or(0.0, |t| (frame.timestamp - t).max(0.0));
            if dt > 0.0 {
                self.propagate(dt);
            }
        }
        self.last_time = Some(frame.timestamp);

        let h = self.cfg.known_height;
        let scores: Vec<f64> = self
            .particles
            .par_iter()
            .map(|p| coherence(&p.position(), &column, &self.array, h) / total)
            .collect();
        let sigma_c = self.cfg.sigma_c.unwrap_or_else(|| population_std(&scores));
        let mut weights = if sigma_c > 0.0 {
            particle_weights(&scores, sigma_c)
        } else {
            vec![1.0 / scores.len() as f64; scores.len()]
        };
        // fold in the prior weights carried over from steps without resampling
        for (w, p) in weights.iter_mut().zip(&self.particles) {
            *w *= p.weight;
        }
        let s: f64 = weights.iter().sum();
        if !(s > 0.0) || !s.is_finite() {
            let start = self.coarse_search(&column);
            self.initialize_at(start);
            self.reinit_events += 1;
            reinitialized = true;
            weights = vec![1.0 / self.particles.len() as f64; self.particles.len()];
        } else {
            weights.iter_mut().for_each(|w| *w /= s);
        }
        for (p, w) in self.particles.iter_mut().zip(&weights) {
            p.weight = *w;
        }
        let estimate = self.particles.iter().fold([0.0, 0.0], |acc, p| {
            [acc[0] + p.weight * p.state[0], acc[1] + p.weight * p.state[1]]
        });

        let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let resampled = ess < self.cfg.resample_threshold * self.particles.len() as f64;
        if resampled {
            let idx = systematic_resample(&weights, &mut self.rng);
            let k = idx.len() as f64;
            self.particles = idx
                .into_iter()
                .map(|i| Particle {
                    state: self.particles[i].state,
                    weight: 1.0 / k,
                })
                .collect();
        }
        Ok(PfStep {
            estimate,
            resampled,
            reinitialized,
        })
    }

    fn propagate(&mut self, dt: f64) {
        let nv = Normal::new(0.0, self.cfg.sigma_v.max(1e-300)).expect("finite sigma_v");
        let noisy = self.cfg.sigma_v > 0.0;
        for p in &mut self.particles {
            let (ax, ay) = if noisy {
                (nv.sample(&mut self.rng), nv.sample(&mut self.rng))
            } else {
                (0.0, 0.0)
            };
            let s = &mut p.state;
            s[0] += dt * s[2] + dt * ax;
            s[1] += dt * s[3] + dt * ay;
            s[2] += ax;
            s[3] += ay;
        }
    }
}

/// Tracks one UE over a frame sequence, returning `(t, position)` per frame.
pub fn track_frames(
    frames: &[CsiFrame],
    array: &AntennaArray,
    room: Room,
    cfg: PfConfig,
    seed: u64,
) -> Result<Vec<(f64, Point2)>, TrackingError> {
    let mut tracker = ActiveTracker::new(cfg, array.clone(), room, seed)?;
    frames
        .iter()
        .map(|f| tracker.step(f).map(|s| (f.timestamp, s.estimate)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::distance2;
    use crate::simulator::uplink_frame;
    use approx::assert_relative_eq;
    use proptest::prelude::{prop, prop_assert, proptest, ProptestConfig};

    fn ideal_column(array: &AntennaArray, p: &Point2, h: f64) -> Vec<Complex64> {
        let k = 2.0 * PI / array.wavelength();
        let q = [p[0], p[1], h];
        array
            .positions()
            .iter()
            .map(|rx| Complex64::from_polar(1.0, -k * distance3(rx, &q)))
            .collect()
    }

    #[test]
    fn perfect_coherence_scores_one() {
        let array = AntennaArray::distributed_room();
        let p = [2.3, 4.1];
        let col = ideal_column(&array, &p, 1.0);
        assert_relative_eq!(matching_function(&p, &col, &array, 1.0).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_amplitude_is_error() {
        let array = AntennaArray::distributed_room();
        let col = vec![Complex64::new(0.0, 0.0); 64];
        assert!(matches!(
            matching_function(&[1.0, 1.0], &col, &array, 1.0),
            Err(TrackingError::ZeroAmplitude)
        ));
    }

    #[test]
    fn random_phase_mismatch_scores_like_random_walk() {
        // score is |sum of N unit phasors| / N; its mean is sqrt(pi / (4 N))
        let array = AntennaArray::distributed_room();
        let n = array.n_antennas();
        let p = [3.0, 5.0];
        let ideal = ideal_column(&array, &p, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws = 10_000;
        let mut mean = 0.0;
        for _ in 0..draws {
            let col: Vec<Complex64> = ideal
                .iter()
                .map(|h| h * Complex64::from_polar(1.0, rng.random_range(-PI..PI)))
                .collect();
            mean += matching_function(&p, &col, &array, 1.0).unwrap();
        }
        mean /= draws as f64;
        let expected = (PI / (4.0 * n as f64)).sqrt();
        assert!((mean - expected).abs() < 0.03 * expected, "{mean} vs {expected}");
    }

    #[test]
    fn true_position_beats_random_candidates() {
        let array = AntennaArray::distributed_room();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let trials = 100;
        let mut wins = 0;
        for _ in 0..trials {
            let p = [rng.random_range(0.5..6.0), rng.random_range(0.5..9.5)];
            let col = ideal_column(&array, &p, 1.0);
            let truth = matching_function(&p, &col, &array, 1.0).unwrap();
            let beaten = (0..1000).any(|_| {
                let q = [rng.random_range(0.0..6.5), rng.random_range(0.0..10.0)];
                matching_function(&q, &col, &array, 1.0).unwrap() > truth
            });
            if !beaten {
                wins += 1;
            }
        }
        assert!(wins as f64 >= 0.99 * trials as f64);
    }

    #[test]
    fn weight_examples() {
        let w = particle_weights(&[0.7, 0.7, 0.7, 0.7], 0.1);
        assert!(w.iter().all(|x| (x - 0.25).abs() < 1e-15));
        let w = particle_weights(&[1.0, 0.5], 0.5);
        assert_relative_eq!(w[0] / w[1], 0.5f64.exp(), epsilon = 1e-12);
        let w = particle_weights(&[1.0, 0.1, 0.2], 1e-3);
        assert!(w[0] > 1.0 - 1e-12);
    }

    #[test]
    fn systematic_resampling_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = [0.5, 0.25, 0.25, 0.0];
        let idx = systematic_resample(&w, &mut rng);
        let count = |i| idx.iter().filter(|&&j| j == i).count();
        assert_eq!((count(0), count(1), count(2), count(3)), (2, 1, 1, 0));
    }

    fn static_frames(array: &AntennaArray, ue: Point2, n: usize) -> Vec<CsiFrame> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        (0..n)
            .map(|k| {
                let t = k as f64 * array.sample_interval();
                uplink_frame(array, &[ue[0], ue[1], 1.0], &[], t, 0, 0.0, &mut rng).unwrap()
            })
            .collect()
    }

    #[test]
    fn static_ue_within_a_centimetre() {
        let array = AntennaArray::distributed_room();
        let ue = [2.71, 6.33];
        let frames = static_frames(&array, ue, 200);
        let est = track_frames(&frames, &array, Room::default(), PfConfig::default(), 5).unwrap();
        for (_, p) in est.iter().skip(20) {
            assert!(distance2(p, &ue) < 0.01, "{p:?}");
        }
    }

    #[test]
    fn moving_ue_rmse() {
        let array = AntennaArray::distributed_room();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let truth = |t: f64| [1.5 + t, 3.0 + 0.2 * t];
        let frames: Vec<CsiFrame> = (0..300)
            .map(|k| {
                let t = k as f64 * array.sample_interval();
                let p = truth(t);
                uplink_frame(&array, &[p[0], p[1], 1.0], &[], t, 0, 0.0, &mut rng).unwrap()
            })
            .collect();
        let est = track_frames(&frames, &array, Room::default(), PfConfig::default(), 2).unwrap();
        let se: Vec<f64> = est.iter().map(|(t, p)| distance2(p, &truth(*t)).powi(2)).collect();
        let rmse = (se.iter().sum::<f64>() / se.len() as f64).sqrt();
        assert!(rmse <= 0.02, "rmse {rmse}");
    }

    #[test]
    fn zero_dt_only_reweights() {
        let array = AntennaArray::distributed_room();
        let frames = static_frames(&array, [3.0, 3.0], 1);
        let cfg = PfConfig {
            resample_threshold: 0.0,
            ..Default::default()
        };
        let mut t = ActiveTracker::new(cfg, array, Room::default(), 1).unwrap();
        t.step(&frames[0]).unwrap();
        let before: Vec<[f64; 4]> = t.particles().iter().map(|p| p.state).collect();
        t.step(&frames[0]).unwrap();
        let after: Vec<[f64; 4]> = t.particles().iter().map(|p| p.state).collect();
        assert_eq!(before, after);
        let s: f64 = t.particles().iter().map(|p| p.weight).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let bad = PfConfig {
            n_particles: 10,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = PfConfig {
            sigma_c: Some(0.0),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn weights_normalized(scores in prop::collection::vec(0.001f64..1.0, 1..200), sc in 0.001f64..1.0) {
            let w = particle_weights(&scores, sc);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            let best = scores.iter().cloned().fold(f64::MIN, f64::max);
            let wb = w.iter().zip(&scores).filter(|(_, s)| **s == best).map(|(w, _)| *w).next().unwrap();
            prop_assert!(w.iter().all(|&x| x <= wb));
        }

        #[test]
        fn ranking_invariant_to_amplitude_scale(scale in 0.01f64..100.0, x in 0.5f64..6.0, y in 0.5f64..9.5) {
            let array = AntennaArray::distributed_room();
            let col = ideal_column(&array, &[3.0, 4.0], 1.0);
            let scaled: Vec<Complex64> = col.iter().map(|h| h * scale).collect();
            let a = matching_function(&[x, y], &col, &array, 1.0).unwrap();
            let b = matching_function(&[x, y], &scaled, &array, 1.0).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn estimate_inside_particle_hull(seed in 0u64..50) {
            let array = AntennaArray::distributed_room();
            let frames = static_frames(&array, [2.0, 7.0], 3);
            let mut t = ActiveTracker::new(PfConfig::default(), array, Room::default(), seed).unwrap();
            t.step(&frames[0]).unwrap();
            t.step(&frames[1]).unwrap();
            let before: Vec<Point2> = t.particles().iter().map(|p| p.position()).collect();
            // frame at the same time: no propagation, so the hull is `before`
            let s = t.step(&frames[1]).unwrap();
            let (xmin, xmax) = before.iter().fold((f64::MAX, f64::MIN), |a, p| (a.0.min(p[0]), a.1.max(p[0])));
            let (ymin, ymax) = before.iter().fold((f64::MAX, f64::MIN), |a, p| (a.0.min(p[1]), a.1.max(p[1])));
            prop_assert!(s.estimate[0] >= xmin - 1e-12 && s.estimate[0] <= xmax + 1e-12);
            prop_assert!(s.estimate[1] >= ymin - 1e-12 && s.estimate[1] <= ymax + 1e-12);
        }
    }
}
