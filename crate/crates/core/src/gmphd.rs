//! Gaussian-mixture probability hypothesis density filter over a
//! constant-velocity state `[x, y, vx, vy]`.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Matrix2x4, Matrix4, Matrix4x2, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::cbcs::MeasurementSet;
use crate::error::FilterError;
use crate::geometry::Point2;

/// One weighted Gaussian of the intensity mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vector4<f64>,
    pub cov: Matrix4<f64>,
}

impl GaussianComponent {
    pub fn new(weight: f64, mean: Vector4<f64>, cov: Matrix4<f64>) -> Self {
        Self { weight, mean, cov }
    }

    pub fn position(&self) -> Point2 {
        [self.mean[0], self.mean[1]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MergeMetric {
    Euclidean,
    Mahalanobis,
}

/// Filter parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmphdConfig {
    pub p_survival: f64,
    pub p_detection: f64,
    /// Process noise, m/s.
    pub sigma_v: f64,
    pub dt: f64,
    /// Clutter density per square metre.
    pub clutter_density: f64,
    /// Measurement noise standard deviation per axis, m.
    pub meas_std: f64,
    pub prune_weight: f64,
    pub merge_distance: f64,
    pub max_components: usize,
    pub extract_weight: f64,
    pub merge_metric: MergeMetric,
    pub birth_weight: f64,
    /// Diagonal of the birth covariance.
    pub birth_var: f64,
    /// Measurements farther than this from every predicted component seed births.
    pub birth_gate: f64,
}

impl Default for GmphdConfig {
    fn default() -> Self {
        Self {
            p_survival: 0.99,
            p_detection: 0.95,
            sigma_v: 0.3,
            dt: 0.1,
            clutter_density: 2.0 / (6.5 * 10.0),
            meas_std: 0.15,
            prune_weight: 1e-5,
            merge_distance: 0.2,
            max_components: 50,
            extract_weight: 0.5,
            merge_metric: MergeMetric::Euclidean,
            birth_weight: 0.1,
            birth_var: 0.25,
            birth_gate: 0.5,
        }
    }
}

impl GmphdConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        let prob = |p: f64| p > 0.0 && p <= 1.0;
        if !prob(self.p_survival) || !(0.0..=1.0).contains(&self.p_detection) {
            return Err(FilterError::InvalidConfig("probabilities must lie in (0, 1]".into()));
        }
        if !(self.merge_distance > 0.0) || !(self.meas_std > 0.0) || !(self.dt >= 0.0) {
            return Err(FilterError::InvalidConfig(
                "merge distance and measurement noise must be > 0".into(),
            ));
        }
        if self.max_components == 0 || self.clutter_density < 0.0 {
            return Err(FilterError::InvalidConfig("need J_max >= 1 and clutter >= 0".into()));
        }
        Ok(())
    }

    pub fn transition(&self) -> Matrix4<f64> {
        let mut f = Matrix4::identity();
        f[(0, 2)] = self.dt;
        f[(1, 3)] = self.dt;
        f
    }

    /// `sigma_v^2 G G^T` with `G = [dt I; I]`.
    pub fn process_noise(&self) -> Matrix4<f64> {
        let mut g = Matrix4x2::zeros();
        g[(0, 0)] = self.dt;
        g[(1, 1)] = self.dt;
        g[(2, 0)] = 1.0;
        g[(3, 1)] = 1.0;
        g * g.transpose() * self.sigma_v.powi(2)
    }

    pub fn measurement_noise(&self) -> Matrix2<f64> {
        Matrix2::identity() * self.meas_std.powi(2)
    }
}

fn observation() -> Matrix2x4<f64> {
    Matrix2x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0)
}

fn symmetrize(p: Matrix4<f64>) -> Matrix4<f64> {
    (p + p.transpose()) * 0.5
}

/// Prediction: survivors propagated through the motion model, births appended.
pub fn predict(
    components: &[GaussianComponent],
    births: &[GaussianComponent],
    cfg: &GmphdConfig,
) -> Vec<GaussianComponent> {
    let f = cfg.transition();
    let q = cfg.process_noise();
    let mut out: Vec<GaussianComponent> = components
        .iter()
        .map(|c| GaussianComponent {
            weight: cfg.p_survival * c.weight,
            mean: f * c.mean,
            cov: symmetrize(q + f * c.cov * f.transpose()),
        })
        .collect();
    out.extend_from_slice(births);
    out
}

/// Bivariate normal density.
fn gaussian2(z: &Vector2<f64>, mean: &Vector2<f64>, cov: &Matrix2<f64>, inv: &Matrix2<f64>) -> f64 {
    let d = z - mean;
    let m = (d.transpose() * inv * d)[(0, 0)];
    (-0.5 * m).exp() / (2.0 * PI * cov.determinant().sqrt())
}

/// Measurement update. Output holds the missed-detection terms followed by
/// one block of detection terms per measurement.
pub fn update(
    predicted: &[GaussianComponent],
    measurements: &MeasurementSet,
    cfg: &GmphdConfig,
) -> Result<Vec<GaussianComponent>, FilterError> {
    let h = observation();
    let r = cfg.measurement_noise();
    let mut out: Vec<GaussianComponent> = predicted
        .iter()
        .map(|c| GaussianComponent {
            weight: (1.0 - cfg.p_detection) * c.weight,
            ..c.clone()
        })
        .collect();
    if measurements.points.is_empty() {
        return Ok(out);
    }
    struct Gain {
        eta: Vector2<f64>,
        s: Matrix2<f64>,
        s_inv: Matrix2<f64>,
        k: Matrix4x2<f64>,
        cov: Matrix4<f64>,
    }
    let gains: Vec<Gain> = predicted
        .iter()
        .map(|c| {
            let s = h * c.cov * h.transpose() + r;
            let s_inv = s.try_inverse().ok_or(FilterError::SingularInnovation)?;
            let k = c.cov * h.transpose() * s_inv;
            let cov = symmetrize((Matrix4::identity() - k * h) * c.cov);
            Ok(Gain {
                eta: h * c.mean,
                s,
                s_inv,
                k,
                cov,
            })
        })
        .collect::<Result<_, FilterError>>()?;
    for z in &measurements.points {
        let zv = Vector2::new(z.position[0], z.position[1]);
        let start = out.len();
        let mut total = 0.0;
        for (c, g) in predicted.iter().zip(&gains) {
            let w = cfg.p_detection * c.weight * gaussian2(&zv, &g.eta, &g.s, &g.s_inv);
            total += w;
            out.push(GaussianComponent {
                weight: w,
                mean: c.mean + g.k * (zv - g.eta),
                cov: g.cov,
            });
        }
        let denom = cfg.clutter_density + total;
        for c in &mut out[start..] {
            c.weight = if denom > 0.0 { c.weight / denom } else { 0.0 };
        }
    }
    Ok(out)
}

/// Pruning by weight, greedy merging around the heaviest component and
/// truncation to the `max_components` heaviest.
pub fn prune_merge_cap(components: &[GaussianComponent], cfg: &GmphdConfig) -> Vec<GaussianComponent> {
    let mut pool: Vec<&GaussianComponent> = components
        .iter()
        .filter(|c| c.weight >= cfg.prune_weight)
        .collect();
    // heaviest first, ties by original order
    pool.sort_by(|a, b| b.weight.total_cmp(&a.weight));
    let mut used = vec![false; pool.len()];
    let mut merged = Vec::new();
    for j in 0..pool.len() {
        if used[j] {
            continue;
        }
        let lead = pool[j];
        let lead_inv = match cfg.merge_metric {
            MergeMetric::Mahalanobis => lead.cov.fixed_view::<2, 2>(0, 0).into_owned().try_inverse(),
            MergeMetric::Euclidean => None,
        };
        let mut cluster = Vec::new();
        for (i, c) in pool.iter().enumerate() {
            if used[i] {
                continue;
            }
            let d = Vector2::new(c.mean[0] - lead.mean[0], c.mean[1] - lead.mean[1]);
            let close = match (cfg.merge_metric, lead_inv) {
                (MergeMetric::Mahalanobis, Some(inv)) => (d.transpose() * inv * d)[(0, 0)] <= cfg.merge_distance.powi(2),
                _ => d.norm() <= cfg.merge_distance,
            };
            if close {
                used[i] = true;
                cluster.push(*c);
            }
        }
        let w: f64 = cluster.iter().map(|c| c.weight).sum();
        let mean = cluster.iter().map(|c| c.mean * c.weight).sum::<Vector4<f64>>() / w;
        let cov = cluster
            .iter()
            .map(|c| {
                let d = mean - c.mean;
                (c.cov + d * d.transpose()) * c.weight
            })
            .sum::<Matrix4<f64>>()
            / w;
        merged.push(GaussianComponent {
            weight: w,
            mean,
            cov: symmetrize(cov),
        });
    }
    merged.sort_by(|a, b| b.weight.total_cmp(&a.weight));
    merged.truncate(cfg.max_components);
    merged
}

/// An extracted, labelled target state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackState {
    pub label: u32,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

/// Extracted states of one time step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackSet {
    pub timestamp: f64,
    pub states: Vec<TrackState>,
}

impl TrackSet {
    pub fn cardinality(&self) -> usize {
        self.states.len()
    }
}

/// Means of the components heavier than the extraction threshold, heaviest
/// first, unlabelled.
pub fn extract_states(components: &[GaussianComponent], cfg: &GmphdConfig) -> Vec<Vector4<f64>> {
    let mut picked: Vec<&GaussianComponent> = components
        .iter()
        .filter(|c| c.weight > cfg.extract_weight)
        .collect();
    picked.sort_by(|a, b| b.weight.total_cmp(&a.weight));
    picked.iter().map(|c| c.mean).collect()
}

/// Nearest-neighbour label continuity between consecutive extractions.
#[derive(Debug, Clone, Default)]
pub struct Labeler {
    previous: Vec<TrackState>,
    next_label: u32,
}

impl Labeler {
    pub fn assign(&mut self, states: &[Vector4<f64>], dt: f64, gate: f64) -> Vec<TrackState> {
        let mut pairs = Vec::new();
        for (i, s) in states.iter().enumerate() {
            for (j, p) in self.previous.iter().enumerate() {
                let d = (s[0] - (p.x + p.vx * dt)).hypot(s[1] - (p.y + p.vy * dt));
                if d <= gate {
                    pairs.push((d, i, j));
                }
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut label: Vec<Option<u32>> = vec![None; states.len()];
        let mut taken = vec![false; self.previous.len()];
        for (_, i, j) in pairs {
            if label[i].is_none() && !taken[j] {
                label[i] = Some(self.previous[j].label);
                taken[j] = true;
            }
        }
        let out: Vec<TrackState> = states
            .iter()
            .zip(label)
            .map(|(s, l)| {
                let label = l.unwrap_or_else(|| {
                    self.next_label += 1;
                    self.next_label
                });
                TrackState {
                    label,
                    x: s[0],
                    y: s[1],
                    vx: s[2],
                    vy: s[3],
                }
            })
            .collect();
        self.previous = out.clone();
        out
    }
}

/// Stateful tracker: birth seeding, predict, update, prune and extract.
#[derive(Debug, Clone)]
pub struct Tracker {
    pub cfg: GmphdConfig,
    components: Vec<GaussianComponent>,
    pending_births: Vec<Point2>,
    labeler: Labeler,
}

impl Tracker {
    pub fn new(cfg: GmphdConfig) -> Result<Self, FilterError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            components: Vec::new(),
            pending_births: Vec::new(),
            labeler: Labeler::default(),
        })
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    fn birth(&self, p: &Point2) -> GaussianComponent {
        GaussianComponent {
            weight: self.cfg.birth_weight,
            mean: Vector4::new(p[0], p[1], 0.0, 0.0),
            cov: Matrix4::identity() * self.cfg.birth_var,
        }
    }

    /// One filter recursion. On error the state is left untouched.
    pub fn step(&mut self, measurements: &MeasurementSet) -> Result<TrackSet, FilterError> {
        let births: Vec<GaussianComponent> = self.pending_births.iter().map(|p| self.birth(p)).collect();
        let predicted = predict(&self.components, &births, &self.cfg);
        let updated = update(&predicted, measurements, &self.cfg)?;
        self.pending_births = measurements
            .points
            .iter()
            .map(|m| m.position)
            .filter(|z| {
                !predicted.iter().any(|c| {
                    c.weight >= 0.5 * self.cfg.birth_weight
                        && (c.mean[0] - z[0]).hypot(c.mean[1] - z[1]) < self.cfg.birth_gate
                })
            })
            .collect();
        self.components = prune_merge_cap(&updated, &self.cfg);
        let states = extract_states(&self.components, &self.cfg);
        let states = self
            .labeler
            .assign(&states, self.cfg.dt, 2.0 * self.cfg.merge_distance);
        Ok(TrackSet {
            timestamp: measurements.timestamp,
            states,
        })
    }
}
