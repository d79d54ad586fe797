//! Sparse Bayesian location recovery over a grid dictionary.
//!
//! The solver is a complex-valued fast marginal-likelihood relevance
//! vector machine: columns are added, re-estimated or deleted one at a
//! time, always taking the action with the largest likelihood gain. The
//! noise precision is integrated out under a Gamma(a, b) prior, which
//! yields the `c = N + 2a` and `g = y^H B^-1 y + 2b` terms below.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::{Complex32, Complex64};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CbcsError, GeometryError};
use crate::geometry::{bistatic_path_length, AntennaArray, Grid2D, Point2};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Flattens `v` to interleaved `(re, im)` pairs, plus the companion
/// `(im, -re)` sequence, so `a^H v` becomes two real dot products.
fn adjoint_operands(v: &[Complex64]) -> (Vec<f64>, Vec<f64>) {
    let flat = v.iter().flat_map(|c| [c.re, c.im]).collect();
    let turned = v.iter().flat_map(|c| [c.im, -c.re]).collect();
    (flat, turned)
}

fn as_f32(v: &[Complex32]) -> &[f32] {
    // SAFETY: Complex32 is repr(C) with two f32 fields and no padding.
    unsafe { std::slice::from_raw_parts(v.as_ptr().cast::<f32>(), 2 * v.len()) }
}

/// `(a . u, a . w)` with independent partial sums so the loop vectorizes.
#[inline(always)]
fn dot2_body(a: &[f32], u: &[f64], w: &[f64]) -> (f64, f64) {
    let mut su = [0.0f64; 8];
    let mut sw = [0.0f64; 8];
    let (ca, cu, cw) = (a.chunks_exact(8), u.chunks_exact(8), w.chunks_exact(8));
    let (ra, ru, rw) = (ca.remainder(), cu.remainder(), cw.remainder());
    for ((x, y), z) in ca.zip(cu).zip(cw) {
        for l in 0..8 {
            let x = f64::from(x[l]);
            su[l] += x * y[l];
            sw[l] += x * z[l];
        }
    }
    let (mut p, mut q) = (su.iter().sum::<f64>(), sw.iter().sum::<f64>());
    for ((x, y), z) in ra.iter().zip(ru).zip(rw) {
        p += f64::from(*x) * y;
        q += f64::from(*x) * z;
    }
    (p, q)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn dot2_avx2(a: &[f32], u: &[f64], w: &[f64]) -> (f64, f64) {
    use std::arch::x86_64::*;
    let n = a.len().min(u.len()).min(w.len());
    let (pa, pu, pw) = (a.as_ptr(), u.as_ptr(), w.as_ptr());
    let (mut u0, mut u1, mut w0, mut w1) = (
        _mm256_setzero_pd(),
        _mm256_setzero_pd(),
        _mm256_setzero_pd(),
        _mm256_setzero_pd(),
    );
    let mut i = 0;
    while i + 8 <= n {
        let x = _mm256_loadu_ps(pa.add(i));
        let lo = _mm256_cvtps_pd(_mm256_castps256_ps128(x));
        let hi = _mm256_cvtps_pd(_mm256_extractf128_ps::<1>(x));
        u0 = _mm256_fmadd_pd(lo, _mm256_loadu_pd(pu.add(i)), u0);
        u1 = _mm256_fmadd_pd(hi, _mm256_loadu_pd(pu.add(i + 4)), u1);
        w0 = _mm256_fmadd_pd(lo, _mm256_loadu_pd(pw.add(i)), w0);
        w1 = _mm256_fmadd_pd(hi, _mm256_loadu_pd(pw.add(i + 4)), w1);
        i += 8;
    }
    let mut lanes = [0.0f64; 4];
    _mm256_storeu_pd(lanes.as_mut_ptr(), _mm256_add_pd(u0, u1));
    let mut p: f64 = lanes.iter().sum();
    _mm256_storeu_pd(lanes.as_mut_ptr(), _mm256_add_pd(w0, w1));
    let mut q: f64 = lanes.iter().sum();
    for k in i..n {
        p += f64::from(a[k]) * u[k];
        q += f64::from(a[k]) * w[k];
    }
    (p, q)
}

fn dot2(a: &[f32], u: &[f64], w: &[f64], avx2: bool) -> (f64, f64) {
    #[cfg(target_arch = "x86_64")]
    if avx2 {
        // SAFETY: the caller detected the required CPU features.
        return unsafe { dot2_avx2(a, u, w) };
    }
    let _ = avx2;
    dot2_body(a, u, w)
}

fn widen(v: Complex32) -> Complex64 {
    Complex64::new(f64::from(v.re), f64::from(v.im))
}

fn has_avx2() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// Column-major complex dictionary with unit-modulus entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    n_rows: usize,
    n_cols: usize,
    /// Single precision halves the memory traffic of `adjoint_mul`.
    data: Vec<Complex32>,
    /// Squared norm of every column.
    col_norms: Vec<f64>,
}

impl Dictionary {
    /// Entry `(n, m)` is `exp(-j 2 pi d / lambda)` with `d` the bistatic path
    /// from the array's transmitter through grid point `m` to antenna `n`.
    pub fn build(grid: &Grid2D, array: &AntennaArray) -> Result<Self, GeometryError> {
        if grid.is_empty() {
            return Err(GeometryError::InvalidParameter("empty grid".into()));
        }
        let n_rows = array.n_antennas();
        let tx = array.tx_position();
        let k = -2.0 * PI / array.wavelength();
        let mut data = vec![ZERO; n_rows * grid.len()];
        data.par_chunks_mut(n_rows).enumerate().for_each(|(m, col)| {
            let p = grid.point3(m);
            for (v, rx) in col.iter_mut().zip(array.positions()) {
                *v = Complex64::from_polar(1.0, k * bistatic_path_length(&tx, rx, &p));
            }
        });
        Ok(Self::from_parts(n_rows, data))
    }

    /// Wraps raw column-major data. Entries are stored in single precision.
    pub fn from_columns(n_rows: usize, data: Vec<Complex64>) -> Result<Self, GeometryError> {
        if n_rows == 0 || data.is_empty() || data.len() % n_rows != 0 {
            return Err(GeometryError::DimensionMismatch {
                expected: format!("a multiple of {n_rows} entries"),
                got: data.len().to_string(),
            });
        }
        Ok(Self::from_parts(n_rows, data))
    }

    fn from_parts(n_rows: usize, data: Vec<Complex64>) -> Self {
        let data: Vec<Complex32> = data.iter().map(|v| Complex32::new(v.re as f32, v.im as f32)).collect();
        let col_norms = data
            .chunks_exact(n_rows)
            .map(|c| c.iter().map(|v| f64::from(v.re).powi(2) + f64::from(v.im).powi(2)).sum())
            .collect();
        Self {
            n_rows,
            n_cols: data.len() / n_rows,
            data,
            col_norms,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn column(&self, m: usize) -> Vec<Complex64> {
        self.raw_column(m).iter().map(|&v| widen(v)).collect()
    }

    fn raw_column(&self, m: usize) -> &[Complex32] {
        &self.data[m * self.n_rows..(m + 1) * self.n_rows]
    }

    pub fn get(&self, n: usize, m: usize) -> Complex64 {
        widen(self.data[m * self.n_rows + n])
    }

    /// `Phi^H v` for an `n_rows` vector.
    pub fn adjoint_mul(&self, v: &[Complex64]) -> Vec<Complex64> {
        let mut out = vec![ZERO; self.n_cols];
        let (flat, turned) = adjoint_operands(v);
        let avx2 = has_avx2();
        out.par_chunks_mut(1024).enumerate().for_each(|(chunk, o)| {
            for (i, slot) in o.iter_mut().enumerate() {
                let (re, im) = dot2(as_f32(self.raw_column(chunk * 1024 + i)), &flat, &turned, avx2);
                *slot = Complex64::new(re, im);
            }
        });
        out
    }

    /// Keeps only the listed rows (antennas).
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.n_cols);
        for m in 0..self.n_cols {
            let col = self.raw_column(m);
            data.extend(rows.iter().map(|&r| widen(col[r])));
        }
        Self::from_parts(rows.len(), data)
    }
}

/// Solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CbcsConfig {
    /// Noise-prior shape is `a_scale / var(|y|)` on the normalized input.
    pub a_scale: f64,
    pub b: f64,
    /// Stop once the best likelihood gain drops below this.
    pub tolerance: f64,
    /// Compare the gain against `tolerance` times the accumulated gain
    /// (at least one) instead of against `tolerance` itself.
    pub relative_tolerance: bool,
    pub max_steps: usize,
    /// Full recomputation of the column statistics every this many steps.
    pub refresh_every: usize,
}

impl Default for CbcsConfig {
    fn default() -> Self {
        Self {
            a_scale: 100.0,
            b: 1.0,
            tolerance: 1e-3,
            relative_tolerance: true,
            max_steps: 1000,
            refresh_every: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Add,
    Reestimate,
    Delete,
}

/// Sparse solution and solver diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct CbcsSolution {
    /// One coefficient per dictionary column, zero off the support.
    pub coefficients: Vec<Complex64>,
    /// Active columns, ascending.
    pub support: Vec<usize>,
    /// Prior precision per support column, same order.
    pub alphas: Vec<f64>,
    pub steps: usize,
    pub converged: bool,
    /// Likelihood gain and action of every accepted step.
    pub history: Vec<(StepKind, usize, f64)>,
}

/// Posterior moments for the active columns:
/// `Sigma = (diag(alpha) + beta0 Phi_A^H Phi_A)^-1`, `mu = beta0 Sigma Phi_A^H y`.
pub fn posterior_update(
    columns: &DMatrix<Complex64>,
    alphas: &[f64],
    y: &[Complex64],
    beta0: f64,
) -> Result<(DVector<Complex64>, DMatrix<Complex64>), CbcsError> {
    let k = columns.ncols();
    if k == 0 {
        return Err(CbcsError::EmptyActiveSet);
    }
    if alphas.len() != k || y.len() != columns.nrows() {
        return Err(CbcsError::LengthMismatch {
            expected: columns.nrows(),
            got: y.len(),
        });
    }
    let mut precision = columns.adjoint() * columns * Complex64::new(beta0, 0.0);
    for (i, a) in alphas.iter().enumerate() {
        precision[(i, i)] += Complex64::new(*a, 0.0);
    }
    let sigma = hermitian_inverse(precision)?;
    let yv = DVector::from_column_slice(y);
    let mu = &sigma * (columns.adjoint() * yv) * Complex64::new(beta0, 0.0);
    Ok((mu, sigma))
}

fn hermitian_inverse(m: DMatrix<Complex64>) -> Result<DMatrix<Complex64>, CbcsError> {
    let inv = match m.clone().cholesky() {
        Some(c) => c.inverse(),
        None => m.try_inverse().ok_or(CbcsError::Singular)?,
    };
    // enforce exact Hermitian symmetry
    Ok((&inv + inv.adjoint()) * Complex64::new(0.5, 0.0))
}

/// Likelihood gain of moving a column from "absent" to precision `alpha`,
/// given its leave-one-out statistics.
fn ell(alpha: f64, s: f64, r: f64, c: f64) -> f64 {
    alpha.ln() - (alpha + s).ln() - c * (-r / (alpha + s)).ln_1p()
}

struct Solver<'a> {
    dict: &'a Dictionary,
    c: f64,
    two_b: f64,
    phi_y: Vec<Complex64>,
    yy: f64,
    active: Vec<usize>,
    alpha: Vec<f64>,
    /// `Phi^H phi_a` for each active column `a`.
    k_cols: Vec<Vec<Complex64>>,
    slot: Vec<usize>,
    sigma: DMatrix<Complex64>,
    mu: DVector<Complex64>,
    s_big: Vec<f64>,
    q_big: Vec<Complex64>,
    g_big: f64,
}

const NONE: usize = usize::MAX;
const CHUNK: usize = 2048;

impl<'a> Solver<'a> {
    fn new(dict: &'a Dictionary, y: &[Complex64], c: f64, b: f64) -> Self {
        let phi_y = dict.adjoint_mul(y);
        let yy: f64 = y.iter().map(|v| v.norm_sqr()).sum();
        Self {
            dict,
            c,
            two_b: 2.0 * b,
            q_big: phi_y.clone(),
            phi_y,
            yy,
            active: Vec::new(),
            alpha: Vec::new(),
            k_cols: Vec::new(),
            slot: vec![NONE; dict.n_cols()],
            sigma: DMatrix::zeros(0, 0),
            mu: DVector::zeros(0),
            s_big: dict.col_norms.clone(),
            g_big: yy + 2.0 * b,
        }
    }

    /// Leave-one-out statistics (s, |q|^2 / g) of column m.
    fn loo(&self, m: usize) -> Option<(f64, f64)> {
        let (s_m, q_m) = (self.s_big[m], self.q_big[m]);
        match self.slot[m] {
            NONE => Some((s_m, q_m.norm_sqr() / self.g_big)),
            i => {
                let a = self.alpha[i];
                let den = a - s_m;
                if den <= 0.0 {
                    return None;
                }
                let s = a * s_m / den;
                let q2 = (a * a / (den * den)) * q_m.norm_sqr();
                let g = self.g_big + q_m.norm_sqr() / den;
                Some((s, q2 / g))
            }
        }
    }

    /// Best action for column m: (gain, kind, new alpha).
    fn candidate(&self, m: usize, can_add: bool) -> Option<(f64, StepKind, f64)> {
        let (s, r) = self.loo(m)?;
        if !(s > 0.0) {
            return None;
        }
        let num = self.c * r - s;
        let active = self.slot[m] != NONE;
        if num > 0.0 {
            let a_new = s * (s - r) / num;
            if !(a_new > 0.0 && a_new.is_finite()) {
                return None;
            }
            if active {
                let a_old = self.alpha[self.slot[m]];
                Some((ell(a_new, s, r, self.c) - ell(a_old, s, r, self.c), StepKind::Reestimate, a_new))
            } else if can_add {
                Some((ell(a_new, s, r, self.c), StepKind::Add, a_new))
            } else {
                None
            }
        } else if active {
            let a_old = self.alpha[self.slot[m]];
            Some((-ell(a_old, s, r, self.c), StepKind::Delete, f64::INFINITY))
        } else {
            None
        }
    }

    fn select(&self) -> Option<(usize, f64, StepKind, f64)> {
        let can_add = self.active.len() < self.dict.n_rows();
        let pick = |best: Option<(usize, f64, StepKind, f64)>, m: usize| {
            match (best, self.candidate(m, can_add)) {
                (b, None) => b,
                (None, Some((g, k, a))) => Some((m, g, k, a)),
                (Some(b), Some((g, k, a))) => {
                    if g > b.1 || (g == b.1 && m < b.0) {
                        Some((m, g, k, a))
                    } else {
                        Some(b)
                    }
                }
            }
        };
        (0..self.dict.n_cols())
            .into_par_iter()
            .with_min_len(4096)
            .fold(|| None, pick)
            .reduce(
                || None,
                |a, b| match (a, b) {
                    (None, x) | (x, None) => x,
                    (Some(x), Some(y)) => {
                        if y.1 > x.1 || (y.1 == x.1 && y.0 < x.0) {
                            Some(y)
                        } else {
                            Some(x)
                        }
                    }
                },
            )
    }

    fn refresh_posterior(&mut self) -> Result<(), CbcsError> {
        let k = self.active.len();
        if k == 0 {
            self.sigma = DMatrix::zeros(0, 0);
            self.mu = DVector::zeros(0);
            return Ok(());
        }
        let mut precision = DMatrix::from_fn(k, k, |i, j| self.k_cols[j][self.active[i]]);
        for i in 0..k {
            precision[(i, i)] += Complex64::new(self.alpha[i], 0.0);
        }
        self.sigma = hermitian_inverse(precision)?;
        let py = DVector::from_iterator(k, self.active.iter().map(|&a| self.phi_y[a]));
        self.mu = &self.sigma * py;
        Ok(())
    }

    /// Applies a precision change of column j and updates every statistic.
    fn apply(&mut self, j: usize, kind: StepKind, a_new: f64) -> Result<(), CbcsError> {
        let a_old = match self.slot[j] {
            NONE => f64::INFINITY,
            i => self.alpha[i],
        };
        let inv = |a: f64| if a.is_finite() { 1.0 / a } else { 0.0 };
        let delta = inv(a_new) - inv(a_old);
        let c_j: Vec<Complex64> = match self.slot[j] {
            NONE => self.dict.adjoint_mul(&self.dict.column(j)),
            i => self.k_cols[i].clone(),
        };
        // w = Phi^H B^-1 phi_j with B^-1 = I - Phi_A Sigma Phi_A^H
        let k = self.active.len();
        let mut w = c_j.clone();
        if k > 0 {
            let v = DVector::from_iterator(k, (0..k).map(|b| self.k_cols[b][j].conj()));
            let u = &self.sigma * v;
            let (k_cols, u) = (&self.k_cols, &u);
            w.par_chunks_mut(CHUNK).enumerate().for_each(|(ci, wc)| {
                let (off, len) = (ci * CHUNK, wc.len());
                for (col, ub) in k_cols.iter().zip(u.iter()) {
                    for (wm, c) in wc.iter_mut().zip(&col[off..off + len]) {
                        *wm -= c * ub;
                    }
                }
            });
        }
        let (s_j, q_j) = (self.s_big[j], self.q_big[j]);
        let kappa = delta / (1.0 + delta * s_j);
        let (s_big, q_big) = (&mut self.s_big, &mut self.q_big);
        s_big
            .par_iter_mut()
            .zip(q_big.par_iter_mut())
            .zip(w.par_iter())
            .with_min_len(4096)
            .for_each(|((s, q), wm)| {
                *s -= kappa * wm.norm_sqr();
                *q -= kappa * wm * q_j;
            });
        self.g_big -= kappa * q_j.norm_sqr();

        match kind {
            StepKind::Add => {
                self.slot[j] = self.active.len();
                self.active.push(j);
                self.alpha.push(a_new);
                self.k_cols.push(c_j);
            }
            StepKind::Reestimate => self.alpha[self.slot[j]] = a_new,
            StepKind::Delete => {
                let i = self.slot[j];
                self.active.swap_remove(i);
                self.alpha.swap_remove(i);
                self.k_cols.swap_remove(i);
                self.slot[j] = NONE;
                if i < self.active.len() {
                    self.slot[self.active[i]] = i;
                }
            }
        }
        self.refresh_posterior()
    }

    /// Recomputes S, Q and G from the current posterior.
    fn refresh_statistics(&mut self) {
        let k = self.active.len();
        if k == 0 {
            self.s_big.copy_from_slice(&self.dict.col_norms);
            self.q_big.copy_from_slice(&self.phi_y);
            self.g_big = self.yy + self.two_b;
            return;
        }
        let (sigma, mu, k_cols, phi_y, norms) =
            (&self.sigma, &self.mu, &self.k_cols, &self.phi_y, &self.dict.col_norms);
        self.s_big
            .par_chunks_mut(CHUNK)
            .zip(self.q_big.par_chunks_mut(CHUNK))
            .enumerate()
            .for_each(|(ci, (sc, qc))| {
                let off = ci * CHUNK;
                let mut km = vec![ZERO; k];
                let mut row = vec![ZERO; k];
                for (i, (s, q)) in sc.iter_mut().zip(qc.iter_mut()).enumerate() {
                    let m = off + i;
                    for (slot, c) in km.iter_mut().zip(k_cols) {
                        *slot = c[m];
                    }
                    // row = Sigma km^*, quad = km^T row
                    row.iter_mut().for_each(|r| *r = ZERO);
                    for b in 0..k {
                        let kb = km[b].conj();
                        for (a, r) in row.iter_mut().enumerate() {
                            *r += sigma[(a, b)] * kb;
                        }
                    }
                    let mut quad = 0.0;
                    let mut proj = ZERO;
                    for a in 0..k {
                        quad += (km[a] * row[a]).re;
                        proj += km[a] * mu[a];
                    }
                    *s = norms[m] - quad;
                    *q = phi_y[m] - proj;
                }
            });
        let py: Complex64 = self
            .active
            .iter()
            .zip(self.mu.iter())
            .map(|(&a, m)| self.phi_y[a].conj() * m)
            .sum();
        self.g_big = self.yy - py.re + self.two_b;
    }
}

/// Sparse recovery of `y ~ Phi u`.
///
/// The input is scaled to unit RMS before solving and the coefficients are
/// scaled back afterwards. Hitting `max_steps` returns the current model
/// with `converged = false`.
pub fn cbcs_solve(
    y: &[Complex64],
    dict: &Dictionary,
    cfg: &CbcsConfig,
) -> Result<CbcsSolution, CbcsError> {
    let n = dict.n_rows();
    if y.len() != n {
        return Err(CbcsError::LengthMismatch {
            expected: n,
            got: y.len(),
        });
    }
    let energy: f64 = y.iter().map(|v| v.norm_sqr()).sum();
    if !(energy > 0.0) || !energy.is_finite() {
        return Err(CbcsError::ZeroInput);
    }
    let rms = (energy / n as f64).sqrt();
    let yn: Vec<Complex64> = y.iter().map(|v| v / rms).collect();
    let mags: Vec<f64> = yn.iter().map(|v| v.norm()).collect();
    let mean = mags.iter().sum::<f64>() / n as f64;
    let var = mags.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n as f64;
    let a = cfg.a_scale / var.max(1e-12);
    let c = n as f64 + 2.0 * a;

    let mut solver = Solver::new(dict, &yn, c, cfg.b);
    let mut history = Vec::new();
    let mut converged = false;
    let mut steps = 0;
    let mut accumulated = 0.0_f64;
    while steps < cfg.max_steps {
        let Some((m, gain, kind, a_new)) = solver.select() else {
            converged = true;
            break;
        };
        let threshold = if cfg.relative_tolerance {
            cfg.tolerance * accumulated.max(1.0)
        } else {
            cfg.tolerance
        };
        if gain < threshold {
            converged = true;
            break;
        }
        solver.apply(m, kind, a_new)?;
        history.push((kind, m, gain));
        accumulated += gain;
        steps += 1;
        if cfg.refresh_every > 0 && steps % cfg.refresh_every == 0 {
            solver.refresh_statistics();
        }
    }

    let mut order: Vec<usize> = (0..solver.active.len()).collect();
    order.sort_by_key(|&i| solver.active[i]);
    let mut coefficients = vec![ZERO; dict.n_cols()];
    for (i, &col) in solver.active.iter().enumerate() {
        coefficients[col] = solver.mu[i] * rms;
    }
    Ok(CbcsSolution {
        coefficients,
        support: order.iter().map(|&i| solver.active[i]).collect(),
        alphas: order.iter().map(|&i| solver.alpha[i]).collect(),
        steps,
        converged,
        history,
    })
}

/// One location measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub position: Point2,
    /// Summed coefficient magnitude of the merged cells.
    pub magnitude: f64,
}

/// Location measurements of one window.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    pub timestamp: f64,
    pub points: Vec<Measurement>,
}

/// Turns a sparse coefficient vector into location measurements: cells with
/// `|u| >= floor * max|u|` are grouped by 8-connectivity and each group
/// becomes its magnitude-weighted centroid.
pub fn extract_locations(
    coefficients: &[Complex64],
    grid: &Grid2D,
    magnitude_floor: f64,
    timestamp: f64,
) -> MeasurementSet {
    let max = coefficients.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let mut set = MeasurementSet {
        timestamp,
        points: Vec::new(),
    };
    if max == 0.0 {
        return set;
    }
    let thr = magnitude_floor * max;
    let mut cells: Vec<usize> = coefficients
        .iter()
        .enumerate()
        .filter(|(_, c)| c.norm() > 0.0 && c.norm() >= thr)
        .map(|(m, _)| m)
        .collect();
    cells.sort_unstable();
    let mut visited = vec![false; cells.len()];
    let pos_of = |m: usize| cells.binary_search(&m).ok();
    for start in 0..cells.len() {
        if visited[start] {
            continue;
        }
        visited[start] = true;
        let mut stack = vec![start];
        let (mut wx, mut wy, mut w) = (0.0, 0.0, 0.0);
        while let Some(i) = stack.pop() {
            let m = cells[i];
            let mag = coefficients[m].norm();
            let p = grid.point(m);
            wx += mag * p[0];
            wy += mag * p[1];
            w += mag;
            let (ix, iy) = grid.cell_of(m);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (ix as i64 + dx, iy as i64 + dy);
                    if (dx, dy) == (0, 0) || nx < 0 || ny < 0 || nx >= grid.nx() as i64 || ny >= grid.ny() as i64 {
                        continue;
                    }
                    if let Some(j) = pos_of(grid.index(nx as usize, ny as usize)) {
                        if !visited[j] {
                            visited[j] = true;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        set.points.push(Measurement {
            position: [wx / w, wy / w],
            magnitude: w,
        });
    }
    set
}

/// Folds measurements lying within `radius` of a heavier one into it,
/// heaviest first. Each group becomes its magnitude-weighted centroid.
pub fn merge_measurements(set: &MeasurementSet, radius: f64) -> MeasurementSet {
    let mut order: Vec<&Measurement> = set.points.iter().collect();
    order.sort_by(|a, b| b.magnitude.total_cmp(&a.magnitude));
    let mut taken = vec![false; order.len()];
    let mut points = Vec::new();
    for i in 0..order.len() {
        if taken[i] {
            continue;
        }
        let anchor = order[i].position;
        let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
        for j in i..order.len() {
            let p = order[j];
            if !taken[j] && (p.position[0] - anchor[0]).hypot(p.position[1] - anchor[1]) <= radius {
                taken[j] = true;
                sx += p.magnitude * p.position[0];
                sy += p.magnitude * p.position[1];
                sw += p.magnitude;
            }
        }
        let position = if sw > 0.0 { [sx / sw, sy / sw] } else { anchor };
        points.push(Measurement { position, magnitude: sw });
    }
    MeasurementSet {
        timestamp: set.timestamp,
        points,
    }
}
