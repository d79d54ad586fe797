//! Target-of-interest extraction: moving-average background removal and
//! iterative range-Doppler peak cancellation per antenna.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::csi::CsiFrame;
use crate::error::TrackingError;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Hard cap on extracted components per antenna and window.
pub const MAX_ITERATIONS: usize = 32;

/// Trailing moving-average background subtraction, one frame at a time.
#[derive(Debug, Clone)]
pub struct BackgroundRemover {
    len: usize,
    history: VecDeque<Vec<Complex64>>,
    sum: Vec<Complex64>,
    pushes: usize,
}

impl BackgroundRemover {
    /// `len` is the averaging window in samples (>= 2).
    pub fn new(len: usize) -> Result<Self, TrackingError> {
        if len < 2 {
            return Err(TrackingError::InvalidConfig(format!(
                "background window must span >= 2 samples, got {len}"
            )));
        }
        Ok(Self {
            len,
            history: VecDeque::with_capacity(len + 1),
            sum: Vec::new(),
            pushes: 0,
        })
    }

    pub fn from_duration(avg_window: f64, sample_rate: f64) -> Result<Self, TrackingError> {
        Self::new(crate::csi::window_len(avg_window, sample_rate))
    }

    pub fn window_len(&self) -> usize {
        self.len
    }

    /// True once a full averaging window has been seen.
    pub fn is_warm(&self) -> bool {
        self.history.len() == self.len
    }

    /// Subtracts the mean of the last `len` frames (including this one).
    /// The flag is false while the window is still filling.
    pub fn push(&mut self, frame: &CsiFrame) -> (CsiFrame, bool) {
        let data = frame.data();
        if self.sum.len() != data.len() {
            self.sum = vec![ZERO; data.len()];
            self.history.clear();
        }
        self.history.push_back(data.to_vec());
        for (s, v) in self.sum.iter_mut().zip(data) {
            *s += v;
        }
        if self.history.len() > self.len {
            let old = self.history.pop_front().expect("non-empty");
            for (s, v) in self.sum.iter_mut().zip(&old) {
                *s -= v;
            }
        }
        self.pushes += 1;
        if self.pushes % (64 * self.len) == 0 {
            // bound floating-point drift of the running sum
            self.sum.iter_mut().for_each(|s| *s = ZERO);
            for h in &self.history {
                for (s, v) in self.sum.iter_mut().zip(h) {
                    *s += v;
                }
            }
        }
        let n = self.history.len() as f64;
        let mut out = frame.clone();
        for (o, s) in out.data_mut().iter_mut().zip(&self.sum) {
            *o -= s / n;
        }
        (out, self.is_warm())
    }
}

/// Batch form of [`BackgroundRemover`].
pub fn remove_background(
    frames: &[CsiFrame],
    avg_window: f64,
    sample_rate: f64,
) -> Result<Vec<(CsiFrame, bool)>, TrackingError> {
    let mut r = BackgroundRemover::from_duration(avg_window, sample_rate)?;
    Ok(frames.iter().map(|f| r.push(f)).collect())
}

/// Phase-shifted DFT dictionaries for the Doppler (time) and range
/// (frequency) axes, with FFT plans for fast correlation.
pub struct DftPlans {
    pub n_t: usize,
    pub n_f: usize,
    pub n_doppler: usize,
    pub n_range: usize,
    /// Stop threshold in dB below the strongest component.
    pub p_th_db: f64,
    doppler_fft: Arc<dyn Fft<f64>>,
    range_ifft: Arc<dyn Fft<f64>>,
    // modulation moving the zero-frequency bin to the grid centre
    mod_d: Vec<Complex64>,
    mod_r: Vec<Complex64>,
}

impl std::fmt::Debug for DftPlans {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DftPlans")
            .field("n_t", &self.n_t)
            .field("n_f", &self.n_f)
            .field("n_doppler", &self.n_doppler)
            .field("n_range", &self.n_range)
            .field("p_th_db", &self.p_th_db)
            .finish()
    }
}

impl DftPlans {
    pub fn new(
        n_t: usize,
        n_f: usize,
        n_doppler: usize,
        n_range: usize,
        p_th_db: f64,
    ) -> Result<Self, TrackingError> {
        if n_t == 0 || n_f == 0 || n_doppler < n_t || n_range < n_f {
            return Err(TrackingError::InvalidConfig(format!(
                "need N_D >= N_t >= 1 and N_T >= N_f >= 1 (got N_t={n_t}, N_f={n_f}, N_D={n_doppler}, N_T={n_range})"
            )));
        }
        if !(p_th_db > 0.0) {
            return Err(TrackingError::InvalidConfig("stop threshold must be > 0 dB".into()));
        }
        let mut planner = FftPlanner::new();
        let shift_d = 2.0 * PI * (n_doppler as f64 / 2.0) / n_doppler as f64;
        let shift_r = -2.0 * PI * (n_range as f64 / 2.0) / n_range as f64;
        let scale = 1.0 / ((n_doppler * n_range) as f64).sqrt();
        Ok(Self {
            n_t,
            n_f,
            n_doppler,
            n_range,
            p_th_db,
            doppler_fft: planner.plan_fft_forward(n_doppler),
            range_ifft: planner.plan_fft_inverse(n_range),
            mod_d: (0..n_t).map(|t| Complex64::from_polar(1.0, shift_d * t as f64)).collect(),
            mod_r: (0..n_f).map(|f| Complex64::from_polar(scale, shift_r * f as f64)).collect(),
        })
    }

    /// Doppler dictionary entry at (time sample, bin), both 0-based.
    pub fn doppler(&self, t: usize, d: usize) -> Complex64 {
        let n = self.n_doppler as f64;
        Complex64::from_polar(1.0 / n.sqrt(), -2.0 * PI * t as f64 * (d as f64 - n / 2.0) / n)
    }

    /// Range dictionary entry at (subcarrier, bin), both 0-based.
    pub fn range(&self, f: usize, r: usize) -> Complex64 {
        let n = self.n_range as f64;
        Complex64::from_polar(1.0 / n.sqrt(), -2.0 * PI * f as f64 * (r as f64 - n / 2.0) / n)
    }

    /// Dense Doppler matrix, row-major `[n_t x n_doppler]`.
    pub fn doppler_matrix(&self) -> Vec<Complex64> {
        (0..self.n_t)
            .flat_map(|t| (0..self.n_doppler).map(move |d| (t, d)))
            .map(|(t, d)| self.doppler(t, d))
            .collect()
    }

    /// Dense range matrix, row-major `[n_f x n_range]`.
    pub fn range_matrix(&self) -> Vec<Complex64> {
        (0..self.n_f)
            .flat_map(|f| (0..self.n_range).map(move |r| (f, r)))
            .map(|(f, r)| self.range(f, r))
            .collect()
    }

    /// Range-Doppler correlation `T^H X D` by direct summation,
    /// row-major `[n_range x n_doppler]`. `x` is row-major `[n_f x n_t]`.
    pub fn correlate_direct(&self, x: &[Complex64]) -> Vec<Complex64> {
        let mut g = vec![ZERO; self.n_range * self.n_doppler];
        for r in 0..self.n_range {
            for d in 0..self.n_doppler {
                let mut acc = ZERO;
                for f in 0..self.n_f {
                    let tr = self.range(f, r).conj();
                    for t in 0..self.n_t {
                        acc += tr * x[f * self.n_t + t] * self.doppler(t, d);
                    }
                }
                g[r * self.n_doppler + d] = acc;
            }
        }
        g
    }

    /// Same as [`correlate_direct`](Self::correlate_direct) via FFTs.
    pub fn correlate(&self, x: &[Complex64]) -> Vec<Complex64> {
        let (nd, nr) = (self.n_doppler, self.n_range);
        let mut ws = Workspace::default();
        self.correlate_into(x, &mut ws);
        let mut g = vec![ZERO; nr * nd];
        for d in 0..nd {
            for r in 0..nr {
                g[r * nd + d] = ws.cols[d * nr + r];
            }
        }
        g
    }

    /// Correlation into `ws.cols`, Doppler-major `[n_doppler x n_range]`.
    fn correlate_into(&self, x: &[Complex64], ws: &mut Workspace) {
        let (nt, nf, nd, nr) = (self.n_t, self.n_f, self.n_doppler, self.n_range);
        let scratch_len = self
            .doppler_fft
            .get_inplace_scratch_len()
            .max(self.range_ifft.get_inplace_scratch_len());
        ws.scratch.resize(scratch_len, ZERO);
        ws.y.resize(nf * nd, ZERO);
        ws.cols.resize(nd * nr, ZERO);
        // time axis: one forward FFT per subcarrier, batched
        for f in 0..nf {
            let row = &mut ws.y[f * nd..(f + 1) * nd];
            for ((out, v), m) in row.iter_mut().zip(&x[f * nt..(f + 1) * nt]).zip(&self.mod_d) {
                *out = v * m;
            }
            row[nt..].fill(ZERO);
        }
        self.doppler_fft.process_with_scratch(&mut ws.y, &mut ws.scratch);
        // frequency axis: one inverse FFT per Doppler bin, batched on the transpose
        for d in 0..nd {
            ws.cols[d * nr + nf..(d + 1) * nr].fill(ZERO);
        }
        for f in 0..nf {
            let m = self.mod_r[f];
            for d in 0..nd {
                ws.cols[d * nr + f] = ws.y[f * nd + d] * m;
            }
        }
        self.range_ifft.process_with_scratch(&mut ws.cols, &mut ws.scratch);
    }

    /// Angular frequencies of a grid bin on the range and Doppler axes.
    pub fn bin_frequencies(&self, range_bin: usize, doppler_bin: usize) -> (f64, f64) {
        (
            2.0 * PI * (range_bin as f64 - self.n_range as f64 / 2.0) / self.n_range as f64,
            2.0 * PI * (doppler_bin as f64 - self.n_doppler as f64 / 2.0) / self.n_doppler as f64,
        )
    }

    /// Atom at arbitrary angular frequencies `(wr, wd)`, same layout and
    /// reference point as [`atom`](Self::atom).
    pub fn atom_at(&self, wr: f64, wd: f64) -> Vec<Complex64> {
        let fc = (self.n_f as f64 - 1.0) / 2.0;
        let tc = (self.n_t as f64 - 1.0) / 2.0;
        let along_t = phasors(wd, -tc, self.n_t);
        let mut out = Vec::with_capacity(self.n_f * self.n_t);
        for pf in phasors(-wr, -fc, self.n_f) {
            out.extend(along_t.iter().map(|pt| pf * pt));
        }
        out
    }

    /// Unit-modulus range-Doppler atom for the given bins, referenced to the
    /// band centre and the window centre. Row-major `[n_f x n_t]`.
    pub fn atom(&self, range_bin: usize, doppler_bin: usize) -> Vec<Complex64> {
        let (wr, wd) = self.bin_frequencies(range_bin, doppler_bin);
        self.atom_at(wr, wd)
    }
}

/// No-Doppler value for one antenna.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToiEntry {
    pub value: Complex64,
    pub iterations: usize,
}

/// Per-antenna input of the extractor: background-removed CSI, row-major
/// `[n_f x n_t]` (subcarrier-major).
#[derive(Debug, Clone, PartialEq)]
pub struct ToiMatrix {
    pub n_f: usize,
    pub n_t: usize,
    pub data: Vec<Complex64>,
}

impl ToiMatrix {
    /// Collects one antenna's samples from a window of frames.
    pub fn from_frames(frames: &[CsiFrame], antenna: usize) -> Self {
        let n_t = frames.len();
        let n_f = frames.first().map_or(0, |f| f.n_subcarriers());
        let mut data = vec![ZERO; n_f * n_t];
        for (t, fr) in frames.iter().enumerate() {
            for (f, v) in fr.antenna(antenna).iter().enumerate() {
                data[f * n_t + t] = *v;
            }
        }
        Self { n_f, n_t, data }
    }

    /// Mean over subcarriers: a `[1 x n_t]` matrix.
    pub fn average_subcarriers(&self) -> Self {
        let mut data = vec![ZERO; self.n_t];
        for f in 0..self.n_f {
            for t in 0..self.n_t {
                data[t] += self.data[f * self.n_t + t];
            }
        }
        let n = self.n_f.max(1) as f64;
        data.iter_mut().for_each(|v| *v /= n);
        Self {
            n_f: 1,
            n_t: self.n_t,
            data,
        }
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum()
    }
}

/// Trace of one extraction, for diagnostics and tests.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SicarTrace {
    /// Residual energy before the first and after every accepted step.
    pub residual_energy: Vec<f64>,
    pub components: Vec<(usize, usize, Complex64)>,
}

/// Golden-section maximization of `f` over `[lo, hi]`.
/// `e^{j w (k + offset)}` for `k = 0..n` by recurrence.
fn phasors(w: f64, offset: f64, n: usize) -> Vec<Complex64> {
    let step = Complex64::from_polar(1.0, w);
    let mut p = Complex64::from_polar(1.0, w * offset);
    (0..n)
        .map(|_| {
            let out = p;
            p *= step;
            out
        })
        .collect()
}

/// `sum_k v[k] e^{j w (k + offset)}`.
fn weighted_sum(v: &[Complex64], w: f64, offset: f64) -> Complex64 {
    let step = Complex64::from_polar(1.0, w);
    let mut p = Complex64::from_polar(1.0, w * offset);
    let mut acc = ZERO;
    for x in v {
        acc += x * p;
        p *= step;
    }
    acc
}

/// Reusable buffers for repeated correlations.
#[derive(Default)]
struct Workspace {
    y: Vec<Complex64>,
    cols: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

fn golden_max(mut lo: f64, mut hi: f64, iters: usize, f: impl Fn(f64) -> f64) -> (f64, f64) {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - g * (hi - lo);
    let mut b = lo + g * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    for _ in 0..iters {
        if fa >= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - g * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + g * (hi - lo);
            fb = f(b);
        }
    }
    if fa >= fb {
        (a, fa)
    } else {
        (b, fb)
    }
}

/// Moves the grid peak `(r, d)` to the off-grid frequencies that maximize
/// the correlation magnitude, searching one bin either side on each axis.
/// Keeps the grid frequencies unless the refinement is strictly better.
fn refine_peak(x: &[Complex64], plans: &DftPlans, r: usize, d: usize) -> (f64, f64) {
    let (n_f, n_t) = (plans.n_f, plans.n_t);
    let fc = (n_f as f64 - 1.0) / 2.0;
    let tc = (n_t as f64 - 1.0) / 2.0;
    let (wr0, wd0) = plans.bin_frequencies(r, d);
    let step_r = 2.0 * PI / plans.n_range as f64;
    let step_d = 2.0 * PI / plans.n_doppler as f64;
    // sum over subcarriers at fixed wr, one value per time sample
    let collapse_f = |wr: f64| -> Vec<Complex64> {
        let mut s = vec![ZERO; n_t];
        for (f, w) in phasors(wr, -fc, n_f).into_iter().enumerate() {
            for (acc, v) in s.iter_mut().zip(&x[f * n_t..(f + 1) * n_t]) {
                *acc += v * w;
            }
        }
        s
    };
    let collapse_t = |wd: f64| -> Vec<Complex64> {
        let ph = phasors(-wd, -tc, n_t);
        x.chunks_exact(n_t)
            .map(|row| row.iter().zip(&ph).map(|(v, p)| v * p).sum())
            .collect()
    };
    let along_d = |s: &[Complex64], wd: f64| -> f64 { weighted_sum(s, -wd, -tc).norm() };
    let along_r = |u: &[Complex64], wr: f64| -> f64 { weighted_sum(u, wr, -fc).norm() };
    let base = along_d(&collapse_f(wr0), wd0);
    let (mut wr, mut wd, mut best) = (wr0, wd0, base);
    for _ in 0..2 {
        let s = collapse_f(wr);
        let (w, v) = golden_max(wd - step_d, wd + step_d, 30, |w| along_d(&s, w));
        if v > best {
            wd = w;
            best = v;
        }
        if n_f > 1 {
            let u = collapse_t(wd);
            let (w, v) = golden_max(wr - step_r, wr + step_r, 30, |w| along_r(&u, w));
            if v > best {
                wr = w;
                best = v;
            }
        }
    }
    if best > base * (1.0 + 1e-12) {
        (wr, wd)
    } else {
        (wr0, wd0)
    }
}

/// Iterative peak extraction and cancellation for one antenna.
///
/// Each step correlates the residual against every range-Doppler atom,
/// takes the strongest, refines its frequencies off the grid, fits its
/// complex amplitude by least squares, subtracts it and accumulates the amplitude referenced to zero Doppler.
/// Extraction stops once a component falls `p_th_db` below the first one
/// (that component is discarded) or after [`MAX_ITERATIONS`].
pub fn sicar_extract(x: &ToiMatrix, plans: &DftPlans) -> Result<(ToiEntry, SicarTrace), TrackingError> {
    if x.n_f != plans.n_f || x.n_t != plans.n_t {
        return Err(TrackingError::InvalidConfig(format!(
            "matrix {}x{} does not match plans {}x{}",
            x.n_f, x.n_t, plans.n_f, plans.n_t
        )));
    }
    if x.data.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(TrackingError::InvalidConfig("non-finite ToI sample".into()));
    }
    let mut residual = x.data.clone();
    let mut trace = SicarTrace::default();
    let e0 = x.energy();
    trace.residual_energy.push(e0);
    let mut out = ToiEntry {
        value: ZERO,
        iterations: 0,
    };
    if e0 == 0.0 {
        return Ok((out, trace));
    }
    let ratio = 10f64.powf(-plans.p_th_db / 20.0);
    let n = residual.len() as f64;
    let mut alpha_max = 0.0;
    let mut ws = Workspace::default();
    while out.iterations < MAX_ITERATIONS {
        plans.correlate_into(&residual, &mut ws);
        let mut best = (0usize, -1.0f64);
        for (i, v) in ws.cols.iter().enumerate() {
            let p = v.norm_sqr();
            if p > best.1 {
                best = (i, p);
            }
        }
        let (r, d) = (best.0 % plans.n_range, best.0 / plans.n_range);
        let (wr, wd) = refine_peak(&residual, plans, r, d);
        let atom = plans.atom_at(wr, wd);
        let alpha: Complex64 = residual
            .iter()
            .zip(&atom)
            .map(|(v, a)| v * a.conj())
            .sum::<Complex64>()
            / n;
        let mag = alpha.norm();
        if out.iterations == 0 {
            alpha_max = mag;
        }
        if mag == 0.0 || mag < ratio * alpha_max {
            break;
        }
        for (v, a) in residual.iter_mut().zip(&atom) {
            *v -= alpha * a;
        }
        // |alpha| e^{j angle(alpha)}: the amplitude at zero Doppler
        out.value += Complex64::from_polar(mag, alpha.arg());
        out.iterations += 1;
        trace.components.push((r, d, alpha));
        trace
            .residual_energy
            .push(residual.iter().map(|v| v.norm_sqr()).sum());
    }
    Ok((out, trace))
}

/// Runs the extractor on every antenna of a window of background-removed
/// frames. With `fast`, subcarriers are averaged first and `plans` must be
/// built for a single subcarrier.
pub fn extract_window(
    frames: &[CsiFrame],
    plans: &DftPlans,
    fast: bool,
) -> Result<Vec<ToiEntry>, TrackingError> {
    let n_antennas = frames.first().map_or(0, |f| f.n_antennas());
    (0..n_antennas)
        .into_par_iter()
        .map(|a| {
            let m = ToiMatrix::from_frames(frames, a);
            let m = if fast { m.average_subcarriers() } else { m };
            sicar_extract(&m, plans).map(|(e, _)| e)
        })
        .collect()
}
