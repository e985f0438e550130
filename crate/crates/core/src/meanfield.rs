//! Mean-field ODE systems of the four models on a finite truncation.
//!
//! The free coordinates are `w(0..=K)` and `r(2..=K)`; `r(1)` is held at
//! `1 - w(0)` so the boundary condition is exact at every step.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{binom_sum, repair_kernel};
use crate::linalg::BandMatrix;
use crate::model::{ArrivalScheme, FractionState, ModelConfig, DEFAULT_TRUNCATION, EPS_NUM};

/// Range and ordering slack tolerated during integration.
pub const STATE_TOL: f64 = 1e-7;

/// Tail mass at level `K` that triggers doubling the truncation.
pub const EXTEND_THRESHOLD: f64 = 1e-12;

const NEWTON_START: f64 = 1e-2;
const RUNAWAY_TRUNCATION: usize = 256;
const NEWTON_MAX_ITER: usize = 40;
// Jacobian half-bandwidth in the interleaved ordering w0, w1, r2, w2, r3, ...
const BAND: usize = 3;

/// Time derivative of the free coordinates: `w(0..=K)` followed by
/// `r(2..=K)`.
pub fn rhs(model: &ModelConfig, state: &FractionState) -> Result<Vec<f64>> {
    model.validate()?;
    state.validate(EPS_NUM)?;
    let k = state.truncation();
    let mut dw = vec![0.0; k + 1];
    let mut dr = vec![0.0; k];
    eval_rhs(model, state.uw(), state.ur(), &mut dw, &mut dr);
    dw.extend_from_slice(&dr[1..]);
    Ok(dw)
}

/// Sup-norm of [`rhs`].
pub fn rhs_norm(model: &ModelConfig, state: &FractionState) -> Result<f64> {
    Ok(rhs(model, state)?.iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

/// Raw right-hand side. `r[l - 1]` holds level `l`; `dr[0]` receives the
/// implied derivative `-dw[0]` of the eliminated coordinate.
pub(crate) fn eval_rhs(cfg: &ModelConfig, w: &[f64], r: &[f64], dw: &mut [f64], dr: &mut [f64]) {
    let kmax = w.len() - 1;
    debug_assert_eq!(r.len(), kmax);
    let (lambda, mu, alpha, beta) = (cfg.lambda, cfg.mu, cfg.alpha, cfg.beta);
    let d1 = cfg.d1;
    let d2 = cfg.effective_d2();
    let priority = cfg.arrival_scheme == ArrivalScheme::A2;

    let w_at = |k: usize| if k <= kmax { w[k] } else { 0.0 };
    dw[0] = -alpha * w[1] + beta * repair_kernel(d2, r[0], w_at(2));
    for k in 1..=kmax {
        let wk = w[k];
        let rk = r[k - 1];
        let w_next = w_at(k + 1);
        let dw_k = w[k - 1] - wk;
        let rep = repair_kernel(d2, rk, w_next);
        if k == 1 {
            let l = binom_sum(d1, dw_k, wk + rk);
            dw[1] = lambda * dw_k * l - mu * (wk - w_next) - alpha * wk + beta * rep;
        } else {
            let dr_k = r[k - 2] - rk;
            let l = binom_sum(d1, dw_k + dr_k, wk + rk);
            dw[k] = lambda * dw_k * l - mu * (wk - w_next) - alpha * wk + beta * rep;
            let a = if priority {
                binom_sum(d1, dr_k, rk + wk)
            } else {
                l
            };
            dr[k - 1] = lambda * dr_k * a + alpha * wk - beta * rep;
        }
    }
    dr[0] = -dw[0];
}

fn free_norm(dw: &[f64], dr: &[f64]) -> f64 {
    let a = dw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    dr[1..].iter().fold(a, |m, v| m.max(v.abs()))
}

/// Worst deviations observed along an integration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IntegrationStats {
    pub steps: u64,
    /// Largest `|w(0) + r(1) - 1|` seen at any accepted step.
    pub max_boundary_defect: f64,
    /// Largest increase between consecutive tail levels seen at any step.
    pub max_order_violation: f64,
    /// Number of truncation doublings.
    pub extensions: u32,
}

impl IntegrationStats {
    pub fn merge(&mut self, other: &IntegrationStats) {
        self.steps += other.steps;
        self.max_boundary_defect = self.max_boundary_defect.max(other.max_boundary_defect);
        self.max_order_violation = self.max_order_violation.max(other.max_order_violation);
        self.extensions += other.extensions;
    }
}

/// Which states an integration keeps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Recording {
    EveryStep,
    /// Keep states at (approximately) this spacing, plus the final one.
    Interval(f64),
    FinalOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrateOptions {
    pub dt: f64,
    pub recording: Recording,
    pub auto_extend: bool,
}

impl IntegrateOptions {
    pub fn new(dt: f64) -> Self {
        Self {
            dt,
            recording: Recording::EveryStep,
            auto_extend: true,
        }
    }

    pub fn recording(mut self, recording: Recording) -> Self {
        self.recording = recording;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<FractionState>,
    /// Sup-norm of the right-hand side at the final state.
    pub derivative_norm_final: f64,
    pub stats: IntegrationStats,
}

impl Trajectory {
    pub fn final_state(&self) -> &FractionState {
        self.states.last().expect("trajectory always holds the initial state")
    }
}

/// Fixed-step RK4 integration over `[0, t_end]`, recording every step.
pub fn integrate(model: &ModelConfig, initial: &FractionState, t_end: f64, dt: f64) -> Result<Trajectory> {
    integrate_with(model, initial, t_end, &IntegrateOptions::new(dt))
}

pub fn integrate_with(
    model: &ModelConfig,
    initial: &FractionState,
    t_end: f64,
    opts: &IntegrateOptions,
) -> Result<Trajectory> {
    model.validate()?;
    initial.validate(EPS_NUM)?;
    if !(opts.dt > 0.0 && opts.dt.is_finite()) {
        return Err(Error::InvalidConfig(format!("time step must be positive, got {}", opts.dt)));
    }
    if !(t_end >= 0.0 && t_end.is_finite()) {
        return Err(Error::InvalidConfig(format!("end time must be nonnegative, got {t_end}")));
    }
    let mut engine = Engine::new(model, initial, opts.auto_extend);
    let mut times = vec![0.0];
    let mut states = vec![engine.snapshot()];
    let mut next_record = match opts.recording {
        Recording::Interval(h) => h,
        _ => f64::INFINITY,
    };
    let n_steps = (t_end / opts.dt - 1e-9).ceil().max(0.0) as u64;
    for i in 0..n_steps {
        let h = if i + 1 == n_steps {
            t_end - engine.t
        } else {
            opts.dt
        };
        engine.step(h)?;
        let last = i + 1 == n_steps;
        let keep = match opts.recording {
            Recording::EveryStep => true,
            Recording::FinalOnly => last,
            Recording::Interval(h) => {
                if engine.t >= next_record - 1e-12 * h || last {
                    while next_record <= engine.t + 1e-12 * h {
                        next_record += h;
                    }
                    true
                } else {
                    false
                }
            }
        };
        if keep && engine.t > *times.last().unwrap() {
            times.push(engine.t);
            states.push(engine.snapshot());
        }
    }
    let derivative_norm_final = engine.residual();
    Ok(Trajectory {
        times,
        states,
        derivative_norm_final,
        stats: engine.stats,
    })
}

/// Knobs of [`steady_state_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteadyStateOptions {
    /// Integration step; defaults to [`steady_state_dt`].
    pub dt: Option<f64>,
    /// Polish with Newton's method once the residual is small.
    pub newton: bool,
    /// Hard cap on truncation growth.
    pub max_truncation: usize,
}

impl Default for SteadyStateOptions {
    fn default() -> Self {
        Self {
            dt: None,
            newton: true,
            max_truncation: 1 << 14,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteadyState {
    pub state: FractionState,
    pub residual: f64,
    /// Integrated time before convergence.
    pub time: f64,
    pub newton_iterations: usize,
    pub stats: IntegrationStats,
}

/// Step used when only the limit matters. Time accuracy is irrelevant there,
/// so it sits well inside the RK4 stability region rather than at the
/// accuracy-driven default.
pub fn steady_state_dt(model: &ModelConfig) -> f64 {
    let total = model.lambda * model.d1 as f64 + model.mu + model.alpha + model.beta * model.d2 as f64;
    0.1 / total
}

/// Default initial condition: geometric working tail at the effective
/// utilization, no failed servers.
pub fn default_initial(model: &ModelConfig) -> FractionState {
    FractionState::geometric(model.rho_tilde(), DEFAULT_TRUNCATION)
}

/// Integrates until the right-hand side sup-norm drops below `tol`.
pub fn steady_state(model: &ModelConfig, initial: &FractionState, tol: f64) -> Result<FractionState> {
    steady_state_with(model, initial, tol, &SteadyStateOptions::default()).map(|s| s.state)
}

/// Window-doubling integration toward the fixed point: windows start at
/// `50 / min(mu, beta)` and the total horizon is capped at `1e5 / mu`.
pub fn steady_state_with(
    model: &ModelConfig,
    initial: &FractionState,
    tol: f64,
    opts: &SteadyStateOptions,
) -> Result<SteadyState> {
    model.validate()?;
    initial.validate(EPS_NUM)?;
    let rho_tilde = model.rho_tilde();
    if rho_tilde >= 1.0 {
        return Err(Error::Unstable {
            rho: model.rho(),
            rho_tilde,
        });
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidConfig(format!("tolerance must be positive, got {tol}")));
    }
    let mut dt = opts.dt.unwrap_or_else(|| steady_state_dt(model));
    let mut last_err = None;
    for _attempt in 0..4 {
        match run_steady_state(model, initial, tol, dt, opts) {
            Err(e @ (Error::Instability { .. } | Error::Monotonicity { .. })) => {
                debug!("steady state with dt = {dt:e} failed ({e}); retrying with dt / 4");
                last_err = Some(e);
                dt /= 4.0;
            }
            other => return other,
        }
    }
    Err(last_err.expect("loop ran at least once"))
}

fn run_steady_state(
    model: &ModelConfig,
    initial: &FractionState,
    tol: f64,
    dt: f64,
    opts: &SteadyStateOptions,
) -> Result<SteadyState> {
    let mut engine = Engine::new(model, initial, true);
    let t_max = 1e5 / model.mu;
    let mut window = 50.0 / model.mu.min(model.beta);
    let mut best = f64::INFINITY;
    let mut newton_iterations = 0;
    // (time, mean queue length) at window ends, for the runaway guard
    let mut history: Vec<(f64, f64)> = Vec::new();
    loop {
        let res = engine.residual();
        best = best.min(res);
        debug!("t = {:.3}, residual {res:e}, K = {}", engine.t, engine.truncation());
        if history.last().is_none_or(|&(t, _)| engine.t > t) {
            history.push((engine.t, engine.mean_queue()));
        }
        if runaway(&history, engine.truncation()) {
            debug!("mass drifting to infinity at t = {:.3}", engine.t);
            return Err(Error::NonConvergence {
                iterations: engine.stats.steps as usize,
                best_residual: best,
            });
        }
        if res < tol && !engine.needs_extension() {
            return Ok(engine.finish(res, newton_iterations));
        }
        if opts.newton && res < NEWTON_START {
            if let Some(iters) = engine.newton(tol) {
                newton_iterations += iters;
                let res = engine.residual();
                best = best.min(res);
                if engine.needs_extension() {
                    engine.extend()?;
                    check_cap(&engine, opts)?;
                    continue;
                }
                return Ok(engine.finish(res, newton_iterations));
            }
        }
        if engine.t >= t_max * (1.0 - 1e-12) {
            return Err(Error::NonConvergence {
                iterations: engine.stats.steps as usize,
                best_residual: best,
            });
        }
        let span = window.min(t_max - engine.t);
        let n = (span / dt).ceil().max(1.0) as u64;
        let h = span / n as f64;
        for _ in 0..n {
            engine.step(h)?;
        }
        check_cap(&engine, opts)?;
        window *= 2.0;
    }
}

/// Mean queue length growing at a steady rate over the last three windows
/// while the tail already spans hundreds of levels: mass escapes to
/// infinity and no fixed point will be reached from this start.
fn runaway(history: &[(f64, f64)], truncation: usize) -> bool {
    if truncation < RUNAWAY_TRUNCATION || history.len() < 4 {
        return false;
    }
    let rate = |i: usize| {
        let (t0, m0) = history[i - 1];
        let (t1, m1) = history[i];
        (m1 - m0) / (t1 - t0)
    };
    let n = history.len() - 1;
    let (a, b, c) = (rate(n - 2), rate(n - 1), rate(n));
    a > 0.0 && b >= 0.5 * a && c >= 0.5 * b
}

fn check_cap(engine: &Engine<'_>, opts: &SteadyStateOptions) -> Result<()> {
    if engine.truncation() > opts.max_truncation {
        return Err(Error::NonConvergence {
            iterations: engine.stats.steps as usize,
            best_residual: engine.residual(),
        });
    }
    Ok(())
}

/// RK4 state machine over the raw tail vectors.
struct Engine<'a> {
    cfg: &'a ModelConfig,
    w: Vec<f64>,
    r: Vec<f64>,
    t: f64,
    auto_extend: bool,
    stats: IntegrationStats,
    kw: [Vec<f64>; 4],
    kr: [Vec<f64>; 4],
    sw: Vec<f64>,
    sr: Vec<f64>,
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a ModelConfig, initial: &FractionState, auto_extend: bool) -> Self {
        let w = initial.uw().to_vec();
        let mut r = initial.ur().to_vec();
        r[0] = 1.0 - w[0];
        let k = w.len() - 1;
        let mut e = Self {
            cfg,
            w,
            r,
            t: 0.0,
            auto_extend,
            stats: IntegrationStats::default(),
            kw: std::array::from_fn(|_| vec![0.0; k + 1]),
            kr: std::array::from_fn(|_| vec![0.0; k]),
            sw: vec![0.0; k + 1],
            sr: vec![0.0; k],
        };
        if auto_extend {
            while e.needs_extension() && e.truncation() < 1 << 20 {
                e.resize(2 * e.truncation());
            }
        }
        e
    }

    fn truncation(&self) -> usize {
        self.w.len() - 1
    }

    fn needs_extension(&self) -> bool {
        let k = self.truncation();
        self.auto_extend && self.w[k] + self.r[k - 1] > EXTEND_THRESHOLD
    }

    fn resize(&mut self, k: usize) {
        self.w.resize(k + 1, 0.0);
        self.r.resize(k, 0.0);
        for v in &mut self.kw {
            v.resize(k + 1, 0.0);
        }
        for v in &mut self.kr {
            v.resize(k, 0.0);
        }
        self.sw.resize(k + 1, 0.0);
        self.sr.resize(k, 0.0);
    }

    fn extend(&mut self) -> Result<()> {
        let k = self.truncation();
        debug!("extending truncation {k} -> {}", 2 * k);
        self.resize(2 * k);
        self.stats.extensions += 1;
        Ok(())
    }

    fn mean_queue(&self) -> f64 {
        self.w[1..].iter().sum::<f64>() + self.r.iter().sum::<f64>()
    }

    fn snapshot(&self) -> FractionState {
        FractionState::from_parts(self.w.clone(), self.r.clone()).expect("engine keeps K >= 1")
    }

    fn residual(&self) -> f64 {
        let k = self.truncation();
        let mut dw = vec![0.0; k + 1];
        let mut dr = vec![0.0; k];
        eval_rhs(self.cfg, &self.w, &self.r, &mut dw, &mut dr);
        free_norm(&dw, &dr)
    }

    fn step(&mut self, h: f64) -> Result<()> {
        let cfg = self.cfg;
        let n = self.w.len();
        let coef = [0.0, 0.5 * h, 0.5 * h, h];
        eval_rhs(cfg, &self.w, &self.r, &mut self.kw[0], &mut self.kr[0]);
        for s in 1..4 {
            let (done_w, todo_w) = self.kw.split_at_mut(s);
            let (done_r, todo_r) = self.kr.split_at_mut(s);
            for i in 0..n {
                self.sw[i] = self.w[i] + coef[s] * done_w[s - 1][i];
            }
            for i in 1..n - 1 {
                self.sr[i] = self.r[i] + coef[s] * done_r[s - 1][i];
            }
            self.sr[0] = 1.0 - self.sw[0];
            eval_rhs(cfg, &self.sw, &self.sr, &mut todo_w[0], &mut todo_r[0]);
        }
        let c = h / 6.0;
        for i in 0..n {
            self.w[i] += c * (self.kw[0][i] + 2.0 * self.kw[1][i] + 2.0 * self.kw[2][i] + self.kw[3][i]);
        }
        for i in 1..n - 1 {
            self.r[i] += c * (self.kr[0][i] + 2.0 * self.kr[1][i] + 2.0 * self.kr[2][i] + self.kr[3][i]);
        }
        self.r[0] = 1.0 - self.w[0];
        self.t += h;
        self.stats.steps += 1;
        self.check()?;
        if self.needs_extension() {
            self.extend()?;
        }
        Ok(())
    }

    fn check(&mut self) -> Result<()> {
        let t = self.t;
        let in_range = |v: f64| v >= -STATE_TOL && v <= 1.0 + STATE_TOL;
        for (name, v, first) in [("w", &self.w, 0usize), ("r", &self.r, 1usize)] {
            let mut worst = 0.0f64;
            for i in 0..v.len() {
                if !in_range(v[i]) {
                    return Err(Error::Instability {
                        time: t,
                        detail: format!("{name}({}) = {}", i + first, v[i]),
                    });
                }
                if i > 0 {
                    let inc = v[i] - v[i - 1];
                    if inc > STATE_TOL {
                        return Err(Error::Monotonicity {
                            time: t,
                            detail: format!("{name}({}) exceeds {name}({}) by {inc:e}", i + first, i + first - 1),
                        });
                    }
                    worst = worst.max(inc);
                }
            }
            self.stats.max_order_violation = self.stats.max_order_violation.max(worst);
        }
        let defect = (self.w[0] + self.r[0] - 1.0).abs();
        self.stats.max_boundary_defect = self.stats.max_boundary_defect.max(defect);
        Ok(())
    }

    fn finish(self, residual: f64, newton_iterations: usize) -> SteadyState {
        SteadyState {
            state: self.snapshot(),
            residual,
            time: self.t,
            newton_iterations,
            stats: self.stats,
        }
    }

    // Free-vector ordering: w0 -> 0, w_k -> 2k - 1, r_k -> 2k - 2 (k >= 2).
    fn gather(w: &[f64], r: &[f64], x: &mut [f64]) {
        let k = w.len() - 1;
        x[0] = w[0];
        for i in 1..=k {
            x[2 * i - 1] = w[i];
        }
        for i in 2..=k {
            x[2 * i - 2] = r[i - 1];
        }
    }

    fn scatter(x: &[f64], w: &mut [f64], r: &mut [f64]) {
        let k = w.len() - 1;
        w[0] = x[0];
        for i in 1..=k {
            w[i] = x[2 * i - 1];
        }
        for i in 2..=k {
            r[i - 1] = x[2 * i - 2];
        }
        r[0] = 1.0 - w[0];
    }

    fn eval_free(&self, w: &[f64], r: &[f64], dw: &mut [f64], dr: &mut [f64], f: &mut [f64]) -> f64 {
        eval_rhs(self.cfg, w, r, dw, dr);
        Self::gather(dw, dr, f);
        f.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    fn valid(w: &[f64], r: &[f64]) -> bool {
        let ok = |v: &[f64]| {
            v.iter().all(|x| x.is_finite() && *x >= -EPS_NUM && *x <= 1.0 + EPS_NUM)
                && v.windows(2).all(|p| p[1] <= p[0] + EPS_NUM)
        };
        ok(w) && ok(r)
    }

    /// Newton iteration on the stationarity equations with a finite
    /// difference band Jacobian and backtracking. Returns the iteration
    /// count on success; leaves the state untouched on failure.
    fn newton(&mut self, tol: f64) -> Option<usize> {
        let k = self.truncation();
        let n = 2 * k;
        let mut w = self.w.clone();
        let mut r = self.r.clone();
        let mut x = vec![0.0; n];
        let mut f = vec![0.0; n];
        let mut fp = vec![0.0; n];
        let mut dw = vec![0.0; k + 1];
        let mut dr = vec![0.0; k];
        let mut tw = w.clone();
        let mut tr = r.clone();
        let mut res = self.eval_free(&w, &r, &mut dw, &mut dr, &mut f);
        let colors = 2 * BAND + 1;
        for iter in 1..=NEWTON_MAX_ITER {
            Self::gather(&w, &r, &mut x);
            let mut jac = BandMatrix::zeros(n, BAND, BAND);
            for c in 0..colors {
                let mut xp = x.clone();
                let mut steps = vec![0.0; n];
                for j in (c..n).step_by(colors) {
                    let h = 1e-8 * x[j].abs().max(1e-2);
                    xp[j] += h;
                    steps[j] = xp[j] - x[j];
                }
                Self::scatter(&xp, &mut tw, &mut tr);
                self.eval_free(&tw, &tr, &mut dw, &mut dr, &mut fp);
                for j in (c..n).step_by(colors) {
                    let lo = j.saturating_sub(BAND);
                    let hi = (j + BAND).min(n - 1);
                    for i in lo..=hi {
                        jac.set(i, j, (fp[i] - f[i]) / steps[j]);
                    }
                }
            }
            let mut delta: Vec<f64> = f.iter().map(|v| -v).collect();
            jac.solve(&mut delta)?;
            let mut scale = 1.0;
            let mut accepted = false;
            for _ in 0..30 {
                let xt: Vec<f64> = x.iter().zip(&delta).map(|(a, d)| a + scale * d).collect();
                Self::scatter(&xt, &mut tw, &mut tr);
                if Self::valid(&tw, &tr) {
                    let rt = self.eval_free(&tw, &tr, &mut dw, &mut dr, &mut fp);
                    if rt < (1.0 - 1e-4 * scale) * res {
                        w.copy_from_slice(&tw);
                        r.copy_from_slice(&tr);
                        std::mem::swap(&mut f, &mut fp);
                        res = rt;
                        accepted = true;
                        break;
                    }
                }
                scale *= 0.5;
            }
            if !accepted {
                return None;
            }
            if res < tol {
                debug!("newton converged in {iter} iterations, residual {res:e}");
                self.w = w;
                self.r = r;
                return Some(iter);
            }
        }
        None
    }
}
