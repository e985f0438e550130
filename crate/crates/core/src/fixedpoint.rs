//! Stationary points of the mean-field systems.
//!
//! Model I has a level-by-level recursion with one scalar root per level.
//! The other models are solved by integrating to steady state and checked
//! against a damped Picard iteration on the stationarity equations.

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{binom_sum, repair_kernel};
use crate::meanfield::{self, IntegrationStats, SteadyStateOptions, EXTEND_THRESHOLD};
use crate::model::{ArrivalScheme, FractionState, Model, ModelConfig, RepairScheme, EPS_NUM};

/// Largest sup-norm gap tolerated between two solution methods.
pub const CROSS_CHECK_LIMIT: f64 = 1e-6;

/// Default truncation cap for the recursion.
pub const RECURSION_MAX_LEVEL: usize = 1 << 14;

const RECURSION_STOP: f64 = 1e-14;
const BISECT_MAX_ITER: usize = 200;
const PICARD_DAMPING: f64 = 0.5;
const SCAN_POINTS: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Recursion,
    OdeSteadyState,
    Picard,
}

/// Post-hoc consistency numbers attached to a solution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Sup-norm gap to the secondary method, when one was run.
    pub cross_check_distance: Option<f64>,
    /// Largest violation of the closed-form boundary relations of the model.
    pub boundary_defect: Option<f64>,
    /// Arrival mass not routed by the priority scheme (zero under A1).
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    /// `pi_w[k]`, `k = 0..=K`.
    pub pi_w: Vec<f64>,
    /// `pi_r[l - 1]` holds level `l = 1..=K`.
    pub pi_r: Vec<f64>,
    /// Sup-norm of the right-hand side at the solution.
    pub residual: f64,
    pub truncation: usize,
    pub method: Method,
    pub diagnostics: Diagnostics,
    /// Integration record of the ODE pass, when one ran.
    pub integration: Option<IntegrationStats>,
}

impl FixedPoint {
    fn from_vectors(model: &ModelConfig, pi_w: Vec<f64>, pi_r: Vec<f64>, method: Method) -> Self {
        let truncation = pi_w.len() - 1;
        let residual = residual_of(model, &pi_w, &pi_r);
        Self {
            pi_w,
            pi_r,
            residual,
            truncation,
            method,
            diagnostics: Diagnostics::default(),
            integration: None,
        }
    }

    pub fn w(&self, k: usize) -> f64 {
        self.pi_w.get(k).copied().unwrap_or(0.0)
    }

    pub fn r(&self, l: usize) -> f64 {
        if l == 0 {
            return 0.0;
        }
        self.pi_r.get(l - 1).copied().unwrap_or(0.0)
    }

    pub fn state(&self) -> FractionState {
        FractionState::from_parts(self.pi_w.clone(), self.pi_r.clone()).expect("fixed point has K >= 1")
    }

    /// Plain sup-norm distance between two solutions.
    pub fn sup_diff(&self, other: &FixedPoint) -> f64 {
        self.state().sup_diff(&other.state())
    }
}

fn residual_of(model: &ModelConfig, w: &[f64], r: &[f64]) -> f64 {
    let k = w.len() - 1;
    let mut dw = vec![0.0; k + 1];
    let mut dr = vec![0.0; k];
    meanfield::eval_rhs(model, w, r, &mut dw, &mut dr);
    dw.iter().chain(&dr[1..]).fold(0.0f64, |m, v| m.max(v.abs()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stability {
    pub stable: bool,
    pub rho: f64,
    pub rho_tilde: f64,
}

/// The system is stable iff `rho * (1 + alpha / beta) < 1`.
pub fn stability_check(model: &ModelConfig) -> Stability {
    let rho = model.rho();
    let rho_tilde = model.rho_tilde();
    Stability {
        stable: rho_tilde < 1.0,
        rho,
        rho_tilde,
    }
}

fn require_stable(model: &ModelConfig) -> Result<()> {
    model.validate()?;
    let s = stability_check(model);
    if !s.stable {
        return Err(Error::Unstable {
            rho: s.rho,
            rho_tilde: s.rho_tilde,
        });
    }
    Ok(())
}

/// Closed-form boundary of Model I: `(pi_w0, pi_w1, pi_r1)` =
/// `(1 - alpha rho / beta, rho, alpha rho / beta)`.
pub fn model1_boundary(model: &ModelConfig) -> Result<(f64, f64, f64)> {
    require_stable(model)?;
    let rho = model.rho();
    let r1 = model.alpha / model.beta * rho;
    Ok((1.0 - r1, rho, r1))
}

/// Bisection for an increasing `f` with `f(lo) <= 0 < f(hi)`.
fn bisect(mut f: impl FnMut(f64) -> f64, mut lo: f64, mut hi: f64, width: f64) -> f64 {
    for _ in 0..BISECT_MAX_ITER {
        if hi - lo <= width {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Level-by-level solution of Model I.
///
/// The working tail follows from the flow balance across the cut between
/// levels `k - 1` and `k`, `xi_k = rho (xi_{k-1} + delta_{k-1})^d1`, and
/// `delta_k` is the unique root in `(0, delta_{k-1})` of the failed-server
/// balance `F_k`. Stops once `xi_k + delta_k < 1e-14` or at level `max_level`.
pub fn model1_recursion(model: &ModelConfig, max_level: usize, root_tol: f64) -> Result<FixedPoint> {
    require_stable(model)?;
    if model.model() != Model::I {
        return Err(Error::InvalidConfig(format!(
            "the recursion applies to Model I only, got Model {}",
            model.model()
        )));
    }
    if max_level < 1 {
        return Err(Error::InvalidConfig("truncation must be at least 1".into()));
    }
    let (lambda, alpha, beta) = (model.lambda, model.alpha, model.beta);
    let rho = model.rho();
    let d1 = model.d1;
    let (xi0, xi1, delta1) = model1_boundary(model)?;
    let mut xi = vec![xi0, xi1];
    let mut delta = vec![delta1];
    let mut k = 1;
    while k < max_level && xi[k] + delta[k - 1] >= RECURSION_STOP {
        k += 1;
        let xi_prev = xi[k - 1];
        let d_prev = delta[k - 2];
        let xi_k = rho * (xi_prev + d_prev).powi(d1 as i32);
        let f = |x: f64| {
            let l = binom_sum(d1, xi_prev - xi_k + d_prev - x, xi_k + x);
            beta * x - lambda * (d_prev - x) * l - alpha * xi_k
        };
        let delta_k = if d_prev == 0.0 {
            if alpha * xi_k > 0.0 {
                return Err(Error::BracketFailure {
                    level: k,
                    f_lo: f(0.0),
                    f_hi: f(0.0),
                });
            }
            0.0
        } else {
            let (f_lo, f_hi) = (f(0.0), f(d_prev));
            if !(f_lo < 0.0 && f_hi > 0.0) {
                return Err(Error::BracketFailure { level: k, f_lo, f_hi });
            }
            bisect(f, 0.0, d_prev, root_tol * d_prev)
        };
        xi.push(xi_k);
        delta.push(delta_k);
    }
    debug!("model I recursion stopped at level {k}");
    let mut fp = FixedPoint::from_vectors(model, xi, delta, Method::Recursion);
    fp.diagnostics.boundary_defect = Some(boundary_defect(model, &fp));
    Ok(fp)
}

/// Boundary quantities of Model II.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model2Boundary {
    pub pi_w0: f64,
    pub pi_w1: f64,
    pub pi_w2: f64,
    pub pi_r1: f64,
    /// Further sign changes of the root equation past the minimal one.
    pub other_roots: Vec<f64>,
}

fn model2_root_equation(model: &ModelConfig, x: f64) -> f64 {
    let rho = model.rho();
    let w2 = rho * (rho + x).powi(model.d1 as i32);
    let hi = (1.0 - w2).max(0.0);
    let lo = (hi - x).max(0.0);
    hi.powi(model.d2 as i32) - lo.powi(model.d2 as i32) - rho * model.alpha / model.beta
}

/// Model II boundary: `pi_w1 = rho`, `pi_w2 = rho (rho + pi_r1)^d1`, and
/// `pi_r1` the smallest nonnegative root of the repair balance at level one.
pub fn model2_boundary(model: &ModelConfig, root_tol: f64) -> Result<Model2Boundary> {
    require_stable(model)?;
    if model.model() != Model::II {
        return Err(Error::InvalidConfig(format!(
            "the boundary equations apply to Model II only, got Model {}",
            model.model()
        )));
    }
    let rho = model.rho();
    let d1 = model.d1 as i32;
    let finish = |x: f64, others: Vec<f64>| Model2Boundary {
        pi_w0: 1.0 - x,
        pi_w1: rho,
        pi_w2: rho * (rho + x).powi(d1),
        pi_r1: x,
        other_roots: others,
    };
    if model.alpha == 0.0 || model.lambda == 0.0 {
        return Ok(finish(0.0, Vec::new()));
    }
    // largest x keeping 1 - x - pi_w2(x) >= 0
    let upper = bisect(|x| x + rho * (rho + x).powi(d1) - 1.0, 0.0, 1.0, 1e-15);
    let g = |x: f64| model2_root_equation(model, x);
    let grid: Vec<f64> = (0..=SCAN_POINTS).map(|i| upper * i as f64 / SCAN_POINTS as f64).collect();
    let values: Vec<f64> = grid.iter().map(|&x| g(x)).collect();
    let crossings: Vec<usize> = (0..SCAN_POINTS)
        .filter(|&i| values[i] <= 0.0 && values[i + 1] > 0.0 || values[i] > 0.0 && values[i + 1] <= 0.0)
        .collect();
    let Some(&first) = crossings.first() else {
        let (mn, mx) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        return Err(Error::NoRoot {
            upper,
            grid_min: mn,
            grid_max: mx,
        });
    };
    // refinement pass over everything left of the first coarse crossing
    let fine_hi = grid[first + 1];
    let fine_n = 16 * SCAN_POINTS;
    let mut lo = 0.0;
    let mut hi = fine_hi;
    let mut prev = g(0.0);
    for i in 1..=fine_n {
        let x = fine_hi * i as f64 / fine_n as f64;
        let v = g(x);
        if prev <= 0.0 && v > 0.0 {
            lo = fine_hi * (i - 1) as f64 / fine_n as f64;
            hi = x;
            break;
        }
        prev = v;
    }
    let root = bisect(g, lo, hi, root_tol * upper);
    let others: Vec<f64> = crossings[1..]
        .iter()
        .map(|&i| {
            let (a, b) = (grid[i], grid[i + 1]);
            if values[i] <= 0.0 {
                bisect(g, a, b, root_tol * upper)
            } else {
                bisect(|x| -g(x), a, b, root_tol * upper)
            }
        })
        .collect();
    if !others.is_empty() {
        warn!("Model II boundary equation has {} further root(s): {:?}", others.len(), others);
    }
    Ok(finish(root, others))
}

/// Arrival mass dropped by the priority scheme:
/// `sum_{k>=2} (r(k-1) - r(k)) (L_k - W_k)` with `W_k` the priority kernel.
/// Zero for `d1 = 1`; stationary balance gives `pi_w1 = rho (1 - delta)`.
pub fn delta_diagnostic(fp: &FixedPoint, d1: u32) -> f64 {
    let mut total = 0.0;
    for k in 2..=fp.truncation {
        let (wp, wk, rp, rk) = (fp.w(k - 1), fp.w(k), fp.r(k - 1), fp.r(k));
        let dr = rp - rk;
        if dr == 0.0 {
            continue;
        }
        let l = binom_sum(d1, wp - wk + dr, wk + rk);
        let pri = binom_sum(d1, dr, rk + wk);
        total += dr * (l - pri);
    }
    total
}

/// Largest violation of the model's closed-form boundary relations.
fn boundary_defect(model: &ModelConfig, fp: &FixedPoint) -> f64 {
    let rho = model.rho();
    let d1 = model.d1 as i32;
    let (alpha, beta) = (model.alpha, model.beta);
    let d2 = model.effective_d2();
    let delta = match model.arrival_scheme {
        ArrivalScheme::A1 => 0.0,
        ArrivalScheme::A2 => delta_diagnostic(fp, model.d1),
    };
    let (w0, w1, w2, r1) = (fp.w(0), fp.w(1), fp.w(2), fp.r(1));
    let mut defect = (w0 + r1 - 1.0).abs();
    defect = defect.max((w1 - rho * (1.0 - delta)).abs());
    defect = defect.max((w2 - rho * ((w1 + r1).powi(d1) - delta)).abs());
    defect = defect.max((beta * repair_kernel(d2, r1, w2) - alpha * w1).abs() / beta);
    defect
}

/// Damped Picard iteration on the stationarity equations.
///
/// Working tails come from the cut balances `mu w(k) = sum_{j>=k} a_j`,
/// with `a_j` the arrival flow into level `j`; failed tails solve their own
/// level balance by bisection, sweeping upward.
pub fn picard(model: &ModelConfig, initial: &FractionState, tol: f64, max_iter: usize) -> Result<FixedPoint> {
    require_stable(model)?;
    initial.validate(EPS_NUM)?;
    let mut w = initial.uw().to_vec();
    let mut r = initial.ur().to_vec();
    r[0] = 1.0 - w[0];
    let mut gw = w.clone();
    let mut gr = r.clone();
    let mut best = f64::INFINITY;
    for iter in 1..=max_iter {
        picard_map(model, &w, &r, &mut gw, &mut gr);
        let mut diff = 0.0f64;
        for (a, b) in w.iter_mut().zip(&gw) {
            diff = diff.max((*b - *a).abs());
            *a = (1.0 - PICARD_DAMPING) * *a + PICARD_DAMPING * b;
        }
        for (a, b) in r.iter_mut().zip(&gr) {
            diff = diff.max((*b - *a).abs());
            *a = (1.0 - PICARD_DAMPING) * *a + PICARD_DAMPING * b;
        }
        r[0] = 1.0 - w[0];
        best = best.min(diff);
        if diff < tol {
            let k = w.len() - 1;
            if w[k] + r[k - 1] > EXTEND_THRESHOLD {
                let nk = 2 * k;
                w.resize(nk + 1, 0.0);
                r.resize(nk, 0.0);
                gw.resize(nk + 1, 0.0);
                gr.resize(nk, 0.0);
                continue;
            }
            debug!("picard converged after {iter} iterations");
            return Ok(FixedPoint::from_vectors(model, w, r, Method::Picard));
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        best_residual: best,
    })
}

fn picard_map(model: &ModelConfig, w: &[f64], r: &[f64], gw: &mut [f64], gr: &mut [f64]) {
    let kmax = w.len() - 1;
    let (lambda, mu, alpha, beta) = (model.lambda, model.mu, model.alpha, model.beta);
    let d1 = model.d1;
    let d2 = model.effective_d2();
    let priority = model.arrival_scheme == ArrivalScheme::A2;

    // arrival flows into each level, accumulated from the top
    let mut acc = 0.0;
    for k in (1..=kmax).rev() {
        let (wk, rk) = (w[k], r[k - 1]);
        let dw = w[k - 1] - wk;
        let a = if k == 1 {
            dw * binom_sum(d1, dw, wk + rk)
        } else {
            let dr = r[k - 2] - rk;
            let l = binom_sum(d1, dw + dr, wk + rk);
            let ar = if priority { binom_sum(d1, dr, rk + wk) } else { l };
            dw * l + dr * ar
        };
        acc += lambda * a.max(0.0);
        gw[k] = acc / mu;
    }

    let w_at = |k: usize| if k <= kmax { gw[k] } else { 0.0 };
    let target = alpha * gw[1] / beta;
    gr[0] = if model.repair_scheme == RepairScheme::R1 || d2 == 1 {
        target.min(1.0)
    } else {
        let w2 = w_at(2);
        let cap = (1.0 - w2).max(0.0);
        if repair_kernel(d2, cap, w2) <= target {
            cap
        } else {
            bisect(|x| repair_kernel(d2, x, w2) - target, 0.0, cap, 1e-16)
        }
    };
    for k in 2..=kmax {
        let prev = gr[k - 2];
        let (wp, wk, wn) = (gw[k - 1], gw[k], w_at(k + 1));
        let g = |x: f64| {
            let dr = prev - x;
            let a = if priority {
                binom_sum(d1, dr, x + wk)
            } else {
                binom_sum(d1, (wp - wk).max(0.0) + dr, wk + x)
            };
            beta * repair_kernel(d2, x, wn) - lambda * dr * a - alpha * wk
        };
        gr[k - 1] = if prev <= 0.0 {
            0.0
        } else if g(prev) <= 0.0 {
            prev
        } else {
            bisect(g, 0.0, prev, 1e-15 * prev)
        };
    }
    gw[0] = 1.0 - gr[0];
}

/// Knobs of [`solve_fixed_point_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub tol: f64,
    /// Run the secondary method and compare.
    pub cross_check: bool,
    pub root_tol: f64,
    pub picard_max_iter: usize,
    /// Initial truncation of the ODE and Picard state.
    pub truncation: usize,
    pub steady_state: SteadyStateOptions,
}

impl SolveOptions {
    pub fn new(tol: f64) -> Self {
        Self {
            tol,
            cross_check: true,
            root_tol: 1e-12,
            picard_max_iter: 200_000,
            truncation: crate::model::DEFAULT_TRUNCATION,
            steady_state: SteadyStateOptions::default(),
        }
    }
}

/// Solves with the default options at residual tolerance `tol`.
pub fn solve_fixed_point(model: &ModelConfig, tol: f64) -> Result<FixedPoint> {
    solve_fixed_point_with(model, &SolveOptions::new(tol))
}

/// Model I: recursion, checked against the ODE steady state. Other models:
/// ODE steady state, checked against Picard iteration. Closed-form boundary
/// relations are evaluated afterwards and stored in the diagnostics.
pub fn solve_fixed_point_with(model: &ModelConfig, opts: &SolveOptions) -> Result<FixedPoint> {
    require_stable(model)?;
    // Start from the empty system: under the sampling repairman a heavy
    // initial tail can starve repairs and escape to infinity even though a
    // stable fixed point exists.
    let initial = FractionState::empty(opts.truncation.max(2));
    let ode = || -> Result<FixedPoint> {
        let ss = meanfield::steady_state_with(model, &initial, opts.tol, &opts.steady_state)?;
        let mut fp = FixedPoint::from_vectors(
            model,
            ss.state.uw().to_vec(),
            ss.state.ur().to_vec(),
            Method::OdeSteadyState,
        );
        fp.integration = Some(ss.stats);
        Ok(fp)
    };
    let (mut primary, secondary) = if model.model() == Model::I {
        let rec = model1_recursion(model, RECURSION_MAX_LEVEL, opts.root_tol)?;
        let other = if opts.cross_check { Some(ode()?) } else { None };
        (rec, other)
    } else {
        let main = ode()?;
        let other = if opts.cross_check {
            Some(picard(model, &initial, opts.tol.min(1e-10), opts.picard_max_iter)?)
        } else {
            None
        };
        (main, other)
    };
    if let Some(sec) = secondary {
        let distance = primary.sup_diff(&sec);
        primary.diagnostics.cross_check_distance = Some(distance);
        if primary.integration.is_none() {
            primary.integration = sec.integration;
        }
        if !(distance < CROSS_CHECK_LIMIT) {
            return Err(Error::CrossCheck {
                primary: format!("{:?}", primary.method),
                secondary: format!("{:?}", sec.method),
                distance,
                limit: CROSS_CHECK_LIMIT,
                primary_solution: Box::new(primary),
                secondary_solution: Box::new(sec),
            });
        }
    }
    if model.arrival_scheme == ArrivalScheme::A2 {
        primary.diagnostics.delta = Some(delta_diagnostic(&primary, model.d1));
    } else {
        primary.diagnostics.delta = Some(0.0);
    }
    let defect = boundary_defect(model, &primary);
    primary.diagnostics.boundary_defect = Some(defect);
    if defect > CROSS_CHECK_LIMIT {
        warn!("boundary relations violated by {defect:e} for {model:?}");
    }
    if model.model() == Model::II {
        let b = model2_boundary(model, opts.root_tol)?;
        let gap = (b.pi_r1 - primary.r(1)).abs();
        if gap > CROSS_CHECK_LIMIT {
            warn!("Model II minimal boundary root {} differs from solved pi_r1 {} by {gap:e}", b.pi_r1, primary.r(1));
        }
    }
    Ok(primary)
}
