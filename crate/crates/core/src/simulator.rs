//! Exact event-driven simulation of the finite-N system.
//!
//! Clocks are aggregated: one exponential clock for the whole system with
//! rate `N lambda + (mu + alpha) B + repair`, where `B` counts working busy
//! servers, and the firing event picks a uniform member of the relevant set.
//! Failures happen only to working busy servers, so a failed server always
//! holds at least one customer. Service interrupted by a failure resumes with
//! a fresh exponential clock after repair, which is equivalent by
//! memorylessness.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::model::{weighted_distance, ArrivalScheme, FractionState, ModelConfig, RepairScheme};

/// Deepest tail level tracked by default; grows when a queue exceeds it.
pub const K_OBS: usize = 64;
/// Batches used for the confidence interval of a single replication.
pub const BATCHES: usize = 20;
/// Number of tagged servers whose joint queue moments are recorded.
const TAGGED: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub model: ModelConfig,
    pub n: usize,
    pub horizon: f64,
    pub warmup: f64,
    pub seed: u64,
    pub replications: usize,
    /// Record the empirical tails of replication 0 every `sample_interval`.
    pub sample_interval: Option<f64>,
    /// Minimum number of tail levels in the report.
    pub k_obs: usize,
}

impl SimConfig {
    pub fn new(model: ModelConfig, n: usize, horizon: f64, warmup: f64, seed: u64, replications: usize) -> Self {
        Self {
            model,
            n,
            horizon,
            warmup,
            seed,
            replications,
            sample_interval: None,
            k_obs: K_OBS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n == 0 {
            return bad("N must be at least 1".into());
        }
        let need = self.model.d1.max(self.model.d2) as usize;
        if self.n < need {
            return bad(format!("N = {} is smaller than max(d1, d2) = {need}", self.n));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if !(self.warmup >= 0.0 && self.warmup < self.horizon) {
            return bad(format!("warmup {} must lie in [0, horizon)", self.warmup));
        }
        if self.replications == 0 {
            return bad("replications must be at least 1".into());
        }
        if let Some(dt) = self.sample_interval {
            if !(dt.is_finite() && dt > 0.0) {
                return bad(format!("sample interval must be positive, got {dt}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCounts {
    pub arrivals: u64,
    pub departures: u64,
    pub failures: u64,
    pub repairs: u64,
    /// Repairman samples that contained no failed server.
    pub idle_repairs: u64,
}

impl EventCounts {
    pub fn total(&self) -> u64 {
        self.arrivals + self.departures + self.failures + self.repairs + self.idle_repairs
    }

    fn add(&mut self, o: &EventCounts) {
        self.arrivals += o.arrivals;
        self.departures += o.departures;
        self.failures += o.failures;
        self.repairs += o.repairs;
        self.idle_repairs += o.idle_repairs;
    }
}

/// Empirical tails of replication 0 sampled on a regular grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transient {
    pub times: Vec<f64>,
    pub uw: Vec<Vec<f64>>,
    pub ur: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    /// Time-averaged `U_W,k`, k = 0..=K.
    pub uw_hat: Vec<f64>,
    /// Time-averaged `U_R,l`, l = 1..=K (index 0 is level 1).
    pub ur_hat: Vec<f64>,
    /// 95% half-widths matching `uw_hat`.
    pub half_width_w: Vec<f64>,
    /// 95% half-widths matching `ur_hat`.
    pub half_width_r: Vec<f64>,
    pub events: u64,
    pub event_counts: EventCounts,
    /// Correlation of the queue lengths of servers 0 and 1 over the
    /// observation window.
    pub tagged_correlation: f64,
    /// Fraction of observed time server 0 spent working with `k` customers.
    pub tagged_w: Vec<f64>,
    /// Fraction of observed time server 0 spent failed with `l` customers
    /// (index 0 is `l = 1`).
    pub tagged_r: Vec<f64>,
    pub transient: Option<Transient>,
    pub warnings: Vec<String>,
    pub n: usize,
    pub replications: usize,
}

impl SimReport {
    pub fn truncation(&self) -> usize {
        self.ur_hat.len()
    }

    pub fn state(&self) -> Result<FractionState> {
        FractionState::from_parts(self.uw_hat.clone(), self.ur_hat.clone())
    }
}

/// Weighted sup distance between the empirical tails and a mean-field state.
pub fn empirical_distance(report: &SimReport, state: &FractionState) -> f64 {
    weighted_distance(&report.uw_hat, &report.ur_hat, state.uw(), state.ur())
}

/// Runs all replications (in parallel on the current rayon pool) and pools
/// them. Half-widths come from replication means when there are at least two
/// replications, otherwise from batch means within the single run.
pub fn simulate(cfg: &SimConfig) -> Result<SimReport> {
    cfg.validate()?;
    let mut warnings = Vec::new();
    let rt = cfg.model.rho_tilde();
    if rt >= 1.0 {
        let msg = format!("rho_tilde = {rt} >= 1: the system is unstable, results describe a transient");
        warn!("{msg}");
        warnings.push(msg);
    }
    let runs: Vec<RunResult> = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| Run::new(cfg, rep as u64).execute())
        .collect();

    let k = runs
        .iter()
        .map(|r| r.levels())
        .max()
        .unwrap_or(0)
        .max(cfg.k_obs)
        .max(1);
    let pad = |v: &[f64], len: usize| -> Vec<f64> {
        let mut out = v.to_vec();
        out.resize(len, 0.0);
        out
    };
    let samples: Vec<(Vec<f64>, Vec<f64>)> = if runs.len() >= 2 {
        runs.iter().map(|r| (pad(&r.uw, k + 1), pad(&r.ur, k))).collect()
    } else {
        runs[0]
            .batches
            .iter()
            .map(|(w, r)| (pad(w, k + 1), pad(r, k)))
            .collect()
    };
    let (_, half_width_w) = mean_and_half_width(samples.iter().map(|s| s.0.as_slice()), k + 1);
    let (_, half_width_r) = mean_and_half_width(samples.iter().map(|s| s.1.as_slice()), k);
    let nrep = runs.len() as f64;
    let mut uw_hat = vec![0.0; k + 1];
    let mut ur_hat = vec![0.0; k];
    let mut tagged_w = vec![0.0; k + 1];
    let mut tagged_r = vec![0.0; k];
    let mut counts = EventCounts::default();
    let mut moments = [0.0; 5];
    for r in &runs {
        for (a, b) in uw_hat.iter_mut().zip(&r.uw) {
            *a += b / nrep;
        }
        for (a, b) in ur_hat.iter_mut().zip(&r.ur) {
            *a += b / nrep;
        }
        for (a, b) in tagged_w.iter_mut().zip(&r.tagged_w) {
            *a += b / nrep;
        }
        for (a, b) in tagged_r.iter_mut().zip(&r.tagged_r) {
            *a += b / nrep;
        }
        for (a, b) in moments.iter_mut().zip(&r.moments) {
            *a += b / nrep;
        }
        counts.add(&r.counts);
    }
    let [m0, m1, m00, m11, m01] = moments;
    let (v0, v1) = (m00 - m0 * m0, m11 - m1 * m1);
    let tagged_correlation = if v0 > 0.0 && v1 > 0.0 {
        (m01 - m0 * m1) / (v0 * v1).sqrt()
    } else {
        0.0
    };
    let transient = runs.into_iter().next().and_then(|r| r.transient);
    Ok(SimReport {
        uw_hat,
        ur_hat,
        half_width_w,
        half_width_r,
        events: counts.total(),
        event_counts: counts,
        tagged_correlation,
        tagged_w,
        tagged_r,
        transient,
        warnings,
        n: cfg.n,
        replications: cfg.replications,
    })
}

/// Coordinate-wise sample mean and Student-t 95% half-width.
fn mean_and_half_width<'a>(samples: impl Iterator<Item = &'a [f64]> + Clone, len: usize) -> (Vec<f64>, Vec<f64>) {
    let n = samples.clone().count();
    let mut mean = vec![0.0; len];
    for s in samples.clone() {
        for (m, x) in mean.iter_mut().zip(s) {
            *m += x / n as f64;
        }
    }
    if n < 2 {
        return (mean, vec![f64::INFINITY; len]);
    }
    let mut var = vec![0.0; len];
    for s in samples {
        for ((v, x), m) in var.iter_mut().zip(s).zip(&mean) {
            *v += (x - m) * (x - m) / (n - 1) as f64;
        }
    }
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("degrees of freedom are positive")
        .inverse_cdf(0.975);
    let hw = var.iter().map(|v| t * (v / n as f64).sqrt()).collect();
    (mean, hw)
}

struct RunResult {
    uw: Vec<f64>,
    ur: Vec<f64>,
    batches: Vec<(Vec<f64>, Vec<f64>)>,
    counts: EventCounts,
    tagged_w: Vec<f64>,
    tagged_r: Vec<f64>,
    /// Time averages of q0, q1, q0^2, q1^2, q0 q1.
    moments: [f64; 5],
    transient: Option<Transient>,
}

impl RunResult {
    fn levels(&self) -> usize {
        self.ur.len()
    }
}

/// Vector with O(1) insert, remove and uniform sampling.
struct IndexSet {
    items: Vec<u32>,
    pos: Vec<u32>,
}

impl IndexSet {
    const NONE: u32 = u32::MAX;

    fn new(n: usize) -> Self {
        Self {
            items: Vec::with_capacity(n),
            pos: vec![Self::NONE; n],
        }
    }

    fn len(&self) -> usize {
        self.items.len()
    }

    fn insert(&mut self, s: usize) {
        debug_assert_eq!(self.pos[s], Self::NONE);
        self.pos[s] = self.items.len() as u32;
        self.items.push(s as u32);
    }

    fn remove(&mut self, s: usize) {
        let p = self.pos[s] as usize;
        debug_assert!(p < self.items.len());
        let last = *self.items.last().expect("set is nonempty");
        self.items[p] = last;
        self.pos[last as usize] = p as u32;
        self.items.pop();
        self.pos[s] = Self::NONE;
    }

    fn pick(&self, rng: &mut impl Rng) -> usize {
        self.items[rng.random_range(0..self.items.len())] as usize
    }
}

/// Time integral of an integer-valued count, accumulated lazily.
#[derive(Clone, Copy, Default)]
struct Area {
    count: u64,
    area: f64,
    since: f64,
}

impl Area {
    fn flush(&mut self, t: f64) {
        self.area += self.count as f64 * (t - self.since);
        self.since = t;
    }

    fn bump(&mut self, t: f64, up: bool) {
        self.flush(t);
        if up {
            self.count += 1;
        } else {
            self.count -= 1;
        }
    }
}

struct Run<'a> {
    cfg: &'a SimConfig,
    rng: ChaCha8Rng,
    t: f64,
    queue: Vec<u32>,
    failed: Vec<bool>,
    busy_working: IndexSet,
    failed_set: IndexSet,
    /// Exact-length counts: `cw[k]` working servers with `k` customers,
    /// `cr[k]` failed servers with `k` customers (`cr[0]` stays 0).
    cw: Vec<Area>,
    cr: Vec<Area>,
    /// Tagged server 0: time in each exact state.
    tag_w: Vec<f64>,
    tag_r: Vec<f64>,
    /// Integrals of q0, q1, q0^2, q1^2, q0 q1.
    tag_mom: [f64; 5],
    tag_since: f64,
    counts: EventCounts,
    pick: Vec<usize>,
}

impl<'a> Run<'a> {
    fn new(cfg: &'a SimConfig, replication: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(replication);
        let n = cfg.n;
        let levels = cfg.k_obs.max(1) + 2;
        let mut cw = vec![Area::default(); levels];
        cw[0].count = n as u64;
        Self {
            cfg,
            rng,
            t: 0.0,
            queue: vec![0; n],
            failed: vec![false; n],
            busy_working: IndexSet::new(n),
            failed_set: IndexSet::new(n),
            cw,
            cr: vec![Area::default(); levels],
            tag_w: vec![0.0; levels],
            tag_r: vec![0.0; levels],
            tag_mom: [0.0; 5],
            tag_since: 0.0,
            counts: EventCounts::default(),
            pick: Vec::with_capacity(64),
        }
    }

    fn execute(mut self) -> RunResult {
        let cfg = self.cfg;
        let m = cfg.model;
        let n = cfg.n as f64;
        let arrival_rate = n * m.lambda;
        let r2 = m.repair_scheme == RepairScheme::R2;
        let batch_len = (cfg.horizon - cfg.warmup) / BATCHES as f64;
        let mut transient = cfg.sample_interval.map(|_| Transient {
            times: Vec::new(),
            uw: Vec::new(),
            ur: Vec::new(),
        });
        let mut next_sample = 0.0;
        let sample_dt = cfg.sample_interval.unwrap_or(f64::INFINITY);

        let mut observing = false;
        let mut boundary = cfg.warmup;
        let mut batches: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(BATCHES);
        loop {
            let busy = self.busy_working.len() as f64;
            let repair_rate = if r2 {
                n * m.beta
            } else {
                self.failed_set.len() as f64 * m.beta
            };
            let serve_rate = (m.mu + m.alpha) * busy;
            let total = arrival_rate + serve_rate + repair_rate;
            let dt = if total > 0.0 {
                self.rng.sample::<f64, _>(Exp1) / total
            } else {
                f64::INFINITY
            };
            let t_next = self.t + dt;

            // Everything scheduled before the next event sees the current state.
            while let Some(tr) = transient.as_mut() {
                if next_sample > t_next.min(cfg.horizon) {
                    break;
                }
                let (w, r) = self.tails_now();
                tr.times.push(next_sample);
                tr.uw.push(w);
                tr.ur.push(r);
                next_sample += sample_dt;
            }
            while boundary <= t_next && boundary <= cfg.horizon {
                self.flush_all(boundary);
                if observing {
                    batches.push(self.take_batch(batch_len));
                } else {
                    self.reset_areas();
                    observing = true;
                }
                if batches.len() == BATCHES {
                    break;
                }
                boundary = if batches.len() + 1 == BATCHES {
                    cfg.horizon
                } else {
                    cfg.warmup + batch_len * (batches.len() + 1) as f64
                };
            }
            if batches.len() == BATCHES || t_next > cfg.horizon {
                break;
            }
            self.t = t_next;

            let u = self.rng.random::<f64>() * total;
            if u < arrival_rate {
                self.arrival(m.d1 as usize, m.arrival_scheme);
            } else if u < arrival_rate + serve_rate {
                let s = self.busy_working.pick(&mut self.rng);
                if (u - arrival_rate) < m.mu * busy {
                    self.departure(s);
                } else {
                    self.fail(s);
                }
            } else if r2 {
                self.sampled_repair(m.d2 as usize);
            } else {
                let s = self.failed_set.pick(&mut self.rng);
                self.repair(s);
            }
        }

        let obs = cfg.horizon - cfg.warmup;
        let tagged_w = self.tag_w.iter().map(|x| x / obs).collect::<Vec<_>>();
        let tagged_r = self.tag_r.iter().skip(1).map(|x| x / obs).collect::<Vec<_>>();
        let moments = self.tag_mom.map(|x| x / obs);
        let len = batches.iter().map(|b| b.0.len()).max().unwrap_or(0);
        let mut total_w = vec![0.0; len];
        let mut total_r = vec![0.0; len];
        for (w, r) in &batches {
            for (a, b) in total_w.iter_mut().zip(w) {
                *a += b / BATCHES as f64;
            }
            for (a, b) in total_r.iter_mut().zip(r) {
                *a += b / BATCHES as f64;
            }
        }
        let (uw, ur) = tails_from_exact(&total_w, &total_r, cfg.n);
        let batches = batches
            .into_iter()
            .map(|(w, r)| tails_from_exact(&w, &r, cfg.n))
            .collect();
        RunResult {
            uw,
            ur,
            batches,
            counts: self.counts,
            tagged_w,
            tagged_r,
            moments,
            transient,
        }
    }

    /// Current empirical tails.
    fn tails_now(&self) -> (Vec<f64>, Vec<f64>) {
        let w: Vec<f64> = self.cw.iter().map(|a| a.count as f64).collect();
        let r: Vec<f64> = self.cr.iter().map(|a| a.count as f64).collect();
        tails_from_exact(&w, &r, self.cfg.n)
    }

    fn flush_all(&mut self, t: f64) {
        for a in self.cw.iter_mut().chain(self.cr.iter_mut()) {
            a.flush(t);
        }
        self.flush_tagged(t);
    }

    fn reset_areas(&mut self) {
        for a in self.cw.iter_mut().chain(self.cr.iter_mut()) {
            a.area = 0.0;
        }
        self.tag_w.iter_mut().for_each(|x| *x = 0.0);
        self.tag_r.iter_mut().for_each(|x| *x = 0.0);
        self.tag_mom = [0.0; 5];
    }

    /// Time-averaged exact-length counts over the last batch; clears areas.
    fn take_batch(&mut self, len: f64) -> (Vec<f64>, Vec<f64>) {
        let take = |v: &mut Vec<Area>| -> Vec<f64> {
            v.iter_mut()
                .map(|a| {
                    let x = a.area / len;
                    a.area = 0.0;
                    x
                })
                .collect()
        };
        let w = take(&mut self.cw);
        let r = take(&mut self.cr);
        (w, r)
    }

    /// Accumulates the tagged statistics up to `t`. Only counts while
    /// observing; the warmup reset clears what came before.
    fn flush_tagged(&mut self, t: f64) {
        let dt = t - self.tag_since;
        self.tag_since = t;
        if dt <= 0.0 {
            return;
        }
        let q0 = self.queue[0] as usize;
        let slot = if self.failed[0] { &mut self.tag_r } else { &mut self.tag_w };
        slot[q0] += dt;
        let a = q0 as f64;
        let b = self.queue.get(1).map_or(0.0, |&q| q as f64);
        for (m, x) in self.tag_mom.iter_mut().zip([a, b, a * a, b * b, a * b]) {
            *m += x * dt;
        }
    }

    fn ensure_level(&mut self, k: usize) {
        if k >= self.cw.len() {
            let len = (2 * self.cw.len()).max(k + 1);
            let t = self.t;
            let fresh = Area {
                count: 0,
                area: 0.0,
                since: t,
            };
            self.cw.resize(len, fresh);
            self.cr.resize(len, fresh);
            self.tag_w.resize(len, 0.0);
            self.tag_r.resize(len, 0.0);
        }
    }

    /// Moves server `s` from one (status, length) cell to another.
    fn relabel(&mut self, s: usize, failed: bool, q: u32) {
        if s < TAGGED {
            self.flush_tagged(self.t);
        }
        let t = self.t;
        let (old_f, old_q) = (self.failed[s], self.queue[s] as usize);
        self.ensure_level(q as usize);
        if old_f {
            self.cr[old_q].bump(t, false);
        } else {
            self.cw[old_q].bump(t, false);
        }
        if failed {
            self.cr[q as usize].bump(t, true);
        } else {
            self.cw[q as usize].bump(t, true);
        }
        self.failed[s] = failed;
        self.queue[s] = q;
    }

    /// Draws `d` distinct servers into `self.pick` (Floyd's algorithm).
    fn sample_distinct(&mut self, d: usize) {
        let n = self.cfg.n;
        self.pick.clear();
        for j in n - d..n {
            let t = self.rng.random_range(0..=j);
            if self.pick.contains(&t) {
                self.pick.push(j);
            } else {
                self.pick.push(t);
            }
        }
    }

    fn arrival(&mut self, d1: usize, scheme: ArrivalScheme) {
        self.counts.arrivals += 1;
        self.sample_distinct(d1);
        let min_q = self.pick.iter().map(|&s| self.queue[s]).min().expect("d1 >= 1");
        let at_min = |s: &usize| self.queue[*s] == min_q;
        let working_min = self.pick.iter().filter(|s| at_min(s) && !self.failed[**s]).count();
        let prefer_working = scheme == ArrivalScheme::A2 && working_min > 0;
        let eligible = |s: &usize| at_min(s) && (!prefer_working || !self.failed[*s]);
        let ties = self.pick.iter().filter(|s| eligible(s)).count();
        let choice = self.rng.random_range(0..ties);
        let s = *self
            .pick
            .iter()
            .filter(|s| eligible(s))
            .nth(choice)
            .expect("choice indexes the tie set");
        let f = self.failed[s];
        self.relabel(s, f, self.queue[s] + 1);
        if !f && self.queue[s] == 1 {
            self.busy_working.insert(s);
        }
    }

    fn departure(&mut self, s: usize) {
        self.counts.departures += 1;
        let q = self.queue[s] - 1;
        self.relabel(s, false, q);
        if q == 0 {
            self.busy_working.remove(s);
        }
    }

    fn fail(&mut self, s: usize) {
        self.counts.failures += 1;
        self.relabel(s, true, self.queue[s]);
        self.busy_working.remove(s);
        self.failed_set.insert(s);
    }

    fn repair(&mut self, s: usize) {
        self.counts.repairs += 1;
        self.relabel(s, false, self.queue[s]);
        self.failed_set.remove(s);
        self.busy_working.insert(s);
    }

    /// Single repairman: samples `d2` servers and repairs the failed one
    /// with the longest queue.
    fn sampled_repair(&mut self, d2: usize) {
        self.sample_distinct(d2);
        let longest = self
            .pick
            .iter()
            .filter(|&&s| self.failed[s])
            .map(|&s| self.queue[s])
            .max();
        let Some(q) = longest else {
            self.counts.idle_repairs += 1;
            return;
        };
        let is_tie = |s: &usize| self.failed[*s] && self.queue[*s] == q;
        let ties = self.pick.iter().filter(|s| is_tie(s)).count();
        let choice = self.rng.random_range(0..ties);
        let s = *self.pick.iter().filter(|s| is_tie(s)).nth(choice).expect("tie set is nonempty");
        self.repair(s);
    }
}

/// Converts exact-length server counts (or their time averages) into tail
/// fractions `U_W,k` (k >= 0) and `U_R,l` (l >= 1), trimming trailing zeros.
fn tails_from_exact(w: &[f64], r: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let len = w.len().max(r.len()).max(2);
    let at = |v: &[f64], i: usize| v.get(i).copied().unwrap_or(0.0);
    let mut uw = vec![0.0; len];
    let mut ur = vec![0.0; len];
    let mut acc_w = 0.0;
    let mut acc_r = 0.0;
    for k in (0..len).rev() {
        acc_w += at(w, k);
        uw[k] = acc_w / n as f64;
        if k >= 1 {
            acc_r += at(r, k);
            ur[k] = acc_r / n as f64;
        }
    }
    // uW[0] counts working servers only, so the bottom of the sum is exact.
    let mut k = len - 1;
    while k > 1 && uw[k] == 0.0 && ur[k] == 0.0 {
        k -= 1;
    }
    uw.truncate(k + 1);
    let ur = ur[1..=k.max(1)].to_vec();
    (uw, ur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;

    fn base(model: Model, lambda: f64, d1: u32, d2: u32) -> ModelConfig {
        ModelConfig::new(model, lambda, 9.0, 2.0, 5.0, d1, d2)
    }

    #[test]
    fn tails_from_counts() {
        // 3 working idle, 1 working with 2, 1 failed with 1
        let (uw, ur) = tails_from_exact(&[3.0, 0.0, 1.0, 0.0], &[0.0, 1.0, 0.0, 0.0], 5);
        assert_eq!(uw, vec![0.8, 0.2, 0.2]);
        assert_eq!(ur, vec![0.2, 0.0]);
        assert!((uw[0] + ur[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn index_set_roundtrip() {
        let mut s = IndexSet::new(6);
        for i in [4, 1, 5] {
            s.insert(i);
        }
        s.remove(1);
        s.insert(0);
        let mut got = s.items.clone();
        got.sort();
        assert_eq!(got, vec![0, 4, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            assert!([0, 4, 5].contains(&s.pick(&mut rng)));
        }
    }

    #[test]
    fn floyd_sampling_is_distinct_and_uniform() {
        let m = base(Model::I, 1.0, 3, 1);
        let cfg = SimConfig::new(m, 5, 1.0, 0.0, 9, 1);
        let mut run = Run::new(&cfg, 0);
        let mut hits = [0u32; 5];
        for _ in 0..30000 {
            run.sample_distinct(3);
            let mut p = run.pick.clone();
            p.sort();
            p.dedup();
            assert_eq!(p.len(), 3);
            for s in p {
                hits[s] += 1;
            }
        }
        // each server is in a 3-of-5 sample with probability 0.6
        for h in hits {
            assert!((h as f64 / 30000.0 - 0.6).abs() < 0.015, "{hits:?}");
        }
    }

    #[test]
    fn validation() {
        let m = base(Model::II, 1.0, 2, 3);
        assert!(SimConfig::new(m, 2, 10.0, 1.0, 0, 1).validate().is_err());
        assert!(SimConfig::new(m, 3, 10.0, 10.0, 0, 1).validate().is_err());
        assert!(SimConfig::new(m, 3, 10.0, 1.0, 0, 0).validate().is_err());
        assert!(SimConfig::new(m, 3, 10.0, 1.0, 0, 1).validate().is_ok());
    }

    #[test]
    fn reproducible_and_stream_separated() {
        let m = base(Model::IV, 3.0, 2, 2);
        let cfg = SimConfig::new(m, 50, 60.0, 10.0, 42, 3);
        let a = simulate(&cfg).unwrap();
        let b = simulate(&cfg).unwrap();
        assert_eq!(a, b);
        let one = SimConfig { replications: 1, ..cfg };
        let c = simulate(&one).unwrap();
        assert_ne!(a.uw_hat, c.uw_hat);
    }

    #[test]
    fn report_invariants() {
        for model in Model::ALL {
            let cfg = SimConfig::new(base(model, 4.0, 2, 2), 40, 200.0, 20.0, 7, 2);
            let rep = simulate(&cfg).unwrap();
            assert!((rep.uw_hat[0] + rep.ur_hat[0] - 1.0).abs() < 1e-9);
            let st = rep.state().unwrap();
            st.validate(1e-12).unwrap();
            let c = rep.event_counts;
            assert!(c.departures <= c.arrivals);
            assert!(c.repairs <= c.failures);
            assert!(c.failures <= c.repairs + cfg.n as u64);
            let tag: f64 = rep.tagged_w.iter().chain(&rep.tagged_r).sum();
            assert!((tag - 1.0).abs() < 1e-9, "{tag}");
            assert!(rep.half_width_w.iter().all(|h| h.is_finite()));
        }
    }

    #[test]
    fn zero_arrivals_stay_empty() {
        let cfg = SimConfig::new(base(Model::III, 0.0, 2, 2), 20, 50.0, 5.0, 3, 2);
        let rep = simulate(&cfg).unwrap();
        assert!((rep.uw_hat[0] - 1.0).abs() < 1e-12);
        assert!(rep.uw_hat[1..].iter().chain(&rep.ur_hat).all(|&x| x == 0.0));
        assert_eq!(rep.events, rep.event_counts.idle_repairs);
    }

    #[test]
    fn unstable_runs_with_warning() {
        let cfg = SimConfig::new(base(Model::I, 8.5, 2, 1), 20, 20.0, 2.0, 3, 1);
        let rep = simulate(&cfg).unwrap();
        assert_eq!(rep.warnings.len(), 1);
    }

    #[test]
    fn transient_samples_on_grid() {
        let mut cfg = SimConfig::new(base(Model::I, 3.0, 2, 1), 30, 10.0, 1.0, 5, 1);
        cfg.sample_interval = Some(2.5);
        let rep = simulate(&cfg).unwrap();
        let tr = rep.transient.unwrap();
        assert_eq!(tr.times, vec![0.0, 2.5, 5.0, 7.5, 10.0]);
        assert_eq!(tr.uw[0], vec![1.0, 0.0]);
        for (w, r) in tr.uw.iter().zip(&tr.ur) {
            FractionState::from_parts(w.clone(), r.clone()).unwrap().validate(1e-12).unwrap();
        }
    }

    #[test]
    fn distance_example() {
        let st = FractionState::from_parts(vec![0.8, 0.3], vec![0.2]).unwrap();
        let mut rep = simulate(&SimConfig::new(base(Model::I, 0.0, 1, 1), 1, 1.0, 0.0, 0, 1)).unwrap();
        rep.uw_hat = vec![0.8, 0.36];
        rep.ur_hat = vec![0.2];
        assert!((empirical_distance(&rep, &st) - 0.03).abs() < 1e-15);
        rep.uw_hat = vec![0.8, 0.3];
        assert_eq!(empirical_distance(&rep, &st), 0.0);
    }
}
