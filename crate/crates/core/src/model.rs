//! Model parameters and the truncated mean-field state.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance separating floating drift from logic errors in fraction vectors.
pub const EPS_NUM: f64 = 1e-9;

/// Default truncation level of the tail vectors.
pub const DEFAULT_TRUNCATION: usize = 64;

/// How an arriving customer picks among its `d1` sampled servers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArrivalScheme {
    /// Shortest queue, ties broken uniformly regardless of server status.
    A1,
    /// Shortest queue, ties broken in favour of working servers.
    A2,
}

/// How failed servers are repaired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RepairScheme {
    /// One repairman per server, rate `beta` each.
    R1,
    /// A single repairman at rate `N * beta` that samples `d2` servers and
    /// repairs the failed one with the longest queue.
    R2,
}

/// The four combinations of arrival and repair schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Model {
    I,
    II,
    III,
    IV,
}

impl Model {
    pub const ALL: [Model; 4] = [Model::I, Model::II, Model::III, Model::IV];

    pub fn from_schemes(arrival: ArrivalScheme, repair: RepairScheme) -> Self {
        match (arrival, repair) {
            (ArrivalScheme::A1, RepairScheme::R1) => Model::I,
            (ArrivalScheme::A1, RepairScheme::R2) => Model::II,
            (ArrivalScheme::A2, RepairScheme::R1) => Model::III,
            (ArrivalScheme::A2, RepairScheme::R2) => Model::IV,
        }
    }

    pub fn arrival(self) -> ArrivalScheme {
        match self {
            Model::I | Model::II => ArrivalScheme::A1,
            Model::III | Model::IV => ArrivalScheme::A2,
        }
    }

    pub fn repair(self) -> RepairScheme {
        match self {
            Model::I | Model::III => RepairScheme::R1,
            Model::II | Model::IV => RepairScheme::R2,
        }
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Model::I => "I",
            Model::II => "II",
            Model::III => "III",
            Model::IV => "IV",
        };
        f.write_str(s)
    }
}

impl FromStr for Model {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(Model::I),
            "II" | "2" => Ok(Model::II),
            "III" | "3" => Ok(Model::III),
            "IV" | "4" => Ok(Model::IV),
            other => Err(Error::InvalidConfig(format!("unknown model '{other}'"))),
        }
    }
}

/// Rates and choice counts of one supermarket model with repairable servers.
///
/// `lambda` is the per-server arrival rate (the system sees `N * lambda`).
/// `lambda = 0` and `alpha = 0` are accepted as degenerate limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub lambda: f64,
    pub mu: f64,
    pub alpha: f64,
    pub beta: f64,
    pub d1: u32,
    pub d2: u32,
    pub arrival_scheme: ArrivalScheme,
    pub repair_scheme: RepairScheme,
}

impl ModelConfig {
    pub fn new(model: Model, lambda: f64, mu: f64, alpha: f64, beta: f64, d1: u32, d2: u32) -> Self {
        Self {
            lambda,
            mu,
            alpha,
            beta,
            d1,
            d2,
            arrival_scheme: model.arrival(),
            repair_scheme: model.repair(),
        }
    }

    pub fn model(&self) -> Model {
        Model::from_schemes(self.arrival_scheme, self.repair_scheme)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.lambda, self.mu, self.alpha, self.beta]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidConfig("rates must be finite".into()));
        }
        if self.lambda < 0.0 || self.alpha < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "lambda and alpha must be nonnegative (lambda = {}, alpha = {})",
                self.lambda, self.alpha
            )));
        }
        if self.mu <= 0.0 || self.beta <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "mu and beta must be positive (mu = {}, beta = {})",
                self.mu, self.beta
            )));
        }
        if self.d1 < 1 || self.d2 < 1 {
            return Err(Error::InvalidConfig("d1 and d2 must be at least 1".into()));
        }
        if self.d1 > crate::kernels::MAX_CHOICES || self.d2 > crate::kernels::MAX_CHOICES {
            return Err(Error::InvalidConfig(format!(
                "choice counts above {} are not supported",
                crate::kernels::MAX_CHOICES
            )));
        }
        Ok(())
    }

    /// Traffic intensity `lambda / mu`.
    pub fn rho(&self) -> f64 {
        self.lambda / self.mu
    }

    /// Effective utilization `rho * (1 + alpha / beta)`, counting repair downtime.
    pub fn rho_tilde(&self) -> f64 {
        self.rho() * (1.0 + self.alpha / self.beta)
    }

    /// Default fixed step of the explicit integrator.
    pub fn default_dt(&self) -> f64 {
        let fastest = (self.lambda * self.d1 as f64)
            .max(self.mu)
            .max(self.alpha)
            .max(self.beta * self.d2 as f64);
        0.01 / fastest
    }

    /// Effective repair choice count: `d2` only matters under R2.
    pub(crate) fn effective_d2(&self) -> u32 {
        match self.repair_scheme {
            RepairScheme::R1 => 1,
            RepairScheme::R2 => self.d2,
        }
    }
}

/// Truncated tail fractions of working and failed servers.
///
/// `w(k)` is the fraction of servers that are working and hold at least `k`
/// customers (`k = 0..=K`); `r(l)` the fraction that are failed and hold at
/// least `l` customers (`l = 1..=K`). Levels past `K` read as zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionState {
    uw: Vec<f64>,
    // level l stored at index l - 1
    ur: Vec<f64>,
}

impl FractionState {
    /// Builds a state from `uw[0..=K]` and `ur[1..=K]` (given as a slice of
    /// length `K`), checking the ordering and boundary invariants.
    pub fn new(uw: Vec<f64>, ur: Vec<f64>) -> Result<Self> {
        let state = Self::from_parts(uw, ur)?;
        state.validate(EPS_NUM)?;
        Ok(state)
    }

    /// Same as [`FractionState::new`] without the invariant check; the
    /// vectors are padded to a common truncation level.
    pub fn from_parts(mut uw: Vec<f64>, mut ur: Vec<f64>) -> Result<Self> {
        if uw.len() < 2 {
            return Err(Error::InvalidState("uw must hold at least levels 0 and 1".into()));
        }
        let k = (uw.len() - 1).max(ur.len()).max(1);
        uw.resize(k + 1, 0.0);
        ur.resize(k, 0.0);
        Ok(Self { uw, ur })
    }

    /// All servers working and empty.
    pub fn empty(truncation: usize) -> Self {
        let k = truncation.max(1);
        let mut uw = vec![0.0; k + 1];
        uw[0] = 1.0;
        Self { uw, ur: vec![0.0; k] }
    }

    /// Geometric start `g = (1, r, r^2, ...)`, `h = 0`, with `r` the effective
    /// utilization (capped below 1). The truncation grows until the last
    /// level drops below `1e-12`.
    pub fn geometric(rho_tilde: f64, truncation: usize) -> Self {
        let r = rho_tilde.clamp(0.0, 0.999);
        let mut k = truncation.max(1);
        while r > 0.0 && r.powi(k as i32) > 1e-12 {
            k *= 2;
        }
        let uw = (0..=k).map(|i| r.powi(i as i32)).collect();
        Self { uw, ur: vec![0.0; k] }
    }

    /// Truncation level `K`.
    pub fn truncation(&self) -> usize {
        self.uw.len() - 1
    }

    pub fn w(&self, k: usize) -> f64 {
        self.uw.get(k).copied().unwrap_or(0.0)
    }

    pub fn r(&self, l: usize) -> f64 {
        if l == 0 {
            return 0.0;
        }
        self.ur.get(l - 1).copied().unwrap_or(0.0)
    }

    /// Working tail vector, levels `0..=K`.
    pub fn uw(&self) -> &[f64] {
        &self.uw
    }

    /// Failed tail vector, levels `1..=K`.
    pub fn ur(&self) -> &[f64] {
        &self.ur
    }

    /// Pads both vectors with zeros up to a new truncation level.
    pub fn extend_to(&mut self, truncation: usize) {
        if truncation > self.truncation() {
            self.uw.resize(truncation + 1, 0.0);
            self.ur.resize(truncation, 0.0);
        }
    }

    /// Checks range, ordering and the boundary condition `w(0) + r(1) = 1`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        check_tail("uw", &self.uw, 0, tol)?;
        check_tail("ur", &self.ur, 1, tol)?;
        let boundary = self.w(0) + self.r(1);
        if (boundary - 1.0).abs() > tol {
            return Err(Error::InvalidState(format!(
                "boundary violated: w(0) + r(1) = {boundary}"
            )));
        }
        Ok(())
    }

    /// Weighted sup metric `sup { |dw_k| / (k+1), |dr_l| / l }`; the shorter
    /// side is zero-padded.
    pub fn distance(&self, other: &FractionState) -> f64 {
        weighted_distance(&self.uw, &self.ur, &other.uw, &other.ur)
    }

    /// Plain sup-norm over both vectors.
    pub fn sup_diff(&self, other: &FractionState) -> f64 {
        let kmax = self.truncation().max(other.truncation());
        let mut d = 0.0f64;
        for k in 0..=kmax {
            d = d.max((self.w(k) - other.w(k)).abs());
        }
        for l in 1..=kmax {
            d = d.max((self.r(l) - other.r(l)).abs());
        }
        d
    }
}

pub(crate) fn check_tail(name: &str, v: &[f64], first_level: usize, tol: f64) -> Result<()> {
    for (i, &x) in v.iter().enumerate() {
        if !x.is_finite() || x < -tol || x > 1.0 + tol {
            return Err(Error::InvalidState(format!(
                "{name}[{}] = {x} outside [0, 1]",
                i + first_level
            )));
        }
        if i > 0 && x > v[i - 1] + tol {
            return Err(Error::InvalidState(format!(
                "{name} not nonincreasing at level {}: {} < {x}",
                i + first_level,
                v[i - 1]
            )));
        }
    }
    Ok(())
}

/// Weighted sup metric between `(uw, ur)` pairs; `ur` slices start at level 1.
pub fn weighted_distance(uw_a: &[f64], ur_a: &[f64], uw_b: &[f64], ur_b: &[f64]) -> f64 {
    let at = |v: &[f64], i: usize| v.get(i).copied().unwrap_or(0.0);
    let mut d = 0.0f64;
    for k in 0..uw_a.len().max(uw_b.len()) {
        d = d.max((at(uw_a, k) - at(uw_b, k)).abs() / (k as f64 + 1.0));
    }
    for i in 0..ur_a.len().max(ur_b.len()) {
        d = d.max((at(ur_a, i) - at(ur_b, i)).abs() / (i as f64 + 1.0));
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_scheme_roundtrip() {
        for m in Model::ALL {
            assert_eq!(Model::from_schemes(m.arrival(), m.repair()), m);
            assert_eq!(m.to_string().parse::<Model>().unwrap(), m);
        }
    }

    #[test]
    fn rho_tilde_matches_hand_values() {
        let cfg = ModelConfig::new(Model::I, 3.0, 9.0, 2.0, 5.0, 2, 1);
        assert!((cfg.rho_tilde() - 7.0 / 15.0).abs() < 1e-15);
        let cfg = ModelConfig::new(Model::I, 6.0, 9.0, 2.0, 5.0, 2, 1);
        assert!((cfg.rho_tilde() - 42.0 / 45.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_rates() {
        let mut cfg = ModelConfig::new(Model::I, 3.0, 9.0, 2.0, 5.0, 2, 1);
        cfg.mu = 0.0;
        assert!(cfg.validate().is_err());
        cfg.mu = 9.0;
        cfg.d1 = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn state_invariants() {
        assert!(FractionState::new(vec![0.8, 0.5, 0.1], vec![0.2, 0.1]).is_ok());
        // boundary broken
        assert!(FractionState::new(vec![0.8, 0.5, 0.1], vec![0.1, 0.05]).is_err());
        // not monotone
        assert!(FractionState::new(vec![0.8, 0.5, 0.6], vec![0.2, 0.1]).is_err());
        // failed tail increasing
        assert!(FractionState::new(vec![0.8, 0.5, 0.1], vec![0.2, 0.3]).is_err());
    }

    #[test]
    fn distance_weights_levels() {
        let a = FractionState::new(vec![0.8, 0.5, 0.1], vec![0.2, 0.1]).unwrap();
        let b = FractionState::new(vec![0.8, 0.44, 0.1], vec![0.2, 0.1]).unwrap();
        assert!((a.distance(&b) - 0.03).abs() < 1e-15);
        assert_eq!(a.distance(&a), 0.0);
    }

    #[test]
    fn geometric_start_is_valid() {
        let s = FractionState::geometric(0.93, 64);
        assert!(s.truncation() >= 256);
        s.validate(EPS_NUM).unwrap();
    }
}
