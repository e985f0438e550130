//! Test oracles that share no code with the library.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

/// Stationary law of one queue with breakdowns: states (working, n) for
/// n = 0..=cap and (failed, n) for n = 1..=cap. Arrivals at `lambda` in both
/// modes (blocked at `cap`), service at `mu` and failures at `alpha` while
/// working and busy, repair at `beta`.
pub struct Ctmc {
    /// `pw[n]`: probability of (working, n).
    pub pw: Vec<f64>,
    /// `pr[n]`: probability of (failed, n); `pr[0] = 0`.
    pub pr: Vec<f64>,
}

impl Ctmc {
    pub fn solve(lambda: f64, mu: f64, alpha: f64, beta: f64, cap: usize) -> Self {
        let nw = cap + 1;
        let size = nw + cap;
        let w = |n: usize| n;
        let r = |n: usize| nw + n - 1;
        let mut q = DMatrix::<f64>::zeros(size, size);
        let mut add = |from: usize, to: usize, rate: f64| {
            q[(from, to)] += rate;
            q[(from, from)] -= rate;
        };
        for n in 0..=cap {
            if n < cap {
                add(w(n), w(n + 1), lambda);
            }
            if n >= 1 {
                add(w(n), w(n - 1), mu);
                add(w(n), r(n), alpha);
                if n < cap {
                    add(r(n), r(n + 1), lambda);
                }
                add(r(n), w(n), beta);
            }
        }
        // pi Q = 0 with sum(pi) = 1: transpose and swap one equation for the
        // normalization.
        let mut a = q.transpose();
        for j in 0..size {
            a[(size - 1, j)] = 1.0;
        }
        let mut b = DVector::<f64>::zeros(size);
        b[size - 1] = 1.0;
        let pi = a.lu().solve(&b).expect("generator is irreducible");
        let pw = (0..=cap).map(|n| pi[w(n)]).collect();
        let mut pr = vec![0.0];
        pr.extend((1..=cap).map(|n| pi[r(n)]));
        Ctmc { pw, pr }
    }

    /// Tail sums `uw[k] = P(working, n >= k)`, `ur[l-1] = P(failed, n >= l)`.
    pub fn tails(&self) -> (Vec<f64>, Vec<f64>) {
        let cap = self.pw.len() - 1;
        let mut uw = vec![0.0; cap + 1];
        let mut ur = vec![0.0; cap];
        let (mut aw, mut ar) = (0.0, 0.0);
        for n in (0..=cap).rev() {
            aw += self.pw[n];
            uw[n] = aw;
            if n >= 1 {
                ar += self.pr[n];
                ur[n - 1] = ar;
            }
        }
        (uw, ur)
    }

    pub fn mean(&self) -> f64 {
        (0..self.pw.len()).map(|n| n as f64 * (self.pw[n] + self.pr[n])).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        (0..self.pw.len()).map(|n| (n as f64 - m).powi(2) * (self.pw[n] + self.pr[n])).sum()
    }
}

/// Largest coordinate gap between two tail-vector pairs, zero-padded.
pub fn sup_gap(uw_a: &[f64], ur_a: &[f64], uw_b: &[f64], ur_b: &[f64]) -> f64 {
    let at = |v: &[f64], i: usize| v.get(i).copied().unwrap_or(0.0);
    let mut d = 0.0f64;
    for k in 0..uw_a.len().max(uw_b.len()) {
        d = d.max((at(uw_a, k) - at(uw_b, k)).abs());
    }
    for k in 0..ur_a.len().max(ur_b.len()) {
        d = d.max((at(ur_a, k) - at(ur_b, k)).abs());
    }
    d
}
