//! Selection and repair probability kernels.
//!
//! Every arrival and repair term of the mean-field systems reduces to the
//! binomial sum `B_d(x, y) = sum_{m=1}^{d} C(d, m) x^(m-1) y^(d-m)`, which
//! equals `((x + y)^d - y^d) / x` for `x > 0` and `d y^(d-1)` at `x = 0`.
//! The sum is always evaluated explicitly so the `x = 0` limit needs no
//! special casing.

use crate::error::{Error, Result};
use crate::model::{FractionState, EPS_NUM};

/// Largest supported choice count.
pub const MAX_CHOICES: u32 = 64;

const BINOM_ROWS: usize = MAX_CHOICES as usize + 1;

const fn binomial_table() -> [[u64; BINOM_ROWS]; BINOM_ROWS] {
    let mut t = [[0u64; BINOM_ROWS]; BINOM_ROWS];
    let mut n = 0;
    while n < BINOM_ROWS {
        t[n][0] = 1;
        let mut k = 1;
        while k <= n {
            t[n][k] = t[n - 1][k - 1] + if k < n { t[n - 1][k] } else { 0 };
            k += 1;
        }
        n += 1;
    }
    t
}

static BINOMIAL: [[u64; BINOM_ROWS]; BINOM_ROWS] = binomial_table();

/// Exact binomial coefficient `C(n, k)` for `n <= 64`.
pub fn binomial(n: u32, k: u32) -> u64 {
    if k > n || n > MAX_CHOICES {
        return 0;
    }
    BINOMIAL[n as usize][k as usize]
}

/// Arguments of the binomial kernel: a choice count, a tail-fraction
/// difference `x` and a tail-fraction sum `y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelInput {
    d: u32,
    x: f64,
    y: f64,
}

impl KernelInput {
    /// Validates the arguments. Values within `EPS_NUM` of `[0, 1]` are
    /// clamped; anything further out is a domain error.
    pub fn new(d: u32, x: f64, y: f64) -> Result<Self> {
        if d < 1 || d > MAX_CHOICES {
            return Err(Error::Domain(format!("choice count d = {d} outside 1..={MAX_CHOICES}")));
        }
        if !(x >= -EPS_NUM && y >= -EPS_NUM) {
            return Err(Error::Domain(format!("negative kernel argument: x = {x}, y = {y}")));
        }
        if x + y > 1.0 + EPS_NUM {
            return Err(Error::Domain(format!("x + y = {} exceeds 1", x + y)));
        }
        Ok(Self {
            d,
            x: x.clamp(0.0, 1.0),
            y: y.clamp(0.0, 1.0),
        })
    }

    pub fn d(&self) -> u32 {
        self.d
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }
}

/// `sum_{m=1}^{d} C(d, m) x^(m-1) y^(d-m)`; lies in `[0, d]`.
pub fn binom_sum_kernel(input: KernelInput) -> f64 {
    binom_sum(input.d, input.x, input.y)
}

/// Unchecked binomial sum, evaluated by Horner's rule in `x`.
#[inline]
pub(crate) fn binom_sum(d: u32, x: f64, y: f64) -> f64 {
    match d {
        1 => 1.0,
        2 => x + 2.0 * y,
        _ => {
            let row = &BINOMIAL[d as usize];
            let mut acc = 1.0;
            let mut ypow = 1.0;
            for m in (1..d as usize).rev() {
                ypow *= y;
                acc = acc * x + row[m] as f64 * ypow;
            }
            acc
        }
    }
}

/// Unchecked repair kernel `(1 - w)^d2 - (1 - r - w)^d2`; exactly `r` when
/// `d2 = 1`.
#[inline]
pub(crate) fn repair_kernel(d2: u32, r: f64, w_next: f64) -> f64 {
    if d2 == 1 {
        return r;
    }
    let hi = 1.0 - w_next;
    let lo = (hi - r).max(0.0);
    // hi^d - lo^d = (hi - lo) * B_d(hi - lo, lo), which stays accurate for small r
    r * binom_sum(d2, hi - lo, lo)
}

fn check_level(k: usize, min: usize, state: &FractionState) -> Result<()> {
    if k < min || k > state.truncation() {
        return Err(Error::Index {
            level: k,
            max: state.truncation(),
        });
    }
    Ok(())
}

/// Arrival kernel `L_k`: the probability factor for joining a server at
/// queue length `k - 1` when server status is not observed.
///
/// For `k = 1` the candidates at length 0 are all working; for `k >= 2`
/// working and failed servers at length `k - 1` are pooled.
pub fn kernel_l(k: usize, state: &FractionState, d1: u32) -> Result<f64> {
    check_level(k, 1, state)?;
    let (x, y) = if k == 1 {
        (state.w(0) - state.w(1), state.w(1) + state.r(1))
    } else {
        (
            state.w(k - 1) - state.w(k) + state.r(k - 1) - state.r(k),
            state.w(k) + state.r(k),
        )
    };
    Ok(binom_sum_kernel(KernelInput::new(d1, x, y)?))
}

/// Arrival kernel for failed servers when working servers win ties.
///
/// Satisfies `(r(k-1) - r(k)) * W = (r(k-1) + w(k))^d1 - (r(k) + w(k))^d1`.
pub fn kernel_w_r_priority(k: usize, state: &FractionState, d1: u32) -> Result<f64> {
    check_level(k, 2, state)?;
    let x = state.r(k - 1) - state.r(k);
    let y = state.r(k) + state.w(k);
    Ok(binom_sum_kernel(KernelInput::new(d1, x, y)?))
}

/// Repair kernel of the sampling repairman:
/// `I_k = (1 - w(k+1))^d2 - (1 - r(k) - w(k+1))^d2`.
pub fn kernel_i(k: usize, state: &FractionState, d2: u32) -> Result<f64> {
    check_level(k, 1, state)?;
    if d2 < 1 || d2 > MAX_CHOICES {
        return Err(Error::Domain(format!("choice count d2 = {d2} outside 1..={MAX_CHOICES}")));
    }
    let r = state.r(k);
    let w_next = state.w(k + 1);
    let lo = 1.0 - r - w_next;
    if lo < -EPS_NUM {
        return Err(Error::Domain(format!("1 - r(k) - w(k+1) = {lo} is negative")));
    }
    if d2 == 1 {
        return Ok(r);
    }
    let lo = lo.max(0.0);
    let hi = 1.0 - w_next;
    Ok(hi.powi(d2 as i32) - lo.powi(d2 as i32))
}
