//! Banded LU solve with partial pivoting, used by the Newton polish of
//! steady states.

/// Square band matrix with `kl` sub-diagonals and `ku` super-diagonals.
/// Storage is column-major with room for the `kl` extra super-diagonals that
/// row interchanges create.
#[derive(Debug, Clone)]
pub(crate) struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    ld: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub(crate) fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let ld = 2 * kl + ku + 1;
        Self {
            n,
            kl,
            ku,
            ld,
            data: vec![0.0; ld * n],
        }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i + self.kl + self.ku >= j && i <= j + self.kl);
        j * self.ld + (self.kl + self.ku + i - j)
    }

    /// Whether `(i, j)` lies inside the declared band.
    #[cfg(test)]
    fn in_band(&self, i: usize, j: usize) -> bool {
        i < self.n && j < self.n && j <= i + self.ku && i <= j + self.kl
    }

    pub(crate) fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] = v;
    }

    #[cfg(test)]
    fn get(&self, i: usize, j: usize) -> f64 {
        self.data[self.idx(i, j)]
    }

    /// Solves `A x = b` in place, destroying the matrix. Returns `None` on an
    /// exactly singular pivot.
    pub(crate) fn solve(mut self, b: &mut [f64]) -> Option<()> {
        let n = self.n;
        let (kl, ku) = (self.kl, self.ku);
        let width = kl + ku;
        for j in 0..n {
            let last_row = (j + kl).min(n - 1);
            let mut p = j;
            let mut best = self.data[self.idx(j, j)].abs();
            for i in j + 1..=last_row {
                let v = self.data[self.idx(i, j)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return None;
            }
            let last_col = (j + width).min(n - 1);
            if p != j {
                for c in j..=last_col {
                    let a = self.idx(j, c);
                    let bidx = self.idx(p, c);
                    self.data.swap(a, bidx);
                }
                b.swap(j, p);
            }
            let pivot = self.data[self.idx(j, j)];
            for i in j + 1..=last_row {
                let ij = self.idx(i, j);
                let m = self.data[ij] / pivot;
                if m == 0.0 {
                    continue;
                }
                self.data[ij] = 0.0;
                for c in j + 1..=last_col {
                    let jc = self.idx(j, c);
                    let ic = self.idx(i, c);
                    self.data[ic] -= m * self.data[jc];
                }
                b[i] -= m * b[j];
            }
        }
        for i in (0..n).rev() {
            let mut acc = b[i];
            for c in i + 1..=(i + width).min(n - 1) {
                acc -= self.data[self.idx(i, c)] * b[c];
            }
            b[i] = acc / self.data[self.idx(i, i)];
        }
        Some(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for j in 0..n {
            let p = (j..n).max_by(|&x, &y| a[x][j].abs().total_cmp(&a[y][j].abs())).unwrap();
            a.swap(j, p);
            b.swap(j, p);
            for i in j + 1..n {
                let m = a[i][j] / a[j][j];
                for c in j..n {
                    a[i][c] -= m * a[j][c];
                }
                b[i] -= m * b[j];
            }
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|c| a[i][c] * x[c]).sum();
            x[i] = (b[i] - s) / a[i][i];
        }
        x
    }

    #[test]
    fn matches_dense_elimination_with_pivoting() {
        let n = 23;
        let (kl, ku) = (3, 2);
        let mut band = BandMatrix::zeros(n, kl, ku);
        let mut dense = vec![vec![0.0; n]; n];
        let mut seed = 7u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        for i in 0..n {
            for j in 0..n {
                if band.in_band(i, j) {
                    // small diagonal forces row interchanges
                    let v = if i == j { 0.01 * next() } else { next() };
                    band.set(i, j, v);
                    dense[i][j] = v;
                }
            }
        }
        assert_eq!(band.get(4, 2), dense[4][2]);
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let expect = dense_solve(dense, b.clone());
        let mut x = b;
        band.solve(&mut x).unwrap();
        for (a, e) in x.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-9 * (1.0 + e.abs()), "{a} vs {e}");
        }
    }

    #[test]
    fn singular_is_reported() {
        let band = BandMatrix::zeros(3, 1, 1);
        let mut b = vec![1.0; 3];
        assert!(band.solve(&mut b).is_none());
    }
}
