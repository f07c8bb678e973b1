//! Sparse symmetric indefinite solves.
//!
//! The matrix is symmetrically scaled, factored by a fill-reducing LDL^T with
//! sign-aware dynamic regularization, and the factor is used as a right
//! preconditioner for restarted GMRES on the unregularized scaled system.

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::cholesky::ldlt::factor::LdltRegularization;
use faer::perm::PermRef;
use faer::prelude::*;
use faer::sparse::linalg::cholesky::{
    factorize_symbolic_cholesky, LdltRef, SymbolicCholesky, SymmetricOrdering,
};
use faer::sparse::{SparseColMat, Triplet};
use faer::{Conj, Par, Side};

use crate::error::{Error, Result};

/// Relative residual every accepted solve must reach.
pub const RTOL: f64 = 1e-10;

const TARGET: f64 = 1e-13;
const RESTART: usize = 30;
const MAX_CYCLES: usize = 12;

/// Coordinate-form symmetric matrix with a pivot sign per row.
#[derive(Clone, Debug, Default)]
pub struct SymmetricBuilder {
    dim: usize,
    entries: Vec<Triplet<usize, usize, f64>>,
    signs: Vec<i8>,
    ordering: Option<Vec<usize>>,
}

impl SymmetricBuilder {
    /// `signs[k]` is `+1` for rows of positive definite blocks and `-1` for
    /// rows eliminated after them (pressures of a saddle point system).
    pub fn new(signs: Vec<i8>) -> Self {
        Self {
            dim: signs.len(),
            entries: Vec::new(),
            signs,
            ordering: None,
        }
    }

    /// Elimination order to use instead of approximate minimum degree;
    /// `order[k]` is the row eliminated `k`-th.
    pub fn set_ordering(&mut self, order: Vec<usize>) -> Result<()> {
        let mut seen = vec![false; self.dim];
        if order.len() != self.dim
            || !order
                .iter()
                .all(|&k| k < self.dim && !std::mem::replace(&mut seen[k], true))
        {
            return Err(Error::Dimension(
                "ordering is not a permutation of the rows".into(),
            ));
        }
        self.ordering = Some(order);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Adds `v` at `(i, j)` and, off the diagonal, at `(j, i)`. Duplicates are summed.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.dim && j < self.dim);
        if v == 0.0 {
            return;
        }
        self.entries.push(Triplet::new(i, j, v));
        if i != j {
            self.entries.push(Triplet::new(j, i, v));
        }
    }

    /// Dense copy of the full matrix, for tests and small oracles.
    pub fn to_dense(&self) -> Mat<f64> {
        let mut m = Mat::zeros(self.dim, self.dim);
        for t in &self.entries {
            m[(t.row, t.col)] += t.val;
        }
        m
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dim];
        for t in &self.entries {
            y[t.row] += t.val * x[t.col];
        }
        y
    }

    pub fn factor(&self) -> Result<SymmetricFactor> {
        SymmetricFactor::new(self)
    }
}

/// Reusable factorization of one symmetric system.
pub struct SymmetricFactor {
    dim: usize,
    scale: Vec<f64>,
    scaled: SparseColMat<usize, f64>,
    symbolic: SymbolicCholesky<usize>,
    values: Vec<f64>,
}

impl std::fmt::Debug for SymmetricFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SymmetricFactor")
            .field("dim", &self.dim)
            .field("nnz_l", &self.values.len())
            .finish()
    }
}

fn equilibrate(b: &SymmetricBuilder) -> Vec<f64> {
    let n = b.dim;
    let mut diag = vec![0.0; n];
    for t in &b.entries {
        if t.row == t.col {
            diag[t.row] += t.val;
        }
    }
    let mut scale = vec![0.0; n];
    for i in 0..n {
        if diag[i] != 0.0 {
            scale[i] = 1.0 / diag[i].abs().sqrt();
        }
    }
    // rows with a zero diagonal are scaled from already scaled neighbours, level by level
    let mut pending: Vec<usize> = (0..n).filter(|&i| scale[i] == 0.0).collect();
    while !pending.is_empty() {
        let mut acc = vec![0.0; n];
        for t in &b.entries {
            if scale[t.row] == 0.0 && scale[t.col] != 0.0 {
                acc[t.row] += (t.val * scale[t.col]).powi(2);
            }
        }
        let before = pending.len();
        let mut next = Vec::new();
        for &i in &pending {
            if acc[i] > 0.0 {
                scale[i] = 1.0 / acc[i].sqrt();
            } else {
                next.push(i);
            }
        }
        if next.len() == before {
            // isolated zero rows: leave unscaled and let the factorization report them
            next.iter().for_each(|&i| scale[i] = 1.0);
            break;
        }
        pending = next;
    }
    scale
}

impl SymmetricFactor {
    pub fn new(b: &SymmetricBuilder) -> Result<Self> {
        let n = b.dim;
        if n == 0 {
            return Err(Error::Dimension("empty system".into()));
        }
        let scale = equilibrate(b);
        let trip: Vec<_> = b
            .entries
            .iter()
            .map(|t| Triplet::new(t.row, t.col, t.val * scale[t.row] * scale[t.col]))
            .collect();
        let scaled = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &trip)
            .map_err(|e| Error::Dimension(format!("sparse assembly: {e:?}")))?;
        let inverse = b.ordering.as_ref().map(|fwd| {
            let mut inv = vec![0; n];
            fwd.iter().enumerate().for_each(|(k, &r)| inv[r] = k);
            inv
        });
        let ordering = match (&b.ordering, &inverse) {
            (Some(fwd), Some(inv)) => SymmetricOrdering::Custom(PermRef::new_checked(fwd, inv, n)),
            _ => SymmetricOrdering::Amd,
        };
        let symbolic = factorize_symbolic_cholesky(
            scaled.symbolic(),
            Side::Lower,
            ordering,
            Default::default(),
        )
        .map_err(|e| Error::Singular {
            context: "symbolic factorization".into(),
            detail: format!("{e:?}"),
        })?;
        let mut values = vec![0.0; symbolic.len_val()];
        let mut buf = MemBuffer::new(
            symbolic.factorize_numeric_ldlt_scratch::<f64>(Par::Seq, Default::default()),
        );
        let reg = LdltRegularization {
            dynamic_regularization_signs: Some(&b.signs),
            dynamic_regularization_delta: 1e-8,
            dynamic_regularization_epsilon: 1e-13,
        };
        symbolic
            .factorize_numeric_ldlt(
                &mut values,
                scaled.as_ref(),
                Side::Lower,
                reg,
                Par::Seq,
                MemStack::new(&mut buf),
                Default::default(),
            )
            .map_err(|e| Error::Singular {
                context: "LDL^T factorization".into(),
                detail: format!("{e:?}"),
            })?;
        Ok(Self {
            dim: n,
            scale,
            scaled,
            symbolic,
            values,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Solves `K x = rhs`; fails if the relative residual stays above [`RTOL`].
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let (x, res) = self.solve_with_residual(rhs)?;
        accept(x, res)
    }

    /// Solves for several right-hand sides with one workspace.
    pub fn solve_many(&self, rhs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut buf = self.workspace();
        rhs.iter()
            .map(|b| {
                let (x, res) = self.solve_in(b, &mut buf)?;
                accept(x, res)
            })
            .collect()
    }

    /// Solution together with its relative residual `|rhs - K x| / |rhs|` in the
    /// unscaled system.
    pub fn solve_with_residual(&self, rhs: &[f64]) -> Result<(Vec<f64>, f64)> {
        let mut buf = self.workspace();
        self.solve_in(rhs, &mut buf)
    }

    fn workspace(&self) -> MemBuffer {
        MemBuffer::new(self.symbolic.solve_in_place_scratch::<f64>(1, Par::Seq))
    }

    fn solve_in(&self, rhs: &[f64], buf: &mut MemBuffer) -> Result<(Vec<f64>, f64)> {
        let n = self.dim;
        if rhs.len() != n {
            return Err(Error::Dimension(format!(
                "rhs of length {} for a system of size {n}",
                rhs.len()
            )));
        }
        let bnorm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
        if bnorm == 0.0 {
            return Ok((vec![0.0; n], 0.0));
        }
        let ldlt = LdltRef::new(&self.symbolic, &self.values);
        let mut precond = |v: &Col<f64>| {
            let mut w = v.clone();
            ldlt.solve_in_place_with_conj(Conj::No, w.as_mat_mut(), Par::Seq, MemStack::new(buf));
            w
        };
        let k = &self.scaled;
        let b = Col::<f64>::from_fn(n, |i| rhs[i] * self.scale[i]);
        let bn = b.norm_l2();
        let unscaled_residual = |x: &Col<f64>| {
            let r = &b - k * x;
            (0..n)
                .map(|i| (r[i] / self.scale[i]).powi(2))
                .sum::<f64>()
                .sqrt()
                / bnorm
        };
        let mut x = precond(&b);
        let mut best = unscaled_residual(&x);
        for _ in 0..MAX_CYCLES {
            let r0 = &b - k * &x;
            let beta = r0.norm_l2();
            if beta <= TARGET * bn || !beta.is_finite() {
                break;
            }
            let mut basis: Vec<Col<f64>> = vec![&r0 * (1.0 / beta)];
            // column j of the Hessenberg matrix, rotated in place
            let mut hess = vec![[0.0f64; RESTART + 1]; RESTART];
            let mut g = [0.0; RESTART + 1];
            g[0] = beta;
            let (mut cs, mut sn) = ([0.0; RESTART], [0.0; RESTART]);
            let mut used = 0;
            for j in 0..RESTART {
                let z = precond(&basis[j]);
                let mut w = k * &z;
                let col = &mut hess[j];
                for (i, v) in basis.iter().enumerate() {
                    let hij = v.transpose() * &w;
                    col[i] = hij;
                    w -= v * hij;
                }
                let hn = w.norm_l2();
                col[j + 1] = hn;
                for i in 0..j {
                    let t = cs[i] * col[i] + sn[i] * col[i + 1];
                    col[i + 1] = -sn[i] * col[i] + cs[i] * col[i + 1];
                    col[i] = t;
                }
                let rr = col[j].hypot(col[j + 1]);
                cs[j] = col[j] / rr;
                sn[j] = col[j + 1] / rr;
                col[j] = rr;
                col[j + 1] = 0.0;
                g[j + 1] = -sn[j] * g[j];
                g[j] *= cs[j];
                used = j + 1;
                if g[j + 1].abs() <= 0.1 * TARGET * bn || hn == 0.0 {
                    break;
                }
                basis.push(&w * (1.0 / hn));
            }
            let mut y = vec![0.0; used];
            for i in (0..used).rev() {
                let mut s = g[i];
                for l in i + 1..used {
                    s -= hess[l][i] * y[l];
                }
                y[i] = s / hess[i][i];
            }
            let mut u = Col::<f64>::zeros(n);
            for (v, yi) in basis.iter().zip(&y) {
                u += v * *yi;
            }
            let trial = &x + precond(&u);
            let res = unscaled_residual(&trial);
            if res.is_nan() || res >= best {
                break;
            }
            x = trial;
            let stalled = res > 0.5 * best;
            best = res;
            if stalled && res <= RTOL * 1e-2 {
                break;
            }
        }
        let sol = (0..n).map(|i| x[i] * self.scale[i]).collect();
        Ok((sol, best))
    }
}

fn accept(x: Vec<f64>, res: f64) -> Result<Vec<f64>> {
    if res <= RTOL {
        Ok(x)
    } else {
        Err(Error::Solver {
            context: "preconditioned GMRES".into(),
            residual: res,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn saddle(n: usize, kappa: impl Fn(usize) -> f64) -> (SymmetricBuilder, usize) {
        // 1D chain: n cells, n-1 interior faces, one mean row
        let nv = n - 1;
        let dim = nv + n + 1;
        let mut signs = vec![1i8; nv];
        signs.extend(std::iter::repeat_n(-1, n));
        signs.push(1);
        let mut b = SymmetricBuilder::new(signs);
        for e in 0..nv {
            b.add(e, e, 0.5 * (1.0 / kappa(e) + 1.0 / kappa(e + 1)));
            b.add(nv + e, e, 1.0);
            b.add(nv + e + 1, e, -1.0);
        }
        for c in 0..n {
            b.add(nv + n, nv + c, 1.0);
        }
        (b, dim)
    }

    #[test]
    fn solves_match_dense() {
        let (b, dim) = saddle(12, |c| if c % 3 == 0 { 1e6 } else { 1.0 });
        let f = b.factor().unwrap();
        let mut rhs = vec![0.0; dim];
        rhs[11] = 1.0;
        rhs[11 + 11] = -1.0;
        let (x, res) = f.solve_with_residual(&rhs).unwrap();
        assert!(res < 1e-12, "{res}");
        let dense = b.to_dense();
        let rhs_col = Col::<f64>::from_fn(dim, |i| rhs[i]);
        let xd = dense.partial_piv_lu().solve(&rhs_col);
        for i in 0..dim {
            assert!(
                (x[i] - xd[i]).abs() <= 1e-9 * (1.0 + xd[i].abs()),
                "{i}: {} vs {}",
                x[i],
                xd[i]
            );
        }
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let (b, dim) = saddle(5, |_| 1.0);
        let x = b.factor().unwrap().solve(&vec![0.0; dim]).unwrap();
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_rhs_length() {
        let (b, _) = saddle(4, |_| 1.0);
        assert!(matches!(
            b.factor().unwrap().solve(&[1.0]),
            Err(Error::Dimension(_))
        ));
    }
}
