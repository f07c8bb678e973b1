//! Coarse multiscale system: Galerkin assembly, solve, and conservation checks.

use faer::prelude::*;
use faer::Side;
use rayon::prelude::*;

use crate::auxspace::{project_pi, AuxSpace};
use crate::cembasis::{BasisSet, Flavor};
use crate::error::{Error, Result};
use crate::fem::{cell_flux, check_zero_mean, BoxField};
use crate::Discretization;

/// Eigenvalues of `A_c` below this fraction of the largest are treated as null.
const NULL_RATIO: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct CoarseSystem {
    /// `A_c = Psi^T A Psi`.
    pub a: Mat<f64>,
    /// `B_c[m, l] = b(psi_l, p_m)`.
    pub b: Mat<f64>,
    /// `(f, p_m)`.
    pub rhs: Vec<f64>,
    /// `integral of p_m`, the plain mean constraint.
    pub mean: Vec<f64>,
    pub flavor: Flavor,
    pub layers: Option<usize>,
}

impl CoarseSystem {
    /// `max |A - A^T| / max |A|`.
    pub fn symmetry_residual(&self) -> f64 {
        let n = self.a.nrows();
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                num = num.max((self.a[(i, j)] - self.a[(j, i)]).abs());
                den = den.max(self.a[(i, j)].abs());
            }
        }
        if den == 0.0 {
            0.0
        } else {
            num / den
        }
    }
}

pub fn assemble_coarse_system(
    disc: &Discretization,
    basis: &BasisSet,
    aux: &AuxSpace,
    f: &[f64],
) -> Result<CoarseSystem> {
    let n = basis.len();
    let m = aux.len();
    if n != m {
        return Err(Error::Dimension(format!(
            "{n} basis functions for {m} auxiliary functions"
        )));
    }
    check_zero_mean(&disc.fine, f)?;
    let fine = &disc.fine;
    let h = fine.h();
    let funcs = &basis.functions;
    let images: Vec<BoxField> = funcs
        .par_iter()
        .map(|psi| psi.velocity.apply_mass(fine, &disc.kappa))
        .collect();

    let rows: Vec<Vec<f64>> = funcs
        .par_iter()
        .map(|pk| images.iter().map(|y| pk.velocity.dot(y)).collect())
        .collect();
    let a = Mat::from_fn(n, n, |i, j| rows[i][j]);

    let mut b = Mat::<f64>::zeros(m, n);
    let cols: Vec<Vec<(usize, f64)>> = funcs
        .par_iter()
        .map(|psi| {
            let cells = psi.velocity.cells;
            let flux = psi.velocity.cell_flux(h);
            let mut out = Vec::new();
            for (i, local) in aux.locals.iter().enumerate() {
                let eb = aux.element_box(i);
                if !cells.contains_box(&eb) {
                    continue;
                }
                for (jj, pair) in local.pairs.iter().enumerate() {
                    let mut v = 0.0;
                    for (k, (x, y)) in (eb.y0..eb.y1)
                        .flat_map(|y| (eb.x0..eb.x1).map(move |x| (x, y)))
                        .enumerate()
                    {
                        v += pair.pressure[k] * flux[cells.local_cell(x, y)];
                    }
                    out.push((aux.index(i, jj).unwrap(), v));
                }
            }
            out
        })
        .collect();
    for (l, col) in cols.iter().enumerate() {
        for &(row, v) in col {
            b[(row, l)] = v;
        }
    }

    let h2 = h * h;
    let fh: Vec<f64> = f.iter().map(|v| v * h2).collect();
    let ones = vec![h2; fine.num_cells()];
    let (rhs, mean) = (plain_products(aux, &fh), plain_products(aux, &ones));
    Ok(CoarseSystem {
        a,
        b,
        rhs,
        mean,
        flavor: basis.flavor,
        layers: basis.layers,
    })
}

/// `sum_c w_c p_m(c)` for every auxiliary function.
fn plain_products(aux: &AuxSpace, w: &[f64]) -> Vec<f64> {
    let fine = aux.fine();
    let mut out = vec![0.0; aux.len()];
    for (i, l) in aux.locals.iter().enumerate() {
        let cells: Vec<usize> = aux.element_box(i).cells(fine).collect();
        for (j, p) in l.pairs.iter().enumerate() {
            out[aux.index(i, j).unwrap()] =
                cells.iter().zip(&p.pressure).map(|(&c, v)| w[c] * v).sum();
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolutionMeta {
    pub coarse_h: f64,
    pub layers: Option<usize>,
    pub counts: Vec<usize>,
    pub flavor: Flavor,
}

#[derive(Clone, Debug)]
pub struct MsSolution {
    /// Velocity coefficients in the basis.
    pub alpha: Vec<f64>,
    /// Pressure coefficients in `Q_aux`.
    pub beta: Vec<f64>,
    /// `v_ms` on all fine edges.
    pub velocity: Vec<f64>,
    /// `p_ms` on all fine cells, zero mean.
    pub pressure: Vec<f64>,
    pub meta: SolutionMeta,
    /// Smallest over largest eigenvalue of the coarse Schur complement on
    /// zero-mean auxiliary pressures.
    pub inf_sup: f64,
    /// Null directions of `A_c` removed before the solve.
    pub null_directions: usize,
}

/// Pseudo-inverse-based factor of `A_c`: Cholesky when well conditioned,
/// otherwise an eigendecomposition with null directions dropped.
enum VelocityFactor {
    Llt(faer::linalg::solvers::Llt<f64>),
    Eigen { vectors: Mat<f64>, inv: Vec<f64> },
}

impl VelocityFactor {
    fn solve(&self, rhs: &Mat<f64>) -> Mat<f64> {
        match self {
            VelocityFactor::Llt(l) => l.solve(rhs),
            VelocityFactor::Eigen { vectors, inv } => {
                let mut t = vectors.transpose() * rhs;
                for (i, &d) in inv.iter().enumerate() {
                    for j in 0..t.ncols() {
                        t[(i, j)] *= d;
                    }
                }
                vectors * &t
            }
        }
    }
}

fn factor_velocity(sys: &CoarseSystem) -> Result<(VelocityFactor, usize)> {
    let a = Mat::from_fn(sys.a.nrows(), sys.a.ncols(), |i, j| {
        0.5 * (sys.a[(i, j)] + sys.a[(j, i)])
    });
    if let Ok(llt) = a.llt(Side::Lower) {
        let l = llt.L();
        let d: Vec<f64> = (0..a.nrows()).map(|i| l[(i, i)] * l[(i, i)]).collect();
        let (lo, hi) = d.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        if lo > NULL_RATIO * hi {
            return Ok((VelocityFactor::Llt(llt), 0));
        }
    }
    let evd = a
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Singular {
            context: "coarse velocity block".into(),
            detail: format!("{e:?}"),
        })?;
    let s = evd.S().column_vector();
    let n = a.nrows();
    let top = (0..n).map(|i| s[i].abs()).fold(0.0, f64::max);
    let keep: Vec<usize> = (0..n).filter(|&i| s[i] > NULL_RATIO * top).collect();
    let u = evd.U();
    // a dropped direction must be invisible to B_c, otherwise the system is singular
    for i in (0..n).filter(|i| !keep.contains(i)) {
        let v = u.col(i);
        let bv = &sys.b * v;
        let bnorm = (0..sys.b.nrows())
            .map(|r| (0..n).map(|c| sys.b[(r, c)].powi(2)).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if bv.norm_l2() > 1e-8 * bnorm.max(f64::MIN_POSITIVE) {
            let (k, _) =
                (0..n)
                    .map(|k| (k, v[k].abs()))
                    .fold((0, 0.0), |a, b| if b.1 > a.1 { b } else { a });
            return Err(Error::Singular {
                context: "coarse system".into(),
                detail: format!("null velocity direction {i} (largest weight on basis function {k}) carries divergence"),
            });
        }
    }
    let vectors = Mat::from_fn(n, keep.len(), |r, c| u[(r, keep[c])]);
    let inv = keep.iter().map(|&i| 1.0 / s[i]).collect();
    Ok((VelocityFactor::Eigen { vectors, inv }, n - keep.len()))
}

pub fn solve_multiscale(
    disc: &Discretization,
    sys: &CoarseSystem,
    basis: &BasisSet,
    aux: &AuxSpace,
) -> Result<MsSolution> {
    let n = sys.a.nrows();
    let m = sys.b.nrows();
    if basis.len() != n || aux.len() != m {
        return Err(Error::Dimension(
            "coarse system does not match basis and auxiliary space".into(),
        ));
    }
    let (fa, nulls) = factor_velocity(sys)?;
    let x = fa.solve(&sys.b.transpose().to_owned());
    let sc = &sys.b * &x;
    let sc = Mat::from_fn(m, m, |i, j| 0.5 * (sc[(i, j)] + sc[(j, i)]));

    let inf_sup = restricted_min_eigenvalue(&sc, &sys.mean)?;
    if inf_sup.is_nan() || inf_sup <= 1e-10 {
        return Err(Error::Singular {
            context: "coarse Schur complement".into(),
            detail: format!("relative smallest eigenvalue on zero-mean pressures is {inf_sup:.3e}"),
        });
    }

    let k = Mat::from_fn(m + 1, m + 1, |i, j| match (i < m, j < m) {
        (true, true) => sc[(i, j)],
        (true, false) => -sys.mean[i],
        (false, true) => -sys.mean[j],
        _ => 0.0,
    });
    let rhs = Col::from_fn(m + 1, |i| if i < m { sys.rhs[i] } else { 0.0 });
    let sol = k.partial_piv_lu().solve(&rhs);
    let beta: Vec<f64> = (0..m).map(|i| sol[i]).collect();
    let bcol = Mat::from_fn(m, 1, |i, _| beta[i]);
    let alpha_m = &x * &bcol;
    let alpha: Vec<f64> = (0..n).map(|i| alpha_m[(i, 0)]).collect();

    let mut velocity = vec![0.0; disc.fine.num_edges()];
    for (psi, &a) in basis.functions.iter().zip(&alpha) {
        psi.velocity.add_to_global(&disc.fine, a, &mut velocity);
    }
    let pressure = aux.expand(&beta);
    Ok(MsSolution {
        alpha,
        beta,
        velocity,
        pressure,
        meta: SolutionMeta {
            coarse_h: disc.coarse.h(),
            layers: basis.layers,
            counts: aux.counts(),
            flavor: basis.flavor,
        },
        inf_sup,
        null_directions: nulls,
    })
}

/// Smallest eigenvalue of `S` on `{x : w . x = 0}`, relative to the largest.
fn restricted_min_eigenvalue(s: &Mat<f64>, w: &[f64]) -> Result<f64> {
    let m = s.nrows();
    if m < 2 {
        return Ok(f64::INFINITY);
    }
    // Householder reflector mapping w to a multiple of e_0
    let wn = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut v: Vec<f64> = w.iter().map(|x| x / wn).collect();
    v[0] += if v[0] >= 0.0 { 1.0 } else { -1.0 };
    let vv: f64 = v.iter().map(|x| x * x).sum();
    let sv: Vec<f64> = (0..m)
        .map(|i| (0..m).map(|j| s[(i, j)] * v[j]).sum())
        .collect();
    let vsv: f64 = v.iter().zip(&sv).map(|(a, b)| a * b).sum();
    let c = 2.0 / vv;
    let r = Mat::from_fn(m - 1, m - 1, |i, j| {
        let (i, j) = (i + 1, j + 1);
        s[(i, j)] - c * v[i] * sv[j] - c * sv[i] * v[j] + c * c * vsv * v[i] * v[j]
    });
    let ev = r
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| Error::Singular {
            context: "coarse inf-sup check".into(),
            detail: format!("{e:?}"),
        })?;
    let top = ev.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    Ok(if top == 0.0 { 0.0 } else { ev[0] / top })
}

/// Per-element conservation and cell-wise divergence diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct MassResiduals {
    /// `|int_K div v - int_K f|` for every coarse element.
    pub per_element: Vec<f64>,
    /// `max_c |int_c div v - s_c pi(kappa~^{-1} f)_c|` relative to `max_c |int_c f|`.
    pub cellwise: f64,
}

impl MassResiduals {
    pub fn max(&self) -> f64 {
        self.per_element.iter().copied().fold(0.0, f64::max)
    }
}

pub fn mass_residuals(
    disc: &Discretization,
    aux: &AuxSpace,
    velocity: &[f64],
    f: &[f64],
) -> MassResiduals {
    let fine = &disc.fine;
    let h2 = fine.h() * fine.h();
    let flux = cell_flux(fine, velocity);
    let per_element = (0..disc.coarse.num_elements())
        .map(|k| {
            let cells = disc.coarse.element_cells(fine, k);
            let d: f64 = cells.iter().map(|&c| flux[c]).sum();
            let s: f64 = cells.iter().map(|&c| f[c] * h2).sum();
            (d - s).abs()
        })
        .collect();
    let s = aux.s_diag();
    let g: Vec<f64> = f.iter().zip(s).map(|(fc, sc)| fc * h2 / sc).collect();
    let pg = project_pi(&g, aux);
    let scale = f.iter().fold(0.0f64, |a, v| a.max(v.abs() * h2));
    let worst = flux
        .iter()
        .zip(&pg)
        .zip(s)
        .fold(0.0f64, |a, ((fl, p), sc)| a.max((fl - p * sc).abs()));
    MassResiduals {
        per_element,
        cellwise: if scale == 0.0 { worst } else { worst / scale },
    }
}
