//! Local spectral problems and the auxiliary pressure space.
//!
//! On every coarse element the velocity is eliminated from the mixed
//! eigenproblem, leaving `(B A^{-1} B^T) p = lambda S p` with `S` the diagonal
//! of `s(., .)`. The first `J_i` eigenvectors of each element span `Q_aux`.

use faer::prelude::*;
use faer::Side;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fem::{assemble_a, assemble_b, PressureColumns};
use crate::mesh::CellBox;
use crate::sparse::SymmetricBuilder;
use crate::Discretization;

const DEGENERATE_GAP: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct EigenPair {
    pub lambda: f64,
    /// Cell values on the element, row-major, `s`-normalized.
    pub pressure: Vec<f64>,
    /// `A^{-1} B^T p` on the element's interior edges, when requested.
    pub velocity: Option<Vec<f64>>,
}

/// All eigenpairs of element `i`, ascending, `s`-orthonormal, with `p_1` the
/// normalized constant and `lambda_1 = 0` up to rounding.
pub fn solve_local_spectral(disc: &Discretization, i: usize) -> Result<Vec<EigenPair>> {
    spectral_dense(disc, i, usize::MAX, false).map(|(pairs, _)| pairs)
}

/// Like [`solve_local_spectral`] but keeps only the first `keep` vectors (all
/// eigenvalues are still returned) and optionally their velocity companions.
pub fn solve_local_spectral_truncated(
    disc: &Discretization,
    i: usize,
    keep: usize,
    with_velocity: bool,
) -> Result<(Vec<EigenPair>, Vec<f64>)> {
    spectral_dense(disc, i, keep, with_velocity)
}

fn spectral_dense(
    disc: &Discretization,
    i: usize,
    keep: usize,
    with_velocity: bool,
) -> Result<(Vec<EigenPair>, Vec<f64>)> {
    disc.coarse.check_element(i)?;
    let cells = disc.coarse.element_box(i);
    let fine = &disc.fine;
    let s: Vec<f64> = {
        let d = disc.s_diag();
        cells.cells(fine).map(|c| d[c]).collect()
    };
    let n = s.len();
    let a = assemble_a(fine, &disc.kappa, &cells);
    let b = assemble_b(fine, &cells);
    let nv = a.rows;

    // M = B A^{-1} B^T, and X = A^{-1} B^T for the companions
    let mut m = Mat::<f64>::zeros(n, n);
    let mut x_cols: Vec<Vec<f64>> = Vec::new();
    if nv > 0 {
        let mut builder = SymmetricBuilder::new(vec![1; nv]);
        for &(r, c, v) in &a.entries {
            if r <= c {
                builder.add(r, c, v);
            }
        }
        let factor = builder
            .factor()
            .map_err(|e| e.with_context(format!("element {i} mass matrix")))?;
        let mut bt_cols = vec![vec![0.0; nv]; n];
        for &(r, c, v) in &b.entries {
            bt_cols[r][c] += v;
        }
        x_cols = factor
            .solve_many(&bt_cols)
            .map_err(|e| e.with_context(format!("element {i}")))?;
        for &(r, c, v) in &b.entries {
            for (d, x) in x_cols.iter().enumerate() {
                m[(r, d)] += v * x[c];
            }
        }
    }
    let inv_sqrt: Vec<f64> = s.iter().map(|v| 1.0 / v.sqrt()).collect();
    let c = Mat::<f64>::from_fn(n, n, |r, q| {
        0.5 * (m[(r, q)] + m[(q, r)]) * inv_sqrt[r] * inv_sqrt[q]
    });
    let evd = c
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Singular {
            context: format!("element {i} spectral problem"),
            detail: format!("{e:?}"),
        })?;
    let lambdas: Vec<f64> = (0..n)
        .map(|k| evd.S().column_vector()[k].max(0.0))
        .collect();
    let u = evd.U();
    let keep = keep.min(n);

    let mut vecs: Vec<Vec<f64>> = (0..keep)
        .map(|k| (0..n).map(|r| u[(r, k)] * inv_sqrt[r]).collect())
        .collect();
    let s_dot = |x: &[f64], y: &[f64]| {
        x.iter()
            .zip(y)
            .zip(&s)
            .map(|((a, b), w)| a * b * w)
            .sum::<f64>()
    };
    if keep > 0 {
        let total: f64 = s.iter().sum();
        vecs[0] = vec![1.0 / total.sqrt(); n];
    }
    for k in 1..keep {
        for l in 0..k {
            let proj = s_dot(&vecs[k], &vecs[l]);
            let prev = vecs[l].clone();
            vecs[k]
                .iter_mut()
                .zip(&prev)
                .for_each(|(v, p)| *v -= proj * p);
        }
        let norm = s_dot(&vecs[k], &vecs[k]).sqrt();
        vecs[k].iter_mut().for_each(|v| *v /= norm);
        fix_sign(&mut vecs[k]);
    }
    // deterministic order inside numerically degenerate clusters
    let scale = lambdas
        .last()
        .copied()
        .unwrap_or(0.0)
        .max(f64::MIN_POSITIVE);
    let mut start = 1;
    while start < keep {
        let mut end = start + 1;
        while end < n
            && (lambdas[end] - lambdas[end - 1]) <= DEGENERATE_GAP * lambdas[end].max(1e-14 * scale)
        {
            end += 1;
        }
        let stop = end.min(keep);
        if stop - start > 1 {
            vecs[start..stop].sort_by(|x, y| {
                x.iter()
                    .zip(y)
                    .map(|(a, b)| a.total_cmp(b))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .reverse()
            });
        }
        start = end;
    }

    let pairs = vecs
        .into_iter()
        .enumerate()
        .map(|(k, p)| {
            let velocity = (with_velocity && nv > 0).then(|| {
                let mut v = vec![0.0; nv];
                for (x, pc) in x_cols.iter().zip(&p) {
                    v.iter_mut().zip(x).for_each(|(vi, xi)| *vi += pc * xi);
                }
                v
            });
            EigenPair {
                lambda: lambdas[k],
                pressure: p,
                velocity,
            }
        })
        .collect();
    Ok((pairs, lambdas))
}

/// Makes the first entry of largest magnitude positive.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0.0f64;
    let mut sign = 1.0;
    for &x in v.iter() {
        if x.abs() > best {
            best = x.abs();
            sign = x.signum();
        }
    }
    if sign < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// How many eigenvectors each element contributes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Selection {
    Fixed(usize),
    /// All eigenvalues below the threshold (at least the constant).
    Threshold(f64),
}

#[derive(Clone, Debug)]
pub struct LocalAuxBasis {
    pub element: usize,
    pub pairs: Vec<EigenPair>,
    /// `lambda_{J_i + 1}`, absent when every eigenvector was selected.
    pub next_lambda: Option<f64>,
}

impl LocalAuxBasis {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn select_count(sel: Selection, lambdas: &[f64], i: usize) -> Result<usize> {
    match sel {
        Selection::Fixed(j) => {
            if j == 0 || j > lambdas.len() {
                return Err(Error::config(format!(
                    "element {i} has {} eigenpairs, cannot select {j}",
                    lambdas.len()
                )));
            }
            Ok(j)
        }
        Selection::Threshold(tau) => Ok(lambdas.iter().filter(|&&l| l < tau).count().max(1)),
    }
}

/// The auxiliary space: selected eigenvectors of every element.
#[derive(Clone, Debug)]
pub struct AuxSpace {
    pub locals: Vec<LocalAuxBasis>,
    /// `Lambda = min_i lambda_{J_i + 1}` (infinite if every element is exhausted).
    pub lambda: f64,
    offsets: Vec<usize>,
    boxes: Vec<CellBox>,
    fine: crate::mesh::FineGrid,
    coarse: crate::mesh::CoarseGrid,
    s: Vec<f64>,
}

/// Builds the space from full per-element eigenpair lists.
pub fn aux_space_from_pairs(
    disc: &Discretization,
    pairs: Vec<Vec<EigenPair>>,
    sel: Selection,
) -> Result<AuxSpace> {
    if pairs.len() != disc.coarse.num_elements() {
        return Err(Error::Dimension(format!(
            "{} eigenpair lists for {} elements",
            pairs.len(),
            disc.coarse.num_elements()
        )));
    }
    let locals = pairs
        .into_iter()
        .enumerate()
        .map(|(i, mut list)| {
            let lambdas: Vec<f64> = list.iter().map(|p| p.lambda).collect();
            let j = select_count(sel, &lambdas, i)?;
            list.truncate(j);
            Ok(LocalAuxBasis {
                element: i,
                pairs: list,
                next_lambda: lambdas.get(j).copied(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AuxSpace::assemble(disc, locals))
}

/// Solves every local spectral problem (in parallel) and keeps the selected pairs.
pub fn build_aux_space(disc: &Discretization, sel: Selection) -> Result<AuxSpace> {
    let n_el = disc.coarse.num_elements();
    let per_element = disc.coarse.ratio() * disc.coarse.ratio();
    let keep = match sel {
        Selection::Fixed(j) => j.min(per_element),
        Selection::Threshold(_) => per_element,
    };
    let locals = (0..n_el)
        .into_par_iter()
        .map(|i| {
            let (mut pairs, lambdas) = spectral_dense(disc, i, keep, false)?;
            let j = select_count(sel, &lambdas, i)?;
            pairs.truncate(j);
            Ok(LocalAuxBasis {
                element: i,
                pairs,
                next_lambda: lambdas.get(j).copied(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AuxSpace::assemble(disc, locals))
}

impl AuxSpace {
    fn assemble(disc: &Discretization, locals: Vec<LocalAuxBasis>) -> Self {
        let mut offsets = Vec::with_capacity(locals.len() + 1);
        let mut acc = 0;
        for l in &locals {
            offsets.push(acc);
            acc += l.len();
        }
        offsets.push(acc);
        let lambda = locals
            .iter()
            .filter_map(|l| l.next_lambda)
            .fold(f64::INFINITY, f64::min);
        let boxes = (0..locals.len())
            .map(|i| disc.coarse.element_box(i))
            .collect();
        Self {
            locals,
            lambda,
            offsets,
            boxes,
            fine: disc.fine,
            coarse: disc.coarse,
            s: disc.s_diag(),
        }
    }

    /// Total number of auxiliary functions `sum_i J_i`.
    pub fn len(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_elements(&self) -> usize {
        self.locals.len()
    }

    /// Global column of pair `j` (0-based) of element `i`.
    pub fn index(&self, i: usize, j: usize) -> Result<usize> {
        if i >= self.locals.len() || j >= self.locals[i].len() {
            return Err(Error::Index(format!("auxiliary function ({i}, {j})")));
        }
        Ok(self.offsets[i] + j)
    }

    /// `(element, j)` of a global column.
    pub fn owner(&self, k: usize) -> (usize, usize) {
        let i = self.offsets.partition_point(|&o| o <= k) - 1;
        (i, k - self.offsets[i])
    }

    pub fn counts(&self) -> Vec<usize> {
        self.locals.iter().map(|l| l.len()).collect()
    }

    pub fn element_box(&self, i: usize) -> CellBox {
        self.boxes[i]
    }

    /// Diagonal of `s(., .)` over all fine cells.
    pub fn s_diag(&self) -> &[f64] {
        &self.s
    }

    /// `s(q, p_k)` for every auxiliary function, `q` given on all fine cells.
    pub fn coefficients(&self, q: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for (i, l) in self.locals.iter().enumerate() {
            let cells: Vec<usize> = self.boxes[i].cells(&self.fine).collect();
            for (j, p) in l.pairs.iter().enumerate() {
                out[self.offsets[i] + j] = cells
                    .iter()
                    .zip(&p.pressure)
                    .map(|(&c, v)| q[c] * v * self.s[c])
                    .sum();
            }
        }
        out
    }

    /// `sum_k coeffs_k p_k` on all fine cells.
    pub fn expand(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.fine.num_cells()];
        for (i, l) in self.locals.iter().enumerate() {
            let cells: Vec<usize> = self.boxes[i].cells(&self.fine).collect();
            for (j, p) in l.pairs.iter().enumerate() {
                let a = coeffs[self.offsets[i] + j];
                for (&c, v) in cells.iter().zip(&p.pressure) {
                    out[c] += a * v;
                }
            }
        }
        out
    }

    /// Columns `W = S R` of the auxiliary functions of elements lying inside
    /// `cells`, in box-local cell numbering, and their global indices.
    pub fn columns_in(&self, cells: &CellBox) -> (PressureColumns, Vec<usize>) {
        let mut cols = Vec::new();
        let mut ids = Vec::new();
        for (i, l) in self.locals.iter().enumerate() {
            let eb = self.boxes[i];
            if !cells.contains_box(&eb) {
                continue;
            }
            let local: Vec<(usize, usize)> = (eb.y0..eb.y1)
                .flat_map(|j| (eb.x0..eb.x1).map(move |x| (x, j)))
                .map(|(x, y)| (cells.local_cell(x, y), self.fine.cell(x, y)))
                .collect();
            for (j, p) in l.pairs.iter().enumerate() {
                cols.push(
                    local
                        .iter()
                        .zip(&p.pressure)
                        .map(|(&(lc, gc), v)| (lc, v * self.s[gc]))
                        .collect(),
                );
                ids.push(self.offsets[i] + j);
            }
        }
        (PressureColumns { cols }, ids)
    }

    /// Copy without the constant eigenvectors. Breaks element conservation;
    /// exists so tests can show the diagnostics catch it.
    #[doc(hidden)]
    pub fn without_constants(&self) -> AuxSpace {
        let mut out = self.clone();
        for l in &mut out.locals {
            if !l.pairs.is_empty() {
                l.pairs.remove(0);
            }
        }
        let mut acc = 0;
        for (k, l) in out.locals.iter().enumerate() {
            out.offsets[k] = acc;
            acc += l.len();
        }
        *out.offsets.last_mut().unwrap() = acc;
        out
    }

    pub fn coarse(&self) -> &crate::mesh::CoarseGrid {
        &self.coarse
    }

    pub fn fine(&self) -> &crate::mesh::FineGrid {
        &self.fine
    }
}

/// `pi q = sum s(q, p_k) p_k`.
pub fn project_pi(q: &[f64], aux: &AuxSpace) -> Vec<f64> {
    aux.expand(&aux.coefficients(q))
}

/// Writes `element,j,lambda,gap` rows for the first `m` eigenvalues of each
/// element; `gap = lambda_{j+1} / lambda_j`, empty when undefined.
pub fn write_eigen_report(
    w: &mut impl std::io::Write,
    spectra: &[Vec<f64>],
    m: usize,
) -> std::io::Result<()> {
    writeln!(w, "element,j,lambda,gap")?;
    for (i, l) in spectra.iter().enumerate() {
        for (j, v) in l.iter().take(m).enumerate() {
            let gap = match l.get(j + 1) {
                Some(next) if *v > 0.0 => format!("{:.16e}", next / v),
                _ => String::new(),
            };
            writeln!(w, "{i},{},{v:.16e},{gap}", j + 1)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::medium::{log_uniform_field, PermField};
    use crate::mesh::build_grids;

    fn disc(n: usize, nc: usize, kappa: Option<PermField>) -> Discretization {
        let (f, c) = build_grids(n, nc).unwrap();
        let k = kappa.unwrap_or_else(|| PermField::uniform(&f));
        Discretization::new(f, c, k).unwrap()
    }

    #[test]
    fn constant_first_and_orthonormal() {
        let (f, _) = build_grids(8, 2).unwrap();
        let d = disc(8, 2, Some(log_uniform_field(&f, 1e4, 2)));
        let s = d.s_diag();
        for i in 0..4 {
            let pairs = solve_local_spectral(&d, i).unwrap();
            assert_eq!(pairs.len(), 16);
            let lmax = pairs.last().unwrap().lambda;
            assert!(pairs[0].lambda <= 1e-10 * lmax);
            assert!(pairs.windows(2).all(|w| w[0].lambda <= w[1].lambda));
            let cells: Vec<usize> = d.coarse.element_box(i).cells(&d.fine).collect();
            for a in 0..16 {
                for b in 0..16 {
                    let dot: f64 = cells
                        .iter()
                        .enumerate()
                        .map(|(k, &c)| pairs[a].pressure[k] * pairs[b].pressure[k] * s[c])
                        .sum();
                    let expect = if a == b { 1.0 } else { 0.0 };
                    assert!((dot - expect).abs() < 1e-10, "({a},{b}) {dot}");
                }
            }
        }
    }

    #[test]
    fn single_cell_elements_only_have_constants() {
        let d = disc(4, 4, None);
        let pairs = solve_local_spectral(&d, 5).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].lambda, 0.0);
    }

    #[test]
    fn uniform_medium_lambda_is_common_second_eigenvalue() {
        let d = disc(16, 4, None);
        let aux = build_aux_space(&d, Selection::Fixed(1)).unwrap();
        let l2: Vec<f64> = aux.locals.iter().map(|l| l.next_lambda.unwrap()).collect();
        // elements differ only through kappa~, which is translation invariant
        for v in &l2 {
            assert!((v - l2[0]).abs() <= 1e-10 * l2[0]);
        }
        assert!((aux.lambda - l2[0]).abs() <= 1e-10 * l2[0]);
        assert!(build_aux_space(&d, Selection::Fixed(17)).is_err());
    }

    #[test]
    fn projection_is_identity_on_aux_and_idempotent() {
        let (f, _) = build_grids(8, 2).unwrap();
        let d = disc(8, 2, Some(log_uniform_field(&f, 1e3, 9)));
        let aux = build_aux_space(&d, Selection::Fixed(3)).unwrap();
        let c: Vec<f64> = (0..aux.len()).map(|k| (k as f64 * 0.37).sin()).collect();
        let q = aux.expand(&c);
        let back = aux.coefficients(&q);
        for (a, b) in c.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
        let r: Vec<f64> = (0..64).map(|k| (k as f64 * 1.3).cos()).collect();
        let p1 = project_pi(&r, &aux);
        let p2 = project_pi(&p1, &aux);
        assert!(p1.iter().zip(&p2).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_eq!(aux.owner(aux.index(2, 1).unwrap()), (2, 1));
    }

    #[test]
    fn threshold_selection() {
        let d = disc(8, 2, None);
        let aux = build_aux_space(&d, Selection::Threshold(0.0)).unwrap();
        assert_eq!(aux.counts(), vec![1; 4]);
        let all = build_aux_space(&d, Selection::Threshold(f64::INFINITY)).unwrap();
        assert_eq!(all.counts(), vec![16; 4]);
        assert!(all.lambda.is_infinite());
    }

    #[test]
    fn eigen_report_format() {
        let mut out = Vec::new();
        write_eigen_report(&mut out, &[vec![0.0, 2.5], vec![0.0, 1.0]], 1).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("element,j,lambda,gap\n0,1,"));
        assert!(text.lines().nth(1).unwrap().ends_with(','));
    }
}
