//! Norms, relative errors, basis decay profiles and the convergence harness.

use std::io::Write;
use std::time::Instant;

use crate::auxspace::{build_aux_space, AuxSpace, Selection};
use crate::cembasis::{
    build_basis_set, build_global, build_type2_local, divergence_residual, Flavor,
};
use crate::coarse::{assemble_coarse_system, mass_residuals, solve_multiscale, MsSolution};
use crate::error::{Error, Result};
use crate::fem::{
    apply_mass, cell_average_velocity, cell_flux, solve_fine_reference, FineSolution,
};
use crate::medium::PermField;
use crate::mesh::{build_grids, CellBox, FineGrid};
use crate::Discretization;

/// Squared norms of a velocity and a pressure field over a box of cells.
///
/// `v_sq() == a_sq + div_sq` holds by construction.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NormReport {
    pub a_sq: f64,
    /// `sum_c (int_c div v)^2 / s_c`, the `kappa~^{-1}`-weighted divergence term.
    pub div_sq: f64,
    pub s_sq: f64,
    pub l2_sq: f64,
}

impl NormReport {
    pub fn a(&self) -> f64 {
        self.a_sq.sqrt()
    }

    pub fn v_sq(&self) -> f64 {
        self.a_sq + self.div_sq
    }

    pub fn v(&self) -> f64 {
        self.v_sq().sqrt()
    }

    pub fn s(&self) -> f64 {
        self.s_sq.sqrt()
    }

    pub fn l2(&self) -> f64 {
        self.l2_sq.sqrt()
    }
}

/// Norms of `v` (all fine edges) and `q` (all fine cells) restricted to `region`
/// (whole domain when `None`). Either field may be empty to skip it.
pub fn norms(
    disc: &Discretization,
    v: &[f64],
    q: &[f64],
    region: Option<&CellBox>,
) -> Result<NormReport> {
    let fine = &disc.fine;
    if !v.is_empty() && v.len() != fine.num_edges() {
        return Err(Error::Dimension(format!(
            "velocity has {} entries, grid has {} edges",
            v.len(),
            fine.num_edges()
        )));
    }
    if !q.is_empty() && q.len() != fine.num_cells() {
        return Err(Error::Dimension(format!(
            "pressure has {} entries, grid has {} cells",
            q.len(),
            fine.num_cells()
        )));
    }
    let full = fine.full_box();
    let cells = region.copied().unwrap_or(full);
    if !full.contains_box(&cells) {
        return Err(Error::Index(format!("region {cells:?} outside the grid")));
    }
    let s = disc.s_diag();
    let h2 = fine.h() * fine.h();
    let mut out = NormReport::default();
    if !v.is_empty() {
        let mv = apply_mass(fine, &disc.kappa, &cells, v);
        out.a_sq = v.iter().zip(&mv).map(|(a, b)| a * b).sum();
        let flux = cell_flux(fine, v);
        out.div_sq = cells.cells(fine).map(|c| flux[c] * flux[c] / s[c]).sum();
    }
    if !q.is_empty() {
        out.s_sq = cells.cells(fine).map(|c| q[c] * q[c] * s[c]).sum();
        out.l2_sq = cells.cells(fine).map(|c| q[c] * q[c] * h2).sum();
    }
    Ok(out)
}

/// `(e_p, e_v)`: relative L2 pressure error and relative a-norm velocity error.
pub fn relative_errors(
    disc: &Discretization,
    reference: &FineSolution,
    v: &[f64],
    p: &[f64],
) -> Result<(f64, f64)> {
    let r = norms(disc, &reference.velocity, &reference.pressure, None)?;
    if r.l2_sq == 0.0 || r.a_sq == 0.0 {
        return Err(Error::config("reference solution has zero norm"));
    }
    let dv: Vec<f64> = reference
        .velocity
        .iter()
        .zip(v)
        .map(|(a, b)| a - b)
        .collect();
    let dp: Vec<f64> = reference
        .pressure
        .iter()
        .zip(p)
        .map(|(a, b)| a - b)
        .collect();
    if dv.len() != v.len() || dp.len() != p.len() {
        return Err(Error::Dimension(
            "solution and reference sizes differ".into(),
        ));
    }
    let d = norms(disc, &dv, &dp, None)?;
    Ok((d.l2() / r.l2(), d.a() / r.a()))
}

pub fn ms_errors(
    disc: &Discretization,
    reference: &FineSolution,
    ms: &MsSolution,
) -> Result<(f64, f64)> {
    relative_errors(disc, reference, &ms.velocity, &ms.pressure)
}

/// Convergence rate between `(h1, e1)` and `(h2, e2)`.
pub fn rate(h1: f64, e1: f64, h2: f64, e2: f64) -> f64 {
    (e1 / e2).ln() / (h1 / h2).ln()
}

/// Least-squares geometric ratio of `values` against `xs`.
pub fn fit_ratio(xs: &[f64], values: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(values)
        .filter(|(_, v)| **v > 0.0)
        .map(|(x, v)| (*x, v.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some((sxy / sxx).exp())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecayRow {
    pub layers: usize,
    pub diff_v: f64,
    pub diff_a: f64,
    /// The region covers the whole domain, so the row is left out of the fit.
    pub saturated: bool,
    /// Per-cell `sqrt(kappa |avg(psi_glo - psi_l)|^2)`.
    pub field: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecayProfile {
    pub element: usize,
    pub index: usize,
    /// Sorted by `layers`.
    pub rows: Vec<DecayRow>,
    /// Fitted ratio of `diff_v` per layer.
    pub rho: Option<f64>,
}

/// Pointwise `sqrt(kappa |v|^2)` of the cell-averaged field.
pub fn decay_field(fine: &FineGrid, kappa: &PermField, v: &[f64]) -> Vec<f64> {
    cell_average_velocity(fine, v)
        .iter()
        .enumerate()
        .map(|(c, (x, y))| (kappa.get(c) * (x * x + y * y)).sqrt())
        .collect()
}

pub fn decay_study(
    disc: &Discretization,
    aux: &AuxSpace,
    i: usize,
    j: usize,
    layers: &[usize],
) -> Result<DecayProfile> {
    aux.index(i, j)?;
    let glo = build_global(disc, aux, i, j)?
        .velocity
        .to_global(&disc.fine);
    let mut ls = layers.to_vec();
    ls.sort_unstable();
    ls.dedup();
    let mut rows = Vec::with_capacity(ls.len());
    for &l in &ls {
        let psi = build_type2_local(disc, aux, i, j, l)?;
        let saturated = psi.region.is_whole_domain(&disc.coarse);
        let loc = psi.velocity.to_global(&disc.fine);
        let d: Vec<f64> = glo.iter().zip(&loc).map(|(a, b)| a - b).collect();
        let n = norms(disc, &d, &[], None)?;
        rows.push(DecayRow {
            layers: l,
            diff_v: n.v(),
            diff_a: n.a(),
            saturated,
            field: decay_field(&disc.fine, &disc.kappa, &d),
        });
    }
    let fit: Vec<&DecayRow> = rows.iter().filter(|r| !r.saturated).collect();
    let xs: Vec<f64> = fit.iter().map(|r| r.layers as f64).collect();
    let ys: Vec<f64> = fit.iter().map(|r| r.diff_v).collect();
    Ok(DecayProfile {
        element: i,
        index: j,
        rho: fit_ratio(&xs, &ys),
        rows,
    })
}

/// `l = ceil(l0 log(1/H) / log(1/H0))`, the oversampling rule calibrated at `(l0, H0)`.
pub fn auto_layers(l0: usize, h0: f64, h: f64) -> usize {
    let v = l0 as f64 * (1.0 / h).ln() / (1.0 / h0).ln();
    (v - 1e-9).ceil().max(1.0) as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyCase {
    pub selection: Selection,
    pub coarse_n: usize,
    pub layers: usize,
    pub flavor: Flavor,
}

#[derive(Clone, Debug)]
pub struct StudyConfig {
    pub fine: FineGrid,
    pub kappa: PermField,
    /// Source on fine cells, zero mean.
    pub source: Vec<f64>,
    pub cases: Vec<StudyCase>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceRow {
    pub selection: Selection,
    pub coarse_h: f64,
    pub layers: usize,
    pub e_p: f64,
    pub e_v: f64,
    pub rate_p: Option<f64>,
    pub rate_v: Option<f64>,
    pub seconds: f64,
    /// `max_i |int_{K_i} div v_ms - int_{K_i} f|`.
    pub mass_residual: f64,
    /// Largest divergence-compatibility residual over the basis.
    pub div_residual: f64,
    pub inf_sup: f64,
    pub lambda: f64,
}

/// One multiscale solve against a fine reference.
pub fn run_case(
    config: &StudyConfig,
    reference: &FineSolution,
    case: &StudyCase,
) -> Result<ConvergenceRow> {
    let start = Instant::now();
    let ctx = |e: Error| {
        e.with_context(format!(
            "case J={} H=1/{} l={}",
            selection_label(case.selection),
            case.coarse_n,
            case.layers
        ))
    };
    let (_, coarse) = build_grids(config.fine.n(), case.coarse_n).map_err(ctx)?;
    let disc = Discretization::new(config.fine, coarse, config.kappa.clone()).map_err(ctx)?;
    let aux = build_aux_space(&disc, case.selection).map_err(ctx)?;
    let basis = build_basis_set(&disc, &aux, case.flavor, case.layers).map_err(ctx)?;
    let sys = assemble_coarse_system(&disc, &basis, &aux, &config.source).map_err(ctx)?;
    let sol = solve_multiscale(&disc, &sys, &basis, &aux).map_err(ctx)?;
    let seconds = start.elapsed().as_secs_f64();
    let (e_p, e_v) = ms_errors(&disc, reference, &sol).map_err(ctx)?;
    let mass = mass_residuals(&disc, &aux, &sol.velocity, &config.source);
    let div_residual = basis
        .functions
        .iter()
        .map(|p| divergence_residual(&disc, &aux, &p.velocity))
        .fold(0.0, f64::max);
    Ok(ConvergenceRow {
        selection: case.selection,
        coarse_h: disc.coarse.h(),
        layers: case.layers,
        e_p,
        e_v,
        rate_p: None,
        rate_v: None,
        seconds,
        mass_residual: mass.max(),
        div_residual,
        inf_sup: sol.inf_sup,
        lambda: aux.lambda,
    })
}

/// Runs every case in order; the fine reference is solved once.
pub fn convergence_study(config: &StudyConfig) -> Result<Vec<ConvergenceRow>> {
    let reference = solve_fine_reference(&config.fine, &config.kappa, &config.source)?;
    let mut rows: Vec<ConvergenceRow> = Vec::with_capacity(config.cases.len());
    for case in &config.cases {
        let mut row = run_case(config, &reference, case)?;
        if let Some(prev) = rows.last() {
            if prev.coarse_h != row.coarse_h {
                row.rate_p = Some(rate(prev.coarse_h, prev.e_p, row.coarse_h, row.e_p));
                row.rate_v = Some(rate(prev.coarse_h, prev.e_v, row.coarse_h, row.e_v));
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn selection_label(sel: Selection) -> String {
    match sel {
        Selection::Fixed(j) => j.to_string(),
        Selection::Threshold(t) => format!("tau={t}"),
    }
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn write_convergence_csv(w: &mut impl Write, rows: &[ConvergenceRow]) -> std::io::Result<()> {
    writeln!(w, "J,H,layers,e_p,e_v,rate_p,rate_v,seconds")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            selection_label(r.selection),
            num(r.coarse_h),
            r.layers,
            num(r.e_p),
            num(r.e_v),
            opt(r.rate_p),
            opt(r.rate_v),
            num(r.seconds)
        )?;
    }
    Ok(())
}

pub fn write_decay_csv(w: &mut impl Write, profile: &DecayProfile) -> std::io::Result<()> {
    writeln!(w, "i,j,l,diff_V,diff_a")?;
    for r in &profile.rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            profile.element,
            profile.index,
            r.layers,
            num(r.diff_v),
            num(r.diff_a)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disc(n: usize, nc: usize) -> Discretization {
        let (f, c) = build_grids(n, nc).unwrap();
        Discretization::new(f, c, PermField::uniform(&f)).unwrap()
    }

    #[test]
    fn zero_field_has_zero_norms() {
        let d = disc(8, 2);
        let r = norms(&d, &vec![0.0; d.fine.num_edges()], &vec![0.0; 64], None).unwrap();
        assert_eq!(r, NormReport::default());
    }

    #[test]
    fn uniform_flow_has_unit_energy() {
        let d = disc(8, 2);
        let mut v = vec![0.0; d.fine.num_edges()];
        v[..d.fine.num_vertical_edges()].fill(1.0);
        let r = norms(&d, &v, &[], None).unwrap();
        assert!((r.a_sq - 1.0).abs() < 1e-13);
        assert!(r.div_sq.abs() < 1e-13);
    }

    #[test]
    fn rejects_wrong_sizes() {
        let d = disc(8, 2);
        assert!(norms(&d, &[1.0; 3], &[], None).is_err());
    }

    #[test]
    fn exact_rates() {
        let hs = [0.125, 0.0625, 0.03125];
        let es: Vec<f64> = hs.iter().map(|h| 3.7 * h).collect();
        assert!((rate(hs[0], es[0], hs[1], es[1]) - 1.0).abs() < 1e-12);
        assert!((fit_ratio(&[1.0, 2.0, 3.0], &[0.5, 0.25, 0.125]).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn auto_layer_rule() {
        assert_eq!(auto_layers(3, 0.125, 0.125), 3);
        assert_eq!(auto_layers(3, 0.125, 0.0625), 4);
        assert_eq!(auto_layers(3, 0.125, 0.03125), 5);
        assert_eq!(auto_layers(3, 0.1, 0.05), 4);
    }
}
