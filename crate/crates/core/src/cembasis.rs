//! Energy minimizing velocity basis functions and the snapshot solution.

use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::auxspace::{project_pi, AuxSpace};
use crate::error::{Error, Result};
use crate::fem::{check_zero_mean, solve_saddle, BoxField, Coupling, SaddleSystem};
use crate::mesh::Region;
use crate::Discretization;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Flavor {
    /// Multiplier-constrained local problems.
    Type1,
    /// Penalized local problems (the default).
    Type2,
    /// Type 2 posed on the whole domain.
    Global,
}

impl Flavor {
    pub fn name(self) -> &'static str {
        match self {
            Flavor::Type1 => "type1",
            Flavor::Type2 => "type2",
            Flavor::Global => "global",
        }
    }
}

impl std::str::FromStr for Flavor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "type1" => Ok(Flavor::Type1),
            "type2" => Ok(Flavor::Type2),
            "global" => Ok(Flavor::Global),
            _ => Err(Error::config(format!(
                "unknown flavor {s:?} (type1, type2 or global)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct VelocityBasisFunction {
    pub element: usize,
    pub index: usize,
    pub flavor: Flavor,
    /// Support; the whole domain for the global flavor.
    pub region: Region,
    pub velocity: BoxField,
    /// Companion pressure on the support cells (box-local order).
    pub pressure: Vec<f64>,
    /// Type 1 multipliers, one per auxiliary function inside the support.
    pub mu: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct BasisSet {
    pub flavor: Flavor,
    /// Oversampling layers; `None` for the global flavor.
    pub layers: Option<usize>,
    /// Ordered like the auxiliary columns.
    pub functions: Vec<VelocityBasisFunction>,
}

impl BasisSet {
    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }
}

fn region_for(disc: &Discretization, i: usize, flavor: Flavor, layers: usize) -> Result<Region> {
    match flavor {
        Flavor::Global => {
            disc.coarse.check_element(i)?;
            Ok(disc.coarse.whole_domain(i))
        }
        _ => {
            if layers == 0 {
                return Err(Error::config(
                    "localized basis functions need at least one oversampling layer",
                ));
            }
            disc.coarse.oversample_region(i, layers)
        }
    }
}

/// All basis functions of element `i`, sharing one factorization.
fn build_element(
    disc: &Discretization,
    aux: &AuxSpace,
    i: usize,
    js: &[usize],
    flavor: Flavor,
    layers: usize,
) -> Result<Vec<VelocityBasisFunction>> {
    let region = region_for(disc, i, flavor, layers)?;
    let cells = region.cells;
    let (cols, ids) = aux.columns_in(&cells);
    let coupling = match flavor {
        Flavor::Type1 => Coupling::Constraint(&cols),
        _ => Coupling::Penalty(&cols),
    };
    let sys = SaddleSystem::new(&disc.fine, &disc.kappa, &cells, coupling, false);
    let ctx = |j: usize| format!("{} basis ({i}, {j}), {layers} layers", flavor.name());
    let factor = sys.factor().map_err(|e| e.with_context(ctx(0)))?;
    let s = aux.s_diag();
    let eb = aux.element_box(i);
    js.iter()
        .map(|&j| {
            let k = aux.index(i, j)?;
            let p = &aux.locals[i].pairs[j].pressure;
            let sol = match flavor {
                Flavor::Type1 => {
                    let pos = ids
                        .iter()
                        .position(|&x| x == k)
                        .expect("own element lies in its region");
                    let mut e = vec![0.0; ids.len()];
                    e[pos] = 1.0;
                    factor.solve(None, &vec![0.0; cells.num_cells()], Some(&e))
                }
                _ => {
                    let mut rhs = vec![0.0; cells.num_cells()];
                    for (n, (x, y)) in (eb.y0..eb.y1)
                        .flat_map(|y| (eb.x0..eb.x1).map(move |x| (x, y)))
                        .enumerate()
                    {
                        rhs[cells.local_cell(x, y)] = s[disc.fine.cell(x, y)] * p[n];
                    }
                    factor.solve(None, &rhs, None)
                }
            }
            .map_err(|e| e.with_context(ctx(j)))?;
            Ok(VelocityBasisFunction {
                element: i,
                index: j,
                flavor,
                region,
                velocity: BoxField::from_local(&sys.map, &sol.velocity),
                pressure: sol.pressure,
                mu: (flavor == Flavor::Type1).then_some(sol.aux),
            })
        })
        .collect()
}

/// Penalized basis function for auxiliary pair `(i, j)` on `K_{i,l}`.
pub fn build_type2_local(
    disc: &Discretization,
    aux: &AuxSpace,
    i: usize,
    j: usize,
    layers: usize,
) -> Result<VelocityBasisFunction> {
    aux.index(i, j)?;
    Ok(build_element(disc, aux, i, &[j], Flavor::Type2, layers)?.remove(0))
}

/// Constrained basis function for auxiliary pair `(i, j)` on `K_{i,l}`.
pub fn build_type1_local(
    disc: &Discretization,
    aux: &AuxSpace,
    i: usize,
    j: usize,
    layers: usize,
) -> Result<VelocityBasisFunction> {
    aux.index(i, j)?;
    Ok(build_element(disc, aux, i, &[j], Flavor::Type1, layers)?.remove(0))
}

/// Penalized basis function for `(i, j)` posed on the whole domain.
pub fn build_global(
    disc: &Discretization,
    aux: &AuxSpace,
    i: usize,
    j: usize,
) -> Result<VelocityBasisFunction> {
    aux.index(i, j)?;
    Ok(build_element(disc, aux, i, &[j], Flavor::Global, 0)?.remove(0))
}

/// Every basis function of one flavor, elements processed in parallel.
pub fn build_basis_set(
    disc: &Discretization,
    aux: &AuxSpace,
    flavor: Flavor,
    layers: usize,
) -> Result<BasisSet> {
    let per_element = (0..aux.num_elements())
        .into_par_iter()
        .map(|i| {
            let js: Vec<usize> = (0..aux.locals[i].len()).collect();
            if js.is_empty() {
                return Ok(Vec::new());
            }
            build_element(disc, aux, i, &js, flavor, layers)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BasisSet {
        flavor,
        layers: (flavor != Flavor::Global).then_some(layers),
        functions: per_element.into_iter().flatten().collect(),
    })
}

/// Relative `s`-distance of `div psi / kappa~` from `Q_aux`, which is zero
/// exactly when `div psi` lies in `kappa~ Q_aux`.
pub fn divergence_residual(disc: &Discretization, aux: &AuxSpace, psi: &BoxField) -> f64 {
    let s = aux.s_diag();
    let flux = psi.cell_flux(disc.fine.h());
    let mut r = vec![0.0; disc.fine.num_cells()];
    for (n, c) in psi.cells.cells(&disc.fine).enumerate() {
        r[c] = flux[n] / s[c];
    }
    let pr = project_pi(&r, aux);
    let num: f64 = r
        .iter()
        .zip(&pr)
        .zip(s)
        .map(|((a, b), w)| (a - b).powi(2) * w)
        .sum();
    let den: f64 = r.iter().zip(s).map(|(a, w)| a * a * w).sum();
    if den == 0.0 {
        0.0
    } else {
        (num / den).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotSolution {
    pub velocity: Vec<f64>,
    /// Zero-mean cell pressures.
    pub pressure: Vec<f64>,
}

/// Solves `a(u,v) + b(v,p) = 0`, `b(u,q) = s(pi(kappa~^{-1} f), q)` with `int p = 0`.
pub fn build_snapshot(
    disc: &Discretization,
    aux: &AuxSpace,
    f: &[f64],
) -> Result<SnapshotSolution> {
    check_zero_mean(&disc.fine, f)?;
    let s = aux.s_diag();
    let g: Vec<f64> = f
        .iter()
        .zip(s)
        .map(|(fc, sc)| fc / (sc / (disc.fine.h() * disc.fine.h())))
        .collect();
    let pg = project_pi(&g, aux);
    let rhs: Vec<f64> = pg.iter().zip(s).map(|(p, sc)| p * sc).collect();
    let cells = disc.fine.full_box();
    let sys = SaddleSystem::new(&disc.fine, &disc.kappa, &cells, Coupling::None, true);
    let sol = solve_saddle(&sys, None, &rhs, None).map_err(|e| e.with_context("snapshot"))?;
    Ok(SnapshotSolution {
        velocity: sys.map.scatter(&sol.velocity),
        pressure: sol.pressure.iter().map(|p| -p).collect(),
    })
}

/// Writes `manifest.csv` and one `psi_<i>_<j>.csv` (columns `edge,value`, nonzero
/// entries only, global edge numbering) per basis function.
pub fn dump_basis(disc: &Discretization, set: &BasisSet, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut manifest = std::io::BufWriter::new(std::fs::File::create(dir.join("manifest.csv"))?);
    writeln!(manifest, "i,j,l,flavor,x0,x1,y0,y1,file")?;
    for psi in &set.functions {
        let name = format!("psi_{}_{}.csv", psi.element, psi.index);
        let c = psi.region.cells;
        let l = set.layers.map(|l| l.to_string()).unwrap_or_default();
        writeln!(
            manifest,
            "{},{},{l},{},{},{},{},{},{name}",
            psi.element,
            psi.index,
            set.flavor.name(),
            c.x0,
            c.x1,
            c.y0,
            c.y1
        )?;
        let mut out = std::io::BufWriter::new(std::fs::File::create(dir.join(&name))?);
        writeln!(out, "edge,value")?;
        for (e, v) in psi.velocity.to_global(&disc.fine).iter().enumerate() {
            if *v != 0.0 {
                writeln!(out, "{e},{v:.16e}")?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auxspace::{build_aux_space, Selection};
    use crate::medium::PermField;
    use crate::mesh::build_grids;

    fn setup(n: usize, nc: usize, j: usize) -> (Discretization, AuxSpace) {
        let (f, c) = build_grids(n, nc).unwrap();
        let d = Discretization::new(f, c, PermField::uniform(&f)).unwrap();
        let aux = build_aux_space(&d, Selection::Fixed(j)).unwrap();
        (d, aux)
    }

    #[test]
    fn divergence_lies_in_weighted_aux_space() {
        let (d, aux) = setup(16, 4, 2);
        for flavor in [Flavor::Type1, Flavor::Type2] {
            let set = build_basis_set(&d, &aux, flavor, 1).unwrap();
            assert_eq!(set.len(), aux.len());
            for psi in &set.functions {
                assert!(divergence_residual(&d, &aux, &psi.velocity) < 1e-10);
            }
        }
    }

    #[test]
    fn type1_constraints_hold() {
        let (d, aux) = setup(16, 4, 2);
        let psi = build_type1_local(&d, &aux, 5, 1, 1).unwrap();
        let cells = psi.region.cells;
        let (cols, ids) = aux.columns_in(&cells);
        let got = cols.dot(&psi.pressure);
        let k = aux.index(5, 1).unwrap();
        for (g, id) in got.iter().zip(&ids) {
            let expect = if *id == k { 1.0 } else { 0.0 };
            assert!((g - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn layer_and_index_errors() {
        let (d, aux) = setup(8, 2, 1);
        assert!(matches!(
            build_type2_local(&d, &aux, 0, 0, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            build_type2_local(&d, &aux, 0, 1, 1),
            Err(Error::Index(_))
        ));
        assert!(matches!(build_global(&d, &aux, 4, 0), Err(Error::Index(_))));
    }

    #[test]
    fn zero_source_snapshot() {
        let (d, aux) = setup(8, 2, 2);
        let s = build_snapshot(&d, &aux, &vec![0.0; 64]).unwrap();
        assert!(s.velocity.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flavor_names_round_trip() {
        for f in [Flavor::Type1, Flavor::Type2, Flavor::Global] {
            assert_eq!(f.name().parse::<Flavor>().unwrap(), f);
        }
        assert!("type3".parse::<Flavor>().is_err());
    }
}
