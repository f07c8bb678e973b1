use faer::Mat;
use mixed_cem::auxspace::{build_aux_space, Selection};
use mixed_cem::cembasis::{build_basis_set, BasisSet, Flavor};
use mixed_cem::coarse::{assemble_coarse_system, solve_multiscale, MsSolution};
use mixed_cem::fem::{assemble_a, assemble_b, solve_fine_reference, SourceSpec, VelocityDofMap};
use mixed_cem::medium::{log_uniform_field, PermField};
use mixed_cem::mesh::build_grids;
use mixed_cem::metrics::ms_errors;
use mixed_cem::Discretization;

fn setup(nx: usize, nc: usize, contrast: f64, seed: u64) -> Discretization {
    let (fine, coarse) = build_grids(nx, nc).unwrap();
    let kappa = if contrast == 1.0 {
        PermField::uniform(&fine)
    } else {
        log_uniform_field(&fine, contrast, seed)
    };
    Discretization::new(fine, coarse, kappa).unwrap()
}

fn solve(
    disc: &Discretization,
    sel: Selection,
    flavor: Flavor,
    layers: usize,
    f: &[f64],
) -> (BasisSet, MsSolution) {
    let aux = build_aux_space(disc, sel).unwrap();
    let basis = build_basis_set(disc, &aux, flavor, layers).unwrap();
    let sys = assemble_coarse_system(disc, &basis, &aux, f).unwrap();
    let sol = solve_multiscale(disc, &sys, &basis, &aux).unwrap();
    (basis, sol)
}

fn mean_free(p: &[f64]) -> Vec<f64> {
    let m = p.iter().sum::<f64>() / p.len() as f64;
    p.iter().map(|x| x - m).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Galerkin projection assembled from dense fine operators and solved with a
/// pseudo-inverse, against the sparse coarse pipeline.
#[test]
fn coarse_solve_matches_dense_galerkin_projection() {
    let disc = setup(16, 4, 1e3, 9);
    let f = SourceSpec::Corners.expand(&disc.fine).unwrap();
    let aux = build_aux_space(&disc, Selection::Fixed(2)).unwrap();
    let basis = build_basis_set(&disc, &aux, Flavor::Type2, 1).unwrap();
    let sys = assemble_coarse_system(&disc, &basis, &aux, &f).unwrap();
    let ms = solve_multiscale(&disc, &sys, &basis, &aux).unwrap();

    let full = disc.fine.full_box();
    let map = VelocityDofMap::new(&disc.fine, full);
    let a = assemble_a(&disc.fine, &disc.kappa, &full).to_dense();
    let b = assemble_b(&disc.fine, &full).to_dense();
    let psi: Vec<Vec<f64>> = basis
        .functions
        .iter()
        .map(|p| map.gather(&p.velocity.to_global(&disc.fine)))
        .collect();
    let q: Vec<Vec<f64>> = (0..aux.len())
        .map(|k| {
            let mut e = vec![0.0; aux.len()];
            e[k] = 1.0;
            aux.expand(&e)
        })
        .collect();
    let (nb, na) = (psi.len(), q.len());
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(s, t)| s * t).sum::<f64>();
    let apsi: Vec<Vec<f64>> = psi
        .iter()
        .map(|p| {
            (0..a.nrows())
                .map(|r| (0..a.ncols()).map(|c| a[(r, c)] * p[c]).sum())
                .collect()
        })
        .collect();
    let bpsi: Vec<Vec<f64>> = psi
        .iter()
        .map(|p| {
            (0..b.nrows())
                .map(|r| (0..b.ncols()).map(|c| b[(r, c)] * p[c]).sum())
                .collect()
        })
        .collect();
    let h2 = disc.fine.h().powi(2);
    let k = Mat::from_fn(nb + na, nb + na, |r, c| match (r < nb, c < nb) {
        (true, true) => dot(&psi[r], &apsi[c]),
        (true, false) => -dot(&q[c - nb], &bpsi[r]),
        (false, true) => dot(&q[r - nb], &bpsi[c]),
        _ => 0.0,
    });
    let rhs: Vec<f64> = (0..nb + na)
        .map(|r| {
            if r < nb {
                0.0
            } else {
                h2 * dot(&q[r - nb], &f)
            }
        })
        .collect();
    let kinv = k.svd().unwrap().pseudoinverse();
    let x: Vec<f64> = (0..nb + na)
        .map(|r| (0..nb + na).map(|c| kinv[(r, c)] * rhs[c]).sum())
        .collect();

    let mut v = vec![0.0; disc.fine.num_edges()];
    for (p, alpha) in basis.functions.iter().zip(&x[..nb]) {
        p.velocity.add_to_global(&disc.fine, *alpha, &mut v);
    }
    assert!(
        max_diff(&v, &ms.velocity) <= 1e-8 * max_abs(&v),
        "velocity {}",
        max_diff(&v, &ms.velocity)
    );
    let p = mean_free(&aux.expand(&x[nb..]));
    let pm = mean_free(&ms.pressure);
    assert!(
        max_diff(&p, &pm) <= 1e-7 * max_abs(&p),
        "pressure {}",
        max_diff(&p, &pm)
    );
}

/// Keeping every local eigenfunction makes the auxiliary space the whole
/// pressure space, so the global flavor reproduces the fine solution.
#[test]
fn complete_auxiliary_space_is_exact_on_uniform_medium() {
    let disc = setup(8, 2, 1.0, 0);
    let f = SourceSpec::Manufactured.expand(&disc.fine).unwrap();
    let (_, sol) = solve(&disc, Selection::Fixed(16), Flavor::Global, 0, &f);
    let (e_p, e_v) = ms_errors(
        &disc,
        &solve_fine_reference(&disc.fine, &disc.kappa, &f).unwrap(),
        &sol,
    )
    .unwrap();
    assert!(e_v <= 1e-9 && e_p <= 1e-9, "e_p {e_p:.3e} e_v {e_v:.3e}");
}

/// Nested global spaces: the energy error cannot grow as J grows.
#[test]
fn enlarging_the_auxiliary_space_never_increases_the_velocity_error() {
    let disc = setup(16, 4, 1e4, 3);
    let f = SourceSpec::Corners.expand(&disc.fine).unwrap();
    let reference = solve_fine_reference(&disc.fine, &disc.kappa, &f).unwrap();
    let errors: Vec<f64> = (1..=5)
        .map(|j| {
            ms_errors(
                &disc,
                &reference,
                &solve(&disc, Selection::Fixed(j), Flavor::Global, 0, &f).1,
            )
            .unwrap()
            .1
        })
        .collect();
    for w in errors.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-9), "{errors:?}");
    }
}

/// Multiplying the permeability by a constant rescales pressure and leaves the
/// relative velocity error unchanged.
#[test]
fn velocity_error_is_invariant_under_permeability_scaling() {
    let base = setup(16, 4, 1e3, 4);
    let f = SourceSpec::Corners.expand(&base.fine).unwrap();
    let mut errs = Vec::new();
    for c in [1.0, 1e-3, 250.0] {
        let disc = Discretization::new(base.fine, base.coarse, base.kappa.scaled(c)).unwrap();
        let reference = solve_fine_reference(&disc.fine, &disc.kappa, &f).unwrap();
        let (_, sol) = solve(&disc, Selection::Fixed(3), Flavor::Type2, 1, &f);
        errs.push(ms_errors(&disc, &reference, &sol).unwrap());
    }
    for (e_p, e_v) in &errs[1..] {
        assert!((e_v - errs[0].1).abs() <= 1e-8 * errs[0].1, "{errs:?}");
        assert!((e_p - errs[0].0).abs() <= 1e-8 * errs[0].0, "{errs:?}");
    }
}

/// One coarse element with the constant alone: only the zero velocity is admissible.
#[test]
fn single_element_with_constants_gives_zero_velocity() {
    let disc = setup(8, 1, 1e2, 6);
    let f = SourceSpec::Manufactured.expand(&disc.fine).unwrap();
    let (_, sol) = solve(&disc, Selection::Fixed(1), Flavor::Global, 0, &f);
    assert!(
        max_abs(&sol.velocity) <= 1e-12,
        "{}",
        max_abs(&sol.velocity)
    );
}
