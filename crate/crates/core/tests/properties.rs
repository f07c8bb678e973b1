use mixed_cem::auxspace::{build_aux_space, project_pi, Selection};
use mixed_cem::medium::{load_raster, log_uniform_field, save_raster, PermField};
use mixed_cem::mesh::{bilinear_pou, build_grids};
use mixed_cem::metrics::{auto_layers, fit_ratio, norms, rate};
use mixed_cem::Discretization;
use proptest::prelude::*;

fn disc(seed: u64, contrast: f64) -> Discretization {
    let (fine, coarse) = build_grids(8, 2).unwrap();
    let kappa = log_uniform_field(&fine, contrast, seed);
    Discretization::new(fine, coarse, kappa).unwrap()
}

fn vec_of(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn norms_are_homogeneous_and_subadditive(seed in 0u64..50, c in -5.0f64..5.0, v in vec_of(144), w in vec_of(144), q in vec_of(64)) {
        let d = disc(seed, 1e3);
        let n = |x: &[f64], p: &[f64]| norms(&d, x, p, None).unwrap();
        let cv: Vec<f64> = v.iter().map(|x| c * x).collect();
        let cq: Vec<f64> = q.iter().map(|x| c * x).collect();
        let (a, b) = (n(&v, &q), n(&cv, &cq));
        prop_assert!((b.a() - c.abs() * a.a()).abs() <= 1e-10 * (1.0 + a.a()));
        prop_assert!((b.v() - c.abs() * a.v()).abs() <= 1e-10 * (1.0 + a.v()));
        prop_assert!((b.s() - c.abs() * a.s()).abs() <= 1e-10 * (1.0 + a.s()));
        let sum: Vec<f64> = v.iter().zip(&w).map(|(x, y)| x + y).collect();
        let (s, nw) = (n(&sum, &[]), n(&w, &[]));
        prop_assert!(s.a() <= a.a() + nw.a() + 1e-10);
        prop_assert!(s.v() <= a.v() + nw.v() + 1e-10);
    }

    #[test]
    fn projection_is_an_s_orthogonal_idempotent(seed in 0u64..50, j in 1usize..5, q in vec_of(64)) {
        let d = disc(seed, 1e4);
        let aux = build_aux_space(&d, Selection::Fixed(j)).unwrap();
        let s = aux.s_diag();
        let p = project_pi(&q, &aux);
        let pp = project_pi(&p, &aux);
        let scale = q.iter().zip(s).map(|(x, w)| x * x * w).sum::<f64>().sqrt();
        let e = p.iter().zip(&pp).zip(s).map(|((a, b), w)| (a - b).powi(2) * w).sum::<f64>().sqrt();
        prop_assert!(e <= 1e-10 * scale);
        // the residual is s-orthogonal to the range
        let r: f64 = q.iter().zip(&p).zip(&p).zip(s).map(|(((x, y), z), w)| (x - y) * z * w).sum();
        prop_assert!(r.abs() <= 1e-10 * scale * scale);
    }

    #[test]
    fn hats_sum_to_one(nc in 1usize..6, x in 0.0f64..=1.0, y in 0.0f64..=1.0) {
        let (fine, coarse) = build_grids(nc * 4, nc).unwrap();
        let pou = bilinear_pou(&coarse, &fine);
        let hats = pou.hats_at(x, y);
        prop_assert!(hats.iter().all(|h| h.1 >= -1e-15));
        prop_assert!((hats.iter().map(|h| h.1).sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn rate_recovers_power_laws(order in 0.2f64..3.0, c in 1e-4f64..1e2, h in 0.01f64..0.5, k in 1.2f64..4.0) {
        let e = |t: f64| c * t.powf(order);
        prop_assert!((rate(h, e(h), h / k, e(h / k)) - order).abs() <= 1e-9);
    }

    #[test]
    fn fit_ratio_recovers_geometric_decay(rho in 0.01f64..0.99, c in 1e-3f64..1e3, n in 3usize..8) {
        let xs: Vec<f64> = (1..=n).map(|l| l as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|l| c * rho.powf(*l)).collect();
        prop_assert!((fit_ratio(&xs, &ys).unwrap() - rho).abs() <= 1e-9 * rho.max(1.0));
    }

    #[test]
    fn auto_layers_grows_logarithmically(l0 in 1usize..5, halvings in 0u32..6) {
        let h0 = 0.125;
        let l = auto_layers(l0, h0, h0 / 2f64.powi(halvings as i32));
        // log(8 * 2^k) / log 8 = (3 + k) / 3, rounded up in integers
        let expect = (l0 * (3 + halvings as usize)).div_ceil(3);
        prop_assert_eq!(l, expect);
    }

    #[test]
    fn raster_round_trip_is_exact(n in 1usize..12, vals in prop::collection::vec(1e-3f64..1e5, 144)) {
        let field = PermField::new(n, vals[..n * n].to_vec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.txt");
        save_raster(&field, &path).unwrap();
        let back = load_raster(&path).unwrap();
        prop_assert_eq!(back.values(), field.values());
        prop_assert_eq!(back.contrast(), field.contrast());
    }
}

#[test]
fn raster_errors_name_the_record() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.txt");
    std::fs::write(&path, "2 2\n1 2\n3 -4\n").unwrap();
    let msg = load_raster(&path).unwrap_err().to_string();
    assert!(msg.contains("value 3") && msg.contains("bad.txt"), "{msg}");
    std::fs::write(&path, "2 3\n").unwrap();
    assert!(load_raster(&path)
        .unwrap_err()
        .to_string()
        .contains("square"));
}
