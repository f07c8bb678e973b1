use std::error::Error as StdError;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use mixed_cem::auxspace::{
    build_aux_space, solve_local_spectral_truncated, write_eigen_report, Selection,
};
use mixed_cem::cembasis::build_basis_set;
use mixed_cem::coarse::{assemble_coarse_system, mass_residuals, solve_multiscale};
use mixed_cem::fem::solve_fine_reference;
use mixed_cem::medium::save_raster;
use mixed_cem::mesh::{Edge, FineGrid};
use mixed_cem::metrics::{
    convergence_study, decay_study, ms_errors, norms, write_convergence_csv, write_decay_csv,
    StudyCase, StudyConfig,
};
use mixed_cem::Discretization;
use serde::Serialize;

use crate::config::{ConfigError, RunConfig};

pub type CmdResult = Result<(), Box<dyn StdError>>;

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    resolved: Resolved,
    config: &'a RunConfig,
}

#[derive(Default, Serialize)]
struct Resolved {
    #[serde(skip_serializing_if = "Option::is_none")]
    layers: Option<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    rows: Vec<[usize; 3]>,
}

fn write_manifest(out: &Path, command: &str, cfg: &RunConfig, resolved: Resolved) -> CmdResult {
    let text = toml::to_string(&Manifest {
        command,
        resolved,
        config: cfg,
    })?;
    std::fs::write(out.join("manifest.toml"), text)?;
    Ok(())
}

fn create(out: &Path, name: &str) -> std::io::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(out.join(name))?))
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn discretization(cfg: &RunConfig) -> Result<(Discretization, Vec<f64>), Box<dyn StdError>> {
    let (fine, coarse) = cfg.grids()?;
    let kappa = cfg.permeability(&fine)?;
    let f = cfg.source(&fine)?;
    Ok((Discretization::new(fine, coarse, kappa)?, f))
}

fn write_velocity(w: &mut impl Write, fine: &FineGrid, v: &[f64]) -> std::io::Result<()> {
    writeln!(w, "edge,orientation,i,j,flux")?;
    for (e, x) in v.iter().enumerate() {
        let (o, i, j) = match fine.edge(e) {
            Edge::Vertical { i, j } => ("v", i, j),
            Edge::Horizontal { i, j } => ("h", i, j),
        };
        writeln!(w, "{e},{o},{i},{j},{}", num(*x))?;
    }
    Ok(())
}

fn write_cells(w: &mut impl Write, fine: &FineGrid, name: &str, q: &[f64]) -> std::io::Result<()> {
    writeln!(w, "cell,i,j,{name}")?;
    for (c, x) in q.iter().enumerate() {
        let (i, j) = fine.cell_coords(c);
        writeln!(w, "{c},{i},{j},{}", num(*x))?;
    }
    Ok(())
}

pub fn cmd_solve(cfg: &RunConfig, out: &Path) -> CmdResult {
    let flavor = cfg.flavor()?;
    cfg.check_global_guard(flavor)?;
    let sel = cfg.selection()?;
    let layers = cfg.layers_for(cfg.grid.coarse)?;
    let (disc, f) = discretization(cfg)?;
    write_manifest(
        out,
        "solve",
        cfg,
        Resolved {
            layers: Some(layers),
            ..Default::default()
        },
    )?;

    let aux = build_aux_space(&disc, sel)?;
    let basis = build_basis_set(&disc, &aux, flavor, layers)?;
    let sys = assemble_coarse_system(&disc, &basis, &aux, &f)?;
    let sol = solve_multiscale(&disc, &sys, &basis, &aux)?;
    let reference = solve_fine_reference(&disc.fine, &disc.kappa, &f)?;
    let (e_p, e_v) = ms_errors(&disc, &reference, &sol)?;
    let n = norms(&disc, &sol.velocity, &sol.pressure, None)?;
    let mass = mass_residuals(&disc, &aux, &sol.velocity, &f);

    write_velocity(&mut create(out, "velocity.csv")?, &disc.fine, &sol.velocity)?;
    write_cells(
        &mut create(out, "pressure.csv")?,
        &disc.fine,
        "pressure",
        &sol.pressure,
    )?;
    let mut w = create(out, "norms.csv")?;
    writeln!(w, "quantity,value")?;
    for (k, v) in [
        ("velocity_a", n.a()),
        ("velocity_div", n.div_sq.sqrt()),
        ("velocity_V", n.v()),
        ("pressure_s", n.s()),
        ("pressure_L2", n.l2()),
        ("e_p", e_p),
        ("e_v", e_v),
        ("lambda", aux.lambda),
        ("inf_sup", sol.inf_sup),
        ("mass_residual_max", mass.max()),
        ("cellwise_residual", mass.cellwise),
    ] {
        writeln!(w, "{k},{}", num(v))?;
    }
    let mut w = create(out, "mass.csv")?;
    writeln!(w, "element,ci,cj,residual")?;
    for (k, r) in mass.per_element.iter().enumerate() {
        let (ci, cj) = disc.coarse.element_coords(k);
        writeln!(w, "{k},{ci},{cj},{}", num(*r))?;
    }
    println!(
        "e_p = {e_p:.6e}  e_v = {e_v:.6e}  max mass residual = {:.3e}",
        mass.max()
    );
    Ok(())
}

pub fn cmd_convergence(cfg: &RunConfig, out: &Path) -> CmdResult {
    let conv = cfg
        .convergence
        .as_ref()
        .ok_or_else(|| ConfigError("[convergence] section missing".into()))?;
    if conv.rows.is_empty() {
        return Err(Box::new(ConfigError("convergence: `rows` is empty".into())));
    }
    let flavor = cfg.flavor()?;
    cfg.check_global_guard(flavor)?;
    let (fine, _) = cfg.grids()?;
    let kappa = cfg.permeability(&fine)?;
    let source = cfg.source(&fine)?;
    let rows: Vec<[usize; 3]> = conv
        .rows
        .iter()
        .map(|&[j, n, l]| [j, n, cfg.row_layers(n, l)])
        .collect();
    write_manifest(
        out,
        "convergence",
        cfg,
        Resolved {
            rows: rows.clone(),
            ..Default::default()
        },
    )?;
    let cases = rows
        .iter()
        .map(|&[j, n, l]| StudyCase {
            selection: Selection::Fixed(j),
            coarse_n: n,
            layers: l,
            flavor,
        })
        .collect();
    let study = StudyConfig {
        fine,
        kappa,
        source,
        cases,
    };
    let result = convergence_study(&study)?;
    write_convergence_csv(&mut create(out, "convergence.csv")?, &result)?;
    let mut w = create(out, "residuals.csv")?;
    writeln!(w, "J,H,layers,mass_residual,div_residual,inf_sup,lambda")?;
    for r in &result {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            mixed_cem::metrics::selection_label(r.selection),
            num(r.coarse_h),
            r.layers,
            num(r.mass_residual),
            num(r.div_residual),
            num(r.inf_sup),
            num(r.lambda)
        )?;
    }
    for r in &result {
        println!(
            "H = {:<8} l = {}  e_p = {:.4e}  e_v = {:.4e}",
            r.coarse_h, r.layers, r.e_p, r.e_v
        );
    }
    Ok(())
}

pub fn cmd_decay(cfg: &RunConfig, out: &Path) -> CmdResult {
    let dc = cfg
        .decay
        .as_ref()
        .ok_or_else(|| ConfigError("[decay] section missing".into()))?;
    cfg.check_global_guard(mixed_cem::cembasis::Flavor::Global)?;
    let (disc, _) = discretization(cfg)?;
    let [ci, cj] = dc.element;
    if ci >= disc.coarse.n() || cj >= disc.coarse.n() {
        return Err(Box::new(mixed_cem::Error::Index(format!(
            "coarse element ({ci}, {cj})"
        ))));
    }
    let i = disc.coarse.element(ci, cj);
    write_manifest(out, "decay", cfg, Resolved::default())?;
    let mut summary = create(out, "decay_summary.csv")?;
    writeln!(summary, "J,rho,excluded_layers")?;
    for &j in &dc.basis {
        let aux = build_aux_space(&disc, Selection::Fixed(j))?;
        let profile = decay_study(&disc, &aux, i, dc.index, &dc.layers)?;
        write_decay_csv(&mut create(out, &format!("decay_J{j}.csv"))?, &profile)?;
        for r in &profile.rows {
            write_cells(
                &mut create(out, &format!("field_J{j}_l{}.csv", r.layers))?,
                &disc.fine,
                "value",
                &r.field,
            )?;
        }
        let excluded: Vec<String> = profile
            .rows
            .iter()
            .filter(|r| r.saturated)
            .map(|r| r.layers.to_string())
            .collect();
        if !excluded.is_empty() {
            eprintln!(
                "J = {j}: layers {} cover the domain and are excluded from the fit",
                excluded.join(" ")
            );
        }
        let rho = profile.rho.map(num).unwrap_or_default();
        writeln!(summary, "{j},{rho},{}", excluded.join(" "))?;
        println!(
            "J = {j}: rho = {}",
            profile
                .rho
                .map(|r| format!("{r:.4}"))
                .unwrap_or_else(|| "n/a".into())
        );
    }
    Ok(())
}

pub fn cmd_eigs(cfg: &RunConfig, out: &Path) -> CmdResult {
    let count = cfg.eigs.as_ref().map(|e| e.count).unwrap_or(4);
    let (disc, _) = discretization(cfg)?;
    let local = disc.coarse.ratio() * disc.coarse.ratio();
    let m = if count > local {
        eprintln!("warning: {count} eigenvalues requested, elements have {local}; clamped");
        local
    } else {
        count
    };
    write_manifest(out, "eigs", cfg, Resolved::default())?;
    let spectra = (0..disc.coarse.num_elements())
        .map(|i| solve_local_spectral_truncated(&disc, i, 0, false).map(|(_, l)| l))
        .collect::<Result<Vec<_>, _>>()?;
    write_eigen_report(&mut create(out, "eigs.csv")?, &spectra, m)?;
    Ok(())
}

pub fn cmd_gen_medium(cfg: &RunConfig, out: &Path) -> CmdResult {
    let (fine, _) = cfg.grids()?;
    let kappa = cfg.permeability(&fine)?;
    write_manifest(out, "gen-medium", cfg, Resolved::default())?;
    save_raster(&kappa, out.join("medium.txt"))?;
    println!("contrast {:.3e}", kappa.contrast());
    Ok(())
}
