//! Run configuration: a TOML file of `key = value` pairs in sections.

use std::path::{Path, PathBuf};

use mixed_cem::auxspace::Selection;
use mixed_cem::cembasis::Flavor;
use mixed_cem::fem::SourceSpec;
use mixed_cem::medium::{
    generate_medium, load_raster, log_uniform_field, three_channel_preset, PermField,
};
use mixed_cem::mesh::{build_grids, CoarseGrid, FineGrid};
use mixed_cem::metrics::auto_layers;
use serde::{Deserialize, Serialize};

/// The only environment variable consulted: overrides the output directory.
pub const OUT_ENV: &str = "MIXED_CEM_OUT";

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; all cores when absent.
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub grid: GridConfig,
    #[serde(default)]
    pub medium: MediumConfig,
    #[serde(default)]
    pub method: MethodConfig,
    #[serde(default)]
    pub source: SourceConfig,
    pub convergence: Option<ConvergenceConfig>,
    pub decay: Option<DecayConfig>,
    pub eigs: Option<EigsConfig>,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub nx: usize,
    pub coarse: usize,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize, PartialEq)]
#[serde(rename_all = "kebab-case")]
pub enum MediumKind {
    #[default]
    Uniform,
    ThreeChannel,
    LogUniform,
    Raster,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MediumConfig {
    #[serde(default)]
    pub kind: MediumKind,
    pub contrast: Option<f64>,
    /// Raster file, relative paths resolved against the config file.
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(untagged)]
pub enum Layers {
    Fixed(usize),
    Rule(String),
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    #[serde(default = "default_flavor")]
    pub flavor: String,
    /// Eigenvectors per element.
    pub basis: Option<usize>,
    /// Alternatively, every eigenvalue below `tau`.
    pub tau: Option<f64>,
    /// A count, or `"auto"` for the logarithmic rule.
    pub layers: Option<Layers>,
    #[serde(default = "default_l0")]
    pub auto_l0: usize,
    #[serde(default = "default_h0")]
    pub auto_h0: f64,
    /// The global flavor is refused above this fine grid size.
    #[serde(default = "default_global_limit")]
    pub max_global_nx: usize,
}

fn default_flavor() -> String {
    "type2".into()
}

fn default_l0() -> usize {
    3
}

fn default_h0() -> f64 {
    0.125
}

fn default_global_limit() -> usize {
    64
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            flavor: default_flavor(),
            basis: None,
            tau: None,
            layers: None,
            auto_l0: default_l0(),
            auto_h0: default_h0(),
            max_global_nx: default_global_limit(),
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize, Serialize, PartialEq)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    #[default]
    Corners,
    Manufactured,
    Coarse,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    #[serde(default)]
    pub kind: SourceKind,
    /// Partition size for `coarse` sources.
    pub n: Option<usize>,
    pub values: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    /// `[J, Nx, layers]` triples; `layers = 0` selects the auto rule.
    pub rows: Vec<[usize; 3]>,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DecayConfig {
    /// Coarse element `[ci, cj]`.
    pub element: [usize; 2],
    #[serde(default)]
    pub index: usize,
    pub layers: Vec<usize>,
    /// One profile per basis count.
    pub basis: Vec<usize>,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EigsConfig {
    #[serde(default = "default_eig_count")]
    pub count: usize,
}

fn default_eig_count() -> usize {
    4
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| bad(e.to_string()))
    }

    /// Reads a config; relative raster paths become relative to its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        if let (Some(p), Some(dir)) = (cfg.medium.path.as_mut(), path.parent()) {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn grids(&self) -> Result<(FineGrid, CoarseGrid), ConfigError> {
        build_grids(self.grid.nx, self.grid.coarse).map_err(|e| bad(e.to_string()))
    }

    pub fn flavor(&self) -> Result<Flavor, ConfigError> {
        self.method
            .flavor
            .parse()
            .map_err(|e: mixed_cem::Error| bad(e.to_string()))
    }

    pub fn selection(&self) -> Result<Selection, ConfigError> {
        match (self.method.basis, self.method.tau) {
            (Some(j), None) => Ok(Selection::Fixed(j)),
            (None, Some(t)) if t > 0.0 => Ok(Selection::Threshold(t)),
            (None, None) => Err(bad("method: set `basis` or `tau`")),
            (Some(_), Some(_)) => Err(bad("method: `basis` and `tau` are exclusive")),
            (None, Some(t)) => Err(bad(format!("method: tau must be positive, got {t}"))),
        }
    }

    /// Oversampling layers for a coarse grid of `n x n` elements.
    pub fn layers_for(&self, n: usize) -> Result<usize, ConfigError> {
        match &self.method.layers {
            Some(Layers::Fixed(l)) => Ok(*l),
            Some(Layers::Rule(r)) if r == "auto" => Ok(self.auto(n)),
            Some(Layers::Rule(r)) => Err(bad(format!(
                "method: layers must be a count or \"auto\", got {r:?}"
            ))),
            None => Err(bad("method: `layers` missing")),
        }
    }

    fn auto(&self, n: usize) -> usize {
        auto_layers(self.method.auto_l0, self.method.auto_h0, 1.0 / n as f64)
    }

    /// Row layers for a convergence triple, `0` meaning the auto rule.
    pub fn row_layers(&self, n: usize, l: usize) -> usize {
        if l == 0 {
            self.auto(n)
        } else {
            l
        }
    }

    pub fn check_global_guard(&self, flavor: Flavor) -> Result<(), ConfigError> {
        if flavor == Flavor::Global && self.grid.nx > self.method.max_global_nx {
            return Err(bad(format!(
                "global flavor refused on a {0}x{0} fine grid (limit max_global_nx = {1})",
                self.grid.nx, self.method.max_global_nx
            )));
        }
        Ok(())
    }

    pub fn permeability(&self, fine: &FineGrid) -> Result<PermField, Box<dyn std::error::Error>> {
        let contrast = || {
            self.medium
                .contrast
                .ok_or_else(|| bad("medium: `contrast` missing"))
        };
        let k = match self.medium.kind {
            MediumKind::Uniform => PermField::uniform(fine),
            MediumKind::ThreeChannel => {
                generate_medium(&three_channel_preset(contrast()?, self.seed), fine)?
            }
            MediumKind::LogUniform => log_uniform_field(fine, contrast()?, self.seed),
            MediumKind::Raster => {
                let path = self
                    .medium
                    .path
                    .as_ref()
                    .ok_or_else(|| bad("medium: `path` missing for raster"))?;
                if !path.exists() {
                    return Err(Box::new(bad(format!(
                        "medium file {} does not exist",
                        path.display()
                    ))));
                }
                load_raster(path)?
            }
        };
        k.check_grid(fine)?;
        Ok(k)
    }

    pub fn source(&self, fine: &FineGrid) -> Result<Vec<f64>, mixed_cem::Error> {
        let spec = match self.source.kind {
            SourceKind::Corners => SourceSpec::Corners,
            SourceKind::Manufactured => SourceSpec::Manufactured,
            SourceKind::Coarse => SourceSpec::CoarseCells {
                n: self.source.n.unwrap_or(0),
                values: self.source.values.clone().unwrap_or_default(),
            },
        };
        spec.expand(fine)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str =
        "seed = 3\n[grid]\nnx = 16\ncoarse = 4\n[method]\nbasis = 2\nlayers = \"auto\"\n";

    #[test]
    fn parses_sections_and_defaults() {
        let c = RunConfig::parse(BASE).unwrap();
        assert_eq!(c.grid, GridConfig { nx: 16, coarse: 4 });
        assert_eq!(c.method.flavor, "type2");
        assert_eq!(c.selection().unwrap(), Selection::Fixed(2));
        assert_eq!(c.layers_for(8).unwrap(), 3);
        assert_eq!(c.layers_for(16).unwrap(), 4);
        assert_eq!(c.source.kind, SourceKind::Corners);
    }

    #[test]
    fn rejects_unknown_keys() {
        let e = RunConfig::parse(&format!("{BASE}colour = 1\n")).unwrap_err();
        assert!(e.0.contains("colour"), "{e}");
    }

    #[test]
    fn guard_refuses_large_global_runs() {
        let mut c = RunConfig::parse(BASE).unwrap();
        c.grid.nx = 128;
        assert!(c.check_global_guard(Flavor::Global).is_err());
        assert!(c.check_global_guard(Flavor::Type2).is_ok());
    }
}
