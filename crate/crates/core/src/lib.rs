//! Constraint energy minimizing multiscale mixed finite elements for Darcy flow
//! in high-contrast media.
//!
//! The fine problem is the lowest-order mixed discretization of
//! `div v = f`, `kappa^{-1} v = -grad p` on the unit square with no-flow
//! boundaries. Per coarse element a spectral problem yields an auxiliary
//! pressure space; velocity basis functions minimize energy on oversampled
//! regions subject to that space, and the coarse solve is exactly mass
//! conservative on every coarse element.

pub mod auxspace;
pub mod cembasis;
pub mod coarse;
pub mod error;
pub mod fem;
pub mod medium;
pub mod mesh;
pub mod metrics;
pub mod sparse;

pub use error::{Error, Result};

use medium::{compute_weight, PermField, WeightField};
use mesh::{bilinear_pou, CoarseGrid, FineGrid};

/// Grids, permeability and the derived weight `kappa~`.
#[derive(Clone, Debug)]
pub struct Discretization {
    pub fine: FineGrid,
    pub coarse: CoarseGrid,
    pub kappa: PermField,
    pub weight: WeightField,
}

impl Discretization {
    pub fn new(fine: FineGrid, coarse: CoarseGrid, kappa: PermField) -> Result<Self> {
        kappa.check_grid(&fine)?;
        if coarse.n() * coarse.ratio() != fine.n() {
            return Err(Error::Dimension(
                "coarse grid does not partition the fine grid".into(),
            ));
        }
        let weight = compute_weight(&kappa, &bilinear_pou(&coarse, &fine))?;
        Ok(Self {
            fine,
            coarse,
            kappa,
            weight,
        })
    }

    /// `kappa~_c h^2` for every fine cell: the diagonal of `s(., .)`.
    pub fn s_diag(&self) -> Vec<f64> {
        let h2 = self.fine.h() * self.fine.h();
        self.weight.values().iter().map(|w| w * h2).collect()
    }
}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/grids.md")]
    mod grids {}
    #[doc = include_str!("../../../book/src/fine.md")]
    mod fine {}
    #[doc = include_str!("../../../book/src/auxiliary.md")]
    mod auxiliary {}
    #[doc = include_str!("../../../book/src/basis.md")]
    mod basis {}
    #[doc = include_str!("../../../book/src/coarse.md")]
    mod coarse {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
