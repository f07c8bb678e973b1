//! Uniform fine/coarse grid hierarchy on the unit square.
//!
//! Cells are numbered row-major from the bottom-left corner. Fine edges come
//! in two families: vertical edges (normal `+x`) followed by horizontal edges
//! (normal `+y`). A velocity field is a vector of normal components, one per
//! fine edge, in that order.

use crate::error::{Error, Result};

/// Fine partition of `[0,1]^2` into `n x n` square cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FineGrid {
    n: usize,
}

/// Orientation and position of a fine edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Edge {
    /// Edge on the line `x = i h`, spanning row `j`; normal `+x`.
    Vertical { i: usize, j: usize },
    /// Edge on the line `y = j h`, spanning column `i`; normal `+y`.
    Horizontal { i: usize, j: usize },
}

impl FineGrid {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::config(format!(
                "fine grid needs at least 2 cells per axis, got {n}"
            )));
        }
        Ok(Self { n })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    #[inline]
    pub fn num_cells(&self) -> usize {
        self.n * self.n
    }

    #[inline]
    pub fn num_vertical_edges(&self) -> usize {
        (self.n + 1) * self.n
    }

    #[inline]
    pub fn num_edges(&self) -> usize {
        2 * (self.n + 1) * self.n
    }

    #[inline]
    pub fn num_nodes(&self) -> usize {
        (self.n + 1) * (self.n + 1)
    }

    #[inline]
    pub fn cell(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.n && j < self.n);
        j * self.n + i
    }

    #[inline]
    pub fn cell_coords(&self, c: usize) -> (usize, usize) {
        (c % self.n, c / self.n)
    }

    pub fn cell_center(&self, c: usize) -> (f64, f64) {
        let (i, j) = self.cell_coords(c);
        let h = self.h();
        ((i as f64 + 0.5) * h, (j as f64 + 0.5) * h)
    }

    /// Cell containing the point; points on the upper boundary map to the last cell.
    pub fn locate(&self, x: f64, y: f64) -> usize {
        let clamp = |t: f64| ((t * self.n as f64).floor().max(0.0) as usize).min(self.n - 1);
        self.cell(clamp(x), clamp(y))
    }

    #[inline]
    pub fn vertical_edge(&self, i: usize, j: usize) -> usize {
        debug_assert!(i <= self.n && j < self.n);
        j * (self.n + 1) + i
    }

    #[inline]
    pub fn horizontal_edge(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.n && j <= self.n);
        self.num_vertical_edges() + j * self.n + i
    }

    pub fn edge(&self, e: usize) -> Edge {
        let nv = self.num_vertical_edges();
        if e < nv {
            Edge::Vertical {
                i: e % (self.n + 1),
                j: e / (self.n + 1),
            }
        } else {
            let k = e - nv;
            Edge::Horizontal {
                i: k % self.n,
                j: k / self.n,
            }
        }
    }

    /// Midpoint of an edge.
    pub fn edge_midpoint(&self, e: usize) -> (f64, f64) {
        let h = self.h();
        match self.edge(e) {
            Edge::Vertical { i, j } => (i as f64 * h, (j as f64 + 0.5) * h),
            Edge::Horizontal { i, j } => ((i as f64 + 0.5) * h, j as f64 * h),
        }
    }

    pub fn is_boundary_edge(&self, e: usize) -> bool {
        match self.edge(e) {
            Edge::Vertical { i, .. } => i == 0 || i == self.n,
            Edge::Horizontal { j, .. } => j == 0 || j == self.n,
        }
    }

    /// Edges of a cell as `[left, right, bottom, top]`.
    #[inline]
    pub fn cell_edges(&self, c: usize) -> [usize; 4] {
        let (i, j) = self.cell_coords(c);
        [
            self.vertical_edge(i, j),
            self.vertical_edge(i + 1, j),
            self.horizontal_edge(i, j),
            self.horizontal_edge(i, j + 1),
        ]
    }

    /// Cells sharing an edge (one for boundary edges).
    pub fn edge_cells(&self, e: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(2);
        match self.edge(e) {
            Edge::Vertical { i, j } => {
                if i > 0 {
                    out.push(self.cell(i - 1, j));
                }
                if i < self.n {
                    out.push(self.cell(i, j));
                }
            }
            Edge::Horizontal { i, j } => {
                if j > 0 {
                    out.push(self.cell(i, j - 1));
                }
                if j < self.n {
                    out.push(self.cell(i, j));
                }
            }
        }
        out
    }

    #[inline]
    pub fn node(&self, i: usize, j: usize) -> usize {
        j * (self.n + 1) + i
    }

    pub fn node_coords(&self, v: usize) -> (f64, f64) {
        let h = self.h();
        ((v % (self.n + 1)) as f64 * h, (v / (self.n + 1)) as f64 * h)
    }

    /// The whole domain as a cell box.
    pub fn full_box(&self) -> CellBox {
        CellBox {
            x0: 0,
            x1: self.n,
            y0: 0,
            y1: self.n,
        }
    }
}

/// Half-open rectangle of fine cells `[x0,x1) x [y0,y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CellBox {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

impl CellBox {
    #[inline]
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    #[inline]
    pub fn num_cells(&self) -> usize {
        self.width() * self.height()
    }

    #[inline]
    pub fn contains(&self, i: usize, j: usize) -> bool {
        i >= self.x0 && i < self.x1 && j >= self.y0 && j < self.y1
    }

    pub fn contains_box(&self, other: &CellBox) -> bool {
        other.x0 >= self.x0 && other.x1 <= self.x1 && other.y0 >= self.y0 && other.y1 <= self.y1
    }

    pub fn intersect(&self, other: &CellBox) -> Option<CellBox> {
        let b = CellBox {
            x0: self.x0.max(other.x0),
            x1: self.x1.min(other.x1),
            y0: self.y0.max(other.y0),
            y1: self.y1.min(other.y1),
        };
        (b.x0 < b.x1 && b.y0 < b.y1).then_some(b)
    }

    /// Global fine-cell indices, row-major inside the box.
    pub fn cells<'a>(&'a self, grid: &'a FineGrid) -> impl Iterator<Item = usize> + 'a {
        (self.y0..self.y1).flat_map(move |j| (self.x0..self.x1).map(move |i| grid.cell(i, j)))
    }

    /// Local (box-relative, row-major) index of a global cell inside the box.
    #[inline]
    pub fn local_cell(&self, i: usize, j: usize) -> usize {
        (j - self.y0) * self.width() + (i - self.x0)
    }
}

/// Coarse partition into `n x n` elements, each a block of `ratio x ratio` fine cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CoarseGrid {
    n: usize,
    ratio: usize,
}

impl CoarseGrid {
    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    /// Refinement ratio `r = nx / Nx`.
    #[inline]
    pub fn ratio(&self) -> usize {
        self.ratio
    }

    #[inline]
    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    #[inline]
    pub fn num_elements(&self) -> usize {
        self.n * self.n
    }

    #[inline]
    pub fn num_nodes(&self) -> usize {
        (self.n + 1) * (self.n + 1)
    }

    #[inline]
    pub fn element(&self, ci: usize, cj: usize) -> usize {
        cj * self.n + ci
    }

    #[inline]
    pub fn element_coords(&self, k: usize) -> (usize, usize) {
        (k % self.n, k / self.n)
    }

    pub fn element_box(&self, k: usize) -> CellBox {
        let (ci, cj) = self.element_coords(k);
        let r = self.ratio;
        CellBox {
            x0: ci * r,
            x1: (ci + 1) * r,
            y0: cj * r,
            y1: (cj + 1) * r,
        }
    }

    /// Element containing a fine cell.
    #[inline]
    pub fn element_of_cell(&self, fine: &FineGrid, c: usize) -> usize {
        let (i, j) = fine.cell_coords(c);
        self.element(i / self.ratio, j / self.ratio)
    }

    /// Fine cells of an element, row-major within the element.
    pub fn element_cells(&self, fine: &FineGrid, k: usize) -> Vec<usize> {
        self.element_box(k).cells(fine).collect()
    }

    pub fn check_element(&self, k: usize) -> Result<()> {
        if k >= self.num_elements() {
            return Err(Error::Index(format!(
                "coarse element {k} (grid has {})",
                self.num_elements()
            )));
        }
        Ok(())
    }

    /// `K_{i,l}`: element `i` grown by `layers` coarse layers in every direction,
    /// clipped to the domain.
    pub fn oversample_region(&self, i: usize, layers: usize) -> Result<Region> {
        self.check_element(i)?;
        let (ci, cj) = self.element_coords(i);
        let coarse = CoarseBox {
            x0: ci.saturating_sub(layers),
            x1: (ci + layers + 1).min(self.n),
            y0: cj.saturating_sub(layers),
            y1: (cj + layers + 1).min(self.n),
        };
        let r = self.ratio;
        let cells = CellBox {
            x0: coarse.x0 * r,
            x1: coarse.x1 * r,
            y0: coarse.y0 * r,
            y1: coarse.y1 * r,
        };
        Ok(Region {
            center: i,
            layers,
            coarse,
            cells,
        })
    }

    /// The whole domain as a region centred at element `i`.
    pub fn whole_domain(&self, i: usize) -> Region {
        let coarse = CoarseBox {
            x0: 0,
            x1: self.n,
            y0: 0,
            y1: self.n,
        };
        let cells = CellBox {
            x0: 0,
            x1: self.n * self.ratio,
            y0: 0,
            y1: self.n * self.ratio,
        };
        Region {
            center: i,
            layers: self.n,
            coarse,
            cells,
        }
    }

    /// Smallest layer count for which every oversampled region is all of the domain.
    pub fn saturating_layers(&self) -> usize {
        self.n - 1
    }
}

/// Builds the fine grid with `nx` cells per axis and the coarse grid with `ncoarse` elements per axis.
pub fn build_grids(nx: usize, ncoarse: usize) -> Result<(FineGrid, CoarseGrid)> {
    if ncoarse < 1 {
        return Err(Error::config(
            "coarse grid needs at least one element per axis",
        ));
    }
    let fine = FineGrid::new(nx)?;
    if !nx.is_multiple_of(ncoarse) {
        return Err(Error::config(format!(
            "fine cell count {nx} is not divisible by coarse element count {ncoarse}"
        )));
    }
    Ok((
        fine,
        CoarseGrid {
            n: ncoarse,
            ratio: nx / ncoarse,
        },
    ))
}

/// Half-open rectangle of coarse elements.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CoarseBox {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

impl CoarseBox {
    pub fn contains(&self, ci: usize, cj: usize) -> bool {
        ci >= self.x0 && ci < self.x1 && cj >= self.y0 && cj < self.y1
    }
}

/// Oversampled region `K_{i,l}`: a rectangle of whole coarse elements.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub center: usize,
    pub layers: usize,
    pub coarse: CoarseBox,
    pub cells: CellBox,
}

impl Region {
    /// Coarse elements contained in the region (the index set `L_i`).
    pub fn elements(&self, coarse: &CoarseGrid) -> Vec<usize> {
        let mut out = Vec::new();
        for cj in self.coarse.y0..self.coarse.y1 {
            for ci in self.coarse.x0..self.coarse.x1 {
                out.push(coarse.element(ci, cj));
            }
        }
        out
    }

    pub fn contains_element(&self, coarse: &CoarseGrid, k: usize) -> bool {
        let (ci, cj) = coarse.element_coords(k);
        self.coarse.contains(ci, cj)
    }

    pub fn is_whole_domain(&self, coarse: &CoarseGrid) -> bool {
        self.coarse.x0 == 0
            && self.coarse.y0 == 0
            && self.coarse.x1 == coarse.n
            && self.coarse.y1 == coarse.n
    }

    pub fn num_cells(&self) -> usize {
        self.cells.num_cells()
    }
}

/// Cutoff function `chi_i^{M,m}` as nodal values on the coarse grid.
#[derive(Clone, Debug)]
pub struct CutoffField {
    coarse: CoarseGrid,
    nodal: Vec<f64>,
}

impl CutoffField {
    pub fn nodal_values(&self) -> &[f64] {
        &self.nodal
    }

    /// Bilinear interpolation at a point.
    pub fn value_at(&self, x: f64, y: f64) -> f64 {
        let n = self.coarse.n;
        let (ci, xi) = coarse_local(x, n);
        let (cj, eta) = coarse_local(y, n);
        let v = |a: usize, b: usize| self.nodal[b * (n + 1) + a];
        v(ci, cj) * (1.0 - xi) * (1.0 - eta)
            + v(ci + 1, cj) * xi * (1.0 - eta)
            + v(ci, cj + 1) * (1.0 - xi) * eta
            + v(ci + 1, cj + 1) * xi * eta
    }

    /// Values at all fine nodes.
    pub fn fine_nodal(&self, fine: &FineGrid) -> Vec<f64> {
        (0..fine.num_nodes())
            .map(|v| {
                let (x, y) = fine.node_coords(v);
                self.value_at(x, y)
            })
            .collect()
    }

    /// Largest gradient magnitude over the coarse elements.
    pub fn max_gradient(&self) -> f64 {
        let n = self.coarse.n;
        let hc = self.coarse.h();
        let v = |a: usize, b: usize| self.nodal[b * (n + 1) + a];
        let mut g: f64 = 0.0;
        for cj in 0..n {
            for ci in 0..n {
                // gradient is bilinear in the element, extremal at the corners
                for (xi, eta) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)] {
                    let gx = ((v(ci + 1, cj) - v(ci, cj)) * (1.0 - eta)
                        + (v(ci + 1, cj + 1) - v(ci, cj + 1)) * eta)
                        / hc;
                    let gy = ((v(ci, cj + 1) - v(ci, cj)) * (1.0 - xi)
                        + (v(ci + 1, cj + 1) - v(ci + 1, cj)) * xi)
                        / hc;
                    g = g.max(gx.hypot(gy));
                }
            }
        }
        g
    }
}

fn coarse_local(t: f64, n: usize) -> (usize, f64) {
    let s = t * n as f64;
    let k = (s.floor().max(0.0) as usize).min(n - 1);
    (k, s - k as f64)
}

/// Builds `chi_i^{M,m}`: one on `K_{i,m}`, zero outside `K_{i,M}`, and a linear
/// ramp in the coarse layer index in between.
pub fn cutoff_field(
    coarse: &CoarseGrid,
    i: usize,
    outer: usize,
    inner: usize,
) -> Result<CutoffField> {
    coarse.check_element(i)?;
    if outer <= inner {
        return Err(Error::config(format!(
            "cutoff needs outer > inner layers, got M={outer}, m={inner}"
        )));
    }
    let n = coarse.n;
    let (ci, cj) = coarse.element_coords(i);
    let dist = |a: usize, lo: usize| -> usize {
        // distance from node index `a` to the closed node interval [lo, lo+1]
        if a < lo {
            lo - a
        } else {
            a.saturating_sub(lo + 1)
        }
    };
    let span = (outer - inner) as f64;
    let mut nodal = vec![0.0; (n + 1) * (n + 1)];
    for b in 0..=n {
        for a in 0..=n {
            let d = dist(a, ci).max(dist(b, cj));
            nodal[b * (n + 1) + a] = if d <= inner {
                1.0
            } else if d >= outer {
                0.0
            } else {
                (outer - d) as f64 / span
            };
        }
    }
    Ok(CutoffField {
        coarse: *coarse,
        nodal,
    })
}

/// Bilinear coarse hats sampled on the fine grid.
#[derive(Clone, Debug)]
pub struct PartitionOfUnity {
    fine: FineGrid,
    coarse: CoarseGrid,
    grad_sq_avg: Vec<f64>,
}

impl PartitionOfUnity {
    /// Nonzero hat values at a fine node as `(coarse node, value)` pairs.
    pub fn hats_at_node(&self, v: usize) -> Vec<(usize, f64)> {
        let (x, y) = self.fine.node_coords(v);
        self.hats_at(x, y)
    }

    pub fn hats_at(&self, x: f64, y: f64) -> Vec<(usize, f64)> {
        let n = self.coarse.n;
        let (ci, xi) = coarse_local(x, n);
        let (cj, eta) = coarse_local(y, n);
        let node = |a: usize, b: usize| b * (n + 1) + a;
        [
            (node(ci, cj), (1.0 - xi) * (1.0 - eta)),
            (node(ci + 1, cj), xi * (1.0 - eta)),
            (node(ci, cj + 1), (1.0 - xi) * eta),
            (node(ci + 1, cj + 1), xi * eta),
        ]
        .into_iter()
        .filter(|&(_, w)| w != 0.0)
        .collect()
    }

    /// `sum_j |grad chi_j|^2` at a point.
    pub fn grad_sq_sum_at(&self, x: f64, y: f64) -> f64 {
        let n = self.coarse.n;
        let (_, xi) = coarse_local(x, n);
        let (_, eta) = coarse_local(y, n);
        let hc = self.coarse.h();
        2.0 * ((1.0 - xi).powi(2) + xi * xi + (1.0 - eta).powi(2) + eta * eta) / (hc * hc)
    }

    /// Exact cell average of `sum_j |grad chi_j|^2` for every fine cell.
    pub fn grad_sq_cell_average(&self) -> &[f64] {
        &self.grad_sq_avg
    }
}

/// Mean of `(1-t)^2 + t^2` over `[a,b]`.
fn ramp_square_mean(a: f64, b: f64) -> f64 {
    let prim = |t: f64| (t.powi(3) - (1.0 - t).powi(3)) / 3.0;
    (prim(b) - prim(a)) / (b - a)
}

pub fn bilinear_pou(coarse: &CoarseGrid, fine: &FineGrid) -> PartitionOfUnity {
    let r = coarse.ratio as f64;
    let hc = coarse.h();
    let mut avg = vec![0.0; fine.num_cells()];
    for (c, a) in avg.iter_mut().enumerate() {
        let (i, j) = fine.cell_coords(c);
        let (li, lj) = ((i % coarse.ratio) as f64, (j % coarse.ratio) as f64);
        let gx = ramp_square_mean(li / r, (li + 1.0) / r);
        let gy = ramp_square_mean(lj / r, (lj + 1.0) / r);
        *a = 2.0 * (gx + gy) / (hc * hc);
    }
    PartitionOfUnity {
        fine: *fine,
        coarse: *coarse,
        grad_sq_avg: avg,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_counts() {
        let (f, c) = build_grids(4, 2).unwrap();
        assert_eq!(c.ratio(), 2);
        assert_eq!(c.num_elements(), 4);
        assert_eq!(c.num_nodes(), 9);
        assert_eq!(f.num_edges(), 40);

        let (f, c) = build_grids(256, 8).unwrap();
        assert_eq!(c.h(), 1.0 / 8.0);
        assert_eq!(c.ratio(), 32);
        assert_eq!(c.num_elements(), 64);
        assert_eq!(f.h() * 256.0, 1.0);
    }

    #[test]
    fn indivisible_ratio_rejected() {
        assert!(matches!(build_grids(6, 4), Err(Error::Config(_))));
        assert!(build_grids(1, 1).is_err());
    }

    #[test]
    fn cell_and_edge_round_trips() {
        let f = FineGrid::new(5).unwrap();
        for c in 0..f.num_cells() {
            let (i, j) = f.cell_coords(c);
            assert_eq!(f.cell(i, j), c);
            let (x, y) = f.cell_center(c);
            assert_eq!(f.locate(x, y), c);
        }
        let mut shared = vec![0usize; f.num_edges()];
        for c in 0..f.num_cells() {
            for e in f.cell_edges(c) {
                shared[e] += 1;
            }
        }
        for (e, &count) in shared.iter().enumerate() {
            let expect = if f.is_boundary_edge(e) { 1 } else { 2 };
            assert_eq!(count, expect, "edge {e}");
            assert_eq!(f.edge_cells(e).len(), expect);
        }
    }

    #[test]
    fn oversampling_shapes() {
        let (_, c) = build_grids(64, 8).unwrap();
        let r = c.oversample_region(c.element(4, 4), 2).unwrap();
        assert_eq!(
            (r.coarse.x1 - r.coarse.x0, r.coarse.y1 - r.coarse.y0),
            (5, 5)
        );
        let r = c.oversample_region(0, 2).unwrap();
        assert_eq!(
            (r.coarse.x1 - r.coarse.x0, r.coarse.y1 - r.coarse.y0),
            (3, 3)
        );
        let r = c.oversample_region(c.element(3, 5), 7).unwrap();
        assert!(r.is_whole_domain(&c));
        assert_eq!(c.oversample_region(27, 0).unwrap().cells, c.element_box(27));
        assert!(c.oversample_region(64, 1).is_err());
    }

    #[test]
    fn cutoff_plateaus_and_midline() {
        let (f, c) = build_grids(32, 8).unwrap();
        let i = c.element(3, 4);
        let chi = cutoff_field(&c, i, 3, 1).unwrap();
        let inner = c.oversample_region(i, 1).unwrap().cells;
        let outer = c.oversample_region(i, 3).unwrap().cells;
        let h = f.h();
        for v in 0..f.num_nodes() {
            let (x, y) = f.node_coords(v);
            let val = chi.value_at(x, y);
            assert!((0.0..=1.0).contains(&val));
            let inside = |b: &CellBox| {
                x >= b.x0 as f64 * h
                    && x <= b.x1 as f64 * h
                    && y >= b.y0 as f64 * h
                    && y <= b.y1 as f64 * h
            };
            if inside(&inner) {
                assert_eq!(val, 1.0);
            }
            if !inside(&outer) {
                assert_eq!(val, 0.0);
            }
        }
        assert!(chi.max_gradient() <= 2.0 / c.h());

        let chi = cutoff_field(&c, i, 1, 0).unwrap();
        // midline of the single-layer annulus, left of K_i
        let x = (3.0 - 0.5) * c.h();
        let y = (4.0 + 0.5) * c.h();
        assert!((chi.value_at(x, y) - 0.5).abs() < 1e-14);
        assert!(cutoff_field(&c, i, 1, 1).is_err());
    }

    #[test]
    fn pou_sums_to_one() {
        let (f, c) = build_grids(12, 3).unwrap();
        let pou = bilinear_pou(&c, &f);
        for v in 0..f.num_nodes() {
            let s: f64 = pou.hats_at_node(v).iter().map(|&(_, w)| w).sum();
            assert!((s - 1.0).abs() <= 1e-14);
        }
        assert!(pou.grad_sq_cell_average().iter().all(|&g| g > 0.0));
    }

    #[test]
    fn grad_sq_at_center_of_single_element() {
        let (f, c) = build_grids(2, 1).unwrap();
        let pou = bilinear_pou(&c, &f);
        assert!((pou.grad_sq_sum_at(0.5, 0.5) - 2.0).abs() < 1e-15);
        let (x, y): (f64, f64) = (0.3, 0.8);
        let expect = 2.0 * ((1.0 - x).powi(2) + x * x + (1.0 - y).powi(2) + y * y);
        assert!((pou.grad_sq_sum_at(x, y) - expect).abs() < 1e-14);
    }
}
