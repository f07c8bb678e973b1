//! Lowest-order mixed discretization on the fine grid.
//!
//! Velocities are normal components on fine edges (one per edge, oriented
//! `+x` / `+y`), pressures are cell constants. On a rectangle of cells only the
//! interior edges carry unknowns, so every field built there has zero normal
//! flux on the rectangle's boundary.

use faer::prelude::*;
use faer::Side;

use crate::error::{Error, Result};
use crate::medium::{PermField, WeightField};
use crate::mesh::{CellBox, Edge, FineGrid};
use crate::sparse::{SymmetricBuilder, SymmetricFactor};

/// Interior-edge numbering of a cell box: vertical edges first, then horizontal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VelocityDofMap {
    pub cells: CellBox,
    grid: FineGrid,
}

impl VelocityDofMap {
    pub fn new(grid: &FineGrid, cells: CellBox) -> Self {
        Self { cells, grid: *grid }
    }

    #[inline]
    fn num_vertical(&self) -> usize {
        (self.cells.width() - 1) * self.cells.height()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.num_vertical() + self.cells.width() * (self.cells.height() - 1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn num_cells(&self) -> usize {
        self.cells.num_cells()
    }

    /// Local dof of the vertical edge at `(i, j)`, if interior to the box.
    #[inline]
    pub fn vertical(&self, i: usize, j: usize) -> Option<usize> {
        let b = &self.cells;
        (i > b.x0 && i < b.x1 && j >= b.y0 && j < b.y1)
            .then(|| (j - b.y0) * (b.width() - 1) + (i - b.x0 - 1))
    }

    /// Local dof of the horizontal edge at `(i, j)`, if interior to the box.
    #[inline]
    pub fn horizontal(&self, i: usize, j: usize) -> Option<usize> {
        let b = &self.cells;
        (i >= b.x0 && i < b.x1 && j > b.y0 && j < b.y1)
            .then(|| self.num_vertical() + (j - b.y0 - 1) * b.width() + (i - b.x0))
    }

    /// Local dofs of a cell's `[left, right, bottom, top]` edges.
    #[inline]
    pub fn cell_dofs(&self, i: usize, j: usize) -> [Option<usize>; 4] {
        [
            self.vertical(i, j),
            self.vertical(i + 1, j),
            self.horizontal(i, j),
            self.horizontal(i, j + 1),
        ]
    }

    /// Global edge index of a local dof.
    pub fn global(&self, k: usize) -> usize {
        let b = &self.cells;
        let nv = self.num_vertical();
        if k < nv {
            let w = b.width() - 1;
            self.grid.vertical_edge(b.x0 + 1 + k % w, b.y0 + k / w)
        } else {
            let k = k - nv;
            self.grid
                .horizontal_edge(b.x0 + k % b.width(), b.y0 + 1 + k / b.width())
        }
    }

    pub fn local(&self, edge: usize) -> Option<usize> {
        match self.grid.edge(edge) {
            crate::mesh::Edge::Vertical { i, j } => self.vertical(i, j),
            crate::mesh::Edge::Horizontal { i, j } => self.horizontal(i, j),
        }
    }

    /// Embeds local dof values into a vector over all fine edges.
    pub fn scatter(&self, local: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.num_edges()];
        for (k, &v) in local.iter().enumerate() {
            out[self.global(k)] = v;
        }
        out
    }

    pub fn gather(&self, global: &[f64]) -> Vec<f64> {
        (0..self.len()).map(|k| global[self.global(k)]).collect()
    }

    /// Global cell index of each local cell (row-major inside the box).
    pub fn cell_indices(&self) -> Vec<usize> {
        self.cells.cells(&self.grid).collect()
    }
}

/// Which dof spaces an operator maps between.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Space {
    Velocity,
    Pressure,
}

/// Sparse operator in coordinate form, duplicates already summed.
#[derive(Clone, Debug)]
pub struct Operator {
    pub rows: usize,
    pub cols: usize,
    pub row_space: Space,
    pub col_space: Space,
    pub entries: Vec<(usize, usize, f64)>,
}

impl Operator {
    fn from_entries(
        rows: usize,
        cols: usize,
        row_space: Space,
        col_space: Space,
        mut e: Vec<(usize, usize, f64)>,
    ) -> Self {
        e.sort_by_key(|&(r, c, _)| (r, c));
        let mut entries: Vec<(usize, usize, f64)> = Vec::with_capacity(e.len());
        for (r, c, v) in e {
            match entries.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += v,
                _ => entries.push((r, c, v)),
            }
        }
        Self {
            rows,
            cols,
            row_space,
            col_space,
            entries,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.rows];
        for &(r, c, v) in &self.entries {
            y[r] += v * x[c];
        }
        y
    }

    pub fn apply_transpose(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.cols];
        for &(r, c, v) in &self.entries {
            y[c] += v * x[r];
        }
        y
    }

    pub fn to_dense(&self) -> Mat<f64> {
        let mut m = Mat::zeros(self.rows, self.cols);
        for &(r, c, v) in &self.entries {
            m[(r, c)] += v;
        }
        m
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.entries
            .binary_search_by_key(&(r, c), |&(a, b, _)| (a, b))
            .map(|k| self.entries[k].2)
            .unwrap_or(0.0)
    }

    /// Exact structural and numerical symmetry.
    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols && self.entries.iter().all(|&(r, c, v)| self.get(c, r) == v)
    }
}

/// Per-cell contributions of the lowest-order edge mass matrix:
/// `h^2/(3 kappa)` on the diagonal, `h^2/(6 kappa)` between opposite edges.
#[inline]
fn cell_mass(h: f64, kappa: f64) -> (f64, f64) {
    let m = h * h / kappa;
    (m / 3.0, m / 6.0)
}

/// Velocity mass matrix `a(v, w) = (kappa^{-1} v, w)` on the interior edges of `cells`.
pub fn assemble_a(grid: &FineGrid, kappa: &PermField, cells: &CellBox) -> Operator {
    let map = VelocityDofMap::new(grid, *cells);
    let h = grid.h();
    let mut e = Vec::with_capacity(cells.num_cells() * 8);
    for j in cells.y0..cells.y1 {
        for i in cells.x0..cells.x1 {
            let (d, o) = cell_mass(h, kappa.get(grid.cell(i, j)));
            let [l, r, b, t] = map.cell_dofs(i, j);
            for (p, q) in [(l, r), (b, t)] {
                for x in [p, q].into_iter().flatten() {
                    e.push((x, x, d));
                }
                if let (Some(p), Some(q)) = (p, q) {
                    e.push((p, q, o));
                    e.push((q, p, o));
                }
            }
        }
    }
    Operator::from_entries(map.len(), map.len(), Space::Velocity, Space::Velocity, e)
}

/// `b(v, q) = (div v, q)`: rows are the box's cells, columns its interior edges.
pub fn assemble_b(grid: &FineGrid, cells: &CellBox) -> Operator {
    let map = VelocityDofMap::new(grid, *cells);
    let h = grid.h();
    let mut e = Vec::with_capacity(cells.num_cells() * 4);
    for j in cells.y0..cells.y1 {
        for i in cells.x0..cells.x1 {
            let row = cells.local_cell(i, j);
            let [l, r, b, t] = map.cell_dofs(i, j);
            for (dof, sign) in [(l, -1.0), (r, 1.0), (b, -1.0), (t, 1.0)] {
                if let Some(d) = dof {
                    e.push((row, d, sign * h));
                }
            }
        }
    }
    Operator::from_entries(
        map.num_cells(),
        map.len(),
        Space::Pressure,
        Space::Velocity,
        e,
    )
}

/// Diagonal `s(p, q) = (kappa~ p, q)` on the box's cells.
pub fn assemble_s(grid: &FineGrid, weight: &WeightField, cells: &CellBox) -> Operator {
    let h2 = grid.h() * grid.h();
    let e = cells
        .cells(grid)
        .enumerate()
        .map(|(k, c)| (k, k, weight.get(c) * h2))
        .collect();
    let n = cells.num_cells();
    Operator::from_entries(n, n, Space::Pressure, Space::Pressure, e)
}

/// `y = A v` for a field on all fine edges, boundary edges included, over the
/// cells of `cells`.
pub fn apply_mass(grid: &FineGrid, kappa: &PermField, cells: &CellBox, v: &[f64]) -> Vec<f64> {
    let h = grid.h();
    let mut y = vec![0.0; grid.num_edges()];
    for c in cells.cells(grid) {
        let (d, o) = cell_mass(h, kappa.get(c));
        let [l, r, b, t] = grid.cell_edges(c);
        y[l] += d * v[l] + o * v[r];
        y[r] += d * v[r] + o * v[l];
        y[b] += d * v[b] + o * v[t];
        y[t] += d * v[t] + o * v[b];
    }
    y
}

/// `integral over each cell of div v`, for a field on all fine edges.
pub fn cell_flux(grid: &FineGrid, v: &[f64]) -> Vec<f64> {
    let h = grid.h();
    (0..grid.num_cells())
        .map(|c| {
            let [l, r, b, t] = grid.cell_edges(c);
            h * (v[r] - v[l] + v[t] - v[b])
        })
        .collect()
}

/// Cell-wise divergence (flux balance divided by cell area).
pub fn divergence(grid: &FineGrid, v: &[f64]) -> Vec<f64> {
    let h2 = grid.h() * grid.h();
    cell_flux(grid, v).into_iter().map(|f| f / h2).collect()
}

/// Lowest-order reconstruction evaluated at a point.
pub fn eval_velocity(grid: &FineGrid, v: &[f64], x: f64, y: f64) -> (f64, f64) {
    let c = grid.locate(x, y);
    let (i, j) = grid.cell_coords(c);
    let h = grid.h();
    let xi = (x / h - i as f64).clamp(0.0, 1.0);
    let eta = (y / h - j as f64).clamp(0.0, 1.0);
    let [l, r, b, t] = grid.cell_edges(c);
    (
        (1.0 - xi) * v[l] + xi * v[r],
        (1.0 - eta) * v[b] + eta * v[t],
    )
}

/// Cell averages of the lowest-order reconstruction.
pub fn cell_average_velocity(grid: &FineGrid, v: &[f64]) -> Vec<(f64, f64)> {
    (0..grid.num_cells())
        .map(|c| {
            let [l, r, b, t] = grid.cell_edges(c);
            (0.5 * (v[l] + v[r]), 0.5 * (v[b] + v[t]))
        })
        .collect()
}

/// Velocity field supported on a cell box, stored on all edges of the box
/// (vertical edges row by row, then horizontal edges).
#[derive(Clone, Debug, PartialEq)]
pub struct BoxField {
    pub cells: CellBox,
    pub values: Vec<f64>,
}

impl BoxField {
    pub fn zeros(cells: CellBox) -> Self {
        let (w, ht) = (cells.width(), cells.height());
        Self {
            cells,
            values: vec![0.0; (w + 1) * ht + w * (ht + 1)],
        }
    }

    #[inline]
    fn num_vertical(&self) -> usize {
        (self.cells.width() + 1) * self.cells.height()
    }

    #[inline]
    pub fn vertical(&self, i: usize, j: usize) -> usize {
        (j - self.cells.y0) * (self.cells.width() + 1) + (i - self.cells.x0)
    }

    #[inline]
    pub fn horizontal(&self, i: usize, j: usize) -> usize {
        self.num_vertical() + (j - self.cells.y0) * self.cells.width() + (i - self.cells.x0)
    }

    /// Box-layout indices of a cell's `[left, right, bottom, top]` edges.
    #[inline]
    fn cell_edges(&self, i: usize, j: usize) -> [usize; 4] {
        [
            self.vertical(i, j),
            self.vertical(i + 1, j),
            self.horizontal(i, j),
            self.horizontal(i, j + 1),
        ]
    }

    pub fn from_local(map: &VelocityDofMap, local: &[f64]) -> Self {
        let b = map.cells;
        let mut out = Self::zeros(b);
        for j in b.y0..b.y1 {
            for i in b.x0 + 1..b.x1 {
                let k = out.vertical(i, j);
                out.values[k] = local[map.vertical(i, j).unwrap()];
            }
        }
        for j in b.y0 + 1..b.y1 {
            for i in b.x0..b.x1 {
                let k = out.horizontal(i, j);
                out.values[k] = local[map.horizontal(i, j).unwrap()];
            }
        }
        out
    }

    pub fn from_global(grid: &FineGrid, cells: CellBox, v: &[f64]) -> Self {
        let mut out = Self::zeros(cells);
        for j in cells.y0..cells.y1 {
            for i in cells.x0..=cells.x1 {
                let k = out.vertical(i, j);
                out.values[k] = v[grid.vertical_edge(i, j)];
            }
        }
        for j in cells.y0..=cells.y1 {
            for i in cells.x0..cells.x1 {
                let k = out.horizontal(i, j);
                out.values[k] = v[grid.horizontal_edge(i, j)];
            }
        }
        out
    }

    /// Adds `a * self` into a vector over all fine edges.
    pub fn add_to_global(&self, grid: &FineGrid, a: f64, out: &mut [f64]) {
        let b = self.cells;
        for j in b.y0..b.y1 {
            for i in b.x0..=b.x1 {
                out[grid.vertical_edge(i, j)] += a * self.values[self.vertical(i, j)];
            }
        }
        for j in b.y0..=b.y1 {
            for i in b.x0..b.x1 {
                out[grid.horizontal_edge(i, j)] += a * self.values[self.horizontal(i, j)];
            }
        }
    }

    pub fn to_global(&self, grid: &FineGrid) -> Vec<f64> {
        let mut out = vec![0.0; grid.num_edges()];
        self.add_to_global(grid, 1.0, &mut out);
        out
    }

    /// `A v` restricted to the edges of the box (exact when `v` vanishes outside it).
    pub fn apply_mass(&self, grid: &FineGrid, kappa: &PermField) -> BoxField {
        let h = grid.h();
        let mut y = Self::zeros(self.cells);
        for j in self.cells.y0..self.cells.y1 {
            for i in self.cells.x0..self.cells.x1 {
                let (d, o) = cell_mass(h, kappa.get(grid.cell(i, j)));
                let [l, r, b, t] = self.cell_edges(i, j);
                let v = &self.values;
                y.values[l] += d * v[l] + o * v[r];
                y.values[r] += d * v[r] + o * v[l];
                y.values[b] += d * v[b] + o * v[t];
                y.values[t] += d * v[t] + o * v[b];
            }
        }
        y
    }

    /// Euclidean product over the edges the two boxes share.
    pub fn dot(&self, other: &BoxField) -> f64 {
        let (a, b) = (&self.cells, &other.cells);
        let (x0, x1, y0, y1) = (
            a.x0.max(b.x0),
            a.x1.min(b.x1),
            a.y0.max(b.y0),
            a.y1.min(b.y1),
        );
        if x0 > x1 || y0 > y1 {
            return 0.0;
        }
        let mut s = 0.0;
        for j in y0..y1 {
            let (p, q) = (self.vertical(x0, j), other.vertical(x0, j));
            let n = x1 - x0 + 1;
            s += self.values[p..p + n]
                .iter()
                .zip(&other.values[q..q + n])
                .map(|(u, v)| u * v)
                .sum::<f64>();
        }
        if x1 > x0 {
            for j in y0..=y1 {
                let (p, q) = (self.horizontal(x0, j), other.horizontal(x0, j));
                let n = x1 - x0;
                s += self.values[p..p + n]
                    .iter()
                    .zip(&other.values[q..q + n])
                    .map(|(u, v)| u * v)
                    .sum::<f64>();
            }
        }
        s
    }

    /// Flux balance `integral of div v` on each cell of the box (box-local order).
    pub fn cell_flux(&self, h: f64) -> Vec<f64> {
        let b = self.cells;
        let mut out = Vec::with_capacity(b.num_cells());
        for j in b.y0..b.y1 {
            for i in b.x0..b.x1 {
                let [l, r, bo, t] = self.cell_edges(i, j);
                out.push(h * (self.values[r] - self.values[l] + self.values[t] - self.values[bo]));
            }
        }
        out
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// Sparse pressure-side columns on a box's cells, as `(local cell, value)` lists.
#[derive(Clone, Debug, Default)]
pub struct PressureColumns {
    pub cols: Vec<Vec<(usize, f64)>>,
}

impl PressureColumns {
    pub fn len(&self) -> usize {
        self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cols.is_empty()
    }

    /// `W^T q`.
    pub fn dot(&self, q: &[f64]) -> Vec<f64> {
        self.cols
            .iter()
            .map(|c| c.iter().map(|&(k, w)| w * q[k]).sum())
            .collect()
    }

    /// `W z` as a dense vector of length `n`.
    pub fn combine(&self, z: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for (c, &zk) in self.cols.iter().zip(z) {
            for &(k, w) in c {
                out[k] += w * zk;
            }
        }
        out
    }
}

/// How the auxiliary columns `W = S R` enter the pressure equations.
#[derive(Clone, Copy, Debug)]
pub enum Coupling<'a> {
    None,
    /// Adds `s(pi q, pi q')` through unknowns `z = W^T q`.
    Penalty(&'a PressureColumns),
    /// Adds a multiplier `mu` with `B v - W mu = g` and `W^T q = c`.
    Constraint(&'a PressureColumns),
}

/// Symmetric indefinite mixed system on a cell box.
///
/// In the caller's sign convention the unknowns `(v, q, y)` satisfy
/// `A v - B^T q = r_v` and, depending on the coupling,
///
/// * none: `B v = r_q`, with `q` of zero mean when the mean row is present;
/// * penalty: `B v + W W^T q = r_q` (`y = W^T q`);
/// * constraint: `B v - W y = r_q`, `W^T q = r_y`.
///
/// Internally the pressure is negated, which makes the matrix symmetric with
/// pivot signs `+` (velocity), `-` (pressure), `+` (auxiliary and mean rows).
#[derive(Clone, Debug)]
pub struct SaddleSystem {
    pub map: VelocityDofMap,
    naux: usize,
    mean: bool,
    coupling_kind: u8,
    builder: SymmetricBuilder,
}

/// Solution blocks in the caller's sign convention.
#[derive(Clone, Debug, PartialEq)]
pub struct SaddleSolution {
    /// Local interior-edge values.
    pub velocity: Vec<f64>,
    /// Local cell values.
    pub pressure: Vec<f64>,
    pub aux: Vec<f64>,
}

impl SaddleSystem {
    pub fn new(
        grid: &FineGrid,
        kappa: &PermField,
        cells: &CellBox,
        coupling: Coupling<'_>,
        mean: bool,
    ) -> Self {
        let map = VelocityDofMap::new(grid, *cells);
        let (nv, np) = (map.len(), map.num_cells());
        let (naux, kind) = match coupling {
            Coupling::None => (0, 0),
            Coupling::Penalty(w) => (w.len(), 1),
            Coupling::Constraint(w) => (w.len(), 2),
        };
        let dim = nv + np + naux + usize::from(mean);
        let mut signs = vec![1i8; dim];
        signs[nv..nv + np].iter_mut().for_each(|s| *s = -1);
        let mut builder = SymmetricBuilder::new(signs);
        for (r, c, v) in assemble_a(grid, kappa, cells).entries {
            if r <= c {
                builder.add(r, c, v);
            }
        }
        for (r, c, v) in assemble_b(grid, cells).entries {
            builder.add(nv + r, c, v);
        }
        if let Coupling::Penalty(w) | Coupling::Constraint(w) = coupling {
            for (k, col) in w.cols.iter().enumerate() {
                for &(cell, val) in col {
                    builder.add(nv + cell, nv + np + k, -val);
                }
                if kind == 1 {
                    builder.add(nv + np + k, nv + np + k, 1.0);
                }
            }
        }
        if mean {
            let h2 = grid.h() * grid.h();
            for cell in 0..np {
                builder.add(nv + cell, dim - 1, h2);
            }
        }
        let order = dissection_order(grid, &map, dim);
        builder
            .set_ordering(order)
            .expect("dissection order is a permutation");
        Self {
            map,
            naux,
            mean,
            coupling_kind: kind,
            builder,
        }
    }

    pub fn dim(&self) -> usize {
        self.builder.dim()
    }

    pub fn builder(&self) -> &SymmetricBuilder {
        &self.builder
    }

    pub fn factor(&self) -> Result<SaddleFactor<'_>> {
        Ok(SaddleFactor {
            system: self,
            factor: self.builder.factor()?,
        })
    }

    /// Full right-hand side in the internal convention.
    fn rhs(&self, r_v: Option<&[f64]>, r_q: &[f64], r_y: Option<&[f64]>) -> Result<Vec<f64>> {
        let (nv, np) = (self.map.len(), self.map.num_cells());
        if r_q.len() != np
            || r_v.is_some_and(|r| r.len() != nv)
            || r_y.is_some_and(|r| r.len() != self.naux)
        {
            return Err(Error::Dimension("saddle right-hand side blocks".into()));
        }
        let mut rhs = vec![0.0; self.dim()];
        if let Some(r) = r_v {
            rhs[..nv].copy_from_slice(r);
        }
        rhs[nv..nv + np].copy_from_slice(r_q);
        if let Some(r) = r_y {
            // W^T q = r_y becomes -W^T (-q) = r_y
            if self.coupling_kind == 2 {
                rhs[nv + np..nv + np + self.naux].copy_from_slice(r);
            }
        }
        Ok(rhs)
    }

    fn split(&self, x: Vec<f64>) -> SaddleSolution {
        let (nv, np) = (self.map.len(), self.map.num_cells());
        SaddleSolution {
            velocity: x[..nv].to_vec(),
            pressure: x[nv..nv + np].iter().map(|p| -p).collect(),
            aux: x[nv + np..nv + np + self.naux].to_vec(),
        }
    }

    pub fn has_mean_row(&self) -> bool {
        self.mean
    }
}

/// Elimination order: geometric nested dissection of the velocity unknowns,
/// each cell right after the last of its edges, then auxiliary and mean rows.
/// One cell is held back until after those rows: the pressure block alone is
/// singular on constants, and the rows eliminated before it remove that kernel.
/// Coordinates are doubled so vertical edges sit on even `x` and horizontal
/// edges on even `y`; a line of edges at an even coordinate separates the sides.
fn dissection_order(grid: &FineGrid, map: &VelocityDofMap, dim: usize) -> Vec<usize> {
    let (nv, np) = (map.len(), map.num_cells());
    let nodes: Vec<(usize, i64, i64)> = (0..nv)
        .map(|k| {
            let (x, y) = match grid.edge(map.global(k)) {
                Edge::Vertical { i, j } => (2 * i, 2 * j + 1),
                Edge::Horizontal { i, j } => (2 * i + 1, 2 * j),
            };
            (k, x as i64, y as i64)
        })
        .collect();
    let mut edges = Vec::with_capacity(nv);
    dissect(nodes, &mut edges);
    let mut pos = vec![0; nv];
    edges.iter().enumerate().for_each(|(p, &k)| pos[k] = p);
    let b = map.cells;
    let mut cells: Vec<(usize, usize)> = (b.y0..b.y1)
        .flat_map(|j| (b.x0..b.x1).map(move |i| (i, j)))
        .enumerate()
        .map(|(k, (i, j))| {
            (
                map.cell_dofs(i, j)
                    .iter()
                    .flatten()
                    .map(|&e| pos[e] + 1)
                    .max()
                    .unwrap_or(0),
                k,
            )
        })
        .collect();
    cells.sort_unstable();
    let mut out = Vec::with_capacity(dim);
    let mut next = cells.iter().peekable();
    for (p, &e) in edges.iter().enumerate() {
        out.push(e);
        while let Some(&&(key, k)) = next.peek() {
            if key > p + 1 {
                break;
            }
            out.push(nv + k);
            next.next();
        }
    }
    out.extend(next.map(|&(_, k)| nv + k));
    let held = (dim > nv + np).then(|| out.pop()).flatten();
    out.extend(nv + np..dim);
    out.extend(held);
    out
}

fn dissect(nodes: Vec<(usize, i64, i64)>, out: &mut Vec<usize>) {
    const LEAF: usize = 64;
    if nodes.len() <= LEAF {
        out.extend(nodes.iter().map(|n| n.0));
        return;
    }
    let (mut x0, mut x1, mut y0, mut y1) = (i64::MAX, i64::MIN, i64::MAX, i64::MIN);
    for &(_, x, y) in &nodes {
        (x0, x1, y0, y1) = (x0.min(x), x1.max(x), y0.min(y), y1.max(y));
    }
    let split_x = x1 - x0 >= y1 - y0;
    let (lo, hi) = if split_x { (x0, x1) } else { (y0, y1) };
    let mut m = (lo + hi) / 2;
    m -= m.rem_euclid(2);
    if m <= lo {
        m += 2;
    }
    if m >= hi {
        out.extend(nodes.iter().map(|n| n.0));
        return;
    }
    let (mut left, mut right, mut sep) = (Vec::new(), Vec::new(), Vec::new());
    for n in nodes {
        let c = if split_x { n.1 } else { n.2 };
        match c.cmp(&m) {
            std::cmp::Ordering::Less => left.push(n),
            std::cmp::Ordering::Greater => right.push(n),
            std::cmp::Ordering::Equal => sep.push(n),
        }
    }
    dissect(left, out);
    dissect(right, out);
    out.extend(sep.iter().map(|n| n.0));
}

/// Right-hand side blocks `(r_v, r_q, r_y)` for [`SaddleFactor::solve_many`].
pub type SaddleRhs = (Option<Vec<f64>>, Vec<f64>, Option<Vec<f64>>);

/// A factored [`SaddleSystem`], reusable for many right-hand sides.
pub struct SaddleFactor<'a> {
    system: &'a SaddleSystem,
    factor: SymmetricFactor,
}

impl SaddleFactor<'_> {
    pub fn solve(
        &self,
        r_v: Option<&[f64]>,
        r_q: &[f64],
        r_y: Option<&[f64]>,
    ) -> Result<SaddleSolution> {
        let rhs = self.system.rhs(r_v, r_q, r_y)?;
        Ok(self.system.split(self.factor.solve(&rhs)?))
    }

    pub fn solve_many(&self, rhs: &[SaddleRhs]) -> Result<Vec<SaddleSolution>> {
        let full = rhs
            .iter()
            .map(|(v, q, y)| self.system.rhs(v.as_deref(), q, y.as_deref()))
            .collect::<Result<Vec<_>>>()?;
        Ok(self
            .factor
            .solve_many(&full)?
            .into_iter()
            .map(|x| self.system.split(x))
            .collect())
    }
}

/// One-shot solve of a [`SaddleSystem`].
pub fn solve_saddle(
    system: &SaddleSystem,
    r_v: Option<&[f64]>,
    r_q: &[f64],
    r_y: Option<&[f64]>,
) -> Result<SaddleSolution> {
    system.factor()?.solve(r_v, r_q, r_y)
}

/// Fine-grid mixed solution on the whole domain.
#[derive(Clone, Debug, PartialEq)]
pub struct FineSolution {
    /// Normal velocity on every fine edge (zero on the boundary).
    pub velocity: Vec<f64>,
    /// Cell pressures with zero mean.
    pub pressure: Vec<f64>,
}

/// Rejects sources whose integral is not zero relative to their size.
pub fn check_zero_mean(grid: &FineGrid, f: &[f64]) -> Result<()> {
    if f.len() != grid.num_cells() {
        return Err(Error::Dimension(format!(
            "source has {} values for {} cells",
            f.len(),
            grid.num_cells()
        )));
    }
    let h2 = grid.h() * grid.h();
    let total: f64 = f.iter().sum::<f64>() * h2;
    let size: f64 = f.iter().map(|v| v.abs()).sum::<f64>() * h2;
    if total.abs() > 1e-12 * size.max(f64::MIN_POSITIVE) {
        return Err(Error::config(format!(
            "source integral is {total:.3e}, must be zero"
        )));
    }
    Ok(())
}

/// Solves `a(v,w) - b(w,p) = 0`, `b(v,q) = (f,q)` with `int p = 0`.
pub fn solve_fine_reference(grid: &FineGrid, kappa: &PermField, f: &[f64]) -> Result<FineSolution> {
    kappa.check_grid(grid)?;
    check_zero_mean(grid, f)?;
    let cells = grid.full_box();
    let h2 = grid.h() * grid.h();
    let rhs: Vec<f64> = f.iter().map(|v| v * h2).collect();
    let sys = SaddleSystem::new(grid, kappa, &cells, Coupling::None, true);
    let sol = solve_saddle(&sys, None, &rhs, None).map_err(|e| e.with_context("fine reference"))?;
    Ok(FineSolution {
        velocity: sys.map.scatter(&sol.velocity),
        pressure: sol.pressure,
    })
}

/// Smallest eigenvalue of `B A^{-1} B^T` on zero-mean pressures of the whole grid.
pub fn discrete_inf_sup(grid: &FineGrid, kappa: &PermField) -> Result<f64> {
    let cells = grid.full_box();
    let a = assemble_a(grid, kappa, &cells).to_dense();
    let b = assemble_b(grid, &cells).to_dense();
    let llt = a.llt(Side::Lower).map_err(|e| Error::Singular {
        context: "velocity mass matrix".into(),
        detail: format!("{e:?}"),
    })?;
    let x = llt.solve(b.transpose());
    let m = &b * &x;
    let m = Mat::from_fn(m.nrows(), m.ncols(), |i, j| 0.5 * (m[(i, j)] + m[(j, i)]));
    let ev = m
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| Error::Singular {
            context: "pressure Schur complement".into(),
            detail: format!("{e:?}"),
        })?;
    // constants span the kernel; eigenvectors of the rest are mean-free
    Ok(ev[1])
}

/// Source fields on the fine grid.
#[derive(Clone, Debug, PartialEq)]
pub enum SourceSpec {
    /// `+1` on the top-left and `-1` on the bottom-right element of the `1/8` grid.
    Corners,
    /// Cell averages of `2 pi^2 cos(pi x) cos(pi y)`, the source of
    /// `p = cos(pi x) cos(pi y)` with `kappa = 1`.
    Manufactured,
    /// Piecewise constant on an `n x n` coarse partition, row-major, bottom row first.
    CoarseCells { n: usize, values: Vec<f64> },
    /// Explicit per-fine-cell values.
    Cells(Vec<f64>),
}

impl SourceSpec {
    pub fn expand(&self, grid: &FineGrid) -> Result<Vec<f64>> {
        let n = grid.n();
        let f = match self {
            SourceSpec::Corners => {
                let mut values = vec![0.0; 64];
                values[7 * 8] = 1.0;
                values[7] = -1.0;
                return SourceSpec::CoarseCells { n: 8, values }.expand(grid);
            }
            SourceSpec::Manufactured => {
                let h = grid.h();
                let pi = std::f64::consts::PI;
                let avg = |i: usize| {
                    ((pi * (i + 1) as f64 * h).sin() - (pi * i as f64 * h).sin()) / (pi * h)
                };
                (0..grid.num_cells())
                    .map(|c| {
                        let (i, j) = grid.cell_coords(c);
                        2.0 * pi * pi * avg(i) * avg(j)
                    })
                    .collect()
            }
            SourceSpec::CoarseCells { n: m, values } => {
                if *m == 0 || !n.is_multiple_of(*m) || values.len() != m * m {
                    return Err(Error::config(format!(
                        "coarse source of {} values on a {m}x{m} partition does not fit a {n}x{n} grid",
                        values.len()
                    )));
                }
                let r = n / m;
                (0..grid.num_cells())
                    .map(|c| {
                        let (i, j) = grid.cell_coords(c);
                        values[(j / r) * m + i / r]
                    })
                    .collect()
            }
            SourceSpec::Cells(v) => v.clone(),
        };
        check_zero_mean(grid, &f)?;
        Ok(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_grids;

    #[test]
    fn single_cell_has_no_dofs() {
        let g = FineGrid::new(2).unwrap();
        let one = CellBox {
            x0: 0,
            x1: 1,
            y0: 0,
            y1: 1,
        };
        let k = PermField::uniform(&g);
        assert_eq!(assemble_a(&g, &k, &one).rows, 0);
        assert_eq!(assemble_b(&g, &one).cols, 0);
    }

    #[test]
    fn two_cell_mass_and_divergence() {
        let g = FineGrid::new(2).unwrap();
        let pair = CellBox {
            x0: 0,
            x1: 2,
            y0: 0,
            y1: 1,
        };
        let k = PermField::uniform(&g);
        let a = assemble_a(&g, &k, &pair);
        assert_eq!(a.rows, 1);
        let h = g.h();
        assert!((a.get(0, 0) - 2.0 * h * h / 3.0).abs() < 1e-16);
        let a2 = assemble_a(&g, &k.scaled(2.0), &pair);
        assert!((a2.get(0, 0) - 0.5 * a.get(0, 0)).abs() < 1e-16);
        let b = assemble_b(&g, &pair);
        assert_eq!(b.get(0, 0), h);
        assert_eq!(b.get(1, 0), -h);
    }

    #[test]
    fn dof_map_round_trip() {
        let g = FineGrid::new(6).unwrap();
        let bx = CellBox {
            x0: 1,
            x1: 5,
            y0: 2,
            y1: 5,
        };
        let map = VelocityDofMap::new(&g, bx);
        assert_eq!(map.len(), 3 * 3 + 4 * 2);
        for k in 0..map.len() {
            assert_eq!(map.local(map.global(k)), Some(k));
        }
        let interior = (0..g.num_edges())
            .filter(|&e| map.local(e).is_some())
            .count();
        assert_eq!(interior, map.len());
    }

    #[test]
    fn operators_are_symmetric_and_telescoping() {
        let (g, _) = build_grids(8, 2).unwrap();
        let k = crate::medium::log_uniform_field(&g, 1e4, 1);
        let bx = CellBox {
            x0: 2,
            x1: 7,
            y0: 0,
            y1: 4,
        };
        assert!(assemble_a(&g, &k, &bx).is_symmetric());
        let b = assemble_b(&g, &bx);
        let ones = vec![1.0; b.rows];
        assert!(b.apply_transpose(&ones).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn box_field_products_match_global() {
        let (g, _) = build_grids(8, 2).unwrap();
        let k = crate::medium::log_uniform_field(&g, 1e2, 4);
        let b1 = CellBox {
            x0: 0,
            x1: 5,
            y0: 1,
            y1: 8,
        };
        let b2 = CellBox {
            x0: 3,
            x1: 8,
            y0: 0,
            y1: 4,
        };
        let m1 = VelocityDofMap::new(&g, b1);
        let m2 = VelocityDofMap::new(&g, b2);
        let u: Vec<f64> = (0..m1.len()).map(|i| (i as f64).sin()).collect();
        let v: Vec<f64> = (0..m2.len()).map(|i| (i as f64 * 0.7).cos()).collect();
        let (fu, fv) = (BoxField::from_local(&m1, &u), BoxField::from_local(&m2, &v));
        let (gu, gv) = (m1.scatter(&u), m2.scatter(&v));
        assert_eq!(fu.to_global(&g), gu);
        let av = apply_mass(&g, &k, &g.full_box(), &gv);
        let expect: f64 = gu.iter().zip(&av).map(|(a, b)| a * b).sum();
        let got = fu.dot(&fv.apply_mass(&g, &k));
        assert!((got - expect).abs() < 1e-14 * expect.abs().max(1.0));
        let flux = cell_flux(&g, &gu);
        let local = fu.cell_flux(g.h());
        for (n, c) in b1.cells(&g).enumerate() {
            assert!((flux[c] - local[n]).abs() < 1e-15);
        }
    }

    #[test]
    fn saddle_zero_rhs() {
        let g = FineGrid::new(4).unwrap();
        let k = PermField::uniform(&g);
        let sys = SaddleSystem::new(&g, &k, &g.full_box(), Coupling::None, true);
        let sol = solve_saddle(&sys, None, &[0.0; 16], None).unwrap();
        assert!(sol.velocity.iter().chain(&sol.pressure).all(|&v| v == 0.0));
    }

    #[test]
    fn zero_source_and_bad_source() {
        let g = FineGrid::new(8).unwrap();
        let k = PermField::uniform(&g);
        let s = solve_fine_reference(&g, &k, &vec![0.0; 64]).unwrap();
        assert!(s.velocity.iter().chain(&s.pressure).all(|&v| v == 0.0));
        let mut f = vec![0.0; 64];
        f[0] = 1.0;
        assert!(matches!(
            solve_fine_reference(&g, &k, &f),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn corner_source_is_balanced() {
        let g = FineGrid::new(32).unwrap();
        let f = SourceSpec::Corners.expand(&g).unwrap();
        let top_left = f[g.cell(0, 31)];
        let bottom_right = f[g.cell(31, 0)];
        assert_eq!((top_left, bottom_right), (1.0, -1.0));
        assert_eq!(f.iter().filter(|&&v| v != 0.0).count(), 32);
    }

    #[test]
    fn fine_solution_is_conservative() {
        let g = FineGrid::new(16).unwrap();
        let k = crate::medium::log_uniform_field(&g, 1e4, 5);
        let f = SourceSpec::Corners.expand(&g).unwrap();
        let s = solve_fine_reference(&g, &k, &f).unwrap();
        let h2 = g.h() * g.h();
        for (flux, src) in cell_flux(&g, &s.velocity).iter().zip(&f) {
            assert!((flux - src * h2).abs() < 1e-10);
        }
        assert!(s.pressure.iter().sum::<f64>().abs() * h2 < 1e-12);
    }
}
