//! Permeability fields, synthetic high-contrast media and the weight `kappa~`.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mesh::{CoarseGrid, FineGrid, PartitionOfUnity};

/// Cell-wise permeability, rescaled so that its minimum is exactly 1.
#[derive(Clone, Debug, PartialEq)]
pub struct PermField {
    n: usize,
    values: Vec<f64>,
    contrast: f64,
}

impl PermField {
    /// Builds a field from raw positive values (row-major, bottom row first).
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::Dimension(format!(
                "{} values for a {n}x{n} grid",
                values.len()
            )));
        }
        if let Some((k, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v > 0.0))
        {
            return Err(Error::config(format!(
                "permeability value {k} is {v}, must be positive"
            )));
        }
        Ok(Self::rescaled(n, values))
    }

    fn rescaled(n: usize, mut values: Vec<f64>) -> Self {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        if min != 1.0 {
            values.iter_mut().for_each(|v| *v /= min);
        }
        let max = values.iter().copied().fold(1.0, f64::max);
        Self {
            n,
            values,
            contrast: max,
        }
    }

    pub fn uniform(grid: &FineGrid) -> Self {
        Self {
            n: grid.n(),
            values: vec![1.0; grid.num_cells()],
            contrast: 1.0,
        }
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, c: usize) -> f64 {
        self.values[c]
    }

    /// `B = max kappa / min kappa`.
    #[inline]
    pub fn contrast(&self) -> f64 {
        self.contrast
    }

    pub fn check_grid(&self, grid: &FineGrid) -> Result<()> {
        if self.n != grid.n() {
            return Err(Error::Dimension(format!(
                "permeability is {0}x{0}, grid is {1}x{1}",
                self.n,
                grid.n()
            )));
        }
        Ok(())
    }

    /// Copy with every value multiplied by `c`, without renormalization.
    pub fn scaled(&self, c: f64) -> Self {
        let values: Vec<f64> = self.values.iter().map(|v| v * c).collect();
        Self {
            n: self.n,
            values,
            contrast: self.contrast,
        }
    }
}

/// Reads an ASCII raster: `nx ny` on the first line, then `nx*ny` positive values.
pub fn load_raster(path: impl AsRef<Path>) -> Result<PermField> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        record: "file".into(),
        message: e.to_string(),
    })?;
    parse_raster(&text).map_err(|(record, message)| Error::Load {
        path: path.to_path_buf(),
        record,
        message,
    })
}

fn parse_raster(text: &str) -> std::result::Result<PermField, (String, String)> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| ("header".to_string(), "empty file".to_string()))?;
    let dims: Vec<&str> = header.split_whitespace().collect();
    let bad_header = || {
        (
            "header".to_string(),
            format!("expected \"nx ny\", found {header:?}"),
        )
    };
    if dims.len() != 2 {
        return Err(bad_header());
    }
    let nx: usize = dims[0].parse().map_err(|_| bad_header())?;
    let ny: usize = dims[1].parse().map_err(|_| bad_header())?;
    if nx != ny || nx == 0 {
        return Err((
            "header".into(),
            format!("grid must be square and nonempty, got {nx}x{ny}"),
        ));
    }
    let mut values = Vec::with_capacity(nx * ny);
    for (line_no, line) in lines.enumerate() {
        for tok in line.split_whitespace() {
            let record = format!("value {} (line {})", values.len(), line_no + 2);
            let v: f64 = tok
                .parse()
                .map_err(|_| (record.clone(), format!("not a number: {tok:?}")))?;
            if !(v.is_finite() && v > 0.0) {
                return Err((record, format!("value {v} is not positive")));
            }
            values.push(v);
        }
    }
    if values.len() != nx * ny {
        return Err((
            "payload".into(),
            format!("expected {} values, found {}", nx * ny, values.len()),
        ));
    }
    Ok(PermField::rescaled(nx, values))
}

/// Writes a raster that [`load_raster`] reads back bit for bit.
pub fn save_raster(field: &PermField, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::with_capacity(field.values.len() * 24 + 16);
    let _ = writeln!(out, "{} {}", field.n, field.n);
    for row in field.values.chunks(field.n) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// `kappa~ = kappa * sum_j |grad chi_j|^2`, cell-averaged.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightField {
    values: Vec<f64>,
}

impl WeightField {
    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, c: usize) -> f64 {
        self.values[c]
    }
}

pub fn compute_weight(kappa: &PermField, pou: &PartitionOfUnity) -> Result<WeightField> {
    let g = pou.grad_sq_cell_average();
    if g.len() != kappa.values.len() {
        return Err(Error::Dimension(format!(
            "partition of unity has {} cells, permeability {}",
            g.len(),
            kappa.values.len()
        )));
    }
    Ok(WeightField {
        values: kappa.values.iter().zip(g).map(|(k, g)| k * g).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Channel,
    Inclusion,
}

/// Axis-aligned rectangle `[x0,x1] x [y0,y1]` carrying value `contrast`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
    pub contrast: f64,
    /// Maximum random displacement along each axis.
    pub jitter: f64,
}

impl Shape {
    pub fn channel(x0: f64, x1: f64, y0: f64, y1: f64, contrast: f64) -> Self {
        Self {
            kind: ShapeKind::Channel,
            x0,
            x1,
            y0,
            y1,
            contrast,
            jitter: 0.0,
        }
    }

    pub fn inclusion(x0: f64, x1: f64, y0: f64, y1: f64, contrast: f64) -> Self {
        Self {
            kind: ShapeKind::Inclusion,
            x0,
            x1,
            y0,
            y1,
            contrast,
            jitter: 0.0,
        }
    }

    pub fn with_jitter(mut self, jitter: f64) -> Self {
        self.jitter = jitter;
        self
    }

    fn validate(&self, k: usize) -> Result<()> {
        let inside = |a: f64, b: f64| (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b) && a < b;
        if !(inside(self.x0, self.x1) && inside(self.y0, self.y1)) {
            return Err(Error::config(format!(
                "shape {k} [{}, {}] x [{}, {}] is empty or leaves the unit square",
                self.x0, self.x1, self.y0, self.y1
            )));
        }
        if !(self.contrast.is_finite() && self.contrast > 0.0)
            || self.jitter.is_nan()
            || self.jitter < 0.0
        {
            return Err(Error::config(format!(
                "shape {k} needs positive contrast and nonnegative jitter"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MediumSpec {
    pub background: f64,
    pub shapes: Vec<Shape>,
    pub seed: u64,
    /// Upper bound on high-permeability components per coarse element, checked
    /// by [`generate_medium_checked`].
    pub max_components: Option<usize>,
}

impl Default for MediumSpec {
    fn default() -> Self {
        Self {
            background: 1.0,
            shapes: Vec::new(),
            seed: 0,
            max_components: None,
        }
    }
}

/// Rasterizes the spec: a cell takes the largest value among the background
/// and all shapes containing its centre.
pub fn generate_medium(spec: &MediumSpec, grid: &FineGrid) -> Result<PermField> {
    if !(spec.background.is_finite() && spec.background > 0.0) {
        return Err(Error::config("medium background must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut values = vec![spec.background; grid.num_cells()];
    let h = grid.h();
    for (k, s) in spec.shapes.iter().enumerate() {
        s.validate(k)?;
        let (mut dx, mut dy) = (0.0, 0.0);
        if s.jitter > 0.0 {
            dx = rng.random_range(-s.jitter..=s.jitter);
            dy = rng.random_range(-s.jitter..=s.jitter);
            // keep the displaced shape inside the domain
            dx = dx.clamp(-s.x0, 1.0 - s.x1);
            dy = dy.clamp(-s.y0, 1.0 - s.y1);
        }
        let (x0, x1, y0, y1) = (s.x0 + dx, s.x1 + dx, s.y0 + dy, s.y1 + dy);
        let lo = |t: f64| ((t / h - 0.5).ceil().max(0.0) as usize).min(grid.n());
        let hi = |t: f64| ((t / h - 0.5).floor() + 1.0).clamp(0.0, grid.n() as f64) as usize;
        for j in lo(y0)..hi(y1) {
            for i in lo(x0)..hi(x1) {
                let c = grid.cell(i, j);
                values[c] = values[c].max(s.contrast);
            }
        }
    }
    Ok(PermField::rescaled(grid.n(), values))
}

/// [`generate_medium`] followed by the per-element component bound, if declared.
pub fn generate_medium_checked(
    spec: &MediumSpec,
    fine: &FineGrid,
    coarse: &CoarseGrid,
) -> Result<PermField> {
    let field = generate_medium(spec, fine)?;
    if let Some(max) = spec.max_components {
        let threshold = (field.contrast().sqrt()).max(1.0 + 1e-12);
        let counts = element_components(&field, fine, coarse, threshold);
        if let Some((k, &c)) = counts.iter().enumerate().find(|(_, &c)| c > max) {
            return Err(Error::config(format!(
                "element {k} is crossed by {c} high-permeability components, more than the declared {max}"
            )));
        }
    }
    Ok(field)
}

/// Number of 4-connected components of cells with `kappa > threshold` inside each element.
pub fn element_components(
    kappa: &PermField,
    fine: &FineGrid,
    coarse: &CoarseGrid,
    threshold: f64,
) -> Vec<usize> {
    (0..coarse.num_elements())
        .map(|k| {
            let b = coarse.element_box(k);
            let (w, ht) = (b.width(), b.height());
            let high: Vec<bool> = b.cells(fine).map(|c| kappa.get(c) > threshold).collect();
            let mut seen = vec![false; high.len()];
            let mut count = 0;
            let mut stack = Vec::new();
            for start in 0..high.len() {
                if !high[start] || seen[start] {
                    continue;
                }
                count += 1;
                seen[start] = true;
                stack.push(start);
                while let Some(p) = stack.pop() {
                    let (x, y) = (p % w, p / w);
                    let mut visit = |q: usize| {
                        if high[q] && !seen[q] {
                            seen[q] = true;
                            stack.push(q);
                        }
                    };
                    if x > 0 {
                        visit(p - 1);
                    }
                    if x + 1 < w {
                        visit(p + 1);
                    }
                    if y > 0 {
                        visit(p - w);
                    }
                    if y + 1 < ht {
                        visit(p + w);
                    }
                }
            }
            count
        })
        .collect()
}

/// Channelized medium with at most three high-permeability components in every
/// element of the `1/8` coarse grid.
///
/// Each horizontal band of height `1/8` holds up to three strips one `1/64`
/// thick: a full-width strip near the band's bottom, a partial strip in the
/// middle, and a partial strip near the top. Elements the middle strip misses
/// get a small square inclusion instead. Placement is drawn from `seed`.
pub fn three_channel_preset(contrast: f64, seed: u64) -> MediumSpec {
    const SUB: f64 = 1.0 / 64.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shapes = Vec::new();
    for band in 0..8 {
        let base = band as f64 / 8.0;
        let row = |r: usize| (base + r as f64 * SUB, base + (r + 1) as f64 * SUB);

        let (y0, y1) = row(rng.random_range(0..=1usize));
        shapes.push(Shape::channel(0.0, 1.0, y0, y1, contrast));

        // middle strip: 3 to 5 elements long, ends at random sub-columns
        let mid = rng.random_range(3..=4usize);
        let len = rng.random_range(3..=5usize);
        let first = rng.random_range(0..=(8 - len));
        let last = first + len - 1;
        let xs = first as f64 / 8.0 + rng.random_range(0..=3usize) as f64 * SUB;
        let xe = (last + 1) as f64 / 8.0 - rng.random_range(0..=3usize) as f64 * SUB;
        let (y0, y1) = row(mid);
        shapes.push(Shape::channel(xs, xe, y0, y1, contrast));
        for e in (0..8).filter(|e| *e < first || *e > last) {
            let col = rng.random_range(1..=6usize);
            let x0 = e as f64 / 8.0 + col as f64 * SUB;
            shapes.push(Shape::inclusion(x0, x0 + SUB, y0, y1, contrast));
        }

        // top strip covers at least two elements
        let a = rng.random_range(0..=5usize);
        let b = rng.random_range((a + 2)..=8usize);
        let xs = a as f64 / 8.0
            + if a > 0 {
                rng.random_range(1..=3usize) as f64 * SUB
            } else {
                0.0
            };
        let xe = b as f64 / 8.0
            - if b < 8 {
                rng.random_range(1..=3usize) as f64 * SUB
            } else {
                0.0
            };
        let (y0, y1) = row(6);
        shapes.push(Shape::channel(xs, xe, y0, y1, contrast));
    }
    MediumSpec {
        background: 1.0,
        shapes,
        seed,
        max_components: Some(3),
    }
}

/// Cell-wise log-uniform random field with values in `[1, contrast]`.
pub fn log_uniform_field(grid: &FineGrid, contrast: f64, seed: u64) -> PermField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = contrast.max(1.0).ln();
    let values: Vec<f64> = (0..grid.num_cells())
        .map(|_| (rng.random::<f64>() * top).exp())
        .collect();
    PermField::rescaled(grid.n(), values)
}
