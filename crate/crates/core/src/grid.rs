//! Rectangular cell-centered grids, the fields that live on them, and the
//! conservative two-point-flux operators used by every solver.
//!
//! Cells are numbered with the x index running fastest, so in 2D a cell
//! `(i, j)` has linear index `i + nx * j`. Faces are stored only in the
//! interior: the zero-flux boundary condition is structural and never held as
//! data. Along axis 0 the face between `(i, j)` and `(i + 1, j)` has index
//! `i + (nx - 1) * j`; along axis 1 the face between `(i, j)` and `(i, j + 1)`
//! has index `i + nx * j`.

use crate::error::{Error, Result};
use crate::linalg::{compensated_sum, BandedLu};

/// Axis-aligned box `[0, L_x]` or `[0, L_x] x [0, L_y]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RectDomain {
    dim: usize,
    lengths: [f64; 2],
    cells: [usize; 2],
}

/// Convenience constructor mirroring [`RectDomain::new`].
pub fn build_grid(dim: usize, lengths: &[f64], cells: &[usize]) -> Result<RectDomain> {
    if lengths.len() != dim || cells.len() != dim {
        return Err(Error::Config(format!(
            "expected {dim} lengths and cell counts, got {} and {}",
            lengths.len(),
            cells.len()
        )));
    }
    RectDomain::new(lengths, cells)
}

impl RectDomain {
    pub fn new(lengths: &[f64], cells: &[usize]) -> Result<Self> {
        let dim = lengths.len();
        if !(1..=2).contains(&dim) || cells.len() != dim {
            return Err(Error::Config(format!("dimension must be 1 or 2 (got {dim})")));
        }
        let mut l = [1.0; 2];
        let mut c = [1usize; 2];
        for k in 0..dim {
            if !(lengths[k].is_finite() && lengths[k] > 0.0) {
                return Err(Error::Config(format!("axis {k} length must be positive")));
            }
            if cells[k] < 2 {
                return Err(Error::Config(format!(
                    "axis {k} needs at least 2 cells (got {})",
                    cells[k]
                )));
            }
            l[k] = lengths[k];
            c[k] = cells[k];
        }
        Ok(Self { dim, lengths: l, cells: c })
    }

    pub fn unit_interval(cells: usize) -> Result<Self> {
        Self::new(&[1.0], &[cells])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths[..self.dim]
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells[..self.dim]
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.lengths[axis] / self.cells[axis] as f64
    }

    pub fn spacings(&self) -> Vec<f64> {
        (0..self.dim).map(|k| self.spacing(k)).collect()
    }

    pub fn n_cells(&self) -> usize {
        self.cells[0] * self.cells[1]
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim).map(|k| self.spacing(k)).product()
    }

    pub fn volume(&self) -> f64 {
        self.lengths[..self.dim].iter().product()
    }

    /// Smallest spacing squared; the accuracy cap on implicit time steps.
    pub fn min_spacing_sq(&self) -> f64 {
        (0..self.dim).map(|k| self.spacing(k).powi(2)).fold(f64::INFINITY, f64::min)
    }

    /// Half-bandwidth of every operator assembled on this grid.
    pub fn bandwidth(&self) -> usize {
        if self.dim == 1 {
            1
        } else {
            self.cells[0]
        }
    }

    pub fn cell_index(&self, i: usize, j: usize) -> usize {
        i + self.cells[0] * j
    }

    pub fn cell_coords(&self, idx: usize) -> (usize, usize) {
        (idx % self.cells[0], idx / self.cells[0])
    }

    pub fn center(&self, idx: usize) -> [f64; 2] {
        let (i, j) = self.cell_coords(idx);
        let y = if self.dim == 2 { (j as f64 + 0.5) * self.spacing(1) } else { 0.0 };
        [(i as f64 + 0.5) * self.spacing(0), y]
    }

    pub fn centers(&self) -> Vec<[f64; 2]> {
        (0..self.n_cells()).map(|c| self.center(c)).collect()
    }

    /// Cell containing `point`; points on the upper boundary map to the last cell.
    pub fn locate(&self, point: [f64; 2]) -> usize {
        let mut idx = [0usize; 2];
        for k in 0..self.dim {
            let raw = (point[k] / self.spacing(k)).floor();
            idx[k] = if raw <= 0.0 { 0 } else { (raw as usize).min(self.cells[k] - 1) };
        }
        self.cell_index(idx[0], idx[1])
    }

    pub fn contains(&self, point: [f64; 2]) -> bool {
        (0..self.dim).all(|k| point[k] >= 0.0 && point[k] <= self.lengths[k])
    }

    pub fn n_faces(&self, axis: usize) -> usize {
        if axis >= self.dim {
            return 0;
        }
        match axis {
            0 => (self.cells[0] - 1) * self.cells[1],
            _ => self.cells[0] * (self.cells[1] - 1),
        }
    }

    /// Cells `(lower, upper)` on either side of interior face `face` of `axis`.
    pub fn face_cells(&self, axis: usize, face: usize) -> (usize, usize) {
        let nx = self.cells[0];
        match axis {
            0 => {
                let (i, j) = (face % (nx - 1), face / (nx - 1));
                let p = self.cell_index(i, j);
                (p, p + 1)
            }
            _ => {
                let p = face;
                (p, p + nx)
            }
        }
    }

    /// Index of the face on the upper side of `cell` along `axis`, if interior.
    pub fn upper_face(&self, axis: usize, cell: usize) -> Option<usize> {
        let (i, j) = self.cell_coords(cell);
        match axis {
            0 if i + 1 < self.cells[0] => Some(i + (self.cells[0] - 1) * j),
            1 if self.dim == 2 && j + 1 < self.cells[1] => Some(cell),
            _ => None,
        }
    }

    /// Index of the face on the lower side of `cell` along `axis`, if interior.
    pub fn lower_face(&self, axis: usize, cell: usize) -> Option<usize> {
        let (i, j) = self.cell_coords(cell);
        match axis {
            0 if i > 0 => Some(i - 1 + (self.cells[0] - 1) * j),
            1 if self.dim == 2 && j > 0 => Some(cell - self.cells[0]),
            _ => None,
        }
    }

    /// Iterates `(axis, face, lower_cell, upper_cell)` over all interior faces.
    pub fn faces(&self) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        (0..self.dim).flat_map(move |axis| {
            (0..self.n_faces(axis)).map(move |f| {
                let (p, q) = self.face_cells(axis, f);
                (axis, f, p, q)
            })
        })
    }
}

/// One real value per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    domain: RectDomain,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(domain: RectDomain, values: Vec<f64>) -> Result<Self> {
        if values.len() != domain.n_cells() {
            return Err(Error::Config(format!(
                "field has {} values for {} cells",
                values.len(),
                domain.n_cells()
            )));
        }
        if let Some(cell) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                context: "scalar field",
                detail: format!("non-finite value at cell {cell}"),
            });
        }
        Ok(Self { domain, values })
    }

    pub(crate) fn from_vec_unchecked(domain: RectDomain, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), domain.n_cells());
        Self { domain, values }
    }

    pub fn constant(domain: RectDomain, value: f64) -> Self {
        Self { domain, values: vec![value; domain.n_cells()] }
    }

    pub fn from_fn(domain: RectDomain, f: impl Fn([f64; 2]) -> f64) -> Self {
        let values = (0..domain.n_cells()).map(|c| f(domain.center(c))).collect();
        Self { domain, values }
    }

    pub fn domain(&self) -> &RectDomain {
        &self.domain
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `sum_i values_i * cellvol`, compensated.
    pub fn mass(&self) -> f64 {
        compensated_sum(self.values.iter().copied()) * self.domain.cell_volume()
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn argmin(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v < self.values[best] {
                best = i;
            }
        }
        best
    }

    /// Rescales to the given mass. Fails for fields with non-positive mass.
    pub fn normalized_to(&self, mass: f64) -> Result<Self> {
        let m = self.mass();
        if !(m > 0.0) {
            return Err(Error::Target(format!("cannot normalize field of mass {m:e}")));
        }
        Ok(self.scaled(mass / m))
    }

    pub fn normalized(&self) -> Result<Self> {
        self.normalized_to(1.0)
    }

    pub fn scaled(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { domain: self.domain, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.domain, other.domain);
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        Self { domain: self.domain, values }
    }

    pub fn sub(&self, other: &ScalarField) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn reciprocal(&self) -> Self {
        self.map(|v| 1.0 / v)
    }

    pub fn mean(&self) -> f64 {
        self.mass() / self.domain.volume()
    }

    /// Discrete L2 norm `sqrt(sum u^2 cellvol)`.
    pub fn l2_norm(&self) -> f64 {
        (compensated_sum(self.values.iter().map(|v| v * v)) * self.domain.cell_volume()).sqrt()
    }

    /// Weighted norm `sqrt(sum a u^2 cellvol)`.
    pub fn weighted_norm(&self, weight: &ScalarField) -> f64 {
        let s = compensated_sum(self.values.iter().zip(&weight.values).map(|(u, a)| a * u * u));
        (s * self.domain.cell_volume()).sqrt()
    }

    pub fn l1_norm(&self) -> f64 {
        compensated_sum(self.values.iter().map(|v| v.abs())) * self.domain.cell_volume()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Returns the first cell whose value is not strictly positive.
    pub fn check_positive(&self) -> Result<()> {
        match self.values.iter().position(|&v| !(v > 0.0)) {
            Some(cell) => Err(Error::Coefficient { min: self.values[cell], cell }),
            None => Ok(()),
        }
    }
}

/// Values on interior faces, one array per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceField {
    domain: RectDomain,
    axes: [Vec<f64>; 2],
}

impl FaceField {
    pub fn zeros(domain: RectDomain) -> Self {
        Self { domain, axes: [vec![0.0; domain.n_faces(0)], vec![0.0; domain.n_faces(1)]] }
    }

    /// Builds a face field from `f(axis, lower_cell, upper_cell)`.
    pub fn from_faces(domain: RectDomain, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut out = Self::zeros(domain);
        for (axis, face, p, q) in domain.faces() {
            out.axes[axis][face] = f(axis, p, q);
        }
        out
    }

    pub fn domain(&self) -> &RectDomain {
        &self.domain
    }

    pub fn axis(&self, axis: usize) -> &[f64] {
        &self.axes[axis]
    }

    pub fn axis_mut(&mut self, axis: usize) -> &mut [f64] {
        &mut self.axes[axis]
    }

    pub fn get(&self, axis: usize, face: usize) -> f64 {
        self.axes[axis][face]
    }

    pub fn max_abs(&self) -> f64 {
        self.axes.iter().flatten().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.axes.iter().flatten().all(|v| v.is_finite())
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.axes.iter_mut().flatten().for_each(|v| *v *= s);
        out
    }
}

/// Face-centered difference quotient `(u_q - u_p) / h` on every interior face.
pub fn face_gradient(u: &ScalarField) -> FaceField {
    let d = *u.domain();
    let v = u.values();
    FaceField::from_faces(d, |axis, p, q| (v[q] - v[p]) / d.spacing(axis))
}

/// Which coefficients an operator was assembled from.
#[derive(Debug, Clone, PartialEq)]
pub enum OperatorSource {
    DivergenceForm { a: Vec<f64>, w: Vec<f64> },
    AdvectionDiffusion { diffusion: f64 },
    Scaled(Box<OperatorSource>, f64),
}

/// Compressed sparse row matrix over cell indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOperator {
    domain: RectDomain,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    source: OperatorSource,
}

/// Row-wise accumulator used during assembly.
pub(crate) struct Assembler {
    rows: Vec<Vec<(usize, f64)>>,
}

impl Assembler {
    pub(crate) fn new(n: usize) -> Self {
        Self { rows: vec![Vec::with_capacity(5); n] }
    }

    pub(crate) fn add(&mut self, row: usize, col: usize, value: f64) {
        let r = &mut self.rows[row];
        match r.iter_mut().find(|(c, _)| *c == col) {
            Some(entry) => entry.1 += value,
            None => r.push((col, value)),
        }
    }

    pub(crate) fn finish(self, domain: RectDomain, source: OperatorSource) -> SparseOperator {
        let mut row_ptr = Vec::with_capacity(self.rows.len() + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut r in self.rows {
            r.sort_by_key(|(c, _)| *c);
            for (c, v) in r {
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        SparseOperator { domain, row_ptr, cols, vals, source }
    }
}

impl SparseOperator {
    pub fn domain(&self) -> &RectDomain {
        &self.domain
    }

    pub fn source(&self) -> &OperatorSource {
        &self.source
    }

    pub fn dim(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.cols[s..e].iter().copied().zip(self.vals[s..e].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|(c, _)| *c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        (0..self.dim()).map(|i| self.row(i).map(|(j, v)| v * u[j]).sum()).collect()
    }

    pub fn apply_field(&self, u: &ScalarField) -> ScalarField {
        ScalarField::from_vec_unchecked(self.domain, self.apply(u.values()))
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.dim()];
        for i in 0..self.dim() {
            for (j, v) in self.row(i) {
                sums[j] += v;
            }
        }
        sums
    }

    /// Largest absolute row sum.
    pub fn inf_norm(&self) -> f64 {
        (0..self.dim()).map(|i| self.row(i).map(|(_, v)| v.abs()).sum::<f64>()).fold(0.0, f64::max)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            domain: self.domain,
            row_ptr: self.row_ptr.clone(),
            cols: self.cols.clone(),
            vals: self.vals.iter().map(|v| v * s).collect(),
            source: OperatorSource::Scaled(Box::new(self.source.clone()), s),
        }
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let n = self.dim();
        let mut m = nalgebra::DMatrix::zeros(n, n);
        for i in 0..n {
            for (j, v) in self.row(i) {
                m[(i, j)] += v;
            }
        }
        m
    }

    /// Band matrix `diag * I + scale * L`, unfactored.
    pub fn shifted_band(&self, diag: f64, scale: f64) -> BandedLu {
        let n = self.dim();
        let mut band = BandedLu::new(n, self.domain.bandwidth());
        for i in 0..n {
            band.add(i, i, diag);
            for (j, v) in self.row(i) {
                band.add(i, j, scale * v);
            }
        }
        band
    }

    /// Factorization of `I - dt * L`, the implicit Euler step matrix.
    pub fn implicit_step_factor(&self, dt: f64) -> Result<BandedLu> {
        self.shifted_band(1.0, -dt).factor()
    }
}

fn harmonic_mean(x: f64, y: f64) -> f64 {
    2.0 * x * y / (x + y)
}

/// Assembles `L u ~ div(w grad(a u))` with zero flux through the boundary.
///
/// Face coefficients are harmonic means of `w`. With `w = 1` this is the
/// weighted-heat generator, with `w = 1/a` the divergence form
/// `div(f grad(u / f))` of the stabilizing flow.
pub fn divergence_form_operator(a: &ScalarField, w: &ScalarField) -> Result<SparseOperator> {
    a.check_positive()?;
    w.check_positive()?;
    let d = *a.domain();
    let (av, wv) = (a.values(), w.values());
    let mut asm = Assembler::new(d.n_cells());
    for (axis, _, p, q) in d.faces() {
        let c = harmonic_mean(wv[p], wv[q]) / d.spacing(axis).powi(2);
        // flux from q into p is c * (a_q u_q - a_p u_p)
        asm.add(p, q, c * av[q]);
        asm.add(p, p, -c * av[p]);
        asm.add(q, p, c * av[p]);
        asm.add(q, q, -c * av[q]);
    }
    Ok(asm.finish(d, OperatorSource::DivergenceForm { a: av.to_vec(), w: wv.to_vec() }))
}

/// Plain Neumann Laplacian on the grid.
pub fn neumann_laplacian(domain: RectDomain) -> SparseOperator {
    let one = ScalarField::constant(domain, 1.0);
    divergence_form_operator(&one, &one).expect("unit coefficients are positive")
}

/// Solves `-Δφ = rhs` with zero-flux boundary, returning the zero-mean solution.
pub fn neumann_poisson_solve(rhs: &ScalarField) -> Result<ScalarField> {
    let d = *rhs.domain();
    let m = rhs.mass();
    if m.abs() > 1e-10 * rhs.l1_norm().max(1.0) {
        return Err(Error::Compatibility { mass: m });
    }
    let lap = neumann_laplacian(d);
    // -L is singular with constant nullspace; pin cell 0 and project afterwards.
    let mut band = lap.shifted_band(0.0, -1.0);
    band.set_row_identity(0);
    let lu = band.factor()?;
    let mut b = rhs.values().to_vec();
    b[0] = 0.0;
    lu.solve_in_place(&mut b);
    let mean = compensated_sum(b.iter().copied()) / b.len() as f64;
    b.iter_mut().for_each(|v| *v -= mean);
    let phi = ScalarField::new(d, b)?;

    let residual = lap.apply(phi.values());
    let scale = lap.inf_norm() * phi.max_abs() + rhs.max_abs();
    let err = residual
        .iter()
        .zip(rhs.values())
        .map(|(r, f)| (-r - f).abs())
        .fold(0.0_f64, f64::max);
    if err > 1e-12 * scale.max(1e-300) {
        return Err(Error::Numerical {
            context: "Neumann Poisson solve",
            detail: format!("relative residual {:e}", err / scale),
        });
    }
    Ok(phi)
}
