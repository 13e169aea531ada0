//! Lattice grids over regions, finite-difference assembly of the coupled
//! operator, and masked Dirichlet solves.
//!
//! Operators are stored in generator form: nonnegative (when Metzler)
//! off-diagonal weights to interior rows and to boundary slots, plus a
//! separate potential. The diagonal is `potential - Σ weights`, so the
//! generator part annihilates constants exactly.

use std::io::Write;
use std::sync::{Arc, Once};

use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{SparseColMat, Triplet};
use thiserror::Error;

use crate::model::{ModelError, ProblemSpec, RegionSpec, Shape};

pub const NO_ROW: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Interior,
    /// Not an unknown, but referenced by some interior stencil; carries
    /// Dirichlet data.
    Boundary,
    Excluded,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum DiscretizeError {
    #[error("discretize::build_grid: regime {regime} has no interior nodes")]
    EmptyInterior { regime: usize },
    #[error("discretize::build_grid: interior of regime {regime} is not edge-connected")]
    DisconnectedInterior { regime: usize },
    #[error("discretize::build_grid: {0}")]
    BadRegion(String),
    #[error("discretize::assemble: cross-derivative stencil produced negative off-diagonal {value} at row {row}")]
    MixedTermPositivityFailure { row: usize, value: f64 },
    #[error("discretize::solve_dirichlet: singular or ill-conditioned system ({detail})")]
    SingularSystem { detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Node lattice `x = h * (start + i)` per axis, with per-(node, regime)
/// classification. Slots are `node * regimes + k`; rows enumerate interior
/// slots in slot order.
#[derive(Debug, Clone)]
pub struct Grid {
    pub dim: usize,
    pub regimes: usize,
    pub h: f64,
    pub start: [i64; 2],
    pub n: [usize; 2],
    pub kind: Vec<NodeKind>,
    pub row_of: Vec<usize>,
    pub slot_of_row: Vec<usize>,
}

impl Grid {
    pub fn n_nodes(&self) -> usize {
        self.n[0] * self.n[1]
    }

    pub fn n_rows(&self) -> usize {
        self.slot_of_row.len()
    }

    pub fn n_slots(&self) -> usize {
        self.n_nodes() * self.regimes
    }

    pub fn lattice(&self, node: usize) -> [i64; 2] {
        [self.start[0] + (node % self.n[0]) as i64, self.start[1] + (node / self.n[0]) as i64]
    }

    pub fn node_at(&self, ix: [i64; 2]) -> Option<usize> {
        let i = ix[0] - self.start[0];
        let j = ix[1] - self.start[1];
        if i < 0 || j < 0 || i as usize >= self.n[0] || j as usize >= self.n[1] {
            return None;
        }
        Some(i as usize + self.n[0] * j as usize)
    }

    pub fn coords(&self, node: usize) -> [f64; 2] {
        let l = self.lattice(node);
        [l[0] as f64 * self.h, if self.dim > 1 { l[1] as f64 * self.h } else { 0.0 }]
    }

    pub fn x(&self, node: usize) -> Vec<f64> {
        self.coords(node)[..self.dim].to_vec()
    }

    pub fn node_of_slot(&self, slot: usize) -> usize {
        slot / self.regimes
    }

    pub fn regime_of_slot(&self, slot: usize) -> usize {
        slot % self.regimes
    }

    pub fn slot(&self, node: usize, k: usize) -> usize {
        node * self.regimes + k
    }

    pub fn row(&self, node: usize, k: usize) -> Option<usize> {
        let r = self.row_of[self.slot(node, k)];
        (r != NO_ROW).then_some(r)
    }

    pub fn row_node(&self, r: usize) -> usize {
        self.node_of_slot(self.slot_of_row[r])
    }

    pub fn row_regime(&self, r: usize) -> usize {
        self.regime_of_slot(self.slot_of_row[r])
    }

    pub fn row_x(&self, r: usize) -> Vec<f64> {
        self.x(self.row_node(r))
    }

    /// Neighbor offset by `(di, dj)` lattice steps.
    pub fn shift(&self, node: usize, di: i64, dj: i64) -> Option<usize> {
        let l = self.lattice(node);
        self.node_at([l[0] + di, l[1] + dj])
    }

    /// Node of a point given in physical coordinates, if it is a lattice node.
    pub fn node_near(&self, x: &[f64]) -> Option<usize> {
        let i = (x[0] / self.h).round() as i64;
        let j = if self.dim > 1 { (x[1] / self.h).round() as i64 } else { 0 };
        self.node_at([i, j])
    }

    /// Interior node closest to `x` (ties to the lowest node index).
    pub fn nearest_interior_node(&self, x: &[f64]) -> Option<usize> {
        let mut best: Option<(f64, usize)> = None;
        for node in 0..self.n_nodes() {
            if (0..self.regimes).all(|k| self.row(node, k).is_none()) {
                continue;
            }
            let c = self.coords(node);
            let d: f64 = (0..self.dim).map(|a| (c[a] - x[a]).powi(2)).sum();
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, node));
            }
        }
        best.map(|(_, n)| n)
    }

    /// Axis neighbors (and diagonal neighbors in 2D) of a node.
    pub fn stencil(&self, node: usize) -> Vec<usize> {
        let mut out = vec![];
        if self.dim == 1 {
            for d in [-1, 1] {
                if let Some(n) = self.shift(node, d, 0) {
                    out.push(n);
                }
            }
        } else {
            for dj in -1..=1 {
                for di in -1..=1 {
                    if (di, dj) != (0, 0) {
                        if let Some(n) = self.shift(node, di, dj) {
                            out.push(n);
                        }
                    }
                }
            }
        }
        out
    }

    fn axis_neighbors(&self, node: usize) -> Vec<Option<usize>> {
        if self.dim == 1 {
            vec![self.shift(node, -1, 0), self.shift(node, 1, 0)]
        } else {
            vec![self.shift(node, -1, 0), self.shift(node, 1, 0), self.shift(node, 0, -1), self.shift(node, 0, 1)]
        }
    }

    /// Lattice-slot vector from a point function.
    pub fn sample(&self, f: impl Fn(&[f64], usize) -> f64) -> Vec<f64> {
        let mut out = vec![0.0; self.n_slots()];
        for node in 0..self.n_nodes() {
            let x = self.x(node);
            for k in 0..self.regimes {
                out[self.slot(node, k)] = f(&x, k);
            }
        }
        out
    }

    /// Row vector from a point function.
    pub fn sample_rows(&self, f: impl Fn(&[f64], usize) -> f64) -> Vec<f64> {
        (0..self.n_rows()).map(|r| f(&self.row_x(r), self.row_regime(r))).collect()
    }

    /// Rows at distance at most one lattice step (including diagonals) from a
    /// non-interior slot of the same regime.
    pub fn band_rows(&self) -> Vec<bool> {
        let mut band = vec![false; self.n_rows()];
        for (r, b) in band.iter_mut().enumerate() {
            let node = self.row_node(r);
            let k = self.row_regime(r);
            *b = self.stencil(node).iter().any(|&n| self.row(n, k).is_none())
                || self.stencil(node).len() < if self.dim == 1 { 2 } else { 8 };
        }
        band
    }

    /// Rebuilds classification so that exactly the slots with `keep` become
    /// interior.
    pub fn with_interior(&self, keep: impl Fn(usize) -> bool) -> Grid {
        let mut g = self.clone();
        let ns = self.n_slots();
        g.kind = vec![NodeKind::Excluded; ns];
        for s in 0..ns {
            if keep(s) {
                g.kind[s] = NodeKind::Interior;
            }
        }
        g.finish();
        g
    }

    fn finish(&mut self) {
        let ns = self.n_slots();
        let mut referenced = vec![false; ns];
        for node in 0..self.n_nodes() {
            for k in 0..self.regimes {
                if self.kind[self.slot(node, k)] != NodeKind::Interior {
                    continue;
                }
                for n in self.stencil(node) {
                    referenced[self.slot(n, k)] = true;
                }
                for j in 0..self.regimes {
                    referenced[self.slot(node, j)] = true;
                }
            }
        }
        self.row_of = vec![NO_ROW; ns];
        self.slot_of_row.clear();
        for s in 0..ns {
            if self.kind[s] == NodeKind::Interior {
                self.row_of[s] = self.slot_of_row.len();
                self.slot_of_row.push(s);
            } else if referenced[s] {
                self.kind[s] = NodeKind::Boundary;
            } else {
                self.kind[s] = NodeKind::Excluded;
            }
        }
    }
}

fn lattice_range(lo: f64, hi: f64, h: f64) -> (i64, usize) {
    let a = (lo / h - 1e-9).floor() as i64 - 1;
    let b = (hi / h + 1e-9).ceil() as i64 + 1;
    (a, (b - a + 1) as usize)
}

/// Rasterizes `region` on the lattice `hℤᵈ`. A node is interior for regime
/// `k` when it lies in the closed shape and all its axis neighbors lie in the
/// closed hull of the shape.
pub fn build_grid(spec: &ProblemSpec, region: &RegionSpec, h: f64) -> Result<Grid, DiscretizeError> {
    let dim = spec.dim;
    if !(h > 0.0 && h.is_finite()) {
        return Err(DiscretizeError::BadRegion(format!("spacing {h} must be positive")));
    }
    if region.regime_set.is_empty() || region.regime_set.iter().any(|&k| k >= spec.regimes) {
        return Err(DiscretizeError::BadRegion("regime set empty or out of range".into()));
    }
    let (lo, hi) = region.bbox();
    if lo.len() != dim {
        return Err(DiscretizeError::BadRegion(format!("region dimension {} differs from problem dimension {dim}", lo.len())));
    }
    let (wlo, whi) = spec.window.bbox(dim);
    for a in 0..dim {
        if lo[a] < wlo[a] - h || hi[a] > whi[a] + h {
            return Err(DiscretizeError::BadRegion(format!(
                "region [{:?}, {:?}] leaves the window [{wlo:?}, {whi:?}]",
                lo, hi
            )));
        }
        if hi[a] - lo[a] < h {
            return Err(DiscretizeError::BadRegion(format!("region thinner than one cell along axis {a}")));
        }
    }
    let (s0, n0) = lattice_range(lo[0], hi[0], h);
    let (s1, n1) = if dim > 1 { lattice_range(lo[1], hi[1], h) } else { (0, 1) };
    let mut grid = Grid {
        dim,
        regimes: spec.regimes,
        h,
        start: [s0, s1],
        n: [n0, n1],
        kind: vec![NodeKind::Excluded; n0 * n1 * spec.regimes],
        row_of: vec![],
        slot_of_row: vec![],
    };
    let tol = 1e-9 * h;
    for node in 0..grid.n_nodes() {
        let x = grid.x(node);
        let nbrs = grid.axis_neighbors(node);
        for k in 0..spec.regimes {
            let Some(shape) = region.shape_for(k) else { continue };
            if !shape.contains(&x, tol) {
                continue;
            }
            let hull = shape.hull();
            let ok = nbrs.iter().all(|n| n.is_some_and(|n| hull.contains(&grid.x(n), tol)));
            if ok {
                let s = grid.slot(node, k);
                grid.kind[s] = NodeKind::Interior;
            }
        }
    }
    grid.finish();
    for &k in &region.regime_set {
        let nodes: Vec<usize> = (0..grid.n_nodes()).filter(|&n| grid.row(n, k).is_some()).collect();
        if nodes.is_empty() {
            return Err(DiscretizeError::EmptyInterior { regime: k });
        }
        if matches!(region.shape_for(k), Some(Shape::Minus(..))) {
            continue;
        }
        let mut seen = vec![false; grid.n_nodes()];
        let mut stack = vec![nodes[0]];
        seen[nodes[0]] = true;
        let mut count = 1;
        while let Some(n) = stack.pop() {
            for m in grid.axis_neighbors(n).into_iter().flatten() {
                if !seen[m] && grid.row(m, k).is_some() {
                    seen[m] = true;
                    count += 1;
                    stack.push(m);
                }
            }
        }
        if count != nodes.len() {
            return Err(DiscretizeError::DisconnectedInterior { regime: k });
        }
    }
    Ok(grid)
}

/// Sparse block operator in generator form plus potential.
#[derive(Debug, Clone)]
pub struct DiscreteOperator {
    pub grid: Arc<Grid>,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub w: Vec<f64>,
    pub bptr: Vec<usize>,
    pub bslots: Vec<usize>,
    pub bw: Vec<f64>,
    /// Σ of all off-diagonal weights of each row, summed in storage order.
    pub outflow: Vec<f64>,
    pub potential: Vec<f64>,
    pub s0: f64,
    pub metzler_ok: bool,
}

struct RowBuilder {
    entries: Vec<(usize, f64)>,
}

impl RowBuilder {
    fn add(&mut self, slot: usize, w: f64) {
        if let Some(e) = self.entries.iter_mut().find(|e| e.0 == slot) {
            e.1 += w;
        } else {
            self.entries.push((slot, w));
        }
    }
}

impl DiscreteOperator {
    pub fn n(&self) -> usize {
        self.potential.len()
    }

    /// Builds from per-row slot weights; rows follow `grid`.
    pub fn from_rows(grid: Arc<Grid>, rows: Vec<Vec<(usize, f64)>>, potential: Vec<f64>) -> DiscreteOperator {
        let n = grid.n_rows();
        let mut op = DiscreteOperator {
            grid: grid.clone(),
            row_ptr: vec![0],
            cols: vec![],
            w: vec![],
            bptr: vec![0],
            bslots: vec![],
            bw: vec![],
            outflow: vec![0.0; n],
            potential,
            s0: 0.0,
            metzler_ok: true,
        };
        for (r, mut entries) in rows.into_iter().enumerate() {
            entries.sort_by_key(|e| e.0);
            for (slot, w) in entries {
                if w == 0.0 || slot == grid.slot_of_row[r] {
                    continue;
                }
                if w < 0.0 {
                    op.metzler_ok = false;
                }
                let col = grid.row_of[slot];
                if col != NO_ROW {
                    op.cols.push(col);
                    op.w.push(w);
                } else {
                    op.bslots.push(slot);
                    op.bw.push(w);
                }
            }
            op.row_ptr.push(op.cols.len());
            op.bptr.push(op.bslots.len());
        }
        op.refresh();
        op
    }

    /// Recomputes outflow and the shift bound after weights change.
    pub fn refresh(&mut self) {
        let n = self.n();
        let mut s0: f64 = 0.0;
        for r in 0..n {
            let mut s = 0.0;
            for i in self.row_ptr[r]..self.row_ptr[r + 1] {
                s += self.w[i];
            }
            for i in self.bptr[r]..self.bptr[r + 1] {
                s += self.bw[i];
            }
            self.outflow[r] = s;
            s0 = s0.max((self.potential[r] - s).abs());
        }
        self.s0 = s0 + 1.0;
    }

    pub fn diag(&self, r: usize) -> f64 {
        self.potential[r] - self.outflow[r]
    }

    pub fn require_metzler(&self) -> Result<(), DiscretizeError> {
        if self.metzler_ok {
            return Ok(());
        }
        for r in 0..self.n() {
            for i in self.row_ptr[r]..self.row_ptr[r + 1] {
                if self.w[i] < 0.0 {
                    return Err(DiscretizeError::MixedTermPositivityFailure { row: r, value: self.w[i] });
                }
            }
            for i in self.bptr[r]..self.bptr[r + 1] {
                if self.bw[i] < 0.0 {
                    return Err(DiscretizeError::MixedTermPositivityFailure { row: r, value: self.bw[i] });
                }
            }
        }
        Ok(())
    }

    /// Same operator with potential `c + kappa`.
    pub fn shifted(&self, kappa: f64) -> DiscreteOperator {
        let mut op = self.clone();
        for c in op.potential.iter_mut() {
            *c += kappa;
        }
        op.refresh();
        op
    }

    pub fn with_potential(&self, potential: Vec<f64>) -> DiscreteOperator {
        let mut op = self.clone();
        op.potential = potential;
        op.refresh();
        op
    }

    /// `(A u)_r = Σ w (u_j - u_r) + Σ w_b (g_b - u_r) + c_r u_r`, with `g`
    /// indexed by lattice slot (zero when `None`).
    pub fn apply(&self, u: &[f64], g: Option<&[f64]>) -> Vec<f64> {
        let mut out = vec![0.0; self.n()];
        for (r, o) in out.iter_mut().enumerate() {
            let ur = u[r];
            let mut s = 0.0;
            for i in self.row_ptr[r]..self.row_ptr[r + 1] {
                s += self.w[i] * (u[self.cols[i]] - ur);
            }
            for i in self.bptr[r]..self.bptr[r + 1] {
                let gb = g.map_or(0.0, |g| g[self.bslots[i]]);
                s += self.bw[i] * (gb - ur);
            }
            *o = s + self.potential[r] * ur;
        }
        out
    }

    /// Row-wise absolute sum `Σ|w| + |diag|`.
    pub fn row_abs_sum(&self, r: usize) -> f64 {
        let mut s = self.diag(r).abs();
        for i in self.row_ptr[r]..self.row_ptr[r + 1] {
            s += self.w[i].abs();
        }
        for i in self.bptr[r]..self.bptr[r + 1] {
            s += self.bw[i].abs();
        }
        s
    }

    /// Dense copy of `A` (interior block), row-major. For tests and small
    /// oracles.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.n();
        let mut m = vec![vec![0.0; n]; n];
        for r in 0..n {
            m[r][r] = self.diag(r);
            for i in self.row_ptr[r]..self.row_ptr[r + 1] {
                m[r][self.cols[i]] += self.w[i];
            }
        }
        m
    }

    /// Keeps the rows whose slot satisfies `keep`; couplings to dropped rows
    /// become boundary couplings.
    pub fn restrict(&self, keep: impl Fn(usize) -> bool) -> DiscreteOperator {
        let g = &self.grid;
        let newgrid = Arc::new(g.with_interior(|s| g.row_of[s] != NO_ROW && keep(s)));
        let mut rows = vec![];
        let mut pot = vec![];
        for nr in 0..newgrid.n_rows() {
            let slot = newgrid.slot_of_row[nr];
            let r = g.row_of[slot];
            let mut e = vec![];
            for i in self.row_ptr[r]..self.row_ptr[r + 1] {
                e.push((g.slot_of_row[self.cols[i]], self.w[i]));
            }
            for i in self.bptr[r]..self.bptr[r + 1] {
                e.push((self.bslots[i], self.bw[i]));
            }
            rows.push(e);
            pot.push(self.potential[r]);
        }
        DiscreteOperator::from_rows(newgrid, rows, pot)
    }

    /// Matrix Market coordinate export of the interior block, 1-based,
    /// `row col value` per line in row-major order.
    pub fn write_matrix_market(&self, mut out: impl Write) -> std::io::Result<()> {
        let n = self.n();
        let mut lines = vec![];
        for r in 0..n {
            let mut e: Vec<(usize, f64)> = vec![(r, self.diag(r))];
            for i in self.row_ptr[r]..self.row_ptr[r + 1] {
                e.push((self.cols[i], self.w[i]));
            }
            e.sort_by_key(|p| p.0);
            for (c, v) in e {
                lines.push((r + 1, c + 1, v));
            }
        }
        writeln!(out, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(out, "{n} {n} {}", lines.len())?;
        for (r, c, v) in lines {
            writeln!(out, "{r} {c} {v:e}")?;
        }
        Ok(())
    }
}

/// Finite-difference assembly: second differences for `a^{ii}`, a seven-point
/// cross stencil for `a^{12}`, first-order upwind drift (forward at `b = 0`),
/// regime coupling at the same node, and the potential iff requested.
pub fn assemble(spec: &ProblemSpec, grid: &Grid, include_potential: bool) -> Result<DiscreteOperator, DiscretizeError> {
    let grid = Arc::new(grid.clone());
    assemble_shared(spec, grid, include_potential)
}

pub fn assemble_shared(
    spec: &ProblemSpec,
    grid: Arc<Grid>,
    include_potential: bool,
) -> Result<DiscreteOperator, DiscretizeError> {
    let h = grid.h;
    let h2 = h * h;
    let mut rows = Vec::with_capacity(grid.n_rows());
    let mut pot = Vec::with_capacity(grid.n_rows());
    for r in 0..grid.n_rows() {
        let node = grid.row_node(r);
        let k = grid.row_regime(r);
        let x = grid.x(node);
        let loc = spec.local(&x, k)?;
        let mut rb = RowBuilder { entries: Vec::with_capacity(12) };
        let sl = |di: i64, dj: i64| grid.slot(grid.shift(node, di, dj).expect("stencil inside lattice"), k);
        for a in 0..grid.dim {
            let (dm, dp) = if a == 0 { ((-1, 0), (1, 0)) } else { ((0, -1), (0, 1)) };
            let diff = loc.a[a][a] / h2;
            rb.add(sl(dm.0, dm.1), diff);
            rb.add(sl(dp.0, dp.1), diff);
            let b = loc.b[a];
            if b >= 0.0 {
                rb.add(sl(dp.0, dp.1), b / h);
            } else {
                rb.add(sl(dm.0, dm.1), -b / h);
            }
        }
        if grid.dim == 2 {
            let a12 = 0.5 * (loc.a[0][1] + loc.a[1][0]);
            if a12 != 0.0 {
                let s = a12.abs() / h2;
                for (di, dj) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                    rb.add(sl(di, dj), -s);
                }
                let diag = if a12 > 0.0 { [(1, 1), (-1, -1)] } else { [(1, -1), (-1, 1)] };
                for (di, dj) in diag {
                    rb.add(sl(di, dj), s);
                }
            }
        }
        for j in 0..spec.regimes {
            if j != k {
                let m = spec.rate(&x, k, j)?;
                rb.add(grid.slot(node, j), m);
            }
        }
        pot.push(if include_potential { loc.c } else { 0.0 });
        rows.push(rb.entries);
    }
    Ok(DiscreteOperator::from_rows(grid, rows, pot))
}

static SEQ: Once = Once::new();

fn sequential() {
    SEQ.call_once(|| faer::set_global_parallelism(faer::Par::Seq));
}

/// Sparse LU of `sigma I - A`, refactorizable for new shifts with the same
/// pattern.
pub struct ShiftedLu {
    mat: SparseColMat<usize, f64>,
    diag_pos: Vec<usize>,
    base_diag: Vec<f64>,
    symbolic: SymbolicLu<usize>,
    lu: Lu<usize, f64>,
    pub sigma: f64,
}

impl ShiftedLu {
    pub fn new(op: &DiscreteOperator, sigma: f64) -> Result<ShiftedLu, DiscretizeError> {
        sequential();
        let n = op.n();
        let mut trips = Vec::with_capacity(op.cols.len() + n);
        for r in 0..n {
            trips.push(Triplet::new(r, r, sigma - op.diag(r)));
            for i in op.row_ptr[r]..op.row_ptr[r + 1] {
                trips.push(Triplet::new(r, op.cols[i], -op.w[i]));
            }
        }
        let mat = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &trips)
            .map_err(|e| DiscretizeError::SingularSystem { detail: format!("{e:?}") })?;
        let mut diag_pos = vec![0; n];
        {
            let sym = mat.symbolic();
            let cp = sym.col_ptr();
            let ri = sym.row_idx();
            for c in 0..n {
                for p in cp[c]..cp[c + 1] {
                    if ri[p] == c {
                        diag_pos[c] = p;
                    }
                }
            }
        }
        let base_diag: Vec<f64> = (0..n).map(|r| op.diag(r)).collect();
        let symbolic = SymbolicLu::try_new(mat.symbolic())
            .map_err(|e| DiscretizeError::SingularSystem { detail: format!("{e:?}") })?;
        let lu = Lu::try_new_with_symbolic(symbolic.clone(), mat.as_ref())
            .map_err(|e| DiscretizeError::SingularSystem { detail: format!("{e:?}") })?;
        Ok(ShiftedLu { mat, diag_pos, base_diag, symbolic, lu, sigma })
    }

    pub fn reshift(&mut self, sigma: f64) -> Result<(), DiscretizeError> {
        {
            let val = self.mat.val_mut();
            for (c, &p) in self.diag_pos.iter().enumerate() {
                val[p] = sigma - self.base_diag[c];
            }
        }
        self.lu = Lu::try_new_with_symbolic(self.symbolic.clone(), self.mat.as_ref())
            .map_err(|e| DiscretizeError::SingularSystem { detail: format!("{e:?}") })?;
        self.sigma = sigma;
        Ok(())
    }

    /// Overwrites `rhs` with `(sigma I - A)^{-1} rhs`.
    pub fn solve(&self, rhs: &mut [f64]) {
        use faer::linalg::solvers::Solve;
        self.lu.solve_in_place(faer::col::ColMut::from_slice_mut(rhs));
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Solves `A u = -f` on interior rows with `u = g` on boundary slots.
/// `g` is indexed by lattice slot, `f` and the result by row.
pub fn solve_dirichlet(op: &DiscreteOperator, g: &[f64], f: &[f64]) -> Result<Vec<f64>, DiscretizeError> {
    let n = op.n();
    assert_eq!(f.len(), n);
    let mut rhs: Vec<f64> = (0..n)
        .map(|r| {
            let mut s = f[r];
            for i in op.bptr[r]..op.bptr[r + 1] {
                s += op.bw[i] * g[op.bslots[i]];
            }
            s
        })
        .collect();
    // -A = 0·I - A
    let lu = ShiftedLu::new(op, 0.0)?;
    lu.solve(&mut rhs);
    let mut u = rhs;
    if u.iter().any(|v| !v.is_finite()) {
        return Err(DiscretizeError::SingularSystem { detail: "non-finite solution".into() });
    }
    let gmax = op.bslots.iter().fold(0.0f64, |m, &s| m.max(g[s].abs()));
    let bound = |u: &[f64]| {
        1e-10 * (1.0 + inf_norm(f) + gmax) + 64.0 * f64::EPSILON * (0..n).map(|r| op.row_abs_sum(r)).fold(0.0, f64::max) * inf_norm(u)
    };
    for _ in 0..3 {
        let au = op.apply(&u, Some(g));
        let res: Vec<f64> = au.iter().zip(f).map(|(a, b)| a + b).collect();
        let rn = inf_norm(&res);
        if rn <= bound(&u) {
            return Ok(u);
        }
        // refinement: (-A) du = res
        let mut du = res;
        lu.solve(&mut du);
        for (a, d) in u.iter_mut().zip(&du) {
            *a += d;
        }
    }
    let au = op.apply(&u, Some(g));
    let rn = au.iter().zip(f).map(|(a, b)| (a + b).abs()).fold(0.0, f64::max);
    if rn <= bound(&u) {
        Ok(u)
    } else {
        Err(DiscretizeError::SingularSystem { detail: format!("residual {rn:e} after refinement") })
    }
}

/// Lattice-slot vector holding `u` on rows and `g` elsewhere.
pub fn expand(grid: &Grid, u: &[f64], g: Option<&[f64]>) -> Vec<f64> {
    let mut out = match g {
        Some(g) => g.to_vec(),
        None => vec![0.0; grid.n_slots()],
    };
    for (r, &v) in u.iter().enumerate() {
        out[grid.slot_of_row[r]] = v;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Oracle, Window};

    fn lap1(regimes: usize) -> ProblemSpec {
        ProblemSpec::new(1, regimes, Window::Ball { radius: 10.0 })
    }

    fn interior_x(g: &Grid, k: usize) -> Vec<f64> {
        (0..g.n_nodes()).filter(|&n| g.row(n, k).is_some()).map(|n| g.x(n)[0]).collect()
    }

    #[test]
    fn unit_ball_1d() {
        let g = build_grid(&lap1(1), &RegionSpec::ball(1, 1.0, 1), 0.5).unwrap();
        assert_eq!(interior_x(&g, 0), vec![-0.5, 0.0, 0.5]);
    }

    #[test]
    fn unit_disk_2d_has_five_nodes() {
        let spec = ProblemSpec::new(2, 1, Window::Ball { radius: 3.0 });
        let g = build_grid(&spec, &RegionSpec::ball(2, 1.0, 1), 0.5).unwrap();
        assert_eq!(g.n_rows(), 5);
    }

    #[test]
    fn regimes_outside_set_are_data() {
        let spec = lap1(2);
        let region = RegionSpec { regime_set: vec![0], ..RegionSpec::ball(1, 1.0, 2) };
        let g = build_grid(&spec, &region, 0.25).unwrap();
        for n in 0..g.n_nodes() {
            assert!(g.row(n, 1).is_none());
            if g.row(n, 0).is_some() {
                assert_eq!(g.kind[g.slot(n, 1)], NodeKind::Boundary);
            }
        }
    }

    #[test]
    fn second_difference_stencil() {
        let h = 0.25;
        let g = build_grid(&lap1(1), &RegionSpec::ball(1, 1.0, 1), h).unwrap();
        let op = assemble(&lap1(1), &g, true).unwrap();
        let d = op.to_dense();
        let mid = g.row(g.node_near(&[0.0]).unwrap(), 0).unwrap();
        assert_eq!(d[mid][mid - 1], 1.0 / (h * h));
        assert_eq!(d[mid][mid], -2.0 / (h * h));
        assert_eq!(d[mid][mid + 1], 1.0 / (h * h));
    }

    #[test]
    fn positive_drift_goes_forward() {
        let h = 0.25;
        let spec = lap1(1).with_drift(0, vec![Oracle::Const(2.0)]);
        let base = assemble(&lap1(1), &build_grid(&lap1(1), &RegionSpec::ball(1, 1.0, 1), h).unwrap(), true).unwrap();
        let g = build_grid(&spec, &RegionSpec::ball(1, 1.0, 1), h).unwrap();
        let op = assemble(&spec, &g, true).unwrap();
        let (a, b) = (op.to_dense(), base.to_dense());
        let mid = g.row(g.node_near(&[0.0]).unwrap(), 0).unwrap();
        assert_eq!(a[mid][mid - 1] - b[mid][mid - 1], 0.0);
        assert_eq!(a[mid][mid] - b[mid][mid], -2.0 / h);
        assert_eq!(a[mid][mid + 1] - b[mid][mid + 1], 2.0 / h);
    }

    #[test]
    fn coupling_entries() {
        let spec = lap1(2).with_rate(0, 1, Oracle::Const(1.0)).with_rate(1, 0, Oracle::Const(1.0));
        let g = build_grid(&spec, &RegionSpec::ball(1, 1.0, 2), 0.25).unwrap();
        let op = assemble(&spec, &g, true).unwrap();
        let plain = assemble(&lap1(2), &g, true).unwrap();
        let (a, b) = (op.to_dense(), plain.to_dense());
        let node = g.node_near(&[0.0]).unwrap();
        let (r0, r1) = (g.row(node, 0).unwrap(), g.row(node, 1).unwrap());
        assert_eq!(a[r0][r1], 1.0);
        assert_eq!(a[r1][r0], 1.0);
        assert_eq!(a[r0][r0] - b[r0][r0], -1.0);
    }

    #[test]
    fn strong_cross_term_breaks_metzler() {
        let spec = ProblemSpec::new(2, 1, Window::Ball { radius: 3.0 }).with_diffusion(
            0,
            vec![Oracle::Const(1.0), Oracle::Const(1.5), Oracle::Const(1.5), Oracle::Const(3.0)],
        );
        let g = build_grid(&spec, &RegionSpec::ball(2, 1.0, 1), 0.25).unwrap();
        let op = assemble(&spec, &g, true).unwrap();
        assert!(!op.metzler_ok);
        assert!(matches!(op.require_metzler(), Err(DiscretizeError::MixedTermPositivityFailure { .. })));
        let mild = ProblemSpec::new(2, 1, Window::Ball { radius: 3.0 }).with_diffusion(
            0,
            vec![Oracle::Const(1.0), Oracle::Const(0.5), Oracle::Const(0.5), Oracle::Const(1.0)],
        );
        assert!(assemble(&mild, &g, true).unwrap().metzler_ok);
    }

    #[test]
    fn poisson_is_second_order() {
        let spec = lap1(1);
        let region = RegionSpec::all(Shape::interval(-1.0, 1.0), 1);
        let mut errs = vec![];
        for h in [0.1, 0.05] {
            let g = build_grid(&spec, &region, h).unwrap();
            // non-polynomial right-hand side so the scheme is not exact
            let f = g.sample_rows(|x, _| (x[0]).cos());
            let op = assemble(&spec, &g, true).unwrap();
            let u = solve_dirichlet(&op, &vec![0.0; g.n_slots()], &f).unwrap();
            let exact = |x: f64| x.cos() - 1f64.cos();
            let e = (0..g.n_rows()).map(|r| (u[r] - exact(g.row_x(r)[0])).abs()).fold(0.0, f64::max);
            errs.push(e);
        }
        let ratio = errs[0] / errs[1];
        assert!(ratio > 3.6 && ratio < 4.4, "ratio {ratio}");
    }

    #[test]
    fn poisson_quadratic_is_exact() {
        let spec = lap1(1);
        let g = build_grid(&spec, &RegionSpec::all(Shape::interval(-1.0, 1.0), 1), 0.05).unwrap();
        let op = assemble(&spec, &g, true).unwrap();
        let u = solve_dirichlet(&op, &vec![0.0; g.n_slots()], &vec![1.0; g.n_rows()]).unwrap();
        for r in 0..g.n_rows() {
            let x = g.row_x(r)[0];
            assert!((u[r] - 0.5 * (1.0 - x * x)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_data_gives_zero() {
        let spec = lap1(2).with_rate(0, 1, Oracle::Const(1.0));
        let g = build_grid(&spec, &RegionSpec::ball(1, 2.0, 2), 0.1).unwrap();
        let op = assemble(&spec, &g, true).unwrap();
        let u = solve_dirichlet(&op, &vec![0.0; g.n_slots()], &vec![0.0; g.n_rows()]).unwrap();
        assert!(u.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn matrix_market_format() {
        let g = build_grid(&lap1(1), &RegionSpec::ball(1, 1.0, 1), 0.5).unwrap();
        let op = assemble(&lap1(1), &g, true).unwrap();
        let mut buf = vec![];
        op.write_matrix_market(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "%%MatrixMarket matrix coordinate real general");
        assert_eq!(lines[1], "3 3 7");
        assert_eq!(lines[2], "1 1 -8e0");
        assert_eq!(lines[3], "1 2 4e0");
    }

    #[test]
    fn restriction_moves_couplings_to_boundary() {
        let g = build_grid(&lap1(1), &RegionSpec::ball(1, 1.0, 1), 0.25).unwrap();
        let op = assemble(&lap1(1), &g, true).unwrap();
        let sub = op.restrict(|s| g.x(g.node_of_slot(s))[0].abs() < 0.3);
        assert_eq!(sub.n(), 3);
        assert_eq!(sub.to_dense()[0][0], op.to_dense()[0][0]);
        assert_eq!(sub.bslots.len(), 2);
    }
}
