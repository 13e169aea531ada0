//! Twisted (ground-state transformed) operators built from a positive grid
//! function, and the discrete product identity.

use std::sync::Arc;

use thiserror::Error;

use crate::discretize::{assemble_shared, expand, DiscreteOperator, DiscretizeError, Grid, NO_ROW};
use crate::model::{norm, Oracle, ProblemSpec};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TwistError {
    #[error("twist::twist: grid function not positive at row {row} (value {value})")]
    NonpositivePsi { row: usize, value: f64 },
    #[error("twist::twist: {0}")]
    BadInput(String),
    #[error(transparent)]
    Discretize(#[from] DiscretizeError),
}

/// Values on lattice slots with a definedness mask, interpolated
/// multilinearly per regime.
#[derive(Debug, Clone)]
pub struct LatticeField {
    pub grid: Arc<Grid>,
    pub values: Vec<f64>,
    pub defined: Vec<bool>,
}

impl LatticeField {
    /// Field defined on the interior slots of `grid`.
    pub fn from_rows(grid: &Arc<Grid>, rows: &[f64]) -> LatticeField {
        LatticeField {
            grid: grid.clone(),
            values: expand(grid, rows, None),
            defined: (0..grid.n_slots()).map(|s| grid.row_of[s] != NO_ROW).collect(),
        }
    }

    /// `None` when a corner with nonzero weight is undefined or off the
    /// lattice.
    pub fn interp(&self, x: &[f64], k: usize) -> Option<f64> {
        let g = &self.grid;
        let mut base = [0i64; 2];
        let mut t = [0.0; 2];
        for a in 0..g.dim {
            let s = x[a] / g.h;
            // lattice points reproduce node values exactly
            let r = s.round();
            let (f, frac) = if (s - r).abs() <= 1e-9 { (r, 0.0) } else { (s.floor(), s - s.floor()) };
            base[a] = f as i64;
            t[a] = frac;
        }
        let mut acc = 0.0;
        let corners = if g.dim == 1 { 2 } else { 4 };
        for c in 0..corners {
            let (di, dj) = ((c & 1) as i64, (c >> 1) as i64);
            let w = (if di == 1 { t[0] } else { 1.0 - t[0] }) * (if dj == 1 { t[1] } else { 1.0 - t[1] });
            if w == 0.0 {
                continue;
            }
            let node = g.node_at([base[0] + di, base[1] + dj])?;
            let s = g.slot(node, k);
            if !self.defined[s] {
                return None;
            }
            acc += w * self.values[s];
        }
        Some(acc)
    }
}

#[derive(Debug)]
struct Fields {
    /// One per axis.
    correction: Vec<LatticeField>,
    /// `rates[k][j]`, defined at slots of regime k.
    rates: Vec<Vec<LatticeField>>,
    psi: LatticeField,
}

/// Base problem with drift `b + 2a∇ψ`, rates `m Ψ_j/Ψ_k` and zero potential,
/// tabulated on the data window of the grid.
#[derive(Debug, Clone)]
pub struct TwistedProblem {
    pub base: ProblemSpec,
    pub grid: Arc<Grid>,
    pub lambda: f64,
    /// Ψ on lattice slots (0 off the interior).
    pub psi: Vec<f64>,
    pub log_psi: Vec<f64>,
    /// Interior slots at least one cell away from any non-interior slot.
    pub window: Vec<bool>,
    pub drift_correction: Vec<[f64; 2]>,
    pub twisted_rates: Vec<Vec<f64>>,
    fields: Arc<Fields>,
}

pub fn twist(spec: &ProblemSpec, psi_rows: &[f64], lambda: f64, grid: &Arc<Grid>) -> Result<TwistedProblem, TwistError> {
    if psi_rows.len() != grid.n_rows() {
        return Err(TwistError::BadInput(format!("{} values for {} rows", psi_rows.len(), grid.n_rows())));
    }
    if !lambda.is_finite() {
        return Err(TwistError::BadInput("eigenvalue not finite".into()));
    }
    for (row, &value) in psi_rows.iter().enumerate() {
        if !(value > 0.0 && value.is_finite()) {
            return Err(TwistError::NonpositivePsi { row, value });
        }
    }
    let ns = grid.n_slots();
    let psi = expand(grid, psi_rows, None);
    let mut log_psi = vec![0.0; ns];
    for r in 0..grid.n_rows() {
        log_psi[grid.slot_of_row[r]] = psi_rows[r].ln();
    }
    let band = grid.band_rows();
    let mut window = vec![false; ns];
    for r in 0..grid.n_rows() {
        window[grid.slot_of_row[r]] = !band[r];
    }
    let h = grid.h;
    let mut grad = vec![[0.0; 2]; ns];
    let mut correction = vec![[0.0; 2]; ns];
    let mut rates = vec![vec![0.0; spec.regimes]; ns];
    for s in 0..ns {
        if !window[s] {
            continue;
        }
        let node = grid.node_of_slot(s);
        let k = grid.regime_of_slot(s);
        let at = |n: Option<usize>| n.and_then(|n| grid.row(n, k)).map(|r| psi_rows[r].ln());
        for a in 0..grid.dim {
            let (m, p) = if a == 0 { ((-1, 0), (1, 0)) } else { ((0, -1), (0, 1)) };
            let lm = at(grid.shift(node, m.0, m.1));
            let lp = at(grid.shift(node, p.0, p.1));
            let l0 = log_psi[s];
            grad[s][a] = match (lm, lp) {
                (Some(lm), Some(lp)) => (lp - lm) / (2.0 * h),
                (None, Some(lp)) => (lp - l0) / h,
                (Some(lm), None) => (l0 - lm) / h,
                (None, None) => 0.0,
            };
        }
        let x = grid.x(node);
        let loc = spec.local(&x, k).map_err(DiscretizeError::from)?;
        for a in 0..grid.dim {
            let mut v = 0.0;
            for b in 0..grid.dim {
                v += loc.a[a][b] * grad[s][b];
            }
            correction[s][a] = 2.0 * v;
        }
        for j in 0..spec.regimes {
            if j == k {
                continue;
            }
            let m = spec.rate(&x, k, j).map_err(DiscretizeError::from)?;
            rates[s][j] = match grid.row(node, j) {
                Some(rj) => m * (psi_rows[rj] / psi_rows[grid.row_of[s]]),
                None => 0.0,
            };
        }
    }
    let field = |values: Vec<f64>, regime: Option<usize>| LatticeField {
        grid: grid.clone(),
        values,
        defined: (0..ns).map(|s| window[s] && regime.is_none_or(|k| grid.regime_of_slot(s) == k)).collect(),
    };
    let fields = Fields {
        correction: (0..grid.dim).map(|a| field(correction.iter().map(|c| c[a]).collect(), None)).collect(),
        rates: (0..spec.regimes)
            .map(|k| (0..spec.regimes).map(|j| field(rates.iter().map(|r| r[j]).collect(), Some(k))).collect())
            .collect(),
        psi: LatticeField::from_rows(grid, psi_rows),
    };
    Ok(TwistedProblem {
        base: spec.clone(),
        grid: grid.clone(),
        lambda,
        psi,
        log_psi,
        window,
        drift_correction: correction,
        twisted_rates: rates,
        fields: Arc::new(fields),
    })
}

impl TwistedProblem {
    /// Whether every coefficient is defined at `(x, k)`.
    pub fn in_window(&self, x: &[f64], k: usize) -> bool {
        self.fields.correction[0].interp(x, k).is_some()
    }

    pub fn correction_at(&self, x: &[f64], k: usize) -> Option<[f64; 2]> {
        let mut out = [0.0; 2];
        for (a, f) in self.fields.correction.iter().enumerate() {
            out[a] = f.interp(x, k)?;
        }
        Some(out)
    }

    pub fn rate_at(&self, x: &[f64], k: usize, j: usize) -> Option<f64> {
        self.fields.rates[k][j].interp(x, k)
    }

    /// Ψ interpolated at `(x, k)` from interior slots.
    pub fn psi_at(&self, x: &[f64], k: usize) -> Option<f64> {
        self.fields.psi.interp(x, k)
    }

    /// The twisted coefficients as a problem specification. Coefficients are
    /// NaN outside the data window, which evaluation reports as an oracle
    /// failure.
    pub fn as_spec(&self) -> ProblemSpec {
        let mut spec = self.base.generator();
        for k in 0..spec.regimes {
            let mut drift = vec![];
            for a in 0..spec.dim {
                let base = self.base.drift[k][a].clone();
                let f = self.fields.clone();
                drift.push(Oracle::func(move |x| {
                    let b = base.try_eval(x, k).unwrap_or(f64::NAN);
                    b + f.correction[a].interp(x, k).unwrap_or(f64::NAN)
                }));
            }
            spec.drift[k] = drift;
            for j in 0..spec.regimes {
                if j != k {
                    let f = self.fields.clone();
                    spec.rates[k][j] = Oracle::func(move |x| f.rates[k][j].interp(x, k).unwrap_or(f64::NAN));
                }
            }
        }
        spec
    }

    /// Grid whose interior is the data window.
    pub fn twisted_grid(&self) -> Grid {
        self.grid.with_interior(|s| self.window[s])
    }

    /// Assembled twisted generator on the data window.
    pub fn assemble(&self) -> Result<DiscreteOperator, TwistError> {
        Ok(assemble_shared(&self.as_spec(), Arc::new(self.twisted_grid()), false)?)
    }
}

/// Exact discrete ground-state transform of `op` by `psi` (rows):
/// weights `w Ψ_j / Ψ_r`, no boundary coupling, zero potential.
pub fn doob_transform(op: &DiscreteOperator, psi: &[f64]) -> DiscreteOperator {
    let mut out = op.clone();
    for r in 0..op.n() {
        for i in op.row_ptr[r]..op.row_ptr[r + 1] {
            out.w[i] = op.w[i] * (psi[op.cols[i]] / psi[r]);
        }
    }
    out.bw.iter_mut().for_each(|w| *w = 0.0);
    out.potential.iter_mut().for_each(|c| *c = 0.0);
    out.refresh();
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualNorms {
    pub max: f64,
    pub mean: f64,
    pub rows: usize,
}

/// `L(ΦΨ) - Φ LΨ - Ψ L̃Φ` at data-window rows (restricted to `|x| ≤ inner`
/// when given), with `L` the assembled generator of `spec` and `L̃` the
/// assembled twisted generator. `phi` is indexed by lattice slot.
pub fn product_identity_residual(
    spec: &ProblemSpec,
    psi_rows: &[f64],
    lambda: f64,
    grid: &Arc<Grid>,
    phi: &[f64],
    inner: Option<f64>,
) -> Result<ResidualNorms, TwistError> {
    let tp = twist(spec, psi_rows, lambda, grid)?;
    let lop = assemble_shared(&spec.generator(), grid.clone(), false)?;
    let top = tp.assemble()?;
    let n = grid.n_rows();
    let prod: Vec<f64> = (0..n).map(|r| phi[grid.slot_of_row[r]] * psi_rows[r]).collect();
    let l_prod = lop.apply(&prod, None);
    let l_psi = lop.apply(psi_rows, None);
    let tg = &top.grid;
    let phi_rows: Vec<f64> = (0..tg.n_rows()).map(|r| phi[tg.slot_of_row[r]]).collect();
    let lt_phi = top.apply(&phi_rows, Some(phi));
    let mut max: f64 = 0.0;
    let mut sum = 0.0;
    let mut count = 0;
    for tr in 0..tg.n_rows() {
        let s = tg.slot_of_row[tr];
        if inner.is_some_and(|r| norm(&tg.x(tg.node_of_slot(s))) > r + 1e-12) {
            continue;
        }
        let r = grid.row_of[s];
        let res = l_prod[r] - phi[s] * l_psi[r] - psi_rows[r] * lt_phi[tr];
        max = max.max(res.abs());
        sum += res.abs();
        count += 1;
    }
    Ok(ResidualNorms { max, mean: if count > 0 { sum / count as f64 } else { 0.0 }, rows: count })
}
