//! Cone-program intermediate representation and solver.
//!
//! Programs are in the standard form
//!
//! ```text
//! minimize    c'x
//! subject to  A x = b,   x in K
//! ```
//!
//! where `K` is a product of free blocks, nonnegative rays, and second-order
//! cones, in variable order. Inequalities are compiled to this form by the
//! callers via slack variables. [`solve`] runs a self-contained primal-dual
//! interior-point method on the homogeneous self-dual embedding, so results
//! never depend on an external solver; the same contract could be served by
//! one if a caller swaps the implementation behind [`solve`].

pub mod linalg;
mod ipm;

use linalg::CscMatrix;
use std::fmt::Write as _;
use std::time::Duration;

/// One block of the cone product. Blocks partition the variable vector in
/// order; a `Soc(k)` block's first coordinate is the cone's radial term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConeBlock {
    Free(usize),
    Nonneg(usize),
    Soc(usize),
}

impl ConeBlock {
    pub fn len(&self) -> usize {
        match *self {
            ConeBlock::Free(k) | ConeBlock::Nonneg(k) | ConeBlock::Soc(k) => k,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ProgramError {
    #[error("second-order cone block must have dimension >= 2, got {0}")]
    SocTooSmall(usize),
    #[error("cone layout covers {covered} variables, program has {nvars}")]
    LayoutMismatch { covered: usize, nvars: usize },
    #[error("row {row} references column {col}, program has {nvars} variables")]
    ColumnOutOfRange { row: usize, col: usize, nvars: usize },
}

/// A conic program in standard form.
#[derive(Debug, Clone)]
pub struct ConicProgram {
    pub objective: Vec<f64>,
    /// Constant added to `c'x` when reporting objective values.
    pub objective_offset: f64,
    pub a: CscMatrix,
    pub b: Vec<f64>,
    pub cones: Vec<ConeBlock>,
    pub var_names: Vec<String>,
    pub row_names: Vec<String>,
}

impl ConicProgram {
    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn num_rows(&self) -> usize {
        self.b.len()
    }

    pub fn validate(&self) -> Result<(), ProgramError> {
        let covered: usize = self.cones.iter().map(|c| c.len()).sum();
        if covered != self.num_vars() {
            return Err(ProgramError::LayoutMismatch {
                covered,
                nvars: self.num_vars(),
            });
        }
        for c in &self.cones {
            if let ConeBlock::Soc(k) = *c {
                if k < 2 {
                    return Err(ProgramError::SocTooSmall(k));
                }
            }
        }
        debug_assert_eq!(self.a.nrows, self.num_rows());
        debug_assert_eq!(self.a.ncols, self.num_vars());
        Ok(())
    }

    /// Plain-text dump of the program for external cross-checking.
    pub fn debug_dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "vars {} rows {}", self.num_vars(), self.num_rows());
        let _ = writeln!(out, "cones {:?}", self.cones);
        for (j, name) in self.var_names.iter().enumerate() {
            if self.objective[j] != 0.0 {
                let _ = writeln!(out, "obj {} {:+.17e}", name, self.objective[j]);
            }
        }
        if self.objective_offset != 0.0 {
            let _ = writeln!(out, "obj-offset {:+.17e}", self.objective_offset);
        }
        // walk rows through the transpose: collect per-row terms
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.num_rows()];
        for c in 0..self.a.ncols {
            for p in self.a.col_ptr[c]..self.a.col_ptr[c + 1] {
                rows[self.a.row_idx[p]].push((c, self.a.values[p]));
            }
        }
        for (r, terms) in rows.iter().enumerate() {
            let _ = write!(out, "row {}:", self.row_names[r]);
            for &(c, v) in terms {
                let _ = write!(out, " {:+.17e}*{}", v, self.var_names[c]);
            }
            let _ = writeln!(out, " = {:+.17e}", self.b[r]);
        }
        out
    }
}

/// Incremental builder for [`ConicProgram`]. Variables are appended in cone
/// order; rows are sparse equality constraints.
#[derive(Debug, Default)]
pub struct ProgramBuilder {
    cones: Vec<ConeBlock>,
    var_names: Vec<String>,
    objective: Vec<f64>,
    objective_offset: f64,
    triplets: Vec<(usize, usize, f64)>,
    rhs: Vec<f64>,
    row_names: Vec<String>,
}

impl ProgramBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_vars(&self) -> usize {
        self.var_names.len()
    }

    fn push_var(&mut self, name: String) -> usize {
        self.var_names.push(name);
        self.objective.push(0.0);
        self.var_names.len() - 1
    }

    pub fn free_var(&mut self, name: impl Into<String>) -> usize {
        match self.cones.last_mut() {
            Some(ConeBlock::Free(k)) => *k += 1,
            _ => self.cones.push(ConeBlock::Free(1)),
        }
        self.push_var(name.into())
    }

    pub fn nonneg_var(&mut self, name: impl Into<String>) -> usize {
        match self.cones.last_mut() {
            Some(ConeBlock::Nonneg(k)) => *k += 1,
            _ => self.cones.push(ConeBlock::Nonneg(1)),
        }
        self.push_var(name.into())
    }

    /// Append a second-order cone block; the first name is the radial term.
    pub fn soc_vars(&mut self, names: &[&str]) -> Vec<usize> {
        assert!(names.len() >= 2, "soc block needs dimension >= 2");
        self.cones.push(ConeBlock::Soc(names.len()));
        names.iter().map(|n| self.push_var((*n).to_string())).collect()
    }

    /// Add `coef * x[col]` to the objective.
    pub fn add_objective(&mut self, col: usize, coef: f64) {
        self.objective[col] += coef;
    }

    pub fn add_objective_offset(&mut self, v: f64) {
        self.objective_offset += v;
    }

    /// Add an equality row `sum coef*x = rhs`; returns the row index.
    pub fn add_eq(&mut self, name: impl Into<String>, terms: &[(usize, f64)], rhs: f64) -> usize {
        let row = self.rhs.len();
        for &(col, coef) in terms {
            if coef != 0.0 {
                self.triplets.push((row, col, coef));
            }
        }
        self.rhs.push(rhs);
        self.row_names.push(name.into());
        row
    }

    /// Add `sum coef*x + slack = rhs` with a fresh nonnegative slack,
    /// i.e. the inequality `sum coef*x <= rhs`. Returns the slack column.
    pub fn add_le(&mut self, name: impl Into<String>, terms: &[(usize, f64)], rhs: f64) -> usize {
        let name = name.into();
        let slack = self.nonneg_var(format!("slack[{name}]"));
        let mut t = terms.to_vec();
        t.push((slack, 1.0));
        self.add_eq(name, &t, rhs);
        slack
    }

    pub fn build(self) -> Result<ConicProgram, ProgramError> {
        let nvars = self.var_names.len();
        for &(row, col, _) in &self.triplets {
            if col >= nvars {
                return Err(ProgramError::ColumnOutOfRange {
                    row,
                    col,
                    nvars,
                });
            }
        }
        let prog = ConicProgram {
            a: CscMatrix::from_triplets(self.rhs.len(), nvars, &self.triplets),
            objective: self.objective,
            objective_offset: self.objective_offset,
            b: self.rhs,
            cones: self.cones,
            var_names: self.var_names,
            row_names: self.row_names,
        };
        prog.validate()?;
        Ok(prog)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterationLimit,
    TimeLimit,
}

/// Normalized residuals (infinity norms) of a solution.
#[derive(Debug, Clone, Copy, Default)]
pub struct Residuals {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
}

impl Residuals {
    pub fn max(&self) -> f64 {
        self.primal.max(self.dual).max(self.gap)
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub status: SolveStatus,
    pub primal: Vec<f64>,
    /// Multipliers of the equality rows.
    pub dual: Vec<f64>,
    /// Cone-dual variables scattered to variable space (zero on free coords).
    pub dual_cone: Vec<f64>,
    pub objective_value: f64,
    pub residuals: Residuals,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct SolverSettings {
    pub tol: f64,
    pub max_iters: usize,
    pub time_budget: Option<Duration>,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            tol: 1e-8,
            max_iters: 200,
            time_budget: None,
        }
    }
}

impl SolverSettings {
    pub fn with_tol(tol: f64) -> Self {
        SolverSettings {
            tol,
            ..Default::default()
        }
    }
}

/// Solve a conic program. Deterministic: identical inputs produce the
/// identical iterate sequence. Limits are reported through the status,
/// never by panicking.
pub fn solve(program: &ConicProgram, settings: &SolverSettings) -> SolveResult {
    program.validate().expect("malformed conic program");
    ipm::solve_hsde(program, settings)
}

/// Residual report recomputed from scratch, independent of solver internals.
#[derive(Debug, Clone, Copy)]
pub struct CertificateReport {
    /// False when the result carries no primal/dual pair to check.
    pub applicable: bool,
    /// `||Ax - b||_inf / (1 + ||b||_inf)`
    pub primal_residual: f64,
    /// Worst violation of cone membership of the primal point (absolute).
    pub primal_cone_violation: f64,
    /// `||c - A'y - z||_inf / (1 + ||c||_inf)`
    pub dual_residual: f64,
    /// Worst violation of dual-cone membership of `z` (absolute).
    pub dual_cone_violation: f64,
    /// `|c'x - b'y| / max(1, |c'x|)`
    pub gap: f64,
}

impl CertificateReport {
    pub fn not_applicable() -> Self {
        CertificateReport {
            applicable: false,
            primal_residual: 0.0,
            primal_cone_violation: 0.0,
            dual_residual: 0.0,
            dual_cone_violation: 0.0,
            gap: 0.0,
        }
    }

    pub fn max_residual(&self) -> f64 {
        self.primal_residual
            .max(self.primal_cone_violation)
            .max(self.dual_residual)
            .max(self.dual_cone_violation)
            .max(self.gap)
    }
}

fn cone_violation(cones: &[ConeBlock], x: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    let mut at = 0;
    for c in cones {
        match *c {
            ConeBlock::Free(k) => at += k,
            ConeBlock::Nonneg(k) => {
                for j in at..at + k {
                    worst = worst.max(-x[j]);
                }
                at += k;
            }
            ConeBlock::Soc(k) => {
                let norm = x[at + 1..at + k].iter().map(|v| v * v).sum::<f64>().sqrt();
                worst = worst.max(norm - x[at]);
                at += k;
            }
        }
    }
    worst.max(0.0)
}

/// Recompute feasibility and gap residuals of a [`SolveResult`] from the
/// program data alone.
pub fn check_certificate(program: &ConicProgram, result: &SolveResult) -> CertificateReport {
    if result.status != SolveStatus::Optimal {
        return CertificateReport::not_applicable();
    }
    let x = &result.primal;
    let y = &result.dual;
    let z = &result.dual_cone;

    let ax = program.a.mul(x);
    let norm_b = program.b.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let primal_residual = ax
        .iter()
        .zip(&program.b)
        .fold(0.0f64, |a, (&axi, &bi)| a.max((axi - bi).abs()))
        / (1.0 + norm_b);

    let primal_cone_violation = cone_violation(&program.cones, x);

    // dual feasibility: c - A'y - z = 0, z in K* (K is self-dual)
    let mut dres = program.objective.clone();
    program.a.mul_t_acc(-1.0, y, &mut dres);
    for (d, &zi) in dres.iter_mut().zip(z) {
        *d -= zi;
    }
    let norm_c = program.objective.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let dual_residual =
        dres.iter().fold(0.0f64, |a, &v| a.max(v.abs())) / (1.0 + norm_c);
    // z must vanish on free coordinates and lie in the cone elsewhere
    let mut dual_cone_violation = cone_violation(&program.cones, z);
    let mut at = 0;
    for c in &program.cones {
        if let ConeBlock::Free(k) = *c {
            for j in at..at + k {
                dual_cone_violation = dual_cone_violation.max(z[j].abs());
            }
        }
        at += c.len();
    }

    let pobj: f64 = program.objective.iter().zip(x).map(|(&c, &v)| c * v).sum();
    let dobj: f64 = program.b.iter().zip(y).map(|(&b, &v)| b * v).sum();
    let gap = (pobj - dobj).abs() / pobj.abs().max(1.0);

    CertificateReport {
        applicable: true,
        primal_residual,
        primal_cone_violation,
        dual_residual,
        dual_cone_violation,
        gap,
    }
}
