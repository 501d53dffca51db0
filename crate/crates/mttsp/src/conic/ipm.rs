//! Primal-dual interior-point method on the homogeneous self-dual embedding.
//!
//! The program `min c'x s.t. Ax = b, x in K` is handled internally in the
//! form `min c'x s.t. Ax = b, Gx + s = h, s in K_b` with `G = -E`, `h = 0`,
//! where `E` selects the barrier (nonnegative and second-order) coordinates
//! of `x`; free coordinates never enter the barrier. Search directions use
//! Nesterov-Todd scaling and a Mehrotra predictor-corrector; each direction
//! costs two solves with the quasidefinite KKT matrix
//!
//! ```text
//!   [ H   A' ]          H = E' (W'W)^{-1} E
//!   [ A   0  ]
//! ```
//!
//! factored once per iteration by the regularized LDL^T in `linalg` and
//! polished with iterative refinement against the exact operator.

use super::linalg::{CscMatrix, LdlFactor};
use super::{ConeBlock, ConicProgram, Residuals, SolveResult, SolveStatus, SolverSettings};
use std::time::Instant;

const STATIC_REG: f64 = 1e-8;
const PIVOT_FLOOR: f64 = 1e-13;
const STEP_FRACTION: f64 = 0.99;
const REFINE_ROUNDS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BarKind {
    Nonneg,
    Soc,
}

#[derive(Debug, Clone, Copy)]
struct BarBlock {
    kind: BarKind,
    /// offset into the barrier vector
    off: usize,
    len: usize,
}

struct BarrierLayout {
    blocks: Vec<BarBlock>,
    /// barrier coordinate -> variable column
    bar2col: Vec<usize>,
    m: usize,
    /// total barrier degree: one per nonnegative coordinate, one per cone
    degree: f64,
}

impl BarrierLayout {
    fn new(cones: &[ConeBlock]) -> Self {
        let mut blocks = Vec::new();
        let mut bar2col = Vec::new();
        let mut col = 0;
        let mut degree = 0.0;
        for c in cones {
            match *c {
                ConeBlock::Free(k) => col += k,
                ConeBlock::Nonneg(k) => {
                    blocks.push(BarBlock {
                        kind: BarKind::Nonneg,
                        off: bar2col.len(),
                        len: k,
                    });
                    for j in 0..k {
                        bar2col.push(col + j);
                    }
                    degree += k as f64;
                    col += k;
                }
                ConeBlock::Soc(k) => {
                    blocks.push(BarBlock {
                        kind: BarKind::Soc,
                        off: bar2col.len(),
                        len: k,
                    });
                    for j in 0..k {
                        bar2col.push(col + j);
                    }
                    degree += 1.0;
                    col += k;
                }
            }
        }
        BarrierLayout {
            m: bar2col.len(),
            blocks,
            bar2col,
            degree,
        }
    }

    fn gather(&self, x: &[f64], out: &mut [f64]) {
        for (i, &c) in self.bar2col.iter().enumerate() {
            out[i] = x[c];
        }
    }

    /// out[bar2col] += alpha * v
    fn scatter_acc(&self, v: &[f64], alpha: f64, out: &mut [f64]) {
        for (i, &c) in self.bar2col.iter().enumerate() {
            out[c] += alpha * v[i];
        }
    }

    fn identity(&self) -> Vec<f64> {
        let mut e = vec![0.0; self.m];
        for b in &self.blocks {
            match b.kind {
                BarKind::Nonneg => {
                    for v in &mut e[b.off..b.off + b.len] {
                        *v = 1.0;
                    }
                }
                BarKind::Soc => e[b.off] = 1.0,
            }
        }
        e
    }
}

/// Nesterov-Todd scaling of one barrier block.
enum Scaling {
    Nonneg { w: Vec<f64> },
    Soc { eta: f64, wbar: Vec<f64> },
}

fn soc_residual(v: &[f64]) -> f64 {
    // v0^2 - ||v1||^2
    v[0] * v[0] - v[1..].iter().map(|a| a * a).sum::<f64>()
}

fn compute_scaling(block: &BarBlock, s: &[f64], z: &[f64]) -> Option<Scaling> {
    let s = &s[block.off..block.off + block.len];
    let z = &z[block.off..block.off + block.len];
    match block.kind {
        BarKind::Nonneg => {
            let mut w = Vec::with_capacity(block.len);
            for (&si, &zi) in s.iter().zip(z) {
                if si <= 0.0 || zi <= 0.0 {
                    return None;
                }
                w.push((si / zi).sqrt());
            }
            Some(Scaling::Nonneg { w })
        }
        BarKind::Soc => {
            let sres = soc_residual(s);
            let zres = soc_residual(z);
            if sres <= 0.0 || zres <= 0.0 {
                return None;
            }
            let snorm = sres.sqrt();
            let znorm = zres.sqrt();
            let k = block.len;
            let mut sbar: Vec<f64> = s.iter().map(|v| v / snorm).collect();
            let zbar: Vec<f64> = z.iter().map(|v| v / znorm).collect();
            let dot: f64 = sbar.iter().zip(&zbar).map(|(a, b)| a * b).sum();
            let gamma = ((1.0 + dot) / 2.0).sqrt();
            // wbar = (sbar + J zbar) / (2 gamma)
            sbar[0] += zbar[0];
            for j in 1..k {
                sbar[j] -= zbar[j];
            }
            for v in &mut sbar {
                *v /= 2.0 * gamma;
            }
            let eta = (sres / zres).powf(0.25);
            Some(Scaling::Soc { eta, wbar: sbar })
        }
    }
}

/// out = W v (W symmetric)
fn apply_w(sc: &Scaling, v: &[f64], out: &mut [f64]) {
    match sc {
        Scaling::Nonneg { w } => {
            for i in 0..v.len() {
                out[i] = w[i] * v[i];
            }
        }
        Scaling::Soc { eta, wbar } => {
            let w0 = wbar[0];
            let w1 = &wbar[1..];
            let v0 = v[0];
            let v1 = &v[1..];
            let w1v1: f64 = w1.iter().zip(v1).map(|(a, b)| a * b).sum();
            out[0] = eta * (w0 * v0 + w1v1);
            let coef = v0 + w1v1 / (1.0 + w0);
            for j in 0..v1.len() {
                out[j + 1] = eta * (v1[j] + coef * w1[j]);
            }
        }
    }
}

/// out = W^{-1} v
fn apply_winv(sc: &Scaling, v: &[f64], out: &mut [f64]) {
    match sc {
        Scaling::Nonneg { w } => {
            for i in 0..v.len() {
                out[i] = v[i] / w[i];
            }
        }
        Scaling::Soc { eta, wbar } => {
            let w0 = wbar[0];
            let w1 = &wbar[1..];
            let v0 = v[0];
            let v1 = &v[1..];
            let w1v1: f64 = w1.iter().zip(v1).map(|(a, b)| a * b).sum();
            out[0] = (w0 * v0 - w1v1) / eta;
            let coef = -v0 + w1v1 / (1.0 + w0);
            for j in 0..v1.len() {
                out[j + 1] = (v1[j] + coef * w1[j]) / eta;
            }
        }
    }
}

/// out = (W'W)^{-1} v = eta^{-2} (2 q q' - J) v with q = J wbar
fn apply_w2inv(sc: &Scaling, v: &[f64], out: &mut [f64]) {
    match sc {
        Scaling::Nonneg { w } => {
            for i in 0..v.len() {
                out[i] = v[i] / (w[i] * w[i]);
            }
        }
        Scaling::Soc { eta, wbar } => {
            let k = v.len();
            let qv = wbar[0] * v[0] - wbar[1..].iter().zip(&v[1..]).map(|(a, b)| a * b).sum::<f64>();
            let s = eta * eta;
            out[0] = (2.0 * wbar[0] * qv - v[0]) / s;
            for j in 1..k {
                out[j] = (-2.0 * wbar[j] * qv + v[j]) / s;
            }
        }
    }
}

/// Jordan product u o v
fn circ(kind: BarKind, u: &[f64], v: &[f64], out: &mut [f64]) {
    match kind {
        BarKind::Nonneg => {
            for i in 0..u.len() {
                out[i] = u[i] * v[i];
            }
        }
        BarKind::Soc => {
            out[0] = u.iter().zip(v).map(|(a, b)| a * b).sum();
            for j in 1..u.len() {
                out[j] = u[0] * v[j] + v[0] * u[j];
            }
        }
    }
}

/// Solve lambda o w = v for w.
fn lambda_div(kind: BarKind, lambda: &[f64], v: &[f64], out: &mut [f64]) {
    match kind {
        BarKind::Nonneg => {
            for i in 0..v.len() {
                out[i] = v[i] / lambda[i];
            }
        }
        BarKind::Soc => {
            let a = lambda[0];
            let b = &lambda[1..];
            let bb: f64 = b.iter().map(|x| x * x).sum();
            let bv: f64 = b.iter().zip(&v[1..]).map(|(x, y)| x * y).sum();
            let det = a * a - bb;
            let w0 = (a * v[0] - bv) / det;
            out[0] = w0;
            for j in 0..b.len() {
                out[j + 1] = (v[j + 1] - w0 * b[j]) / a;
            }
        }
    }
}

/// Largest step alpha with v + alpha dv remaining in the cone (may be inf).
fn max_step_block(kind: BarKind, v: &[f64], dv: &[f64]) -> f64 {
    match kind {
        BarKind::Nonneg => {
            let mut a = f64::INFINITY;
            for i in 0..v.len() {
                if dv[i] < 0.0 {
                    a = a.min(-v[i] / dv[i]);
                }
            }
            a
        }
        BarKind::Soc => {
            // boundary of (v0+a d0)^2 - ||v1+a d1||^2 >= 0, v0 + a d0 >= 0
            let d0 = dv[0];
            let v0 = v[0];
            let aq = d0 * d0 - dv[1..].iter().map(|x| x * x).sum::<f64>();
            let bq = 2.0 * (v0 * d0 - v[1..].iter().zip(&dv[1..]).map(|(a, b)| a * b).sum::<f64>());
            let cq = soc_residual(v).max(0.0);
            let mut best = f64::INFINITY;
            if d0 < 0.0 {
                best = best.min(-v0 / d0);
            }
            let disc = bq * bq - 4.0 * aq * cq;
            if aq.abs() < 1e-300 {
                if bq < 0.0 {
                    best = best.min(-cq / bq);
                }
            } else if disc >= 0.0 {
                let sq = disc.sqrt();
                let q = -0.5 * (bq + bq.signum() * sq);
                for r in [q / aq, if q != 0.0 { cq / q } else { f64::INFINITY }] {
                    if r > 0.0 && r.is_finite() {
                        // only count roots where the residual is decreasing
                        if 2.0 * aq * r + bq <= 0.0 {
                            best = best.min(r);
                        }
                    }
                }
            }
            best
        }
    }
}

struct KktSystem {
    n: usize,
    pattern: CscMatrix,
    /// values with A, static regularization in place and H slots zeroed
    template: Vec<f64>,
    /// per barrier block, slots of its upper-triangular entries
    h_slots: Vec<Vec<usize>>,
    signs: Vec<i8>,
    factor: LdlFactor,
}

impl KktSystem {
    fn new(prog: &ConicProgram, layout: &BarrierLayout) -> Self {
        let n = prog.num_vars();
        let p = prog.num_rows();
        let nk = n + p;
        let mut trips: Vec<(usize, usize, f64)> = Vec::new();
        for j in 0..n {
            trips.push((j, j, 0.0));
        }
        for b in &layout.blocks {
            if b.kind == BarKind::Soc {
                for j in 0..b.len {
                    for i in 0..j {
                        trips.push((layout.bar2col[b.off + i], layout.bar2col[b.off + j], 0.0));
                    }
                }
            }
        }
        for c in 0..prog.a.ncols {
            for ptr in prog.a.col_ptr[c]..prog.a.col_ptr[c + 1] {
                trips.push((c, n + prog.a.row_idx[ptr], prog.a.values[ptr]));
            }
        }
        for r in 0..p {
            trips.push((n + r, n + r, 0.0));
        }
        let pattern = CscMatrix::from_triplets(nk, nk, &trips);

        let slot_of = |i: usize, j: usize| -> usize {
            let lo = pattern.col_ptr[j];
            let hi = pattern.col_ptr[j + 1];
            lo + pattern.row_idx[lo..hi]
                .binary_search(&i)
                .expect("kkt entry must exist")
        };

        let mut template = pattern.values.clone();
        for j in 0..n {
            template[slot_of(j, j)] += STATIC_REG;
        }
        for r in 0..p {
            template[slot_of(n + r, n + r)] -= STATIC_REG;
        }

        let mut h_slots = Vec::with_capacity(layout.blocks.len());
        for b in &layout.blocks {
            let mut slots = Vec::new();
            match b.kind {
                BarKind::Nonneg => {
                    for j in 0..b.len {
                        let c = layout.bar2col[b.off + j];
                        slots.push(slot_of(c, c));
                    }
                }
                BarKind::Soc => {
                    // column-major upper triangle, including the diagonal
                    for j in 0..b.len {
                        for i in 0..=j {
                            slots.push(slot_of(
                                layout.bar2col[b.off + i],
                                layout.bar2col[b.off + j],
                            ));
                        }
                    }
                }
            }
            h_slots.push(slots);
        }

        let mut signs = vec![1i8; nk];
        for s in signs.iter_mut().skip(n) {
            *s = -1;
        }
        let factor = LdlFactor::analyze(&pattern);
        KktSystem {
            n,
            pattern,
            template,
            h_slots,
            signs,
            factor,
        }
    }

    fn refactor(&mut self, layout: &BarrierLayout, scalings: &[Scaling]) {
        let mut values = self.template.clone();
        for (bi, b) in layout.blocks.iter().enumerate() {
            let slots = &self.h_slots[bi];
            match &scalings[bi] {
                Scaling::Nonneg { w } => {
                    for (j, &slot) in slots.iter().enumerate() {
                        values[slot] += 1.0 / (w[j] * w[j]);
                    }
                }
                Scaling::Soc { eta, wbar } => {
                    // (W'W)^{-1} = eta^{-2} (2 q q' - J), q = J wbar
                    let s = eta * eta;
                    let mut idx = 0;
                    for j in 0..b.len {
                        let qj = if j == 0 { wbar[0] } else { -wbar[j] };
                        for i in 0..=j {
                            let qi = if i == 0 { wbar[0] } else { -wbar[i] };
                            let jij = if i != j {
                                0.0
                            } else if i == 0 {
                                1.0
                            } else {
                                -1.0
                            };
                            values[slots[idx]] += (2.0 * qi * qj - jij) / s;
                            idx += 1;
                        }
                    }
                }
            }
        }
        self.pattern.values = values;
        self.factor.factor(&self.pattern, &self.signs, PIVOT_FLOOR);
    }

    /// Exact (unregularized) KKT operator: out = [H x + A'y; A x].
    fn apply_exact(
        &self,
        prog: &ConicProgram,
        layout: &BarrierLayout,
        scalings: &[Scaling],
        v: &[f64],
        out: &mut [f64],
    ) {
        let n = self.n;
        out.fill(0.0);
        let (vx, vy) = v.split_at(n);
        let (ox, oy) = out.split_at_mut(n);
        // H vx
        let mut tmp_in = vec![0.0; layout.m];
        layout.gather(vx, &mut tmp_in);
        let mut tmp_out = vec![0.0; layout.m];
        for (b, sc) in layout.blocks.iter().zip(scalings) {
            apply_w2inv(
                sc,
                &tmp_in[b.off..b.off + b.len],
                &mut tmp_out[b.off..b.off + b.len],
            );
        }
        layout.scatter_acc(&tmp_out, 1.0, ox);
        prog.a.mul_t_acc(1.0, vy, ox);
        prog.a.mul_acc(1.0, vx, oy);
    }

    /// Solve the reduced KKT system with iterative refinement.
    fn solve_kkt(
        &self,
        prog: &ConicProgram,
        layout: &BarrierLayout,
        scalings: &[Scaling],
        bx: &[f64],
        by: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let n = self.n;
        let p = by.len();
        let mut rhs = Vec::with_capacity(n + p);
        rhs.extend_from_slice(bx);
        rhs.extend_from_slice(by);
        let mut sol = rhs.clone();
        self.factor.solve(&mut sol);
        let mut resid = vec![0.0; n + p];
        for _ in 0..REFINE_ROUNDS {
            self.apply_exact(prog, layout, scalings, &sol, &mut resid);
            let mut worst = 0.0f64;
            for i in 0..n + p {
                resid[i] = rhs[i] - resid[i];
                worst = worst.max(resid[i].abs());
            }
            let scale = 1.0 + rhs.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
            if worst <= 1e-12 * scale {
                break;
            }
            let mut corr = resid.clone();
            self.factor.solve(&mut corr);
            for i in 0..n + p {
                sol[i] += corr[i];
            }
        }
        let dy = sol.split_off(n);
        (sol, dy)
    }
}

struct State {
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    s: Vec<f64>,
    tau: f64,
    kappa: f64,
}

/// Per-block application over barrier vectors.
fn blockwise<F: FnMut(&BarBlock, usize)>(layout: &BarrierLayout, mut f: F) {
    for (bi, b) in layout.blocks.iter().enumerate() {
        f(b, bi);
    }
}

pub(super) fn solve_hsde(prog: &ConicProgram, settings: &SolverSettings) -> SolveResult {
    let start = Instant::now();
    let n = prog.num_vars();
    let p = prog.num_rows();
    let layout = BarrierLayout::new(&prog.cones);
    let m = layout.m;
    let c = &prog.objective;
    let b = &prog.b;

    let norm_b = b.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let norm_c = c.iter().fold(0.0f64, |a, &v| a.max(v.abs()));

    let mut kkt = KktSystem::new(prog, &layout);
    let e = layout.identity();

    // initial point: central-path-flavored least squares, then shift into
    // the interior (conelp-style)
    let mut st = {
        let ident: Vec<Scaling> = layout
            .blocks
            .iter()
            .map(|b| match b.kind {
                BarKind::Nonneg => Scaling::Nonneg {
                    w: vec![1.0; b.len],
                },
                BarKind::Soc => {
                    let mut wbar = vec![0.0; b.len];
                    wbar[0] = 1.0;
                    Scaling::Soc { eta: 1.0, wbar }
                }
            })
            .collect();
        kkt.refactor(&layout, &ident);
        // primal guess: solve K3 (x, y, zt) = (0, b, 0); s = E x - zt-ish
        let (px, _py) = kkt.solve_kkt(prog, &layout, &ident, &vec![0.0; n], b);
        let mut s0 = vec![0.0; m];
        layout.gather(&px, &mut s0);
        // dual guess: solve K3 (x, y, z) = (-c, 0, 0); z = -(E dx - c-part)
        let negc: Vec<f64> = c.iter().map(|v| -v).collect();
        let (dx, dy) = kkt.solve_kkt(prog, &layout, &ident, &negc, &vec![0.0; p]);
        let mut z0 = vec![0.0; m];
        layout.gather(&dx, &mut z0);
        for v in &mut z0 {
            *v = -*v;
        }

        let interior_shift = |v: &mut Vec<f64>| {
            let mut alpha = f64::NEG_INFINITY;
            blockwise(&layout, |blk, _| {
                let sl = &v[blk.off..blk.off + blk.len];
                let viol = match blk.kind {
                    BarKind::Nonneg => sl.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(-x)),
                    BarKind::Soc => {
                        let nrm = sl[1..].iter().map(|x| x * x).sum::<f64>().sqrt();
                        nrm - sl[0]
                    }
                };
                alpha = alpha.max(viol);
            });
            if alpha >= -1e-8 {
                let shift = 1.0 + alpha;
                blockwise(&layout, |blk, _| match blk.kind {
                    BarKind::Nonneg => {
                        for x in &mut v[blk.off..blk.off + blk.len] {
                            *x += shift;
                        }
                    }
                    BarKind::Soc => v[blk.off] += shift,
                });
            }
        };
        let mut s = s0;
        let mut z = z0;
        interior_shift(&mut s);
        interior_shift(&mut z);
        State {
            x: px,
            y: dy,
            z,
            s,
            tau: 1.0,
            kappa: 1.0,
        }
    };

    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * y).sum() };
    let inf_norm = |v: &[f64]| v.iter().fold(0.0f64, |a, &x| a.max(x.abs()));

    let mut last_res = Residuals::default();
    let mut stall = 0usize;

    for iter in 0..=settings.max_iters {
        // residuals of the homogeneous embedding
        // res_x = A'y - E'z + c*tau
        let mut res_x: Vec<f64> = c.iter().map(|&v| v * st.tau).collect();
        prog.a.mul_t_acc(1.0, &st.y, &mut res_x);
        layout.scatter_acc(&st.z, -1.0, &mut res_x);
        // res_y = A x - b*tau
        let mut res_y: Vec<f64> = b.iter().map(|&v| -v * st.tau).collect();
        prog.a.mul_acc(1.0, &st.x, &mut res_y);
        // res_z = s - E x
        let mut res_z = vec![0.0; m];
        layout.gather(&st.x, &mut res_z);
        for (rz, &si) in res_z.iter_mut().zip(&st.s) {
            *rz = si - *rz;
        }
        // res_tau = c'x + b'y + kappa
        let cx = dot(c, &st.x);
        let by_ = dot(b, &st.y);
        let res_tau = cx + by_ + st.kappa;

        let gap_st = dot(&st.s, &st.z);
        let mu = (gap_st + st.tau * st.kappa) / (layout.degree + 1.0);

        // convergence metrics of the de-homogenized iterate
        let pres_eq = inf_norm(&res_y) / st.tau / (1.0 + norm_b);
        let pres_cone = inf_norm(&res_z) / st.tau;
        let pres = pres_eq.max(pres_cone);
        let dres = inf_norm(&res_x) / st.tau / (1.0 + norm_c);
        let pobj = cx / st.tau;
        let dobj = -by_ / st.tau;
        let relgap = (gap_st / (st.tau * st.tau)) / pobj.abs().max(dobj.abs()).max(1.0);
        last_res = Residuals {
            primal: pres,
            dual: dres,
            gap: relgap,
        };

        if pres <= settings.tol && dres <= settings.tol && relgap <= settings.tol {
            let inv_tau = 1.0 / st.tau;
            let mut dual_cone = vec![0.0; n];
            layout.scatter_acc(&st.z, inv_tau, &mut dual_cone);
            return SolveResult {
                status: SolveStatus::Optimal,
                primal: st.x.iter().map(|v| v * inv_tau).collect(),
                dual: st.y.iter().map(|v| v * inv_tau).collect(),
                dual_cone,
                objective_value: pobj + prog.objective_offset,
                residuals: last_res,
                iterations: iter,
            };
        }

        // infeasibility certificates
        let beta = -(by_);
        if beta > 0.0 {
            // y/beta, z/beta certify primal infeasibility when A'y - E'z ~ 0
            let mut cert = vec![0.0; n];
            prog.a.mul_t_acc(1.0, &st.y, &mut cert);
            layout.scatter_acc(&st.z, -1.0, &mut cert);
            if inf_norm(&cert) / beta <= settings.tol * (1.0 + norm_c) {
                let mut dual_cone = vec![0.0; n];
                layout.scatter_acc(&st.z, 1.0 / beta, &mut dual_cone);
                return SolveResult {
                    status: SolveStatus::Infeasible,
                    primal: vec![0.0; n],
                    dual: st.y.iter().map(|v| v / beta).collect(),
                    dual_cone,
                    objective_value: f64::INFINITY,
                    residuals: last_res,
                    iterations: iter,
                };
            }
        }
        let gamma = -cx;
        if gamma > 0.0 {
            let mut ax = vec![0.0; p];
            prog.a.mul_acc(1.0, &st.x, &mut ax);
            let mut ex = vec![0.0; m];
            layout.gather(&st.x, &mut ex);
            for (e, &si) in ex.iter_mut().zip(&st.s) {
                *e = si - *e;
            }
            if inf_norm(&ax) / gamma <= settings.tol * (1.0 + norm_b)
                && inf_norm(&ex) / gamma <= settings.tol
            {
                return SolveResult {
                    status: SolveStatus::Unbounded,
                    primal: st.x.iter().map(|v| v / gamma).collect(),
                    dual: vec![0.0; p],
                    dual_cone: vec![0.0; n],
                    objective_value: f64::NEG_INFINITY,
                    residuals: last_res,
                    iterations: iter,
                };
            }
        }

        let over_time = settings
            .time_budget
            .map(|t| start.elapsed() >= t)
            .unwrap_or(false);
        if iter == settings.max_iters || stall >= 8 || over_time {
            let inv_tau = 1.0 / st.tau;
            let mut dual_cone = vec![0.0; n];
            layout.scatter_acc(&st.z, inv_tau, &mut dual_cone);
            return SolveResult {
                status: if over_time {
                    SolveStatus::TimeLimit
                } else {
                    SolveStatus::IterationLimit
                },
                primal: st.x.iter().map(|v| v * inv_tau).collect(),
                dual: st.y.iter().map(|v| v * inv_tau).collect(),
                dual_cone,
                objective_value: pobj + prog.objective_offset,
                residuals: last_res,
                iterations: iter,
            };
        }

        // NT scaling; fall back to limit status if the iterate left the cone
        let mut scalings = Vec::with_capacity(layout.blocks.len());
        let mut ok = true;
        for blk in &layout.blocks {
            match compute_scaling(blk, &st.s, &st.z) {
                Some(sc) => scalings.push(sc),
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            stall = 8;
            continue;
        }
        // lambda = W z
        let mut lambda = vec![0.0; m];
        blockwise(&layout, |blk, bi| {
            apply_w(
                &scalings[bi],
                &st.z[blk.off..blk.off + blk.len],
                &mut lambda[blk.off..blk.off + blk.len],
            );
        });

        kkt.refactor(&layout, &scalings);

        // constant-rhs solve: K3 v1 = (-c, b, h)
        let negc: Vec<f64> = c.iter().map(|v| -v).collect();
        let solve_k3 = |kkt: &KktSystem, bx: &[f64], by: &[f64], bz: &[f64]| {
            let mut tmp = vec![0.0; m];
            blockwise(&layout, |blk, bi| {
                apply_w2inv(
                    &scalings[bi],
                    &bz[blk.off..blk.off + blk.len],
                    &mut tmp[blk.off..blk.off + blk.len],
                );
            });
            let mut rx = bx.to_vec();
            layout.scatter_acc(&tmp, -1.0, &mut rx);
            let (dx, dy) = kkt.solve_kkt(prog, &layout, &scalings, &rx, by);
            let mut edx = vec![0.0; m];
            layout.gather(&dx, &mut edx);
            for (t, &bzi) in edx.iter_mut().zip(bz) {
                *t += bzi;
            }
            let mut dz = vec![0.0; m];
            blockwise(&layout, |blk, bi| {
                apply_w2inv(
                    &scalings[bi],
                    &edx[blk.off..blk.off + blk.len],
                    &mut dz[blk.off..blk.off + blk.len],
                );
            });
            for v in &mut dz {
                *v = -*v;
            }
            (dx, dy, dz)
        };

        let (v1x, v1y, v1z) = solve_k3(&kkt, &negc, b, &vec![0.0; m]);
        let cbh_v1 = dot(c, &v1x) + dot(b, &v1y); // h = 0

        // W lambda = W^2 z = s up to scaling identity; use it directly
        let mut w_lambda = vec![0.0; m];
        blockwise(&layout, |blk, bi| {
            apply_w(
                &scalings[bi],
                &lambda[blk.off..blk.off + blk.len],
                &mut w_lambda[blk.off..blk.off + blk.len],
            );
        });

        // ---- affine (predictor) direction ----
        // d-tilde = lambda \ (-lambda o lambda) = -lambda; rhs3 = -res_z + W lambda
        let rhs3a: Vec<f64> = res_z
            .iter()
            .zip(&w_lambda)
            .map(|(&rz, &wl)| -rz + wl)
            .collect();
        let nrx: Vec<f64> = res_x.iter().map(|v| -v).collect();
        let nry: Vec<f64> = res_y.iter().map(|v| -v).collect();
        let (v2x, v2y, v2z) = solve_k3(&kkt, &nrx, &nry, &rhs3a);
        let denom = cbh_v1 - st.kappa / st.tau;
        let tk_a = -st.tau * st.kappa;
        let dtau_a = (-res_tau - tk_a / st.tau - (dot(c, &v2x) + dot(b, &v2y))) / denom;
        let dza: Vec<f64> = v2z
            .iter()
            .zip(&v1z)
            .map(|(&a, &b)| a + dtau_a * b)
            .collect();
        // ds = W dtilde - W^2 dz = -s - W^2 dz
        let mut dsa = vec![0.0; m];
        blockwise(&layout, |blk, bi| {
            let mut t = vec![0.0; blk.len];
            apply_w(&scalings[bi], &dza[blk.off..blk.off + blk.len], &mut t);
            let mut t2 = vec![0.0; blk.len];
            apply_w(&scalings[bi], &t, &mut t2);
            for j in 0..blk.len {
                dsa[blk.off + j] = -st.s[blk.off + j] - t2[j];
            }
        });
        let dkappa_a = (tk_a - st.kappa * dtau_a) / st.tau;

        let mut alpha_a = 1.0f64;
        blockwise(&layout, |blk, _| {
            alpha_a = alpha_a.min(max_step_block(
                blk.kind,
                &st.s[blk.off..blk.off + blk.len],
                &dsa[blk.off..blk.off + blk.len],
            ));
            alpha_a = alpha_a.min(max_step_block(
                blk.kind,
                &st.z[blk.off..blk.off + blk.len],
                &dza[blk.off..blk.off + blk.len],
            ));
        });
        if dtau_a < 0.0 {
            alpha_a = alpha_a.min(-st.tau / dtau_a);
        }
        if dkappa_a < 0.0 {
            alpha_a = alpha_a.min(-st.kappa / dkappa_a);
        }
        let sigma = (1.0 - alpha_a.min(1.0)).powi(3).clamp(0.0, 1.0);

        // ---- combined (corrector) direction ----
        // dx_a in scaled space for the corrector term
        let mut u = vec![0.0; m]; // W^{-1} ds_a
        let mut w = vec![0.0; m]; // W dz_a
        blockwise(&layout, |blk, bi| {
            apply_winv(
                &scalings[bi],
                &dsa[blk.off..blk.off + blk.len],
                &mut u[blk.off..blk.off + blk.len],
            );
            apply_w(
                &scalings[bi],
                &dza[blk.off..blk.off + blk.len],
                &mut w[blk.off..blk.off + blk.len],
            );
        });
        // t_lambda = -lambda o lambda - u o w + sigma*mu*e
        let mut t_lambda = vec![0.0; m];
        blockwise(&layout, |blk, _| {
            let mut ll = vec![0.0; blk.len];
            circ(
                blk.kind,
                &lambda[blk.off..blk.off + blk.len],
                &lambda[blk.off..blk.off + blk.len],
                &mut ll,
            );
            let mut uw = vec![0.0; blk.len];
            circ(
                blk.kind,
                &u[blk.off..blk.off + blk.len],
                &w[blk.off..blk.off + blk.len],
                &mut uw,
            );
            for j in 0..blk.len {
                t_lambda[blk.off + j] =
                    -ll[j] - uw[j] + sigma * mu * e[blk.off + j];
            }
        });
        // dtilde = lambda \ t_lambda, rhs3 = -(1-sigma) res_z - W dtilde
        let mut dtilde = vec![0.0; m];
        blockwise(&layout, |blk, _| {
            lambda_div(
                blk.kind,
                &lambda[blk.off..blk.off + blk.len],
                &t_lambda[blk.off..blk.off + blk.len],
                &mut dtilde[blk.off..blk.off + blk.len],
            );
        });
        let mut w_dtilde = vec![0.0; m];
        blockwise(&layout, |blk, bi| {
            apply_w(
                &scalings[bi],
                &dtilde[blk.off..blk.off + blk.len],
                &mut w_dtilde[blk.off..blk.off + blk.len],
            );
        });
        let one_ms = 1.0 - sigma;
        let rhs3: Vec<f64> = res_z
            .iter()
            .zip(&w_dtilde)
            .map(|(&rz, &wd)| -one_ms * rz - wd)
            .collect();
        let nrx2: Vec<f64> = res_x.iter().map(|v| -one_ms * v).collect();
        let nry2: Vec<f64> = res_y.iter().map(|v| -one_ms * v).collect();
        let (c2x, c2y, c2z) = solve_k3(&kkt, &nrx2, &nry2, &rhs3);
        let tk = -st.tau * st.kappa - dtau_a * dkappa_a + sigma * mu;
        let dtau =
            (-one_ms * res_tau - tk / st.tau - (dot(c, &c2x) + dot(b, &c2y))) / denom;
        let dx: Vec<f64> = c2x.iter().zip(&v1x).map(|(&a, &b)| a + dtau * b).collect();
        let dy: Vec<f64> = c2y.iter().zip(&v1y).map(|(&a, &b)| a + dtau * b).collect();
        let dz: Vec<f64> = c2z.iter().zip(&v1z).map(|(&a, &b)| a + dtau * b).collect();
        // ds = W dtilde - W^2 dz
        let mut ds = vec![0.0; m];
        blockwise(&layout, |blk, bi| {
            let mut t = vec![0.0; blk.len];
            apply_w(&scalings[bi], &dz[blk.off..blk.off + blk.len], &mut t);
            let mut t2 = vec![0.0; blk.len];
            apply_w(&scalings[bi], &t, &mut t2);
            for j in 0..blk.len {
                ds[blk.off + j] = w_dtilde[blk.off + j] - t2[j];
            }
        });
        let dkappa = (tk - st.kappa * dtau) / st.tau;

        let mut alpha = f64::INFINITY;
        blockwise(&layout, |blk, _| {
            alpha = alpha.min(max_step_block(
                blk.kind,
                &st.s[blk.off..blk.off + blk.len],
                &ds[blk.off..blk.off + blk.len],
            ));
            alpha = alpha.min(max_step_block(
                blk.kind,
                &st.z[blk.off..blk.off + blk.len],
                &dz[blk.off..blk.off + blk.len],
            ));
        });
        if dtau < 0.0 {
            alpha = alpha.min(-st.tau / dtau);
        }
        if dkappa < 0.0 {
            alpha = alpha.min(-st.kappa / dkappa);
        }
        let step = (STEP_FRACTION * alpha).min(1.0);
        if !step.is_finite() || step <= 1e-10 {
            stall += 1;
        } else {
            stall = 0;
        }
        let step = step.clamp(0.0, 1.0);

        for i in 0..n {
            st.x[i] += step * dx[i];
        }
        for i in 0..p {
            st.y[i] += step * dy[i];
        }
        for i in 0..m {
            st.z[i] += step * dz[i];
            st.s[i] += step * ds[i];
        }
        st.tau += step * dtau;
        st.kappa += step * dkappa;
    }
    unreachable!("loop returns on the max_iters iteration");
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conic::{check_certificate, solve, ProgramBuilder, SolverSettings};

    fn settings() -> SolverSettings {
        SolverSettings::default()
    }

    #[test]
    fn scaling_identities_hold() {
        // random-ish interior points of a 4-dim soc
        let blk = BarBlock {
            kind: BarKind::Soc,
            off: 0,
            len: 4,
        };
        let s = vec![3.0, 1.0, -0.5, 0.7];
        let z = vec![2.0, -0.3, 0.4, 0.1];
        let sc = compute_scaling(&blk, &s, &z).unwrap();
        let mut lam1 = vec![0.0; 4];
        apply_w(&sc, &z, &mut lam1);
        let mut lam2 = vec![0.0; 4];
        apply_winv(&sc, &s, &mut lam2);
        for (a, b) in lam1.iter().zip(&lam2) {
            assert!((a - b).abs() < 1e-12, "W z != W^-1 s: {lam1:?} {lam2:?}");
        }
        // (W^2)^{-1} agrees with applying W^{-1} twice
        let v = vec![0.3, -0.2, 0.9, 0.05];
        let mut w2 = vec![0.0; 4];
        apply_w2inv(&sc, &v, &mut w2);
        let mut t = vec![0.0; 4];
        apply_winv(&sc, &v, &mut t);
        let mut t2 = vec![0.0; 4];
        apply_winv(&sc, &t, &mut t2);
        for (a, b) in w2.iter().zip(&t2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn max_step_leaves_point_inside() {
        let blk_kind = BarKind::Soc;
        let v = vec![2.0, 1.0, 0.5];
        let dv = vec![-1.0, 0.3, -0.8];
        let a = max_step_block(blk_kind, &v, &dv);
        assert!(a.is_finite() && a > 0.0);
        let at: Vec<f64> = v
            .iter()
            .zip(&dv)
            .map(|(&x, &d)| x + 0.999 * a * d)
            .collect();
        assert!(soc_residual(&at) >= 0.0 && at[0] >= 0.0);
        let past: Vec<f64> = v.iter().zip(&dv).map(|(&x, &d)| x + 1.001 * a * d).collect();
        assert!(soc_residual(&past) < 0.0 || past[0] < 0.0);
    }

    #[test]
    fn lp_bound_constraint() {
        // min x s.t. x - u = 3, u >= 0   => x = 3
        let mut pb = ProgramBuilder::new();
        let x = pb.free_var("x");
        let u = pb.nonneg_var("u");
        pb.add_objective(x, 1.0);
        pb.add_eq("bound", &[(x, 1.0), (u, -1.0)], 3.0);
        let prog = pb.build().unwrap();
        let res = solve(&prog, &settings());
        assert_eq!(res.status, SolveStatus::Optimal);
        assert!((res.objective_value - 3.0).abs() < 1e-7, "{}", res.objective_value);
        assert!((res.primal[x] - 3.0).abs() < 1e-7);
    }

    #[test]
    fn soc_norm_objective() {
        // min t s.t. (t, a, b) in soc, a = 3, b = 4  => t = 5
        let mut pb = ProgramBuilder::new();
        let v = pb.soc_vars(&["t", "a", "b"]);
        pb.add_objective(v[0], 1.0);
        pb.add_eq("fix-a", &[(v[1], 1.0)], 3.0);
        pb.add_eq("fix-b", &[(v[2], 1.0)], 4.0);
        let prog = pb.build().unwrap();
        let res = solve(&prog, &settings());
        assert_eq!(res.status, SolveStatus::Optimal);
        assert!((res.objective_value - 5.0).abs() < 1e-7, "{}", res.objective_value);
        let cert = check_certificate(&prog, &res);
        assert!(cert.applicable);
        assert!(cert.max_residual() <= 1e-8, "{cert:?}");
    }

    #[test]
    fn lp_simplex_corner() {
        // min x + y s.t. x + y = 1, x, y >= 0  => 1
        let mut pb = ProgramBuilder::new();
        let x = pb.nonneg_var("x");
        let y = pb.nonneg_var("y");
        pb.add_objective(x, 1.0);
        pb.add_objective(y, 1.0);
        pb.add_eq("sum", &[(x, 1.0), (y, 1.0)], 1.0);
        let prog = pb.build().unwrap();
        let res = solve(&prog, &settings());
        assert_eq!(res.status, SolveStatus::Optimal);
        assert!((res.objective_value - 1.0).abs() < 1e-7);
    }

    #[test]
    fn detects_primal_infeasible() {
        // x >= 3 and x <= 2
        let mut pb = ProgramBuilder::new();
        let x = pb.free_var("x");
        let u = pb.nonneg_var("u");
        let w = pb.nonneg_var("w");
        pb.add_objective(x, 1.0);
        pb.add_eq("lo", &[(x, 1.0), (u, -1.0)], 3.0);
        pb.add_eq("hi", &[(x, 1.0), (w, 1.0)], 2.0);
        let prog = pb.build().unwrap();
        let res = solve(&prog, &settings());
        assert_eq!(res.status, SolveStatus::Infeasible);
    }

    #[test]
    fn detects_unbounded() {
        // min -u, u >= 0, no equalities tying it down
        let mut pb = ProgramBuilder::new();
        let u = pb.nonneg_var("u");
        let v = pb.nonneg_var("v");
        pb.add_objective(u, -1.0);
        pb.add_eq("tie", &[(v, 1.0)], 1.0);
        let prog = pb.build().unwrap();
        let res = solve(&prog, &settings());
        assert_eq!(res.status, SolveStatus::Unbounded);
    }

    #[test]
    fn deterministic_iterates() {
        let mut pb = ProgramBuilder::new();
        let v = pb.soc_vars(&["t", "a", "b"]);
        let u = pb.nonneg_var("u");
        pb.add_objective(v[0], 1.0);
        pb.add_eq("fix-a", &[(v[1], 1.0), (u, 0.5)], 3.0);
        pb.add_eq("fix-b", &[(v[2], 1.0)], 4.0);
        let prog = pb.build().unwrap();
        let r1 = solve(&prog, &settings());
        let r2 = solve(&prog, &settings());
        assert_eq!(r1.iterations, r2.iterations);
        assert_eq!(r1.primal, r2.primal);
        assert_eq!(r1.dual, r2.dual);
    }

    #[test]
    fn certificate_reports_perturbation() {
        let mut pb = ProgramBuilder::new();
        let v = pb.soc_vars(&["t", "a", "b"]);
        pb.add_objective(v[0], 1.0);
        pb.add_eq("fix-a", &[(v[1], 1.0)], 3.0);
        pb.add_eq("fix-b", &[(v[2], 1.0)], 4.0);
        let prog = pb.build().unwrap();
        let mut res = solve(&prog, &settings());
        res.primal[1] += 1e-3;
        let cert = check_certificate(&prog, &res);
        // one row now violated by 1e-3 before normalization by (1+||b||)
        assert!(cert.primal_residual > 1e-5 && cert.primal_residual < 1e-2, "{cert:?}");
    }

    #[test]
    fn infeasible_status_certificate_not_applicable() {
        let mut pb = ProgramBuilder::new();
        let x = pb.free_var("x");
        let u = pb.nonneg_var("u");
        let w = pb.nonneg_var("w");
        pb.add_objective(x, 1.0);
        pb.add_eq("lo", &[(x, 1.0), (u, -1.0)], 3.0);
        pb.add_eq("hi", &[(x, 1.0), (w, 1.0)], 2.0);
        let prog = pb.build().unwrap();
        let res = solve(&prog, &settings());
        let cert = check_certificate(&prog, &res);
        assert!(!cert.applicable);
    }
}
