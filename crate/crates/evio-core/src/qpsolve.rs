//! Convex quadratic and linear programs with a strict accuracy contract.
//!
//! Problems take the form
//!
//! ```text
//!     minimize    ½ xᵀ Q x + cᵀ x
//!     subject to  A x  = b
//!                 G x ≤ h
//!                 l ≤ x ≤ u
//! ```
//!
//! with `Q` positive semidefinite, and are solved by a Mehrotra
//! predictor-corrector primal-dual interior-point method. The Newton systems
//! are reduced to normal equations on the equality multipliers; the reduced
//! matrix is factored with a profile Cholesky so that banded problems (the
//! fleet model) stay banded while dense kernel-coupled problems (the
//! estimation programs) degrade gracefully to dense factorizations.
//!
//! The inequality Hessian `GᵀWG` is assembled through connected components of
//! the variable-interaction graph; variables appearing in many rows (shared
//! intercepts, for instance) are lifted into a small dense border block and
//! folded back with a block elimination. Everything is deterministic: no
//! randomized pivoting, no seeding, and parallel fills write disjoint indexed
//! slots, so re-solving an identical program is bit-identical regardless of
//! thread count.

use crate::linalg::{dot, norm_inf, CsrBuilder, CsrMatrix, DenseChol, Matrix, SkylineMatrix};
use crate::par;
use std::collections::VecDeque;

/// Quadratic objective term. `Diagonal` entries must be non-negative and a
/// `Dense` matrix must be symmetric positive semidefinite.
#[derive(Clone, Debug)]
pub enum Quadratic {
    None,
    Diagonal(Vec<f64>),
    Dense(Matrix),
}

/// A convex program in standard form. Missing bounds are `±INFINITY`.
#[derive(Clone, Debug)]
pub struct ConvexProgram {
    pub quad: Quadratic,
    pub linear: Vec<f64>,
    /// Constant added to reported objective values.
    pub offset: f64,
    pub eq: CsrMatrix,
    pub eq_rhs: Vec<f64>,
    pub ineq: CsrMatrix,
    pub ineq_rhs: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ConvexProgram {
    /// An unconstrained program with `n` free variables and zero objective.
    pub fn new(n: usize) -> Self {
        ConvexProgram {
            quad: Quadratic::None,
            linear: vec![0.0; n],
            offset: 0.0,
            eq: CsrMatrix::empty(n),
            eq_rhs: Vec::new(),
            ineq: CsrMatrix::empty(n),
            ineq_rhs: Vec::new(),
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn num_vars(&self) -> usize {
        self.linear.len()
    }

    fn validate(&self) -> Result<(), ProgramError> {
        let n = self.num_vars();
        match &self.quad {
            Quadratic::None => {}
            Quadratic::Diagonal(d) => {
                if d.len() != n {
                    return Err(ProgramError::Dimension("quadratic diagonal length"));
                }
                if d.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                    return Err(ProgramError::NotPsd);
                }
            }
            Quadratic::Dense(m) => {
                if m.rows() != n || m.cols() != n {
                    return Err(ProgramError::Dimension("quadratic matrix shape"));
                }
            }
        }
        if self.lower.len() != n || self.upper.len() != n {
            return Err(ProgramError::Dimension("bounds length"));
        }
        if self.eq.ncols() != n || self.ineq.ncols() != n {
            return Err(ProgramError::Dimension("constraint column count"));
        }
        if self.eq.nrows() != self.eq_rhs.len() || self.ineq.nrows() != self.ineq_rhs.len() {
            return Err(ProgramError::Dimension("constraint rhs length"));
        }
        let finite_ok = self.linear.iter().all(|v| v.is_finite())
            && self.eq_rhs.iter().all(|v| v.is_finite())
            && self.ineq_rhs.iter().all(|v| v.is_finite());
        if !finite_ok {
            return Err(ProgramError::NonFinite);
        }
        for j in 0..n {
            if self.lower[j].is_nan() || self.upper[j].is_nan() {
                return Err(ProgramError::NonFinite);
            }
            if self.lower[j] > self.upper[j] {
                return Err(ProgramError::EmptyBox(j));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProgramError {
    #[error("inconsistent dimensions: {0}")]
    Dimension(&'static str),
    #[error("quadratic term is not positive semidefinite")]
    NotPsd,
    #[error("program data contains NaN or infinite coefficients")]
    NonFinite,
    #[error("variable {0} has lower bound above upper bound")]
    EmptyBox(usize),
}

#[derive(Clone, Debug)]
pub struct SolveOptions {
    /// Scaled primal/dual feasibility target.
    pub feas_tol: f64,
    /// Relative duality-gap target.
    pub gap_tol: f64,
    pub max_iters: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            feas_tol: 1e-8,
            gap_tol: 1e-7,
            max_iters: 10_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalFailure,
}

/// Relative KKT residuals of the returned point.
#[derive(Clone, Copy, Debug, Default)]
pub struct KktResiduals {
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.primal.max(self.dual).max(self.complementarity)
    }
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    pub residuals: KktResiduals,
    pub iterations: usize,
}

/// Solve a convex program. Never panics; malformed inputs are rejected with
/// `ProgramError` and solver outcomes are reported through `SolveStatus`.
pub fn solve(prog: &ConvexProgram, opts: &SolveOptions) -> Result<Solution, ProgramError> {
    prog.validate()?;
    let mut ipm = Ipm::new(prog, opts);
    Ok(ipm.run())
}

// Variables appearing in more inequality rows than this are lifted into the
// dense border block of the reduced Hessian.
const BORDER_DEGREE: usize = 24;
// Barrier weights are clamped to bound the conditioning of the normal
// equations; iterative refinement recovers the accuracy lost to the clamp and
// to the static regularization below.
const WEIGHT_MIN: f64 = 1e-14;
const WEIGHT_MAX: f64 = 1e12;
const PRIMAL_REG: f64 = 1e-9;
const DUAL_REG: f64 = 1e-9;
const STEP_FRACTION: f64 = 0.995;
const REFINE_ROUNDS: usize = 3;

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut a: usize) -> usize {
        while self.parent[a] != a {
            self.parent[a] = self.parent[self.parent[a]];
            a = self.parent[a];
        }
        a
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Deterministic: smaller root wins.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Where a variable lives inside the reduced Hessian `M = Q + D + GᵀWG`.
#[derive(Clone, Copy, Debug)]
enum VarSlot {
    /// Interacts with nothing else: a plain diagonal entry.
    Diagonal,
    Component { comp: u32, local: u32 },
    Border { local: u32 },
}

struct Component {
    vars: Vec<usize>,
    /// Dense symmetric k×k scratch, row-major.
    mat: Vec<f64>,
    /// Coupling block to the border, k×nb row-major. Empty when nb = 0.
    coupling: Vec<f64>,
}

/// Symbolic structure shared by all iterations of one solve.
struct Structure {
    slots: Vec<VarSlot>,
    comps: Vec<Component>,
    border_vars: Vec<usize>,
    /// Profile of the Schur complement on the equality multipliers.
    schur_first: Vec<usize>,
    /// keep_from[r] = min over r' ≥ r of schur_first[r'].
    keep_from: Vec<usize>,
}

impl Structure {
    fn build(prog: &ConvexProgram) -> Structure {
        let n = prog.num_vars();
        let p = prog.eq.nrows();
        let dense_q = matches!(prog.quad, Quadratic::Dense(_));

        let mut degree = vec![0usize; n];
        for r in 0..prog.ineq.nrows() {
            let (cols, _) = prog.ineq.row(r);
            for &c in cols {
                degree[c] += 1;
            }
        }

        let mut is_border = vec![false; n];
        if !dense_q {
            for j in 0..n {
                if degree[j] > BORDER_DEGREE {
                    is_border[j] = true;
                }
            }
        }
        let nb = is_border.iter().filter(|b| **b).count();

        let mut uf = UnionFind::new(n);
        if dense_q {
            for j in 1..n {
                uf.union(0, j);
            }
        }
        for r in 0..prog.ineq.nrows() {
            let (cols, _) = prog.ineq.row(r);
            let mut anchor: Option<usize> = None;
            for &c in cols {
                if is_border[c] {
                    continue;
                }
                match anchor {
                    None => anchor = Some(c),
                    Some(a) => uf.union(a, c),
                }
            }
        }

        let mut members: Vec<Vec<usize>> = vec![Vec::new(); n];
        for j in 0..n {
            if !is_border[j] {
                members[uf.find(j)].push(j);
            }
        }
        let mut slots = vec![VarSlot::Diagonal; n];
        let mut comps = Vec::new();
        for group in members.into_iter().filter(|g| !g.is_empty()) {
            // Singletons stay diagonal unless they can couple to the border
            // (a variable sharing a row with a border variable needs a
            // coupling slot) or the quadratic is dense.
            let keep = group.len() > 1 || dense_q || (nb > 0 && degree[group[0]] > 0);
            if !keep {
                continue;
            }
            let comp_id = comps.len() as u32;
            for (local, &v) in group.iter().enumerate() {
                slots[v] = VarSlot::Component {
                    comp: comp_id,
                    local: local as u32,
                };
            }
            let k = group.len();
            comps.push(Component {
                vars: group,
                mat: vec![0.0; k * k],
                coupling: Vec::new(),
            });
        }
        let mut border_vars = Vec::new();
        for j in 0..n {
            if is_border[j] {
                slots[j] = VarSlot::Border {
                    local: border_vars.len() as u32,
                };
                border_vars.push(j);
            }
        }
        for comp in &mut comps {
            comp.coupling = vec![0.0; comp.vars.len() * nb];
        }

        // Schur profile: equality rows couple when they share a variable or a
        // component; any border variable densifies the whole matrix.
        let schur_first: Vec<usize> = if nb > 0 || dense_q {
            vec![0; p]
        } else {
            let mut first_of_comp = vec![usize::MAX; comps.len()];
            let mut first_of_var = vec![usize::MAX; n];
            for r in 0..p {
                let (cols, _) = prog.eq.row(r);
                for &c in cols {
                    match slots[c] {
                        VarSlot::Component { comp, .. } => {
                            let e = &mut first_of_comp[comp as usize];
                            if *e == usize::MAX {
                                *e = r;
                            }
                        }
                        _ => {
                            if first_of_var[c] == usize::MAX {
                                first_of_var[c] = r;
                            }
                        }
                    }
                }
            }
            (0..p)
                .map(|r| {
                    let (cols, _) = prog.eq.row(r);
                    let mut f = r;
                    for &c in cols {
                        let candidate = match slots[c] {
                            VarSlot::Component { comp, .. } => first_of_comp[comp as usize],
                            _ => first_of_var[c],
                        };
                        if candidate < f {
                            f = candidate;
                        }
                    }
                    f
                })
                .collect()
        };

        let mut keep_from = vec![0usize; p];
        if p > 0 {
            keep_from[p - 1] = schur_first[p - 1];
            for r in (0..p - 1).rev() {
                keep_from[r] = schur_first[r].min(keep_from[r + 1]);
            }
        }

        Structure {
            slots,
            comps,
            border_vars,
            schur_first,
            keep_from,
        }
    }
}

/// Numeric factorization of `M = Q + δI + D_box + GᵀWG` for one iteration.
/// Owns its data so the IPM state stays freely borrowable.
struct HessianFactor {
    /// Inverse diagonal for `VarSlot::Diagonal` variables, zero elsewhere.
    inv_diag: Vec<f64>,
    comp_chols: Vec<DenseChol>,
    /// F_j = M_j⁻¹ C_j per component (k×nb, row-major).
    comp_f: Vec<Vec<f64>>,
    border_chol: Option<DenseChol>,
}

impl HessianFactor {
    /// Apply `M⁻¹` in place.
    fn solve_in_place(&self, s: &Structure, v: &mut [f64]) {
        let nb = s.border_vars.len();
        for (j, inv) in self.inv_diag.iter().enumerate() {
            if *inv != 0.0 {
                v[j] *= *inv;
            }
        }
        let mut border_rhs: Vec<f64> = s.border_vars.iter().map(|&b| v[b]).collect();
        let mut comp_t: Vec<Vec<f64>> = Vec::with_capacity(s.comps.len());
        for (ci, comp) in s.comps.iter().enumerate() {
            let mut t: Vec<f64> = comp.vars.iter().map(|&j| v[j]).collect();
            self.comp_chols[ci].solve_in_place(&mut t);
            if nb > 0 {
                for (li, tv) in t.iter().enumerate() {
                    let row = &comp.coupling[li * nb..(li + 1) * nb];
                    for (bi, cv) in row.iter().enumerate() {
                        border_rhs[bi] -= cv * tv;
                    }
                }
            }
            comp_t.push(t);
        }
        if nb > 0 {
            self.border_chol
                .as_ref()
                .expect("border factor present")
                .solve_in_place(&mut border_rhs);
            for (bi, &bv) in s.border_vars.iter().enumerate() {
                v[bv] = border_rhs[bi];
            }
        }
        for (ci, comp) in s.comps.iter().enumerate() {
            let t = &comp_t[ci];
            for (li, &j) in comp.vars.iter().enumerate() {
                let mut val = t[li];
                if nb > 0 {
                    let f_row = &self.comp_f[ci][li * nb..(li + 1) * nb];
                    for (bi, fv) in f_row.iter().enumerate() {
                        val -= fv * border_rhs[bi];
                    }
                }
                v[j] = val;
            }
        }
    }
}

struct Direction {
    dx: Vec<f64>,
    dy: Vec<f64>,
    ds: Vec<f64>,
    dz: Vec<f64>,
    dsl: Vec<f64>,
    dzl: Vec<f64>,
    dsu: Vec<f64>,
    dzu: Vec<f64>,
}

struct Ipm<'p> {
    prog: &'p ConvexProgram,
    opts: SolveOptions,
    structure: Structure,
    n: usize,
    p: usize,
    m: usize,
    lower_idx: Vec<usize>,
    upper_idx: Vec<usize>,
    x: Vec<f64>,
    y: Vec<f64>,
    s: Vec<f64>,
    z: Vec<f64>,
    sl: Vec<f64>,
    zl: Vec<f64>,
    su: Vec<f64>,
    zu: Vec<f64>,
    diag: Vec<f64>,
    ineq_w: Vec<f64>,
    rhs_scale: f64,
    obj_scale: f64,
}

impl<'p> Ipm<'p> {
    fn new(prog: &'p ConvexProgram, opts: &SolveOptions) -> Self {
        let n = prog.num_vars();
        let p = prog.eq.nrows();
        let m = prog.ineq.nrows();
        let structure = Structure::build(prog);
        let lower_idx: Vec<usize> = (0..n).filter(|&j| prog.lower[j].is_finite()).collect();
        let upper_idx: Vec<usize> = (0..n).filter(|&j| prog.upper[j].is_finite()).collect();

        let mut x = vec![0.0; n];
        for j in 0..n {
            let (lo, hi) = (prog.lower[j], prog.upper[j]);
            x[j] = match (lo.is_finite(), hi.is_finite()) {
                (true, true) => 0.5 * (lo + hi),
                (true, false) => lo + 1.0,
                (false, true) => hi - 1.0,
                (false, false) => 0.0,
            };
        }
        let gx = prog.ineq.matvec(&x);
        let s: Vec<f64> = (0..m)
            .map(|i| (prog.ineq_rhs[i] - gx[i]).max(1.0))
            .collect();
        let sl: Vec<f64> = lower_idx
            .iter()
            .map(|&j| (x[j] - prog.lower[j]).max(1.0))
            .collect();
        let su: Vec<f64> = upper_idx
            .iter()
            .map(|&j| (prog.upper[j] - x[j]).max(1.0))
            .collect();

        let rhs_scale = 1.0 + norm_inf(&prog.eq_rhs).max(norm_inf(&prog.ineq_rhs));
        let obj_scale = 1.0 + norm_inf(&prog.linear);

        Ipm {
            prog,
            opts: opts.clone(),
            n,
            p,
            m,
            x,
            y: vec![0.0; p],
            z: vec![1.0; m],
            s,
            zl: vec![1.0; lower_idx.len()],
            sl,
            zu: vec![1.0; upper_idx.len()],
            su,
            lower_idx,
            upper_idx,
            diag: vec![0.0; n],
            ineq_w: vec![0.0; m],
            structure,
            rhs_scale,
            obj_scale,
        }
    }

    fn quad_matvec(&self, v: &[f64]) -> Vec<f64> {
        match &self.prog.quad {
            Quadratic::None => vec![0.0; self.n],
            Quadratic::Diagonal(d) => d.iter().zip(v).map(|(q, x)| q * x).collect(),
            Quadratic::Dense(mq) => mq.matvec(v),
        }
    }

    fn objective_at(&self, x: &[f64]) -> f64 {
        let qx = self.quad_matvec(x);
        0.5 * dot(&qx, x) + dot(&self.prog.linear, x) + self.prog.offset
    }

    /// True (unregularized) KKT residual vectors and their scaled summary.
    #[allow(clippy::type_complexity)]
    fn residuals(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, KktResiduals) {
        let prog = self.prog;
        let mut rd = self.quad_matvec(&self.x);
        for (rdj, cj) in rd.iter_mut().zip(&prog.linear) {
            *rdj += cj;
        }
        prog.eq.add_tr_matvec(1.0, &self.y, &mut rd);
        prog.ineq.add_tr_matvec(1.0, &self.z, &mut rd);
        for (k, &j) in self.lower_idx.iter().enumerate() {
            rd[j] -= self.zl[k];
        }
        for (k, &j) in self.upper_idx.iter().enumerate() {
            rd[j] += self.zu[k];
        }
        let mut rp = prog.eq.matvec(&self.x);
        for (v, b) in rp.iter_mut().zip(&prog.eq_rhs) {
            *v -= b;
        }
        let mut rg = prog.ineq.matvec(&self.x);
        for (i, v) in rg.iter_mut().enumerate() {
            *v += self.s[i] - prog.ineq_rhs[i];
        }
        let rl: Vec<f64> = self
            .lower_idx
            .iter()
            .enumerate()
            .map(|(k, &j)| prog.lower[j] - self.x[j] + self.sl[k])
            .collect();
        let ru: Vec<f64> = self
            .upper_idx
            .iter()
            .enumerate()
            .map(|(k, &j)| self.x[j] + self.su[k] - prog.upper[j])
            .collect();

        let compl = dot(&self.s, &self.z) + dot(&self.sl, &self.zl) + dot(&self.su, &self.zu);
        let primal = norm_inf(&rp)
            .max(norm_inf(&rg))
            .max(norm_inf(&rl))
            .max(norm_inf(&ru))
            / self.rhs_scale;
        let qx = self.quad_matvec(&self.x);
        let dual = norm_inf(&rd) / (self.obj_scale + norm_inf(&qx));
        let obj = self.objective_at(&self.x);
        let res = KktResiduals {
            primal,
            dual,
            complementarity: compl / (1.0 + obj.abs()),
        };
        (rd, rp, rg, rl, ru, res)
    }

    fn barrier_count(&self) -> usize {
        self.m + self.lower_idx.len() + self.upper_idx.len()
    }

    fn mu(&self) -> f64 {
        let count = self.barrier_count();
        if count == 0 {
            return 0.0;
        }
        (dot(&self.s, &self.z) + dot(&self.sl, &self.zl) + dot(&self.su, &self.zu)) / count as f64
    }

    /// Assemble and factor `M`, then form and factor the Schur complement.
    fn factor(
        &mut self,
        reg_boost: f64,
    ) -> Result<(HessianFactor, Option<SkylineMatrix>), ()> {
        let prog = self.prog;
        let delta = PRIMAL_REG * reg_boost;
        for j in 0..self.n {
            self.diag[j] = delta
                + match &prog.quad {
                    Quadratic::Diagonal(d) => d[j],
                    _ => 0.0,
                };
        }
        for (k, &j) in self.lower_idx.iter().enumerate() {
            self.diag[j] += (self.zl[k] / self.sl[k]).clamp(WEIGHT_MIN, WEIGHT_MAX);
        }
        for (k, &j) in self.upper_idx.iter().enumerate() {
            self.diag[j] += (self.zu[k] / self.su[k]).clamp(WEIGHT_MIN, WEIGHT_MAX);
        }
        for i in 0..self.m {
            self.ineq_w[i] = (self.z[i] / self.s[i]).clamp(WEIGHT_MIN, WEIGHT_MAX);
        }

        let structure = &mut self.structure;
        let diag = &mut self.diag;
        let nb = structure.border_vars.len();
        let mut border_mat = vec![0.0; nb * nb];
        for comp in &mut structure.comps {
            let k = comp.vars.len();
            comp.mat.fill(0.0);
            for (li, &j) in comp.vars.iter().enumerate() {
                comp.mat[li * k + li] = diag[j];
            }
            if let Quadratic::Dense(q) = &prog.quad {
                for (li, &ji) in comp.vars.iter().enumerate() {
                    for (lj, &jj) in comp.vars.iter().enumerate() {
                        comp.mat[li * k + lj] += q.get(ji, jj);
                    }
                }
            }
            comp.coupling.fill(0.0);
        }
        for (bi, &j) in structure.border_vars.iter().enumerate() {
            border_mat[bi * nb + bi] = diag[j];
        }

        // Scatter GᵀWG row by row; all orientations of a pair are visited, so
        // the blocks come out exactly symmetric.
        for r in 0..self.m {
            let w = self.ineq_w[r];
            let (cols, vals) = prog.ineq.row(r);
            for (ai, &ca) in cols.iter().enumerate() {
                let va = vals[ai] * w;
                for (bi, &cb) in cols.iter().enumerate() {
                    let contrib = va * vals[bi];
                    match (structure.slots[ca], structure.slots[cb]) {
                        (
                            VarSlot::Component { comp, local: la },
                            VarSlot::Component { local: lb, .. },
                        ) => {
                            let k = structure.comps[comp as usize].vars.len();
                            structure.comps[comp as usize].mat
                                [la as usize * k + lb as usize] += contrib;
                        }
                        (VarSlot::Component { comp, local: la }, VarSlot::Border { local: lb }) => {
                            structure.comps[comp as usize].coupling
                                [la as usize * nb + lb as usize] += contrib;
                        }
                        (VarSlot::Border { .. }, VarSlot::Component { .. }) => {
                            // Covered by the transposed pair above.
                        }
                        (VarSlot::Border { local: la }, VarSlot::Border { local: lb }) => {
                            border_mat[la as usize * nb + lb as usize] += contrib;
                        }
                        _ => {
                            // A Diagonal variable only ever pairs with itself.
                            if ca == cb {
                                diag[ca] += contrib;
                            }
                        }
                    }
                }
            }
        }

        let mut inv_diag = vec![0.0; self.n];
        for j in 0..self.n {
            if matches!(structure.slots[j], VarSlot::Diagonal) {
                if !(diag[j] > 0.0) || !diag[j].is_finite() {
                    return Err(());
                }
                inv_diag[j] = 1.0 / diag[j];
            }
        }
        let mut comp_chols = Vec::with_capacity(structure.comps.len());
        for comp in &structure.comps {
            match DenseChol::factor(comp.vars.len(), &comp.mat) {
                Ok(c) => comp_chols.push(c),
                Err(e) => {
                    if std::env::var_os("EVIO_QP_TRACE").is_some() {
                        eprintln!("factor: comp failed: {e}");
                    }
                    return Err(());
                }
            }
        }
        let mut comp_f = Vec::with_capacity(structure.comps.len());
        let mut border_schur = border_mat;
        for (ci, comp) in structure.comps.iter().enumerate() {
            let k = comp.vars.len();
            let mut f = comp.coupling.clone();
            if nb > 0 {
                let mut col = vec![0.0; k];
                for b in 0..nb {
                    for li in 0..k {
                        col[li] = comp.coupling[li * nb + b];
                    }
                    comp_chols[ci].solve_in_place(&mut col);
                    for li in 0..k {
                        f[li * nb + b] = col[li];
                    }
                }
                for la in 0..nb {
                    for lb in 0..nb {
                        let mut acc = 0.0;
                        for li in 0..k {
                            acc += comp.coupling[li * nb + la] * f[li * nb + lb];
                        }
                        border_schur[la * nb + lb] -= acc;
                    }
                }
            }
            comp_f.push(f);
        }
        let border_chol = if nb > 0 {
            match DenseChol::factor(nb, &border_schur) {
                Ok(c) => Some(c),
                Err(e) => {
                    if std::env::var_os("EVIO_QP_TRACE").is_some() {
                        eprintln!("factor: border failed: {e}");
                    }
                    return Err(());
                }
            }
        } else {
            None
        };

        let factor = HessianFactor {
            inv_diag,
            comp_chols,
            comp_f,
            border_chol,
        };

        if self.p == 0 {
            return Ok((factor, None));
        }

        // Schur complement S = A M⁻¹ Aᵀ + εI over the equality rows, built
        // batch-wise with a sliding window of M⁻¹aᵣ vectors sized by the
        // profile, so banded problems never materialize a dense p×n block.
        // ε is chosen relative to the magnitude of S: barrier weights push
        // the diagonal to 1e12-scale, where an absolute 1e-9 would vanish.
        let structure = &self.structure;
        let n = self.n;
        let mut sky = SkylineMatrix::new(structure.schur_first.clone());
        {
            let mut window: VecDeque<Vec<f64>> = VecDeque::new();
            let mut base = 0usize;
            let rows = sky.rows_mut_partitioned();
            let mut rows_iter = rows.into_iter();
            const BATCH: usize = 64;
            let mut r0 = 0usize;
            while r0 < self.p {
                let r1 = (r0 + BATCH).min(self.p);
                let fresh: Vec<Vec<f64>> = par::map_indices(r1 - r0, |k| {
                    let r = r0 + k;
                    let (cols, vals) = prog.eq.row(r);
                    let mut v = vec![0.0; n];
                    for (&c, &val) in cols.iter().zip(vals) {
                        v[c] = val;
                    }
                    factor.solve_in_place(structure, &mut v);
                    v
                });
                if window.is_empty() {
                    base = r0;
                }
                window.extend(fresh);
                let batch_rows: Vec<_> = rows_iter.by_ref().take(r1 - r0).collect();
                par::map(batch_rows, |(r, first, slice)| {
                    for (offset, cell) in slice.iter_mut().enumerate() {
                        let c = first + offset;
                        *cell = prog.eq.row_dot(r, &window[c - base]);
                    }
                });
                if r1 < self.p {
                    let keep = structure.keep_from[r1];
                    while base < keep {
                        window.pop_front();
                        base += 1;
                    }
                }
                r0 = r1;
            }
        }
        if std::env::var_os("EVIO_QP_CHECK").is_some() {
            for &c in &[0usize, self.p / 3, self.p - 1] {
                let mut e = vec![0.0; self.p];
                e[c] = 1.0;
                let mut aty = vec![0.0; n];
                prog.eq.add_tr_matvec(1.0, &e, &mut aty);
                factor.solve_in_place(structure, &mut aty);
                let col = prog.eq.matvec(&aty);
                let mut max_err = 0.0f64;
                for r in 0..self.p {
                    let assembled = if r >= c {
                        if structure.schur_first[r] <= c { sky.get(r, c) } else { 0.0 }
                    } else if structure.schur_first[c] <= r {
                        sky.get(c, r)
                    } else {
                        0.0
                    };
                    max_err = max_err.max((assembled - col[r]).abs());
                }
                eprintln!("    assembly check col {c}: {max_err:.3e}");
            }
        }
        // Regularize the factorization only; iterative refinement below
        // targets the unregularized system, so the bumps never bias the
        // converged directions.
        sky.regularize_diag_relative(DUAL_REG * reg_boost);
        match sky.cholesky_in_place() {
            Ok(()) => Ok((factor, Some(sky))),
            Err(e) => {
                if std::env::var_os("EVIO_QP_TRACE").is_some() {
                    eprintln!("factor: schur failed: {e}");
                }
                Err(())
            }
        }
    }

    /// Apply the regularized `M` (clamped weights) to a vector.
    fn apply_m(&self, v: &[f64], reg_boost: f64) -> Vec<f64> {
        let delta = PRIMAL_REG * reg_boost;
        let mut out = self.quad_matvec(v);
        for j in 0..self.n {
            out[j] += delta * v[j];
        }
        for (k, &j) in self.lower_idx.iter().enumerate() {
            out[j] += (self.zl[k] / self.sl[k]).clamp(WEIGHT_MIN, WEIGHT_MAX) * v[j];
        }
        for (k, &j) in self.upper_idx.iter().enumerate() {
            out[j] += (self.zu[k] / self.su[k]).clamp(WEIGHT_MIN, WEIGHT_MAX) * v[j];
        }
        if self.m > 0 {
            let gv = self.prog.ineq.matvec(v);
            let wgv: Vec<f64> = gv.iter().zip(&self.ineq_w).map(|(g, w)| g * w).collect();
            self.prog.ineq.add_tr_matvec(1.0, &wgv, &mut out);
        }
        out
    }

    /// Solve `M dx + Aᵀ dy = rhs_x`, `A dx − ε dy = rhs_y` with iterative
    /// refinement against the regularized operator.
    fn newton_solve(
        &self,
        factor: &HessianFactor,
        schur: &Option<SkylineMatrix>,
        rhs_x: &[f64],
        rhs_y: &[f64],
        reg_boost: f64,
    ) -> (Vec<f64>, Vec<f64>) {
        let one_solve = |rx: &[f64], ry: &[f64]| -> (Vec<f64>, Vec<f64>) {
            let mut t = rx.to_vec();
            factor.solve_in_place(&self.structure, &mut t);
            if std::env::var_os("EVIO_QP_TRACE").is_some() {
                let mt = self.apply_m(&t, reg_boost);
                let err = mt
                    .iter()
                    .zip(rx)
                    .fold(0.0f64, |a, (m, r)| a.max((m - r).abs()));
                eprintln!("    minv check: {err:.3e} (|rx| {:.3e})", norm_inf(rx));
            }
            if self.p == 0 {
                return (t, Vec::new());
            }
            let mut rhs = self.prog.eq.matvec(&t);
            for (v, r) in rhs.iter_mut().zip(ry) {
                *v -= r;
            }
            let schur_rhs = rhs.clone();
            schur
                .as_ref()
                .expect("schur factored when p > 0")
                .solve_in_place(&mut rhs);
            let dy = rhs;
            if std::env::var_os("EVIO_QP_TRACE").is_some() {
                // Verify S dy ≈ rhs with S applied as an operator.
                let mut aty = vec![0.0; self.n];
                self.prog.eq.add_tr_matvec(1.0, &dy, &mut aty);
                factor.solve_in_place(&self.structure, &mut aty);
                let sdy = self.prog.eq.matvec(&aty);
                let err = sdy
                    .iter()
                    .zip(&schur_rhs)
                    .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
                eprintln!("    schur check: {err:.3e} (|rhs| {:.3e})", norm_inf(&schur_rhs));
            }
            let mut w = rx.to_vec();
            self.prog.eq.add_tr_matvec(-1.0, &dy, &mut w);
            factor.solve_in_place(&self.structure, &mut w);
            (w, dy)
        };

        // Residual of the true (unregularized apart from weight clamping)
        // system at a candidate direction.
        let residual = |dx: &[f64], dy: &[f64]| -> (Vec<f64>, Vec<f64>, f64) {
            let mdx = self.apply_m(dx, reg_boost);
            let mut r1 = rhs_x.to_vec();
            for j in 0..self.n {
                r1[j] -= mdx[j];
            }
            self.prog.eq.add_tr_matvec(-1.0, dy, &mut r1);
            let mut r2 = vec![0.0; self.p];
            if self.p > 0 {
                let adx = self.prog.eq.matvec(dx);
                for i in 0..self.p {
                    r2[i] = rhs_y[i] - adx[i];
                }
            }
            let err = norm_inf(&r1).max(norm_inf(&r2));
            (r1, r2, err)
        };

        // Monotone refinement: corrections are kept only while they shrink
        // the true residual. There is no meaningful fixed scale to stop at
        // (endgame right-hand sides are huge), so progress is the criterion.
        let (mut dx, mut dy) = one_solve(rhs_x, rhs_y);
        let (mut r1, mut r2, mut best_err) = residual(&dx, &dy);
        let dbg_first = best_err;
        for _ in 0..REFINE_ROUNDS {
            if best_err == 0.0 {
                break;
            }
            let (ex, ey) = one_solve(&r1, &r2);
            let cand_x: Vec<f64> = dx.iter().zip(&ex).map(|(a, b)| a + b).collect();
            let cand_y: Vec<f64> = dy.iter().zip(&ey).map(|(a, b)| a + b).collect();
            let (c1, c2, cand_err) = residual(&cand_x, &cand_y);
            if cand_err < best_err {
                dx = cand_x;
                dy = cand_y;
                r1 = c1;
                r2 = c2;
                best_err = cand_err;
            } else {
                break;
            }
        }
        if std::env::var_os("EVIO_QP_TRACE").is_some() {
            eprintln!(
                "  newton: first_err {dbg_first:.3e} final_err {best_err:.3e} |rhs_x| {:.3e} |rhs_y| {:.3e}",
                norm_inf(rhs_x), norm_inf(rhs_y)
            );
        }
        (dx, dy)
    }

    #[allow(clippy::too_many_arguments)]
    fn direction(
        &self,
        factor: &HessianFactor,
        schur: &Option<SkylineMatrix>,
        rd: &[f64],
        rp: &[f64],
        rg: &[f64],
        rl: &[f64],
        ru: &[f64],
        corrector: Option<(&Direction, f64)>,
        reg_boost: f64,
    ) -> Direction {
        let nl = self.lower_idx.len();
        let nu = self.upper_idx.len();
        let mut rcs = vec![0.0; self.m];
        let mut rcl = vec![0.0; nl];
        let mut rcu = vec![0.0; nu];
        match corrector {
            None => {
                for i in 0..self.m {
                    rcs[i] = self.s[i] * self.z[i];
                }
                for k in 0..nl {
                    rcl[k] = self.sl[k] * self.zl[k];
                }
                for k in 0..nu {
                    rcu[k] = self.su[k] * self.zu[k];
                }
            }
            Some((aff, center)) => {
                for i in 0..self.m {
                    rcs[i] = self.s[i] * self.z[i] + aff.ds[i] * aff.dz[i] - center;
                }
                for k in 0..nl {
                    rcl[k] = self.sl[k] * self.zl[k] + aff.dsl[k] * aff.dzl[k] - center;
                }
                for k in 0..nu {
                    rcu[k] = self.su[k] * self.zu[k] + aff.dsu[k] * aff.dzu[k] - center;
                }
            }
        }

        let mut rhs_x: Vec<f64> = rd.iter().map(|v| -v).collect();
        if self.m > 0 {
            let t: Vec<f64> = (0..self.m)
                .map(|i| (self.z[i] * rg[i] - rcs[i]) / self.s[i])
                .collect();
            self.prog.ineq.add_tr_matvec(-1.0, &t, &mut rhs_x);
        }
        for (k, &j) in self.lower_idx.iter().enumerate() {
            rhs_x[j] -= (rcl[k] - self.zl[k] * rl[k]) / self.sl[k];
        }
        for (k, &j) in self.upper_idx.iter().enumerate() {
            rhs_x[j] += (rcu[k] - self.zu[k] * ru[k]) / self.su[k];
        }
        let rhs_y: Vec<f64> = rp.iter().map(|v| -v).collect();

        let (dx, dy) = self.newton_solve(factor, schur, &rhs_x, &rhs_y, reg_boost);

        let gdx = self.prog.ineq.matvec(&dx);
        let mut ds = vec![0.0; self.m];
        let mut dz = vec![0.0; self.m];
        for i in 0..self.m {
            ds[i] = -rg[i] - gdx[i];
            dz[i] = -(rcs[i] + self.z[i] * ds[i]) / self.s[i];
        }
        let mut dsl = vec![0.0; nl];
        let mut dzl = vec![0.0; nl];
        for (k, &j) in self.lower_idx.iter().enumerate() {
            dsl[k] = dx[j] - rl[k];
            dzl[k] = -(rcl[k] + self.zl[k] * dsl[k]) / self.sl[k];
        }
        let mut dsu = vec![0.0; nu];
        let mut dzu = vec![0.0; nu];
        for (k, &j) in self.upper_idx.iter().enumerate() {
            dsu[k] = -ru[k] - dx[j];
            dzu[k] = -(rcu[k] + self.zu[k] * dsu[k]) / self.su[k];
        }

        Direction {
            dx,
            dy,
            ds,
            dz,
            dsl,
            dzl,
            dsu,
            dzu,
        }
    }

    fn max_steps(&self, d: &Direction) -> (f64, f64) {
        let mut ap = 1.0f64;
        let mut ad = 1.0f64;
        let limit = |cur: f64, delta: f64, a: &mut f64| {
            if delta < 0.0 {
                let step = -cur / delta;
                if step < *a {
                    *a = step;
                }
            }
        };
        for i in 0..self.m {
            limit(self.s[i], d.ds[i], &mut ap);
            limit(self.z[i], d.dz[i], &mut ad);
        }
        for k in 0..self.sl.len() {
            limit(self.sl[k], d.dsl[k], &mut ap);
            limit(self.zl[k], d.dzl[k], &mut ad);
        }
        for k in 0..self.su.len() {
            limit(self.su[k], d.dsu[k], &mut ap);
            limit(self.zu[k], d.dzu[k], &mut ad);
        }
        (ap, ad)
    }

    fn mu_after(&self, d: &Direction, ap: f64, ad: f64) -> f64 {
        let count = self.barrier_count();
        if count == 0 {
            return 0.0;
        }
        let mut total = 0.0;
        for i in 0..self.m {
            total += (self.s[i] + ap * d.ds[i]) * (self.z[i] + ad * d.dz[i]);
        }
        for k in 0..self.sl.len() {
            total += (self.sl[k] + ap * d.dsl[k]) * (self.zl[k] + ad * d.dzl[k]);
        }
        for k in 0..self.su.len() {
            total += (self.su[k] + ap * d.dsu[k]) * (self.zu[k] + ad * d.dzu[k]);
        }
        total / count as f64
    }

    fn take_step(&mut self, d: &Direction, ap: f64, ad: f64) {
        for j in 0..self.n {
            self.x[j] += ap * d.dx[j];
        }
        for i in 0..self.p {
            self.y[i] += ad * d.dy[i];
        }
        for i in 0..self.m {
            self.s[i] += ap * d.ds[i];
            self.z[i] += ad * d.dz[i];
        }
        for k in 0..self.sl.len() {
            self.sl[k] += ap * d.dsl[k];
            self.zl[k] += ad * d.dzl[k];
        }
        for k in 0..self.su.len() {
            self.su[k] += ap * d.dsu[k];
            self.zu[k] += ad * d.dzu[k];
        }
    }

    fn run(&mut self) -> Solution {
        let count = self.barrier_count();
        let mut best = f64::INFINITY;
        let mut stall = 0usize;
        let mut iterations = 0usize;

        let trace = std::env::var_os("EVIO_QP_TRACE").is_some();
        let mut polish_attempts = 0usize;
        for iter in 0..self.opts.max_iters {
            iterations = iter;
            let (rd, rp, rg, rl, ru, res) = self.residuals();
            let mu = self.mu();
            if trace {
                eprintln!(
                    "iter {iter}: rp {:.3e} rd {:.3e} gap {:.3e} mu {mu:.3e}",
                    res.primal, res.dual, res.complementarity,
                );
            }
            if res.primal <= self.opts.feas_tol
                && res.dual <= self.opts.feas_tol
                && res.complementarity <= self.opts.gap_tol
            {
                // Converged. A successful polish lands exactly on the active
                // face and is preferred; it has already verified within the
                // same tolerances.
                if let Some((x, pres)) = self.try_polish() {
                    self.x = x;
                    return self.finish(SolveStatus::Optimal, pres, iterations);
                }
                return self.finish(SolveStatus::Optimal, res, iterations);
            }
            // Near-converged but residuals flooring (degenerate active set):
            // attempt an exact finish on the guessed active set.
            if polish_attempts < 3
                && res.primal <= 1e4 * self.opts.feas_tol
                && res.complementarity <= 1e3 * self.opts.gap_tol
            {
                polish_attempts += 1;
                if let Some((x, pres)) = self.try_polish() {
                    self.x = x;
                    return self.finish(SolveStatus::Optimal, pres, iterations);
                }
            }

            let xnorm = norm_inf(&self.x);
            if !xnorm.is_finite() || !mu.is_finite() {
                return self.finish(SolveStatus::NumericalFailure, res, iterations);
            }
            let znorm = norm_inf(&self.z)
                .max(norm_inf(&self.zl))
                .max(norm_inf(&self.zu));
            if xnorm > 1e10 * self.rhs_scale || znorm > 1e10 * self.obj_scale {
                return self.finish(self.classify(&res), res, iterations);
            }
            let merit = res.primal.max(res.dual).max(res.complementarity);
            if merit < 0.9 * best {
                best = merit;
                stall = 0;
            } else {
                stall += 1;
            }
            if stall > 30 {
                if let Some((x, pres)) = self.try_polish() {
                    self.x = x;
                    return self.finish(SolveStatus::Optimal, pres, iterations);
                }
                return self.finish(self.classify(&res), res, iterations);
            }

            let mut reg_boost = 1.0;
            let factored = loop {
                match self.factor(reg_boost) {
                    Ok(f) => break Some(f),
                    Err(()) => {
                        reg_boost *= 1000.0;
                        if reg_boost > 1e7 {
                            break None;
                        }
                    }
                }
            };
            let Some((factor, schur)) = factored else {
                return self.finish(SolveStatus::NumericalFailure, res, iterations);
            };

            let dir_aff =
                self.direction(&factor, &schur, &rd, &rp, &rg, &rl, &ru, None, reg_boost);
            let (ap_aff, ad_aff) = self.max_steps(&dir_aff);
            let mu_aff = self.mu_after(&dir_aff, ap_aff.min(1.0), ad_aff.min(1.0));
            let sigma = if count == 0 || mu <= 0.0 {
                0.0
            } else {
                (mu_aff / mu).clamp(0.0, 1.0).powi(3)
            };

            let dir = self.direction(
                &factor,
                &schur,
                &rd,
                &rp,
                &rg,
                &rl,
                &ru,
                Some((&dir_aff, sigma * mu)),
                reg_boost,
            );
            let (ap, ad) = self.max_steps(&dir);
            // Push closer to the boundary once centrality is nearly resolved.
            let fraction = if res.complementarity < 1e-4 {
                0.9999
            } else {
                STEP_FRACTION
            };
            let ap = (fraction * ap).min(1.0);
            let ad = (fraction * ad).min(1.0);
            if ap < 1e-11 && ad < 1e-11 {
                stall += 10;
            }
            self.take_step(&dir, ap, ad);
        }

        let (_, _, _, _, _, res) = self.residuals();
        let status = if res.max() <= self.opts.gap_tol.max(self.opts.feas_tol) {
            SolveStatus::Optimal
        } else {
            SolveStatus::NumericalFailure
        };
        self.finish(status, res, iterations)
    }

    /// Try to finish the solve exactly: guess the active set from the dual
    /// ratios, solve the equality-constrained KKT system it induces, and
    /// verify. Degenerate endgames (weakly active constraints with both
    /// slack and dual near zero) floor the iterative residuals; the polished
    /// point removes that floor once the guess settles. The guess is refined
    /// a few rounds: violated constraints join the working set, constraints
    /// with negative multipliers leave it.
    fn try_polish(&self) -> Option<(Vec<f64>, KktResiduals)> {
        let prog = self.prog;
        let nl = self.lower_idx.len();
        let nu = self.upper_idx.len();
        let mut act_rows: Vec<bool> = (0..self.m).map(|i| self.z[i] >= self.s[i]).collect();
        let mut act_lower: Vec<bool> = (0..nl).map(|k| self.zl[k] >= self.sl[k]).collect();
        let mut act_upper: Vec<bool> = (0..nu).map(|k| self.zu[k] >= self.su[k]).collect();
        let viol_tol = self.opts.feas_tol * self.rhs_scale;
        let sign_tol = 1e-7 * self.obj_scale;

        for _round in 0..4 {
            let mut sub = ConvexProgram::new(self.n);
            sub.quad = prog.quad.clone();
            sub.linear = prog.linear.clone();
            sub.offset = prog.offset;
            let mut eq = CsrBuilder::new(self.n);
            let mut rhs = Vec::new();
            for r in 0..self.p {
                let (cols, vals) = prog.eq.row(r);
                let entries: Vec<(usize, f64)> =
                    cols.iter().zip(vals).map(|(&c, &v)| (c, v)).collect();
                eq.push_row(&entries);
                rhs.push(prog.eq_rhs[r]);
            }
            let rows: Vec<usize> = (0..self.m).filter(|&i| act_rows[i]).collect();
            for &i in &rows {
                let (cols, vals) = prog.ineq.row(i);
                let entries: Vec<(usize, f64)> =
                    cols.iter().zip(vals).map(|(&c, &v)| (c, v)).collect();
                eq.push_row(&entries);
                rhs.push(prog.ineq_rhs[i]);
            }
            let lowers: Vec<usize> = (0..nl).filter(|&k| act_lower[k]).collect();
            for &k in &lowers {
                eq.push_row(&[(self.lower_idx[k], 1.0)]);
                rhs.push(prog.lower[self.lower_idx[k]]);
            }
            let uppers: Vec<usize> = (0..nu).filter(|&k| act_upper[k]).collect();
            for &k in &uppers {
                eq.push_row(&[(self.upper_idx[k], 1.0)]);
                rhs.push(prog.upper[self.upper_idx[k]]);
            }
            sub.eq = eq.build();
            sub.eq_rhs = rhs;

            let opts = SolveOptions {
                feas_tol: self.opts.feas_tol,
                gap_tol: self.opts.gap_tol,
                max_iters: 50,
            };
            // Plain Newton: no barriers on an equality-constrained problem.
            // Redundant active rows are expected; the regularization ladder
            // below handles them and the repeated Newton steps act as a
            // proximal iteration that washes the extra regularization out.
            let mut ipm = Ipm::new(&sub, &opts);
            let mut prev_merit = f64::INFINITY;
            for _ in 0..opts.max_iters {
                let (rd, rp, rg, rl, ru, res) = ipm.residuals();
                // Newton on a linear KKT system: drive to machine precision,
                // stop when progress dies out.
                let merit = res.primal.max(res.dual);
                if merit <= 1e-13 || merit >= 0.5 * prev_merit {
                    break;
                }
                prev_merit = merit;
                if !norm_inf(&ipm.x).is_finite() {
                    return None;
                }
                let mut boost = 1.0;
                let factored = loop {
                    match ipm.factor(boost) {
                        Ok(f) => break Some(f),
                        Err(()) => {
                            boost *= 1000.0;
                            if boost > 1e7 {
                                break None;
                            }
                        }
                    }
                };
                let Some((factor, schur)) = factored else {
                    return None;
                };
                let dir = ipm.direction(&factor, &schur, &rd, &rp, &rg, &rl, &ru, None, boost);
                ipm.take_step(&dir, 1.0, 1.0);
            }

            let x = ipm.x;
            let mut z = vec![0.0; self.m];
            let mut zl = vec![0.0; nl];
            let mut zu = vec![0.0; nu];
            let mut cursor = self.p;
            let mut sign_ok = true;
            for &i in &rows {
                let v = ipm.y[cursor];
                cursor += 1;
                if v < -sign_tol {
                    act_rows[i] = false;
                    sign_ok = false;
                }
                z[i] = v.max(0.0);
            }
            for &k in &lowers {
                let v = -ipm.y[cursor];
                cursor += 1;
                if v < -sign_tol {
                    act_lower[k] = false;
                    sign_ok = false;
                }
                zl[k] = v.max(0.0);
            }
            for &k in &uppers {
                let v = ipm.y[cursor];
                cursor += 1;
                if v < -sign_tol {
                    act_upper[k] = false;
                    sign_ok = false;
                }
                zu[k] = v.max(0.0);
            }

            // Add violated inactive constraints to the working set.
            let mut feas_ok = true;
            let gx = prog.ineq.matvec(&x);
            for i in 0..self.m {
                if !act_rows[i] && gx[i] - prog.ineq_rhs[i] > viol_tol {
                    act_rows[i] = true;
                    feas_ok = false;
                }
            }
            for (k, &j) in self.lower_idx.iter().enumerate() {
                if !act_lower[k] && prog.lower[j] - x[j] > viol_tol {
                    act_lower[k] = true;
                    feas_ok = false;
                }
            }
            for (k, &j) in self.upper_idx.iter().enumerate() {
                if !act_upper[k] && x[j] - prog.upper[j] > viol_tol {
                    act_upper[k] = true;
                    feas_ok = false;
                }
            }

            if sign_ok && feas_ok {
                let y = ipm.y[..self.p].to_vec();
                let res = match self.residuals_at(&x, &y, &z, &zl, &zu) {
                    Some(r) => r,
                    None => {
                        if std::env::var_os("EVIO_QP_TRACE").is_some() {
                            eprintln!("polish: rejected (infeasible point)");
                        }
                        return None;
                    }
                };
                if std::env::var_os("EVIO_QP_TRACE").is_some() {
                    eprintln!(
                        "polish: verify rp {:.3e} rd {:.3e} gap {:.3e}",
                        res.primal, res.dual, res.complementarity
                    );
                }
                if res.primal <= self.opts.feas_tol
                    && res.dual <= self.opts.feas_tol
                    && res.complementarity <= self.opts.gap_tol
                {
                    return Some((x, res));
                }
                return None;
            }
            if std::env::var_os("EVIO_QP_TRACE").is_some() {
                eprintln!("polish: round {_round} sign_ok {sign_ok} feas_ok {feas_ok}");
            }
        }
        None
    }

    /// KKT residuals of an arbitrary primal/dual point with slacks derived
    /// from the primal values. Returns None if the point is not feasible to
    /// working precision (negative derived slacks beyond tolerance).
    fn residuals_at(
        &self,
        x: &[f64],
        y: &[f64],
        z: &[f64],
        zl: &[f64],
        zu: &[f64],
    ) -> Option<KktResiduals> {
        let prog = self.prog;
        let feas_slack = 10.0 * self.opts.feas_tol * self.rhs_scale;
        let mut rd = self.quad_matvec(x);
        for (rdj, cj) in rd.iter_mut().zip(&prog.linear) {
            *rdj += cj;
        }
        prog.eq.add_tr_matvec(1.0, y, &mut rd);
        prog.ineq.add_tr_matvec(1.0, z, &mut rd);
        for (k, &j) in self.lower_idx.iter().enumerate() {
            rd[j] -= zl[k];
        }
        for (k, &j) in self.upper_idx.iter().enumerate() {
            rd[j] += zu[k];
        }
        let mut primal = 0.0f64;
        let rp = prog.eq.matvec(x);
        for (v, b) in rp.iter().zip(&prog.eq_rhs) {
            primal = primal.max((v - b).abs());
        }
        let gx = prog.ineq.matvec(x);
        let mut compl = 0.0;
        for i in 0..self.m {
            let s = prog.ineq_rhs[i] - gx[i];
            if s < -feas_slack {
                return None;
            }
            primal = primal.max(-s);
            compl += s.max(0.0) * z[i];
        }
        for (k, &j) in self.lower_idx.iter().enumerate() {
            let s = x[j] - prog.lower[j];
            if s < -feas_slack {
                return None;
            }
            primal = primal.max(-s);
            compl += s.max(0.0) * zl[k];
        }
        for (k, &j) in self.upper_idx.iter().enumerate() {
            let s = prog.upper[j] - x[j];
            if s < -feas_slack {
                return None;
            }
            primal = primal.max(-s);
            compl += s.max(0.0) * zu[k];
        }
        let qx = self.quad_matvec(x);
        let obj = 0.5 * dot(&qx, x) + dot(&prog.linear, x) + prog.offset;
        Some(KktResiduals {
            primal: primal / self.rhs_scale,
            dual: norm_inf(&rd) / (self.obj_scale + norm_inf(&qx)),
            complementarity: compl.abs() / (1.0 + obj.abs()),
        })
    }

    /// Heuristic verdict for a solve that stopped making progress. Primal
    /// infeasibility shows up as diverging duals against a stuck primal
    /// residual; unboundedness as diverging primals against a stuck dual.
    fn classify(&self, res: &KktResiduals) -> SolveStatus {
        let xgrow = norm_inf(&self.x) / self.rhs_scale;
        let zgrow = norm_inf(&self.z)
            .max(norm_inf(&self.zl))
            .max(norm_inf(&self.zu))
            / self.obj_scale;
        let primal_stuck = res.primal > 100.0 * self.opts.feas_tol;
        let dual_stuck = res.dual > 100.0 * self.opts.feas_tol;
        if primal_stuck && zgrow > 1e4 * (xgrow + 1.0) {
            return SolveStatus::Infeasible;
        }
        if dual_stuck && xgrow > 1e4 * (zgrow + 1.0) {
            return SolveStatus::Unbounded;
        }
        if primal_stuck && zgrow > 1e6 {
            return SolveStatus::Infeasible;
        }
        if dual_stuck && xgrow > 1e6 {
            return SolveStatus::Unbounded;
        }
        SolveStatus::NumericalFailure
    }

    fn finish(&self, status: SolveStatus, res: KktResiduals, iterations: usize) -> Solution {
        Solution {
            x: self.x.clone(),
            objective: self.objective_at(&self.x),
            status,
            residuals: res,
            iterations,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::CsrBuilder;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn one_variable_lp_hits_bound() {
        // min x  s.t.  x ≥ 3
        let mut p = ConvexProgram::new(1);
        p.linear = vec![1.0];
        p.lower = vec![3.0];
        let sol = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_close(sol.x[0], 3.0, 1e-6);
        assert_close(sol.objective, 3.0, 1e-6);
        assert!(sol.residuals.max() <= 1e-7);
    }

    #[test]
    fn clipped_quadratic() {
        // min (x−2)²  s.t. 0 ≤ x ≤ 1  →  x = 1, objective 1
        let mut p = ConvexProgram::new(1);
        p.quad = Quadratic::Diagonal(vec![2.0]);
        p.linear = vec![-4.0];
        p.offset = 4.0;
        p.lower = vec![0.0];
        p.upper = vec![1.0];
        let sol = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_close(sol.x[0], 1.0, 1e-7);
        assert_close(sol.objective, 1.0, 1e-6);
    }

    #[test]
    fn equality_constrained_qp() {
        // min x² + y²  s.t. x + y = 2  →  (1, 1)
        let mut p = ConvexProgram::new(2);
        p.quad = Quadratic::Diagonal(vec![2.0, 2.0]);
        let mut eq = CsrBuilder::new(2);
        eq.push_row(&[(0, 1.0), (1, 1.0)]);
        p.eq = eq.build();
        p.eq_rhs = vec![2.0];
        let sol = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_close(sol.x[0], 1.0, 1e-7);
        assert_close(sol.x[1], 1.0, 1e-7);
    }

    #[test]
    fn dense_quadratic_coupled() {
        // min ½ xᵀ[[2,1],[1,2]]x − [3,3]·x → unconstrained optimum (1,1)
        let mut q = Matrix::zeros(2, 2);
        q.set(0, 0, 2.0);
        q.set(0, 1, 1.0);
        q.set(1, 0, 1.0);
        q.set(1, 1, 2.0);
        let mut p = ConvexProgram::new(2);
        p.quad = Quadratic::Dense(q);
        p.linear = vec![-3.0, -3.0];
        p.lower = vec![-10.0, -10.0];
        p.upper = vec![10.0, 10.0];
        let sol = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_close(sol.x[0], 1.0, 1e-6);
        assert_close(sol.x[1], 1.0, 1e-6);
    }

    #[test]
    fn lp_with_coupling_row() {
        // max x + 2y  s.t. x + y ≤ 4, x ≤ 3, y ≤ 3, x,y ≥ 0 → (1,3), obj −7.
        let mut p = ConvexProgram::new(2);
        p.linear = vec![-1.0, -2.0];
        p.lower = vec![0.0, 0.0];
        p.upper = vec![3.0, 3.0];
        let mut g = CsrBuilder::new(2);
        g.push_row(&[(0, 1.0), (1, 1.0)]);
        p.ineq = g.build();
        p.ineq_rhs = vec![4.0];
        let sol = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert_close(sol.objective, -7.0, 1e-6);
        assert_close(sol.x[0], 1.0, 1e-6);
        assert_close(sol.x[1], 3.0, 1e-6);
    }

    #[test]
    fn detects_infeasible() {
        // x ≤ 2 and x ≥ 3 via inequality rows.
        let mut p = ConvexProgram::new(1);
        p.linear = vec![1.0];
        let mut g = CsrBuilder::new(1);
        g.push_row(&[(0, 1.0)]);
        g.push_row(&[(0, -1.0)]);
        p.ineq = g.build();
        p.ineq_rhs = vec![2.0, -3.0];
        let sol = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Infeasible);
    }

    #[test]
    fn detects_unbounded() {
        // min x  s.t.  x ≤ 3
        let mut p = ConvexProgram::new(1);
        p.linear = vec![1.0];
        p.upper = vec![3.0];
        let sol = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Unbounded);
    }

    #[test]
    fn deterministic_re_solve() {
        let mut p = ConvexProgram::new(3);
        p.quad = Quadratic::Diagonal(vec![1.0, 2.0, 0.5]);
        p.linear = vec![-1.0, 0.3, 2.0];
        p.lower = vec![-1.0, -2.0, 0.0];
        p.upper = vec![4.0, 2.0, 5.0];
        let mut g = CsrBuilder::new(3);
        g.push_row(&[(0, 1.0), (1, 1.0), (2, 1.0)]);
        p.ineq = g.build();
        p.ineq_rhs = vec![3.0];
        let a = solve(&p, &SolveOptions::default()).unwrap();
        let b = solve(&p, &SolveOptions::default()).unwrap();
        assert_eq!(a.status, SolveStatus::Optimal);
        assert_eq!(a.x, b.x); // bit-identical
    }

    #[test]
    fn rejects_malformed() {
        let mut p = ConvexProgram::new(2);
        p.lower = vec![1.0, 0.0];
        p.upper = vec![0.0, 1.0];
        assert!(matches!(
            solve(&p, &SolveOptions::default()),
            Err(ProgramError::EmptyBox(0))
        ));
    }
}
