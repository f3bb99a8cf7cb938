//! Primal active-set solver for small dense convex quadratic programs
//!
//! ```text
//!     minimize    ½ xᵀHx + fᵀx
//!     subject to  Aeq x  = beq
//!                 Ain x <= bin
//! ```
//!
//! `H` must be positive definite on the null space of every working set the
//! iteration visits (in practice: on the null space of the equalities).
//! Infeasible starting points are handled with an exact-penalty elastic
//! variable, so no separate LP phase is needed.

use super::{LuFactor, Matrix, NumericsError, Result, Vector};

const RANK_TOL: f64 = 1e-10;
const FEAS_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: Matrix,
    pub f: Vector,
    pub aeq: Matrix,
    pub beq: Vector,
    pub ain: Matrix,
    pub bin: Vector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

impl QpStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            QpStatus::Optimal => "optimal",
            QpStatus::Infeasible => "infeasible",
            QpStatus::MaxIterations => "max-iterations",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: Vector,
    pub objective: f64,
    pub status: QpStatus,
    pub iterations: usize,
    /// Indices of inequality rows in the final working set, ascending.
    pub active: Vec<usize>,
    /// Multipliers of the inequality rows (zero for inactive rows).
    pub ineq_multipliers: Vector,
}

impl QpProblem {
    /// Unconstrained problem; add constraints with the builder methods.
    pub fn new(h: Matrix, f: Vector) -> Self {
        let n = f.len();
        Self {
            h,
            f,
            aeq: Matrix::zeros(0, n),
            beq: Vector::zeros(0),
            ain: Matrix::zeros(0, n),
            bin: Vector::zeros(0),
        }
    }

    pub fn with_equalities(mut self, aeq: Matrix, beq: Vector) -> Self {
        self.aeq = aeq;
        self.beq = beq;
        self
    }

    pub fn with_inequalities(mut self, ain: Matrix, bin: Vector) -> Self {
        self.ain = ain;
        self.bin = bin;
        self
    }

    pub fn dim(&self) -> usize {
        self.f.len()
    }

    pub fn objective(&self, x: &Vector) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.f.dot(x)
    }

    /// Largest inequality or equality violation at `x`.
    pub fn max_violation(&self, x: &Vector) -> f64 {
        let ineq = if self.ain.nrows() > 0 {
            (&self.ain * x - &self.bin).max().max(0.0)
        } else {
            0.0
        };
        let eq = if self.aeq.nrows() > 0 {
            (&self.aeq * x - &self.beq).amax()
        } else {
            0.0
        };
        ineq.max(eq)
    }

    fn validate(&self) -> Result<()> {
        let n = self.dim();
        let ok = self.h.shape() == (n, n)
            && self.aeq.ncols() == n
            && self.aeq.nrows() == self.beq.len()
            && self.ain.ncols() == n
            && self.ain.nrows() == self.bin.len();
        if ok {
            Ok(())
        } else {
            Err(NumericsError::Dimension(format!(
                "QP with {n} variables: H {:?}, Aeq {:?}/{}, Ain {:?}/{}",
                self.h.shape(),
                self.aeq.shape(),
                self.beq.len(),
                self.ain.shape(),
                self.bin.len()
            )))
        }
    }
}

/// Solves `problem` starting from the origin.
pub fn solve_qp(problem: &QpProblem) -> Result<QpSolution> {
    solve_qp_from(problem, &Vector::zeros(problem.dim()))
}

/// Solves `problem` warm-started at `x0`. The start need not be feasible.
pub fn solve_qp_from(problem: &QpProblem, x0: &Vector) -> Result<QpSolution> {
    problem.validate()?;
    let n = problem.dim();
    if x0.len() != n {
        return Err(NumericsError::Dimension("QP start point".into()));
    }

    let Some(eq) = EqualitySystem::reduce(&problem.aeq, &problem.beq)? else {
        return Ok(finish(problem, x0.clone(), QpStatus::Infeasible, 0, vec![], vec![]));
    };
    let x = eq.project(x0)?;

    let violation = if problem.ain.nrows() > 0 {
        (&problem.ain * &x - &problem.bin).max()
    } else {
        f64::NEG_INFINITY
    };
    if violation <= FEAS_TOL * (1.0 + problem.bin.amax()) {
        let run = ActiveSet::new(&problem.h, &problem.f, &eq.a, &problem.ain, &problem.bin).run(x, Vec::new())?;
        return Ok(finish(
            problem,
            run.x,
            run.status,
            run.iterations,
            run.working,
            run.multipliers,
        ));
    }
    elastic_solve(problem, &eq, x, violation)
}

/// Exact-penalty phase: adds one elastic variable `t ≥ 0` relaxing every
/// inequality by `t`, with linear weight `M`. For `M` above the sum of the
/// optimal multipliers the solution has `t = 0` and solves the original
/// problem; otherwise `M` is escalated.
fn elastic_solve(problem: &QpProblem, eq: &EqualitySystem, x: Vector, violation: f64) -> Result<QpSolution> {
    let n = problem.dim();
    let mi = problem.ain.nrows();
    let scale = 1.0 + problem.h.amax() + problem.f.amax();

    let mut h = Matrix::zeros(n + 1, n + 1);
    h.view_mut((0, 0), (n, n)).copy_from(&problem.h);
    h[(n, n)] = 1.0;
    let mut aeq = Matrix::zeros(eq.a.nrows(), n + 1);
    aeq.view_mut((0, 0), (eq.a.nrows(), n)).copy_from(&eq.a);
    let mut ain = Matrix::zeros(mi + 1, n + 1);
    ain.view_mut((0, 0), (mi, n)).copy_from(&problem.ain);
    for i in 0..mi {
        ain[(i, n)] = -1.0;
    }
    ain[(mi, n)] = -1.0;
    let mut bin = Vector::zeros(mi + 1);
    bin.rows_mut(0, mi).copy_from(&problem.bin);

    let mut start = Vector::zeros(n + 1);
    start.rows_mut(0, n).copy_from(&x);
    start[n] = violation;

    let feas = FEAS_TOL * (1.0 + problem.bin.amax());
    let mut total_iterations = 0;
    let mut best = x;
    for k in 0..6 {
        let penalty = scale * 1e3 * 100f64.powi(k);
        let mut f = Vector::zeros(n + 1);
        f.rows_mut(0, n).copy_from(&problem.f);
        f[n] = penalty;
        let run = ActiveSet::new(&h, &f, &aeq, &ain, &bin).run(start.clone(), Vec::new())?;
        total_iterations += run.iterations;
        best = run.x.rows(0, n).into_owned();
        if run.status == QpStatus::MaxIterations {
            return Ok(finish(
                problem,
                best,
                QpStatus::MaxIterations,
                total_iterations,
                vec![],
                vec![],
            ));
        }
        if run.x[n] <= feas {
            // polish on the original problem from the elastic optimum
            let working: Vec<usize> = run.working.iter().copied().filter(|&i| i < mi).collect();
            let solver = ActiveSet::new(&problem.h, &problem.f, &eq.a, &problem.ain, &problem.bin);
            let polished = solver.run(best.clone(), working)?;
            total_iterations += polished.iterations;
            return Ok(finish(
                problem,
                polished.x,
                polished.status,
                total_iterations,
                polished.working,
                polished.multipliers,
            ));
        }
        start = run.x;
    }
    Ok(finish(
        problem,
        best,
        QpStatus::Infeasible,
        total_iterations,
        vec![],
        vec![],
    ))
}

fn finish(
    problem: &QpProblem,
    x: Vector,
    status: QpStatus,
    iterations: usize,
    working: Vec<usize>,
    multipliers: Vec<f64>,
) -> QpSolution {
    let mut ineq_multipliers = Vector::zeros(problem.ain.nrows());
    for (&i, &mu) in working.iter().zip(&multipliers) {
        ineq_multipliers[i] = mu;
    }
    let mut active = working;
    active.sort_unstable();
    QpSolution {
        objective: problem.objective(&x),
        x,
        status,
        iterations,
        active,
        ineq_multipliers,
    }
}

/// Linearly independent subset of the equality rows.
struct EqualitySystem {
    a: Matrix,
    b: Vector,
    /// Factor of `A Aᵀ` for least-norm projections.
    gram: Option<LuFactor>,
}

impl EqualitySystem {
    /// Drops dependent rows; returns `None` when the system is inconsistent.
    fn reduce(aeq: &Matrix, beq: &Vector) -> Result<Option<Self>> {
        let n = aeq.ncols();
        let mut basis: Vec<Vector> = Vec::new();
        let mut kept = Vec::new();
        for i in 0..aeq.nrows() {
            let row = aeq.row(i).transpose();
            let norm = row.norm();
            let mut v = row.clone();
            for _ in 0..2 {
                for q in &basis {
                    let c = q.dot(&v);
                    v -= q * c;
                }
            }
            let rest = v.norm();
            if rest > RANK_TOL * norm.max(1.0) {
                basis.push(v / rest);
                kept.push(i);
            }
        }
        let a = Matrix::from_fn(kept.len(), n, |r, c| aeq[(kept[r], c)]);
        let b = Vector::from_fn(kept.len(), |r, _| beq[kept[r]]);
        let gram = if kept.is_empty() {
            None
        } else {
            Some(LuFactor::new(&(&a * a.transpose()))?)
        };
        let sys = Self { a, b, gram };
        // consistency of the dropped rows
        let x = sys.project(&Vector::zeros(n))?;
        for i in 0..aeq.nrows() {
            let r = aeq.row(i).transpose();
            let resid = (r.dot(&x) - beq[i]).abs();
            if resid > RANK_TOL * (1.0 + beq[i].abs() + r.norm() * x.amax()) * 1e2 {
                return Ok(None);
            }
        }
        Ok(Some(sys))
    }

    /// Closest point to `x0` on the affine set.
    fn project(&self, x0: &Vector) -> Result<Vector> {
        match &self.gram {
            None => Ok(x0.clone()),
            Some(lu) => {
                let resid = &self.b - &self.a * x0;
                let y = lu.solve(&resid)?;
                Ok(x0 + self.a.transpose() * y)
            }
        }
    }
}

struct ActiveSet<'a> {
    h: &'a Matrix,
    f: &'a Vector,
    aeq: &'a Matrix,
    ain: &'a Matrix,
    bin: &'a Vector,
    /// `(column, coefficient)` of rows with a single nonzero.
    bounds: Vec<Option<(usize, f64)>>,
    max_iterations: usize,
}

struct Run {
    x: Vector,
    status: QpStatus,
    iterations: usize,
    working: Vec<usize>,
    multipliers: Vec<f64>,
}

impl<'a> ActiveSet<'a> {
    fn new(h: &'a Matrix, f: &'a Vector, aeq: &'a Matrix, ain: &'a Matrix, bin: &'a Vector) -> Self {
        let max_iterations = 100 + 20 * (f.len() + ain.nrows());
        let bounds = (0..ain.nrows())
            .map(|i| {
                let row = ain.row(i);
                let mut nz = (0..row.len()).filter(|&j| row[j] != 0.0);
                match (nz.next(), nz.next()) {
                    (Some(j), None) => Some((j, row[j])),
                    _ => None,
                }
            })
            .collect();
        Self {
            h,
            f,
            aeq,
            ain,
            bin,
            bounds,
            max_iterations,
        }
    }

    fn fixed(&self, working: &[usize]) -> Vec<bool> {
        let mut fixed = vec![false; self.f.len()];
        for &i in working {
            if let Some((j, _)) = self.bounds[i] {
                fixed[j] = true;
            }
        }
        fixed
    }

    /// Whether adding row `cand` keeps the working constraints linearly
    /// independent once bound variables are eliminated.
    fn independent(&self, working: &[usize], cand: usize) -> bool {
        let mut fixed = self.fixed(working);
        if let Some((j, _)) = self.bounds[cand] {
            if fixed[j] {
                return false;
            }
            fixed[j] = true;
        }
        let free: Vec<usize> = (0..fixed.len()).filter(|&j| !fixed[j]).collect();
        let general = working
            .iter()
            .copied()
            .chain(std::iter::once(cand))
            .filter(|&i| self.bounds[i].is_none());
        let rows = (0..self.aeq.nrows())
            .map(|r| Vector::from_iterator(free.len(), free.iter().map(|&c| self.aeq[(r, c)])))
            .chain(general.map(|i| Vector::from_iterator(free.len(), free.iter().map(|&c| self.ain[(i, c)]))));
        let mut basis: Vec<Vector> = Vec::new();
        for row in rows {
            let norm = row.norm();
            let mut v = row;
            for _ in 0..2 {
                for q in &basis {
                    let c = q.dot(&v);
                    v -= q * c;
                }
            }
            let rest = v.norm();
            if rest <= RANK_TOL * norm.max(1.0) {
                return false;
            }
            basis.push(v / rest);
        }
        true
    }

    /// Solves the equality-constrained subproblem on the working set with
    /// bound rows eliminated. Returns the step, the equality multipliers and
    /// the working-set multipliers in `working` order.
    fn kkt(&self, g: &Vector, working: &[usize]) -> Result<(Vector, Vector, Vec<f64>)> {
        let n = self.f.len();
        let me = self.aeq.nrows();
        let fixed = self.fixed(working);
        let free: Vec<usize> = (0..n).filter(|&j| !fixed[j]).collect();
        let general: Vec<usize> = working.iter().copied().filter(|&i| self.bounds[i].is_none()).collect();
        let nf = free.len();
        let k = me + general.len();
        let mut m = Matrix::zeros(nf + k, nf + k);
        for (a, &ca) in free.iter().enumerate() {
            for (b, &cb) in free.iter().enumerate() {
                m[(a, b)] = self.h[(ca, cb)];
            }
        }
        for r in 0..me {
            for (a, &c) in free.iter().enumerate() {
                m[(nf + r, a)] = self.aeq[(r, c)];
                m[(a, nf + r)] = self.aeq[(r, c)];
            }
        }
        for (j, &i) in general.iter().enumerate() {
            for (a, &c) in free.iter().enumerate() {
                m[(nf + me + j, a)] = self.ain[(i, c)];
                m[(a, nf + me + j)] = self.ain[(i, c)];
            }
        }
        let mut rhs = Vector::zeros(nf + k);
        for (a, &c) in free.iter().enumerate() {
            rhs[a] = -g[c];
        }
        let sol = if nf + k == 0 {
            Vector::zeros(0)
        } else {
            LuFactor::new(&m)?.solve(&rhs)?
        };
        let mut p = Vector::zeros(n);
        for (a, &c) in free.iter().enumerate() {
            p[c] = sol[a];
        }
        let eq_mult = sol.rows(nf, me).into_owned();
        // stationarity residual on the fixed coordinates gives the bound multipliers
        let mut resid = g + self.h * &p + self.aeq.transpose() * &eq_mult;
        let mut mult = vec![0.0; working.len()];
        for (j, &i) in general.iter().enumerate() {
            let lam = sol[nf + me + j];
            resid += self.ain.row(i).transpose() * lam;
        }
        for (w, &i) in working.iter().enumerate() {
            match self.bounds[i] {
                Some((c, a)) => mult[w] = -resid[c] / a,
                None => {
                    let j = general.iter().position(|&r| r == i).expect("general row");
                    mult[w] = sol[nf + me + j];
                }
            }
        }
        Ok((p, eq_mult, mult))
    }

    fn snap(&self, x: &mut Vector, working: &[usize]) {
        for &i in working {
            if let Some((c, a)) = self.bounds[i] {
                x[c] = self.bin[i] / a;
            }
        }
    }

    fn run(&self, mut x: Vector, hint: Vec<usize>) -> Result<Run> {
        let feas = FEAS_TOL * (1.0 + self.bin.amax());
        let mut working: Vec<usize> = Vec::new();
        let mut seeds = hint;
        seeds.extend((0..self.ain.nrows()).filter(|&i| {
            let slack = self.bin[i] - self.ain.row(i).dot(&x.transpose());
            slack <= feas
        }));
        seeds.sort_unstable();
        seeds.dedup();
        for i in seeds {
            if self.independent(&working, i) {
                working.push(i);
            }
        }
        self.snap(&mut x, &working);

        let mut at_subproblem_min = false;
        for iter in 0..self.max_iterations {
            let g = self.h * &x + self.f;
            let (p, _, mult) = self.kkt(&g, &working)?;
            let x_scale = 1.0 + x.amax();
            if at_subproblem_min || p.amax() <= 1e-12 * x_scale {
                let mu_tol = 1e-9 * (1.0 + g.amax());
                // lowest-index negative multiplier leaves (Bland)
                let leaving = working
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| mult[j] < -mu_tol)
                    .min_by_key(|&(_, &i)| i)
                    .map(|(j, _)| j);
                match leaving {
                    None => {
                        return Ok(Run {
                            x,
                            status: QpStatus::Optimal,
                            iterations: iter,
                            working,
                            multipliers: mult,
                        });
                    }
                    Some(j) => {
                        working.remove(j);
                        at_subproblem_min = false;
                        continue;
                    }
                }
            }

            let p_norm = p.amax();
            let mut excluded: Vec<usize> = Vec::new();
            let (alpha, blocking) = loop {
                let mut alpha = 1.0;
                let mut blocking = None;
                for i in 0..self.ain.nrows() {
                    if working.contains(&i) || excluded.contains(&i) {
                        continue;
                    }
                    let row = self.ain.row(i);
                    let ap = row.dot(&p.transpose());
                    if ap <= 1e-14 * p_norm * (1.0 + row.amax()) {
                        continue;
                    }
                    let slack = (self.bin[i] - row.dot(&x.transpose())).max(0.0);
                    let step = slack / ap;
                    if step < alpha {
                        alpha = step;
                        blocking = Some(i);
                    }
                }
                match blocking {
                    Some(i) if !self.independent(&working, i) => excluded.push(i),
                    _ => break (alpha, blocking),
                }
            };
            x += &p * alpha;
            match blocking {
                Some(i) => {
                    let pos = working.partition_point(|&w| w < i);
                    working.insert(pos, i);
                    self.snap(&mut x, &working);
                    at_subproblem_min = false;
                }
                None => at_subproblem_min = true,
            }
        }
        Ok(Run {
            x,
            status: QpStatus::MaxIterations,
            iterations: self.max_iterations,
            working,
            multipliers: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn v(x: &[f64]) -> Vector {
        Vector::from_row_slice(x)
    }

    #[test]
    fn projection_onto_half_space() {
        let p = QpProblem::new(Matrix::identity(2, 2) * 2.0, v(&[-4.0, 0.0]))
            .with_inequalities(Matrix::from_row_slice(1, 2, &[1.0, 0.0]), v(&[1.0]));
        let s = solve_qp(&p).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert_relative_eq!(s.x[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(s.x[1], 0.0, epsilon = 1e-12);
        assert_eq!(s.active, vec![0]);
        assert_relative_eq!(s.ineq_multipliers[0], 2.0, epsilon = 1e-9);
    }

    #[test]
    fn unconstrained() {
        let p = QpProblem::new(Matrix::identity(2, 2) * 2.0, v(&[-2.0, -2.0]));
        let s = solve_qp(&p).unwrap();
        assert_relative_eq!(s.x[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(s.x[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn infeasible_start_is_recovered() {
        // x >= 3 and y >= 2 from the origin
        let p = QpProblem::new(Matrix::identity(2, 2), v(&[0.0, 0.0]))
            .with_inequalities(Matrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -1.0]), v(&[-3.0, -2.0]));
        let s = solve_qp(&p).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert_relative_eq!(s.x[0], 3.0, epsilon = 1e-9);
        assert_relative_eq!(s.x[1], 2.0, epsilon = 1e-9);
    }

    #[test]
    fn inconsistent_equalities() {
        let p = QpProblem::new(Matrix::identity(2, 2), v(&[0.0, 0.0]))
            .with_equalities(Matrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]), v(&[1.0, 3.0]));
        assert_eq!(solve_qp(&p).unwrap().status, QpStatus::Infeasible);
    }

    #[test]
    fn redundant_equalities_are_dropped() {
        let p = QpProblem::new(Matrix::identity(2, 2), v(&[0.0, 0.0]))
            .with_equalities(Matrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]), v(&[1.0, 2.0]));
        let s = solve_qp(&p).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert_relative_eq!(s.x[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(s.x[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn infeasible_inequalities() {
        let p = QpProblem::new(Matrix::identity(1, 1), v(&[0.0]))
            .with_inequalities(Matrix::from_row_slice(2, 1, &[1.0, -1.0]), v(&[-1.0, -1.0]));
        assert_eq!(solve_qp(&p).unwrap().status, QpStatus::Infeasible);
    }

    #[test]
    fn equality_only_matches_kkt_solve() {
        let h = Matrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        let f = v(&[1.0, -2.0, 0.5]);
        let a = Matrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]);
        let b = v(&[2.0]);
        let s = solve_qp(&QpProblem::new(h.clone(), f.clone()).with_equalities(a.clone(), b.clone())).unwrap();
        let mut kkt = Matrix::zeros(4, 4);
        kkt.view_mut((0, 0), (3, 3)).copy_from(&h);
        kkt.view_mut((3, 0), (1, 3)).copy_from(&a);
        kkt.view_mut((0, 3), (3, 1)).copy_from(&a.transpose());
        let rhs = v(&[-1.0, 2.0, -0.5, 2.0]);
        let sol = kkt.lu().solve(&rhs).unwrap();
        assert!((s.x - sol.rows(0, 3)).amax() < 1e-9);
    }

    #[test]
    fn deterministic() {
        let p = QpProblem::new(Matrix::identity(2, 2) * 2.0, v(&[-4.0, -1.0]))
            .with_inequalities(Matrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, -1.0]), v(&[1.0, 0.5]));
        assert_eq!(solve_qp(&p).unwrap(), solve_qp(&p).unwrap());
    }
}
