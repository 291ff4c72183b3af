//! Smooth constrained minimization by a primal-dual logarithmic-barrier
//! interior-point method.
//!
//! Solves
//!
//! ```text
//! minimize f(s)  subject to  g_j(s) <= 0,  A s = b,  l <= s <= u
//! ```
//!
//! where `f` and every `g_j` are supplied as callbacks returning value and
//! gradient. Curvature of the Lagrangian `f + sum z_j g_j` is approximated by
//! damped BFGS updates; the barrier contributions `z_j/(-g_j) grad g_j grad g_j^T`
//! and the bound terms are formed exactly. Iterates stay strictly inside the
//! inequalities, so a start that violates them first goes through an elastic
//! phase that minimizes the largest violation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// A scalar function with gradient. `grad` arrives zeroed and has one slot
/// per variable.
pub trait SmoothFn: Send + Sync {
    fn eval(&self, s: &[f64], grad: &mut [f64]) -> f64;
}

impl<F> SmoothFn for F
where
    F: Fn(&[f64], &mut [f64]) -> f64 + Send + Sync,
{
    fn eval(&self, s: &[f64], grad: &mut [f64]) -> f64 {
        self(s, grad)
    }
}

/// Problem data for [`solve`].
pub struct Problem {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub objective: Box<dyn SmoothFn>,
    pub inequalities: Vec<Box<dyn SmoothFn>>,
    /// Label per inequality, used in diagnostics.
    pub inequality_names: Vec<String>,
    /// Rows of the linear equality system `A s = b`.
    pub eq_rows: Vec<Vec<f64>>,
    pub eq_rhs: Vec<f64>,
    pub start: Vec<f64>,
}

impl Problem {
    pub fn new(
        lower: Vec<f64>,
        upper: Vec<f64>,
        objective: impl SmoothFn + 'static,
        start: Vec<f64>,
    ) -> Self {
        Problem {
            lower,
            upper,
            objective: Box::new(objective),
            inequalities: Vec::new(),
            inequality_names: Vec::new(),
            eq_rows: Vec::new(),
            eq_rhs: Vec::new(),
            start,
        }
    }

    pub fn n_vars(&self) -> usize {
        self.lower.len()
    }

    pub fn add_inequality(&mut self, name: impl Into<String>, g: impl SmoothFn + 'static) {
        self.inequalities.push(Box::new(g));
        self.inequality_names.push(name.into());
    }

    pub fn add_equality(&mut self, row: Vec<f64>, rhs: f64) {
        self.eq_rows.push(row);
        self.eq_rhs.push(rhs);
    }

    pub fn objective_value(&self, s: &[f64]) -> f64 {
        let mut g = vec![0.0; s.len()];
        self.objective.eval(s, &mut g)
    }

    pub fn inequality_values(&self, s: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; s.len()];
        self.inequalities
            .iter()
            .map(|c| {
                g.iter_mut().for_each(|x| *x = 0.0);
                c.eval(s, &mut g)
            })
            .collect()
    }

    fn validate(&self) -> Result<(), String> {
        let n = self.n_vars();
        if self.upper.len() != n || self.start.len() != n {
            return Err("bounds and start must have one entry per variable".into());
        }
        if let Some(i) = (0..n).find(|&i| !(self.lower[i] <= self.upper[i])) {
            return Err(format!("variable {i} has lower bound above upper bound"));
        }
        if self.eq_rows.iter().any(|r| r.len() != n) || self.eq_rows.len() != self.eq_rhs.len() {
            return Err("equality rows must have one coefficient per variable".into());
        }
        if self.inequality_names.len() != self.inequalities.len() {
            return Err("one name per inequality".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    IterationLimit,
    NumericalFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol_kkt: f64,
    pub tol_feas: f64,
    pub max_iter: usize,
    /// Factor applied to the barrier parameter once a barrier subproblem is solved.
    pub barrier_reduction: f64,
    pub mu_init: f64,
    /// Relative distance a start is pushed away from its bounds.
    pub bound_push: f64,
    /// The elastic phase stops once every inequality is below `-phase1_margin`.
    pub phase1_margin: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol_kkt: 1e-8,
            tol_feas: 1e-9,
            max_iter: 500,
            barrier_reduction: 0.2,
            mu_init: 0.1,
            bound_push: 1e-2,
            phase1_margin: 1e-3,
        }
    }
}

impl SolverOptions {
    /// Smaller initial barrier and gentler start push, used when retrying.
    pub fn tightened(&self) -> Self {
        SolverOptions {
            mu_init: self.mu_init * 0.01,
            barrier_reduction: 0.1,
            bound_push: self.bound_push * 0.1,
            max_iter: self.max_iter * 2,
            ..*self
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub point: Vec<f64>,
    pub objective: f64,
    /// Max of scaled stationarity, primal infeasibility and complementarity.
    pub kkt_residual: f64,
    /// Multipliers of the inequalities.
    pub ineq_duals: Vec<f64>,
    /// Multipliers of the equality rows.
    pub eq_duals: Vec<f64>,
    pub lower_duals: Vec<f64>,
    pub upper_duals: Vec<f64>,
    pub iterations: usize,
    /// Sum of positive inequality values at the returned point.
    pub elastic_violation: f64,
    pub max_violation: f64,
}

impl SolveReport {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }
}

struct Evaluated {
    f: f64,
    grad: Vec<f64>,
    g: Vec<f64>,
    jac: Vec<Vec<f64>>,
}

type EvalFn<'a> = dyn Fn(&[f64]) -> Option<Evaluated> + 'a;

fn evaluate(problem: &Problem, s: &[f64]) -> Option<Evaluated> {
    let n = s.len();
    let mut grad = vec![0.0; n];
    let f = problem.objective.eval(s, &mut grad);
    let mut g = Vec::with_capacity(problem.inequalities.len());
    let mut jac = Vec::with_capacity(problem.inequalities.len());
    for c in &problem.inequalities {
        let mut row = vec![0.0; n];
        g.push(c.eval(s, &mut row));
        jac.push(row);
    }
    let finite = f.is_finite()
        && grad.iter().all(|x| x.is_finite())
        && g.iter().all(|x| x.is_finite())
        && jac.iter().flatten().all(|x| x.is_finite());
    finite.then_some(Evaluated { f, grad, g, jac })
}

/// Linear part shared by every phase: bounds, fixed variables and `A s = b`.
struct Frame<'a> {
    lower: &'a [f64],
    upper: &'a [f64],
    free: Vec<usize>,
    has_l: Vec<bool>,
    has_u: Vec<bool>,
    a: &'a [Vec<f64>],
    b: &'a [f64],
}

impl<'a> Frame<'a> {
    fn new(lower: &'a [f64], upper: &'a [f64], a: &'a [Vec<f64>], b: &'a [f64]) -> Self {
        let n = lower.len();
        let fixed = |i: usize| upper[i] - lower[i] <= 1e-14 * lower[i].abs().max(1.0);
        let free: Vec<usize> = (0..n).filter(|&i| !fixed(i)).collect();
        let has_l = (0..n).map(|i| !fixed(i) && lower[i].is_finite()).collect();
        let has_u = (0..n).map(|i| !fixed(i) && upper[i].is_finite()).collect();
        Frame {
            lower,
            upper,
            free,
            has_l,
            has_u,
            a,
            b,
        }
    }

    fn eq_residual(&self, s: &[f64]) -> Vec<f64> {
        self.a
            .iter()
            .zip(self.b)
            .map(|(row, &rhs)| rhs - row.iter().zip(s).map(|(a, x)| a * x).sum::<f64>())
            .collect()
    }

    fn inside(&self, s: &[f64]) -> bool {
        let gap = |b: f64| 1e-12 * b.abs().max(1.0);
        self.free.iter().all(|&i| {
            (!self.has_l[i] || s[i] > self.lower[i] + gap(self.lower[i]))
                && (!self.has_u[i] || s[i] < self.upper[i] - gap(self.upper[i]))
        })
    }

    fn push_inside(&self, s: &mut [f64], push: f64) {
        for i in 0..s.len() {
            let (l, u) = (self.lower[i], self.upper[i]);
            if !self.free.contains(&i) {
                s[i] = l;
                continue;
            }
            let width = u - l;
            let pl = push * l.abs().max(1.0).min(if width.is_finite() { width } else { f64::MAX });
            let pu = push * u.abs().max(1.0).min(if width.is_finite() { width } else { f64::MAX });
            let lo = if l.is_finite() { l + pl } else { f64::MIN };
            let hi = if u.is_finite() { u - pu } else { f64::MAX };
            s[i] = if lo <= hi { s[i].clamp(lo, hi) } else { 0.5 * (l + u) };
        }
    }

    /// Least-norm correction of the free variables onto `A s = b`.
    fn project(&self, s: &mut [f64]) -> bool {
        let p = self.a.len();
        if p == 0 {
            return true;
        }
        let r = self.eq_residual(s);
        let scale = 1.0 + self.b.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if r.iter().all(|x| x.abs() <= 1e-13 * scale) {
            return true;
        }
        let nf = self.free.len();
        let af = DMatrix::from_fn(p, nf, |k, j| self.a[k][self.free[j]]);
        let aat = &af * af.transpose() + DMatrix::identity(p, p) * 1e-14;
        let Some(y) = aat.lu().solve(&DVector::from_vec(r)) else {
            return false;
        };
        let delta = af.transpose() * y;
        for (j, &i) in self.free.iter().enumerate() {
            s[i] += delta[j];
        }
        true
    }

    /// Start inside the bounds and on the equality manifold, if one can be found.
    fn initial_point(&self, start: &[f64], push: f64) -> Option<Vec<f64>> {
        let mut s = start.to_vec();
        self.push_inside(&mut s, push);
        for _ in 0..100 {
            if !self.project(&mut s) {
                return None;
            }
            if self.inside(&s) {
                return Some(s);
            }
            self.push_inside(&mut s, push);
        }
        None
    }
}

struct CoreOutcome {
    status: SolveStatus,
    s: Vec<f64>,
    zi: Vec<f64>,
    zl: Vec<f64>,
    zu: Vec<f64>,
    nu: Vec<f64>,
    iterations: usize,
    kkt: f64,
    f: f64,
}

struct Core<'a> {
    frame: &'a Frame<'a>,
    eval: &'a EvalFn<'a>,
    opts: SolverOptions,
}

const S_MAX: f64 = 100.0;
const KAPPA_EPS: f64 = 10.0;
const KAPPA_SIGMA: f64 = 1e10;
const ARMIJO: f64 = 1e-4;
const SCALE_GRAD: f64 = 100.0;

impl Core<'_> {
    fn barrier_value(&self, s: &[f64], ev: &Evaluated, mu: f64) -> f64 {
        let fr = self.frame;
        let mut phi = ev.f - mu * ev.g.iter().map(|g| (-g).ln()).sum::<f64>();
        for &i in &fr.free {
            if fr.has_l[i] {
                phi -= mu * (s[i] - fr.lower[i]).ln();
            }
            if fr.has_u[i] {
                phi -= mu * (fr.upper[i] - s[i]).ln();
            }
        }
        phi
    }

    /// `grad f + J^T zi` on all variables.
    fn lagrangian_grad(ev: &Evaluated, zi: &[f64]) -> Vec<f64> {
        let mut out = ev.grad.clone();
        for (row, z) in ev.jac.iter().zip(zi) {
            for (o, r) in out.iter_mut().zip(row) {
                *o += z * r;
            }
        }
        out
    }

    /// Least-squares equality multipliers for the current stationarity residual.
    fn eq_multipliers(&self, base: &[f64]) -> Vec<f64> {
        let fr = self.frame;
        let p = fr.a.len();
        if p == 0 {
            return Vec::new();
        }
        let nf = fr.free.len();
        let af = DMatrix::from_fn(p, nf, |k, j| fr.a[k][fr.free[j]]);
        let r = DVector::from_fn(nf, |j, _| base[fr.free[j]]);
        let aat = &af * af.transpose() + DMatrix::identity(p, p) * 1e-14;
        match aat.lu().solve(&(-(&af * r))) {
            Some(y) => y.iter().copied().collect(),
            None => vec![0.0; p],
        }
    }

    /// Scaled optimality error of the barrier problem with parameter `mu`
    /// (mu = 0 gives the KKT error of the original problem). Also returns the
    /// least-squares equality multipliers.
    fn error(
        &self,
        s: &[f64],
        ev: &Evaluated,
        zi: &[f64],
        zl: &[f64],
        zu: &[f64],
        mu: f64,
    ) -> (f64, Vec<f64>) {
        let fr = self.frame;
        let mut base = Self::lagrangian_grad(ev, zi);
        for &i in &fr.free {
            base[i] += zu[i] - zl[i];
        }
        let nu = self.eq_multipliers(&base);
        let mut stat = 0.0f64;
        for &i in &fr.free {
            let mut v = base[i];
            for (k, row) in fr.a.iter().enumerate() {
                v += row[i] * nu[k];
            }
            stat = stat.max(v.abs());
        }
        let mut feas = ev.g.iter().fold(0.0f64, |m, g| m.max(*g));
        for r in fr.eq_residual(s) {
            feas = feas.max(r.abs());
        }
        let mut compl = 0.0f64;
        for (z, g) in zi.iter().zip(&ev.g) {
            compl = compl.max((z * (-g) - mu).abs());
        }
        let mut zsum: f64 = zi.iter().map(|z| z.abs()).sum();
        let mut count = zi.len();
        for &i in &fr.free {
            if fr.has_l[i] {
                compl = compl.max((zl[i] * (s[i] - fr.lower[i]) - mu).abs());
                zsum += zl[i].abs();
                count += 1;
            }
            if fr.has_u[i] {
                compl = compl.max((zu[i] * (fr.upper[i] - s[i]) - mu).abs());
                zsum += zu[i].abs();
                count += 1;
            }
        }
        let zmean = if count > 0 { zsum / count as f64 } else { 0.0 };
        let nusum: f64 = nu.iter().map(|x| x.abs()).sum();
        let sd = (S_MAX.max((zsum + nusum) / (count + nu.len()).max(1) as f64)) / S_MAX;
        let sc = S_MAX.max(zmean) / S_MAX;
        ((stat / sd).max(feas).max(compl / sc), nu)
    }

    fn run(&self, s0: Vec<f64>, stop: Option<&dyn Fn(&[f64], &Evaluated) -> bool>) -> CoreOutcome {
        let fr = self.frame;
        let n = s0.len();
        let free = &fr.free;
        let nf = free.len();
        let p = fr.a.len();
        let mut s = s0;
        let Some(mut ev) = (self.eval)(&s) else {
            return self.fail(s, 0);
        };
        let m = ev.g.len();
        let mut mu = self.opts.mu_init;
        let mu_min = self.opts.tol_kkt / 10.0;
        let mut zi: Vec<f64> = ev.g.iter().map(|g| mu / (-g)).collect();
        let mut zl = vec![0.0; n];
        let mut zu = vec![0.0; n];
        for &i in free {
            if fr.has_l[i] {
                zl[i] = mu / (s[i] - fr.lower[i]);
            }
            if fr.has_u[i] {
                zu[i] = mu / (fr.upper[i] - s[i]);
            }
        }
        let mut hess = DMatrix::<f64>::identity(nf, nf);
        let mut hess_fresh = true;
        let mut nu = vec![0.0; p];
        let mut iterations = 0;
        let mut status = SolveStatus::IterationLimit;

        while iterations < self.opts.max_iter {
            let (e0, nu0) = self.error(&s, &ev, &zi, &zl, &zu, 0.0);
            nu = nu0;
            if e0 <= self.opts.tol_kkt {
                status = SolveStatus::Optimal;
                break;
            }
            if let Some(stop) = stop {
                if stop(&s, &ev) {
                    status = SolveStatus::Optimal;
                    break;
                }
            }
            loop {
                let (emu, _) = self.error(&s, &ev, &zi, &zl, &zu, mu);
                if emu > KAPPA_EPS * mu || mu <= mu_min {
                    break;
                }
                mu = mu_min.max((self.opts.barrier_reduction * mu).min(mu.powf(1.5)));
            }
            iterations += 1;

            // Newton system on the free variables.
            let tau = (1.0 - mu).max(0.99);
            let sigma: Vec<f64> = zi.iter().zip(&ev.g).map(|(z, g)| z / (-g)).collect();
            let mut w = hess.clone();
            for (j, row) in ev.jac.iter().enumerate() {
                for a in 0..nf {
                    let ga = row[free[a]];
                    if ga == 0.0 {
                        continue;
                    }
                    for b in 0..nf {
                        w[(a, b)] += sigma[j] * ga * row[free[b]];
                    }
                }
            }
            let mut grad_phi = ev.grad.clone();
            for (j, row) in ev.jac.iter().enumerate() {
                let wj = mu / (-ev.g[j]);
                for (gp, r) in grad_phi.iter_mut().zip(row) {
                    *gp += wj * r;
                }
            }
            for (a, &i) in free.iter().enumerate() {
                if fr.has_l[i] {
                    let gap = s[i] - fr.lower[i];
                    w[(a, a)] += zl[i] / gap;
                    grad_phi[i] -= mu / gap;
                }
                if fr.has_u[i] {
                    let gap = fr.upper[i] - s[i];
                    w[(a, a)] += zu[i] / gap;
                    grad_phi[i] += mu / gap;
                }
            }
            let eq_res = fr.eq_residual(&s);
            let dim = nf + p;
            let mut kkt = DMatrix::<f64>::zeros(dim, dim);
            kkt.view_mut((0, 0), (nf, nf)).copy_from(&w);
            for (k, row) in fr.a.iter().enumerate() {
                for (a, &i) in free.iter().enumerate() {
                    kkt[(nf + k, a)] = row[i];
                    kkt[(a, nf + k)] = row[i];
                }
            }
            let mut rhs = DVector::<f64>::zeros(dim);
            for (a, &i) in free.iter().enumerate() {
                rhs[a] = -grad_phi[i];
            }
            for k in 0..p {
                rhs[nf + k] = eq_res[k];
            }
            let mut sol = kkt.clone().lu().solve(&rhs);
            if sol.as_ref().map_or(true, |x| x.iter().any(|v| !v.is_finite())) {
                for k in 0..p {
                    kkt[(nf + k, nf + k)] = -1e-10;
                }
                sol = kkt.lu().solve(&rhs);
            }
            let Some(sol) = sol.filter(|x| x.iter().all(|v| v.is_finite())) else {
                status = SolveStatus::NumericalFailure;
                break;
            };
            let mut d = vec![0.0; n];
            for (a, &i) in free.iter().enumerate() {
                d[i] = sol[a];
            }

            // Dual directions.
            let jd: Vec<f64> = ev
                .jac
                .iter()
                .map(|row| row.iter().zip(&d).map(|(a, b)| a * b).sum())
                .collect();
            let dzi: Vec<f64> = (0..m)
                .map(|j| (mu + zi[j] * jd[j]) / (-ev.g[j]) - zi[j])
                .collect();
            let mut dzl = vec![0.0; n];
            let mut dzu = vec![0.0; n];
            let mut alpha_p = 1.0f64;
            let mut alpha_d = 1.0f64;
            for &i in free {
                if fr.has_l[i] {
                    let gap = s[i] - fr.lower[i];
                    dzl[i] = (mu - zl[i] * gap - zl[i] * d[i]) / gap;
                    if d[i] < 0.0 {
                        alpha_p = alpha_p.min(-tau * gap / d[i]);
                    }
                    if dzl[i] < 0.0 {
                        alpha_d = alpha_d.min(-tau * zl[i] / dzl[i]);
                    }
                }
                if fr.has_u[i] {
                    let gap = fr.upper[i] - s[i];
                    dzu[i] = (mu - zu[i] * gap + zu[i] * d[i]) / gap;
                    if d[i] > 0.0 {
                        alpha_p = alpha_p.min(tau * gap / d[i]);
                    }
                    if dzu[i] < 0.0 {
                        alpha_d = alpha_d.min(-tau * zu[i] / dzu[i]);
                    }
                }
            }
            for j in 0..m {
                if dzi[j] < 0.0 {
                    alpha_d = alpha_d.min(-tau * zi[j] / dzi[j]);
                }
            }

            // Backtracking on the barrier function.
            let phi0 = self.barrier_value(&s, &ev, mu);
            let slope: f64 = grad_phi.iter().zip(&d).map(|(a, b)| a * b).sum();
            let mut alpha = alpha_p;
            let mut accepted = None;
            for _ in 0..60 {
                let trial: Vec<f64> = s.iter().zip(&d).map(|(x, dx)| x + alpha * dx).collect();
                if let Some(tev) = (self.eval)(&trial) {
                    if tev.g.iter().all(|g| *g < 0.0) {
                        let phi = self.barrier_value(&trial, &tev, mu);
                        let noise = 10.0 * f64::EPSILON * phi0.abs().max(1.0);
                        if phi <= phi0 + ARMIJO * alpha * slope.min(0.0) || phi - phi0 <= noise {
                            accepted = Some((trial, tev));
                            break;
                        }
                    }
                }
                alpha *= 0.5;
                if alpha < 1e-18 {
                    break;
                }
            }
            let Some((trial, tev)) = accepted else {
                if !hess_fresh {
                    hess = DMatrix::identity(nf, nf);
                    hess_fresh = true;
                    continue;
                }
                if mu > mu_min {
                    mu = mu_min.max(self.opts.barrier_reduction * mu);
                    continue;
                }
                status = SolveStatus::NumericalFailure;
                break;
            };

            let alpha_z = alpha_d.min(1.0);
            let new_zi: Vec<f64> = (0..m)
                .map(|j| {
                    let z = zi[j] + alpha_z * dzi[j];
                    let c = mu / (-tev.g[j]);
                    z.clamp(c / KAPPA_SIGMA, c * KAPPA_SIGMA)
                })
                .collect();
            for &i in free {
                if fr.has_l[i] {
                    let c = mu / (trial[i] - fr.lower[i]);
                    zl[i] = (zl[i] + alpha_z * dzl[i]).clamp(c / KAPPA_SIGMA, c * KAPPA_SIGMA);
                }
                if fr.has_u[i] {
                    let c = mu / (fr.upper[i] - trial[i]);
                    zu[i] = (zu[i] + alpha_z * dzu[i]).clamp(c / KAPPA_SIGMA, c * KAPPA_SIGMA);
                }
            }

            // Damped BFGS on the Lagrangian curvature.
            let g_new = Self::lagrangian_grad(&tev, &new_zi);
            let g_old = Self::lagrangian_grad(&ev, &new_zi);
            let sk = DVector::from_fn(nf, |a, _| trial[free[a]] - s[free[a]]);
            let yk = DVector::from_fn(nf, |a, _| g_new[free[a]] - g_old[free[a]]);
            let sy = sk.dot(&yk);
            let ss = sk.dot(&sk);
            if ss > 0.0 && ss.sqrt() > 1e-14 {
                if hess_fresh && sy > 0.0 {
                    hess = DMatrix::identity(nf, nf) * (yk.dot(&yk) / sy);
                }
                let bs = &hess * &sk;
                let sbs = sk.dot(&bs);
                if sbs > 0.0 {
                    let theta = if sy >= 0.2 * sbs {
                        1.0
                    } else {
                        0.8 * sbs / (sbs - sy)
                    };
                    let r = &yk * theta + &bs * (1.0 - theta);
                    let sr = sk.dot(&r);
                    if sr > 0.0 {
                        hess -= &bs * bs.transpose() / sbs;
                        hess += &r * r.transpose() / sr;
                        hess_fresh = false;
                    }
                }
            }

            s = trial;
            ev = tev;
            zi = new_zi;
        }

        let (kkt, _) = self.error(&s, &ev, &zi, &zl, &zu, 0.0);
        CoreOutcome {
            status,
            f: ev.f,
            s,
            zi,
            zl,
            zu,
            nu,
            iterations,
            kkt,
        }
    }

    fn fail(&self, s: Vec<f64>, iterations: usize) -> CoreOutcome {
        let n = s.len();
        CoreOutcome {
            status: SolveStatus::NumericalFailure,
            s,
            zi: Vec::new(),
            zl: vec![0.0; n],
            zu: vec![0.0; n],
            nu: vec![0.0; self.frame.a.len()],
            iterations,
            kkt: f64::INFINITY,
            f: f64::NAN,
        }
    }
}

fn violation(g: &[f64]) -> (f64, f64) {
    let sum = g.iter().map(|x| x.max(0.0)).sum();
    let max = g.iter().fold(0.0f64, |m, x| m.max(*x));
    (sum, max)
}

/// Minimizes `problem` to KKT tolerance `opts.tol_kkt`.
pub fn solve(problem: &Problem, opts: &SolverOptions) -> SolveReport {
    let n = problem.n_vars();
    let m = problem.inequalities.len();
    let p = problem.eq_rows.len();
    let failure = |point: Vec<f64>, iterations: usize| {
        let g = problem.inequality_values(&point);
        let (sum, max) = violation(&g);
        SolveReport {
            status: SolveStatus::NumericalFailure,
            objective: problem.objective_value(&point),
            point,
            kkt_residual: f64::INFINITY,
            ineq_duals: vec![0.0; m],
            eq_duals: vec![0.0; p],
            lower_duals: vec![0.0; n],
            upper_duals: vec![0.0; n],
            iterations,
            elastic_violation: sum,
            max_violation: max,
        }
    };
    if problem.validate().is_err() {
        return failure(problem.start.clone(), 0);
    }
    let frame = Frame::new(&problem.lower, &problem.upper, &problem.eq_rows, &problem.eq_rhs);
    let Some(s0) = frame.initial_point(&problem.start, opts.bound_push) else {
        return failure(problem.start.clone(), 0);
    };
    let Some(ev0) = evaluate(problem, &s0) else {
        return failure(s0, 0);
    };

    let mut start = s0;
    let mut shift = 0.0;
    let mut iterations = 0;
    let worst = ev0.g.iter().fold(f64::NEG_INFINITY, |m, x| m.max(*x));
    if m > 0 && worst >= 0.0 {
        // Elastic phase: minimize t subject to g_j(s) - t <= 0.
        let mut lower = problem.lower.clone();
        let mut upper = problem.upper.clone();
        lower.push(-1e3);
        upper.push(f64::INFINITY);
        let mut rows: Vec<Vec<f64>> = problem.eq_rows.clone();
        rows.iter_mut().for_each(|r| r.push(0.0));
        let pframe = Frame::new(&lower, &upper, &rows, &problem.eq_rhs);
        let eval = |x: &[f64]| -> Option<Evaluated> {
            let t = x[n];
            let inner = evaluate(problem, &x[..n])?;
            let mut grad = vec![0.0; n + 1];
            grad[n] = 1.0;
            let g = inner.g.iter().map(|g| g - t).collect();
            let jac = inner
                .jac
                .into_iter()
                .map(|mut row| {
                    row.push(-1.0);
                    row
                })
                .collect();
            Some(Evaluated { f: t, grad, g, jac })
        };
        let mut x0 = start.clone();
        x0.push(worst + worst.abs().max(1e-2) * 0.5 + 1e-2);
        let margin = opts.phase1_margin;
        let stop = move |x: &[f64], ev: &Evaluated| {
            let t = x[x.len() - 1];
            ev.g.iter().all(|g| g + t < -margin)
        };
        let popts = SolverOptions {
            tol_kkt: opts.tol_feas.min(opts.tol_kkt),
            ..*opts
        };
        let core = Core {
            frame: &pframe,
            eval: &eval,
            opts: popts,
        };
        let out = core.run(x0, Some(&stop));
        iterations += out.iterations;
        let s1 = out.s[..n].to_vec();
        let g1 = problem.inequality_values(&s1);
        let worst1 = g1.iter().fold(f64::NEG_INFINITY, |m, x| m.max(*x));
        if !worst1.is_finite() || worst1 > opts.tol_feas || (worst1 >= 0.0 && out.status == SolveStatus::NumericalFailure && worst1 > opts.tol_feas) {
            let (sum, max) = violation(&g1);
            return SolveReport {
                status: SolveStatus::Infeasible,
                objective: problem.objective_value(&s1),
                point: s1,
                kkt_residual: out.kkt,
                ineq_duals: vec![0.0; m],
                eq_duals: vec![0.0; p],
                lower_duals: vec![0.0; n],
                upper_duals: vec![0.0; n],
                iterations,
                elastic_violation: sum,
                max_violation: max,
            };
        }
        if worst1 >= 0.0 {
            // Feasible only up to tolerance: run on constraints shifted just
            // enough to have an interior.
            shift = worst1 + 0.5 * opts.tol_feas;
        }
        start = s1;
    }

    // Gradient-based scaling at the start: no function enters with a
    // gradient entry above SCALE_GRAD.
    let Some(ev_start) = evaluate(problem, &start) else {
        return failure(start, iterations);
    };
    let scale_of = |grad: &[f64]| {
        let gmax = grad.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if gmax > SCALE_GRAD {
            SCALE_GRAD / gmax
        } else {
            1.0
        }
    };
    let f_scale = scale_of(&ev_start.grad);
    let g_scale: Vec<f64> = ev_start.jac.iter().map(|r| scale_of(r)).collect();
    let eval = |x: &[f64]| -> Option<Evaluated> {
        let mut ev = evaluate(problem, x)?;
        ev.f *= f_scale;
        ev.grad.iter_mut().for_each(|v| *v *= f_scale);
        for (j, (g, row)) in ev.g.iter_mut().zip(ev.jac.iter_mut()).enumerate() {
            *g = (*g - shift) * g_scale[j];
            row.iter_mut().for_each(|v| *v *= g_scale[j]);
        }
        Some(ev)
    };
    let core = Core {
        frame: &frame,
        eval: &eval,
        opts: *opts,
    };
    let out = core.run(start, None);
    iterations += out.iterations;
    let g = problem.inequality_values(&out.s);
    let (sum, max) = violation(&g);
    let mut status = out.status;
    if status == SolveStatus::Optimal && (sum > opts.tol_feas || out.kkt > opts.tol_kkt) {
        status = SolveStatus::NumericalFailure;
    }
    let unscale = |v: Vec<f64>| v.into_iter().map(|x| x / f_scale).collect::<Vec<_>>();
    let ineq_duals = out.zi.iter().zip(&g_scale).map(|(z, gs)| z * gs / f_scale).collect();
    SolveReport {
        status,
        objective: out.f / f_scale,
        point: out.s,
        kkt_residual: out.kkt,
        ineq_duals,
        eq_duals: unscale(out.nu),
        lower_duals: unscale(out.zl),
        upper_duals: unscale(out.zu),
        iterations,
        elastic_violation: sum,
        max_violation: max,
    }
}

/// Worst normwise relative error between every callback gradient and central
/// differences at `point` (step 1e-6 relative per coordinate).
pub fn check_gradients(problem: &Problem, point: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    let callbacks = std::iter::once(&problem.objective).chain(problem.inequalities.iter());
    for cb in callbacks {
        worst = worst.max(gradient_error(cb.as_ref(), point));
    }
    worst
}

/// Normwise relative gradient error of one callback.
pub fn gradient_error(f: &dyn SmoothFn, point: &[f64]) -> f64 {
    let n = point.len();
    let mut analytic = vec![0.0; n];
    f.eval(point, &mut analytic);
    let mut scratch = vec![0.0; n];
    let mut x = point.to_vec();
    let mut diff = 0.0f64;
    let mut norm = 0.0f64;
    for i in 0..n {
        let step = 1e-6 * point[i].abs().max(1.0);
        let h = (point[i] + step) - point[i];
        x[i] = point[i] + h;
        scratch.iter_mut().for_each(|v| *v = 0.0);
        let fp = f.eval(&x, &mut scratch);
        x[i] = point[i] - h;
        scratch.iter_mut().for_each(|v| *v = 0.0);
        let fm = f.eval(&x, &mut scratch);
        x[i] = point[i];
        let fd = (fp - fm) / (2.0 * h);
        diff = diff.max((fd - analytic[i]).abs());
        norm = norm.max(analytic[i].abs()).max(fd.abs());
    }
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(target: f64) -> Problem {
        Problem::new(
            vec![0.0],
            vec![10.0],
            move |s: &[f64], g: &mut [f64]| {
                g[0] = 2.0 * (s[0] - target);
                (s[0] - target).powi(2)
            },
            vec![5.0],
        )
    }

    #[test]
    fn unconstrained_quadratic() {
        let r = solve(&quad(3.0), &SolverOptions::default());
        assert_eq!(r.status, SolveStatus::Optimal, "{r:?}");
        assert!((r.point[0] - 3.0).abs() < 1e-6);
        assert!(r.objective < 1e-10);
    }

    #[test]
    fn minimum_on_a_bound() {
        let r = solve(&quad(-2.0), &SolverOptions::default());
        assert_eq!(r.status, SolveStatus::Optimal);
        assert!(r.point[0] < 1e-7 && r.point[0] >= 0.0);
        assert!((r.lower_duals[0] - 4.0).abs() < 1e-5);
    }

    fn disk() -> Problem {
        let mut p = Problem::new(
            vec![-5.0, -5.0],
            vec![5.0, 5.0],
            |s: &[f64], g: &mut [f64]| {
                g[0] = 1.0;
                g[1] = 1.0;
                s[0] + s[1]
            },
            vec![3.0, 3.0],
        );
        p.add_inequality("disk", |s: &[f64], g: &mut [f64]| {
            g[0] = 2.0 * s[0];
            g[1] = 2.0 * s[1];
            s[0] * s[0] + s[1] * s[1] - 2.0
        });
        p
    }

    #[test]
    fn linear_objective_on_a_disk() {
        let r = solve(&disk(), &SolverOptions::default());
        assert_eq!(r.status, SolveStatus::Optimal, "{r:?}");
        assert!((r.point[0] + 1.0).abs() < 1e-6 && (r.point[1] + 1.0).abs() < 1e-6);
        assert!((r.objective + 2.0).abs() < 1e-7);
        // stationarity: 1 + 2 z s = 0 at s = -1
        assert!((r.ineq_duals[0] - 0.5).abs() < 1e-5);
        assert!(r.kkt_residual <= 1e-8);
    }

    #[test]
    fn linear_equalities_are_honoured() {
        // min x^2 + 2 y^2 + 3 w^2 s.t. x + y + w = 1, w >= 0.5 via inequality
        let mut p = Problem::new(
            vec![-10.0; 3],
            vec![10.0; 3],
            |s: &[f64], g: &mut [f64]| {
                g[0] = 2.0 * s[0];
                g[1] = 4.0 * s[1];
                g[2] = 6.0 * s[2];
                s[0] * s[0] + 2.0 * s[1] * s[1] + 3.0 * s[2] * s[2]
            },
            vec![0.0, 0.0, 0.0],
        );
        p.add_equality(vec![1.0, 1.0, 1.0], 1.0);
        p.add_inequality("w", |_s: &[f64], g: &mut [f64]| {
            g[2] = -1.0;
            0.5 - _s[2]
        });
        let r = solve(&p, &SolverOptions::default());
        assert_eq!(r.status, SolveStatus::Optimal, "{r:?}");
        // w = 0.5 active; x + y = 0.5 with x = 2y
        assert!((r.point[2] - 0.5).abs() < 1e-7);
        assert!((r.point[0] - 1.0 / 3.0).abs() < 1e-6);
        assert!((r.point[1] - 1.0 / 6.0).abs() < 1e-6);
        let sum: f64 = r.point.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn detects_infeasibility() {
        let mut p = disk();
        p.add_inequality("far", |s: &[f64], g: &mut [f64]| {
            g[0] = -1.0;
            3.0 - s[0]
        });
        let r = solve(&p, &SolverOptions::default());
        assert_eq!(r.status, SolveStatus::Infeasible);
        assert!(r.elastic_violation > 0.1);
    }

    #[test]
    fn fixed_variables_stay_put() {
        let p = Problem::new(
            vec![0.0, 2.0],
            vec![10.0, 2.0],
            |s: &[f64], g: &mut [f64]| {
                g[0] = 2.0 * (s[0] - s[1]);
                g[1] = -2.0 * (s[0] - s[1]);
                (s[0] - s[1]).powi(2)
            },
            vec![7.0, 2.0],
        );
        let r = solve(&p, &SolverOptions::default());
        assert_eq!(r.status, SolveStatus::Optimal);
        assert_eq!(r.point[1], 2.0);
        assert!((r.point[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn deterministic_reports() {
        let a = solve(&disk(), &SolverOptions::default());
        let b = solve(&disk(), &SolverOptions::default());
        assert_eq!(a, b);
    }

    #[test]
    fn gradient_checks() {
        let p = disk();
        assert!(check_gradients(&p, &[0.25, -0.75]) <= 1e-10);
        let q = quad(3.0);
        assert!(check_gradients(&q, &[1.5]) <= 1e-10);
        let bad = Problem::new(
            vec![-1.0, -1.0],
            vec![1.0, 1.0],
            |s: &[f64], g: &mut [f64]| {
                g[0] = 1.1 * 2.0 * s[0];
                g[1] = 1.1 * 2.0 * s[1];
                s[0] * s[0] + s[1] * s[1]
            },
            vec![0.0, 0.0],
        );
        assert!(check_gradients(&bad, &[0.4, 0.2]) >= 0.05);
    }
}
