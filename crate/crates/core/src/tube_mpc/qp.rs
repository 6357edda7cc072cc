//! Dense strictly convex QP solver (Goldfarb-Idnani dual active set).
//!
//! Solves `min 1/2 x'Hx + f'x  s.t.  A_eq x = b_eq,  C x <= d`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub c: DMatrix<f64>,
    pub d: DVector<f64>,
}

impl QpProblem {
    pub fn new(h: DMatrix<f64>, f: DVector<f64>) -> Self {
        let n = f.len();
        Self {
            h,
            f,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            c: DMatrix::zeros(0, n),
            d: DVector::zeros(0),
        }
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn with_inequalities(mut self, c: DMatrix<f64>, d: DVector<f64>) -> Self {
        self.c = c;
        self.d = d;
        self
    }

    pub fn num_vars(&self) -> usize {
        self.f.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.num_vars();
        if self.h.shape() != (n, n)
            || self.a_eq.ncols() != n
            || self.a_eq.nrows() != self.b_eq.len()
            || self.c.ncols() != n
            || self.c.nrows() != self.d.len()
        {
            return Err(Error::DimensionMismatch("QP data".into()));
        }
        let all = self
            .h
            .iter()
            .chain(self.f.iter())
            .chain(self.a_eq.iter())
            .chain(self.b_eq.iter())
            .chain(self.c.iter())
            .chain(self.d.iter());
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite QP data".into()));
        }
        Ok(())
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.f.dot(x)
    }
}

/// Infinity-norm KKT residuals of a solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    /// Multipliers with `H x + f + A_eq' lambda + C' mu = 0`.
    pub lambda: DVector<f64>,
    pub mu: DVector<f64>,
    /// Active inequality indices.
    pub active: Vec<usize>,
    pub iterations: usize,
    pub kkt: KktResiduals,
}

pub fn kkt_residuals(p: &QpProblem, x: &DVector<f64>, lambda: &DVector<f64>, mu: &DVector<f64>) -> KktResiduals {
    let grad = &p.h * x + &p.f + p.a_eq.transpose() * lambda + p.c.transpose() * mu;
    let eq = &p.a_eq * x - &p.b_eq;
    let slack = &p.d - &p.c * x;
    let primal = eq
        .iter()
        .map(|v| v.abs())
        .chain(slack.iter().map(|s| (-s).max(0.0)))
        .fold(0.0, f64::max);
    KktResiduals {
        stationarity: grad.amax(),
        primal,
        dual: mu.iter().map(|m| (-m).max(0.0)).fold(0.0, f64::max),
        complementarity: mu
            .iter()
            .zip(slack.iter())
            .map(|(m, s)| (m * s).abs())
            .fold(0.0, f64::max),
    }
}

/// Working factorization: `J` with `J' H J = I` and the upper-triangular `R`
/// with `J' N = [R; 0]` for the active normals `N`.
struct Work {
    n: usize,
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    r_norm: f64,
}

impl Work {
    fn z_and_r(&self, np: &DVector<f64>, iq: usize) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let d = self.j.transpose() * np;
        let mut z = DVector::zeros(self.n);
        for k in iq..self.n {
            z.axpy(d[k], &self.j.column(k), 1.0);
        }
        let mut r = DVector::zeros(iq);
        for i in (0..iq).rev() {
            let mut s = d[i];
            for k in i + 1..iq {
                s -= self.r[(i, k)] * r[k];
            }
            r[i] = s / self.r[(i, i)];
        }
        (d, z, r)
    }

    /// Append a constraint with `d = J' n`; false if it is linearly dependent.
    fn add(&mut self, mut d: DVector<f64>, iq: &mut usize) -> bool {
        let n = self.n;
        for jj in (*iq + 1..n).rev() {
            let (mut cc, mut ss) = (d[jj - 1], d[jj]);
            let h = cc.hypot(ss);
            if h == 0.0 {
                continue;
            }
            d[jj] = 0.0;
            cc /= h;
            ss /= h;
            if cc < 0.0 {
                cc = -cc;
                ss = -ss;
                d[jj - 1] = -h;
            } else {
                d[jj - 1] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in 0..n {
                let t1 = self.j[(k, jj - 1)];
                let t2 = self.j[(k, jj)];
                self.j[(k, jj - 1)] = t1 * cc + t2 * ss;
                self.j[(k, jj)] = xny * (t1 + self.j[(k, jj - 1)]) - t2;
            }
        }
        let q = *iq;
        if q >= n || d[q].abs() <= f64::EPSILON * 1e2 * self.r_norm {
            return false;
        }
        for i in 0..=q {
            self.r[(i, q)] = d[i];
        }
        self.r_norm = self.r_norm.max(d[q].abs());
        *iq += 1;
        true
    }

    /// Remove the active constraint in position `l` and retriangularize.
    fn remove(&mut self, l: usize, iq: &mut usize) {
        let n = self.n;
        let q = *iq;
        for col in l..q - 1 {
            for row in 0..n {
                self.r[(row, col)] = self.r[(row, col + 1)];
            }
        }
        for row in 0..n {
            self.r[(row, q - 1)] = 0.0;
        }
        *iq -= 1;
        let q = *iq;
        for jj in l..q {
            let (mut cc, mut ss) = (self.r[(jj, jj)], self.r[(jj + 1, jj)]);
            let h = cc.hypot(ss);
            if h == 0.0 {
                continue;
            }
            cc /= h;
            ss /= h;
            self.r[(jj + 1, jj)] = 0.0;
            if cc < 0.0 {
                self.r[(jj, jj)] = -h;
                cc = -cc;
                ss = -ss;
            } else {
                self.r[(jj, jj)] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in jj + 1..q {
                let t1 = self.r[(jj, k)];
                let t2 = self.r[(jj + 1, k)];
                self.r[(jj, k)] = t1 * cc + t2 * ss;
                self.r[(jj + 1, k)] = xny * (t1 + self.r[(jj, k)]) - t2;
            }
            for k in 0..n {
                let t1 = self.j[(k, jj)];
                let t2 = self.j[(k, jj + 1)];
                self.j[(k, jj)] = t1 * cc + t2 * ss;
                self.j[(k, jj + 1)] = xny * (self.j[(k, jj)] + t1) - t2;
            }
        }
    }
}

/// Solve the QP. Infeasibility is reported with the indices (equalities
/// first, then inequalities offset by the equality count) of the constraints
/// that could not be satisfied.
pub fn solve_qp(p: &QpProblem) -> Result<QpSolution> {
    p.validate()?;
    let n = p.num_vars();
    let me = p.a_eq.nrows();
    let mi = p.c.nrows();
    let chol = p
        .h
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("QP Hessian is not positive definite".into()))?;
    let l_inv = chol
        .l()
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("QP Hessian is singular".into()))?;
    let j0 = l_inv.transpose();
    let mut w = Work {
        n,
        j: j0.clone(),
        r: DMatrix::zeros(n, n),
        r_norm: 1.0,
    };

    // Quadprog form: normals n_i with n_i'x + b_i >= 0.
    let eq_normal = |i: usize| p.a_eq.row(i).transpose();
    let eq_offset = |i: usize| -p.b_eq[i];
    let in_normal = |i: usize| -p.c.row(i).transpose();
    let in_offset = |i: usize| p.d[i];

    let mut x = -chol.solve(&p.f);
    // Active set: entries < me are equalities, others me + inequality index.
    let mut active: Vec<usize> = Vec::with_capacity(n);
    let mut u: Vec<f64> = Vec::with_capacity(n);
    let mut iq = 0usize;

    for i in 0..me {
        let np = eq_normal(i);
        let (d, z, r) = w.z_and_r(&np, iq);
        let zn = z.dot(&np);
        let mut t2 = 0.0;
        if z.dot(&z) > f64::EPSILON {
            t2 = -(np.dot(&x) + eq_offset(i)) / zn;
        }
        x.axpy(t2, &z, 1.0);
        for k in 0..iq {
            u[k] -= t2 * r[k];
        }
        if !w.add(d, &mut iq) {
            // Dependent equality: consistent only if already satisfied.
            if (np.dot(&x) + eq_offset(i)).abs() > 1e-9 * (1.0 + p.b_eq[i].abs()) {
                return Err(Error::InfeasibleQp { violated: vec![i] });
            }
            continue;
        }
        active.push(i);
        u.push(t2);
    }

    let mut excluded = vec![false; mi];
    let mut in_active = vec![false; mi];
    let mut iterations = 0usize;
    let max_iter = 50 * (n + mi + 10);
    let slack = |x: &DVector<f64>, i: usize| in_normal(i).dot(x) + in_offset(i);
    let scale_tol = |i: usize| 1e-13 * (1.0 + p.d[i].abs());

    'outer: loop {
        iterations += 1;
        if iterations > max_iter {
            return Err(Error::InvalidArgument("QP active-set iteration limit reached".into()));
        }
        // Most violated inactive constraint.
        let cx = &p.c * &x;
        let mut best = (0.0, usize::MAX);
        for i in 0..mi {
            if excluded[i] || in_active[i] {
                continue;
            }
            let s = p.d[i] - cx[i];
            if s < best.0 - scale_tol(i) {
                best = (s, i);
            }
        }
        if best.1 == usize::MAX {
            break;
        }
        let ip = best.1;
        let np = in_normal(ip);
        let snapshot = (x.clone(), active.clone(), u.clone(), iq, w.j.clone(), w.r.clone(), w.r_norm);
        let mut u_new = 0.0;
        loop {
            let (d, z, r) = w.z_and_r(&np, iq);
            // Largest dual step keeping active inequality multipliers >= 0.
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for k in 0..iq {
                if active[k] >= me && r[k] > 0.0 {
                    let t = u[k] / r[k];
                    if t < t1 {
                        t1 = t;
                        drop = Some(k);
                    }
                }
            }
            let zn = z.dot(&np);
            let t2 = if z.dot(&z) > f64::EPSILON && zn.abs() > 0.0 {
                -slack(&x, ip) / zn
            } else {
                f64::INFINITY
            };
            let t = t1.min(t2);
            if !t.is_finite() {
                let mut violated: Vec<usize> = active.iter().copied().filter(|&a| a >= me).collect();
                violated.push(me + ip);
                violated.sort_unstable();
                return Err(Error::InfeasibleQp { violated });
            }
            if t2.is_infinite() {
                for k in 0..iq {
                    u[k] -= t * r[k];
                }
                u_new += t;
                let k = drop.expect("finite dual step has a blocking constraint");
                in_active[active.remove(k) - me] = false;
                u.remove(k);
                w.remove(k, &mut iq);
                continue;
            }
            x.axpy(t, &z, 1.0);
            for k in 0..iq {
                u[k] -= t * r[k];
            }
            u_new += t;
            if t == t2 {
                if w.add(d, &mut iq) {
                    active.push(me + ip);
                    in_active[ip] = true;
                    u.push(u_new);
                    continue 'outer;
                }
                // Numerically dependent: restore and skip this constraint.
                let (xs, a_s, us, iqs, js, rs, rn) = snapshot;
                x = xs;
                in_active.iter_mut().for_each(|f| *f = false);
                for &a in a_s.iter().filter(|&&a| a >= me) {
                    in_active[a - me] = true;
                }
                active = a_s;
                u = us;
                iq = iqs;
                w.j = js;
                w.r = rs;
                w.r_norm = rn;
                excluded[ip] = true;
                continue 'outer;
            }
            let k = drop.expect("partial step has a blocking constraint");
            in_active[active.remove(k) - me] = false;
            u.remove(k);
            w.remove(k, &mut iq);
        }
    }

    let violated: Vec<usize> = (0..mi)
        .filter(|&i| excluded[i] && slack(&x, i) < -1e-9 * (1.0 + p.d[i].abs()))
        .map(|i| me + i)
        .collect();
    if !violated.is_empty() {
        return Err(Error::InfeasibleQp { violated });
    }

    let mut lambda = DVector::zeros(me);
    let mut mu = DVector::zeros(mi);
    for (k, &a) in active.iter().enumerate() {
        if a < me {
            lambda[a] = -u[k];
        } else {
            mu[a - me] = u[k];
        }
    }
    let kkt = kkt_residuals(p, &x, &lambda, &mu);
    Ok(QpSolution {
        objective: p.objective(&x),
        active: active.iter().filter(|&&a| a >= me).map(|&a| a - me).collect(),
        x,
        lambda,
        mu,
        iterations,
        kkt,
    })
}
