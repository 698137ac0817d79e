//! Geodesic shooting of particle curves and its exact discrete adjoint.
//!
//! The curve is a set of particles `q_i` carrying momentum densities `p_i`
//! (per unit loop parameter, quadrature weight `ds = 2 pi / n_p`). The velocity
//! field is `u = A^{-1} J` with `J = ds P W(q)^T p` the transpose of spline
//! evaluation under the plain node-sum pairing on the grid, and the state
//! evolves by
//!
//! ```text
//! dq_i/dt = u(q_i),    dp_i/dt = -(grad u(q_i))^T p_i
//! ```
//!
//! which is Hamiltonian for `H = 1/2 ds sum_i p_i . u(q_i)`. Time stepping is
//! classical RK4; the reverse sweep transposes every stage exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    curve_normal, metric_inverse, ClosedCurve2D, GridStencil, MetricSpec, Multiplier, Point, ScalarLoopField, SpectralGrid,
    TorusGridField,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShootConfig {
    pub steps: usize,
    pub metric: MetricSpec,
    pub n_g: usize,
    pub hamiltonian_tol: f64,
    /// RK4 steps of the Lie exponential generating the reparameterisation.
    pub lie_steps: usize,
}

impl Default for ShootConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            metric: MetricSpec::default(),
            n_g: 64,
            hamiltonian_tol: 1e-2,
            lie_steps: 50,
        }
    }
}

impl ShootConfig {
    pub fn validate(&self) -> Result<()> {
        self.metric.validate()?;
        if self.steps == 0 {
            return Err(Error::Validation("shoot.steps must be at least 1".into()));
        }
        if !self.n_g.is_power_of_two() || self.n_g < 4 {
            return Err(Error::Validation(format!("shoot.n_g must be a power of two >= 4, got {}", self.n_g)));
        }
        if self.lie_steps == 0 {
            return Err(Error::Validation("shoot.lie_steps must be at least 1".into()));
        }
        if !(self.hamiltonian_tol > 0.0) {
            return Err(Error::Validation("shoot.hamiltonian_tol must be positive".into()));
        }
        Ok(())
    }
}

/// Momentum covectors paired with curve points.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseState {
    pub p: Vec<Point>,
    pub q: ClosedCurve2D,
}

impl PhaseState {
    pub fn new(p: Vec<Point>, q: ClosedCurve2D) -> Result<Self> {
        if p.len() != q.len() {
            return Err(Error::ContractViolation(format!(
                "phase state has {} covectors for {} points",
                p.len(),
                q.len()
            )));
        }
        if p.iter().any(|v| !(v[0].is_finite() && v[1].is_finite())) {
            return Err(Error::InvalidInput("momentum has non-finite entries".into()));
        }
        Ok(Self { p, q })
    }

    /// Initial state `(p0 n, q0)` with `n` the outward unit normal of `q0`.
    pub fn normal(p0: &ScalarLoopField, q0: &ClosedCurve2D) -> Result<Self> {
        if p0.len() != q0.len() {
            return Err(Error::ContractViolation(format!(
                "p0 has {} samples for a curve of {} points",
                p0.len(),
                q0.len()
            )));
        }
        let nrm = curve_normal(q0)?;
        let p = p0
            .values
            .iter()
            .zip(&nrm)
            .map(|(a, n)| [a * n[0], a * n[1]])
            .collect();
        Ok(Self { p, q: q0.clone() })
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

/// Grid operator for one `(n_g, metric)` pair.
pub struct VelocityOperator {
    grid: SpectralGrid,
    metric: MetricSpec,
    /// prefilter^2 * metric inverse: maps deposited momentum to spline coefficients of u
    symbol: Multiplier,
}

impl VelocityOperator {
    pub fn new(n_g: usize, metric: MetricSpec) -> Result<Self> {
        let grid = SpectralGrid::new(n_g)?;
        let pf = grid.prefilter_symbol();
        let symbol = grid
            .metric_symbol(&metric)
            .iter()
            .zip(&pf)
            .map(|(m, p)| m * p * p)
            .collect();
        let symbol = grid.multiplier(symbol);
        Ok(Self { grid, metric, symbol })
    }

    fn deposit_weight(&self, n_p: usize) -> f64 {
        quadrature_weight(n_p)
    }

    /// Stencils of `q` addressed into a row-compact buffer holding only the
    /// occupied grid rows, together with those rows.
    fn stencils(&self, q: &[Point]) -> (Vec<GridStencil>, Vec<usize>) {
        let n = self.grid.n();
        let mut st: Vec<GridStencil> = q.iter().map(|&x| self.grid.stencil(x)).collect();
        let mut slot = vec![usize::MAX; n];
        for s in &st {
            for &a in &s.x.idx {
                slot[a] = 0;
            }
        }
        let rows: Vec<usize> = (0..n).filter(|&a| slot[a] == 0).collect();
        for (i, &a) in rows.iter().enumerate() {
            slot[a] = i;
        }
        for s in &mut st {
            for a in &mut s.x.idx {
                *a = slot[*a];
            }
        }
        (st, rows)
    }

    /// Row-compact spline coefficients of the velocity field generated by `p`.
    fn coefficients(&self, p: &[Point], stencils: &[GridStencil], rows: &[usize]) -> Vec<Point> {
        let mut raw = vec![[0.0; 2]; rows.len() * self.grid.n()];
        for (pi, st) in p.iter().zip(stencils) {
            self.grid.deposit(&mut raw, st, *pi);
        }
        let c = self.deposit_weight(p.len());
        self.grid.apply_compact(&self.symbol, &raw, rows, c)
    }

    /// Velocity of each particle.
    fn particle_velocity(&self, p: &[Point], q: &[Point]) -> Vec<Point> {
        let (stencils, rows) = self.stencils(q);
        let coeffs = self.coefficients(p, &stencils, &rows);
        stencils.iter().map(|st| self.grid.value(&coeffs, st)).collect()
    }

    /// Nodal velocity field `A^{-1} J(p, q)`.
    pub fn velocity_field(&self, p: &[Point], q: &[Point]) -> Result<TorusGridField> {
        let n = self.grid.n();
        let mut raw = vec![[0.0; 2]; n * n];
        for (pi, &qi) in p.iter().zip(q) {
            self.grid.deposit(&mut raw, &self.grid.stencil(qi), *pi);
        }
        let spread = self.grid.apply_multiplier(&raw, &self.grid.prefilter_symbol());
        let c = self.deposit_weight(p.len());
        let m = TorusGridField::from_data(n, spread)?.scale(c);
        metric_inverse(&m, &self.metric)
    }

    fn rhs(&self, p: &[Point], q: &[Point]) -> (Vec<Point>, Vec<Point>, Vec<Point>) {
        let (stencils, rows) = self.stencils(q);
        let coeffs = self.coefficients(p, &stencils, &rows);
        let mut dq = Vec::with_capacity(q.len());
        let mut dp = Vec::with_capacity(q.len());
        for (pi, st) in p.iter().zip(&stencils) {
            let jet = self.grid.value_grad(&coeffs, st);
            dq.push(jet.value);
            dp.push([
                -(pi[0] * jet.grad[0][0] + pi[1] * jet.grad[1][0]),
                -(pi[0] * jet.grad[0][1] + pi[1] * jet.grad[1][1]),
            ]);
        }
        (dq, dp, coeffs)
    }

    /// Vector-Jacobian product of the right-hand side at one stage.
    ///
    /// `lam` is the cotangent on `dq/dt`, `mu` the cotangent on `dp/dt`.
    fn rhs_vjp(&self, stage: &Stage, lam: &[Point], mu: &[Point]) -> (Vec<Point>, Vec<Point>) {
        let (stencils, rows) = self.stencils(&stage.q);
        let jets: Vec<_> = stencils.iter().map(|st| self.grid.jet(&stage.coeffs, st)).collect();

        let mut cbar = vec![[0.0; 2]; rows.len() * self.grid.n()];
        for (i, st) in stencils.iter().enumerate() {
            self.grid.deposit(&mut cbar, st, lam[i]);
            let pi = stage.p[i];
            self.grid.deposit_derivative(&mut cbar, st, mu[i], [-pi[0], -pi[1]]);
        }
        let c = self.deposit_weight(stage.p.len());
        let dbar = self.grid.apply_compact(&self.symbol, &cbar, &rows, 1.0);

        let mut pbar = Vec::with_capacity(stage.p.len());
        let mut qbar = Vec::with_capacity(stage.p.len());
        for (i, st) in stencils.iter().enumerate() {
            let back = self.grid.value_grad(&dbar, st);
            let jet = &jets[i];
            let (pi, l, m) = (stage.p[i], lam[i], mu[i]);
            let mut pb = [0.0; 2];
            let mut qb = [0.0; 2];
            for a in 0..2 {
                pb[a] = c * back.value[a] - (jet.grad[a][0] * m[0] + jet.grad[a][1] * m[1]);
            }
            for b in 0..2 {
                let mut v = 0.0;
                for a in 0..2 {
                    v += jet.grad[a][b] * l[a];
                    v += c * pi[a] * back.grad[a][b];
                    v -= pi[a] * (jet.hess[a][b][0] * m[0] + jet.hess[a][b][1] * m[1]);
                }
                qb[b] = v;
            }
            pbar.push(pb);
            qbar.push(qb);
        }
        (pbar, qbar)
    }
}

/// Quadrature weight of one sample on the loop.
#[inline]
pub fn quadrature_weight(n_p: usize) -> f64 {
    std::f64::consts::TAU / n_p as f64
}

/// Nodal velocity `u = A^{-1} J(p, q)` of a phase state.
pub fn velocity_field(state: &PhaseState, cfg: &ShootConfig) -> Result<TorusGridField> {
    VelocityOperator::new(cfg.n_g, cfg.metric)?.velocity_field(&state.p, state.q.points())
}

/// `H = 1/2 <p, u(q)>` with the loop quadrature weight.
pub fn hamiltonian(state: &PhaseState, cfg: &ShootConfig) -> Result<f64> {
    let op = VelocityOperator::new(cfg.n_g, cfg.metric)?;
    Ok(hamiltonian_with(&op, &state.p, state.q.points()))
}

fn hamiltonian_with(op: &VelocityOperator, p: &[Point], q: &[Point]) -> f64 {
    let u = op.particle_velocity(p, q);
    let pairing: f64 = p.iter().zip(&u).map(|(a, b)| a[0] * b[0] + a[1] * b[1]).sum();
    0.5 * quadrature_weight(p.len()) * pairing
}

#[derive(Debug, Clone)]
struct Stage {
    p: Vec<Point>,
    q: Vec<Point>,
    coeffs: Vec<Point>,
}

/// States at every time node, plus the per-stage data the reverse sweep needs.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<PhaseState>,
    pub hamiltonian_start: f64,
    pub hamiltonian_end: f64,
    stages: Option<Vec<Stage>>,
}

impl Trajectory {
    pub fn final_state(&self) -> &PhaseState {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn relative_drift(&self) -> f64 {
        (self.hamiltonian_end - self.hamiltonian_start).abs() / self.hamiltonian_start.max(f64::MIN_POSITIVE)
    }

    pub fn has_stage_cache(&self) -> bool {
        self.stages.is_some()
    }
}

fn axpy(y: &[Point], a: f64, x: &[Point]) -> Vec<Point> {
    y.iter().zip(x).map(|(u, v)| [u[0] + a * v[0], u[1] + a * v[1]]).collect()
}

fn add_assign(y: &mut [Point], a: f64, x: &[Point]) {
    for (u, v) in y.iter_mut().zip(x) {
        u[0] += a * v[0];
        u[1] += a * v[1];
    }
}

fn sane(v: &[Point]) -> bool {
    v.iter().all(|x| x[0].is_finite() && x[1].is_finite() && x[0].abs() < 1e8 && x[1].abs() < 1e8)
}

/// Shoots `(p0 n, q0)` to time 1.
pub fn shoot(p0: &ScalarLoopField, q0: &ClosedCurve2D, cfg: &ShootConfig) -> Result<Trajectory> {
    shoot_state(&PhaseState::normal(p0, q0)?, cfg, false)
}

/// RK4 integration of the shooting equations from a general initial state.
///
/// With `record_stages` the trajectory keeps what [`shoot_adjoint`] needs.
pub fn shoot_state(initial: &PhaseState, cfg: &ShootConfig, record_stages: bool) -> Result<Trajectory> {
    cfg.validate()?;
    let op = VelocityOperator::new(cfg.n_g, cfg.metric)?;
    shoot_with(&op, initial, cfg, record_stages)
}

pub(crate) fn shoot_with(
    op: &VelocityOperator,
    initial: &PhaseState,
    cfg: &ShootConfig,
    record_stages: bool,
) -> Result<Trajectory> {
    let dt = 1.0 / cfg.steps as f64;
    let mut p = initial.p.clone();
    let mut q = initial.q.points().to_vec();
    let mut states = Vec::with_capacity(cfg.steps + 1);
    states.push(initial.clone());
    let mut stages = record_stages.then(|| Vec::with_capacity(4 * cfg.steps));
    let guard = |q: &[Point], p: &[Point], step: usize| {
        if sane(q) && sane(p) {
            Ok(())
        } else {
            Err(Error::BlowUp { step })
        }
    };
    guard(&q, &p, 0)?;
    let h0 = hamiltonian_with(op, &p, &q);

    for step in 0..cfg.steps {
        let (dq1, dp1, c1) = op.rhs(&p, &q);
        let (q2, p2) = (axpy(&q, 0.5 * dt, &dq1), axpy(&p, 0.5 * dt, &dp1));
        guard(&q2, &p2, step + 1)?;
        let (dq2, dp2, c2) = op.rhs(&p2, &q2);
        let (q3, p3) = (axpy(&q, 0.5 * dt, &dq2), axpy(&p, 0.5 * dt, &dp2));
        guard(&q3, &p3, step + 1)?;
        let (dq3, dp3, c3) = op.rhs(&p3, &q3);
        let (q4, p4) = (axpy(&q, dt, &dq3), axpy(&p, dt, &dp3));
        guard(&q4, &p4, step + 1)?;
        let (dq4, dp4, c4) = op.rhs(&p4, &q4);

        let (qn, pn) = {
            let mut qn = q.clone();
            let mut pn = p.clone();
            add_assign(&mut qn, dt / 6.0, &dq1);
            add_assign(&mut qn, dt / 3.0, &dq2);
            add_assign(&mut qn, dt / 3.0, &dq3);
            add_assign(&mut qn, dt / 6.0, &dq4);
            add_assign(&mut pn, dt / 6.0, &dp1);
            add_assign(&mut pn, dt / 3.0, &dp2);
            add_assign(&mut pn, dt / 3.0, &dp3);
            add_assign(&mut pn, dt / 6.0, &dp4);
            (qn, pn)
        };
        guard(&qn, &pn, step + 1)?;
        if let Some(st) = stages.as_mut() {
            st.push(Stage { p: p.clone(), q: q.clone(), coeffs: c1 });
            st.push(Stage { p: p2, q: q2, coeffs: c2 });
            st.push(Stage { p: p3, q: q3, coeffs: c3 });
            st.push(Stage { p: p4, q: q4, coeffs: c4 });
        }
        p = pn;
        q = qn;
        states.push(PhaseState {
            p: p.clone(),
            q: ClosedCurve2D::from_points_unchecked(q.clone()),
        });
    }

    let h1 = hamiltonian_with(op, &p, &q);
    let traj = Trajectory {
        states,
        hamiltonian_start: h0,
        hamiltonian_end: h1,
        stages,
    };
    let drift = traj.relative_drift();
    if drift > cfg.hamiltonian_tol {
        return Err(Error::IntegrationAccuracy {
            drift,
            tol: cfg.hamiltonian_tol,
        });
    }
    Ok(traj)
}

/// Gradient of a scalar of the final state with respect to the initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct ShootGradient {
    pub p: Vec<Point>,
    pub q: Vec<Point>,
}

/// Gradient of `<cobar, q(1)>` with respect to the initial covectors and points.
pub fn shoot_adjoint(traj: &Trajectory, cobar: &[Point], cfg: &ShootConfig) -> Result<ShootGradient> {
    let op = VelocityOperator::new(cfg.n_g, cfg.metric)?;
    let n = traj.final_state().len();
    if cobar.len() != n {
        return Err(Error::ContractViolation(format!("cotangent has {} entries for {n} points", cobar.len())));
    }
    shoot_adjoint_with(&op, traj, &vec![[0.0; 2]; n], cobar, cfg)
}

pub(crate) fn shoot_adjoint_with(
    op: &VelocityOperator,
    traj: &Trajectory,
    pbar_end: &[Point],
    qbar_end: &[Point],
    cfg: &ShootConfig,
) -> Result<ShootGradient> {
    let stages = traj
        .stages
        .as_ref()
        .ok_or_else(|| Error::ContractViolation("trajectory was shot without a stage cache".into()))?;
    if stages.len() != 4 * cfg.steps {
        return Err(Error::ContractViolation(format!(
            "stage cache holds {} stages, config expects {}",
            stages.len(),
            4 * cfg.steps
        )));
    }
    let dt = 1.0 / cfg.steps as f64;
    let mut pbar = pbar_end.to_vec();
    let mut qbar = qbar_end.to_vec();

    for step in (0..cfg.steps).rev() {
        let st = &stages[4 * step..4 * step + 4];
        // cotangents on the stage slopes k_s = (dq_s, dp_s)
        let mut kq: [Vec<Point>; 4] = [
            scaled(&qbar, dt / 6.0),
            scaled(&qbar, dt / 3.0),
            scaled(&qbar, dt / 3.0),
            scaled(&qbar, dt / 6.0),
        ];
        let mut kp: [Vec<Point>; 4] = [
            scaled(&pbar, dt / 6.0),
            scaled(&pbar, dt / 3.0),
            scaled(&pbar, dt / 3.0),
            scaled(&pbar, dt / 6.0),
        ];
        let back = [0.0, 0.5 * dt, 0.5 * dt, dt];
        for s in (0..4).rev() {
            let (yp, yq) = op.rhs_vjp(&st[s], &kq[s], &kp[s]);
            add_assign(&mut pbar, 1.0, &yp);
            add_assign(&mut qbar, 1.0, &yq);
            if s > 0 {
                add_assign(&mut kp[s - 1], back[s], &yp);
                add_assign(&mut kq[s - 1], back[s], &yq);
            }
        }
    }
    Ok(ShootGradient { p: pbar, q: qbar })
}

fn scaled(x: &[Point], a: f64) -> Vec<Point> {
    x.iter().map(|v| [a * v[0], a * v[1]]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{loop_knot, spline_eval_grid, spread_to_grid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn circle(n: usize) -> ClosedCurve2D {
        ClosedCurve2D::new((0..n).map(|j| {
            let s = loop_knot(j, n);
            [s.cos() + PI, s.sin() + PI]
        }).collect())
        .unwrap()
    }

    fn random_state(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> PhaseState {
        let q = circle(n);
        let p = (0..n).map(|_| [scale * rng.random_range(-1.0..1.0), scale * rng.random_range(-1.0..1.0)]).collect();
        PhaseState::new(p, q).unwrap()
    }

    fn small_cfg() -> ShootConfig {
        ShootConfig { steps: 10, n_g: 32, ..Default::default() }
    }

    #[test]
    fn runaway_momentum_fails_without_panicking() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = ShootConfig { hamiltonian_tol: 1e300, ..small_cfg() };
        for scale in [1e6, 1e12, 1e200] {
            let st = random_state(16, scale, &mut rng);
            assert!(matches!(shoot_state(&st, &cfg, false), Err(Error::BlowUp { .. })));
        }
    }

    #[test]
    fn zero_momentum_gives_zero_velocity_and_energy() {
        let st = PhaseState::new(vec![[0.0; 2]; 16], circle(16)).unwrap();
        let cfg = small_cfg();
        assert!(velocity_field(&st, &cfg).unwrap().data().iter().all(|v| *v == [0.0, 0.0]));
        assert_eq!(hamiltonian(&st, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn velocity_linear_and_hamiltonian_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = small_cfg();
        let st = random_state(20, 1.0, &mut rng);
        let scaled_st = PhaseState::new(st.p.iter().map(|v| [3.0 * v[0], 3.0 * v[1]]).collect(), st.q.clone()).unwrap();
        let u1 = velocity_field(&st, &cfg).unwrap();
        let u3 = velocity_field(&scaled_st, &cfg).unwrap();
        for (a, b) in u1.data().iter().zip(u3.data()) {
            assert!((3.0 * a[0] - b[0]).abs() < 1e-12 && (3.0 * a[1] - b[1]).abs() < 1e-12);
        }
        let h1 = hamiltonian(&st, &cfg).unwrap();
        let h3 = hamiltonian(&scaled_st, &cfg).unwrap();
        assert!(h1 > 0.0);
        assert!((9.0 * h1 - h3).abs() < 1e-12 * h3);
    }

    #[test]
    fn single_particle_velocity_symmetric_about_particle() {
        let cfg = ShootConfig { n_g: 32, ..Default::default() };
        let h = std::f64::consts::TAU / 32.0;
        // particle on a grid node so reflections map nodes to nodes
        let q = [10.0 * h, 7.0 * h];
        let op = VelocityOperator::new(cfg.n_g, cfg.metric).unwrap();
        let u = op.velocity_field(&[[1.0, 0.0]], &[q]).unwrap();
        let n = 32usize;
        for a in 0..n {
            for b in 0..n {
                let ra = (2 * 10 + n - a) % n;
                let v = u.data()[a * n + b];
                let w = u.data()[ra * n + b];
                assert!((v[0] - w[0]).abs() < 1e-14 && v[1].abs() < 1e-14);
            }
        }
    }

    #[test]
    fn hamiltonian_two_evaluations_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = ShootConfig { n_g: 32, ..Default::default() };
        let st = random_state(24, 1.0, &mut rng);
        let ds = quadrature_weight(24);
        let spread = spread_to_grid(&st.p, st.q.points(), 32).unwrap().scale(ds);
        let u = metric_inverse(&spread, &cfg.metric).unwrap();
        // with J = ds spread(p, q): 1/2 <J, A^{-1} J> = 1/2 ds <p, u(q)>
        let grid_form = 0.5 * spread.dot(&u);
        let at = spline_eval_grid(&u, st.q.points()).unwrap();
        let particle_form: f64 = 0.5 * ds * st.p.iter().zip(&at).map(|(a, b)| a[0] * b[0] + a[1] * b[1]).sum::<f64>();
        let direct = hamiltonian(&st, &cfg).unwrap();
        assert!((grid_form - particle_form).abs() < 1e-12 * direct);
        assert!((direct - particle_form).abs() < 1e-12 * direct);
    }

    #[test]
    fn zero_momentum_fixed_point() {
        let q0 = circle(32);
        let traj = shoot(&ScalarLoopField::zeros(32), &q0, &small_cfg()).unwrap();
        for st in &traj.states {
            assert_eq!(st.q, q0);
            assert!(st.p.iter().all(|v| *v == [0.0, 0.0]));
        }
    }

    #[test]
    fn index_rotation_equivariance() {
        let n = 40;
        let m = 7;
        let q0 = circle(n);
        let p0 = ScalarLoopField::from_fn(n, |s| 0.4 + 0.3 * (2.0 * s).cos() - 0.2 * (3.0 * s).sin());
        let cfg = small_cfg();
        let a = shoot(&p0, &q0, &cfg).unwrap();
        let rot = |v: &[f64]| -> Vec<f64> { (0..n).map(|j| v[(j + m) % n]).collect() };
        let q_rot = ClosedCurve2D::new((0..n).map(|j| q0.points()[(j + m) % n]).collect()).unwrap();
        let p_rot = ScalarLoopField::new(rot(&p0.values)).unwrap();
        let b = shoot(&p_rot, &q_rot, &cfg).unwrap();
        let qa = a.final_state().q.points();
        let qb = b.final_state().q.points();
        for j in 0..n {
            let (u, v) = (qa[(j + m) % n], qb[j]);
            assert!((u[0] - v[0]).abs() < 1e-9 && (u[1] - v[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn missing_stage_cache_is_contract_violation() {
        let traj = shoot(&ScalarLoopField::zeros(16), &circle(16), &small_cfg()).unwrap();
        assert!(!traj.has_stage_cache());
        let err = shoot_adjoint(&traj, &[[1.0, 0.0]; 16], &small_cfg()).unwrap_err();
        assert!(matches!(err, Error::ContractViolation(_)));
    }

    #[test]
    fn zero_cotangent_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let st = random_state(16, 0.5, &mut rng);
        let cfg = small_cfg();
        let traj = shoot_state(&st, &cfg, true).unwrap();
        let g = shoot_adjoint(&traj, &[[0.0; 2]; 16], &cfg).unwrap();
        assert!(g.p.iter().chain(&g.q).all(|v| *v == [0.0, 0.0]));
    }

    fn pairing(traj: &Trajectory, cobar: &[Point]) -> f64 {
        traj.final_state().q.points().iter().zip(cobar).map(|(a, b)| a[0] * b[0] + a[1] * b[1]).sum()
    }

    #[test]
    fn adjoint_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 24;
        let cfg = ShootConfig { steps: 8, n_g: 32, ..Default::default() };
        let st = random_state(n, 0.8, &mut rng);
        let cobar: Vec<Point> = (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
        let traj = shoot_state(&st, &cfg, true).unwrap();
        let g = shoot_adjoint(&traj, &cobar, &cfg).unwrap();
        let eps = 1e-6;
        for _ in 0..4 {
            let dp: Vec<Point> = (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
            let dq: Vec<Point> = (0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
            let shifted = |sign: f64| {
                let s = PhaseState {
                    p: axpy(&st.p, sign * eps, &dp),
                    q: ClosedCurve2D::from_points_unchecked(axpy(st.q.points(), sign * eps, &dq)),
                };
                pairing(&shoot_state(&s, &cfg, false).unwrap(), &cobar)
            };
            let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * eps);
            let ad: f64 = g.p.iter().zip(&dp).chain(g.q.iter().zip(&dq)).map(|(a, b)| a[0] * b[0] + a[1] * b[1]).sum();
            assert!((fd - ad).abs() <= 1e-6 * ad.abs().max(1e-3), "fd {fd} adjoint {ad}");
        }
    }

    #[test]
    fn hamiltonian_drift_shrinks_with_steps() {
        let n = 50;
        let q0 = circle(n);
        let p0 = ScalarLoopField::from_fn(n, |s| 1.0 + 0.5 * (2.0 * s).cos());
        let drift = |steps| {
            let cfg = ShootConfig { steps, n_g: 32, hamiltonian_tol: 1.0, ..Default::default() };
            shoot(&p0, &q0, &cfg).unwrap().relative_drift()
        };
        let (d10, d20) = (drift(10), drift(20));
        assert!(d10 / d20 > 8.0, "{d10} {d20}");
    }

    #[test]
    fn drift_tolerance_enforced() {
        let n = 40;
        let p0 = ScalarLoopField::from_fn(n, |s| 3.0 + 2.0 * (3.0 * s).cos());
        let cfg = ShootConfig { steps: 2, n_g: 32, hamiltonian_tol: 1e-12, ..Default::default() };
        assert!(matches!(shoot(&p0, &circle(n), &cfg), Err(Error::IntegrationAccuracy { .. })));
    }
}
