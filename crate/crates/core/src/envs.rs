//! The four benchmark control systems.
//!
//! Each system is a discrete-time deterministic plant `x' = f(x, u)` obtained
//! by an explicit Euler step with `dt = 0.1`, together with a constraint
//! function `h` whose positive region marks violation, analytic Jacobians of
//! `f` and `h`, and a sound interval image of `f` over input boxes.
//!
//! Sign convention: `h(x) > 0` iff `x` violates. `h` is the max of the
//! task hazard term and a domain-exit term that flags states about to leave
//! the box the networks were verified on (angular coordinates wrap instead
//! of exiting and are excluded from the domain term).

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::{CoreError, Result};

const TWO_PI: f64 = 2.0 * PI;

/// Margin of the domain-exit augmentation on non-angular coordinates.
pub const DOMAIN_EXIT_MARGIN: f64 = 0.02;

/// Wrap an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(TWO_PI) - PI
}

/// An axis-aligned box, per-dimension `[lo, hi]` intervals.
/// Serializes as plain `{"lo": [...], "hi": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "HyperboxRepr", into = "HyperboxRepr")]
pub struct Hyperbox {
    pub lo: Array1<f64>,
    pub hi: Array1<f64>,
}

#[derive(Serialize, Deserialize)]
struct HyperboxRepr {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl From<HyperboxRepr> for Hyperbox {
    fn from(r: HyperboxRepr) -> Self {
        Hyperbox::from_slices(&r.lo, &r.hi)
    }
}

impl From<Hyperbox> for HyperboxRepr {
    fn from(b: Hyperbox) -> Self {
        HyperboxRepr { lo: b.lo.to_vec(), hi: b.hi.to_vec() }
    }
}

impl Hyperbox {
    pub fn new(lo: Array1<f64>, hi: Array1<f64>) -> Self {
        assert_eq!(lo.len(), hi.len(), "box bound lengths differ");
        assert!(!lo.is_empty(), "box must have dimension >= 1");
        for i in 0..lo.len() {
            assert!(lo[i] <= hi[i], "box lo > hi at dim {i}");
            assert!(lo[i].is_finite() && hi[i].is_finite());
        }
        Self { lo, hi }
    }

    pub fn from_slices(lo: &[f64], hi: &[f64]) -> Self {
        Self::new(Array1::from(lo.to_vec()), Array1::from(hi.to_vec()))
    }

    /// Degenerate box around a single point.
    pub fn point(x: &Array1<f64>) -> Self {
        Self::new(x.clone(), x.clone())
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn width(&self, i: usize) -> f64 {
        self.hi[i] - self.lo[i]
    }

    pub fn max_width(&self) -> f64 {
        (0..self.dim())
            .map(|i| self.width(i))
            .fold(0.0, f64::max)
    }

    pub fn center(&self) -> Array1<f64> {
        (&self.lo + &self.hi) * 0.5
    }

    pub fn contains(&self, x: &Array1<f64>, tol: f64) -> bool {
        x.len() == self.dim()
            && (0..self.dim()).all(|i| x[i] >= self.lo[i] - tol && x[i] <= self.hi[i] + tol)
    }

    pub fn contains_box(&self, other: &Hyperbox, tol: f64) -> bool {
        other.dim() == self.dim()
            && (0..self.dim())
                .all(|i| other.lo[i] >= self.lo[i] - tol && other.hi[i] <= self.hi[i] + tol)
    }

    /// Cartesian product `self x other`.
    pub fn concat(&self, other: &Hyperbox) -> Hyperbox {
        let lo = self.lo.iter().chain(other.lo.iter()).copied().collect();
        let hi = self.hi.iter().chain(other.hi.iter()).copied().collect();
        Hyperbox::new(Array1::from_vec(lo), Array1::from_vec(hi))
    }

    /// First `n` dimensions.
    pub fn prefix(&self, n: usize) -> Hyperbox {
        Hyperbox::new(
            self.lo.slice(ndarray::s![..n]).to_owned(),
            self.hi.slice(ndarray::s![..n]).to_owned(),
        )
    }

    /// Dimensions `n..`.
    pub fn suffix(&self, n: usize) -> Hyperbox {
        Hyperbox::new(
            self.lo.slice(ndarray::s![n..]).to_owned(),
            self.hi.slice(ndarray::s![n..]).to_owned(),
        )
    }

    /// Split into two halves at the midpoint of dimension `i`.
    pub fn split(&self, i: usize) -> (Hyperbox, Hyperbox) {
        let mid = 0.5 * (self.lo[i] + self.hi[i]);
        let mut a = self.clone();
        let mut b = self.clone();
        a.hi[i] = mid;
        b.lo[i] = mid;
        (a, b)
    }

    /// Clamp a point into the box.
    pub fn project(&self, x: &mut Array1<f64>) {
        for i in 0..self.dim() {
            x[i] = x[i].clamp(self.lo[i], self.hi[i]);
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Array1<f64> {
        Array1::from_iter((0..self.dim()).map(|i| rng.gen_range(self.lo[i]..=self.hi[i])))
    }
}

/// The benchmark system identifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvName {
    DoubleIntegrator,
    DoubleIntegrator2d,
    Unicycle,
    RobotArm,
}

impl EnvName {
    pub const ALL: [EnvName; 4] = [
        EnvName::DoubleIntegrator,
        EnvName::DoubleIntegrator2d,
        EnvName::Unicycle,
        EnvName::RobotArm,
    ];

    pub fn parse(s: &str) -> Result<EnvName> {
        match s {
            "double_integrator" | "di" => Ok(EnvName::DoubleIntegrator),
            "double_integrator_2d" | "di2d" => Ok(EnvName::DoubleIntegrator2d),
            "unicycle" => Ok(EnvName::Unicycle),
            "robot_arm" | "arm" => Ok(EnvName::RobotArm),
            other => Err(CoreError::Contract(format!("unknown env '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            EnvName::DoubleIntegrator => "double_integrator",
            EnvName::DoubleIntegrator2d => "double_integrator_2d",
            EnvName::Unicycle => "unicycle",
            EnvName::RobotArm => "robot_arm",
        }
    }
}

/// One benchmark system: dynamics, constraint, and domain boxes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: EnvName,
    pub state_dim: usize,
    pub control_dim: usize,
    pub dt: f64,
    pub state_box: Hyperbox,
    pub control_box: Hyperbox,
    pub params: BTreeMap<String, f64>,
}

impl EnvSpec {
    pub fn by_name(name: EnvName) -> EnvSpec {
        match name {
            EnvName::DoubleIntegrator => Self::double_integrator(),
            EnvName::DoubleIntegrator2d => Self::double_integrator_2d(),
            EnvName::Unicycle => Self::unicycle(),
            EnvName::RobotArm => Self::robot_arm(),
        }
    }

    /// 1-D double integrator: state (p, v), control a; hazard |p| >= 0.9.
    pub fn double_integrator() -> EnvSpec {
        EnvSpec {
            name: EnvName::DoubleIntegrator,
            state_dim: 2,
            control_dim: 1,
            dt: 0.1,
            state_box: Hyperbox::from_slices(&[-1.0, -1.0], &[1.0, 1.0]),
            control_box: Hyperbox::from_slices(&[-1.0], &[1.0]),
            params: BTreeMap::from([("hazard_dist".into(), 0.9)]),
        }
    }

    /// 2-D double integrator: state (px, py, vx, vy), control (ax, ay);
    /// hazard disk of radius 0.4 at the origin.
    pub fn double_integrator_2d() -> EnvSpec {
        EnvSpec {
            name: EnvName::DoubleIntegrator2d,
            state_dim: 4,
            control_dim: 2,
            dt: 0.1,
            state_box: Hyperbox::from_slices(&[-1.0; 4], &[1.0; 4]),
            control_box: Hyperbox::from_slices(&[-1.0; 2], &[1.0; 2]),
            params: BTreeMap::from([("hazard_radius".into(), 0.4)]),
        }
    }

    /// Unicycle at fixed speed 0.9: state (px, py, theta), control omega;
    /// hazard disk of radius 0.4 at the origin.
    pub fn unicycle() -> EnvSpec {
        EnvSpec {
            name: EnvName::Unicycle,
            state_dim: 3,
            control_dim: 1,
            dt: 0.1,
            state_box: Hyperbox::from_slices(&[-1.0, -1.0, -PI], &[1.0, 1.0, PI]),
            control_box: Hyperbox::from_slices(&[-1.0], &[1.0]),
            params: BTreeMap::from([("speed".into(), 0.9), ("hazard_radius".into(), 0.4)]),
        }
    }

    /// Two-link arm: state (th1, th2, th1dot, th2dot), control = joint
    /// accelerations; hazard when the end effector reaches beyond 0.85
    /// from the base.
    pub fn robot_arm() -> EnvSpec {
        EnvSpec {
            name: EnvName::RobotArm,
            state_dim: 4,
            control_dim: 2,
            dt: 0.1,
            state_box: Hyperbox::from_slices(&[-PI, -PI, -1.0, -1.0], &[PI, PI, 1.0, 1.0]),
            control_box: Hyperbox::from_slices(&[-1.0; 2], &[1.0; 2]),
            params: BTreeMap::from([
                ("l1".into(), 0.5),
                ("l2".into(), 0.5),
                ("reach_limit".into(), 0.85),
            ]),
        }
    }

    pub fn param(&self, key: &str) -> f64 {
        self.params[key]
    }

    /// Indices of angular state coordinates (wrap instead of exiting).
    pub fn angular_dims(&self) -> &'static [usize] {
        match self.name {
            EnvName::DoubleIntegrator | EnvName::DoubleIntegrator2d => &[],
            EnvName::Unicycle => &[2],
            EnvName::RobotArm => &[0, 1],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim + self.control_dim
    }

    /// Joint (state, control) box.
    pub fn joint_box(&self) -> Hyperbox {
        self.state_box.concat(&self.control_box)
    }

    fn check_dims(&self, x: &Array1<f64>, u: &Array1<f64>) -> Result<()> {
        if x.len() != self.state_dim {
            return Err(CoreError::DimensionMismatch {
                expected: self.state_dim,
                got: x.len(),
                context: "state",
            });
        }
        if u.len() != self.control_dim {
            return Err(CoreError::DimensionMismatch {
                expected: self.control_dim,
                got: u.len(),
                context: "control",
            });
        }
        Ok(())
    }

    /// Explicit Euler step `x' = f(x, u)`.
    pub fn step(&self, x: &Array1<f64>, u: &Array1<f64>) -> Result<Array1<f64>> {
        self.check_dims(x, u)?;
        let dt = self.dt;
        Ok(match self.name {
            EnvName::DoubleIntegrator => {
                Array1::from_vec(vec![x[0] + x[1] * dt, x[1] + u[0] * dt])
            }
            EnvName::DoubleIntegrator2d => Array1::from_vec(vec![
                x[0] + x[2] * dt,
                x[1] + x[3] * dt,
                x[2] + u[0] * dt,
                x[3] + u[1] * dt,
            ]),
            EnvName::Unicycle => {
                let v = self.param("speed");
                Array1::from_vec(vec![
                    x[0] + v * x[2].cos() * dt,
                    x[1] + v * x[2].sin() * dt,
                    wrap_angle(x[2] + u[0] * dt),
                ])
            }
            EnvName::RobotArm => Array1::from_vec(vec![
                wrap_angle(x[0] + x[2] * dt),
                wrap_angle(x[1] + x[3] * dt),
                x[2] + u[0] * dt,
                x[3] + u[1] * dt,
            ]),
        })
    }

    /// Task hazard term of the constraint (without domain-exit augmentation).
    pub fn constraint_task(&self, x: &Array1<f64>) -> f64 {
        match self.name {
            EnvName::DoubleIntegrator => x[0].abs() - self.param("hazard_dist"),
            EnvName::DoubleIntegrator2d => {
                self.param("hazard_radius") - (x[0] * x[0] + x[1] * x[1]).sqrt()
            }
            EnvName::Unicycle => {
                self.param("hazard_radius") - (x[0] * x[0] + x[1] * x[1]).sqrt()
            }
            EnvName::RobotArm => {
                let (ex, ey) = self.end_effector(x[0], x[1]);
                (ex * ex + ey * ey).sqrt() - self.param("reach_limit")
            }
        }
    }

    fn end_effector(&self, th1: f64, th2: f64) -> (f64, f64) {
        let (l1, l2) = (self.param("l1"), self.param("l2"));
        (
            l1 * th1.cos() + l2 * (th1 + th2).cos(),
            l1 * th1.sin() + l2 * (th1 + th2).sin(),
        )
    }

    /// Domain-exit term: positive once a non-angular coordinate is within
    /// `DOMAIN_EXIT_MARGIN` (relative) of leaving the state box.
    pub fn domain_exit(&self, x: &Array1<f64>) -> f64 {
        let angular = self.angular_dims();
        let mut worst = f64::NEG_INFINITY;
        for i in 0..self.state_dim {
            if angular.contains(&i) {
                continue;
            }
            let c = 0.5 * (self.state_box.lo[i] + self.state_box.hi[i]);
            let b = 0.5 * self.state_box.width(i);
            worst = worst.max((x[i] - c).abs() / b - 1.0 + DOMAIN_EXIT_MARGIN);
        }
        worst
    }

    /// Full constraint `h(x) = max(h_task, domain_exit)`; `h > 0` violates.
    pub fn constraint(&self, x: &Array1<f64>) -> f64 {
        assert_eq!(x.len(), self.state_dim, "constraint: state dim mismatch");
        self.constraint_task(x).max(self.domain_exit(x))
    }

    /// Exact Jacobians (df/dx, df/du, dh/dx).
    ///
    /// At nonsmooth points of `h` a fixed subgradient is returned: sign 0 at
    /// |p| = 0 and the zero vector at a vanishing norm; ties in the max with
    /// the domain-exit term resolve to the task branch.
    pub fn jacobians(
        &self,
        x: &Array1<f64>,
        u: &Array1<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>, Array1<f64>)> {
        self.check_dims(x, u)?;
        let dt = self.dt;
        let m = self.state_dim;
        let n = self.control_dim;
        let mut dfdx = Array2::eye(m);
        let mut dfdu = Array2::zeros((m, n));
        match self.name {
            EnvName::DoubleIntegrator => {
                dfdx[[0, 1]] = dt;
                dfdu[[1, 0]] = dt;
            }
            EnvName::DoubleIntegrator2d => {
                dfdx[[0, 2]] = dt;
                dfdx[[1, 3]] = dt;
                dfdu[[2, 0]] = dt;
                dfdu[[3, 1]] = dt;
            }
            EnvName::Unicycle => {
                let v = self.param("speed");
                dfdx[[0, 2]] = -v * x[2].sin() * dt;
                dfdx[[1, 2]] = v * x[2].cos() * dt;
                dfdu[[2, 0]] = dt;
            }
            EnvName::RobotArm => {
                dfdx[[0, 2]] = dt;
                dfdx[[1, 3]] = dt;
                dfdu[[2, 0]] = dt;
                dfdu[[3, 1]] = dt;
            }
        }
        Ok((dfdx, dfdu, self.constraint_grad(x)))
    }

    fn constraint_task_grad(&self, x: &Array1<f64>) -> Array1<f64> {
        let mut g = Array1::zeros(self.state_dim);
        match self.name {
            EnvName::DoubleIntegrator => {
                g[0] = if x[0] > 0.0 {
                    1.0
                } else if x[0] < 0.0 {
                    -1.0
                } else {
                    0.0
                };
            }
            EnvName::DoubleIntegrator2d | EnvName::Unicycle => {
                let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
                if r > 0.0 {
                    g[0] = -x[0] / r;
                    g[1] = -x[1] / r;
                }
            }
            EnvName::RobotArm => {
                let (l1, l2) = (self.param("l1"), self.param("l2"));
                let (ex, ey) = self.end_effector(x[0], x[1]);
                let r = (ex * ex + ey * ey).sqrt();
                if r > 0.0 {
                    let (s1, c1) = x[0].sin_cos();
                    let (s12, c12) = (x[0] + x[1]).sin_cos();
                    // d ee / d th1 = (-l1 s1 - l2 s12, l1 c1 + l2 c12)
                    g[0] = (ex * (-l1 * s1 - l2 * s12) + ey * (l1 * c1 + l2 * c12)) / r;
                    g[1] = (ex * (-l2 * s12) + ey * (l2 * c12)) / r;
                }
            }
        }
        g
    }

    fn constraint_grad(&self, x: &Array1<f64>) -> Array1<f64> {
        let task = self.constraint_task(x);
        let exit = self.domain_exit(x);
        if task >= exit {
            self.constraint_task_grad(x)
        } else {
            let angular = self.angular_dims();
            let mut g = Array1::zeros(self.state_dim);
            let mut best = (f64::NEG_INFINITY, 0usize);
            for i in 0..self.state_dim {
                if angular.contains(&i) {
                    continue;
                }
                let c = 0.5 * (self.state_box.lo[i] + self.state_box.hi[i]);
                let b = 0.5 * self.state_box.width(i);
                let t = (x[i] - c).abs() / b - 1.0 + DOMAIN_EXIT_MARGIN;
                if t > best.0 {
                    best = (t, i);
                }
            }
            let i = best.1;
            let c = 0.5 * (self.state_box.lo[i] + self.state_box.hi[i]);
            let b = 0.5 * self.state_box.width(i);
            g[i] = if x[i] > c { 1.0 / b } else { -1.0 / b };
            g
        }
    }

    /// Sound interval image of `f` over an (x, u) box pair.
    pub fn step_interval(&self, x_box: &Hyperbox, u_box: &Hyperbox) -> Hyperbox {
        assert_eq!(x_box.dim(), self.state_dim);
        assert_eq!(u_box.dim(), self.control_dim);
        let dt = self.dt;
        let lin = |xl: f64, xh: f64, rl: f64, rh: f64| (xl + rl * dt, xh + rh * dt);
        match self.name {
            EnvName::DoubleIntegrator => {
                let (pl, ph) = lin(x_box.lo[0], x_box.hi[0], x_box.lo[1], x_box.hi[1]);
                let (vl, vh) = lin(x_box.lo[1], x_box.hi[1], u_box.lo[0], u_box.hi[0]);
                Hyperbox::from_slices(&[pl, vl], &[ph, vh])
            }
            EnvName::DoubleIntegrator2d => {
                let (pxl, pxh) = lin(x_box.lo[0], x_box.hi[0], x_box.lo[2], x_box.hi[2]);
                let (pyl, pyh) = lin(x_box.lo[1], x_box.hi[1], x_box.lo[3], x_box.hi[3]);
                let (vxl, vxh) = lin(x_box.lo[2], x_box.hi[2], u_box.lo[0], u_box.hi[0]);
                let (vyl, vyh) = lin(x_box.lo[3], x_box.hi[3], u_box.lo[1], u_box.hi[1]);
                Hyperbox::from_slices(&[pxl, pyl, vxl, vyl], &[pxh, pyh, vxh, vyh])
            }
            EnvName::Unicycle => {
                let v = self.param("speed");
                let (cl, ch) = cos_range(x_box.lo[2], x_box.hi[2]);
                let (sl, sh) = sin_range(x_box.lo[2], x_box.hi[2]);
                let (pxl, pxh) = lin(x_box.lo[0], x_box.hi[0], v * cl, v * ch);
                let (pyl, pyh) = lin(x_box.lo[1], x_box.hi[1], v * sl, v * sh);
                let (tl, th) = wrap_range(
                    x_box.lo[2] + u_box.lo[0] * dt,
                    x_box.hi[2] + u_box.hi[0] * dt,
                );
                Hyperbox::from_slices(&[pxl, pyl, tl], &[pxh, pyh, th])
            }
            EnvName::RobotArm => {
                let (t1l, t1h) = wrap_range(
                    x_box.lo[0] + x_box.lo[2] * dt,
                    x_box.hi[0] + x_box.hi[2] * dt,
                );
                let (t2l, t2h) = wrap_range(
                    x_box.lo[1] + x_box.lo[3] * dt,
                    x_box.hi[1] + x_box.hi[3] * dt,
                );
                let (w1l, w1h) = lin(x_box.lo[2], x_box.hi[2], u_box.lo[0], u_box.hi[0]);
                let (w2l, w2h) = lin(x_box.lo[3], x_box.hi[3], u_box.lo[1], u_box.hi[1]);
                Hyperbox::from_slices(&[t1l, t2l, w1l, w2l], &[t1h, t2h, w1h, w2h])
            }
        }
    }

    /// Interval enclosure (lo, hi) of the full constraint over a state box.
    pub fn constraint_range(&self, x_box: &Hyperbox) -> (f64, f64) {
        let (tl, th) = self.constraint_task_range(x_box);
        let (el, eh) = self.domain_exit_range(x_box);
        (tl.max(el), th.max(eh))
    }

    fn constraint_task_range(&self, x_box: &Hyperbox) -> (f64, f64) {
        match self.name {
            EnvName::DoubleIntegrator => {
                let (al, ah) = abs_range(x_box.lo[0], x_box.hi[0]);
                let d = self.param("hazard_dist");
                (al - d, ah - d)
            }
            EnvName::DoubleIntegrator2d | EnvName::Unicycle => {
                let (nl, nh) = norm2_range(
                    x_box.lo[0],
                    x_box.hi[0],
                    x_box.lo[1],
                    x_box.hi[1],
                );
                let r = self.param("hazard_radius");
                (r - nh, r - nl)
            }
            EnvName::RobotArm => {
                // ||ee||^2 = l1^2 + l2^2 + 2 l1 l2 cos(th2): depends on th2 only.
                let (l1, l2) = (self.param("l1"), self.param("l2"));
                let (cl, ch) = cos_range(x_box.lo[1], x_box.hi[1]);
                let rl = (l1 * l1 + l2 * l2 + 2.0 * l1 * l2 * cl).max(0.0).sqrt();
                let rh = (l1 * l1 + l2 * l2 + 2.0 * l1 * l2 * ch).max(0.0).sqrt();
                let lim = self.param("reach_limit");
                (rl - lim, rh - lim)
            }
        }
    }

    fn domain_exit_range(&self, x_box: &Hyperbox) -> (f64, f64) {
        let angular = self.angular_dims();
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for i in 0..self.state_dim {
            if angular.contains(&i) {
                continue;
            }
            let c = 0.5 * (self.state_box.lo[i] + self.state_box.hi[i]);
            let b = 0.5 * self.state_box.width(i);
            let (al, ah) = abs_range(x_box.lo[i] - c, x_box.hi[i] - c);
            lo = lo.max(al / b - 1.0 + DOMAIN_EXIT_MARGIN);
            hi = hi.max(ah / b - 1.0 + DOMAIN_EXIT_MARGIN);
        }
        (lo, hi)
    }
}

/// Range of |t| over [lo, hi].
pub fn abs_range(lo: f64, hi: f64) -> (f64, f64) {
    if lo <= 0.0 && hi >= 0.0 {
        (0.0, lo.abs().max(hi.abs()))
    } else {
        let (a, b) = (lo.abs(), hi.abs());
        (a.min(b), a.max(b))
    }
}

/// Range of sqrt(x^2 + y^2) over a 2-D box.
pub fn norm2_range(xl: f64, xh: f64, yl: f64, yh: f64) -> (f64, f64) {
    let (axl, axh) = abs_range(xl, xh);
    let (ayl, ayh) = abs_range(yl, yh);
    (
        (axl * axl + ayl * ayl).sqrt(),
        (axh * axh + ayh * ayh).sqrt(),
    )
}

/// Exact range of cos over [lo, hi].
pub fn cos_range(lo: f64, hi: f64) -> (f64, f64) {
    debug_assert!(lo <= hi);
    if hi - lo >= TWO_PI {
        return (-1.0, 1.0);
    }
    let mut min = lo.cos().min(hi.cos());
    let mut max = lo.cos().max(hi.cos());
    // interior extrema of cos: maxima at 2k*pi, minima at (2k+1)*pi
    if contains_multiple(lo, hi, 0.0) {
        max = 1.0;
    }
    if contains_multiple(lo, hi, PI) {
        min = -1.0;
    }
    (min, max)
}

/// Exact range of sin over [lo, hi].
pub fn sin_range(lo: f64, hi: f64) -> (f64, f64) {
    cos_range(lo - PI / 2.0, hi - PI / 2.0)
}

/// Does [lo, hi] contain a point congruent to `phase` mod 2*pi?
fn contains_multiple(lo: f64, hi: f64, phase: f64) -> bool {
    let k = ((lo - phase) / TWO_PI).ceil();
    phase + k * TWO_PI <= hi
}

/// Sound single-interval hull of the wrapped image of [lo, hi].
fn wrap_range(lo: f64, hi: f64) -> (f64, f64) {
    if hi - lo >= TWO_PI {
        return (-PI, PI);
    }
    if lo >= -PI && hi <= PI {
        return (lo, hi);
    }
    let (wl, wh) = (wrap_angle(lo), wrap_angle(hi));
    if wl <= wh && wh - wl >= hi - lo - 1e-12 {
        // wrapped contiguously into [-pi, pi)
        (wl, wh)
    } else {
        // image is two arcs at opposite ends; hull is the full circle
        (-PI, PI)
    }
}
