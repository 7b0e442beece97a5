//! Sound output bounds for networks over input boxes.
//!
//! Two methods with one contract: the returned interval always contains the
//! exact function value for every input in the box.
//!
//! - `Interval`: plain interval arithmetic pushed forward through affine and
//!   ReLU layers, with the four-corner product rule on the inner-product head.
//! - `LinearMccormick`: backward linear symbolic propagation (triangle
//!   relaxation on unstable ReLUs) gives affine lower/upper bounds on each
//!   embedding coordinate as a function of the input; the bilinear products
//!   are then relaxed with McCormick envelopes and the summed affine bound is
//!   minimized/maximized over the box in closed form. The result is
//!   intersected with the interval-method result, so it is never looser.
//!
//! Keeping the affine forms through the product preserves the correlation
//! between Z1(x) and Z2(x, u) through the shared state input, which is where
//! the tightening over plain interval products comes from.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::envs::Hyperbox;
use crate::net::{Critic, Layer, Mlp, PolicyNetwork, QNetwork};

/// A closed real interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Interval {
        debug_assert!(lo <= hi, "interval lo {lo} > hi {hi}");
        Interval { lo, hi }
    }

    pub fn point(v: f64) -> Interval {
        Interval { lo: v, hi: v }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, v: f64, tol: f64) -> bool {
        v >= self.lo - tol && v <= self.hi + tol
    }

    pub fn relu(&self) -> Interval {
        Interval::new(self.lo.max(0.0), self.hi.max(0.0))
    }

    /// Exact product range (four-corner rule).
    pub fn mul(&self, other: &Interval) -> Interval {
        let c = [
            self.lo * other.lo,
            self.lo * other.hi,
            self.hi * other.lo,
            self.hi * other.hi,
        ];
        Interval::new(
            c.iter().copied().fold(f64::INFINITY, f64::min),
            c.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        )
    }

    pub fn add(&self, other: &Interval) -> Interval {
        Interval::new(self.lo + other.lo, self.hi + other.hi)
    }

    pub fn intersect(&self, other: &Interval) -> Interval {
        // guard against crossing from fp noise when the true sets just touch
        let lo = self.lo.max(other.lo);
        let hi = self.hi.min(other.hi);
        if lo <= hi {
            Interval { lo, hi }
        } else {
            let mid = 0.5 * (lo + hi);
            Interval { lo: mid, hi: mid }
        }
    }
}

pub fn box_to_intervals(b: &Hyperbox) -> Vec<Interval> {
    (0..b.dim()).map(|i| Interval::new(b.lo[i], b.hi[i])).collect()
}

/// Exact interval image of an affine map under independent coordinates.
pub fn interval_affine(layer: &Layer, input: &[Interval]) -> Vec<Interval> {
    assert_eq!(layer.w.ncols(), input.len(), "interval_affine dims");
    (0..layer.w.nrows())
        .map(|r| {
            let (mut lo, mut hi) = (layer.b[r], layer.b[r]);
            for c in 0..input.len() {
                let w = layer.w[[r, c]];
                if w >= 0.0 {
                    lo += w * input[c].lo;
                    hi += w * input[c].hi;
                } else {
                    lo += w * input[c].hi;
                    hi += w * input[c].lo;
                }
            }
            Interval::new(lo, hi)
        })
        .collect()
}

pub fn interval_relu(input: &[Interval]) -> Vec<Interval> {
    input.iter().map(Interval::relu).collect()
}

/// Interval enclosure of the inner product of two interval vectors.
pub fn product_interval(a: &[Interval], b: &[Interval]) -> Interval {
    assert_eq!(a.len(), b.len(), "product_interval lengths");
    a.iter()
        .zip(b)
        .map(|(p, q)| p.mul(q))
        .fold(Interval::point(0.0), |acc, t| acc.add(&t))
}

/// Per-layer interval propagation through an Mlp.
#[derive(Debug, Clone)]
pub struct MlpIntervals {
    /// Pre-activation bounds per layer.
    pub pre: Vec<Vec<Interval>>,
    /// Output bounds (last layer, no ReLU).
    pub out: Vec<Interval>,
}

pub fn mlp_interval(mlp: &Mlp, input: &[Interval]) -> MlpIntervals {
    let n = mlp.layers.len();
    let mut pre = Vec::with_capacity(n);
    let mut act: Vec<Interval> = input.to_vec();
    for (j, layer) in mlp.layers.iter().enumerate() {
        let z = interval_affine(layer, &act);
        act = if j + 1 < n { interval_relu(&z) } else { z.clone() };
        pre.push(z);
    }
    let out = pre.last().unwrap().clone();
    MlpIntervals { pre, out }
}

/// Affine lower/upper bounds `A_l x + c_l <= g(x) <= A_u x + c_u` over a box.
#[derive(Debug, Clone)]
pub struct LinearBounds {
    pub a_l: Array2<f64>,
    pub c_l: Array1<f64>,
    pub a_u: Array2<f64>,
    pub c_u: Array1<f64>,
}

impl LinearBounds {
    /// Concretize over the box: interval per output row.
    pub fn concretize(&self, input: &[Interval]) -> Vec<Interval> {
        (0..self.a_l.nrows())
            .map(|r| {
                Interval::new(
                    affine_min(self.a_l.row(r), self.c_l[r], input),
                    affine_max(self.a_u.row(r), self.c_u[r], input),
                )
            })
            .collect()
    }

    /// Pad the coefficient matrices with zero columns on the right up to
    /// `total` input coordinates.
    pub fn pad_columns(&self, total: usize) -> LinearBounds {
        let pad = |a: &Array2<f64>| {
            let mut out = Array2::zeros((a.nrows(), total));
            out.slice_mut(ndarray::s![.., ..a.ncols()]).assign(a);
            out
        };
        LinearBounds {
            a_l: pad(&self.a_l),
            c_l: self.c_l.clone(),
            a_u: pad(&self.a_u),
            c_u: self.c_u.clone(),
        }
    }
}

pub fn affine_min(a: ndarray::ArrayView1<f64>, c: f64, input: &[Interval]) -> f64 {
    let mut v = c;
    for (j, &w) in a.iter().enumerate() {
        v += if w >= 0.0 { w * input[j].lo } else { w * input[j].hi };
    }
    v
}

pub fn affine_max(a: ndarray::ArrayView1<f64>, c: f64, input: &[Interval]) -> f64 {
    let mut v = c;
    for (j, &w) in a.iter().enumerate() {
        v += if w >= 0.0 { w * input[j].hi } else { w * input[j].lo };
    }
    v
}

/// ReLU node stability classification from pre-activation bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    AlwaysOn,
    AlwaysOff,
    Unstable,
}

pub fn classify(b: &Interval) -> NodeStatus {
    if b.lo >= 0.0 {
        NodeStatus::AlwaysOn
    } else if b.hi <= 0.0 {
        NodeStatus::AlwaysOff
    } else {
        NodeStatus::Unstable
    }
}

/// CROWN-style output of one branch: refined pre-activation bounds and the
/// affine output bounds over this branch's own input coordinates.
#[derive(Debug, Clone)]
pub struct CrownResult {
    pub pre: Vec<Vec<Interval>>,
    pub out_linear: LinearBounds,
    pub out: Vec<Interval>,
}

/// Backward linear bound propagation with the triangle relaxation.
///
/// Unstable nodes get the chord as the upper function and a line through the
/// origin as the lower function, slope 1 when the positive side dominates
/// (larger-area heuristic) and 0 otherwise. Pre-activation bounds for layer
/// `j` are computed by a backward pass through layers `0..j` and intersected
/// with plain interval bounds.
pub fn crown_mlp(mlp: &Mlp, input: &[Interval]) -> CrownResult {
    let iv = mlp_interval(mlp, input);
    let n = mlp.layers.len();
    let mut pre: Vec<Vec<Interval>> = Vec::with_capacity(n);
    let mut out_linear = None;
    for j in 0..n {
        let lb = backward_from(mlp, j, &pre);
        let conc = lb.concretize(input);
        let refined: Vec<Interval> = conc
            .iter()
            .zip(&iv.pre[j])
            .map(|(a, b)| a.intersect(b))
            .collect();
        pre.push(refined);
        if j + 1 == n {
            out_linear = Some(lb);
        }
    }
    let out = pre.last().unwrap().clone();
    CrownResult {
        pre,
        out_linear: out_linear.unwrap(),
        out,
    }
}

/// Linear bounds of the pre-activation of layer `target` as a function of the
/// network input, using `pre[0..target]` relaxations.
fn backward_from(mlp: &Mlp, target: usize, pre: &[Vec<Interval>]) -> LinearBounds {
    let l = &mlp.layers[target];
    let mut a_l = l.w.clone();
    let mut c_l = l.b.clone();
    let mut a_u = l.w.clone();
    let mut c_u = l.b.clone();
    for t in (0..target).rev() {
        // pass through ReLU of layer t
        let bounds = &pre[t];
        let width = bounds.len();
        let mut sl = vec![0.0; width]; // lower-function slope
        let mut su = vec![0.0; width]; // upper-function slope
        let mut iu = vec![0.0; width]; // upper-function intercept
        for k in 0..width {
            let (lo, hi) = (bounds[k].lo, bounds[k].hi);
            match classify(&bounds[k]) {
                NodeStatus::AlwaysOn => {
                    sl[k] = 1.0;
                    su[k] = 1.0;
                }
                NodeStatus::AlwaysOff => {}
                NodeStatus::Unstable => {
                    let s = hi / (hi - lo);
                    su[k] = s;
                    iu[k] = -s * lo;
                    sl[k] = if hi >= -lo { 1.0 } else { 0.0 };
                }
            }
        }
        let relax = |a: &mut Array2<f64>, c: &mut Array1<f64>, upper: bool| {
            for r in 0..a.nrows() {
                for k in 0..width {
                    let w = a[[r, k]];
                    if w == 0.0 {
                        continue;
                    }
                    // for an upper bound, positive coefficients take the node's
                    // upper relaxation; negative take the lower (and vice versa)
                    let use_upper = (w > 0.0) == upper;
                    if use_upper {
                        c[r] += w * iu[k];
                        a[[r, k]] = w * su[k];
                    } else {
                        a[[r, k]] = w * sl[k];
                    }
                }
            }
        };
        relax(&mut a_u, &mut c_u, true);
        relax(&mut a_l, &mut c_l, false);
        // substitute z_t = W_t a_{t-1} + b_t
        let lt = &mlp.layers[t];
        c_l = &c_l + &a_l.dot(&lt.b);
        a_l = a_l.dot(&lt.w);
        c_u = &c_u + &a_u.dot(&lt.b);
        a_u = a_u.dot(&lt.w);
    }
    LinearBounds { a_l, c_l, a_u, c_u }
}

/// Which bound computation to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundMethod {
    Interval,
    LinearMccormick,
}

/// Per-branch bound data.
#[derive(Debug, Clone, Serialize)]
pub struct BranchBounds {
    /// Pre-activation interval per layer per node.
    pub pre: Vec<Vec<Interval>>,
    /// Stability status for hidden-layer nodes.
    pub status: Vec<Vec<NodeStatus>>,
    /// Output (embedding) bounds.
    pub embed: Vec<Interval>,
}

impl BranchBounds {
    fn from_pre(pre: Vec<Vec<Interval>>) -> BranchBounds {
        let n = pre.len();
        let status = pre[..n - 1]
            .iter()
            .map(|layer| layer.iter().map(classify).collect())
            .collect();
        let embed = pre[n - 1].clone();
        BranchBounds { pre, status, embed }
    }

    pub fn unstable_count(&self) -> usize {
        self.status
            .iter()
            .flatten()
            .filter(|s| **s == NodeStatus::Unstable)
            .count()
    }
}

/// Sound enclosure of Q over an (x, u) box.
#[derive(Debug, Clone, Serialize)]
pub struct BoundsResult {
    pub x_branch: BranchBounds,
    pub u_branch: BranchBounds,
    pub q: Interval,
}

impl BoundsResult {
    pub fn unstable_count(&self) -> usize {
        self.x_branch.unstable_count() + self.u_branch.unstable_count()
    }
}

/// Bounds on Q(x, u) for the multiplicative network over `x_box x u_box`.
pub fn qnet_bounds(
    q: &QNetwork,
    x_box: &Hyperbox,
    u_box: &Hyperbox,
    method: BoundMethod,
) -> BoundsResult {
    let x_iv = box_to_intervals(x_box);
    let xu_box = x_box.concat(u_box);
    let xu_iv = box_to_intervals(&xu_box);
    match method {
        BoundMethod::Interval => {
            let bx = mlp_interval(&q.x_branch, &x_iv);
            let bu = mlp_interval(&q.u_branch, &xu_iv);
            let qi = product_interval(&bx.out, &bu.out);
            BoundsResult {
                x_branch: BranchBounds::from_pre(bx.pre),
                u_branch: BranchBounds::from_pre(bu.pre),
                q: qi,
            }
        }
        BoundMethod::LinearMccormick => {
            let cx = crown_mlp(&q.x_branch, &x_iv);
            let cu = crown_mlp(&q.u_branch, &xu_iv);
            let interval_q = {
                let bx = mlp_interval(&q.x_branch, &x_iv);
                let bu = mlp_interval(&q.u_branch, &xu_iv);
                product_interval(&bx.out, &bu.out)
            };
            let lx = cx.out_linear.pad_columns(xu_iv.len());
            let mc = mccormick_dot(&lx, &cx.out, &cu.out_linear, &cu.out, &xu_iv);
            BoundsResult {
                x_branch: BranchBounds::from_pre(cx.pre),
                u_branch: BranchBounds::from_pre(cu.pre),
                q: mc.intersect(&interval_q),
            }
        }
    }
}

/// McCormick-relaxed bounds on `sum_i z1_i * z2_i` where each factor carries
/// affine bounds over the same input coordinates. For each coordinate the
/// better of the two envelope inequalities (judged by its own concretized
/// value) is kept in affine form; the chosen affine forms are summed and
/// optimized jointly over the box.
fn mccormick_dot(
    l1: &LinearBounds,
    b1: &[Interval],
    l2: &LinearBounds,
    b2: &[Interval],
    input: &[Interval],
) -> Interval {
    let dim = input.len();
    let k = b1.len();
    let mut a_lo = Array1::<f64>::zeros(dim);
    let mut c_lo = 0.0;
    let mut a_hi = Array1::<f64>::zeros(dim);
    let mut c_hi = 0.0;
    for i in 0..k {
        let (a, b) = (b1[i].lo, b1[i].hi);
        let (c, d) = (b2[i].lo, b2[i].hi);
        // lower envelope: z1 z2 >= c z1 + a z2 - a c  and  >= d z1 + b z2 - b d
        let lo1 = mccormick_term(l1, l2, i, c, a, -a * c, input, false);
        let lo2 = mccormick_term(l1, l2, i, d, b, -b * d, input, false);
        let pick = if lo1.1 >= lo2.1 { lo1 } else { lo2 };
        a_lo += &pick.0 .0;
        c_lo += pick.0 .1;
        // upper envelope: z1 z2 <= c z1 + b z2 - b c  and  <= d z1 + a z2 - a d
        let hi1 = mccormick_term(l1, l2, i, c, b, -b * c, input, true);
        let hi2 = mccormick_term(l1, l2, i, d, a, -a * d, input, true);
        let pick = if hi1.1 <= hi2.1 { hi1 } else { hi2 };
        a_hi += &pick.0 .0;
        c_hi += pick.0 .1;
    }
    let lo = affine_min(a_lo.view(), c_lo, input);
    let hi = affine_max(a_hi.view(), c_hi, input);
    Interval::new(lo.min(hi), hi.max(lo))
}

type Affine = (Array1<f64>, f64);

/// Build the affine form `alpha * z1_i + beta * z2_i + gamma` after replacing
/// each factor with its appropriate affine bound, and report the form's own
/// concretized value (min for a lower bound, max for an upper bound).
#[allow(clippy::too_many_arguments)]
fn mccormick_term(
    l1: &LinearBounds,
    l2: &LinearBounds,
    i: usize,
    alpha: f64,
    beta: f64,
    gamma: f64,
    input: &[Interval],
    upper: bool,
) -> (Affine, f64) {
    let dim = input.len();
    let mut a = Array1::<f64>::zeros(dim);
    let mut c = gamma;
    let mut add = |lb: &LinearBounds, coef: f64| {
        if coef == 0.0 {
            return;
        }
        // for a lower-bounding form, positive coefficients take the factor's
        // lower affine bound; for upper-bounding forms this flips
        let take_lower = (coef > 0.0) != upper;
        let (m, cc) = if take_lower {
            (&lb.a_l, &lb.c_l)
        } else {
            (&lb.a_u, &lb.c_u)
        };
        for j in 0..dim {
            a[j] += coef * m[[i, j]];
        }
        c += coef * cc[i];
    };
    add(l1, alpha);
    add(l2, beta);
    let val = if upper {
        affine_max(a.view(), c, input)
    } else {
        affine_min(a.view(), c, input)
    };
    ((a, c), val)
}

/// Bounds on either critic architecture.
pub fn critic_bounds(c: &Critic, x_box: &Hyperbox, u_box: &Hyperbox, method: BoundMethod) -> Interval {
    match c {
        Critic::Multiplicative(q) => qnet_bounds(q, x_box, u_box, method).q,
        Critic::Dense(mlp) => {
            let xu = box_to_intervals(&x_box.concat(u_box));
            match method {
                BoundMethod::Interval => mlp_interval(mlp, &xu).out[0],
                BoundMethod::LinearMccormick => {
                    let cr = crown_mlp(mlp, &xu);
                    cr.out[0].intersect(&mlp_interval(mlp, &xu).out[0])
                }
            }
        }
    }
}

/// Interval-arithmetic lower bound on `min over the boxes` of Q.
///
/// Guaranteed <= min_{u'} Q(x', u') for every x' in `x_next_box`, hence a
/// sound surrogate for the forward-invariance inner minimum.
pub fn min_ia_q(q: &Critic, x_next_box: &Hyperbox, u_box: &Hyperbox) -> f64 {
    critic_bounds(q, x_next_box, u_box, BoundMethod::Interval).lo
}

/// Interval image of the policy output over a state box.
pub fn policy_interval(p: &PolicyNetwork, x_box: &Hyperbox) -> Hyperbox {
    let iv = mlp_interval(&p.net, &box_to_intervals(x_box));
    let raw_lo = Array1::from_iter(iv.out.iter().map(|b| b.lo));
    let raw_hi = Array1::from_iter(iv.out.iter().map(|b| b.hi));
    p.output_box(&raw_lo, &raw_hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::concat;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn interval_affine_basic() {
        let layer = Layer {
            w: array![[1.0, -1.0]],
            b: array![0.0],
        };
        let out = interval_affine(&layer, &[Interval::new(0.0, 1.0), Interval::new(0.0, 1.0)]);
        assert_eq!(out[0], Interval::new(-1.0, 1.0));

        let zero = Layer {
            w: Array2::zeros((2, 2)),
            b: array![3.0, -1.0],
        };
        let out = interval_affine(&zero, &[Interval::new(-9.0, 9.0); 2]);
        assert_eq!(out[0], Interval::point(3.0));
        assert_eq!(out[1], Interval::point(-1.0));
    }

    #[test]
    fn interval_relu_cases() {
        assert_eq!(Interval::new(-2.0, 3.0).relu(), Interval::new(0.0, 3.0));
        assert_eq!(Interval::new(-5.0, -1.0).relu(), Interval::new(0.0, 0.0));
        assert_eq!(Interval::new(1.0, 4.0).relu(), Interval::new(1.0, 4.0));
    }

    #[test]
    fn product_interval_cases() {
        let p = product_interval(&[Interval::new(1.0, 2.0)], &[Interval::new(-1.0, 3.0)]);
        assert_eq!(p, Interval::new(-2.0, 6.0));
        let p = product_interval(
            &[Interval::point(0.0), Interval::new(1.0, 2.0)],
            &[Interval::new(-5.0, 5.0), Interval::point(1.0)],
        );
        assert_eq!(p, Interval::new(1.0, 2.0));
    }

    #[test]
    fn interval_affine_monte_carlo_containment() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let layer = Layer {
                w: Array2::from_shape_fn((4, 3), |_| rng.gen_range(-2.0..2.0)),
                b: Array1::from_shape_fn(4, |_| rng.gen_range(-1.0..1.0)),
            };
            let iv: Vec<Interval> = (0..3)
                .map(|_| {
                    let a: f64 = rng.gen_range(-2.0..2.0);
                    let b: f64 = rng.gen_range(-2.0..2.0);
                    Interval::new(a.min(b), a.max(b))
                })
                .collect();
            let out = interval_affine(&layer, &iv);
            for _ in 0..500 {
                let x = Array1::from_shape_fn(3, |j| rng.gen_range(iv[j].lo..=iv[j].hi));
                let y = layer.w.dot(&x) + &layer.b;
                for r in 0..4 {
                    assert!(out[r].contains(y[r], 1e-12));
                }
            }
        }
    }

    fn random_subbox<R: Rng>(b: &Hyperbox, rng: &mut R) -> Hyperbox {
        let a = b.sample(rng);
        let c = b.sample(rng);
        Hyperbox::new(
            ndarray::Zip::from(&a).and(&c).map_collect(|&p, &q| p.min(q)),
            ndarray::Zip::from(&a).and(&c).map_collect(|&p, &q| p.max(q)),
        )
    }

    #[test]
    fn qnet_bounds_zero_u_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut q = QNetwork::new(2, 1, &mut rng);
        for l in &mut q.u_branch.layers {
            l.w.fill(0.0);
            l.b.fill(0.0);
        }
        let xb = Hyperbox::from_slices(&[-1.0, -1.0], &[1.0, 1.0]);
        let ub = Hyperbox::from_slices(&[-1.0], &[1.0]);
        for m in [BoundMethod::Interval, BoundMethod::LinearMccormick] {
            let r = qnet_bounds(&q, &xb, &ub, m);
            assert_eq!(r.q, Interval::point(0.0));
        }
    }

    #[test]
    fn qnet_bounds_soundness_and_refinement() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let state = Hyperbox::from_slices(&[-1.0, -1.0], &[1.0, 1.0]);
        let ctrl = Hyperbox::from_slices(&[-1.0], &[1.0]);
        for _ in 0..50 {
            let q = QNetwork::new(2, 1, &mut rng);
            let xb = random_subbox(&state, &mut rng);
            let ub = random_subbox(&ctrl, &mut rng);
            let ri = qnet_bounds(&q, &xb, &ub, BoundMethod::Interval);
            let rl = qnet_bounds(&q, &xb, &ub, BoundMethod::LinearMccormick);
            assert!(rl.q.lo >= ri.q.lo - 1e-9, "refinement lower");
            assert!(rl.q.hi <= ri.q.hi + 1e-9, "refinement upper");
            for _ in 0..200 {
                let x = xb.sample(&mut rng);
                let u = ub.sample(&mut rng);
                let v = q.forward(&x, &u);
                assert!(ri.q.contains(v, 1e-9));
                assert!(rl.q.contains(v, 1e-9), "{v} not in {:?}", rl.q);
            }
        }
    }

    #[test]
    fn crown_pre_bounds_sound_and_status_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let state = Hyperbox::from_slices(&[-1.0, -1.0, -1.0], &[1.0, 1.0, 1.0]);
        for _ in 0..20 {
            let mlp = Mlp::new(&[3, 8, 8, 2], &mut rng);
            let xb = random_subbox(&state, &mut rng);
            let cr = crown_mlp(&mlp, &box_to_intervals(&xb));
            for _ in 0..500 {
                let x = xb.sample(&mut rng);
                let (_, cache) = mlp.forward_cached(&x);
                for (j, layer) in cache.pre.iter().enumerate() {
                    for (k, &v) in layer.iter().enumerate() {
                        assert!(
                            cr.pre[j][k].contains(v, 1e-9),
                            "layer {j} node {k}: {v} not in {:?}",
                            cr.pre[j][k]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn mccormick_single_coordinate_example() {
        // handcrafted embeddings z1 in [0,1], z2 in [0,1]: the interval bound
        // is [0,1] and the point (0.5, 0.5) with value 0.25 lies inside both.
        let id = LinearBounds {
            a_l: array![[1.0, 0.0]],
            c_l: array![0.0],
            a_u: array![[1.0, 0.0]],
            c_u: array![0.0],
        };
        let id2 = LinearBounds {
            a_l: array![[0.0, 1.0]],
            c_l: array![0.0],
            a_u: array![[0.0, 1.0]],
            c_u: array![0.0],
        };
        let b = [Interval::new(0.0, 1.0)];
        let input = [Interval::new(0.0, 1.0), Interval::new(0.0, 1.0)];
        let mc = mccormick_dot(&id, &b, &id2, &b, &input);
        assert!(mc.contains(0.25, 1e-12));
        assert!(mc.lo >= -1e-12 && mc.hi <= 1.0 + 1e-12);
        // lower envelope at z1=z2=1 forces max(0, z1+z2-1)=1: lo of the
        // envelope over the box is 0
        assert!(mc.lo.abs() < 1e-12);
    }

    #[test]
    fn linear_bound_exact_for_linear_net() {
        // a linear "network" (no active clipping): Q = u over u in [-1, 1]
        // via 1-coordinate embeddings Z1 = 1, Z2 = u.
        let mut q = QNetwork {
            x_branch: Mlp::zeros(&[1, 2, 1]),
            u_branch: Mlp::zeros(&[2, 2, 1]),
        };
        // x branch outputs constant 1
        q.x_branch.layers[1].b[0] = 1.0;
        // u branch: hidden h0 = relu(u + 2) (always on), out = h0 - 2 = u
        q.u_branch.layers[0].w[[0, 1]] = 1.0;
        q.u_branch.layers[0].b[0] = 2.0;
        q.u_branch.layers[1].w[[0, 0]] = 1.0;
        q.u_branch.layers[1].b[0] = -2.0;
        let xb = Hyperbox::from_slices(&[-1.0], &[1.0]);
        let ub = Hyperbox::from_slices(&[-1.0], &[1.0]);
        let r = qnet_bounds(&q, &xb, &ub, BoundMethod::LinearMccormick);
        assert!((r.q.lo + 1.0).abs() < 1e-12, "lo {}", r.q.lo);
        assert!((r.q.hi - 1.0).abs() < 1e-12);
        assert!((min_ia_q(&Critic::Multiplicative(q), &xb, &ub) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn min_ia_below_grid_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..20 {
            let q = QNetwork::new(2, 1, &mut rng);
            let x = array![0.3, -0.2];
            let xb = Hyperbox::point(&x);
            let ub = Hyperbox::from_slices(&[-1.0], &[1.0]);
            let critic = Critic::Multiplicative(q.clone());
            let lb = min_ia_q(&critic, &xb, &ub);
            let grid_min = (0..=1000)
                .map(|i| {
                    let u = array![-1.0 + 2.0 * i as f64 / 1000.0];
                    q.forward(&x, &u)
                })
                .fold(f64::INFINITY, f64::min);
            assert!(lb <= grid_min + 1e-12);
        }
    }

    #[test]
    fn bounds_monotone_on_nested_boxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let q = QNetwork::new(2, 1, &mut rng);
        let mut xb = Hyperbox::from_slices(&[-1.0, -1.0], &[1.0, 1.0]);
        let mut ub = Hyperbox::from_slices(&[-1.0], &[1.0]);
        let mut prev = qnet_bounds(&q, &xb, &ub, BoundMethod::Interval).q;
        for _ in 0..8 {
            // shrink towards the center
            let cx = xb.center();
            let cu = ub.center();
            xb = Hyperbox::new(
                (&xb.lo + &cx) * 0.5,
                (&xb.hi + &cx) * 0.5,
            );
            ub = Hyperbox::new((&ub.lo + &cu) * 0.5, (&ub.hi + &cu) * 0.5);
            let cur = qnet_bounds(&q, &xb, &ub, BoundMethod::Interval).q;
            assert!(cur.lo >= prev.lo - 1e-12 && cur.hi <= prev.hi + 1e-12);
            prev = cur;
        }
    }

    #[test]
    fn status_matches_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let q = QNetwork::new(2, 1, &mut rng);
        let xb = Hyperbox::from_slices(&[-0.5, -0.5], &[0.5, 0.5]);
        let ub = Hyperbox::from_slices(&[-1.0], &[1.0]);
        let r = qnet_bounds(&q, &xb, &ub, BoundMethod::LinearMccormick);
        for _ in 0..1000 {
            let x = xb.sample(&mut rng);
            let u = ub.sample(&mut rng);
            let (_, cache) = q.x_branch.forward_cached(&x);
            for (j, statuses) in r.x_branch.status.iter().enumerate() {
                for (k, s) in statuses.iter().enumerate() {
                    match s {
                        NodeStatus::AlwaysOn => assert!(cache.pre[j][k] >= -1e-12),
                        NodeStatus::AlwaysOff => assert!(cache.pre[j][k] <= 1e-12),
                        NodeStatus::Unstable => {}
                    }
                }
            }
            let xu = concat(&x, &u);
            let (_, cache) = q.u_branch.forward_cached(&xu);
            for (j, statuses) in r.u_branch.status.iter().enumerate() {
                for (k, s) in statuses.iter().enumerate() {
                    match s {
                        NodeStatus::AlwaysOn => assert!(cache.pre[j][k] >= -1e-12),
                        NodeStatus::AlwaysOff => assert!(cache.pre[j][k] <= 1e-12),
                        NodeStatus::Unstable => {}
                    }
                }
            }
        }
    }

    #[test]
    fn dense_critic_bounds_sound() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let c = Critic::new_dense(2, 1, &mut rng);
        let xb = Hyperbox::from_slices(&[-1.0, -1.0], &[1.0, 1.0]);
        let ub = Hyperbox::from_slices(&[-1.0], &[1.0]);
        for m in [BoundMethod::Interval, BoundMethod::LinearMccormick] {
            let b = critic_bounds(&c, &xb, &ub, m);
            for _ in 0..2000 {
                let x = xb.sample(&mut rng);
                let u = ub.sample(&mut rng);
                assert!(b.contains(c.forward(&x, &u), 1e-9));
            }
        }
    }

    #[test]
    fn policy_interval_contains_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let cb = Hyperbox::from_slices(&[-1.0, -1.0], &[1.0, 1.0]);
        let p = PolicyNetwork::new(3, cb, &mut rng);
        let xb = Hyperbox::from_slices(&[-0.3, 0.1, -0.8], &[0.4, 0.6, 0.0]);
        let out = policy_interval(&p, &xb);
        for _ in 0..2000 {
            let x = xb.sample(&mut rng);
            assert!(out.contains(&p.forward(&x), 1e-9));
        }
    }
}
