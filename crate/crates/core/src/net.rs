//! Dense ReLU networks with exact analytic gradients.
//!
//! Three architectures, all 64-bit and fixed:
//! - [`Mlp`]: affine layers with ReLU on hidden layers, identity output.
//! - [`QNetwork`]: the multiplicative critic. A state branch Z1(x) and a
//!   state-control branch Z2(x, u) are joined by a vector inner product,
//!   Q(x, u) = <Z1(x), Z2(x, u)>, which captures the bilinear control term
//!   a plain concatenation network struggles with.
//! - [`PolicyNetwork`]: an Mlp whose output is squashed with tanh and mapped
//!   affinely onto the control box, so pi(x) is feasible by construction.
//!
//! Parameters flatten to a single `Vec<f64>` for the Adam optimizer; the
//! flat order is stable (layer by layer, weights row-major, then bias).

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::Hyperbox;
use crate::{CoreError, Result};

pub const HIDDEN_WIDTH: usize = 32;
pub const EMBED_DIM: usize = 8;

/// One affine layer. Also reused as the gradient container for a layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Layer {
    pub fn zeros(rows: usize, cols: usize) -> Layer {
        Layer {
            w: Array2::zeros((rows, cols)),
            b: Array1::zeros(rows),
        }
    }

    pub fn n_params(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// Feed-forward ReLU network: ReLU after every layer except the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Per-layer pre-activations saved by a cached forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub input: Array1<f64>,
    pub pre: Vec<Array1<f64>>,
}

impl MlpCache {
    /// Post-activation output of layer `j` (ReLU applied unless last).
    fn post(&self, j: usize, n_layers: usize) -> Array1<f64> {
        if j + 1 == n_layers {
            self.pre[j].clone()
        } else {
            self.pre[j].mapv(|v| v.max(0.0))
        }
    }
}

pub type MlpGrads = Vec<Layer>;

impl Mlp {
    /// Kaiming-uniform init; the final layer is scaled down by 0.1 so the
    /// initial outputs stay small.
    pub fn new<R: Rng>(dims: &[usize], rng: &mut R) -> Mlp {
        assert!(dims.len() >= 2);
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|j| {
                let (fan_in, fan_out) = (dims[j], dims[j + 1]);
                let scale = if j + 1 == n { 0.1 } else { 1.0 };
                let wb = (6.0 / fan_in as f64).sqrt() * scale;
                let bb = (1.0 / fan_in as f64).sqrt() * scale;
                Layer {
                    w: Array2::from_shape_fn((fan_out, fan_in), |_| rng.gen_range(-wb..wb)),
                    b: Array1::from_shape_fn(fan_out, |_| rng.gen_range(-bb..bb)),
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn zeros(dims: &[usize]) -> Mlp {
        let layers = (0..dims.len() - 1)
            .map(|j| Layer::zeros(dims[j + 1], dims[j]))
            .collect();
        Mlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.nrows()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.w.nrows()));
        d
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Layer::n_params).sum()
    }

    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        let mut a = x.clone();
        let n = self.layers.len();
        for (j, l) in self.layers.iter().enumerate() {
            a = l.w.dot(&a) + &l.b;
            if j + 1 < n {
                a.mapv_inplace(|v| v.max(0.0));
            }
        }
        a
    }

    pub fn forward_cached(&self, x: &Array1<f64>) -> (Array1<f64>, MlpCache) {
        assert_eq!(x.len(), self.input_dim(), "mlp input dim");
        let n = self.layers.len();
        let mut pre = Vec::with_capacity(n);
        let mut a = x.clone();
        for (j, l) in self.layers.iter().enumerate() {
            let z = l.w.dot(&a) + &l.b;
            pre.push(z.clone());
            a = if j + 1 < n { z.mapv(|v| v.max(0.0)) } else { z };
        }
        (
            a,
            MlpCache {
                input: x.clone(),
                pre,
            },
        )
    }

    /// Exact backprop. `upstream` is dL/d(output); returns parameter
    /// gradients and dL/d(input). ReLU subgradient at 0 is 0.
    pub fn backward(&self, cache: &MlpCache, upstream: &Array1<f64>) -> (MlpGrads, Array1<f64>) {
        let n = self.layers.len();
        let mut grads: MlpGrads = self
            .layers
            .iter()
            .map(|l| Layer::zeros(l.w.nrows(), l.w.ncols()))
            .collect();
        let mut d = upstream.clone();
        for j in (0..n).rev() {
            let act_in = if j == 0 {
                cache.input.clone()
            } else {
                cache.post(j - 1, n)
            };
            for r in 0..d.len() {
                if d[r] != 0.0 {
                    for c in 0..act_in.len() {
                        grads[j].w[[r, c]] += d[r] * act_in[c];
                    }
                }
            }
            grads[j].b += &d;
            let mut dn = self.layers[j].w.t().dot(&d);
            if j > 0 {
                for (k, v) in dn.iter_mut().enumerate() {
                    if cache.pre[j - 1][k] <= 0.0 {
                        *v = 0.0;
                    }
                }
            }
            d = dn;
        }
        (grads, d)
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
    }

    pub fn unflatten_from(&mut self, data: &[f64], pos: &mut usize) {
        for l in &mut self.layers {
            for v in l.w.iter_mut() {
                *v = data[*pos];
                *pos += 1;
            }
            for v in l.b.iter_mut() {
                *v = data[*pos];
                *pos += 1;
            }
        }
    }
}

pub fn flatten_grads(grads: &MlpGrads, out: &mut Vec<f64>) {
    for l in grads {
        out.extend(l.w.iter());
        out.extend(l.b.iter());
    }
}

/// Accumulate `src` into `dst`, elementwise with weight `scale`.
pub fn accumulate_grads(dst: &mut MlpGrads, src: &MlpGrads, scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        d.w.scaled_add(scale, &s.w);
        d.b.scaled_add(scale, &s.b);
    }
}

/// The multiplicative critic: Q(x, u) = <Z1(x), Z2(x, u)>.
#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    pub x_branch: Mlp,
    pub u_branch: Mlp,
}

/// Parameter gradients for a [`QNetwork`].
#[derive(Debug, Clone)]
pub struct QGrads {
    pub x_branch: MlpGrads,
    pub u_branch: MlpGrads,
}

impl QNetwork {
    pub fn new<R: Rng>(state_dim: usize, control_dim: usize, rng: &mut R) -> QNetwork {
        QNetwork {
            x_branch: Mlp::new(&[state_dim, HIDDEN_WIDTH, HIDDEN_WIDTH, EMBED_DIM], rng),
            u_branch: Mlp::new(
                &[state_dim + control_dim, HIDDEN_WIDTH, HIDDEN_WIDTH, EMBED_DIM],
                rng,
            ),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.x_branch.input_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.u_branch.input_dim() - self.x_branch.input_dim()
    }

    pub fn embed_dim(&self) -> usize {
        self.x_branch.output_dim()
    }

    pub fn n_params(&self) -> usize {
        self.x_branch.n_params() + self.u_branch.n_params()
    }

    pub fn forward(&self, x: &Array1<f64>, u: &Array1<f64>) -> f64 {
        let z1 = self.x_branch.forward(x);
        let z2 = self.u_branch.forward(&concat(x, u));
        z1.dot(&z2)
    }

    /// Gradients of `upstream * Q` w.r.t. parameters and inputs.
    ///
    /// The bilinear head follows the product rule: the x-branch sees
    /// upstream * Z2 and the u-branch sees upstream * Z1.
    pub fn backward(
        &self,
        x: &Array1<f64>,
        u: &Array1<f64>,
        upstream: f64,
    ) -> (QGrads, Array1<f64>, Array1<f64>) {
        let xu = concat(x, u);
        let (z1, c1) = self.x_branch.forward_cached(x);
        let (z2, c2) = self.u_branch.forward_cached(&xu);
        let (gx, dx1) = self.x_branch.backward(&c1, &(&z2 * upstream));
        let (gu, dxu) = self.u_branch.backward(&c2, &(&z1 * upstream));
        let m = x.len();
        let dx = &dx1 + &dxu.slice(ndarray::s![..m]);
        let du = dxu.slice(ndarray::s![m..]).to_owned();
        (
            QGrads {
                x_branch: gx,
                u_branch: gu,
            },
            dx,
            du,
        )
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        self.x_branch.flatten_into(&mut v);
        self.u_branch.flatten_into(&mut v);
        v
    }

    pub fn set_from_flat(&mut self, data: &[f64]) {
        let mut pos = 0;
        self.x_branch.unflatten_from(data, &mut pos);
        self.u_branch.unflatten_from(data, &mut pos);
        debug_assert_eq!(pos, data.len());
    }

    pub fn flatten_q_grads(g: &QGrads) -> Vec<f64> {
        let mut v = Vec::new();
        flatten_grads(&g.x_branch, &mut v);
        flatten_grads(&g.u_branch, &mut v);
        v
    }
}

pub fn concat(x: &Array1<f64>, u: &Array1<f64>) -> Array1<f64> {
    Array1::from_iter(x.iter().chain(u.iter()).copied())
}

/// Either critic architecture behind one interface.
#[derive(Debug, Clone)]
pub enum Critic {
    /// The multiplicative two-branch network.
    Multiplicative(QNetwork),
    /// Baseline: fully connected (state_dim + control_dim) -> 32 -> 32 -> 1.
    Dense(Mlp),
}

#[derive(Debug, Clone)]
pub enum CriticGrads {
    Multiplicative(QGrads),
    Dense(MlpGrads),
}

impl Critic {
    pub fn new_multiplicative<R: Rng>(m: usize, n: usize, rng: &mut R) -> Critic {
        Critic::Multiplicative(QNetwork::new(m, n, rng))
    }

    pub fn new_dense<R: Rng>(m: usize, n: usize, rng: &mut R) -> Critic {
        Critic::Dense(Mlp::new(&[m + n, HIDDEN_WIDTH, HIDDEN_WIDTH, 1], rng))
    }

    pub fn forward(&self, x: &Array1<f64>, u: &Array1<f64>) -> f64 {
        match self {
            Critic::Multiplicative(q) => q.forward(x, u),
            Critic::Dense(mlp) => mlp.forward(&concat(x, u))[0],
        }
    }

    pub fn backward(
        &self,
        x: &Array1<f64>,
        u: &Array1<f64>,
        upstream: f64,
    ) -> (CriticGrads, Array1<f64>, Array1<f64>) {
        match self {
            Critic::Multiplicative(q) => {
                let (g, dx, du) = q.backward(x, u, upstream);
                (CriticGrads::Multiplicative(g), dx, du)
            }
            Critic::Dense(mlp) => {
                let xu = concat(x, u);
                let (_, cache) = mlp.forward_cached(&xu);
                let (g, dxu) = mlp.backward(&cache, &Array1::from_vec(vec![upstream]));
                let m = x.len();
                (
                    CriticGrads::Dense(g),
                    dxu.slice(ndarray::s![..m]).to_owned(),
                    dxu.slice(ndarray::s![m..]).to_owned(),
                )
            }
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            Critic::Multiplicative(q) => q.n_params(),
            Critic::Dense(m) => m.n_params(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        match self {
            Critic::Multiplicative(q) => q.flatten(),
            Critic::Dense(m) => {
                let mut v = Vec::with_capacity(m.n_params());
                m.flatten_into(&mut v);
                v
            }
        }
    }

    pub fn set_from_flat(&mut self, data: &[f64]) {
        match self {
            Critic::Multiplicative(q) => q.set_from_flat(data),
            Critic::Dense(m) => {
                let mut pos = 0;
                m.unflatten_from(data, &mut pos);
            }
        }
    }

    pub fn flatten_critic_grads(g: &CriticGrads) -> Vec<f64> {
        match g {
            CriticGrads::Multiplicative(g) => QNetwork::flatten_q_grads(g),
            CriticGrads::Dense(g) => {
                let mut v = Vec::new();
                flatten_grads(g, &mut v);
                v
            }
        }
    }

    pub fn zero_grads(&self) -> CriticGrads {
        match self {
            Critic::Multiplicative(q) => CriticGrads::Multiplicative(QGrads {
                x_branch: zero_like(&q.x_branch),
                u_branch: zero_like(&q.u_branch),
            }),
            Critic::Dense(m) => CriticGrads::Dense(zero_like(m)),
        }
    }
}

pub fn zero_like(mlp: &Mlp) -> MlpGrads {
    mlp.layers
        .iter()
        .map(|l| Layer::zeros(l.w.nrows(), l.w.ncols()))
        .collect()
}

pub fn accumulate_critic_grads(dst: &mut CriticGrads, src: &CriticGrads, scale: f64) {
    match (dst, src) {
        (CriticGrads::Multiplicative(d), CriticGrads::Multiplicative(s)) => {
            accumulate_grads(&mut d.x_branch, &s.x_branch, scale);
            accumulate_grads(&mut d.u_branch, &s.u_branch, scale);
        }
        (CriticGrads::Dense(d), CriticGrads::Dense(s)) => accumulate_grads(d, s, scale),
        _ => panic!("critic gradient architecture mismatch"),
    }
}

/// Policy network: tanh-squashed Mlp mapped onto the control box.
#[derive(Debug, Clone)]
pub struct PolicyNetwork {
    pub net: Mlp,
    pub control_box: Hyperbox,
}

impl PolicyNetwork {
    pub fn new<R: Rng>(state_dim: usize, control_box: Hyperbox, rng: &mut R) -> PolicyNetwork {
        let n = control_box.dim();
        PolicyNetwork {
            net: Mlp::new(&[state_dim, HIDDEN_WIDTH, HIDDEN_WIDTH, n], rng),
            control_box,
        }
    }

    fn squash(&self, raw: &Array1<f64>) -> Array1<f64> {
        Array1::from_iter((0..raw.len()).map(|i| {
            let c = 0.5 * (self.control_box.lo[i] + self.control_box.hi[i]);
            let half = 0.5 * self.control_box.width(i);
            c + half * raw[i].tanh()
        }))
    }

    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        self.squash(&self.net.forward(x))
    }

    /// Backprop `upstream = dL/d(pi(x))` through squash and net.
    pub fn backward(&self, x: &Array1<f64>, upstream: &Array1<f64>) -> (MlpGrads, Array1<f64>) {
        let (raw, cache) = self.net.forward_cached(x);
        let d_raw = Array1::from_iter((0..raw.len()).map(|i| {
            let half = 0.5 * self.control_box.width(i);
            let t = raw[i].tanh();
            upstream[i] * half * (1.0 - t * t)
        }));
        self.net.backward(&cache, &d_raw)
    }

    /// Interval enclosure of pi over a state box (tanh is monotone, so the
    /// squash maps interval endpoints exactly).
    pub fn output_box(&self, raw_lo: &Array1<f64>, raw_hi: &Array1<f64>) -> Hyperbox {
        let lo = Array1::from_iter((0..raw_lo.len()).map(|i| {
            let c = 0.5 * (self.control_box.lo[i] + self.control_box.hi[i]);
            let half = 0.5 * self.control_box.width(i);
            c + half * raw_lo[i].tanh()
        }));
        let hi = Array1::from_iter((0..raw_hi.len()).map(|i| {
            let c = 0.5 * (self.control_box.lo[i] + self.control_box.hi[i]);
            let half = 0.5 * self.control_box.width(i);
            c + half * raw_hi[i].tanh()
        }));
        Hyperbox::new(lo, hi)
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.net.n_params());
        self.net.flatten_into(&mut v);
        v
    }

    pub fn set_from_flat(&mut self, data: &[f64]) {
        let mut pos = 0;
        self.net.unflatten_from(data, &mut pos);
    }
}

/// Standard Adam over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize, lr: f64) -> AdamState {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

// --- model file format -----------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerData {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

/// On-disk model format. JSON with shortest-round-trip floats, so decimal
/// serialization is exact.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelFile {
    Qnet {
        dims: QnetDims,
        layers: Vec<LayerData>,
    },
    Policy {
        dims: Vec<usize>,
        control_box: Hyperbox,
        layers: Vec<LayerData>,
    },
    Baseline {
        dims: Vec<usize>,
        layers: Vec<LayerData>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QnetDims {
    pub x: Vec<usize>,
    pub u: Vec<usize>,
}

fn layer_to_data(l: &Layer) -> LayerData {
    LayerData {
        w: l.w.rows().into_iter().map(|r| r.to_vec()).collect(),
        b: l.b.to_vec(),
    }
}

fn layer_from_data(d: &LayerData) -> Result<Layer> {
    let rows = d.w.len();
    if rows == 0 || rows != d.b.len() {
        return Err(CoreError::InvalidModel("layer row/bias count mismatch".into()));
    }
    let cols = d.w[0].len();
    let mut w = Array2::zeros((rows, cols));
    for (r, row) in d.w.iter().enumerate() {
        if row.len() != cols {
            return Err(CoreError::InvalidModel("ragged weight matrix".into()));
        }
        for (c, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(CoreError::InvalidModel("non-finite weight".into()));
            }
            w[[r, c]] = v;
        }
    }
    if d.b.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::InvalidModel("non-finite bias".into()));
    }
    Ok(Layer {
        w,
        b: Array1::from(d.b.clone()),
    })
}

fn mlp_from_layers(dims: &[usize], data: &[LayerData]) -> Result<Mlp> {
    let layers: Vec<Layer> = data.iter().map(layer_from_data).collect::<Result<_>>()?;
    if layers.len() + 1 != dims.len() {
        return Err(CoreError::InvalidModel("layer count vs dims".into()));
    }
    for (j, l) in layers.iter().enumerate() {
        if l.w.ncols() != dims[j] || l.w.nrows() != dims[j + 1] {
            return Err(CoreError::InvalidModel(format!(
                "layer {j} shape {}x{} does not chain with dims",
                l.w.nrows(),
                l.w.ncols()
            )));
        }
    }
    Ok(Mlp { layers })
}

impl ModelFile {
    pub fn from_qnet(q: &QNetwork) -> ModelFile {
        ModelFile::Qnet {
            dims: QnetDims {
                x: q.x_branch.dims(),
                u: q.u_branch.dims(),
            },
            layers: q
                .x_branch
                .layers
                .iter()
                .chain(q.u_branch.layers.iter())
                .map(layer_to_data)
                .collect(),
        }
    }

    pub fn from_policy(p: &PolicyNetwork) -> ModelFile {
        ModelFile::Policy {
            dims: p.net.dims(),
            control_box: p.control_box.clone(),
            layers: p.net.layers.iter().map(layer_to_data).collect(),
        }
    }

    pub fn from_baseline(m: &Mlp) -> ModelFile {
        ModelFile::Baseline {
            dims: m.dims(),
            layers: m.layers.iter().map(layer_to_data).collect(),
        }
    }

    pub fn from_critic(c: &Critic) -> ModelFile {
        match c {
            Critic::Multiplicative(q) => Self::from_qnet(q),
            Critic::Dense(m) => Self::from_baseline(m),
        }
    }

    pub fn into_qnet(self) -> Result<QNetwork> {
        match self {
            ModelFile::Qnet { dims, layers } => {
                let nx = dims.x.len() - 1;
                let x_branch = mlp_from_layers(&dims.x, &layers[..nx])?;
                let u_branch = mlp_from_layers(&dims.u, &layers[nx..])?;
                if x_branch.output_dim() != u_branch.output_dim() {
                    return Err(CoreError::InvalidModel("branch embed dims differ".into()));
                }
                Ok(QNetwork { x_branch, u_branch })
            }
            _ => Err(CoreError::InvalidModel("expected kind qnet".into())),
        }
    }

    pub fn into_policy(self) -> Result<PolicyNetwork> {
        match self {
            ModelFile::Policy {
                dims,
                control_box,
                layers,
            } => {
                let net = mlp_from_layers(&dims, &layers)?;
                if net.output_dim() != control_box.dim() {
                    return Err(CoreError::InvalidModel(
                        "policy output dim vs control box".into(),
                    ));
                }
                Ok(PolicyNetwork { net, control_box })
            }
            _ => Err(CoreError::InvalidModel("expected kind policy".into())),
        }
    }

    pub fn into_critic(self) -> Result<Critic> {
        match self {
            ModelFile::Qnet { .. } => Ok(Critic::Multiplicative(self.into_qnet()?)),
            ModelFile::Baseline { dims, layers } => {
                Ok(Critic::Dense(mlp_from_layers(&dims, &layers)?))
            }
            ModelFile::Policy { .. } => {
                Err(CoreError::InvalidModel("policy is not a critic".into()))
            }
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        Ok(std::fs::write(path, serde_json::to_string_pretty(self)?)?)
    }

    pub fn load(path: &std::path::Path) -> Result<ModelFile> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arr(v: &[f64]) -> Array1<f64> {
        Array1::from(v.to_vec())
    }

    #[test]
    fn zero_weights_output_is_bias() {
        let mut mlp = Mlp::zeros(&[3, 4, 2]);
        mlp.layers[1].b = arr(&[0.5, -1.5]);
        let out = mlp.forward(&arr(&[1.0, 2.0, 3.0]));
        assert_eq!(out, arr(&[0.5, -1.5]));
    }

    #[test]
    fn relu_clips_negative_hidden() {
        // 1-hidden-layer net with identity weights: hidden ReLU clips -1.
        let mut mlp = Mlp::zeros(&[2, 2, 2]);
        mlp.layers[0].w = Array2::eye(2);
        mlp.layers[1].w = Array2::eye(2);
        let out = mlp.forward(&arr(&[-1.0, 2.0]));
        assert_eq!(out, arr(&[0.0, 2.0]));
    }

    #[test]
    fn forward_matches_scalar_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::new(&[3, 8, 4], &mut rng);
        for _ in 0..20 {
            let x = Array1::from_shape_fn(3, |_| rng.gen_range(-2.0..2.0));
            let out = mlp.forward(&x);
            // scalar loop recomputation
            let mut h = vec![0.0; 8];
            for r in 0..8 {
                let mut s = mlp.layers[0].b[r];
                for c in 0..3 {
                    s += mlp.layers[0].w[[r, c]] * x[c];
                }
                h[r] = s.max(0.0);
            }
            for r in 0..4 {
                let mut s = mlp.layers[1].b[r];
                for c in 0..8 {
                    s += mlp.layers[1].w[[r, c]] * h[c];
                }
                assert!((out[r] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn qnet_zero_u_branch_gives_zero_q_and_zero_x_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut q = QNetwork::new(2, 1, &mut rng);
        for l in &mut q.u_branch.layers {
            l.w.fill(0.0);
            l.b.fill(0.0);
        }
        let x = arr(&[0.3, -0.4]);
        let u = arr(&[0.5]);
        assert_eq!(q.forward(&x, &u), 0.0);
        let (g, _, _) = q.backward(&x, &u, 1.0);
        for l in &g.x_branch {
            assert!(l.w.iter().all(|&v| v == 0.0));
            assert!(l.b.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn qnet_param_count_double_integrator() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = QNetwork::new(2, 1, &mut rng);
        assert_eq!(q.x_branch.n_params(), 1416);
        assert_eq!(q.u_branch.n_params(), 1448);
        assert_eq!(q.n_params(), 2864);
    }

    #[test]
    fn qnet_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let eps = 1e-5;
        for trial in 0..100 {
            let (m, n) = (2 + trial % 3, 1 + trial % 2);
            let q = QNetwork::new(m, n, &mut rng);
            let x = Array1::from_shape_fn(m, |_| rng.gen_range(-1.0..1.0));
            let u = Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0));
            let (g, dx, du) = q.backward(&x, &u, 1.0);
            let flat_g = QNetwork::flatten_q_grads(&g);
            let mut params = q.flatten();
            let mut qc = q.clone();
            // sample a handful of parameter coordinates
            let f0 = q.forward(&x, &u);
            for k in (0..params.len()).step_by(97) {
                let orig = params[k];
                params[k] = orig + eps;
                qc.set_from_flat(&params);
                let fp = qc.forward(&x, &u);
                params[k] = orig - eps;
                qc.set_from_flat(&params);
                let fm = qc.forward(&x, &u);
                params[k] = orig;
                // Q is piecewise affine in a single weight; a nonzero second
                // difference means the fd step straddles a ReLU kink
                if (fp + fm - 2.0 * f0).abs() > 1e-12 {
                    continue;
                }
                let fd = (fp - fm) / (2.0 * eps);
                let err = (flat_g[k] - fd).abs() / flat_g[k].abs().max(fd.abs()).max(1e-4);
                assert!(err < 1e-4, "param {k}: {} vs {}", flat_g[k], fd);
            }
            // input gradients; in x the function is quadratic within an
            // activation pattern, so the kink filter threshold allows the
            // curvature term (~eps^2) but rejects kink crossings (~eps)
            for j in 0..m {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += eps;
                xm[j] -= eps;
                let (fp, fm) = (q.forward(&xp, &u), q.forward(&xm, &u));
                // two-scale kink test: for the (at most quadratic) smooth case
                // the second difference grows exactly 4x with a doubled step
                let mut xp2 = x.clone();
                let mut xm2 = x.clone();
                xp2[j] += 2.0 * eps;
                xm2[j] -= 2.0 * eps;
                let s1 = fp + fm - 2.0 * f0;
                let s2 = q.forward(&xp2, &u) + q.forward(&xm2, &u) - 2.0 * f0;
                if (s2 - 4.0 * s1).abs() > 1e-12 {
                    continue;
                }
                let fd = (fp - fm) / (2.0 * eps);
                let err = (dx[j] - fd).abs() / dx[j].abs().max(fd.abs()).max(1e-4);
                assert!(err < 1e-4);
            }
            for j in 0..n {
                let mut up = u.clone();
                let mut um = u.clone();
                up[j] += eps;
                um[j] -= eps;
                let (fp, fm) = (q.forward(&x, &up), q.forward(&x, &um));
                if (fp + fm - 2.0 * f0).abs() > 1e-12 {
                    continue;
                }
                let fd = (fp - fm) / (2.0 * eps);
                let err = (du[j] - fd).abs() / du[j].abs().max(fd.abs()).max(1e-4);
                assert!(err < 1e-4);
            }
        }
    }

    #[test]
    fn qnet_linear_in_one_factor() {
        // scaling the u-branch final layer by c scales Q by c
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let q = QNetwork::new(2, 1, &mut rng);
        let mut q2 = q.clone();
        let c = 3.7;
        let last = q2.u_branch.layers.last_mut().unwrap();
        last.w *= c;
        last.b *= c;
        let x = arr(&[0.2, -0.6]);
        let u = arr(&[0.4]);
        let (a, b) = (q.forward(&x, &u), q2.forward(&x, &u));
        assert!((b - c * a).abs() < 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn policy_output_always_in_control_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cb = Hyperbox::from_slices(&[-1.0, -0.5], &[1.0, 2.0]);
        for _ in 0..10 {
            let p = PolicyNetwork::new(3, cb.clone(), &mut rng);
            for _ in 0..1000 {
                let x = Array1::from_shape_fn(3, |_| rng.gen_range(-5.0..5.0));
                let u = p.forward(&x);
                assert!(cb.contains(&u, 0.0));
            }
        }
    }

    #[test]
    fn policy_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let cb = Hyperbox::from_slices(&[-1.0], &[1.0]);
        let p = PolicyNetwork::new(2, cb, &mut rng);
        let x = arr(&[0.4, -0.3]);
        let upstream = arr(&[1.0]);
        let (g, _) = p.backward(&x, &upstream);
        let mut flat_g = Vec::new();
        flatten_grads(&g, &mut flat_g);
        let mut params = p.flatten();
        let mut pc = p.clone();
        let eps = 1e-6;
        for k in (0..params.len()).step_by(53) {
            let orig = params[k];
            params[k] = orig + eps;
            pc.set_from_flat(&params);
            let fp = pc.forward(&x)[0];
            params[k] = orig - eps;
            pc.set_from_flat(&params);
            let fm = pc.forward(&x)[0];
            params[k] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let err = (flat_g[k] - fd).abs() / flat_g[k].abs().max(fd.abs()).max(1e-4);
            assert!(err < 1e-4);
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut params = vec![1.0, -2.0, 3.0];
        let mut st = AdamState::new(3, 0.01);
        st.step(&mut params, &[0.0, 0.0, 0.0]);
        assert_eq!(params, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn adam_first_step_magnitude() {
        let mut params = vec![0.0];
        let mut st = AdamState::new(1, 0.01);
        st.step(&mut params, &[4.2]);
        // first Adam step is ~ -lr * sign(g) up to eps
        assert!((params[0] + 0.01).abs() < 1e-5);
    }

    #[test]
    fn adam_matches_reference_trajectory() {
        // independent scalar reference implementation
        let g = [0.3, -1.2, 0.8, 0.8, -0.1, 2.0, 0.0, -0.4, 1.1, 0.6];
        let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
        let mut p_ref = 0.7f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (t, &gt) in g.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * gt;
            v = b2 * v + (1.0 - b2) * gt * gt;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            p_ref -= lr * mh / (vh.sqrt() + eps);
        }
        let mut params = vec![0.7];
        let mut st = AdamState::new(1, lr);
        for &gt in &g {
            st.step(&mut params, &[gt]);
        }
        assert!((params[0] - p_ref).abs() < 1e-10);
    }

    #[test]
    fn model_file_round_trips_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let q = QNetwork::new(3, 1, &mut rng);
        let s = serde_json::to_string(&ModelFile::from_qnet(&q)).unwrap();
        let back: ModelFile = serde_json::from_str(&s).unwrap();
        let q2 = back.into_qnet().unwrap();
        assert_eq!(q, q2);

        let p = PolicyNetwork::new(3, Hyperbox::from_slices(&[-1.0], &[1.0]), &mut rng);
        let s = serde_json::to_string(&ModelFile::from_policy(&p)).unwrap();
        let p2: PolicyNetwork = serde_json::from_str::<ModelFile>(&s)
            .unwrap()
            .into_policy()
            .unwrap();
        assert_eq!(p.net, p2.net);
    }

    #[test]
    fn model_file_rejects_bad_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let q = QNetwork::new(2, 1, &mut rng);
        let mut mf = ModelFile::from_qnet(&q);
        if let ModelFile::Qnet { layers, .. } = &mut mf {
            layers[0].b.pop();
        }
        assert!(mf.into_qnet().is_err());
    }
}
