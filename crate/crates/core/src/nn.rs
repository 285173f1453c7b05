//! Parameter storage, layer building blocks and the Adam optimizer.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Gradients, Tensor, Var};
use crate::datamodel::matrix_rows;
use crate::error::{Error, Result};

/// Learnable weights of one branch, keyed by layer name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub seed: u64,
    #[serde(with = "param_map")]
    params: BTreeMap<String, Tensor>,
}

impl ModelState {
    pub fn new(seed: u64) -> Self {
        ModelState {
            seed,
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Puts every parameter on the graph. Trainable bindings are gradient
    /// leaves; frozen ones are constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    g.leaf(v.clone())
                } else {
                    g.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters of a [`ModelState`] placed on a [`Graph`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    /// Detached copies of every parameter whose name starts with `prefix`.
    pub fn detached(&self, g: &mut Graph, prefix: &str) -> Bound {
        let vars = self
            .vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, &v)| (k.clone(), g.detach(v)))
            .collect();
        Bound { vars }
    }

    pub fn gradients(&self, grads: &Gradients, state: &ModelState) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(name, &v)| {
                let like = &state.params[name];
                (name.clone(), grads.get_or_zeros(v, like))
            })
            .collect()
    }
}

/// Draws a `fan_in × fan_out` matrix from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn fan_in_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound))
}

pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn init_dense(state: &mut ModelState, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) {
    state.insert(format!("{name}.w"), fan_in_uniform(rng, fan_in, fan_out));
    let bias = fan_in_uniform(rng, fan_in, fan_out).row(0).to_owned().insert_axis(ndarray::Axis(0));
    state.insert(format!("{name}.b"), bias);
}

pub fn dense(g: &mut Graph, bound: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = bound.var(&format!("{name}.w"))?;
    let b = bound.var(&format!("{name}.b"))?;
    let (_, in_dim) = g.shape(x);
    let (w_in, _) = g.shape(w);
    if in_dim != w_in {
        return Err(Error::shape(format!("{name} input dim {w_in}"), in_dim));
    }
    Ok(g.linear(x, w, b))
}

/// Sizes of an MLP: input, hidden layers, output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
}

impl MlpConfig {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>) -> Self {
        MlpConfig {
            input_dim,
            hidden_dims,
            output_dim: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_dim != 2 {
            return Err(Error::config(format!("mlp output_dim must be 2, got {}", self.output_dim)));
        }
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::config("mlp dimensions must be positive"));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

pub fn init_mlp(state: &mut ModelState, rng: &mut ChaCha8Rng, prefix: &str, cfg: &MlpConfig) {
    for (i, (fan_in, fan_out)) in cfg.layer_dims().into_iter().enumerate() {
        init_dense(state, rng, &format!("{prefix}.{i}"), fan_in, fan_out);
    }
}

/// ReLU MLP, linear output layer.
pub fn mlp(g: &mut Graph, bound: &Bound, prefix: &str, cfg: &MlpConfig, x: Var) -> Result<Var> {
    let layers = cfg.hidden_dims.len() + 1;
    let mut h = x;
    for i in 0..layers {
        h = dense(g, bound, &format!("{prefix}.{i}"), h)?;
        if i + 1 < layers {
            h = g.relu(h);
        }
    }
    Ok(h)
}

pub fn init_lstm(state: &mut ModelState, rng: &mut ChaCha8Rng, name: &str, input: usize, hidden: usize) {
    state.insert(format!("{name}.wx"), fan_in_uniform(rng, input, 4 * hidden));
    state.insert(format!("{name}.wh"), fan_in_uniform(rng, hidden, 4 * hidden));
    state.insert(format!("{name}.b"), Tensor::zeros((1, 4 * hidden)));
}

/// LSTM over the rows of `x` (T × input); returns all hidden states (T × hidden).
/// Gate order: input, forget, cell, output.
pub fn lstm(g: &mut Graph, bound: &Bound, name: &str, x: Var) -> Result<Var> {
    let wx = bound.var(&format!("{name}.wx"))?;
    let wh = bound.var(&format!("{name}.wh"))?;
    let b = bound.var(&format!("{name}.b"))?;
    let hidden = g.shape(wh).0;
    let steps = g.shape(x).0;
    if g.shape(x).1 != g.shape(wx).0 {
        return Err(Error::shape(format!("lstm input dim {}", g.shape(wx).0), g.shape(x).1));
    }
    let xw = g.linear(x, wx, b);
    let mut h = g.constant(Tensor::zeros((1, hidden)));
    let mut c = g.constant(Tensor::zeros((1, hidden)));
    let mut outputs = Vec::with_capacity(steps);
    for t in 0..steps {
        let xt = g.row(xw, t);
        let hw = g.matmul(h, wh);
        let gates = g.add(xt, hw);
        let i_pre = g.cols(gates, 0, hidden);
        let f_pre = g.cols(gates, hidden, 2 * hidden);
        let c_pre = g.cols(gates, 2 * hidden, 3 * hidden);
        let o_pre = g.cols(gates, 3 * hidden, 4 * hidden);
        let i = g.sigmoid(i_pre);
        let f = g.sigmoid(f_pre);
        let cand = g.tanh(c_pre);
        let o = g.sigmoid(o_pre);
        let keep = g.mul(f, c);
        let write = g.mul(i, cand);
        c = g.add(keep, write);
        let ct = g.tanh(c);
        h = g.mul(o, ct);
        outputs.push(h);
    }
    Ok(g.concat_rows(&outputs))
}

pub fn init_gru(state: &mut ModelState, rng: &mut ChaCha8Rng, name: &str, input: usize, hidden: usize) {
    state.insert(format!("{name}.wx"), fan_in_uniform(rng, input, 3 * hidden));
    state.insert(format!("{name}.wh"), fan_in_uniform(rng, hidden, 3 * hidden));
    let bx = fan_in_uniform(rng, hidden, 3 * hidden).row(0).to_owned().insert_axis(ndarray::Axis(0));
    let bh = fan_in_uniform(rng, hidden, 3 * hidden).row(0).to_owned().insert_axis(ndarray::Axis(0));
    state.insert(format!("{name}.bx"), bx);
    state.insert(format!("{name}.bh"), bh);
}

/// One GRU step. Gate order: update, reset, candidate.
///
/// `z = σ(x Wz + h Uz)`, `r = σ(x Wr + h Ur)`, `n = tanh(x Wn + r ⊙ (h Un))`,
/// `h' = (1 - z) ⊙ n + z ⊙ h`, biases folded into both products.
pub fn gru_cell(g: &mut Graph, bound: &Bound, name: &str, x_proj: Var, h: Var) -> Result<Var> {
    let wh = bound.var(&format!("{name}.wh"))?;
    let bh = bound.var(&format!("{name}.bh"))?;
    let hidden = g.shape(wh).0;
    let hu = g.linear(h, wh, bh);
    let xz = g.cols(x_proj, 0, hidden);
    let xr = g.cols(x_proj, hidden, 2 * hidden);
    let xn = g.cols(x_proj, 2 * hidden, 3 * hidden);
    let hz = g.cols(hu, 0, hidden);
    let hr = g.cols(hu, hidden, 2 * hidden);
    let hn = g.cols(hu, 2 * hidden, 3 * hidden);
    let z_pre = g.add(xz, hz);
    let z = g.sigmoid(z_pre);
    let r_pre = g.add(xr, hr);
    let r = g.sigmoid(r_pre);
    let gated = g.mul(r, hn);
    let n_pre = g.add(xn, gated);
    let n = g.tanh(n_pre);
    let diff = g.sub(h, n);
    let carry = g.mul(z, diff);
    Ok(g.add(n, carry))
}

/// GRU from a zero initial state; returns the final hidden state (1 × hidden).
pub fn gru(g: &mut Graph, bound: &Bound, name: &str, x: Var) -> Result<Var> {
    let wx = bound.var(&format!("{name}.wx"))?;
    let bx = bound.var(&format!("{name}.bx"))?;
    let hidden = g.shape(wx).1 / 3;
    let (steps, in_dim) = g.shape(x);
    if steps == 0 {
        return Err(Error::invalid("gru needs at least one step"));
    }
    if in_dim != g.shape(wx).0 {
        return Err(Error::shape(format!("gru input dim {}", g.shape(wx).0), in_dim));
    }
    let xw = g.linear(x, wx, bx);
    let mut h = g.constant(Tensor::zeros((1, hidden)));
    for t in 0..steps {
        let xt = g.row(xw, t);
        h = gru_cell(g, bound, name, xt, h)?;
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for one [`ModelState`].
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: i32,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, state: &mut ModelState, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        for (name, param) in state.iter_mut() {
            let Some(grad) = grads.get(name) else { continue };
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(param.raw_dim()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(param.raw_dim()));
            ndarray::Zip::from(param)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|p, m, v, &g| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= c.learning_rate * mhat / (vhat.sqrt() + c.eps);
                });
        }
    }
}

mod param_map {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry(#[serde(with = "matrix_rows")] Tensor);

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<String, Tensor>,
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        let m: BTreeMap<&String, Entry> = map.iter().map(|(k, v)| (k, Entry(v.clone()))).collect();
        m.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<BTreeMap<String, Tensor>, D::Error> {
        let m: BTreeMap<String, Entry> = BTreeMap::deserialize(d)?;
        Ok(m.into_iter().map(|(k, v)| (k, v.0)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn mlp_output_shape_and_zero_last_layer() {
        let cfg = MlpConfig::new(3, vec![4, 4]);
        let mut state = ModelState::new(7);
        init_mlp(&mut state, &mut seeded_rng(7, 0), "m", &cfg);
        state.insert("m.2.w", Tensor::zeros((4, 2)));
        state.insert("m.2.b", array![[0.25, -0.5]]);
        let mut g = Graph::new();
        let bound = state.bind(&mut g, false);
        let x = g.constant(array![[1.0, 2.0, 3.0], [-1.0, 0.0, 9.0]]);
        let y = mlp(&mut g, &bound, "m", &cfg, x).unwrap();
        assert_eq!(g.value(y), &array![[0.25, -0.5], [0.25, -0.5]]);
    }

    #[test]
    fn dense_rejects_wrong_input_dim() {
        let mut state = ModelState::new(0);
        init_dense(&mut state, &mut seeded_rng(0, 0), "d", 3, 2);
        let mut g = Graph::new();
        let bound = state.bind(&mut g, true);
        let x = g.constant(Tensor::zeros((1, 4)));
        assert!(matches!(dense(&mut g, &bound, "d", x), Err(Error::Shape { .. })));
    }

    #[test]
    fn gru_rejects_empty_sequence() {
        let mut state = ModelState::new(0);
        init_gru(&mut state, &mut seeded_rng(0, 0), "gru", 3, 2);
        let mut g = Graph::new();
        let bound = state.bind(&mut g, false);
        let x = g.constant(Tensor::zeros((0, 3)));
        assert!(gru(&mut g, &bound, "gru", x).is_err());
    }

    #[test]
    fn single_step_gru_matches_hand_evaluation() {
        let mut state = ModelState::new(0);
        init_gru(&mut state, &mut seeded_rng(3, 0), "gru", 2, 1);
        let x = array![[0.3, -0.7]];
        let mut g = Graph::new();
        let bound = state.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let h = gru(&mut g, &bound, "gru", xv).unwrap();
        let out = g.value(h)[[0, 0]];

        let wx = state.get("gru.wx").unwrap();
        let bx = state.get("gru.bx").unwrap();
        let bh = state.get("gru.bh").unwrap();
        let xp = x.dot(wx) + bx;
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        // zero previous state: h·U vanishes, only the recurrent biases remain
        let z = sig(xp[[0, 0]] + bh[[0, 0]]);
        let r = sig(xp[[0, 1]] + bh[[0, 1]]);
        let n = (xp[[0, 2]] + r * bh[[0, 2]]).tanh();
        let expected = (1.0 - z) * n;
        assert!((out - expected).abs() < 1e-12);
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut state = ModelState::new(0);
        state.insert("x", array![[3.0, -2.0]]);
        let mut opt = Adam::new(AdamConfig::with_lr(0.1));
        for _ in 0..500 {
            let mut g = Graph::new();
            let bound = state.bind(&mut g, true);
            let x = bound.var("x").unwrap();
            let sq = g.mul(x, x);
            let loss = g.sum_all(sq);
            let grads = bound.gradients(&g.backward(loss), &state);
            opt.step(&mut state, &grads);
        }
        assert!(state.get("x").unwrap().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn state_json_roundtrip() {
        let mut state = ModelState::new(11);
        init_mlp(&mut state, &mut seeded_rng(11, 0), "m", &MlpConfig::new(2, vec![3]));
        let json = serde_json::to_string(&state).unwrap();
        let back: ModelState = serde_json::from_str(&json).unwrap();
        assert_eq!(back, state);
    }
}
