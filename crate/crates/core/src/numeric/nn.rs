//! Parameter storage and the small layer zoo the models are built from.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Rng, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Uniform `(-bound, bound)` initialisation.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut Rng,
    ) -> ParamId {
        let t = Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.uniform_range(-bound, bound)));
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces every tensor, checking names and shapes line up.
    pub fn load(&mut self, named: Vec<(String, Tensor<T>)>) -> Result<()> {
        if named.len() != self.len() {
            return Err(Error::contract(format!(
                "expected {} parameter tensors, found {}",
                self.len(),
                named.len()
            )));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != self.names[i] || t.shape() != self.tensors[i].shape() {
                return Err(Error::contract(format!(
                    "parameter {i}: expected {} {:?}, found {name} {:?}",
                    self.names[i],
                    self.tensors[i].shape(),
                    t.shape()
                )));
            }
            self.tensors[i] = t;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Puts every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }
}

/// Tape handles of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Elu,
    Relu,
    Tanh,
}

impl Activation {
    fn apply<T: Scalar>(self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        match self {
            Activation::Elu => tape.elu(x),
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Fan-in scaled uniform weights, zero bias.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut Rng,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add_uniform(format!("{name}.weight"), &[in_dim, out_dim], bound, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_dim]));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, p.var(self.weight))?;
        tape.add_bias(h, p.var(self.bias))
    }
}

/// Stack of linear layers with an activation after every hidden layer and,
/// optionally, after the output layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
    pub activate_output: bool,
}

impl Mlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: &[usize],
        activation: Activation,
        activate_output: bool,
        rng: &mut Rng,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp {
            layers,
            activation,
            activate_output,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let cols = tape.value(x).cols();
        if cols != self.in_dim() {
            return Err(Error::shape("mlp", tape.shape(x), &[self.in_dim()]));
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, p, h)?;
            if i < last || self.activate_output {
                h = self.activation.apply(tape, h)?;
            }
        }
        Ok(h)
    }
}

/// Recurrent state of an [`LstmCell`].
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// Standard LSTM cell with gate order (input, forget, cell, output).
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

impl LstmCell {
    /// Forget-gate bias starts at 1.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let weight = store.add_uniform(
            format!("{name}.weight"),
            &[in_dim + hidden, 4 * hidden],
            bound,
            rng,
        );
        let bias = Tensor::from_fn([4 * hidden], |i| {
            if (hidden..2 * hidden).contains(&i) {
                T::one()
            } else {
                T::zero()
            }
        });
        let bias = store.add(format!("{name}.bias"), bias);
        LstmCell {
            weight,
            bias,
            in_dim,
            hidden,
        }
    }

    pub fn zero_state<T: Scalar>(&self, tape: &mut Tape<T>, rows: usize) -> LstmState {
        let z = tape.constant(Tensor::zeros([rows, self.hidden]));
        LstmState { h: z, c: z }
    }

    pub fn step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        state: LstmState,
    ) -> Result<LstmState> {
        let hd = self.hidden;
        let xh = tape.concat_cols(&[x, state.h])?;
        let gates = tape.matmul(xh, p.var(self.weight))?;
        let gates = tape.add_bias(gates, p.var(self.bias))?;
        let i = tape.slice_cols(gates, 0, hd)?;
        let f = tape.slice_cols(gates, hd, hd)?;
        let g = tape.slice_cols(gates, 2 * hd, hd)?;
        let o = tape.slice_cols(gates, 3 * hd, hd)?;
        let i = tape.sigmoid(i)?;
        let f = tape.sigmoid(f)?;
        let g = tape.tanh(g)?;
        let o = tape.sigmoid(o)?;
        let keep = tape.mul(f, state.c)?;
        let write = tape.mul(i, g)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c)?;
        let h = tape.mul(o, tc)?;
        Ok(LstmState { h, c })
    }
}

/// GRU cell, gate order (reset, update, candidate).
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub b_input: ParamId,
    pub b_hidden: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_input = store.add_uniform(format!("{name}.w_input"), &[in_dim, 3 * hidden], bound, rng);
        let w_hidden =
            store.add_uniform(format!("{name}.w_hidden"), &[hidden, 3 * hidden], bound, rng);
        let b_input = store.add(format!("{name}.b_input"), Tensor::zeros([3 * hidden]));
        let b_hidden = store.add(format!("{name}.b_hidden"), Tensor::zeros([3 * hidden]));
        GruCell {
            w_input,
            w_hidden,
            b_input,
            b_hidden,
            in_dim,
            hidden,
        }
    }

    pub fn step<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, h: Var) -> Result<Var> {
        let hd = self.hidden;
        let gi = tape.matmul(x, p.var(self.w_input))?;
        let gi = tape.add_bias(gi, p.var(self.b_input))?;
        let gh = tape.matmul(h, p.var(self.w_hidden))?;
        let gh = tape.add_bias(gh, p.var(self.b_hidden))?;
        let ri = tape.slice_cols(gi, 0, hd)?;
        let rh = tape.slice_cols(gh, 0, hd)?;
        let zi = tape.slice_cols(gi, hd, hd)?;
        let zh = tape.slice_cols(gh, hd, hd)?;
        let ni = tape.slice_cols(gi, 2 * hd, hd)?;
        let nh = tape.slice_cols(gh, 2 * hd, hd)?;
        let r = tape.add(ri, rh)?;
        let r = tape.sigmoid(r)?;
        let z = tape.add(zi, zh)?;
        let z = tape.sigmoid(z)?;
        let rn = tape.mul(r, nh)?;
        let n = tape.add(ni, rn)?;
        let n = tape.tanh(n)?;
        // h' = (1 - z) * n + z * h
        let one_minus_z = tape.affine(z, -1.0, 1.0);
        let a = tape.mul(one_minus_z, n)?;
        let b = tape.mul(z, h)?;
        tape.add(a, b)
    }
}
