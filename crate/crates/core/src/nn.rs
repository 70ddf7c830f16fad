//! Parameter storage, layer building blocks and the optimizer.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Element, Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Named parameter tensors in a deterministic (sorted) order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<E: Element = f32> {
    tensors: BTreeMap<String, Tensor<E>>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<E>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<E>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<E>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<E>)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Checks that `self` holds exactly the tensors (names and shapes) of `reference`.
    pub fn check_layout(&self, reference: &ParamStore<E>, what: &str) -> Result<()> {
        if self.tensors.len() != reference.tensors.len() {
            return Err(Error::config(format!(
                "{what}: expected {} parameter tensors, found {}",
                reference.tensors.len(),
                self.tensors.len()
            )));
        }
        for (name, t) in &reference.tensors {
            match self.tensors.get(name) {
                Some(v) if v.shape() == t.shape() => {}
                Some(v) => {
                    return Err(Error::config(format!(
                        "{what}: parameter {name} has shape {:?}, expected {:?}",
                        v.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::config(format!("{what}: missing parameter {name}"))),
            }
        }
        Ok(())
    }
}

/// Parameters of one network together with the layout version they were
/// created for.
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams<E: Element = f32> {
    pub version: u32,
    pub store: ParamStore<E>,
}

impl<E: Element> NetParams<E> {
    pub fn new(version: u32, store: ParamStore<E>) -> Self {
        Self { version, store }
    }

    pub fn cast<F: Element>(&self) -> NetParams<F> {
        NetParams {
            version: self.version,
            store: self.store.cast(),
        }
    }

    /// SHA-256 over version, names, shapes and little-endian `f32` values.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.version.to_le_bytes());
        for (name, t) in self.store.iter() {
            h.update(name.as_bytes());
            h.update([0]);
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Fails unless `self` has the version and tensor layout of `reference`.
    pub fn check_against(&self, reference: &NetParams<E>, what: &str) -> Result<()> {
        if self.version != reference.version {
            return Err(Error::config(format!(
                "{what}: parameter version {} does not match architecture version {}",
                self.version, reference.version
            )));
        }
        self.store.check_layout(&reference.store, what)
    }
}

/// Lazily binds parameters of a store onto a tape.
///
/// Each name is bound at most once, so a parameter used several times in one
/// graph accumulates a single gradient.
pub struct Binder<'t, 's, E: Element> {
    tape: &'t Tape<E>,
    store: &'s ParamStore<E>,
    trainable: bool,
    bound: RefCell<BTreeMap<String, Var<'t, E>>>,
}

impl<'t, 's, E: Element> Binder<'t, 's, E> {
    /// Parameters become tracked leaves; their gradients are collectable.
    pub fn trainable(tape: &'t Tape<E>, store: &'s ParamStore<E>) -> Self {
        Self::new(tape, store, true)
    }

    /// Parameters enter the graph as constants. Gradients still flow through
    /// the layers to their inputs.
    pub fn frozen(tape: &'t Tape<E>, store: &'s ParamStore<E>) -> Self {
        Self::new(tape, store, false)
    }

    fn new(tape: &'t Tape<E>, store: &'s ParamStore<E>, trainable: bool) -> Self {
        Self {
            tape,
            store,
            trainable,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape<E> {
        self.tape
    }

    pub fn param(&self, name: &str) -> Var<'t, E> {
        if let Some(v) = self.bound.borrow().get(name) {
            return v.clone();
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not in store"))
            .clone();
        let var = if self.trainable {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.borrow_mut().insert(name.to_string(), var.clone());
        var
    }

    /// Gradients of every store entry; entries unused by the graph get zeros.
    pub fn gradients(&self, grads: &Gradients<E>) -> BTreeMap<String, Tensor<E>> {
        let bound = self.bound.borrow();
        self.store
            .iter()
            .map(|(name, t)| {
                let g = bound
                    .get(name)
                    .and_then(|v| grads.get(v))
                    .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
                (name.clone(), g)
            })
            .collect()
    }
}

fn uniform<E: Element, R: Rng>(shape: Vec<usize>, bound: f64, rng: &mut R) -> Tensor<E> {
    Tensor::from_fn(shape, |_| E::lit(rng.random_range(-bound..=bound)))
}

/// Kaiming-uniform bound for leaky-ReLU networks.
fn kaiming_bound(fan_in: usize, slope: f64) -> f64 {
    let gain = (2.0 / (1.0 + slope * slope)).sqrt();
    gain * (3.0 / fan_in as f64).sqrt()
}

pub const LEAK: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        Self {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
            stride,
        }
    }

    fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<E: Element, R: Rng>(&self, store: &mut ParamStore<E>, gain_scale: f64, rng: &mut R) {
        let fan_in = self.in_ch * self.kernel * self.kernel;
        let bound = kaiming_bound(fan_in, LEAK) * gain_scale;
        store.insert(
            self.weight_name(),
            uniform(vec![self.out_ch, self.in_ch, self.kernel, self.kernel], bound, rng),
        );
        store.insert(self.bias_name(), Tensor::zeros(vec![self.out_ch]));
    }

    /// "Same" padding for odd kernels; stride 2 halves even extents.
    pub fn forward<'t, E: Element>(&self, p: &Binder<'t, '_, E>, x: &Var<'t, E>) -> Var<'t, E> {
        let w = p.param(&self.weight_name());
        let b = p.param(&self.bias_name());
        x.conv2d(&w, self.stride, self.kernel / 2).add_bias(&b)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Self {
            name: name.into(),
            in_dim,
            out_dim,
        }
    }

    pub fn init<E: Element, R: Rng>(&self, store: &mut ParamStore<E>, gain_scale: f64, rng: &mut R) {
        let bound = kaiming_bound(self.in_dim, LEAK) * gain_scale;
        store.insert(
            format!("{}.weight", self.name),
            uniform(vec![self.out_dim, self.in_dim], bound, rng),
        );
        store.insert(format!("{}.bias", self.name), Tensor::zeros(vec![self.out_dim]));
    }

    pub fn forward<'t, E: Element>(&self, p: &Binder<'t, '_, E>, x: &Var<'t, E>) -> Var<'t, E> {
        let w = p.param(&format!("{}.weight", self.name));
        let b = p.param(&format!("{}.bias", self.name));
        x.linear(&w, Some(&b))
    }
}

/// Single-layer LSTM cell (gate order: input, forget, cell, output).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LstmCell {
    pub name: String,
    pub input: usize,
    pub hidden: usize,
}

#[derive(Clone)]
pub struct LstmState<'t, E: Element> {
    pub h: Var<'t, E>,
    pub c: Var<'t, E>,
}

impl LstmCell {
    pub fn new(name: impl Into<String>, input: usize, hidden: usize) -> Self {
        Self {
            name: name.into(),
            input,
            hidden,
        }
    }

    pub fn init<E: Element, R: Rng>(&self, store: &mut ParamStore<E>, rng: &mut R) {
        let bound = 1.0 / (self.hidden as f64).sqrt();
        let h4 = 4 * self.hidden;
        store.insert(
            format!("{}.w_ih", self.name),
            uniform(vec![h4, self.input], bound, rng),
        );
        store.insert(
            format!("{}.w_hh", self.name),
            uniform(vec![h4, self.hidden], bound, rng),
        );
        // Forget gate starts open.
        let bias = Tensor::from_fn(vec![h4], |i| {
            if (self.hidden..2 * self.hidden).contains(&i) {
                E::one()
            } else {
                E::zero()
            }
        });
        store.insert(format!("{}.bias", self.name), bias);
    }

    pub fn zero_state<'t, E: Element>(&self, tape: &'t Tape<E>, batch: usize) -> LstmState<'t, E> {
        LstmState {
            h: tape.constant(Tensor::zeros(vec![batch, self.hidden])),
            c: tape.constant(Tensor::zeros(vec![batch, self.hidden])),
        }
    }

    pub fn step<'t, E: Element>(
        &self,
        p: &Binder<'t, '_, E>,
        x: &Var<'t, E>,
        state: &LstmState<'t, E>,
    ) -> LstmState<'t, E> {
        let w_ih = p.param(&format!("{}.w_ih", self.name));
        let w_hh = p.param(&format!("{}.w_hh", self.name));
        let bias = p.param(&format!("{}.bias", self.name));
        let gates = x
            .linear(&w_ih, Some(&bias))
            .add(&state.h.linear(&w_hh, None));
        let hd = self.hidden;
        let i = gates.narrow(1, 0, hd).sigmoid();
        let f = gates.narrow(1, hd, hd).sigmoid();
        let g = gates.narrow(1, 2 * hd, hd).tanh();
        let o = gates.narrow(1, 3 * hd, hd).sigmoid();
        let c = f.mul(&state.c).add(&i.mul(&g));
        let h = o.mul(&c.tanh());
        LstmState { h, c }
    }
}

/// Step-wise exponential learning-rate decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub initial: f64,
    pub factor: f64,
    pub every: u64,
}

impl StepDecay {
    pub fn rate_at(&self, step: u64) -> f64 {
        self.initial * self.factor.powi((step / self.every.max(1)) as i32)
    }
}

/// Adam with bias correction and no weight decay.
#[derive(Clone, Debug)]
pub struct Adam<E: Element = f32> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: u64,
    first: BTreeMap<String, Vec<E>>,
    second: BTreeMap<String, Vec<E>>,
}

impl<E: Element> Adam<E> {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            steps: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn update(
        &mut self,
        store: &mut ParamStore<E>,
        grads: &BTreeMap<String, Tensor<E>>,
        lr: f64,
    ) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (E::lit(self.beta1), E::lit(self.beta2));
        let step = E::lit(lr * c2.sqrt() / c1);
        let eps = E::lit(self.eps * c2.sqrt());
        for (name, g) in grads {
            let Some(param) = store.get_mut(name) else {
                continue;
            };
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| vec![E::zero(); g.len()]);
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| vec![E::zero(); g.len()]);
            for (((p, &gi), mi), vi) in param
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (E::one() - b1) * gi;
                *vi = b2 * *vi + (E::one() - b2) * gi * gi;
                *p -= step * *mi / (vi.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn step_decay_hits_each_boundary() {
        let s = StepDecay {
            initial: 1e-4,
            factor: 0.95,
            every: 20_000,
        };
        assert_eq!(s.rate_at(0), 1e-4);
        assert_eq!(s.rate_at(19_999), 1e-4);
        assert!((s.rate_at(20_000) - 0.95e-4).abs() < 1e-18);
        assert!((s.rate_at(40_000) - 0.95 * 0.95e-4).abs() < 1e-18);
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        store.insert("x", Tensor::new([2], vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(0.9, 0.999);
        for _ in 0..2000 {
            let tape = Tape::new();
            let p = Binder::trainable(&tape, &store);
            let x = p.param("x");
            let loss = x.add_scalar(-1.0).sqr().sum_all();
            let g = tape.backward(&loss);
            let grads = p.gradients(&g);
            opt.update(&mut store, &grads, 0.01);
        }
        let x = store.get("x").unwrap();
        assert!((x.data()[0] - 1.0).abs() < 1e-3 && (x.data()[1] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn lstm_cell_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = LstmCell::new("enc", 3, 5);
        let mut store = ParamStore::<f32>::new();
        cell.init(&mut store, &mut rng);
        let tape = Tape::new();
        let p = Binder::frozen(&tape, &store);
        let x = tape.constant(Tensor::zeros([2, 3]));
        let s = cell.step(&p, &x, &cell.zero_state(&tape, 2));
        assert_eq!(s.h.shape(), &[2, 5]);
        assert_eq!(s.c.shape(), &[2, 5]);
    }

    #[test]
    fn layout_check_reports_shape_mismatch() {
        let mut a = ParamStore::<f32>::new();
        a.insert("w", Tensor::zeros([2, 2]));
        let mut b = ParamStore::<f32>::new();
        b.insert("w", Tensor::zeros([3, 2]));
        assert!(a.check_layout(&a.clone(), "a").is_ok());
        assert!(b.check_layout(&a, "b").is_err());
    }
}
