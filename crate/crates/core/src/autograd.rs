//! Define-by-run reverse-mode differentiation.
//!
//! Every forward pass records onto a fresh [`Tape`]. Operations compute their
//! value eagerly and append a record holding whatever the backward rule
//! needs. [`Tape::backward`] then walks the records once, newest first,
//! accumulating gradients into each input. A tape can be swept only once;
//! a second sweep, or recording onto a swept tape, is a usage error.
//!
//! ```
//! use mdmlp::autograd::Tape;
//! use mdmlp::tensor::Tensor;
//!
//! let tape = Tape::<f64>::new();
//! let w = tape.leaf(Tensor::scalar(3.0), true).unwrap();
//! let sq = tape.mul(w, w).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(w).unwrap().data(), &[6.0]);
//! ```

use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{self, Mode};
use crate::params::{ParamId, ParamStore};
use crate::patch::{extract_overlapping_patches, scatter_patches, PatchGeometry};
use crate::tensor::{inverse_permutation, linear_input_grad, linear_param_grads, Scalar, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Linear { x: usize, w: usize, b: usize, axis: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Tensor<T>, rstd: Vec<T> },
    Gelu(usize),
    Dropout(usize, Tensor<T>),
    Mean(usize, Vec<usize>),
    Sum(usize),
    Patches(usize, PatchGeometry),
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Tensor<T> },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    param: Option<ParamId>,
    op: Op<T>,
}

pub struct Tape<T: Scalar> {
    id: u64,
    nodes: RefCell<Vec<Node<T>>>,
    swept: Cell<bool>,
    notes: RefCell<Vec<String>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            swept: Cell::new(false),
            notes: RefCell::new(Vec::new()),
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::Usage("variable belongs to a different tape context".into()));
        }
        Ok(v.index)
    }

    fn push(&self, value: Tensor<T>, requires_grad: bool, param: Option<ParamId>, op: Op<T>) -> Result<Var> {
        if self.swept.get() {
            return Err(Error::Usage("tape already swept; record a new forward pass".into()));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), requires_grad, param, op: if requires_grad { op } else { Op::Leaf } });
        Ok(Var { tape: self.id, index: nodes.len() - 1 })
    }

    fn val(&self, i: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[i].value)
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes.borrow()[i].requires_grad
    }

    fn note(&self, msg: impl Into<String>) {
        let msg = msg.into();
        let mut notes = self.notes.borrow_mut();
        if !notes.contains(&msg) {
            notes.push(msg);
        }
    }

    /// Conditions recorded during forward that make finite differences
    /// unreliable (zero-variance normalization, active dropout).
    pub fn notes(&self) -> Vec<String> {
        self.notes.borrow().clone()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, requires_grad, None, Op::Leaf)
    }

    pub fn constant(&self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Records a trainable parameter as a gradient-tracking leaf.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        self.push(store.get(id).clone(), true, Some(id), Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Result<Rc<Tensor<T>>> {
        let i = self.check(v)?;
        Ok(self.val(i))
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        let i = self.check(v)?;
        Ok(self.needs(i))
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        f: impl Fn(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>,
        op: fn(usize, usize) -> Op<T>,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = f(&self.val(ia), &self.val(ib))?;
        let g = self.needs(ia) || self.needs(ib);
        self.push(out, g, None, op(ia, ib))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Tensor::add, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Tensor::sub, Op::Sub)
    }

    /// Elementwise product with broadcasting of size-1 axes.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Tensor::mul, Op::Mul)
    }

    pub fn scale(&self, a: Var, s: f64) -> Result<Var> {
        let i = self.check(a)?;
        let s = T::of(s);
        let out = self.val(i).scale(s);
        self.push(out, self.needs(i), None, Op::Scale(i, s))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Result<Var> {
        let i = self.check(a)?;
        let out = self.val(i).add_scalar(T::of(s));
        self.push(out, self.needs(i), None, Op::AddScalar(i))
    }

    pub fn permute(&self, a: Var, axes: &[usize]) -> Result<Var> {
        let i = self.check(a)?;
        let out = self.val(i).permute(axes)?;
        self.push(out, self.needs(i), None, Op::Permute(i, axes.to_vec()))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let i = self.check(a)?;
        let out = self.val(i).reshape(shape)?;
        self.push(out, self.needs(i), None, Op::Reshape(i))
    }

    /// `x · wᵀ + b` over the last axis.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let rank = self.check(x).map(|i| self.val(i).rank())?;
        self.linear_along(x, w, b, rank.saturating_sub(1))
    }

    /// `w · v + b` for every fibre `v` of `x` along `axis`.
    pub fn linear_along(&self, x: Var, w: Var, b: Var, axis: usize) -> Result<Var> {
        let (ix, iw, ib) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let out = self.val(ix).linear_along(&self.val(iw), &self.val(ib), axis)?;
        let g = self.needs(ix) || self.needs(iw) || self.needs(ib);
        self.push(out, g, None, Op::Linear { x: ix, w: iw, b: ib, axis })
    }

    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let out = nn::layer_norm_forward(&self.val(ix), &self.val(ig), &self.val(ib), T::of(eps))?;
        if out.degenerate {
            self.note("layernorm: zero-variance slice");
        }
        let g = self.needs(ix) || self.needs(ig) || self.needs(ib);
        self.push(out.y, g, None, Op::LayerNorm { x: ix, gamma: ig, beta: ib, xhat: out.xhat, rstd: out.rstd })
    }

    pub fn gelu(&self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let out = nn::gelu(&self.val(i));
        self.push(out, self.needs(i), None, Op::Gelu(i))
    }

    /// Inverted dropout. Identity in eval mode or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(&self, x: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        let i = self.check(x)?;
        nn::check_dropout_rate(rate)?;
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        self.note("dropout: active in train mode");
        let xv = self.val(i);
        let mask = nn::dropout_mask(xv.shape(), rate, rng)?;
        let out = xv.mul(&mask)?;
        self.push(out, self.needs(i), None, Op::Dropout(i, mask))
    }

    pub fn mean(&self, x: Var, axes: &[usize]) -> Result<Var> {
        let i = self.check(x)?;
        let out = self.val(i).mean_over_axes(axes)?;
        self.push(out, self.needs(i), None, Op::Mean(i, axes.to_vec()))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let out = Tensor::scalar(self.val(i).sum());
        self.push(out, self.needs(i), None, Op::Sum(i))
    }

    pub fn patches(&self, x: Var, geom: &PatchGeometry) -> Result<Var> {
        let i = self.check(x)?;
        let out = extract_overlapping_patches(&self.val(i), geom)?;
        self.push(out, self.needs(i), None, Op::Patches(i, *geom))
    }

    /// Mean softmax cross-entropy of `B × K` logits against class labels.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let i = self.check(logits)?;
        let (loss, probs) = nn::softmax_cross_entropy(&self.val(i), labels)?;
        self.push(
            Tensor::scalar(loss),
            self.needs(i),
            None,
            Op::CrossEntropy { logits: i, labels: labels.to_vec(), probs },
        )
    }

    /// Reverse sweep from a scalar-shaped `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.check(loss)?;
        if self.swept.replace(true) {
            return Err(Error::Usage("backward called twice on the same tape".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[root].value.shape().iter().any(|&e| e != 1) {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(Tensor::ones(nodes[root].value.shape())?);

        fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], i: usize, g: Tensor<T>) -> Result<()> {
            match &mut grads[i] {
                Some(existing) => existing.accumulate(&g),
                slot => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        }

        for i in (0..=root).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let need = |j: usize| nodes[j].requires_grad;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    if need(*a) {
                        acc(&mut grads, *a, g.sum_to_shape(nodes[*a].value.shape())?)?;
                    }
                    if need(*b) {
                        acc(&mut grads, *b, g.sum_to_shape(nodes[*b].value.shape())?)?;
                    }
                }
                Op::Sub(a, b) => {
                    if need(*a) {
                        acc(&mut grads, *a, g.sum_to_shape(nodes[*a].value.shape())?)?;
                    }
                    if need(*b) {
                        let gb = g.scale(-T::one());
                        acc(&mut grads, *b, gb.sum_to_shape(nodes[*b].value.shape())?)?;
                    }
                }
                Op::Mul(a, b) => {
                    if need(*a) {
                        let ga = g.mul(&nodes[*b].value)?;
                        acc(&mut grads, *a, ga.sum_to_shape(nodes[*a].value.shape())?)?;
                    }
                    if need(*b) {
                        let gb = g.mul(&nodes[*a].value)?;
                        acc(&mut grads, *b, gb.sum_to_shape(nodes[*b].value.shape())?)?;
                    }
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.scale(*s))?,
                Op::AddScalar(a) => acc(&mut grads, *a, g)?,
                Op::Permute(a, axes) => acc(&mut grads, *a, g.permute(&inverse_permutation(axes))?)?,
                Op::Reshape(a) => acc(&mut grads, *a, g.reshape(nodes[*a].value.shape())?)?,
                Op::Linear { x, w, b, axis } => {
                    let wv = &nodes[*w].value;
                    if need(*x) {
                        acc(&mut grads, *x, linear_input_grad(&g, wv, *axis))?;
                    }
                    if need(*w) || need(*b) {
                        let (dw, db) = linear_param_grads(&g, &nodes[*x].value, wv.shape()[0], wv.shape()[1], *axis);
                        if need(*w) {
                            acc(&mut grads, *w, dw)?;
                        }
                        if need(*b) {
                            acc(&mut grads, *b, db)?;
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let (dx, dgamma, dbeta) = nn::layer_norm_backward(&g, xhat, rstd, &nodes[*gamma].value)?;
                    if need(*x) {
                        acc(&mut grads, *x, dx)?;
                    }
                    if need(*gamma) {
                        acc(&mut grads, *gamma, dgamma)?;
                    }
                    if need(*beta) {
                        acc(&mut grads, *beta, dbeta)?;
                    }
                }
                Op::Gelu(a) => acc(&mut grads, *a, nn::gelu_backward(&nodes[*a].value, &g)?)?,
                Op::Dropout(a, mask) => acc(&mut grads, *a, g.mul(mask)?)?,
                Op::Mean(a, axes) => {
                    let src = nodes[*a].value.shape();
                    let count: usize = axes.iter().map(|&ax| src[ax]).product();
                    let keep: Vec<usize> =
                        (0..src.len()).map(|ax| if axes.contains(&ax) { 1 } else { src[ax] }).collect();
                    let spread = g.reshape(&keep)?.scale(T::one() / T::of(count as f64));
                    let full = Tensor::zeros(src)?.add(&spread)?;
                    acc(&mut grads, *a, full)?;
                }
                Op::Sum(a) => {
                    let gv = g.item()?;
                    acc(&mut grads, *a, Tensor::full(nodes[*a].value.shape(), gv)?)?;
                }
                Op::Patches(a, geom) => acc(&mut grads, *a, scatter_patches(&g, geom, nodes[*a].value.shape())?)?,
                Op::CrossEntropy { logits, labels, probs } => {
                    let k = probs.shape()[1];
                    let batch = labels.len();
                    let gv = g.item()? / T::of(batch as f64);
                    let mut d = probs.clone();
                    for (r, &l) in labels.iter().enumerate() {
                        d.data_mut()[r * k + l] -= T::one();
                    }
                    acc(&mut grads, *logits, d.scale(gv))?;
                }
            }
        }

        let mut out = Gradients { params: BTreeMap::new(), leaves: HashMap::new() };
        for (i, node) in nodes.iter().enumerate() {
            if !node.requires_grad || !matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = match grads.get_mut(i).and_then(Option::take) {
                Some(g) => g,
                None => Tensor::zeros_like(&node.value),
            };
            if let Some(id) = node.param {
                match out.params.get_mut(&id) {
                    Some(existing) => existing.accumulate(&g)?,
                    None => {
                        out.params.insert(id, g.clone());
                    }
                }
            }
            out.leaves.insert(i, g);
        }
        Ok(out)
    }
}

/// Result of a backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    params: BTreeMap<ParamId, Tensor<T>>,
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    /// Gradient of any gradient-tracking leaf recorded on the swept tape.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.index)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    /// Adds another sweep's parameter gradients into this one.
    pub fn accumulate(&mut self, other: &Gradients<T>) -> Result<()> {
        for (id, g) in &other.params {
            match self.params.get_mut(id) {
                Some(existing) => existing.accumulate(g)?,
                None => {
                    self.params.insert(*id, g.clone());
                }
            }
        }
        Ok(())
    }

    /// Drops per-leaf gradients, keeping only those keyed by parameter.
    pub fn into_param_grads(self) -> Gradients<T> {
        Gradients { params: self.params, leaves: HashMap::new() }
    }
}
