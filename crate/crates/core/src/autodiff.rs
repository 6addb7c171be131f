//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation performed on tracked values. Scalars
//! ([`DiffScalar`]) and sample buffers ([`DiffBuffer`]) are both nodes on the
//! tape; buffer operations record a single adjoint closure instead of one
//! node per sample, so a one-second render costs a handful of nodes.
//!
//! Values that were never derived from a registered parameter carry no node
//! and are free: operations on them are computed eagerly and nothing is
//! recorded.
//!
//! ```
//! use modsynth_core::autodiff::Tape;
//!
//! let tape = Tape::new();
//! let p = tape.parameter("p", 3.0).unwrap();
//! let y = p * p;
//! let grads = tape.backward(&y).unwrap();
//! assert_eq!(grads.get("p"), Some(6.0));
//! ```

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::fmt;
use core::ops::{Add, Div, Mul, Neg, Sub};

use crate::error::{Error, Result};

/// Index of a node on a [`Tape`].
pub type NodeId = usize;

type BackwardFn = Box<dyn Fn(&[f64], &mut Adjoints) + Send>;

struct Node {
    len: usize,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
}

/// Recording context for one differentiable computation.
///
/// A tape is single-threaded (`!Sync`) but may be moved to another thread.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tape")
            .field("nodes", &inner.nodes.len())
            .field("parameters", &inner.params.len())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn constant(&self, value: f64) -> DiffScalar<'_> {
        DiffScalar {
            tape: self,
            value,
            node: None,
        }
    }

    /// Registers a trainable scalar under `id`.
    pub fn parameter(&self, id: impl Into<String>, value: f64) -> Result<DiffScalar<'_>> {
        let id = id.into();
        if !value.is_finite() {
            return Err(Error::NumericDomain {
                op: "parameter",
                detail: format!("initial value of `{id}` is {value}"),
            });
        }
        if self.inner.borrow().params.iter().any(|(p, _)| *p == id) {
            return Err(Error::Config(format!("duplicate parameter id `{id}`")));
        }
        let node = self.push(1, None);
        self.inner.borrow_mut().params.push((id, node));
        Ok(DiffScalar {
            tape: self,
            value,
            node: Some(node),
        })
    }

    pub fn constant_buffer(&self, values: impl Into<Arc<[f64]>>) -> DiffBuffer<'_> {
        DiffBuffer {
            tape: self,
            values: values.into(),
            node: None,
        }
    }

    /// A tracked leaf buffer that is not registered as a named parameter.
    /// Its adjoint is available through [`Tape::adjoints`].
    pub fn variable_buffer(&self, values: impl Into<Arc<[f64]>>) -> DiffBuffer<'_> {
        let values = values.into();
        let node = self.push(values.len(), None);
        DiffBuffer {
            tape: self,
            values,
            node: Some(node),
        }
    }

    /// Registered parameter ids in registration order.
    pub fn parameter_ids(&self) -> Vec<String> {
        self.inner
            .borrow()
            .params
            .iter()
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Records a buffer-valued operation. `backward` receives the adjoint of
    /// the output and must accumulate into the adjoints of its parents, all of
    /// which must already be on this tape.
    pub fn custom_buffer<F>(&self, values: Vec<f64>, tracked: bool, backward: F) -> DiffBuffer<'_>
    where
        F: Fn(&[f64], &mut Adjoints) + Send + 'static,
    {
        let node = tracked.then(|| self.push(values.len(), Some(Box::new(backward))));
        DiffBuffer {
            tape: self,
            values: values.into(),
            node,
        }
    }

    /// Records a scalar-valued operation; see [`Tape::custom_buffer`].
    pub fn custom_scalar<F>(&self, value: f64, tracked: bool, backward: F) -> DiffScalar<'_>
    where
        F: Fn(&[f64], &mut Adjoints) + Send + 'static,
    {
        let node = tracked.then(|| self.push(1, Some(Box::new(backward))));
        DiffScalar {
            tape: self,
            value,
            node,
        }
    }

    fn push(&self, len: usize, backward: Option<BackwardFn>) -> NodeId {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { len, backward });
        inner.nodes.len() - 1
    }

    fn check_owner(&self, loss: &DiffScalar<'_>) -> Result<()> {
        if core::ptr::eq(loss.tape, self) {
            Ok(())
        } else {
            Err(Error::Usage("loss was recorded on a different tape".into()))
        }
    }

    /// Propagates adjoints from `loss` to every node on the tape.
    pub fn adjoints(&self, loss: &DiffScalar<'_>) -> Result<Adjoints> {
        self.check_owner(loss)?;
        let inner = self.inner.borrow();
        let mut adj = Adjoints {
            slots: vec![None; inner.nodes.len()],
            lens: inner.nodes.iter().map(|n| n.len).collect(),
        };
        if let Some(root) = loss.node {
            adj.slot(root)[0] = 1.0;
            for id in (0..=root).rev() {
                if let Some(backward) = &inner.nodes[id].backward {
                    if let Some(grad) = adj.slots[id].take() {
                        backward(&grad, &mut adj);
                    }
                }
            }
        }
        Ok(adj)
    }

    /// Gradient of `loss` with respect to every registered parameter.
    pub fn backward(&self, loss: &DiffScalar<'_>) -> Result<GradientMap> {
        let adj = self.adjoints(loss)?;
        let inner = self.inner.borrow();
        let map = inner
            .params
            .iter()
            .map(|(id, node)| {
                let g = adj.slots[*node].as_ref().map_or(0.0, |s| s[0]);
                (id.clone(), g)
            })
            .collect();
        Ok(GradientMap(map))
    }
}

/// Adjoint accumulator handed to backward closures.
pub struct Adjoints {
    slots: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Adjoints {
    /// Mutable adjoint storage of node `id`, zero-initialised on first use.
    pub fn slot(&mut self, id: NodeId) -> &mut [f64] {
        let len = self.lens[id];
        self.slots[id].get_or_insert_with(|| vec![0.0; len])
    }

    pub fn add(&mut self, id: NodeId, index: usize, value: f64) {
        self.slot(id)[index] += value;
    }

    pub fn add_all(&mut self, id: NodeId, values: &[f64]) {
        for (s, v) in self.slot(id).iter_mut().zip(values) {
            *s += v;
        }
    }

    pub fn scalar(&self, s: &DiffScalar<'_>) -> f64 {
        s.node
            .and_then(|n| self.slots[n].as_ref())
            .map_or(0.0, |v| v[0])
    }

    pub fn buffer(&self, b: &DiffBuffer<'_>) -> Vec<f64> {
        b.node
            .and_then(|n| self.slots[n].clone())
            .unwrap_or_else(|| vec![0.0; b.len()])
    }
}

/// Gradient of a loss keyed by parameter id; one entry per registered parameter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientMap(BTreeMap<String, f64>);

impl GradientMap {
    pub fn get(&self, id: &str) -> Option<f64> {
        self.0.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// A differentiable real value.
#[derive(Clone, Copy)]
pub struct DiffScalar<'t> {
    tape: &'t Tape,
    value: f64,
    node: Option<NodeId>,
}

impl fmt::Debug for DiffScalar<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DiffScalar({}", self.value)?;
        if let Some(n) = self.node {
            write!(f, " @{n}")?;
        }
        f.write_str(")")
    }
}

/// Either a plain real or a [`DiffScalar`], accepted by mixed-operand ops.
pub trait ScalarArg<'t> {
    fn lift(self, tape: &'t Tape) -> DiffScalar<'t>;
}

impl<'t> ScalarArg<'t> for f64 {
    fn lift(self, tape: &'t Tape) -> DiffScalar<'t> {
        tape.constant(self)
    }
}

impl<'t> ScalarArg<'t> for DiffScalar<'t> {
    fn lift(self, tape: &'t Tape) -> DiffScalar<'t> {
        debug_assert!(core::ptr::eq(self.tape, tape), "mixing tapes");
        self
    }
}

fn domain(op: &'static str, detail: String) -> Error {
    Error::NumericDomain { op, detail }
}

impl<'t> DiffScalar<'t> {
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same value, detached from the graph.
    pub fn detach(&self) -> Self {
        self.tape.constant(self.value)
    }

    fn unary(self, value: f64, d: f64) -> Self {
        let node = self.node.map(|a| {
            self.tape
                .push(1, Some(Box::new(move |g: &[f64], adj: &mut Adjoints| adj.add(a, 0, g[0] * d))))
        });
        Self {
            tape: self.tape,
            value,
            node,
        }
    }

    fn binary(self, other: Self, value: f64, da: f64, db: f64) -> Self {
        debug_assert!(core::ptr::eq(self.tape, other.tape), "mixing tapes");
        let node = match (self.node, other.node) {
            (None, None) => None,
            (a, b) => Some(self.tape.push(
                1,
                Some(Box::new(move |g: &[f64], adj: &mut Adjoints| {
                    if let Some(a) = a {
                        adj.add(a, 0, g[0] * da);
                    }
                    if let Some(b) = b {
                        adj.add(b, 0, g[0] * db);
                    }
                })),
            )),
        };
        Self {
            tape: self.tape,
            value,
            node,
        }
    }

    pub fn sin(self) -> Self {
        self.unary(libm::sin(self.value), libm::cos(self.value))
    }

    pub fn cos(self) -> Self {
        self.unary(libm::cos(self.value), -libm::sin(self.value))
    }

    pub fn exp(self) -> Self {
        let e = libm::exp(self.value);
        self.unary(e, e)
    }

    pub fn tanh(self) -> Self {
        let t = libm::tanh(self.value);
        self.unary(t, 1.0 - t * t)
    }

    pub fn sigmoid(self) -> Self {
        let s = sigmoid(self.value);
        self.unary(s, s * (1.0 - s))
    }

    /// Subgradient 0 at the origin.
    pub fn abs(self) -> Self {
        let d = if self.value > 0.0 {
            1.0
        } else if self.value < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.unary(libm::fabs(self.value), d)
    }

    pub fn ln(self) -> Result<Self> {
        if !(self.value > 0.0) {
            return Err(domain("ln", format!("argument {} is not positive", self.value)));
        }
        Ok(self.unary(libm::log(self.value), 1.0 / self.value))
    }

    pub fn sqrt(self) -> Result<Self> {
        if self.value < 0.0 {
            return Err(domain("sqrt", format!("argument {} is negative", self.value)));
        }
        let r = libm::sqrt(self.value);
        let d = if r > 0.0 { 0.5 / r } else { 0.0 };
        Ok(self.unary(r, d))
    }

    pub fn powi(self, n: i32) -> Self {
        let v = libm::pow(self.value, n as f64);
        let d = if n == 0 {
            0.0
        } else {
            n as f64 * libm::pow(self.value, (n - 1) as f64)
        };
        self.unary(v, d)
    }

    /// `self^exponent`; the base must be positive unless the exponent is a
    /// constant integer.
    pub fn powf(self, exponent: impl ScalarArg<'t>) -> Result<Self> {
        let e = exponent.lift(self.tape);
        let (x, y) = (self.value, e.value);
        let integral = libm::floor(y) == y && !e.is_tracked();
        if x <= 0.0 && !(integral && x != 0.0) && !(x == 0.0 && y >= 1.0 && !e.is_tracked()) {
            return Err(domain("powf", format!("base {x} with exponent {y}")));
        }
        let v = libm::pow(x, y);
        let da = if y == 0.0 { 0.0 } else { y * libm::pow(x, y - 1.0) };
        let db = if x > 0.0 { v * libm::log(x) } else { 0.0 };
        Ok(self.binary(e, v, da, db))
    }

    pub fn checked_div(self, rhs: impl ScalarArg<'t>) -> Result<Self> {
        let r = rhs.lift(self.tape);
        if r.value == 0.0 {
            return Err(domain("div", "division by zero".into()));
        }
        Ok(self / r)
    }

    /// Ties resolve to `self`.
    pub fn max(self, other: impl ScalarArg<'t>) -> Self {
        let o = other.lift(self.tape);
        if self.value >= o.value {
            self.binary(o, self.value, 1.0, 0.0)
        } else {
            self.binary(o, o.value, 0.0, 1.0)
        }
    }

    /// Ties resolve to `self`.
    pub fn min(self, other: impl ScalarArg<'t>) -> Self {
        let o = other.lift(self.tape);
        if self.value <= o.value {
            self.binary(o, self.value, 1.0, 0.0)
        } else {
            self.binary(o, o.value, 0.0, 1.0)
        }
    }

    pub fn clamp(self, lo: impl ScalarArg<'t>, hi: impl ScalarArg<'t>) -> Self {
        self.max(lo).min(hi)
    }

    /// Floor remainder `x - m * floor(x / m)`. Derivative 1 (w.r.t. `x`)
    /// away from wraps and 0 exactly on a wrap point.
    pub fn rem_euclid(self, modulus: impl ScalarArg<'t>) -> Result<Self> {
        let m = modulus.lift(self.tape);
        if m.value == 0.0 {
            return Err(domain("mod", "zero modulus".into()));
        }
        let q = libm::floor(self.value / m.value);
        let v = self.value - m.value * q;
        let (da, db) = if v == 0.0 { (0.0, 0.0) } else { (1.0, -q) };
        Ok(self.binary(m, v, da, db))
    }

    pub fn floor(self) -> Self {
        self.unary(libm::floor(self.value), 0.0)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

impl<'t> Neg for DiffScalar<'t> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(-self.value, -1.0)
    }
}

impl<'t> Add for DiffScalar<'t> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        self.binary(rhs, self.value + rhs.value, 1.0, 1.0)
    }
}

impl<'t> Sub for DiffScalar<'t> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self.binary(rhs, self.value - rhs.value, 1.0, -1.0)
    }
}

impl<'t> Mul for DiffScalar<'t> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        self.binary(rhs, self.value * rhs.value, rhs.value, self.value)
    }
}

impl<'t> Div for DiffScalar<'t> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let q = self.value / rhs.value;
        self.binary(rhs, q, 1.0 / rhs.value, -q / rhs.value)
    }
}

macro_rules! mixed_ops {
    ($($tr:ident $m:ident),*) => {$(
        impl<'t> $tr<f64> for DiffScalar<'t> {
            type Output = DiffScalar<'t>;
            fn $m(self, rhs: f64) -> DiffScalar<'t> {
                let r = self.tape.constant(rhs);
                $tr::$m(self, r)
            }
        }
        impl<'t> $tr<DiffScalar<'t>> for f64 {
            type Output = DiffScalar<'t>;
            fn $m(self, rhs: DiffScalar<'t>) -> DiffScalar<'t> {
                let l = rhs.tape.constant(self);
                $tr::$m(l, rhs)
            }
        }
    )*};
}

mixed_ops!(Add add, Sub sub, Mul mul, Div div);

/// A differentiable buffer of reals (audio samples, spectrogram cells, taps).
#[derive(Clone)]
pub struct DiffBuffer<'t> {
    tape: &'t Tape,
    values: Arc<[f64]>,
    node: Option<NodeId>,
}

impl fmt::Debug for DiffBuffer<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffBuffer")
            .field("len", &self.values.len())
            .field("node", &self.node)
            .finish()
    }
}

impl<'t> DiffBuffer<'t> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn shared_values(&self) -> Arc<[f64]> {
        self.values.clone()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn detach(&self) -> Self {
        Self {
            tape: self.tape,
            values: self.values.clone(),
            node: None,
        }
    }

    /// Gathers scalars into a buffer.
    pub fn from_scalars(tape: &'t Tape, scalars: &[DiffScalar<'t>]) -> Self {
        let values: Vec<f64> = scalars.iter().map(|s| s.value).collect();
        let nodes: Vec<Option<NodeId>> = scalars.iter().map(|s| s.node).collect();
        let tracked = nodes.iter().any(Option::is_some);
        tape.custom_buffer(values, tracked, move |g, adj| {
            for (i, n) in nodes.iter().enumerate() {
                if let Some(n) = n {
                    adj.add(*n, 0, g[i]);
                }
            }
        })
    }

    pub fn get(&self, index: usize) -> DiffScalar<'t> {
        let node = self.node;
        self.tape
            .custom_scalar(self.values[index], node.is_some(), move |g, adj| {
                if let Some(n) = node {
                    adj.add(n, index, g[0]);
                }
            })
    }

    /// Elementwise `f` with derivative `df`.
    pub fn map<F, D>(&self, f: F, df: D) -> Self
    where
        F: Fn(f64) -> f64,
        D: Fn(f64) -> f64 + Send + 'static,
    {
        let out: Vec<f64> = self.values.iter().map(|&x| f(x)).collect();
        let input = self.values.clone();
        let node = self.node;
        self.tape.custom_buffer(out, node.is_some(), move |g, adj| {
            if let Some(n) = node {
                let slot = adj.slot(n);
                for ((s, &gi), &x) in slot.iter_mut().zip(g).zip(input.iter()) {
                    *s += gi * df(x);
                }
            }
        })
    }

    fn zip_op(&self, other: &Self, out: Vec<f64>, da: Option<Arc<[f64]>>, db: Option<Arc<[f64]>>) -> Self {
        let (na, nb) = (self.node, other.node);
        self.tape
            .custom_buffer(out, na.is_some() || nb.is_some(), move |g, adj| {
                if let Some(n) = na {
                    let slot = adj.slot(n);
                    match &da {
                        None => slot.iter_mut().zip(g).for_each(|(s, gi)| *s += gi),
                        Some(d) => slot
                            .iter_mut()
                            .zip(g)
                            .zip(d.iter())
                            .for_each(|((s, gi), di)| *s += gi * di),
                    }
                }
                if let Some(n) = nb {
                    let slot = adj.slot(n);
                    match &db {
                        None => slot.iter_mut().zip(g).for_each(|(s, gi)| *s += gi),
                        Some(d) => slot
                            .iter_mut()
                            .zip(g)
                            .zip(d.iter())
                            .for_each(|((s, gi), di)| *s += gi * di),
                    }
                }
            })
    }

    fn check_len(&self, other: &Self, op: &str) {
        assert_eq!(self.len(), other.len(), "{op}: buffer length mismatch");
    }

    pub fn add(&self, other: &Self) -> Self {
        self.check_len(other, "add");
        let out = self.values.iter().zip(other.values.iter()).map(|(a, b)| a + b).collect();
        self.zip_op(other, out, None, None)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.check_len(other, "sub");
        let out = self.values.iter().zip(other.values.iter()).map(|(a, b)| a - b).collect();
        let minus: Arc<[f64]> = vec![-1.0; self.len()].into();
        self.zip_op(other, out, None, Some(minus))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Self) -> Self {
        self.check_len(other, "mul");
        let out = self.values.iter().zip(other.values.iter()).map(|(a, b)| a * b).collect();
        self.zip_op(other, out, Some(other.values.clone()), Some(self.values.clone()))
    }

    /// Multiplies every element by `s`.
    pub fn scale(&self, s: impl ScalarArg<'t>) -> Self {
        let s = s.lift(self.tape);
        let factor = s.value;
        let out = self.values.iter().map(|x| x * factor).collect();
        let (nb, ns) = (self.node, s.node);
        let input = self.values.clone();
        self.tape
            .custom_buffer(out, nb.is_some() || ns.is_some(), move |g, adj| {
                if let Some(n) = nb {
                    adj.slot(n).iter_mut().zip(g).for_each(|(a, gi)| *a += gi * factor);
                }
                if let Some(n) = ns {
                    let d: f64 = g.iter().zip(input.iter()).map(|(gi, x)| gi * x).sum();
                    adj.add(n, 0, d);
                }
            })
    }

    /// Adds `s` to every element.
    pub fn offset(&self, s: impl ScalarArg<'t>) -> Self {
        let s = s.lift(self.tape);
        let shift = s.value;
        let out = self.values.iter().map(|x| x + shift).collect();
        let (nb, ns) = (self.node, s.node);
        self.tape
            .custom_buffer(out, nb.is_some() || ns.is_some(), move |g, adj| {
                if let Some(n) = nb {
                    adj.add_all(n, g);
                }
                if let Some(n) = ns {
                    adj.add(n, 0, g.iter().sum());
                }
            })
    }

    pub fn sum(&self) -> DiffScalar<'t> {
        let total = self.values.iter().sum();
        let node = self.node;
        self.tape.custom_scalar(total, node.is_some(), move |g, adj| {
            if let Some(n) = node {
                let gi = g[0];
                adj.slot(n).iter_mut().for_each(|a| *a += gi);
            }
        })
    }

    pub fn mean(&self) -> DiffScalar<'t> {
        let n = self.len().max(1) as f64;
        self.sum() * (1.0 / n)
    }

    pub fn dot(&self, other: &Self) -> DiffScalar<'t> {
        self.mul(other).sum()
    }

    /// Running sum.
    pub fn cumsum(&self) -> Self {
        self.cumsum_matrix(1, self.len(), Axis::Rows)
    }

    /// Running sum over a row-major `rows × cols` matrix: along each row
    /// ([`Axis::Rows`]) or down each column ([`Axis::Cols`]).
    pub fn cumsum_matrix(&self, rows: usize, cols: usize, axis: Axis) -> Self {
        assert_eq!(rows * cols, self.len(), "cumsum: shape mismatch");
        let mut out = self.values.to_vec();
        cumsum_in_place(&mut out, rows, cols, axis, false);
        let node = self.node;
        self.tape.custom_buffer(out, node.is_some(), move |g, adj| {
            if let Some(n) = node {
                let mut rev = g.to_vec();
                cumsum_in_place(&mut rev, rows, cols, axis, true);
                adj.add_all(n, &rev);
            }
        })
    }

    /// Zero-padded "same" convolution with an odd-length kernel:
    /// `y[k] = Σ_n h[n] x[k + c - n]`, `c = (len(h) - 1) / 2`.
    pub fn convolve_same(&self, kernel: &Self) -> Self {
        let taps = kernel.len();
        assert!(taps % 2 == 1, "convolve_same: kernel length must be odd");
        let c = (taps - 1) / 2;
        let x = self.values.clone();
        let h = kernel.values.clone();
        let len = x.len();
        let mut out = vec![0.0; len];
        for (k, y) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (n, hn) in h.iter().enumerate() {
                let j = k + c;
                if j >= n && j - n < len {
                    acc += hn * x[j - n];
                }
            }
            *y = acc;
        }
        let (nx, nh) = (self.node, kernel.node);
        self.tape
            .custom_buffer(out, nx.is_some() || nh.is_some(), move |g, adj| {
                if let Some(nx) = nx {
                    let slot = adj.slot(nx);
                    for (k, gk) in g.iter().enumerate() {
                        for (n, hn) in h.iter().enumerate() {
                            let j = k + c;
                            if j >= n && j - n < len {
                                slot[j - n] += gk * hn;
                            }
                        }
                    }
                }
                if let Some(nh) = nh {
                    let slot = adj.slot(nh);
                    for (k, gk) in g.iter().enumerate() {
                        for (n, s) in slot.iter_mut().enumerate() {
                            let j = k + c;
                            if j >= n && j - n < len {
                                *s += gk * x[j - n];
                            }
                        }
                    }
                }
            })
    }

    pub fn abs(&self) -> Self {
        self.map(libm::fabs, |x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(&self) -> Self {
        self.map(|x| x * x, |x| 2.0 * x)
    }

    pub fn l1_norm(&self) -> DiffScalar<'t> {
        self.abs().sum()
    }

    /// Euclidean norm; subgradient 0 at the zero vector.
    pub fn l2_norm(&self) -> DiffScalar<'t> {
        let sq: f64 = self.values.iter().map(|x| x * x).sum();
        let norm = libm::sqrt(sq);
        let node = self.node;
        let input = self.values.clone();
        self.tape.custom_scalar(norm, node.is_some(), move |g, adj| {
            if let (Some(n), true) = (node, norm > 0.0) {
                let k = g[0] / norm;
                adj.slot(n)
                    .iter_mut()
                    .zip(input.iter())
                    .for_each(|(a, x)| *a += k * x);
            }
        })
    }
}

/// Matrix axis for [`DiffBuffer::cumsum_matrix`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Along each row (across columns).
    Rows,
    /// Down each column (across rows).
    Cols,
}

fn cumsum_in_place(v: &mut [f64], rows: usize, cols: usize, axis: Axis, reverse: bool) {
    match axis {
        Axis::Rows => {
            for r in 0..rows {
                let row = &mut v[r * cols..(r + 1) * cols];
                if reverse {
                    for i in (0..cols.saturating_sub(1)).rev() {
                        row[i] += row[i + 1];
                    }
                } else {
                    for i in 1..cols {
                        row[i] += row[i - 1];
                    }
                }
            }
        }
        Axis::Cols => {
            if reverse {
                for r in (0..rows.saturating_sub(1)).rev() {
                    for c in 0..cols {
                        v[r * cols + c] += v[(r + 1) * cols + c];
                    }
                }
            } else {
                for r in 1..rows {
                    for c in 0..cols {
                        v[r * cols + c] += v[(r - 1) * cols + c];
                    }
                }
            }
        }
    }
}

/// Per-parameter comparison from [`finite_difference_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct FdEntry {
    pub autodiff: f64,
    pub finite_difference: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
    pub max_relative_error: f64,
}

/// How [`finite_difference_check_with`] forms the numerical derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdMethod {
    /// One central difference at the given step.
    Central,
    /// Central differences at the given step shrunk by 1.4 up to nine
    /// times, extrapolated to zero step (Ridders' method). The function
    /// must be smooth within one step of the point.
    Ridders,
}

const RIDDERS_SHRINK: f64 = 1.4;
const RIDDERS_LEVELS: usize = 10;

/// Ridders-extrapolated central difference of `g` at `x` from initial step
/// `h`. Returns the estimate with the smallest extrapolation error.
fn ridders(g: &mut dyn FnMut(f64) -> Result<f64>, x: f64, h: f64) -> Result<f64> {
    let c2 = RIDDERS_SHRINK * RIDDERS_SHRINK;
    let mut central = |h: f64| -> Result<f64> { Ok((g(x + h)? - g(x - h)?) / (2.0 * h)) };
    let mut prev: Vec<f64> = alloc::vec![central(h)?];
    let mut best = prev[0];
    let mut err = f64::INFINITY;
    let mut hh = h;
    for _ in 1..RIDDERS_LEVELS {
        hh /= RIDDERS_SHRINK;
        let mut row = alloc::vec![central(hh)?];
        let mut fac = c2;
        for j in 1..=prev.len() {
            let next = (row[j - 1] * fac - prev[j - 1]) / (fac - 1.0);
            fac *= c2;
            let e = libm::fabs(next - row[j - 1]).max(libm::fabs(next - prev[j - 1]));
            if e <= err {
                err = e;
                best = next;
            }
            row.push(next);
        }
        let diverging = libm::fabs(row[row.len() - 1] - prev[prev.len() - 1]) >= 2.0 * err;
        prev = row;
        if diverging {
            break;
        }
    }
    Ok(best)
}

/// Compares autodiff gradients of `f` at `params` with central differences.
///
/// `steps` holds one step per parameter, or a single step used for all.
/// The relative error of parameter `i` is
/// `|fd_i - ad_i| / (|ad_i| + 1e-8)`.
pub fn finite_difference_check<F>(f: F, params: &[f64], steps: &[f64]) -> Result<FdReport>
where
    F: for<'t> Fn(&'t Tape, &[DiffScalar<'t>]) -> Result<DiffScalar<'t>>,
{
    finite_difference_check_with(f, params, steps, FdMethod::Central)
}

/// [`finite_difference_check`] with a choice of difference scheme.
pub fn finite_difference_check_with<F>(f: F, params: &[f64], steps: &[f64], method: FdMethod) -> Result<FdReport>
where
    F: for<'t> Fn(&'t Tape, &[DiffScalar<'t>]) -> Result<DiffScalar<'t>>,
{
    if steps.is_empty() || (steps.len() != 1 && steps.len() != params.len()) {
        return Err(Error::Usage("one step, or one step per parameter, is required".into()));
    }
    if steps.iter().any(|h| !(*h > 0.0)) {
        return Err(Error::Usage("finite-difference steps must be positive".into()));
    }
    let tape = Tape::new();
    let vars = params
        .iter()
        .enumerate()
        .map(|(i, &p)| tape.parameter(format!("p{i}"), p))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&tape, &vars)?;
    let adj = tape.adjoints(&loss)?;

    let eval = |shifted: &[f64]| -> Result<f64> {
        let t = Tape::new();
        let consts: Vec<_> = shifted.iter().map(|&p| t.constant(p)).collect();
        Ok(f(&t, &consts)?.value())
    };

    let mut entries = Vec::with_capacity(params.len());
    for (i, var) in vars.iter().enumerate() {
        let h = if steps.len() == 1 { steps[0] } else { steps[i] };
        let mut along = |v: f64| {
            let mut shifted = params.to_vec();
            shifted[i] = v;
            eval(&shifted)
        };
        let fd = match method {
            FdMethod::Central => (along(params[i] + h)? - along(params[i] - h)?) / (2.0 * h),
            FdMethod::Ridders => ridders(&mut along, params[i], h)?,
        };
        let ad = adj.scalar(var);
        entries.push(FdEntry {
            autodiff: ad,
            finite_difference: fd,
            relative_error: libm::fabs(fd - ad) / (libm::fabs(ad) + 1e-8),
        });
    }
    let max_relative_error = entries.iter().map(|e| e.relative_error).fold(0.0, f64::max);
    Ok(FdReport {
        entries,
        max_relative_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ridders_beats_a_coarse_central_difference() {
        let check = |method| {
            finite_difference_check_with(|_, p| Ok((p[0] * 3.0).sin().exp()), &[0.4], &[0.05], method).unwrap()
        };
        let central = check(FdMethod::Central);
        let ridders = check(FdMethod::Ridders);
        assert!(central.max_relative_error > 1e-4);
        assert!(ridders.max_relative_error < 1e-9, "{}", ridders.max_relative_error);
    }

    fn fd_scalar(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn parameter_value_and_identity_gradient() {
        let tape = Tape::new();
        let amp = tape.parameter("amp", 0.5).unwrap();
        assert_eq!(amp.value(), 0.5);
        let tape = Tape::new();
        let p = tape.parameter("p", 3.0).unwrap();
        assert_eq!(tape.backward(&p).unwrap().get("p"), Some(1.0));
    }

    #[test]
    fn power_rule() {
        let tape = Tape::new();
        let p = tape.parameter("p", 3.0).unwrap();
        assert_eq!(tape.backward(&(p * p)).unwrap().get("p"), Some(6.0));
    }

    #[test]
    fn duplicate_id_is_config_error() {
        let tape = Tape::new();
        tape.parameter("a", 1.0).unwrap();
        assert!(matches!(tape.parameter("a", 2.0), Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_parameter_rejected() {
        let tape = Tape::new();
        assert!(matches!(
            tape.parameter("a", f64::NAN),
            Err(Error::NumericDomain { .. })
        ));
    }

    #[test]
    fn sin_at_zero() {
        let tape = Tape::new();
        let x = tape.parameter("x", 0.0).unwrap();
        let y = x.sin();
        assert_eq!(y.value(), 0.0);
        assert_eq!(tape.backward(&y).unwrap().get("x"), Some(1.0));
    }

    #[test]
    fn clamp_flat_region() {
        let tape = Tape::new();
        let x = tape.parameter("x", 2.0).unwrap();
        let y = x.clamp(0.0, 1.0);
        assert_eq!(y.value(), 1.0);
        assert_eq!(tape.backward(&y).unwrap().get("x"), Some(0.0));
    }

    #[test]
    fn ties_take_left_branch() {
        let tape = Tape::new();
        let a = tape.parameter("a", 1.0).unwrap();
        let b = tape.parameter("b", 1.0).unwrap();
        let g = tape.backward(&a.max(b)).unwrap();
        assert_eq!((g.get("a"), g.get("b")), (Some(1.0), Some(0.0)));
        let g = tape.backward(&a.min(b)).unwrap();
        assert_eq!((g.get("a"), g.get("b")), (Some(1.0), Some(0.0)));
    }

    #[test]
    fn mod_derivative_zero_on_wrap() {
        let tape = Tape::new();
        let x = tape.parameter("x", 2.0).unwrap();
        let y = x.rem_euclid(1.0).unwrap();
        assert_eq!(y.value(), 0.0);
        assert_eq!(tape.backward(&y).unwrap().get("x"), Some(0.0));
        let tape = Tape::new();
        let x = tape.parameter("x", 2.25).unwrap();
        let y = x.rem_euclid(1.0).unwrap();
        assert_eq!(y.value(), 0.25);
        assert_eq!(tape.backward(&y).unwrap().get("x"), Some(1.0));
    }

    #[test]
    fn domain_errors_name_the_op() {
        let tape = Tape::new();
        let x = tape.parameter("x", -1.0).unwrap();
        match x.ln() {
            Err(Error::NumericDomain { op, .. }) => assert_eq!(op, "ln"),
            other => panic!("unexpected {other:?}"),
        }
        match x.checked_div(0.0) {
            Err(Error::NumericDomain { op, .. }) => assert_eq!(op, "div"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn composite_matches_finite_difference() {
        let f = |p: f64| libm::exp(libm::sin(p) * p);
        let tape = Tape::new();
        let p = tape.parameter("p", 0.7).unwrap();
        let y = (p.sin() * p).exp();
        let ad = tape.backward(&y).unwrap().get("p").unwrap();
        let fd = fd_scalar(f, 0.7, 1e-5);
        assert!(((ad - fd) / ad).abs() < 1e-6, "ad {ad} fd {fd}");
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let tape = Tape::new();
        tape.parameter("a", 1.0).unwrap();
        tape.parameter("b", 2.0).unwrap();
        let c = tape.constant(5.0);
        let g = tape.backward(&c).unwrap();
        assert_eq!(g.len(), 2);
        assert!(g.iter().all(|(_, v)| v == 0.0));
    }

    #[test]
    fn sum_of_parameters() {
        let tape = Tape::new();
        let ps: Vec<_> = (0..3)
            .map(|i| tape.parameter(format!("p{i}"), i as f64).unwrap())
            .collect();
        let loss = ps[0] + ps[1] + ps[2];
        let g = tape.backward(&loss).unwrap();
        assert!(g.iter().all(|(_, v)| v == 1.0));
    }

    #[test]
    fn loss_from_other_tape_is_usage_error() {
        let a = Tape::new();
        let b = Tape::new();
        let x = a.parameter("x", 1.0).unwrap();
        assert!(matches!(b.backward(&x), Err(Error::Usage(_))));
    }

    #[test]
    fn repeated_backward_is_identical() {
        let tape = Tape::new();
        let p = tape.parameter("p", 1.3).unwrap();
        let buf = tape.constant_buffer(vec![0.1, 0.2, 0.3]).scale(p).map(libm::sin, libm::cos);
        let loss = buf.cumsum().l2_norm();
        let g1 = tape.backward(&loss).unwrap();
        let g2 = tape.backward(&loss).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn quadratic_fd_check_is_tight() {
        let report = finite_difference_check(|_, p| Ok(p[0] * p[0]), &[1.0], &[1e-5]).unwrap();
        assert!(report.max_relative_error < 1e-8, "{report:?}");
    }

    #[test]
    fn buffer_ops_match_finite_difference() {
        let report = finite_difference_check(
            |t, p| {
                let x = t.constant_buffer(vec![0.3, -0.2, 0.9, 0.4, -0.7]);
                let k = DiffBuffer::from_scalars(t, &[p[0], p[1], p[2]]);
                let y = x.scale(p[3]).offset(p[1]).convolve_same(&k);
                let z = y.mul(&x).cumsum_matrix(1, 5, Axis::Rows).square();
                Ok(z.sum() + y.l2_norm() + y.map(libm::tanh, |v| 1.0 - libm::tanh(v).powi(2)).l1_norm())
            },
            &[0.2, 0.5, -0.3, 1.7],
            &[1e-6],
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-6, "{report:?}");
    }

    #[test]
    fn cumsum_matrix_columns() {
        let t = Tape::new();
        let b = t.constant_buffer(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(b.cumsum_matrix(2, 3, Axis::Cols).values(), &[1.0, 2.0, 3.0, 5.0, 7.0, 9.0]);
        assert_eq!(b.cumsum_matrix(2, 3, Axis::Rows).values(), &[1.0, 3.0, 6.0, 4.0, 9.0, 15.0]);
    }

    #[test]
    fn untracked_ops_record_nothing() {
        let t = Tape::new();
        let b = t.constant_buffer(vec![1.0, 2.0]);
        let _ = b.square().cumsum().sum() * 3.0;
        assert!(t.is_empty());
    }
}
