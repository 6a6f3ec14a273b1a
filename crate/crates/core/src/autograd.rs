//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order, so node ids are
//! already a topological order and `backward` is a single reverse sweep.
//! Values are immutable once recorded. The graph also counts multiply-accumulates
//! per category, which is how operation budgets are checked against closed forms.

use std::collections::BTreeMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{Conv2dSpec, Element, Result, Tensor, TensorError};

pub const LEAKY_SLOPE: f64 = 0.01;

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

struct Node<T> {
    op: &'static str,
    value: Tensor<T>,
    parents: Vec<usize>,
    requires_grad: bool,
    finite: bool,
    backward: Option<BackwardFn<T>>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    bound_params: Vec<Option<Var>>,
    macs: BTreeMap<&'static str, u64>,
    category: &'static str,
    fault: Option<(String, f64)>,
}

/// Gradients produced by [`Graph::backward`], indexed by leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient w.r.t. a bound parameter, or `None` if the parameter was not used.
    pub fn param(&self, graph: &Graph<T>, id: ParamId) -> Option<&Tensor<T>> {
        graph
            .bound_params
            .get(id.index())
            .copied()
            .flatten()
            .and_then(|v| self.get(v))
    }

    /// One entry per parameter of `store`; unused parameters get zeros.
    pub fn for_store(&self, graph: &Graph<T>, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store
            .iter()
            .map(|(id, p)| {
                self.param(graph, id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.tensor.shape().to_vec()))
            })
            .collect()
    }
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    /// A graph that records backward rules.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            bound_params: Vec::new(),
            macs: BTreeMap::new(),
            category: "other",
            fault: None,
        }
    }

    /// A graph that only evaluates values.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scales the gradients emitted by every node of `op` during backward.
    /// Only used to prove that gradient checks catch a broken rule.
    pub fn corrupt_backward(&mut self, op: &str, factor: f64) {
        self.fault = Some((op.to_string(), factor));
    }

    // ---- multiply-accumulate accounting ----

    /// Sets the category subsequent MACs are attributed to; returns the previous one.
    pub fn set_mac_category(&mut self, category: &'static str) -> &'static str {
        std::mem::replace(&mut self.category, category)
    }

    pub fn count_macs(&mut self, n: u64) {
        *self.macs.entry(self.category).or_default() += n;
    }

    pub fn macs(&self, category: &str) -> u64 {
        self.macs.get(category).copied().unwrap_or(0)
    }

    pub fn total_macs(&self) -> u64 {
        self.macs.values().sum()
    }

    pub fn mac_breakdown(&self) -> &BTreeMap<&'static str, u64> {
        &self.macs
    }

    // ---- leaves ----

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool, op: &'static str) -> Var {
        let finite = value.is_finite();
        self.nodes.push(Node {
            op,
            value,
            parents: Vec::new(),
            requires_grad: requires_grad && self.grad_enabled,
            finite,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that does not participate in differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false, "constant")
    }

    /// An input whose gradient is wanted (e.g. for attribution maps or gradient checks).
    pub fn input_with_grad(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true, "input")
    }

    /// Binds a parameter as a leaf; repeated calls return the same var.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(Some(v)) = self.bound_params.get(id.index()) {
            return *v;
        }
        let v = self.leaf(store.get(id).clone(), true, "param");
        if self.bound_params.len() <= id.index() {
            self.bound_params.resize(id.index() + 1, None);
        }
        self.bound_params[id.index()] = Some(v);
        v
    }

    fn push(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[Var],
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var {
        let requires_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let parents_finite = parents.iter().all(|p| self.nodes[p.0].finite);
        let finite = parents_finite && value.is_finite();
        debug_assert!(
            !parents_finite || finite,
            "{op} produced a non-finite value from finite inputs"
        );
        self.nodes.push(Node {
            op,
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            requires_grad,
            finite,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn<T>),
        });
        Var(self.nodes.len() - 1)
    }

    // ---- backward ----

    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let node = &self.nodes[loss.0];
        if node.value.numel() != 1 {
            return Err(TensorError::NotScalar(node.value.shape().to_vec()));
        }
        if !node.requires_grad {
            return Err(TensorError::DetachedNode(loss.0));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(node.value.shape().to_vec()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
            let mut parent_grads = backward(&g, &needs);
            if let Some((op, factor)) = &self.fault {
                if op == node.op {
                    for pg in parent_grads.iter_mut().flatten() {
                        *pg = pg.scale(T::c(*factor));
                    }
                }
            }
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                if let (Some(pg), true) = (pg, need) {
                    debug_assert_eq!(pg.shape(), self.nodes[p].value.shape(), "grad shape of {}", node.op);
                    accumulate(&mut grads[p], pg);
                }
            }
        }
        Ok(Gradients { grads })
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.add(bv)?;
        let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
        Ok(self.push("add", out, &[a, b], move |g, _| {
            vec![Some(g.sum_to_shape(&sa)), Some(g.sum_to_shape(&sb))]
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = av.sub(bv)?;
        let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
        Ok(self.push("sub", out, &[a, b], move |g, _| {
            vec![Some(g.sum_to_shape(&sa)), Some(g.scale(-T::one()).sum_to_shape(&sb))]
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let out = av.mul(&bv)?;
        Ok(self.push("mul", out, &[a, b], move |g, need| {
            vec![
                need[0].then(|| g.mul(&bv).unwrap().sum_to_shape(av.shape())),
                need[1].then(|| g.mul(&av).unwrap().sum_to_shape(bv.shape())),
            ]
        }))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let out = av.div(&bv)?;
        let y = out.clone();
        Ok(self.push("div", out, &[a, b], move |g, need| {
            vec![
                need[0].then(|| g.div(&bv).unwrap().sum_to_shape(av.shape())),
                need[1].then(|| {
                    // d(a/b)/db = -y/b
                    let t = g.mul(&y).unwrap().div(&bv).unwrap();
                    t.scale(-T::one()).sum_to_shape(bv.shape())
                }),
            ]
        }))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::c(s);
        let out = self.value(a).scale(s);
        self.push("scale", out, &[a], move |g, _| vec![Some(g.scale(s))])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::c(s);
        let out = self.value(a).map(|v| v + s);
        self.push("add_scalar", out, &[a], move |g, _| vec![Some(g.clone())])
    }

    /// Elementwise map with derivative `df(x, y)` expressed through input and output.
    fn unary(
        &mut self,
        op: &'static str,
        a: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var {
        let x = self.value(a).clone();
        let y = x.map(f);
        let yy = y.clone();
        self.push(op, y, &[a], move |g, _| {
            let d: Vec<T> = g
                .data()
                .iter()
                .zip(x.data())
                .zip(yy.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::from_parts(x.shape().to_vec(), d))]
        })
    }

    pub fn leaky_relu(&mut self, a: Var) -> Var {
        let slope = T::c(LEAKY_SLOPE);
        self.unary(
            "leaky_relu",
            a,
            move |x| if x > T::zero() { x } else { x * slope },
            move |x, _| if x > T::zero() { T::one() } else { slope },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let k = T::c((2.0 / std::f64::consts::PI).sqrt());
        let c = T::c(0.044715);
        let half = T::c(0.5);
        let three = T::c(3.0);
        self.unary(
            "gelu",
            a,
            move |x| half * x * (T::one() + (k * (x + c * x * x * x)).tanh()),
            move |x, _| {
                let t = (k * (x + c * x * x * x)).tanh();
                half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + three * c * x * x)
            },
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(
            "sigmoid",
            a,
            |x| T::one() / (T::one() + (-x).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary("exp", a, |x| x.exp(), |_, y| y)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(
            "abs",
            a,
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary("square", a, |x| x * x, |x, _| x + x)
    }

    /// `max(x, lo)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let lo = T::c(lo);
        self.unary(
            "clamp_min",
            a,
            move |x| x.max(lo),
            move |x, _| if x > lo { T::one() } else { T::zero() },
        )
    }

    pub fn reciprocal(&mut self, a: Var) -> Result<Var> {
        if let Some(index) = self.value(a).data().iter().position(|v| v.is_zero()) {
            return Err(TensorError::DivisionByZero { index });
        }
        Ok(self.unary("reciprocal", a, |x| T::one() / x, |_, y| -y * y))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let out = av.matmul(&bv)?;
        let k = av.dim(av.rank() - 1) as u64;
        self.count_macs(out.numel() as u64 * k);
        Ok(self.push("matmul", out, &[a, b], move |g, need| {
            vec![
                need[0].then(|| {
                    g.matmul(&bv.transpose_last2().unwrap())
                        .unwrap()
                        .sum_to_shape(av.shape())
                }),
                need[1].then(|| {
                    av.transpose_last2()
                        .unwrap()
                        .matmul(g)
                        .unwrap()
                        .sum_to_shape(bv.shape())
                }),
            ]
        }))
    }

    /// `x · W + b` with `W: [in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let y = self.value(a).softmax(axis)?;
        let yy = y.clone();
        Ok(self.push("softmax", y, &[a], move |g, _| {
            let gy = g.mul(&yy).unwrap();
            let s = gy.sum_axis(axis).unwrap();
            let inner = g.sub(&s).unwrap();
            vec![Some(inner.mul(&yy).unwrap())]
        }))
    }

    /// Layer norm over the last axis with affine `gamma`, `beta` of that length.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x).clone();
        let (gv, bv) = (self.value(gamma).clone(), self.value(beta).clone());
        let c = *xv.shape().last().unwrap_or(&0);
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let rows = xv.numel() / c.max(1);
        let eps = T::c(eps);
        let n = T::c(c as f64);
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut inv = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mu = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
            let iv = T::one() / (var + eps).sqrt();
            inv[r] = iv;
            for j in 0..c {
                let h = (row[j] - mu) * iv;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let shape = xv.shape().to_vec();
        let out = Tensor::from_parts(shape.clone(), out);
        Ok(self.push("layer_norm", out, &[x, gamma, beta], move |g, need| {
            let gd = g.data();
            let mut gx = vec![T::zero(); gd.len()];
            let mut gg = vec![T::zero(); c];
            let mut gb = vec![T::zero(); c];
            for r in 0..rows {
                let (mut s1, mut s2) = (T::zero(), T::zero());
                for j in 0..c {
                    let i = r * c + j;
                    gg[j] += gd[i] * xhat[i];
                    gb[j] += gd[i];
                    let gh = gd[i] * gv.data()[j];
                    s1 += gh;
                    s2 += gh * xhat[i];
                }
                for j in 0..c {
                    let i = r * c + j;
                    let gh = gd[i] * gv.data()[j];
                    gx[i] = inv[r] / n * (n * gh - s1 - xhat[i] * s2);
                }
            }
            vec![
                need[0].then(|| Tensor::from_parts(shape.clone(), gx)),
                Some(Tensor::from_parts(vec![c], gg)),
                Some(Tensor::from_parts(vec![c], gb)),
            ]
        }))
    }

    /// Divides each row along the last axis by `max(‖row‖₂, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x).clone();
        let c = *xv.shape().last().unwrap_or(&1);
        let rows = xv.numel() / c.max(1);
        let eps = T::c(eps);
        let mut norms = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms[r] = nrm;
            let d = nrm.max(eps);
            for j in 0..c {
                out[r * c + j] = row[j] / d;
            }
        }
        let y = Tensor::from_parts(xv.shape().to_vec(), out);
        let yy = y.clone();
        self.push("l2_normalize", y, &[x], move |g, _| {
            let (gd, yd) = (g.data(), yy.data());
            let mut gx = vec![T::zero(); gd.len()];
            for r in 0..rows {
                let s = &gd[r * c..(r + 1) * c];
                let yr = &yd[r * c..(r + 1) * c];
                if norms[r] > eps {
                    let proj: T = s.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        gx[r * c + j] = (s[j] - yr[j] * proj) / norms[r];
                    }
                } else {
                    for j in 0..c {
                        gx[r * c + j] = s[j] / eps;
                    }
                }
            }
            vec![Some(Tensor::from_parts(yy.shape().to_vec(), gx))]
        })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let (xv, wv) = (self.value(x).clone(), self.value(w).clone());
        let bv = b.map(|b| self.value(b).clone());
        let out = xv.conv2d(&wv, bv.as_ref(), spec)?;
        let per_out = (wv.dim(1) * wv.dim(2) * wv.dim(3)) as u64;
        self.count_macs(out.numel() as u64 * per_out);
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push("conv2d", out, &parents, move |g, need| {
            let (gx, gw, gb) = xv.conv2d_backward(&wv, g, spec, need[0], need[1]);
            let mut v = vec![gx, gw];
            if need.len() > 2 {
                v.push(Some(gb));
            }
            v
        }))
    }

    // ---- layout ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let out = av.reshape(shape.to_vec())?;
        let orig = av.shape().to_vec();
        Ok(self.push("reshape", out, &[a], move |g, _| {
            vec![Some(g.reshape(orig.clone()).unwrap())]
        }))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(a).permute(perm)?;
        let inv = Tensor::<T>::inverse_permutation(perm);
        Ok(self.push("permute", out, &[a], move |g, _| {
            vec![Some(g.permute(&inv).unwrap())]
        }))
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let r = self.value(a).rank();
        if r < 2 {
            return Err(TensorError::InvalidAxis { axis: 1, rank: r });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat(&vals, axis)?;
        let lens: Vec<usize> = vals.iter().map(|v| v.dim(axis)).collect();
        Ok(self.push("concat", out, parts, move |g, need| {
            let mut start = 0;
            lens.iter()
                .zip(need)
                .map(|(&len, &n)| {
                    let s = start;
                    start += len;
                    n.then(|| g.narrow(axis, s, len).unwrap())
                })
                .collect()
        }))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let out = av.narrow(axis, start, len)?;
        let full = av.dim(axis);
        Ok(self.push("narrow", out, &[a], move |g, _| {
            vec![Some(g.pad_axis(axis, start, full).unwrap())]
        }))
    }

    pub fn roll(&mut self, a: Var, axes: &[usize], shifts: &[isize]) -> Result<Var> {
        let out = self.value(a).roll(axes, shifts)?;
        let axes = axes.to_vec();
        let back: Vec<isize> = shifts.iter().map(|s| -s).collect();
        Ok(self.push("roll", out, &[a], move |g, _| {
            vec![Some(g.roll(&axes, &back).unwrap())]
        }))
    }

    pub fn pixel_shuffle(&mut self, a: Var, r: usize) -> Result<Var> {
        let out = self.value(a).pixel_shuffle(r)?;
        Ok(self.push("pixel_shuffle", out, &[a], move |g, _| {
            vec![Some(g.pixel_unshuffle(r).unwrap())]
        }))
    }

    pub fn pixel_unshuffle(&mut self, a: Var, r: usize) -> Result<Var> {
        let out = self.value(a).pixel_unshuffle(r)?;
        Ok(self.push("pixel_unshuffle", out, &[a], move |g, _| {
            vec![Some(g.pixel_shuffle(r).unwrap())]
        }))
    }

    /// Row lookup into `table` (e.g. a relative-position bias table).
    pub fn gather_rows(&mut self, table: Var, index: &[usize], index_shape: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let out = tv.gather_rows(index, index_shape)?;
        let tshape = tv.shape().to_vec();
        let index = index.to_vec();
        Ok(self.push("gather_rows", out, &[table], move |g, _| {
            vec![Some(g.scatter_add_rows(&index, &tshape))]
        }))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Tensor::scalar(av.sum());
        let shape = av.shape().to_vec();
        self.push("sum", out, &[a], move |g, _| {
            vec![Some(Tensor::full(shape.clone(), g.item()))]
        })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Tensor::scalar(av.mean());
        let shape = av.shape().to_vec();
        let n = T::c(av.numel() as f64);
        self.push("mean", out, &[a], move |g, _| {
            vec![Some(Tensor::full(shape.clone(), g.item() / n))]
        })
    }

    /// Mean along `axis`, keeping it with length 1.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        let out = av.mean_axis(axis)?;
        let shape = av.shape().to_vec();
        let n = T::c(av.dim(axis) as f64);
        Ok(self.push("mean_axis", out, &[a], move |g, _| {
            let z = Tensor::<T>::zeros(shape.clone());
            vec![Some(z.add(&g.scale(T::one() / n)).unwrap())]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input_with_grad(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
        let sq = g.square(x);
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn detached_branch_gets_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input_with_grad(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
        let c = g.constant(Tensor::from_f64([2], &[5.0, 6.0]).unwrap());
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[5.0, 6.0]);

        let only_const = g.sum(c);
        assert!(matches!(g.backward(only_const), Err(TensorError::DetachedNode(_))));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.input_with_grad(Tensor::zeros([3]));
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn leaky_relu_slope() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64([2], &[-1.0, 2.0]).unwrap());
        let y = g.leaky_relu(x);
        assert_eq!(g.value(y).data(), &[-0.01, 2.0]);
    }

    #[test]
    fn softmax_pick_matches_finite_difference() {
        let x0 = [0.3, -0.7];
        let f = |v: &[f64]| {
            let t = Tensor::<f64>::from_f64([2], v).unwrap().softmax(0).unwrap();
            t.data()[0]
        };
        let mut g = Graph::<f64>::new();
        let x = g.input_with_grad(Tensor::from_f64([2], &x0).unwrap());
        let y = g.softmax(x, 0).unwrap();
        let y0 = g.narrow(y, 0, 0, 1).unwrap();
        let s = g.sum(y0);
        let grads = g.backward(s).unwrap();
        let h = 1e-4;
        for i in 0..2 {
            let (mut p, mut m) = (x0, x0);
            p[i] += h;
            m[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((grads.get(x).unwrap().data()[i] - fd).abs() < 1e-5);
        }
    }

    #[test]
    fn layer_norm_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64([1, 3], &[1.0, 2.0, 3.0]).unwrap());
        let gamma = g.constant(Tensor::ones([3]));
        let beta = g.constant(Tensor::zeros([3]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        let expect = [-1.22474, 0.0, 1.22474];
        for (a, e) in g.value(y).data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-4);
        }
        let c = g.constant(Tensor::full([2, 3], 4.0));
        let y = g.layer_norm(c, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let zero_gamma = g.constant(Tensor::zeros([3]));
        let b2 = g.constant(Tensor::from_f64([3], &[0.5, -1.0, 2.0]).unwrap());
        let y = g.layer_norm(x, zero_gamma, b2, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -1.0, 2.0]);
        let bad = g.constant(Tensor::zeros([2]));
        assert!(g.layer_norm(x, bad, beta, 1e-5).is_err());
    }

    #[test]
    fn macs_are_attributed_to_categories() {
        let mut g = Graph::<f32>::inference();
        let a = g.constant(Tensor::zeros([4, 3]));
        let b = g.constant(Tensor::zeros([3, 5]));
        g.set_mac_category("attn");
        g.matmul(a, b).unwrap();
        g.set_mac_category("other");
        let x = g.constant(Tensor::zeros([4, 6, 6]));
        let w = g.constant(Tensor::zeros([8, 2, 3, 3]));
        g.conv2d(x, w, None, Conv2dSpec { groups: 2, padding: 1 }).unwrap();
        assert_eq!(g.macs("attn"), 60);
        assert_eq!(g.macs("other"), 8 * 36 * 18);
    }

    #[test]
    fn inference_graph_records_no_backward() {
        let mut g = Graph::<f32>::inference();
        let mut store = ParamStore::new();
        let id = store.zeros("w", &[2]);
        let w = g.param(&store, id);
        assert!(!g.requires_grad(w));
        assert_eq!(g.param(&store, id), w);
    }
}
