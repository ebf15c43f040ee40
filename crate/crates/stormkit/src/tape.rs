//! Reverse-mode autodiff on dynamically shaped arrays.
//!
//! A [`Tape`] records a directed acyclic graph of array ops; [`Tape::backward`]
//! walks it in reverse and accumulates gradients for every node. The tape is
//! generic over the scalar so training runs in f32 while gradient checks run
//! in f64. Shape errors panic immediately with the op name: they are bugs in
//! the network wiring, not runtime conditions.

use std::sync::Arc;

use ndarray::{ArrayD, Axis, Ix2, IxDyn, Slice};
use num_traits::FromPrimitive;

/// Scalar type usable on the tape.
pub trait Real: ndarray::NdFloat + FromPrimitive + std::iter::Sum {}
impl Real for f32 {}
impl Real for f64 {}

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tx(pub usize);

type BackwardFn<T> = Box<dyn Fn(&ArrayD<T>) -> Vec<ArrayD<T>>>;

struct Node<T> {
    name: &'static str,
    value: Arc<ArrayD<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Sum `g` down to `shape` (inverse of broadcasting).
fn reduce_to<T: Real>(mut g: ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, (&gd, &sd)) in g.shape().to_vec().iter().zip(shape).enumerate() {
        if sd == 1 && gd != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

/// Owned copy in standard (row-major) layout.
fn std_arr<T: Real>(a: &ArrayD<T>) -> ArrayD<T> {
    if a.is_standard_layout() {
        a.to_owned()
    } else {
        a.as_standard_layout().to_owned()
    }
}

fn to_2d<T: Real>(a: &ArrayD<T>) -> ndarray::Array2<T> {
    let k = *a.shape().last().expect("to_2d: scalar input");
    let n = a.len() / k;
    std_arr(a)
        .into_shape((n, k))
        .expect("to_2d: non-contiguous")
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, x: Tx) -> &ArrayD<T> {
        &self.nodes[x.0].value
    }

    pub fn value_arc(&self, x: Tx) -> Arc<ArrayD<T>> {
        self.nodes[x.0].value.clone()
    }

    /// Scalar value of a 0-d node.
    pub fn scalar(&self, x: Tx) -> T {
        let v = self.value(x);
        assert_eq!(v.len(), 1, "scalar: node has {} entries", v.len());
        *v.iter().next().unwrap()
    }

    fn push(
        &mut self,
        name: &'static str,
        value: ArrayD<T>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
    ) -> Tx {
        assert!(
            value.iter().all(|v| v.is_finite()),
            "non-finite output of op {name}"
        );
        self.nodes.push(Node {
            name,
            value: Arc::new(value),
            parents,
            backward,
        });
        Tx(self.nodes.len() - 1)
    }

    /// Node with no gradient flow (data, masks, precomputed biases).
    pub fn constant(&mut self, v: ArrayD<T>) -> Tx {
        self.push("constant", v, vec![], None)
    }

    /// Differentiable input (parameters and probe inputs).
    pub fn leaf(&mut self, v: ArrayD<T>) -> Tx {
        self.push("leaf", v, vec![], Some(Box::new(|_| vec![])))
    }

    pub fn add(&mut self, a: Tx, b: Tx) -> Tx {
        let (va, vb) = (self.value_arc(a), self.value_arc(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let out = &*va + &*vb;
        self.push(
            "add",
            out,
            vec![a.0, b.0],
            Some(Box::new(|g| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&mut self, a: Tx, b: Tx) -> Tx {
        let (va, vb) = (self.value_arc(a), self.value_arc(b));
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let out = &*va - &*vb;
        self.push(
            "sub",
            out,
            vec![a.0, b.0],
            Some(Box::new(|g| vec![g.clone(), g.mapv(|v| -v)])),
        )
    }

    /// `a + broadcast(b)`; gradients of `b` are sum-reduced back.
    pub fn add_b(&mut self, a: Tx, b: Tx) -> Tx {
        let (va, vb) = (self.value_arc(a), self.value_arc(b));
        let bb = vb
            .broadcast(va.raw_dim())
            .unwrap_or_else(|| panic!("add_b: cannot broadcast {:?} to {:?}", vb.shape(), va.shape()))
            .to_owned();
        let out = &*va + &bb;
        let bshape: Vec<usize> = vb.shape().to_vec();
        self.push(
            "add_b",
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                vec![g.clone(), reduce_to(g.clone(), &bshape)]
            })),
        )
    }

    pub fn mul(&mut self, a: Tx, b: Tx) -> Tx {
        let (va, vb) = (self.value_arc(a), self.value_arc(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let out = &*va * &*vb;
        self.push(
            "mul",
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g| vec![g * &*vb, g * &*va])),
        )
    }

    /// `a * broadcast(b)`.
    pub fn mul_b(&mut self, a: Tx, b: Tx) -> Tx {
        let (va, vb) = (self.value_arc(a), self.value_arc(b));
        let bb = vb
            .broadcast(va.raw_dim())
            .unwrap_or_else(|| panic!("mul_b: cannot broadcast {:?} to {:?}", vb.shape(), va.shape()))
            .to_owned();
        let out = &*va * &bb;
        let bshape: Vec<usize> = vb.shape().to_vec();
        self.push(
            "mul_b",
            out,
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                vec![g * &bb, reduce_to(g * &*va, &bshape)]
            })),
        )
    }

    pub fn neg(&mut self, a: Tx) -> Tx {
        let va = self.value_arc(a);
        let y = va.mapv(|v| -v);
        self.push(
            "neg",
            y,
            vec![a.0],
            Some(Box::new(|g| vec![g.mapv(|v| -v)])),
        )
    }

    pub fn scale(&mut self, a: Tx, c: T) -> Tx {
        let va = self.value_arc(a);
        self.push(
            "scale",
            &*va * c,
            vec![a.0],
            Some(Box::new(move |g| vec![g * c])),
        )
    }

    pub fn tanh(&mut self, a: Tx) -> Tx {
        let va = self.value_arc(a);
        let y = va.mapv(|v| v.tanh());
        let yc = y.clone();
        self.push(
            "tanh",
            y,
            vec![a.0],
            Some(Box::new(move |g| {
                vec![g * &yc.mapv(|v| T::one() - v * v)]
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Tx) -> Tx {
        let va = self.value_arc(a);
        let y = va.mapv(|v| T::one() / (T::one() + (-v).exp()));
        let yc = y.clone();
        self.push(
            "sigmoid",
            y,
            vec![a.0],
            Some(Box::new(move |g| {
                vec![g * &yc.mapv(|v| v * (T::one() - v))]
            })),
        )
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Tx) -> Tx {
        let va = self.value_arc(a);
        let sig = va.mapv(|v| T::one() / (T::one() + (-v).exp()));
        let y = &*va * &sig;
        self.push(
            "silu",
            y,
            vec![a.0],
            Some(Box::new(move |g| {
                let d = ndarray::Zip::from(&*va)
                    .and(&sig)
                    .map_collect(|&x, &s| s * (T::one() + x * (T::one() - s)));
                vec![g * &d]
            })),
        )
    }

    /// Affine map over the last axis: `x[..., k] . w[k, m] (+ b[m])`.
    pub fn linear(&mut self, x: Tx, w: Tx, b: Option<Tx>) -> Tx {
        let (vx, vw) = (self.value_arc(x), self.value_arc(w));
        assert_eq!(vw.ndim(), 2, "linear: weight must be 2-d");
        let k = vw.shape()[0];
        let m = vw.shape()[1];
        assert_eq!(
            *vx.shape().last().unwrap(),
            k,
            "linear: input last dim {} != weight rows {}",
            vx.shape().last().unwrap(),
            k
        );
        let x2 = to_2d(&vx);
        let w2 = vw.view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let mut y2 = x2.dot(&w2);
        if let Some(bt) = b {
            let vb = self.value_arc(bt);
            assert_eq!(vb.shape(), [m], "linear: bias shape");
            let b1 = vb.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            y2 += &b1;
        }
        let mut oshape: Vec<usize> = vx.shape().to_vec();
        *oshape.last_mut().unwrap() = m;
        let y = y2.into_shape(IxDyn(&oshape)).unwrap();
        let xshape: Vec<usize> = vx.shape().to_vec();
        let mut parents = vec![x.0, w.0];
        if let Some(bt) = b {
            parents.push(bt.0);
        }
        let has_bias = b.is_some();
        self.push(
            "linear",
            y,
            parents,
            Some(Box::new(move |g| {
                let g2 = to_2d(g);
                let x2 = to_2d(&vx);
                let gx = g2.dot(&w2.t()).into_shape(IxDyn(&xshape)).unwrap();
                let gw = x2.t().dot(&g2).into_dyn();
                let mut out = vec![gx, gw];
                if has_bias {
                    out.push(g2.sum_axis(Axis(0)).into_dyn());
                }
                out
            })),
        )
    }

    /// Batched matmul: `[B, n, k] x [B, k, m] -> [B, n, m]`.
    pub fn bmm(&mut self, a: Tx, b: Tx) -> Tx {
        let (va, vb) = (self.value_arc(a), self.value_arc(b));
        assert_eq!(va.ndim(), 3, "bmm: lhs must be 3-d");
        assert_eq!(vb.ndim(), 3, "bmm: rhs must be 3-d");
        let (bs, n, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let (bs2, k2, m) = (vb.shape()[0], vb.shape()[1], vb.shape()[2]);
        assert!(
            bs == bs2 && k == k2,
            "bmm: shapes {:?} x {:?}",
            va.shape(),
            vb.shape()
        );
        let mut y = ArrayD::<T>::zeros(IxDyn(&[bs, n, m]));
        for i in 0..bs {
            let ai = va
                .index_axis(Axis(0), i)
                .into_dimensionality::<Ix2>()
                .unwrap()
                .to_owned();
            let bi = vb
                .index_axis(Axis(0), i)
                .into_dimensionality::<Ix2>()
                .unwrap()
                .to_owned();
            y.index_axis_mut(Axis(0), i).assign(&ai.dot(&bi));
        }
        self.push(
            "bmm",
            y,
            vec![a.0, b.0],
            Some(Box::new(move |g| {
                let mut ga = ArrayD::<T>::zeros(va.raw_dim());
                let mut gb = ArrayD::<T>::zeros(vb.raw_dim());
                for i in 0..bs {
                    let gi = g
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<Ix2>()
                        .unwrap()
                        .to_owned();
                    let ai = va
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<Ix2>()
                        .unwrap()
                        .to_owned();
                    let bi = vb
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<Ix2>()
                        .unwrap()
                        .to_owned();
                    ga.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi.t()));
                    gb.index_axis_mut(Axis(0), i).assign(&ai.t().dot(&gi));
                }
                vec![ga, gb]
            })),
        )
    }

    pub fn permute(&mut self, x: Tx, axes: &[usize]) -> Tx {
        let vx = self.value_arc(x);
        assert_eq!(axes.len(), vx.ndim(), "permute: axes length");
        let y = vx
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let mut inv = vec![0usize; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inv[a] = i;
        }
        self.push(
            "permute",
            y,
            vec![x.0],
            Some(Box::new(move |g| {
                vec![g
                    .view()
                    .permuted_axes(IxDyn(&inv))
                    .as_standard_layout()
                    .to_owned()]
            })),
        )
    }

    pub fn reshape(&mut self, x: Tx, shape: &[usize]) -> Tx {
        let vx = self.value_arc(x);
        let y = std_arr(&vx)
            .into_shape(IxDyn(shape))
            .unwrap_or_else(|_| panic!("reshape: {:?} -> {:?}", vx.shape(), shape));
        let xshape: Vec<usize> = vx.shape().to_vec();
        self.push(
            "reshape",
            y,
            vec![x.0],
            Some(Box::new(move |g| {
                vec![std_arr(g).into_shape(IxDyn(&xshape)).unwrap()]
            })),
        )
    }

    /// Circular shift along `axis` by `shift` (positive = toward higher index).
    pub fn roll(&mut self, x: Tx, axis: usize, shift: isize) -> Tx {
        let vx = self.value_arc(x);
        let n = vx.shape()[axis] as isize;
        let s = shift.rem_euclid(n);
        if s == 0 {
            // still a node, to keep graph structure uniform
            return self.scale(x, T::one());
        }
        let head = vx.slice_axis(Axis(axis), Slice::from(..(n - s)));
        let tail = vx.slice_axis(Axis(axis), Slice::from((n - s)..));
        let y = ndarray::concatenate(Axis(axis), &[tail, head]).unwrap();
        self.push(
            "roll",
            y,
            vec![x.0],
            Some(Box::new(move |g| {
                let head = g.slice_axis(Axis(axis), Slice::from(..s));
                let tail = g.slice_axis(Axis(axis), Slice::from(s..));
                vec![ndarray::concatenate(Axis(axis), &[tail, head]).unwrap()]
            })),
        )
    }

    pub fn concat(&mut self, axis: usize, parts: &[Tx]) -> Tx {
        assert!(!parts.is_empty(), "concat: empty");
        let vals: Vec<Arc<ArrayD<T>>> = parts.iter().map(|p| self.value_arc(*p)).collect();
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let y = ndarray::concatenate(Axis(axis), &views).expect("concat: shape mismatch");
        let sizes: Vec<usize> = vals.iter().map(|v| v.shape()[axis]).collect();
        self.push(
            "concat",
            y,
            parts.iter().map(|p| p.0).collect(),
            Some(Box::new(move |g| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut off = 0isize;
                for &s in &sizes {
                    out.push(
                        g.slice_axis(Axis(axis), Slice::from(off..off + s as isize))
                            .to_owned(),
                    );
                    off += s as isize;
                }
                out
            })),
        )
    }

    pub fn slice_ax(&mut self, x: Tx, axis: usize, start: usize, end: usize) -> Tx {
        let vx = self.value_arc(x);
        assert!(end <= vx.shape()[axis] && start < end, "slice_ax: bad range");
        let y = vx
            .slice_axis(Axis(axis), Slice::from(start..end))
            .to_owned();
        let xdim = vx.raw_dim();
        self.push(
            "slice_ax",
            y,
            vec![x.0],
            Some(Box::new(move |g| {
                let mut gx = ArrayD::<T>::zeros(xdim.clone());
                gx.slice_axis_mut(Axis(axis), Slice::from(start..end))
                    .assign(g);
                vec![gx]
            })),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Tx) -> Tx {
        let vx = self.value_arc(x);
        let last = Axis(vx.ndim() - 1);
        let mut y = (*vx).clone();
        for mut lane in y.lanes_mut(last) {
            let mx = lane.iter().cloned().fold(T::neg_infinity(), T::max);
            lane.mapv_inplace(|v| (v - mx).exp());
            let s: T = lane.iter().cloned().sum();
            lane.mapv_inplace(|v| v / s);
        }
        let yc = y.clone();
        self.push(
            "softmax",
            y,
            vec![x.0],
            Some(Box::new(move |g| {
                let mut gx = g * &yc;
                for (mut glane, ylane) in gx.lanes_mut(last).into_iter().zip(yc.lanes(last)) {
                    let dot: T = glane.iter().cloned().sum();
                    ndarray::Zip::from(&mut glane)
                        .and(&ylane)
                        .for_each(|gl, &yl| *gl = *gl - yl * dot);
                }
                vec![gx]
            })),
        )
    }

    /// LayerNorm over the last axis, no affine part.
    pub fn layernorm_last(&mut self, x: Tx, eps: T) -> Tx {
        let vx = self.value_arc(x);
        let last = Axis(vx.ndim() - 1);
        let d = T::from_usize(vx.shape()[vx.ndim() - 1]).unwrap();
        let mut y = (*vx).clone();
        let mut inv_std = Vec::new();
        for mut lane in y.lanes_mut(last) {
            let mu: T = lane.iter().cloned().sum::<T>() / d;
            let var: T = lane.iter().map(|v| (*v - mu) * (*v - mu)).sum::<T>() / d;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            lane.mapv_inplace(|v| (v - mu) * is);
        }
        let yc = y.clone();
        self.push(
            "layernorm",
            y,
            vec![x.0],
            Some(Box::new(move |g| {
                let mut gx = g.to_owned();
                for ((mut glane, ylane), &is) in gx
                    .lanes_mut(last)
                    .into_iter()
                    .zip(yc.lanes(last))
                    .zip(inv_std.iter())
                {
                    let gmean: T = glane.iter().cloned().sum::<T>() / d;
                    let gydot: T = glane
                        .iter()
                        .zip(ylane.iter())
                        .map(|(a, b)| *a * *b)
                        .sum::<T>()
                        / d;
                    ndarray::Zip::from(&mut glane)
                        .and(&ylane)
                        .for_each(|gl, &yl| *gl = is * (*gl - gmean - yl * gydot));
                }
                vec![gx]
            })),
        )
    }

    /// Gather along axis 0: `out[i] = x[idx[i]]`. Repeats allowed; backward
    /// scatter-adds.
    pub fn gather0(&mut self, x: Tx, idx: Arc<Vec<usize>>) -> Tx {
        let vx = self.value_arc(x);
        let n0 = vx.shape()[0];
        assert!(idx.iter().all(|i| *i < n0), "gather0: index out of range");
        let mut oshape: Vec<usize> = vx.shape().to_vec();
        oshape[0] = idx.len();
        let mut y = ArrayD::<T>::zeros(IxDyn(&oshape));
        for (i, &j) in idx.iter().enumerate() {
            y.index_axis_mut(Axis(0), i).assign(&vx.index_axis(Axis(0), j));
        }
        let xdim = vx.raw_dim();
        let idxc = idx.clone();
        self.push(
            "gather0",
            y,
            vec![x.0],
            Some(Box::new(move |g| {
                let mut gx = ArrayD::<T>::zeros(xdim.clone());
                for (i, &j) in idxc.iter().enumerate() {
                    let gi = g.index_axis(Axis(0), i);
                    let mut tgt = gx.index_axis_mut(Axis(0), j);
                    tgt += &gi;
                }
                vec![gx]
            })),
        )
    }

    pub fn sum_all(&mut self, x: Tx) -> Tx {
        let vx = self.value_arc(x);
        let s: T = vx.iter().cloned().sum();
        let y = ArrayD::from_elem(IxDyn(&[]), s);
        let xdim = vx.raw_dim();
        self.push(
            "sum_all",
            y,
            vec![x.0],
            Some(Box::new(move |g| {
                let gv = *g.iter().next().unwrap();
                vec![ArrayD::from_elem(xdim.clone(), gv)]
            })),
        )
    }

    pub fn mean_all(&mut self, x: Tx) -> Tx {
        let vx = self.value_arc(x);
        let n = T::from_usize(vx.len()).unwrap();
        let s: T = vx.iter().cloned().sum::<T>() / n;
        let y = ArrayD::from_elem(IxDyn(&[]), s);
        let xdim = vx.raw_dim();
        self.push(
            "mean_all",
            y,
            vec![x.0],
            Some(Box::new(move |g| {
                let gv = *g.iter().next().unwrap() / n;
                vec![ArrayD::from_elem(xdim.clone(), gv)]
            })),
        )
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Tx) -> Grads<T> {
        assert_eq!(
            self.value(root).len(),
            1,
            "backward: root must be scalar, got shape {:?}",
            self.value(root).shape()
        );
        let mut grads: Vec<Option<ArrayD<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(ArrayD::from_elem(
            self.value(root).raw_dim(),
            T::one(),
        ));
        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            if let Some(back) = &node.backward {
                if !node.parents.is_empty() {
                    let pg = back(&g);
                    assert_eq!(
                        pg.len(),
                        node.parents.len(),
                        "backward of {} returned {} grads for {} parents",
                        node.name,
                        pg.len(),
                        node.parents.len()
                    );
                    for (p, gp) in node.parents.iter().zip(pg) {
                        if self.nodes[*p].backward.is_none() {
                            continue; // constants absorb no gradient
                        }
                        assert_eq!(
                            gp.shape(),
                            self.nodes[*p].value.shape(),
                            "backward of {}: grad shape {:?} vs parent {:?}",
                            node.name,
                            gp.shape(),
                            self.nodes[*p].value.shape()
                        );
                        match &mut grads[*p] {
                            Some(acc) => *acc += &gp,
                            slot => *slot = Some(gp),
                        }
                    }
                }
            }
            grads[i] = Some(g);
        }
        Grads { grads }
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of a backward pass.
pub struct Grads<T> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Real> Grads<T> {
    /// Gradient of the root with respect to node `x`; zero-shaped `None`
    /// means the node did not influence the root.
    pub fn get(&self, x: Tx) -> Option<&ArrayD<T>> {
        self.grads.get(x.0).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    /// Central finite-difference check of `d f / d x0` for a graph builder
    /// that maps one leaf to a scalar root. Panics on relative error above
    /// `tol` (relative to max(|fd|, |an|, 1e-8) per entry).
    pub fn fd_check<F>(build: F, x0: ArrayD<f64>, h: f64, tol: f64)
    where
        F: Fn(&mut Tape<f64>, Tx) -> Tx,
    {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(x0.clone());
        let root = build(&mut tape, x);
        let grads = tape.backward(root);
        let an = grads
            .get(x)
            .expect("no gradient reached the leaf")
            .as_standard_layout()
            .to_owned();

        let n = x0.len();
        for i in 0..n {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            {
                let sp = xp.as_slice_mut().unwrap();
                sp[i] += h;
            }
            {
                let sm = xm.as_slice_mut().unwrap();
                sm[i] -= h;
            }
            let fp = {
                let mut t = Tape::<f64>::new();
                let x = t.leaf(xp);
                let r = build(&mut t, x);
                t.scalar(r)
            };
            let fm = {
                let mut t = Tape::<f64>::new();
                let x = t.leaf(xm);
                let r = build(&mut t, x);
                t.scalar(r)
            };
            let fd = (fp - fm) / (2.0 * h);
            let a = an.as_slice().unwrap()[i];
            let denom = fd.abs().max(a.abs()).max(1e-8);
            assert!(
                (fd - a).abs() / denom < tol,
                "grad mismatch at {i}: fd={fd} analytic={a}"
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::fd_check;
    use super::*;
    use crate::rng::{stream, StreamKind};
    use rand::Rng;

    fn rand_arr(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = stream(seed, StreamKind::Oracle, 100);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    const H: f64 = 1e-4;
    const TOL: f64 = 1e-5;

    #[test]
    fn forward_values_match_hand_computation() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(ndarray::arr1(&[1.0, 2.0]).into_dyn());
        let b = t.leaf(ndarray::arr1(&[3.0, -1.0]).into_dyn());
        let s = t.add(a, b);
        let p = t.mul(s, s);
        let m = t.mean_all(p);
        // ((1+3)^2 + (2-1)^2)/2 = (16+1)/2
        assert!((t.scalar(m) - 8.5).abs() < 1e-12);
    }

    #[test]
    fn grad_of_simple_chain_matches_hand_value() {
        // f = mean((2x)^2) => df/dx = 4x / n * 2 = 8x/n
        let mut t = Tape::<f64>::new();
        let x = t.leaf(ndarray::arr1(&[1.0, -2.0]).into_dyn());
        let y = t.scale(x, 2.0);
        let p = t.mul(y, y);
        let m = t.mean_all(p);
        let g = t.backward(m);
        let gx = g.get(x).unwrap();
        assert!((gx[[0]] - 4.0).abs() < 1e-12);
        assert!((gx[[1]] + 8.0).abs() < 1e-12);
    }

    #[test]
    fn fd_elementwise_ops() {
        let x0 = rand_arr(&[3, 4], 1);
        fd_check(|t, x| { let y = t.tanh(x); t.mean_all(y) }, x0.clone(), H, TOL);
        fd_check(|t, x| { let y = t.sigmoid(x); t.mean_all(y) }, x0.clone(), H, TOL);
        fd_check(|t, x| { let y = t.silu(x); t.mean_all(y) }, x0.clone(), H, TOL);
        fd_check(|t, x| { let y = t.neg(x); let z = t.mul(y, y); t.sum_all(z) }, x0.clone(), H, TOL);
        fd_check(
            |t, x| {
                let c = t.constant(rand_arr(&[3, 4], 2));
                let y = t.mul(x, c);
                let z = t.add(y, x);
                t.mean_all(z)
            },
            x0,
            H,
            TOL,
        );
    }

    #[test]
    fn fd_broadcast_ops() {
        // x broadcast as the small side of add_b / mul_b
        let x0 = rand_arr(&[4], 3);
        fd_check(
            |t, x| {
                let a = t.constant(rand_arr(&[3, 4], 4));
                let y = t.add_b(a, x);
                let z = t.mul(y, y);
                t.mean_all(z)
            },
            x0.clone(),
            H,
            TOL,
        );
        fd_check(
            |t, x| {
                let a = t.constant(rand_arr(&[3, 4], 5));
                let y = t.mul_b(a, x);
                t.sum_all(y)
            },
            x0,
            H,
            TOL,
        );
    }

    #[test]
    fn fd_linear_all_inputs() {
        let x0 = rand_arr(&[2, 3, 5], 6);
        let w0 = rand_arr(&[5, 4], 7);
        let b0 = rand_arr(&[4], 8);
        // wrt x
        fd_check(
            |t, x| {
                let w = t.constant(w0.clone());
                let b = t.constant(b0.clone());
                let y = t.linear(x, w, Some(b));
                let z = t.mul(y, y);
                t.mean_all(z)
            },
            x0.clone(),
            H,
            TOL,
        );
        // wrt w
        fd_check(
            |t, w| {
                let x = t.constant(x0.clone());
                let b = t.constant(b0.clone());
                let y = t.linear(x, w, Some(b));
                let z = t.mul(y, y);
                t.mean_all(z)
            },
            w0.clone(),
            H,
            TOL,
        );
        // wrt b
        fd_check(
            |t, b| {
                let x = t.constant(x0.clone());
                let w = t.constant(w0.clone());
                let y = t.linear(x, w, Some(b));
                let z = t.mul(y, y);
                t.mean_all(z)
            },
            b0,
            H,
            TOL,
        );
    }

    #[test]
    fn fd_bmm_both_sides() {
        let a0 = rand_arr(&[2, 3, 4], 9);
        let b0 = rand_arr(&[2, 4, 5], 10);
        fd_check(
            |t, a| {
                let b = t.constant(b0.clone());
                let y = t.bmm(a, b);
                let z = t.mul(y, y);
                t.mean_all(z)
            },
            a0.clone(),
            H,
            TOL,
        );
        fd_check(
            |t, b| {
                let a = t.constant(a0.clone());
                let y = t.bmm(a, b);
                let z = t.mul(y, y);
                t.mean_all(z)
            },
            b0,
            H,
            TOL,
        );
    }

    #[test]
    fn fd_shape_ops() {
        let x0 = rand_arr(&[2, 3, 4], 11);
        let c = rand_arr(&[3, 4, 2], 12);
        fd_check(
            |t, x| {
                let p = t.permute(x, &[1, 2, 0]);
                let cc = t.constant(c.clone());
                let y = t.mul(p, cc);
                t.mean_all(y)
            },
            x0.clone(),
            H,
            TOL,
        );
        let c2 = rand_arr(&[6, 4], 13);
        fd_check(
            |t, x| {
                let r = t.reshape(x, &[6, 4]);
                let cc = t.constant(c2.clone());
                let y = t.mul(r, cc);
                t.sum_all(y)
            },
            x0.clone(),
            H,
            TOL,
        );
        let c3 = rand_arr(&[2, 3, 4], 14);
        fd_check(
            |t, x| {
                let r = t.roll(x, 2, 3);
                let cc = t.constant(c3.clone());
                let y = t.mul(r, cc);
                t.sum_all(y)
            },
            x0.clone(),
            H,
            TOL,
        );
        fd_check(
            |t, x| {
                let s = t.slice_ax(x, 1, 1, 3);
                let z = t.mul(s, s);
                t.sum_all(z)
            },
            x0.clone(),
            H,
            TOL,
        );
        let c4 = rand_arr(&[2, 6, 4], 15);
        fd_check(
            |t, x| {
                let y = t.concat(1, &[x, x]);
                let cc = t.constant(c4.clone());
                let z = t.mul(y, cc);
                t.sum_all(z)
            },
            x0,
            H,
            TOL,
        );
    }

    #[test]
    fn fd_softmax_layernorm_gather() {
        let x0 = rand_arr(&[2, 3, 5], 16);
        let c = rand_arr(&[2, 3, 5], 17);
        fd_check(
            |t, x| {
                let y = t.softmax_last(x);
                let cc = t.constant(c.clone());
                let z = t.mul(y, cc);
                t.sum_all(z)
            },
            x0.clone(),
            H,
            TOL,
        );
        fd_check(
            |t, x| {
                let y = t.layernorm_last(x, 1e-5);
                let cc = t.constant(c.clone());
                let z = t.mul(y, cc);
                t.sum_all(z)
            },
            x0,
            H,
            TOL,
        );
        let table = rand_arr(&[6, 3], 18);
        let c2 = rand_arr(&[5, 3], 19);
        fd_check(
            |t, x| {
                let idx = Arc::new(vec![0usize, 2, 2, 5, 1]);
                let y = t.gather0(x, idx);
                let cc = t.constant(c2.clone());
                let z = t.mul(y, cc);
                t.sum_all(z)
            },
            table,
            H,
            TOL,
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(rand_arr(&[4, 7], 20) * 5.0);
        let y = t.softmax_last(x);
        for lane in t.value(y).lanes(Axis(1)) {
            let s: f64 = lane.sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_block_gradients() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(rand_arr(&[3], 21));
        let c = t.constant(rand_arr(&[3], 22));
        let y = t.mul(x, c);
        let m = t.sum_all(y);
        let g = t.backward(m);
        assert!(g.get(x).is_some());
        assert!(g.get(c).is_none());
    }

    #[test]
    fn diamond_graph_accumulates() {
        // f = sum(x*x + x*x) -> grad 4x
        let mut t = Tape::<f64>::new();
        let x = t.leaf(ndarray::arr1(&[1.5, -0.5]).into_dyn());
        let a = t.mul(x, x);
        let b = t.mul(x, x);
        let s = t.add(a, b);
        let m = t.sum_all(s);
        let g = t.backward(m);
        let gx = g.get(x).unwrap();
        assert!((gx[[0]] - 6.0).abs() < 1e-12);
        assert!((gx[[1]] + 2.0).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn add_shape_mismatch_panics() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(rand_arr(&[3], 23));
        let b = t.leaf(rand_arr(&[4], 24));
        t.add(a, b);
    }
}
