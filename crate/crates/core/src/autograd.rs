//! Reverse-mode automatic differentiation on a recording tape.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. [`Var`] is a
//! cheap copyable handle into it. Calling [`Tape::backward`] on a scalar node
//! walks the tape in reverse and returns [`Grads`].
//!
//! Parameters enter the tape through [`Tape::param`]; repeated requests for
//! the same parameter index return the same leaf, so a module applied twice
//! (the shared encoder) accumulates both contributions into one gradient.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::kernels::{self, ConvGeom};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    op: &'static str,
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    needs_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Recording context for one forward/backward pass.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<usize, usize>>,
    recording: bool,
}

/// Handle to a node on a [`Tape`].
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A tape that records backward functions.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            recording: true,
        }
    }

    /// A tape that only evaluates; [`Tape::backward`] yields no gradients.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of nodes produced by the named op.
    pub fn op_count(&self, op: &str) -> usize {
        self.nodes.borrow().iter().filter(|n| n.op == op).count()
    }

    /// Parameter indices that entered this tape.
    pub fn used_params(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.params.borrow().keys().copied().collect();
        v.sort_unstable();
        v
    }

    /// How many op nodes consume the leaf of parameter `index`.
    pub fn param_consumers(&self, index: usize) -> usize {
        let Some(&leaf) = self.params.borrow().get(&index) else {
            return 0;
        };
        self.nodes
            .borrow()
            .iter()
            .filter(|n| n.parents.contains(&leaf))
            .count()
    }

    fn push(
        &self,
        op: &'static str,
        value: Tensor<T>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = self.recording && parents.iter().any(|&p| nodes[p].needs_grad);
        let backward = if needs_grad { backward } else { None };
        nodes.push(Node {
            op,
            value: Rc::new(value),
            parents,
            needs_grad,
            backward,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push_leaf(&self, op: &'static str, value: Tensor<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value: Rc::new(value),
            parents: Vec::new(),
            needs_grad: needs_grad && self.recording,
            backward: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A constant input; gradients do not flow into it.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf("constant", value, false)
    }

    /// A free input whose gradient is wanted (used by gradient checks).
    pub fn input(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf("input", value, true)
    }

    /// The leaf for parameter `index`, created on first use.
    pub fn param(&self, index: usize, value: &Tensor<T>) -> Var<'_, T> {
        if let Some(&id) = self.params.borrow().get(&index) {
            return Var { tape: self, id };
        }
        let v = self.push_leaf("param", value.clone(), true);
        self.params.borrow_mut().insert(index, v.id);
        v
    }

    /// Records a custom differentiable op.
    ///
    /// `backward` receives the upstream gradient and a per-parent "needed"
    /// mask and returns one optional gradient per parent.
    pub fn custom(
        &self,
        op: &'static str,
        parents: &[Var<'_, T>],
        value: Tensor<T>,
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'_, T> {
        self.push(op, value, parents.iter().map(|p| p.id).collect(), Some(Box::new(backward)))
    }

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var<'_, T>) -> Grads<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(Tensor::full(nodes[root.id].value.shape(), T::one()));
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(bw) = &node.backward {
                let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].needs_grad).collect();
                let parent_grads = bw(&g, &needs);
                debug_assert_eq!(parent_grads.len(), node.parents.len(), "op {} returned wrong arity", node.op);
                for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                    let Some(pg) = pg else { continue };
                    if !need {
                        continue;
                    }
                    debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "op {} grad shape", node.op);
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(g);
        }
        let params = self.params.borrow().clone();
        Grads { grads, params }
    }
}

/// Result of a reverse sweep.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<usize, usize>,
}

impl<T: Scalar> Grads<T> {
    pub fn of(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn param(&self, index: usize) -> Option<&Tensor<T>> {
        self.params
            .get(&index)
            .and_then(|&id| self.grads.get(id))
            .and_then(|g| g.as_ref())
    }
}

fn unbroadcast<T: Scalar>(grad: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if grad.shape() == target {
        return grad.clone();
    }
    let (n, c, h, w) = grad.dims4();
    let mut out = Tensor::zeros(target);
    let (tn, tc, th, tw) = (target[0], target[1], target[2], target[3]);
    let data = grad.data();
    let od = out.data_mut();
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let src = ((b * c + ch) * h + y) * w + x;
                    let dst = (((b % tn) * tc + ch % tc) * th + y % th) * tw + x % tw;
                    od[dst] += data[src];
                }
            }
        }
    }
    out
}

fn broadcast_index(shape: &[usize], b: usize, c: usize, y: usize, x: usize) -> usize {
    let (n0, c0, h0, w0) = (shape[0], shape[1], shape[2], shape[3]);
    (((if n0 == 1 { 0 } else { b }) * c0 + if c0 == 1 { 0 } else { c }) * h0 + if h0 == 1 { 0 } else { y }) * w0
        + if w0 == 1 { 0 } else { x }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != 4 || b.len() != 4 {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        })
        .collect()
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Scalar value of a single-element node.
    pub fn item(&self) -> T {
        self.value().data()[0]
    }

    pub fn conv2d(self, w: Var<'t, T>, bias: Option<Var<'t, T>>, g: ConvGeom) -> Var<'t, T> {
        let x = self.value();
        let wv = w.value();
        let bv = bias.map(|b| b.value());
        let out = kernels::conv2d_forward(&x, &wv, bv.as_deref(), g);
        let mut parents = vec![self, w];
        parents.extend(bias);
        let has_bias = bias.is_some();
        self.tape.custom("conv2d", &parents, out, move |grad, needs| {
            let (gx, gw, gb) = kernels::conv2d_backward(&x, &wv, grad, g, needs[0], needs[1], has_bias && needs[2]);
            let mut v = vec![gx, gw];
            if has_bias {
                v.push(gb);
            }
            v
        })
    }

    pub fn relu(self) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(|v| v.max(T::zero()));
        self.tape.custom("relu", &[self], out, move |grad, _| {
            vec![Some(grad.zip_map(&x, |g, v| if v > T::zero() { g } else { T::zero() }))]
        })
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let out = self.value().map(sigmoid);
        let y = Rc::new(out.clone());
        self.tape.custom("sigmoid", &[self], out, move |grad, _| {
            vec![Some(grad.zip_map(&y, |g, s| g * s * (T::one() - s)))]
        })
    }

    /// Elementwise sum with rank-4 broadcasting over unit dimensions.
    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'t, T>) -> Var<'t, T> {
        let a = self.value();
        let b = other.value();
        if a.shape() == b.shape() {
            let out = a.zip_map(&b, |x, y| x + y);
            return self.tape.custom("add", &[self, other], out, |grad, _| {
                vec![Some(grad.clone()), Some(grad.clone())]
            });
        }
        let shape = broadcast_shape(a.shape(), b.shape())
            .unwrap_or_else(|| panic!("add: incompatible shapes {:?} and {:?}", a.shape(), b.shape()));
        let out = broadcast_binary(&a, &b, &shape, |x, y| x + y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.tape.custom("add", &[self, other], out, move |grad, _| {
            vec![Some(unbroadcast(grad, &sa)), Some(unbroadcast(grad, &sb))]
        })
    }

    /// Elementwise product with rank-4 broadcasting over unit dimensions.
    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'t, T>) -> Var<'t, T> {
        let a = self.value();
        let b = other.value();
        if a.shape() == b.shape() {
            let out = a.zip_map(&b, |x, y| x * y);
            return self.tape.custom("mul", &[self, other], out, move |grad, needs| {
                vec![
                    needs[0].then(|| grad.zip_map(&b, |g, y| g * y)),
                    needs[1].then(|| grad.zip_map(&a, |g, x| g * x)),
                ]
            });
        }
        let shape = broadcast_shape(a.shape(), b.shape())
            .unwrap_or_else(|| panic!("mul: incompatible shapes {:?} and {:?}", a.shape(), b.shape()));
        let out = broadcast_binary(&a, &b, &shape, |x, y| x * y);
        self.tape.custom("mul", &[self, other], out, move |grad, needs| {
            let ga = needs[0].then(|| {
                let full = broadcast_binary(grad, &b, grad.shape(), |g, y| g * y);
                unbroadcast(&full, a.shape())
            });
            let gb = needs[1].then(|| {
                let full = broadcast_binary(grad, &a, grad.shape(), |g, x| g * x);
                unbroadcast(&full, b.shape())
            });
            vec![ga, gb]
        })
    }

    pub fn scale(self, factor: T) -> Var<'t, T> {
        let out = self.value().scale(factor);
        self.tape
            .custom("scale", &[self], out, move |grad, _| vec![Some(grad.scale(factor))])
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t, T> {
        let old = self.shape();
        let out = (*self.value()).clone().reshaped(shape).expect("reshape");
        self.tape.custom("reshape", &[self], out, move |grad, _| {
            vec![Some(grad.clone().reshaped(&old).expect("reshape back"))]
        })
    }

    /// Rows `[start, end)` along the leading axis.
    pub fn slice_rows(self, start: usize, end: usize) -> Var<'t, T> {
        let full = self.shape();
        let out = self.value().slice_rows(start, end);
        self.tape.custom("slice_rows", &[self], out, move |grad, _| {
            let row: usize = full[1..].iter().product();
            let mut g = Tensor::zeros(&full);
            g.data_mut()[start * row..end * row].copy_from_slice(grad.data());
            vec![Some(g)]
        })
    }

    /// Bilinear resize of the two trailing axes of a rank-4 tensor.
    pub fn resize(self, oh: usize, ow: usize) -> Var<'t, T> {
        let (n, c, h, w) = self.value().dims4();
        if (h, w) == (oh, ow) {
            return self;
        }
        let data = kernels::resize_planes(self.value().data(), n * c, h, w, oh, ow);
        let out = Tensor::new(vec![n, c, oh, ow], data).unwrap();
        self.tape.custom("resize", &[self], out, move |grad, _| {
            let g = kernels::resize_planes_backward(grad.data(), n * c, h, w, oh, ow);
            vec![Some(Tensor::new(vec![n, c, h, w], g).unwrap())]
        })
    }

    /// `(N, C, H, W) -> (N*H*W, C)`: one row per pixel.
    pub fn pixel_rows(self) -> Var<'t, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let plane = h * w;
        let mut out = Tensor::zeros(&[n * plane, c]);
        for b in 0..n {
            for ch in 0..c {
                for p in 0..plane {
                    out.data_mut()[(b * plane + p) * c + ch] = x.data()[(b * c + ch) * plane + p];
                }
            }
        }
        self.tape.custom("pixel_rows", &[self], out, move |grad, _| {
            let mut g = Tensor::zeros(&[n, c, h, w]);
            for b in 0..n {
                for ch in 0..c {
                    for p in 0..plane {
                        g.data_mut()[(b * c + ch) * plane + p] = grad.data()[(b * plane + p) * c + ch];
                    }
                }
            }
            vec![Some(g)]
        })
    }

    /// `a (M, K) * b^T` with `b (P, K)`, giving `(M, P)`.
    pub fn matmul_nt(self, other: Var<'t, T>) -> Var<'t, T> {
        let a = self.value();
        let b = other.value();
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let (p, kb) = (b.shape()[0], b.shape()[1]);
        assert_eq!(k, kb, "matmul_nt inner dims {k} vs {kb}");
        let mut out = Tensor::zeros(&[m, p]);
        T::gemm(m, k, p, T::one(), a.data(), (k, 1), b.data(), (1, k), T::zero(), out.data_mut(), (p, 1));
        self.tape.custom("matmul_nt", &[self, other], out, move |grad, needs| {
            // da = grad (M,P) * b (P,K); db = grad^T (P,M) * a (M,K)
            let ga = needs[0].then(|| {
                let mut g = Tensor::zeros(&[m, k]);
                T::gemm(m, p, k, T::one(), grad.data(), (p, 1), b.data(), (k, 1), T::zero(), g.data_mut(), (k, 1));
                g
            });
            let gb = needs[1].then(|| {
                let mut g = Tensor::zeros(&[p, k]);
                T::gemm(p, m, k, T::one(), grad.data(), (1, p), a.data(), (k, 1), T::zero(), g.data_mut(), (k, 1));
                g
            });
            vec![ga, gb]
        })
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(self) -> Var<'t, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let mut arg = vec![0usize; n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    let base = p * h * w;
                    let cands = [
                        base + 2 * y * w + 2 * xx,
                        base + 2 * y * w + 2 * xx + 1,
                        base + (2 * y + 1) * w + 2 * xx,
                        base + (2 * y + 1) * w + 2 * xx + 1,
                    ];
                    let mut best = cands[0];
                    for &q in &cands[1..] {
                        if x.data()[q] > x.data()[best] {
                            best = q;
                        }
                    }
                    let o = (p * oh + y) * ow + xx;
                    out.data_mut()[o] = x.data()[best];
                    arg[o] = best;
                }
            }
        }
        let in_shape = x.shape().to_vec();
        self.tape.custom("max_pool2", &[self], out, move |grad, _| {
            let mut g = Tensor::zeros(&in_shape);
            for (o, &src) in arg.iter().enumerate() {
                g.data_mut()[src] += grad.data()[o];
            }
            vec![Some(g)]
        })
    }

    /// `(R, B*block) -> (R, B)`: maximum within each contiguous column block.
    pub fn block_max(self, block: usize) -> Var<'t, T> {
        let x = self.value();
        let (r, cols) = (x.shape()[0], x.shape()[1]);
        assert!(block > 0 && cols % block == 0, "block_max: {cols} columns not divisible by {block}");
        let nb = cols / block;
        let mut out = Tensor::zeros(&[r, nb]);
        let mut arg = vec![0usize; r * nb];
        for i in 0..r {
            for j in 0..nb {
                let seg = &x.data()[i * cols + j * block..i * cols + (j + 1) * block];
                let (mut best, mut best_v) = (0, seg[0]);
                for (q, &v) in seg.iter().enumerate().skip(1) {
                    if v > best_v {
                        best = q;
                        best_v = v;
                    }
                }
                out.data_mut()[i * nb + j] = best_v;
                arg[i * nb + j] = i * cols + j * block + best;
            }
        }
        self.tape.custom("block_max", &[self], out, move |grad, _| {
            let mut g = Tensor::zeros(&[r, cols]);
            for (slot, &src) in arg.iter().enumerate() {
                g.data_mut()[src] += grad.data()[slot];
            }
            vec![Some(g)]
        })
    }

    /// Mean over the trailing axis; `(R, K) -> (R,)` and `(K,) -> (1,)`.
    pub fn mean_cols(self) -> Var<'t, T> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let k = *in_shape.last().expect("mean_cols on a rank-0 tensor");
        let r = x.len() / k;
        let inv = T::one() / T::from_usize(k).unwrap();
        let out = Tensor::from_fn(&[r], |i| x.data()[i * k..(i + 1) * k].iter().copied().sum::<T>() * inv);
        self.tape.custom("mean_cols", &[self], out, move |grad, _| {
            vec![Some(Tensor::from_fn(&in_shape, |i| grad.data()[i / k] * inv))]
        })
    }

    /// Softmax over contiguous segments of length `segment` of the flattened tensor.
    pub fn softmax_segments(self, segment: usize) -> Var<'t, T> {
        let x = self.value();
        assert!(segment > 0 && x.len().is_multiple_of(segment), "softmax segment {segment} does not tile {}", x.len());
        let mut out = (*x).clone();
        for seg in out.data_mut().chunks_mut(segment) {
            let m = seg.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in seg.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in seg.iter_mut() {
                *v /= s;
            }
        }
        let y = Rc::new(out.clone());
        self.tape.custom("softmax", &[self], out, move |grad, _| {
            let mut g = Tensor::zeros(y.shape());
            for ((gs, ys), dst) in grad
                .data()
                .chunks(segment)
                .zip(y.data().chunks(segment))
                .zip(g.data_mut().chunks_mut(segment))
            {
                let dot: T = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum();
                for ((d, &gv), &yv) in dst.iter_mut().zip(gs).zip(ys) {
                    *d = yv * (gv - dot);
                }
            }
            vec![Some(g)]
        })
    }

    /// `(N, C, H, W) -> (1, C, 1, 1)`: mean over batch and space.
    pub fn mean_nhw(self) -> Var<'t, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let plane = h * w;
        let inv = T::one() / T::from_usize(n * plane).unwrap();
        let mut out = Tensor::zeros(&[1, c, 1, 1]);
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                out.data_mut()[ch] += x.data()[off..off + plane].iter().copied().sum::<T>();
            }
        }
        let out = out.scale(inv);
        self.tape.custom("mean_nhw", &[self], out, move |grad, _| {
            vec![Some(Tensor::from_fn(&[n, c, h, w], |i| grad.data()[(i / plane) % c] * inv))]
        })
    }

    /// `(N, C, H, W) -> (N, C)`: global average pooling.
    pub fn gap(self) -> Var<'t, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let plane = h * w;
        let inv = T::one() / T::from_usize(plane).unwrap();
        let out = Tensor::from_fn(&[n, c], |i| x.data()[i * plane..(i + 1) * plane].iter().copied().sum::<T>() * inv);
        self.tape.custom("gap", &[self], out, move |grad, _| {
            vec![Some(Tensor::from_fn(&[n, c, h, w], |i| grad.data()[i / plane] * inv))]
        })
    }

    /// `(R, C) -> (C,)`: mean of rows `[start, end)`.
    pub fn mean_rows(self, start: usize, end: usize) -> Var<'t, T> {
        let x = self.value();
        let (r, c) = (x.shape()[0], x.shape()[1]);
        assert!(start < end && end <= r, "mean_rows range {start}..{end} out of {r}");
        let inv = T::one() / T::from_usize(end - start).unwrap();
        let out = Tensor::from_fn(&[c], |j| (start..end).map(|i| x.data()[i * c + j]).sum::<T>() * inv);
        self.tape.custom("mean_rows", &[self], out, move |grad, _| {
            let mut g = Tensor::zeros(&[r, c]);
            for i in start..end {
                for j in 0..c {
                    g.data_mut()[i * c + j] = grad.data()[j] * inv;
                }
            }
            vec![Some(g)]
        })
    }

    /// `x (N, C) * w^T + b` with `w (K, C)`, `b (K,)`.
    pub fn linear(self, w: Var<'t, T>, b: Var<'t, T>) -> Var<'t, T> {
        let k = w.shape()[0];
        let n = self.shape()[0];
        let y = self.matmul_nt(w);
        let bias = b.value();
        let out = Tensor::from_fn(&[n, k], |i| y.value().data()[i] + bias.data()[i % k]);
        self.tape.custom("linear_bias", &[y, b], out, move |grad, _| {
            let mut gb = Tensor::zeros(&[k]);
            for (i, &g) in grad.data().iter().enumerate() {
                gb.data_mut()[i % k] += g;
            }
            vec![Some(grad.clone()), Some(gb)]
        })
    }

    /// Sum of a weighted list of single-element nodes.
    pub fn weighted_sum(terms: &[(Var<'t, T>, T)]) -> Var<'t, T> {
        let tape = terms[0].0.tape;
        let total = terms.iter().fold(T::zero(), |acc, (v, w)| acc + *w * v.item());
        let weights: Vec<T> = terms.iter().map(|(_, w)| *w).collect();
        let parents: Vec<Var<'t, T>> = terms.iter().map(|(v, _)| *v).collect();
        tape.custom("weighted_sum", &parents, Tensor::scalar(total), move |grad, _| {
            weights.iter().map(|&w| Some(Tensor::scalar(grad.data()[0] * w))).collect()
        })
    }

    /// Concatenation along the leading axis.
    pub fn concat_rows(parts: &[Var<'t, T>]) -> Var<'t, T> {
        let tape = parts[0].tape;
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat_rows(&refs).expect("concat_rows");
        let rows: Vec<usize> = values.iter().map(|v| v.shape()[0]).collect();
        tape.custom("concat_rows", parts, out, move |grad, _| {
            let mut start = 0;
            rows.iter()
                .map(|&r| {
                    let g = grad.slice_rows(start, start + r);
                    start += r;
                    Some(g)
                })
                .collect()
        })
    }
}

fn broadcast_binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, shape: &[usize], f: impl Fn(T, T) -> T) -> Tensor<T> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut out = Tensor::zeros(shape);
    let od = out.data_mut();
    let mut i = 0;
    for bi in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    od[i] = f(
                        a.data()[broadcast_index(a.shape(), bi, ch, y, x)],
                        b.data()[broadcast_index(b.shape(), bi, ch, y, x)],
                    );
                    i += 1;
                }
            }
        }
    }
    out
}

/// Logistic function with the argument clamped to `[-30, 30]`.
pub fn sigmoid<T: Scalar>(v: T) -> T {
    let bound: T = lit(30.0);
    let z = v.max(-bound).min(bound);
    T::one() / (T::one() + (-z).exp())
}
