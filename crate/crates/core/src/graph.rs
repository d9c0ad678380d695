//! Reverse-mode automatic differentiation on a tape.
//!
//! Every backward rule is written in terms of graph operations, so when
//! [`Graph::grad`] runs with `create_graph = true` the gradient itself is a
//! differentiable node. The critic's gradient penalty differentiates through
//! its input gradient this way.
//!
//! A [`Var`] is a cheap copyable handle tied to the lifetime of its graph.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::kernels::{self, ConvGeom};
use crate::tensor::{Float, Tensor};

/// Backward rule of one recorded operation.
///
/// `needs[i]` tells whether input `i` requires a gradient; the rule may return
/// `None` for inputs that do not.
pub(crate) trait Backward<T: Float> {
    fn backward<'g>(
        &self,
        inputs: &[Var<'g, T>],
        output: Var<'g, T>,
        grad: Var<'g, T>,
        needs: &[bool],
    ) -> Vec<Option<Var<'g, T>>>;
}

struct Node<T: Float> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    inputs: Vec<usize>,
    rule: Option<Rc<dyn Backward<T>>>,
}

pub struct Graph<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: Cell<bool>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy)]
pub struct Var<'g, T: Float> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Float> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(Rc::new(value), true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(Rc::new(value), false)
    }

    pub fn constant_rc(&self, value: Rc<Tensor<T>>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Rc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            inputs: Vec::new(),
            rule: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn record<'g>(
        &'g self,
        value: Tensor<T>,
        inputs: &[Var<'g, T>],
        rule: impl Backward<T> + 'static,
    ) -> Var<'g, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.recording.get() && inputs.iter().any(|v| nodes[v.id].requires_grad);
        let node = if requires_grad {
            Node {
                value: Rc::new(value),
                requires_grad,
                inputs: inputs.iter().map(|v| v.id).collect(),
                rule: Some(Rc::new(rule)),
            }
        } else {
            Node {
                value: Rc::new(value),
                requires_grad: false,
                inputs: Vec::new(),
                rule: None,
            }
        };
        nodes.push(node);
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// With `create_graph` the returned gradients are themselves differentiable;
    /// otherwise they are constants. Inputs that `output` does not depend on get
    /// a zero gradient.
    pub fn grad<'g>(&'g self, output: Var<'g, T>, wrt: &[Var<'g, T>], create_graph: bool) -> Vec<Var<'g, T>> {
        assert_eq!(output.value().len(), 1, "grad needs a scalar output");
        let seed = self.constant(Tensor::full(output.shape().as_slice(), T::one()));
        self.grad_with_seed(output, seed, wrt, create_graph)
    }

    /// Vector-Jacobian product `seed^T d(output)/d(wrt)`.
    pub fn grad_with_seed<'g>(
        &'g self,
        output: Var<'g, T>,
        seed: Var<'g, T>,
        wrt: &[Var<'g, T>],
        create_graph: bool,
    ) -> Vec<Var<'g, T>> {
        let end = output.id + 1;
        // Which nodes lie on a path to one of `wrt`.
        let mut reaches = vec![false; end];
        {
            let nodes = self.nodes.borrow();
            for v in wrt {
                if v.id < end {
                    reaches[v.id] = true;
                }
            }
            for i in 0..end {
                if !reaches[i] && nodes[i].requires_grad {
                    reaches[i] = nodes[i].inputs.iter().any(|&p| reaches[p]);
                }
            }
        }

        let prev = self.recording.replace(create_graph);
        let mut grads: Vec<Option<Var<'g, T>>> = vec![None; end];
        if reaches[output.id] {
            grads[output.id] = Some(seed);
        }
        // Without `create_graph` nothing can refer back to gradient nodes, so
        // each is released once no pending gradient slot holds it.
        let mut pool = (!create_graph).then(|| GradPool::new(self.len(), wrt));
        for i in (0..end).rev() {
            let Some(g) = grads[i] else { continue };
            let (rule, input_ids) = {
                let nodes = self.nodes.borrow();
                match &nodes[i].rule {
                    Some(r) => (r.clone(), nodes[i].inputs.clone()),
                    None => continue,
                }
            };
            let needs: Vec<bool> = input_ids.iter().map(|&p| reaches[p]).collect();
            if !needs.iter().any(|&b| b) {
                continue;
            }
            let inputs: Vec<Var<'g, T>> = input_ids.iter().map(|&id| Var { graph: self, id }).collect();
            let out = Var { graph: self, id: i };
            let created_from = self.len();
            let input_grads = rule.backward(&inputs, out, g, &needs);
            let mut retired = Vec::new();
            for ((&pid, ig), need) in input_ids.iter().zip(input_grads).zip(needs) {
                if let (Some(ig), true) = (ig, need) {
                    let merged = match grads[pid] {
                        Some(acc) => {
                            let sum = acc.add(ig);
                            retired.push(acc.id);
                            sum
                        }
                        None => ig,
                    };
                    if let Some(p) = pool.as_mut() {
                        p.hold(merged.id);
                    }
                    grads[pid] = Some(merged);
                }
            }
            // Free the slot; only ancestors are visited from here on.
            grads[i] = None;
            let keep = wrt.iter().any(|v| v.id == i);
            if keep {
                grads[i] = Some(g);
            }
            if let Some(p) = pool.as_mut() {
                if !keep {
                    retired.push(g.id);
                }
                p.release(self, &retired, created_from);
            }
        }
        let result = wrt
            .iter()
            .map(|v| match grads.get(v.id).copied().flatten() {
                Some(g) => g,
                None => self.constant(Tensor::zeros(v.shape().as_slice())),
            })
            .collect();
        self.recording.set(prev);
        result
    }
}

/// Reference counts of gradient nodes created during one non-recording
/// backward pass.
struct GradPool {
    start: usize,
    refs: Vec<u32>,
    protected: Vec<usize>,
}

impl GradPool {
    fn new<T: Float>(start: usize, wrt: &[Var<'_, T>]) -> Self {
        GradPool {
            start,
            refs: Vec::new(),
            protected: wrt.iter().map(|v| v.id).collect(),
        }
    }

    fn slot(&mut self, id: usize) -> Option<&mut u32> {
        let k = id.checked_sub(self.start)?;
        if self.refs.len() <= k {
            self.refs.resize(k + 1, 0);
        }
        Some(&mut self.refs[k])
    }

    fn hold(&mut self, id: usize) {
        if let Some(r) = self.slot(id) {
            *r += 1;
        }
    }

    /// Drops one reference for each of `ids`, then frees every gradient node
    /// that is now unreferenced, including scratch nodes created since `created_from`.
    fn release<T: Float>(&mut self, graph: &Graph<T>, ids: &[usize], created_from: usize) {
        let mut candidates: Vec<usize> = Vec::new();
        for &id in ids {
            if let Some(r) = self.slot(id) {
                *r = r.saturating_sub(1);
                candidates.push(id);
            }
        }
        candidates.extend(created_from.max(self.start)..graph.len());
        let mut nodes = graph.nodes.borrow_mut();
        for id in candidates {
            let unreferenced = self.slot(id).is_some_and(|r| *r == 0);
            if unreferenced && !self.protected.contains(&id) && !nodes[id].value.is_empty() {
                nodes[id].value = Rc::new(Tensor::zeros(&[0]));
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Var: accessors and operations
// ---------------------------------------------------------------------------

impl<'g, T: Float> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self) -> T {
        self.value().data()[0]
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.constant_rc(self.value())
    }

    fn unary(&self, value: Tensor<T>, rule: impl Backward<T> + 'static) -> Var<'g, T> {
        self.graph.record(value, &[*self], rule)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        let v = self.value().zip_map(&other.value(), |a, b| a + b);
        assert_eq!(self.shape(), other.shape(), "add shape");
        self.graph.record(v, &[self, other], AddRule)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        assert_eq!(self.shape(), other.shape(), "sub shape");
        let v = self.value().zip_map(&other.value(), |a, b| a - b);
        self.graph.record(v, &[self, other], SubRule)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        assert_eq!(self.shape(), other.shape(), "mul shape");
        let v = self.value().zip_map(&other.value(), |a, b| a * b);
        self.graph.record(v, &[self, other], MulRule)
    }

    /// `scale * self + shift`, elementwise with scalar constants.
    pub fn affine(self, scale: T, shift: T) -> Var<'g, T> {
        let v = self.value().map(|a| a * scale + shift);
        self.unary(v, AffineRule { scale })
    }

    pub fn scale(self, s: T) -> Var<'g, T> {
        self.affine(s, T::zero())
    }

    #[allow(clippy::should_implement_trait)]
    pub fn neg(self) -> Var<'g, T> {
        self.affine(-T::one(), T::zero())
    }

    pub fn powf(self, p: T) -> Var<'g, T> {
        let v = self.value().map(|a| a.powf(p));
        self.unary(v, PowRule { p })
    }

    pub fn exp(self) -> Var<'g, T> {
        let v = self.value().map(|a| a.exp());
        self.unary(v, ExpRule)
    }

    pub fn ln(self) -> Var<'g, T> {
        let v = self.value().map(|a| a.ln());
        self.unary(v, LnRule)
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        let v = self.value().map(|a| T::one() / (T::one() + (-a).exp()));
        self.unary(v, SigmoidRule)
    }

    /// Square root whose derivative is taken as zero at `x = 0`. The
    /// derivative factor is held constant, so only first derivatives are exact.
    pub fn sqrt(self) -> Var<'g, T> {
        let v = self.value().map(|a| a.sqrt());
        let half = T::of(0.5);
        let mask = Rc::new(v.map(|r| if r > T::zero() { half / r } else { T::zero() }));
        self.unary(v, MaskRule { mask })
    }

    /// `x` for `x > 0`, `slope * x` otherwise.
    pub fn leaky_relu(self, slope: T) -> Var<'g, T> {
        let x = self.value();
        let v = x.map(|a| if a > T::zero() { a } else { a * slope });
        let mask = Rc::new(x.map(|a| if a > T::zero() { T::one() } else { slope }));
        self.unary(v, MaskRule { mask })
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(self, lo: T, hi: T) -> Var<'g, T> {
        let x = self.value();
        let v = x.map(|a| a.max(lo).min(hi));
        let mask = Rc::new(x.map(|a| if a >= lo && a <= hi { T::one() } else { T::zero() }));
        self.unary(v, MaskRule { mask })
    }

    /// Elementwise product with a fixed tensor (dropout masks and the like).
    pub fn mul_mask(self, mask: Rc<Tensor<T>>) -> Var<'g, T> {
        assert_eq!(self.shape(), mask.shape(), "mask shape");
        let v = self.value().zip_map(&mask, |a, m| a * m);
        self.unary(v, MaskRule { mask })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let from = self.shape();
        let v = (*self.value()).clone().reshape(shape).expect("reshape size");
        self.unary(v, ReshapeRule { shape: from })
    }

    /// Views the value as `[outer, mid, inner]` and sums to shape `[mid]`.
    pub fn sum_keep(self, outer: usize, mid: usize, inner: usize) -> Var<'g, T> {
        let x = self.value();
        assert_eq!(x.len(), outer * mid * inner, "sum_keep extents");
        let v = Tensor::new(&[mid], kernels::sum_keep(x.data(), outer, mid, inner)).unwrap();
        self.unary(
            v,
            SumKeepRule {
                outer,
                inner,
                shape: x.shape().to_vec(),
            },
        )
    }

    /// Replicates a `[mid]`-sized value to `shape`, viewed as `[outer, mid, inner]`.
    pub fn expand(self, outer: usize, inner: usize, shape: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let v = Tensor::new(shape, kernels::expand(x.data(), outer, inner)).expect("expand extents");
        self.unary(
            v,
            ExpandRule {
                outer,
                inner,
                mid: x.len(),
            },
        )
    }

    pub fn sum(self) -> Var<'g, T> {
        let n = self.value().len();
        self.sum_keep(1, 1, n)
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = self.value().len();
        self.sum().scale(T::of(1.0 / n as f64))
    }

    /// Per-sample sum of a batch-major tensor: `[N, ...] -> [N]`.
    pub fn sum_per_sample(self) -> Var<'g, T> {
        let shape = self.shape();
        let n = shape[0];
        let rest = shape[1..].iter().product();
        self.sum_keep(1, n, rest)
    }

    /// Broadcast `[N]` to `shape` with leading extent `N`.
    pub fn expand_per_sample(self, shape: &[usize]) -> Var<'g, T> {
        let rest = shape[1..].iter().product();
        self.expand(1, rest, shape)
    }

    /// Per-channel sum over every axis but 1: `[N, C, ...] -> [C]`.
    pub fn sum_per_channel(self) -> Var<'g, T> {
        let s = self.shape();
        self.sum_keep(s[0], s[1], s[2..].iter().product())
    }

    /// Broadcast a `[C]` vector over `[N, C, ...]`.
    pub fn expand_per_channel(self, shape: &[usize]) -> Var<'g, T> {
        self.expand(shape[0], shape[2..].iter().product(), shape)
    }

    /// `x * scale + shift` with `[mid]` vectors broadcast over the
    /// `[outer, mid, inner]` view of `x`; either vector may be absent.
    pub fn bcast_affine(
        self,
        scale: Option<Var<'g, T>>,
        shift: Option<Var<'g, T>>,
        outer: usize,
        inner: usize,
    ) -> Var<'g, T> {
        let x = self.value();
        let mid = x.len() / (outer * inner).max(1);
        assert_eq!(outer * mid * inner, x.len(), "bcast_affine extents");
        let sv = scale.map(|v| v.value());
        let bv = shift.map(|v| v.value());
        for v in sv.iter().chain(bv.iter()) {
            assert_eq!(v.len(), mid, "bcast_affine vector length");
        }
        let data = kernels::bcast_affine(
            x.data(),
            sv.as_deref().map(Tensor::data),
            bv.as_deref().map(Tensor::data),
            outer,
            mid,
            inner,
        );
        let value = Tensor::new(x.shape(), data).unwrap();
        let mut inputs = vec![self];
        inputs.extend(scale);
        inputs.extend(shift);
        self.graph.record(
            value,
            &inputs,
            BcastAffineRule {
                has_scale: scale.is_some(),
                has_shift: shift.is_some(),
                outer,
                mid,
                inner,
            },
        )
    }

    /// Per-`mid` sum of `self * other` over the `[outer, mid, inner]` view.
    pub fn sum_prod(self, other: Var<'g, T>, outer: usize, mid: usize, inner: usize) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sum_prod shapes");
        assert_eq!(a.len(), outer * mid * inner, "sum_prod extents");
        let v = Tensor::new(&[mid], kernels::sum_prod(a.data(), b.data(), outer, mid, inner)).unwrap();
        self.graph.record(v, &[self, other], SumProdRule { outer, mid, inner })
    }

    /// Per-channel affine over `[N, C, ...]`.
    pub fn channel_affine(self, scale: Option<Var<'g, T>>, shift: Option<Var<'g, T>>) -> Var<'g, T> {
        let s = self.shape();
        self.bcast_affine(scale, shift, s[0], s[2..].iter().product())
    }

    /// Per-sample affine over `[N, ...]`.
    pub fn sample_affine(self, scale: Option<Var<'g, T>>, shift: Option<Var<'g, T>>) -> Var<'g, T> {
        let s = self.shape();
        self.bcast_affine(scale, shift, 1, s[1..].iter().product())
    }

    /// `[N, C, ...] x [N, C, ...] -> [C]`: per-channel sum of the product.
    pub fn sum_prod_per_channel(self, other: Var<'g, T>) -> Var<'g, T> {
        let s = self.shape();
        self.sum_prod(other, s[0], s[1], s[2..].iter().product())
    }

    /// `[N, ...] x [N, ...] -> [N]`: per-sample sum of the product.
    pub fn sum_prod_per_sample(self, other: Var<'g, T>) -> Var<'g, T> {
        let s = self.shape();
        self.sum_prod(other, 1, s[0], s[1..].iter().product())
    }

    /// Convolution; `w` is `[c_out, c_in, k, k]`, output `ceil(h/stride)` with same-padding.
    pub fn conv2d(self, w: Var<'g, T>, stride: usize) -> Var<'g, T> {
        let x = self.value();
        let wt = w.value();
        let (n, c, h, wd) = x.dims4().expect("conv input rank");
        let ws = wt.shape();
        assert_eq!(ws.len(), 4, "conv weight rank");
        assert_eq!(ws[1], c, "conv channel mismatch");
        let geom = ConvGeom::same(n, c, h, wd, ws[0], ws[2], stride);
        let y = kernels::conv_forward(&geom, x.data(), wt.data());
        let v = Tensor::new(&[n, geom.c_out, geom.ho, geom.wo], y).unwrap();
        self.graph.record(v, &[self, w], ConvRule { geom })
    }

    /// Transposed convolution: the adjoint of `conv2d` at this weight and stride,
    /// producing an `out_hw` spatial grid. `w` is `[c_in_of_self, c_out, k, k]`.
    pub fn conv2d_transpose(self, w: Var<'g, T>, stride: usize, out_hw: (usize, usize)) -> Var<'g, T> {
        let y = self.value();
        let wt = w.value();
        let (n, c, ho, wo) = y.dims4().expect("deconv input rank");
        let ws = wt.shape();
        assert_eq!(ws[0], c, "deconv channel mismatch");
        let geom = ConvGeom::same(n, ws[1], out_hw.0, out_hw.1, c, ws[2], stride);
        assert_eq!((geom.ho, geom.wo), (ho, wo), "deconv spatial mismatch");
        let x = kernels::conv_input_grad(&geom, y.data(), wt.data());
        let v = Tensor::new(&[n, geom.c_in, geom.h, geom.w], x).unwrap();
        self.graph.record(v, &[self, w], ConvTransposeRule { geom })
    }

    /// Weight gradient of `conv2d` as a bilinear map of `(x = self, gy)`.
    fn conv2d_weight_grad(self, gy: Var<'g, T>, geom: ConvGeom) -> Var<'g, T> {
        let dw = kernels::conv_weight_grad(&geom, self.value().data(), gy.value().data());
        let v = Tensor::new(&[geom.c_out, geom.c_in, geom.k, geom.k], dw).unwrap();
        self.graph.record(v, &[self, gy], ConvWeightGradRule { geom })
    }

    fn conv_with_geom(self, w: Var<'g, T>, geom: ConvGeom) -> Var<'g, T> {
        let y = kernels::conv_forward(&geom, self.value().data(), w.value().data());
        let v = Tensor::new(&[geom.n, geom.c_out, geom.ho, geom.wo], y).unwrap();
        self.graph.record(v, &[self, w], ConvRule { geom })
    }

    fn conv_transpose_with_geom(self, w: Var<'g, T>, geom: ConvGeom) -> Var<'g, T> {
        let x = kernels::conv_input_grad(&geom, self.value().data(), w.value().data());
        let v = Tensor::new(&[geom.n, geom.c_in, geom.h, geom.w], x).unwrap();
        self.graph.record(v, &[self, w], ConvTransposeRule { geom })
    }

    /// 2x2 average pooling, stride 2.
    pub fn avg_pool2(self) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4().expect("pool rank");
        let v = Tensor::new(&[n, c, h / 2, w / 2], kernels::avg_pool2(x.data(), n * c, h, w)).unwrap();
        self.unary(v, PoolRule { n, c, h, w })
    }

    fn avg_pool2_adjoint(self, n: usize, c: usize, h: usize, w: usize) -> Var<'g, T> {
        let g = self.value();
        let v = Tensor::new(&[n, c, h, w], kernels::avg_pool2_adjoint(g.data(), n * c, h, w)).unwrap();
        self.unary(v, PoolAdjointRule)
    }

    /// Mean over the spatial grid: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(self) -> Var<'g, T> {
        let s = self.shape();
        let hw = s[2] * s[3];
        self.sum_keep(1, s[0] * s[1], hw)
            .scale(T::of(1.0 / hw as f64))
            .reshape(&[s[0], s[1]])
    }

    /// Row-major `[m, k] x [k, n]`.
    pub fn matmul(self, other: Var<'g, T>) -> Var<'g, T> {
        self.matmul_t(other, false, false)
    }

    fn matmul_t(self, other: Var<'g, T>, ta: bool, tb: bool) -> Var<'g, T> {
        let a = self.value();
        let b = other.value();
        let (m, k) = if ta {
            (a.shape()[1], a.shape()[0])
        } else {
            (a.shape()[0], a.shape()[1])
        };
        let (k2, n) = if tb {
            (b.shape()[1], b.shape()[0])
        } else {
            (b.shape()[0], b.shape()[1])
        };
        assert_eq!(k, k2, "matmul inner extent");
        let v = Tensor::new(&[m, n], kernels::matmul(a.data(), b.data(), m, k, n, ta, tb)).unwrap();
        self.graph.record(v, &[self, other], MatMulRule { ta, tb })
    }

    /// Channel slice `[c0, c1)` of `[N, C, H, W]`.
    pub fn slice_channels(self, c0: usize, c1: usize) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4().expect("slice rank");
        assert!(c0 < c1 && c1 <= c, "slice bounds");
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (c1 - c0) * plane);
        for i in 0..n {
            out.extend_from_slice(&x.data()[(i * c + c0) * plane..(i * c + c1) * plane]);
        }
        let v = Tensor::new(&[n, c1 - c0, h, w], out).unwrap();
        self.unary(v, SliceRule { c0, total: c })
    }

    /// Places `[N, c, H, W]` at channel offset `c0` of a zero `[N, total, H, W]`.
    fn pad_channels(self, c0: usize, total: usize) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4().expect("pad rank");
        let plane = h * w;
        let mut out = vec![T::zero(); n * total * plane];
        for i in 0..n {
            out[(i * total + c0) * plane..(i * total + c0 + c) * plane]
                .copy_from_slice(&x.data()[i * c * plane..(i + 1) * c * plane]);
        }
        let v = Tensor::new(&[n, total, h, w], out).unwrap();
        self.unary(v, PadRule { c0, c1: c0 + c })
    }
}

/// Channel concatenation of `[N, C_i, H, W]` tensors.
pub fn concat_channels<'g, T: Float>(parts: &[Var<'g, T>]) -> Var<'g, T> {
    assert!(!parts.is_empty(), "concat of nothing");
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let (n, _, h, w) = values[0].dims4().expect("concat rank");
    let widths: Vec<usize> = values
        .iter()
        .map(|v| {
            let (vn, c, vh, vw) = v.dims4().expect("concat rank");
            assert_eq!((vn, vh, vw), (n, h, w), "concat extents");
            c
        })
        .collect();
    let total: usize = widths.iter().sum();
    let plane = h * w;
    let mut out = Vec::with_capacity(n * total * plane);
    for i in 0..n {
        for (v, &c) in values.iter().zip(&widths) {
            out.extend_from_slice(&v.data()[i * c * plane..(i + 1) * c * plane]);
        }
    }
    let v = Tensor::new(&[n, total, h, w], out).unwrap();
    parts[0].graph.record(v, parts, ConcatRule { widths })
}

impl<'g, T: Float> std::ops::Add for Var<'g, T> {
    type Output = Var<'g, T>;
    fn add(self, rhs: Self) -> Self {
        Var::add(self, rhs)
    }
}

impl<'g, T: Float> std::ops::Sub for Var<'g, T> {
    type Output = Var<'g, T>;
    fn sub(self, rhs: Self) -> Self {
        Var::sub(self, rhs)
    }
}

impl<'g, T: Float> std::ops::Mul for Var<'g, T> {
    type Output = Var<'g, T>;
    fn mul(self, rhs: Self) -> Self {
        Var::mul(self, rhs)
    }
}

impl<'g, T: Float> std::ops::Neg for Var<'g, T> {
    type Output = Var<'g, T>;
    fn neg(self) -> Self {
        Var::neg(self)
    }
}

// ---------------------------------------------------------------------------
// Backward rules
// ---------------------------------------------------------------------------

struct AddRule;
impl<T: Float> Backward<T> for AddRule {
    fn backward<'g>(&self, _: &[Var<'g, T>], _: Var<'g, T>, g: Var<'g, T>, _: &[bool]) -> Vec<Option<Var<'g, T>>> {
        vec![Some(g), Some(g)]
    }
}

struct SubRule;
impl<T: Float> Backward<T> for SubRule {
    fn backward<'g>(&self, _: &[Var<'g, T>], _: Var<'g, T>, g: Var<'g, T>, needs: &[bool]) -> Vec<Option<Var<'g, T>>> {
        vec![Some(g), needs[1].then(|| g.neg())]
    }
}

struct MulRule;
impl<T: Float> Backward<T> for MulRule {
    fn backward<'g>(&self, x: &[Var<'g, T>], _: Var<'g, T>, g: Var<'g, T>, needs: &[bool]) -> Vec<Option<Var<'g, T>>> {
        vec![needs[0].then(|| g.mul(x[1])), needs[1].then(|| g.mul(x[0]))]
    }
}

struct AffineRule<T> {
    scale: T,
}
impl<T: Float> Backward<T> for AffineRule<T> {
    fn backward<'g>(&self, _: &[Var<'g, T>], _: Var<'g, T>, g: Var<'g, T>, _: &[bool]) -> Vec<Option<Var<'g, T>>> {
        vec![Some(g.scale(self.scale))]
    }
}

struct PowRule<T> {
    p: T,
}
impl<T: Float> Backward<T> for PowRule<T> {
    fn backward<'g>(&self, x: &[Var<'g, T>], _: Var<'g, T>, g: Var<'g, T>, _: &[bool]) -> Vec<Option<Var<'g, T>>> {
        let d = x[0].powf(self.p - T::one()).scale(self.p);
        vec![Some(g.mul(d))]
    }
}

struct ExpRule;
impl<T: Float> Backward<T> for ExpRule {
    fn backward<'g>(&self, _: &[Var<'g, T>], out: Var<'g, T>, g: Var<'g, T>, _: &[bool]) -> Vec<Option<Var<'g, T>>> {
        vec![Some(g.mul(out))]
    }
}

struct LnRule;
impl<T: Float> Backward<T> for LnRule {
    fn backward<'g>(&self, x: &[Var<'g, T>], _: Var<'g, T>, g: Var<'g, T>, _: &[bool]) -> Vec<Option<Var<'g, T>>> {
        vec![Some(g.mul(x[0].powf(-T::one())))]
    }
}

struct SigmoidRule;
impl<T: Float> Backward<T> for SigmoidRule {
    fn backward<'g>(&self, _: &[Var<'g, T>], out: Var<'g, T>, g: Var<'g, T>, _: &[bool]) -> Vec<Option<Var<'g, T>>> {
        // s' = s (1 - s)
        let d = out.mul(out.affine(-T::one(), T::one()));
        vec![Some(g.mul(d))]
    }
}

struct MaskRule<T> {
    mask: Rc<Tensor<T>>,
}
impl<T: Float> Backward<T> for MaskRule<T> {
    fn backward<'g>(&self, _: &[Var<'g, T>], _: Var<'g, T>, g: Var<'g, T>, _: &[bool]) -> Vec<Option<Var<'g, T>>> {
        vec![Some(g.mul_mask(self.mask.clone()))]
    }
}

struct ReshapeRule {
    shape: Vec<usize>,
}
impl<T: Float> Backward<T> for ReshapeRule {
    fn backward<'g>(&self, _: &[Var<'g, T>], _: Var<'g, T>, g: Var<'g, T>, _: &[bool]) -> Vec<Option<Var<'g, T>>> {
        vec![Some(g.reshape(&self.shape))]
    }
}

struct SumKeepRule {
    outer: usize,
    inner: usize,
    shape: Vec<usize>,
}
impl<T: Float> Backward<T> for SumKeepRule {
    fn backward<'g>(&self, _: &[Var<'g, T>], _: Var<'g, T>, g: Var<'g, T>, _: &[bool]) -> Vec<Option<Var<'g, T>>> {
        vec![Some(g.expand(self.outer, self.inner, &self.shape))]
    }
}

struct ExpandRule {
    outer: usize,
    inner: usize,
    mid: usize,
}
impl<T: Float> Backward<T> for ExpandRule {
    fn backward<'g>(&self, x: &[Var<'g, T>], _: Var<'g, T>, g: Var<'g, T>, _: &[bool]) -> Vec<Option<Var<'g, T>>> {
        let shape = x[0].shape();
        vec![Some(g.sum_keep(self.outer, self.mid, self.inner).reshape(&shape))]
    }
}

struct BcastAffineRule {
    has_scale: bool,
    has_shift: bool,
    outer: usize,
    mid: usize,
    inner: usize,
}
impl<T: Float> Backward<T> for BcastAffineRule {
    fn backward<'g>(&self, x: &[Var<'g, T>], _: Var<'g, T>, g: Var<'g, T>, needs: &[bool]) -> Vec<Option<Var<'g, T>>> {
        let scale = self.has_scale.then(|| x[1]);
        let mut out = vec![needs[0].then(|| g.bcast_affine(scale, None, self.outer, self.inner))];
        if self.has_scale {
            out.push(needs[1].then(|| g.sum_prod(x[0], self.outer, self.mid, self.inner)));
        }
        if self.has_shift {
            let k = out.len();
            out.push(needs[k].then(|| g.sum_keep(self.outer, self.mid, self.inner)));
        }
        out
    }
}

struct SumProdRule {
    outer: usize,
    mid: usize,
    inner: usize,
}
impl<T: Float> Backward<T> for SumProdRule {
    fn backward<'g>(&self, x: &[Var<'g, T>], _: Var<'g, T>, g: Var<'g, T>, needs: &[bool]) -> Vec<Option<Var<'g, T>>> {
        let _ = self.mid;
        vec![
            needs[0].then(|| x[1].bcast_affine(Some(g), None, self.outer, self.inner)),
            needs[1].then(|| x[0].bcast_affine(Some(g), None, self.outer, self.inner)),
        ]
    }
}

struct ConvRule {
    geom: ConvGeom,
}
impl<T: Float> Backward<T> for ConvRule {
    fn backward<'g>(&self, x: &[Var<'g, T>], _: Var<'g, T>, g: Var<'g, T>, needs: &[bool]) -> Vec<Option<Var<'g, T>>> {
        vec![
            needs[0].then(|| g.conv_transpose_with_geom(x[1], self.geom)),
            needs[1].then(|| x[0].conv2d_weight_grad(g, self.geom)),
        ]
    }
}

struct ConvTransposeRule {
    geom: ConvGeom,
}
impl<T: Float> Backward<T> for ConvTransposeRule {
    fn backward<'g>(&self, x: &[Var<'g, T>], _: Var<'g, T>, g: Var<'g, T>, needs: &[bool]) -> Vec<Option<Var<'g, T>>> {
        // out = C_w^T y: d/dy -> C_w g, d/dw -> Wgrad(g, y).
        vec![
            needs[0].then(|| g.conv_with_geom(x[1], self.geom)),
            needs[1].then(|| g.conv2d_weight_grad(x[0], self.geom)),
        ]
    }
}

struct ConvWeightGradRule {
    geom: ConvGeom,
}
impl<T: Float> Backward<T> for ConvWeightGradRule {
    fn backward<'g>(&self, x: &[Var<'g, T>], _: Var<'g, T>, g: Var<'g, T>, needs: &[bool]) -> Vec<Option<Var<'g, T>>> {
        // <Wgrad(x, gy), h> = <C_h x, gy>: d/dx -> C_h^T gy, d/dgy -> C_h x.
        vec![
            needs[0].then(|| x[1].conv_transpose_with_geom(g, self.geom)),
            needs[1].then(|| x[0].conv_with_geom(g, self.geom)),
        ]
    }
}

struct PoolRule {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
}
impl<T: Float> Backward<T> for PoolRule {
    fn backward<'g>(&self, _: &[Var<'g, T>], _: Var<'g, T>, g: Var<'g, T>, _: &[bool]) -> Vec<Option<Var<'g, T>>> {
        vec![Some(g.avg_pool2_adjoint(self.n, self.c, self.h, self.w))]
    }
}

struct PoolAdjointRule;
impl<T: Float> Backward<T> for PoolAdjointRule {
    fn backward<'g>(&self, _: &[Var<'g, T>], _: Var<'g, T>, g: Var<'g, T>, _: &[bool]) -> Vec<Option<Var<'g, T>>> {
        vec![Some(g.avg_pool2())]
    }
}

struct MatMulRule {
    ta: bool,
    tb: bool,
}
impl<T: Float> Backward<T> for MatMulRule {
    fn backward<'g>(&self, x: &[Var<'g, T>], _: Var<'g, T>, g: Var<'g, T>, needs: &[bool]) -> Vec<Option<Var<'g, T>>> {
        let (a, b) = (x[0], x[1]);
        // C = op(A) op(B); dA = g op(B)^T (transposed back if A was), likewise dB.
        let da = needs[0].then(|| {
            if self.ta {
                b.matmul_t(g, self.tb, true)
            } else {
                g.matmul_t(b, false, !self.tb)
            }
        });
        let db = needs[1].then(|| {
            if self.tb {
                g.matmul_t(a, true, self.ta)
            } else {
                a.matmul_t(g, !self.ta, false)
            }
        });
        vec![da, db]
    }
}

struct SliceRule {
    c0: usize,
    total: usize,
}
impl<T: Float> Backward<T> for SliceRule {
    fn backward<'g>(&self, _: &[Var<'g, T>], _: Var<'g, T>, g: Var<'g, T>, _: &[bool]) -> Vec<Option<Var<'g, T>>> {
        vec![Some(g.pad_channels(self.c0, self.total))]
    }
}

struct PadRule {
    c0: usize,
    c1: usize,
}
impl<T: Float> Backward<T> for PadRule {
    fn backward<'g>(&self, _: &[Var<'g, T>], _: Var<'g, T>, g: Var<'g, T>, _: &[bool]) -> Vec<Option<Var<'g, T>>> {
        vec![Some(g.slice_channels(self.c0, self.c1))]
    }
}

struct ConcatRule {
    widths: Vec<usize>,
}
impl<T: Float> Backward<T> for ConcatRule {
    fn backward<'g>(&self, _: &[Var<'g, T>], _: Var<'g, T>, g: Var<'g, T>, needs: &[bool]) -> Vec<Option<Var<'g, T>>> {
        let mut c0 = 0;
        self.widths
            .iter()
            .zip(needs)
            .map(|(&w, &need)| {
                let part = need.then(|| g.slice_channels(c0, c0 + w));
                c0 += w;
                part
            })
            .collect()
    }
}
