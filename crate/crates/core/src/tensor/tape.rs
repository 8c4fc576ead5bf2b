use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeom, Lowering, Mat};
use super::{numel, NdTensor, Scalar};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
    tape: u64,
}

impl Var {
    pub fn index(&self) -> usize {
        self.id
    }
}

type UnaryBackward<T> = Box<dyn Fn(T, T) -> T>;

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Max(usize, usize),
    Relu(usize),
    LeakyRelu(usize, T),
    Exp(usize),
    Log(usize),
    Powf(usize, T),
    Affine(usize, T),
    Clamp(usize, T, T),
    SumAll(usize),
    Reshape(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Narrow { input: usize, axis: usize, start: usize },
    Softmax { input: usize, axis: usize },
    Conv2d { input: usize, weight: usize, bias: Option<usize>, low: Lowering },
    ConvTranspose2d { input: usize, weight: usize, bias: Option<usize>, low: Lowering },
    InstanceNorm { input: usize, gamma: usize, beta: usize, xhat: Vec<T>, rstd: Vec<T> },
    Bmm { a: usize, b: usize, trans_a: bool, trans_b: bool },
    Custom { input: usize, derivative: UnaryBackward<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Max(..) => "max",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Powf(..) => "powf",
            Op::Affine(..) => "affine",
            Op::Clamp(..) => "clamp",
            Op::SumAll(_) => "sum",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Softmax { .. } => "softmax",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::Bmm { .. } => "bmm",
            Op::Custom { .. } => "custom",
        }
    }
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<usize>,
}

/// Ordered record of primitive operations for reverse-mode differentiation.
///
/// Every op appends one node whose inputs are strictly earlier nodes, so the
/// node order is a topological order and backward is a single reverse sweep.
/// A tape is single-threaded; build one per forward pass.
pub struct Tape<T> {
    id: u64,
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of [`Tape::backward`]: one optional gradient per tape node.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(usize, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if `v` is on the differentiated path.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `target`'s gradient slot.
    pub fn accumulate_into(&self, v: Var, target: &mut NdTensor<T>) -> Result<()> {
        match self.wrt(v) {
            Some(g) => target.accumulate_grad(g),
            None => Ok(()),
        }
    }

    /// `(param index, gradient)` for every leaf registered through [`Tape::param`].
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[T])> + '_ {
        self.params
            .iter()
            .filter_map(|&(node, idx)| self.grads[node].as_deref().map(|g| (idx, g)))
    }
}

fn check_finite<T: Scalar>(op: &'static str, v: &[T]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric { op })
    }
}

/// Extents of `shape` before, at and after `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.id >= self.len() {
            return Err(Error::Usage("variable does not belong to this tape".into()));
        }
        Ok(v.id)
    }

    fn push(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        check_finite(op.name(), &value)?;
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var {
            id: nodes.len() - 1,
            tape: self.id,
        })
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Records a leaf. It is differentiated when the tensor has `requires_grad`.
    pub fn leaf(&self, t: &NdTensor<T>) -> Result<Var> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a constant (never differentiated).
    pub fn constant(&self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        let t = NdTensor::new(shape, data)?;
        self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, false)
    }

    /// Records a trainable leaf tagged with a parameter index, see [`Gradients::param_grads`].
    pub fn param(&self, index: usize, t: &NdTensor<T>) -> Result<Var> {
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)?;
        self.nodes.borrow_mut()[v.id].param = Some(index);
        Ok(v)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.id].shape.clone()
    }

    pub fn data(&self, v: Var) -> Vec<T> {
        self.nodes.borrow()[v.id].value.clone()
    }

    pub fn value(&self, v: Var) -> NdTensor<T> {
        let nodes = self.nodes.borrow();
        NdTensor::new(nodes[v.id].shape.clone(), nodes[v.id].value.clone()).expect("node shape is consistent")
    }

    /// The single value of a one-element tensor.
    pub fn item(&self, v: Var) -> T {
        self.nodes.borrow()[v.id].value[0]
    }

    // ----- elementwise -------------------------------------------------

    fn binary(&self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Vec<usize>, Vec<T>)> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let nodes = self.nodes.borrow();
        let (na, nb) = (&nodes[ia], &nodes[ib]);
        let out: Vec<T>;
        let shape;
        if na.shape == nb.shape {
            shape = na.shape.clone();
            out = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
        } else if nb.value.len() == 1 {
            shape = na.shape.clone();
            let y = nb.value[0];
            out = na.value.iter().map(|&x| f(x, y)).collect();
        } else if na.value.len() == 1 {
            shape = nb.shape.clone();
            let x = na.value[0];
            out = nb.value.iter().map(|&y| f(x, y)).collect();
        } else {
            return Err(Error::shape(name, format!("{:?} vs {:?}", na.shape, nb.shape)));
        }
        Ok((shape, out))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(shape, out, Op::Add(a.id, b.id), self.needs_grad(&[a.id, b.id]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(shape, out, Op::Sub(a.id, b.id), self.needs_grad(&[a.id, b.id]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(shape, out, Op::Mul(a.id, b.id), self.needs_grad(&[a.id, b.id]))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary(a, b, "div", |x, y| x / y)?;
        self.push(shape, out, Op::Div(a.id, b.id), self.needs_grad(&[a.id, b.id]))
    }

    /// Element-wise maximum. Ties send the gradient to `a`.
    pub fn max(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary(a, b, "max", |x, y| if y > x { y } else { x })?;
        self.push(shape, out, Op::Max(a.id, b.id), self.needs_grad(&[a.id, b.id]))
    }

    fn unary(&self, a: Var, f: impl Fn(T) -> T) -> Result<(Vec<usize>, Vec<T>)> {
        let ia = self.check(a)?;
        let nodes = self.nodes.borrow();
        Ok((nodes[ia].shape.clone(), nodes[ia].value.iter().map(|&x| f(x)).collect()))
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let (shape, out) = self.unary(a, |x| if x > T::zero() { x } else { T::zero() })?;
        self.push(shape, out, Op::Relu(a.id), self.needs_grad(&[a.id]))
    }

    pub fn leaky_relu(&self, a: Var, slope: T) -> Result<Var> {
        let (shape, out) = self.unary(a, |x| if x > T::zero() { x } else { slope * x })?;
        self.push(shape, out, Op::LeakyRelu(a.id, slope), self.needs_grad(&[a.id]))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        let (shape, out) = self.unary(a, |x| x.exp())?;
        self.push(shape, out, Op::Exp(a.id), self.needs_grad(&[a.id]))
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        if self.nodes.borrow()[ia].value.iter().any(|&x| x <= T::zero()) {
            return Err(Error::Numeric { op: "log" });
        }
        let (shape, out) = self.unary(a, |x| x.ln())?;
        self.push(shape, out, Op::Log(a.id), self.needs_grad(&[a.id]))
    }

    /// `a^p` for a constant exponent.
    pub fn powf(&self, a: Var, p: T) -> Result<Var> {
        let (shape, out) = self.unary(a, |x| x.powf(p))?;
        self.push(shape, out, Op::Powf(a.id, p), self.needs_grad(&[a.id]))
    }

    /// `scale * a + shift` with constant scale and shift.
    pub fn affine(&self, a: Var, scale: T, shift: T) -> Result<Var> {
        let (shape, out) = self.unary(a, |x| scale * x + shift)?;
        self.push(shape, out, Op::Affine(a.id, scale), self.needs_grad(&[a.id]))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&self, a: Var, lo: T, hi: T) -> Result<Var> {
        let (shape, out) = self.unary(a, |x| x.max(lo).min(hi))?;
        self.push(shape, out, Op::Clamp(a.id, lo, hi), self.needs_grad(&[a.id]))
    }

    /// Element-wise user function with a user derivative `d(x, y)`.
    pub fn custom_unary(
        &self,
        a: Var,
        forward: impl Fn(T) -> T,
        derivative: impl Fn(T, T) -> T + 'static,
    ) -> Result<Var> {
        let (shape, out) = self.unary(a, forward)?;
        self.push(
            shape,
            out,
            Op::Custom {
                input: a.id,
                derivative: Box::new(derivative),
            },
            self.needs_grad(&[a.id]),
        )
    }

    // ----- reductions and layout ---------------------------------------

    pub fn sum(&self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.nodes.borrow()[ia].value.iter().copied().sum::<T>();
        self.push(vec![1], vec![s], Op::SumAll(a.id), self.needs_grad(&[a.id]))
    }

    pub fn reshape(&self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let ia = self.check(a)?;
        let shape = shape.into();
        let value = {
            let nodes = self.nodes.borrow();
            if numel(&shape) != nodes[ia].value.len() {
                return Err(Error::shape(
                    "reshape",
                    format!("cannot view {:?} as {:?}", nodes[ia].shape, shape),
                ));
            }
            nodes[ia].value.clone()
        };
        self.push(shape, value, Op::Reshape(a.id), self.needs_grad(&[a.id]))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Usage("concat of zero tensors".into()));
        }
        let ids = inputs.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let first = &nodes[ids[0]].shape;
            if axis >= first.len() {
                return Err(Error::shape("concat", format!("axis {axis} out of range for {first:?}")));
            }
            let mut shape = first.clone();
            shape[axis] = 0;
            for &i in &ids {
                let s = &nodes[i].shape;
                let compatible = s.len() == first.len()
                    && s.iter().zip(first).enumerate().all(|(d, (a, b))| d == axis || a == b);
                if !compatible {
                    return Err(Error::shape("concat", format!("{first:?} vs {s:?} along axis {axis}")));
                }
                shape[axis] += s[axis];
            }
            let (outer, _, inner) = split_axis(&shape, axis);
            let mut out = Vec::with_capacity(numel(&shape));
            for o in 0..outer {
                for &i in &ids {
                    let chunk = nodes[i].shape[axis] * inner;
                    out.extend_from_slice(&nodes[i].value[o * chunk..(o + 1) * chunk]);
                }
            }
            (shape, out)
        };
        let rg = self.needs_grad(&ids);
        self.push(shape, out, Op::Concat { inputs: ids, axis }, rg)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let src = &nodes[ia];
            if axis >= src.shape.len() || start + len > src.shape[axis] {
                return Err(Error::shape(
                    "narrow",
                    format!("[{start}, {}) along axis {axis} of {:?}", start + len, src.shape),
                ));
            }
            let (outer, n, inner) = split_axis(&src.shape, axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * n + start) * inner;
                out.extend_from_slice(&src.value[base..base + len * inner]);
            }
            let mut shape = src.shape.clone();
            shape[axis] = len;
            (shape, out)
        };
        self.push(shape, out, Op::Narrow { input: a.id, axis, start }, self.needs_grad(&[a.id]))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let src = &nodes[ia];
            if axis >= src.shape.len() {
                return Err(Error::shape("softmax", format!("axis {axis} out of range for {:?}", src.shape)));
            }
            let (outer, n, inner) = split_axis(&src.shape, axis);
            let mut out = vec![T::zero(); src.value.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let m = (0..n).map(|k| src.value[at(k)]).fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for k in 0..n {
                        let e = (src.value[at(k)] - m).exp();
                        out[at(k)] = e;
                        z += e;
                    }
                    for k in 0..n {
                        out[at(k)] = out[at(k)] / z;
                    }
                }
            }
            (src.shape.clone(), out)
        };
        self.push(shape, out, Op::Softmax { input: a.id, axis }, self.needs_grad(&[a.id]))
    }

    // ----- convolution ---------------------------------------------------

    fn conv_operands(
        &self,
        op: &'static str,
        x: Var,
        w: Var,
        bias: Option<Var>,
    ) -> Result<(usize, usize, Option<usize>, Vec<usize>, Vec<usize>)> {
        let ix = self.check(x)?;
        let iw = self.check(w)?;
        let ib = bias.map(|b| self.check(b)).transpose()?;
        let nodes = self.nodes.borrow();
        let (xs, ws) = (nodes[ix].shape.clone(), nodes[iw].shape.clone());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(op, format!("expected 4-D input and weight, got {xs:?} and {ws:?}")));
        }
        Ok((ix, iw, ib, xs, ws))
    }

    /// 2-D cross-correlation. `x: [B, Cin, H, W]`, `w: [Cout, Cin, kh, kw]`, `bias: [Cout]`.
    pub fn conv2d(&self, x: Var, w: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (ix, iw, ib, xs, ws) = self.conv_operands("conv2d", x, w, bias)?;
        geom.validate("conv2d", ws[2], ws[3])?;
        if xs[1] != ws[1] {
            return Err(Error::Config(format!(
                "conv2d: input has {} channels but weight expects {}",
                xs[1], ws[1]
            )));
        }
        let (oh, ow) = match (
            geom.out_extent(xs[2], ws[2], geom.pad_h),
            geom.out_extent(xs[3], ws[3], geom.pad_w),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(Error::Config(format!(
                    "conv2d: padded input {}x{} admits no {}x{} window at dilation {}",
                    xs[2], xs[3], ws[2], ws[3], geom.dilation
                )))
            }
        };
        let low = Lowering {
            channels: xs[1],
            h: xs[2],
            w: xs[3],
            kh: ws[2],
            kw: ws[3],
            oh,
            ow,
            geom,
        };
        let out = {
            let nodes = self.nodes.borrow();
            let bias_vals = match ib {
                Some(i) if nodes[i].value.len() != ws[0] => {
                    return Err(Error::shape("conv2d", format!("bias has {} values for {} outputs", nodes[i].value.len(), ws[0])))
                }
                Some(i) => Some(nodes[i].value.as_slice()),
                None => None,
            };
            kernels::conv_forward(&nodes[ix].value, xs[0], &nodes[iw].value, ws[0], bias_vals, &low)
        };
        let mut ids = vec![ix, iw];
        ids.extend(ib);
        self.push(
            vec![xs[0], ws[0], oh, ow],
            out,
            Op::Conv2d {
                input: ix,
                weight: iw,
                bias: ib,
                low,
            },
            self.needs_grad(&ids),
        )
    }

    /// Transposed convolution (adjoint of [`Tape::conv2d`] in its input).
    /// `x: [B, Cin, H, W]`, `w: [Cin, Cout, kh, kw]`, `bias: [Cout]`.
    pub fn conv_transpose2d(&self, x: Var, w: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (ix, iw, ib, xs, ws) = self.conv_operands("conv_transpose2d", x, w, bias)?;
        geom.validate("conv_transpose2d", ws[2], ws[3])?;
        if xs[1] != ws[0] {
            return Err(Error::Config(format!(
                "conv_transpose2d: input has {} channels but weight expects {}",
                xs[1], ws[0]
            )));
        }
        let (oh, ow) = match (
            geom.transposed_extent(xs[2], ws[2], geom.pad_h),
            geom.transposed_extent(xs[3], ws[3], geom.pad_w),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => return Err(Error::Config("conv_transpose2d: padding removes the whole output".into())),
        };
        // The lowering describes the forward convolution this op is the adjoint of:
        // image side is the transposed-conv output, column side is its input.
        let low = Lowering {
            channels: ws[1],
            h: oh,
            w: ow,
            kh: ws[2],
            kw: ws[3],
            oh: xs[2],
            ow: xs[3],
            geom,
        };
        let out = {
            let nodes = self.nodes.borrow();
            let mut out = kernels::conv_backward_input(&nodes[ix].value, xs[0], &nodes[iw].value, ws[0], &low);
            if let Some(i) = ib {
                let b = &nodes[i].value;
                if b.len() != ws[1] {
                    return Err(Error::shape("conv_transpose2d", format!("bias has {} values for {} outputs", b.len(), ws[1])));
                }
                for (k, chunk) in out.chunks_mut(oh * ow).enumerate() {
                    let bv = b[k % ws[1]];
                    chunk.iter_mut().for_each(|v| *v += bv);
                }
            }
            out
        };
        let mut ids = vec![ix, iw];
        ids.extend(ib);
        self.push(
            vec![xs[0], ws[1], oh, ow],
            out,
            Op::ConvTranspose2d {
                input: ix,
                weight: iw,
                bias: ib,
                low,
            },
            self.needs_grad(&ids),
        )
    }

    /// Per-sample, per-channel normalization over the spatial plane followed
    /// by a per-channel affine map. `x: [B, C, H, W]`, `gamma, beta: [C]`.
    pub fn instance_norm(&self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let ix = self.check(x)?;
        let (ig, ib) = (self.check(gamma)?, self.check(beta)?);
        let (shape, out, xhat, rstd) = {
            let nodes = self.nodes.borrow();
            let xs = &nodes[ix].shape;
            if xs.len() != 4 || nodes[ig].value.len() != xs[1] || nodes[ib].value.len() != xs[1] {
                return Err(Error::shape("instance_norm", format!("input {xs:?} with affine of {} channels", nodes[ig].value.len())));
            }
            let (c, plane) = (xs[1], xs[2] * xs[3]);
            let src = &nodes[ix].value;
            let mut xhat = vec![T::zero(); src.len()];
            let mut out = vec![T::zero(); src.len()];
            let mut rstd = Vec::with_capacity(xs[0] * c);
            let n = T::of(plane as f64);
            for (k, (chunk, (xh, o))) in src
                .chunks(plane)
                .zip(xhat.chunks_mut(plane).zip(out.chunks_mut(plane)))
                .enumerate()
            {
                let mean = chunk.iter().copied().sum::<T>() / n;
                let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                let r = T::one() / (var + eps).sqrt();
                rstd.push(r);
                let (g, b) = (nodes[ig].value[k % c], nodes[ib].value[k % c]);
                for ((h, y), &v) in xh.iter_mut().zip(o.iter_mut()).zip(chunk) {
                    *h = (v - mean) * r;
                    *y = g * *h + b;
                }
            }
            (xs.clone(), out, xhat, rstd)
        };
        self.push(
            shape,
            out,
            Op::InstanceNorm {
                input: ix,
                gamma: ig,
                beta: ib,
                xhat,
                rstd,
            },
            self.needs_grad(&[ix, ig, ib]),
        )
    }

    /// Batched matrix product of `[B, m, k]` by `[B, k, n]`, either operand
    /// optionally transposed in its last two axes.
    pub fn bmm(&self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let (sa, sb) = (&nodes[ia].shape, &nodes[ib].shape);
            if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
                return Err(Error::shape("bmm", format!("{sa:?} x {sb:?}")));
            }
            let (m, k) = if trans_a { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
            let (k2, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
            if k != k2 {
                return Err(Error::shape("bmm", format!("inner extents {k} vs {k2}")));
            }
            let batch = sa[0];
            let mut out = vec![T::zero(); batch * m * n];
            for i in 0..batch {
                let am = mat_view(&nodes[ia].value, sa, i, trans_a);
                let bm = mat_view(&nodes[ib].value, sb, i, trans_b);
                kernels::gemm(am, bm, T::zero(), &mut out[i * m * n..(i + 1) * m * n], n, 1);
            }
            (vec![batch, m, n], out)
        };
        self.push(
            shape,
            out,
            Op::Bmm {
                a: ia,
                b: ib,
                trans_a,
                trans_b,
            },
            self.needs_grad(&[ia, ib]),
        )
    }

    // ----- backward --------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.tape != self.id {
            return Err(Error::Usage("backward called on a variable from another tape".into()));
        }
        let nodes = self.nodes.borrow();
        let root = loss.id;
        if root >= nodes.len() {
            return Err(Error::Usage("backward called on a variable that is not on the tape".into()));
        }
        if nodes[root].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[root].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![T::one()]);
        for id in (0..=root).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            check_finite("backward", &g)?;
            self.backprop(&nodes, id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (i, p)))
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            params,
        })
    }

    fn backprop(&self, nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &nodes[id];
        let rg = |i: usize| nodes[i].requires_grad;
        let val = |i: usize| nodes[i].value.as_slice();
        // Value of operand `i` at output position `k`, honouring scalar broadcast.
        let at = |i: usize, k: usize| {
            let v = &nodes[i].value;
            if v.len() == 1 {
                v[0]
            } else {
                v[k]
            }
        };
        let mut send = |i: usize, gi: Vec<T>| {
            if nodes[i].requires_grad {
                let gi = reduce_scalar(gi, nodes[i].value.len());
                add_into(&mut grads[i], gi);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    send(*a, g.iter().enumerate().map(|(k, &v)| v * at(*b, k)).collect());
                }
                if rg(*b) {
                    send(*b, g.iter().enumerate().map(|(k, &v)| v * at(*a, k)).collect());
                }
            }
            Op::Div(a, b) => {
                if rg(*a) {
                    send(*a, g.iter().enumerate().map(|(k, &v)| v / at(*b, k)).collect());
                }
                if rg(*b) {
                    send(
                        *b,
                        g.iter()
                            .enumerate()
                            .map(|(k, &v)| -v * at(*a, k) / (at(*b, k) * at(*b, k)))
                            .collect(),
                    );
                }
            }
            Op::Max(a, b) => {
                // ties go to `a`
                let pick_b = |k: usize| at(*b, k) > at(*a, k);
                if rg(*a) {
                    send(*a, g.iter().enumerate().map(|(k, &v)| if pick_b(k) { T::zero() } else { v }).collect());
                }
                if rg(*b) {
                    send(*b, g.iter().enumerate().map(|(k, &v)| if pick_b(k) { v } else { T::zero() }).collect());
                }
            }
            Op::Relu(a) => {
                let x = val(*a);
                send(*a, g.iter().zip(x).map(|(&v, &x)| if x > T::zero() { v } else { T::zero() }).collect());
            }
            Op::LeakyRelu(a, slope) => {
                let x = val(*a);
                send(*a, g.iter().zip(x).map(|(&v, &x)| if x > T::zero() { v } else { *slope * v }).collect());
            }
            Op::Exp(a) => {
                send(*a, g.iter().zip(&node.value).map(|(&v, &y)| v * y).collect());
            }
            Op::Log(a) => {
                send(*a, g.iter().zip(val(*a)).map(|(&v, &x)| v / x).collect());
            }
            Op::Powf(a, p) => {
                let p = *p;
                send(
                    *a,
                    g.iter()
                        .zip(val(*a))
                        .map(|(&v, &x)| if p == T::zero() { T::zero() } else { v * p * x.powf(p - T::one()) })
                        .collect(),
                );
            }
            Op::Affine(a, scale) => {
                send(*a, g.iter().map(|&v| v * *scale).collect());
            }
            Op::Clamp(a, lo, hi) => {
                send(
                    *a,
                    g.iter()
                        .zip(val(*a))
                        .map(|(&v, &x)| if x < *lo || x > *hi { T::zero() } else { v })
                        .collect(),
                );
            }
            Op::Custom { input, derivative } => {
                let x = val(*input);
                send(
                    *input,
                    g.iter()
                        .zip(x.iter().zip(&node.value))
                        .map(|(&v, (&x, &y))| v * derivative(x, y))
                        .collect(),
                );
            }
            Op::SumAll(a) => {
                send(*a, vec![g[0]; nodes[*a].value.len()]);
            }
            Op::Reshape(a) => send(*a, g.to_vec()),
            Op::Concat { inputs, axis } => {
                let (outer, n, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for &i in inputs {
                    let len = nodes[i].shape[*axis];
                    if rg(i) {
                        let mut gi = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * n + offset) * inner;
                            gi.extend_from_slice(&g[base..base + len * inner]);
                        }
                        send(i, gi);
                    }
                    offset += len;
                }
            }
            Op::Narrow { input, axis, start } => {
                let src_shape = &nodes[*input].shape;
                let (outer, n, inner) = split_axis(src_shape, *axis);
                let len = node.shape[*axis];
                let mut gi = vec![T::zero(); nodes[*input].value.len()];
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    gi[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                send(*input, gi);
            }
            Op::Softmax { input, axis } => {
                let (outer, n, inner) = split_axis(&node.shape, *axis);
                let y = &node.value;
                let mut gi = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let dot = (0..n).map(|k| g[at(k)] * y[at(k)]).sum::<T>();
                        for k in 0..n {
                            gi[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                send(*input, gi);
            }
            Op::Conv2d { input, weight, bias, low } => {
                let batch = nodes[*input].shape[0];
                let cout = nodes[*weight].shape[0];
                if rg(*input) {
                    send(*input, kernels::conv_backward_input(g, batch, val(*weight), cout, low));
                }
                if rg(*weight) {
                    send(*weight, kernels::conv_backward_weight(g, val(*input), batch, cout, low));
                }
                if let Some(b) = bias {
                    if rg(*b) {
                        send(*b, kernels::channel_sums(g, batch, cout, low.oh * low.ow));
                    }
                }
            }
            Op::ConvTranspose2d { input, weight, bias, low } => {
                let batch = nodes[*input].shape[0];
                let cin = nodes[*weight].shape[0];
                if rg(*input) {
                    send(*input, kernels::conv_forward(g, batch, val(*weight), cin, None, low));
                }
                if rg(*weight) {
                    send(*weight, kernels::conv_backward_weight(val(*input), g, batch, cin, low));
                }
                if let Some(b) = bias {
                    if rg(*b) {
                        send(*b, kernels::channel_sums(g, batch, low.channels, low.h * low.w));
                    }
                }
            }
            Op::InstanceNorm { input, gamma, beta, xhat, rstd } => {
                let c = node.shape[1];
                let plane = node.shape[2] * node.shape[3];
                let gam = val(*gamma);
                let n = T::of(plane as f64);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); g.len()];
                for (k, ((gk, xh), dxk)) in g
                    .chunks(plane)
                    .zip(xhat.chunks(plane))
                    .zip(dx.chunks_mut(plane))
                    .enumerate()
                {
                    let ch = k % c;
                    let sum_g = gk.iter().copied().sum::<T>();
                    let sum_gx = gk.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
                    dbeta[ch] += sum_g;
                    dgamma[ch] += sum_gx;
                    let scale = gam[ch] * rstd[k];
                    let (mg, mgx) = (sum_g / n, sum_gx / n);
                    for ((d, &gv), &h) in dxk.iter_mut().zip(gk).zip(xh) {
                        *d = scale * (gv - mg - h * mgx);
                    }
                }
                send(*input, dx);
                send(*gamma, dgamma);
                send(*beta, dbeta);
            }
            Op::Bmm { a, b, trans_a, trans_b } => {
                let (sa, sb) = (&nodes[*a].shape, &nodes[*b].shape);
                let batch = sa[0];
                let (m, n) = (node.shape[1], node.shape[2]);
                if rg(*a) {
                    let mut ga = vec![T::zero(); val(*a).len()];
                    let item = sa[1] * sa[2];
                    for i in 0..batch {
                        let gm = Mat::new(&g[i * m * n..(i + 1) * m * n], m, n);
                        let bm = mat_view(val(*b), sb, i, *trans_b);
                        // d(logical A) = G * B^T, written back through A's layout
                        let (rs, cs) = if *trans_a { (1, sa[2]) } else { (sa[2], 1) };
                        kernels::gemm(gm, bm.t(), T::zero(), &mut ga[i * item..(i + 1) * item], rs, cs);
                    }
                    send(*a, ga);
                }
                if rg(*b) {
                    let mut gb = vec![T::zero(); val(*b).len()];
                    let item = sb[1] * sb[2];
                    for i in 0..batch {
                        let gm = Mat::new(&g[i * m * n..(i + 1) * m * n], m, n);
                        let am = mat_view(val(*a), sa, i, *trans_a);
                        let (rs, cs) = if *trans_b { (1, sb[2]) } else { (sb[2], 1) };
                        kernels::gemm(am.t(), gm, T::zero(), &mut gb[i * item..(i + 1) * item], rs, cs);
                    }
                    send(*b, gb);
                }
            }
        }
        Ok(())
    }
}

fn mat_view<'a, T>(data: &'a [T], shape: &[usize], i: usize, trans: bool) -> Mat<'a, T> {
    let item = shape[1] * shape[2];
    let m = Mat::new(&data[i * item..(i + 1) * item], shape[1], shape[2]);
    if trans {
        m.t()
    } else {
        m
    }
}

fn reduce_scalar<T: Scalar>(g: Vec<T>, len: usize) -> Vec<T> {
    if g.len() == len {
        g
    } else {
        vec![g.iter().copied().sum::<T>()]
    }
}
