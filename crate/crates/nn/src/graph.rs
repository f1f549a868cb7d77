use std::collections::HashMap;

use crate::kernels::{self, ConvGeom};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    /// `b`'s shape is a suffix of `a`'s; `b` is tiled over the leading axes.
    AddSuffix(Var, Var),
    /// `x: [N, C, ...]`, `e: [N, C]`, `e` broadcast over the trailing axes.
    AddChannel(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        ta: bool,
        tb: bool,
        shared_b: bool,
    },
    Silu(Var),
    Gelu(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    AvgPool2(Var),
    Upsample(Var, usize),
    Concat {
        a: Var,
        b: Var,
        outer: usize,
        a_inner: usize,
        b_inner: usize,
    },
    Slice {
        x: Var,
        outer: usize,
        inner: usize,
        start: usize,
        len: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Broadcast(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Mean(Var),
    Mse(Var, Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A single-use computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Parameters of a [`ParamSet`] bound into a graph as trainable leaves.
#[derive(Debug, Clone)]
pub struct BoundParams {
    order: Vec<Var>,
    shapes: Vec<Vec<usize>>,
    by_name: HashMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Var {
        match self.by_name.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    /// Gradients for every bound parameter, in `ParamSet` order. Parameters the
    /// loss does not depend on get zeros.
    pub fn collect(&self, grads: &Grads) -> Vec<Tensor> {
        self.order
            .iter()
            .zip(&self.shapes)
            .map(|(v, shape)| match grads.wrt(*v) {
                Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
                None => Tensor::zeros(shape),
            })
            .collect()
    }
}

fn suffix_of(suffix: &[usize], shape: &[usize]) -> bool {
    suffix.len() <= shape.len() && shape[shape.len() - suffix.len()..] == *suffix
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Bind every tensor of `params` as a leaf. With `trainable = false` the
    /// leaves are constants and receive no gradient.
    pub fn bind(&mut self, params: &ParamSet, trainable: bool) -> BoundParams {
        let mut order = Vec::with_capacity(params.len());
        let mut shapes = Vec::with_capacity(params.len());
        let mut by_name = HashMap::with_capacity(params.len());
        for (name, t) in params.iter() {
            let v = if trainable {
                self.param(t.clone())
            } else {
                self.constant(t.clone())
            };
            order.push(v);
            shapes.push(t.shape().to_vec());
            by_name.insert(name.to_string(), v);
        }
        BoundParams {
            order,
            shapes,
            by_name,
        }
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let ng = self.needs(x);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add: shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(ta.shape(), data).unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    /// `a + b` with `b` tiled over `a`'s leading axes (bias, position table).
    pub fn add_suffix(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert!(
            suffix_of(tb.shape(), ta.shape()),
            "add_suffix: {:?} is not a suffix of {:?}",
            tb.shape(),
            ta.shape()
        );
        let inner = tb.len();
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(inner) {
            for (x, y) in chunk.iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        let value = Tensor::new(ta.shape(), data).unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::AddSuffix(a, b), ng)
    }

    /// Add a per-(sample, channel) value to every spatial position.
    pub fn add_channel(&mut self, x: Var, e: Var) -> Var {
        let (tx, te) = (self.value(x), self.value(e));
        assert!(tx.shape().len() >= 2 && te.shape() == &tx.shape()[..2]);
        let spatial: usize = tx.shape()[2..].iter().product();
        let mut data = tx.data().to_vec();
        for (chunk, v) in data.chunks_mut(spatial.max(1)).zip(te.data()) {
            for x in chunk.iter_mut() {
                *x += v;
            }
        }
        let value = Tensor::new(tx.shape(), data).unwrap();
        let ng = self.needs(x) || self.needs(e);
        self.push(value, Op::AddChannel(x, e), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul: shape mismatch");
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(ta.shape(), data).unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    /// `x @ w` for `x: [..., k]` and a shared `w: [k, n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        assert_eq!(tw.shape().len(), 2, "matmul: weight must be 2-D");
        let k = *tx.shape().last().expect("matmul: scalar input");
        assert_eq!(tw.shape()[0], k, "matmul: inner dimension mismatch");
        let n = tw.shape()[1];
        let m: usize = tx.shape()[..tx.shape().len() - 1].iter().product();
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, tx.data(), false, tw.data(), false, &mut out, false);
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(&shape, out).unwrap();
        let ng = self.needs(x) || self.needs(w);
        let op = Op::MatMul {
            a: x,
            b: w,
            batch: 1,
            m,
            k,
            n,
            ta: false,
            tb: false,
            shared_b: true,
        };
        self.push(value, op, ng)
    }

    /// Batched `op(a) @ op(b)` over 3-D operands `[B, ·, ·]`.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (xa, xb) = (self.value(a), self.value(b));
        assert_eq!(xa.shape().len(), 3, "bmm: lhs must be 3-D");
        assert_eq!(xb.shape().len(), 3, "bmm: rhs must be 3-D");
        let batch = xa.shape()[0];
        assert_eq!(xb.shape()[0], batch, "bmm: batch mismatch");
        let (m, k) = if ta {
            (xa.shape()[2], xa.shape()[1])
        } else {
            (xa.shape()[1], xa.shape()[2])
        };
        let (kb, n) = if tb {
            (xb.shape()[2], xb.shape()[1])
        } else {
            (xb.shape()[1], xb.shape()[2])
        };
        assert_eq!(k, kb, "bmm: inner dimension mismatch");
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            kernels::gemm(
                m,
                k,
                n,
                &xa.data()[i * m * k..(i + 1) * m * k],
                ta,
                &xb.data()[i * k * n..(i + 1) * k * n],
                tb,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let value = Tensor::new(&[batch, m, n], out).unwrap();
        let ng = self.needs(a) || self.needs(b);
        let op = Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            ta,
            tb,
            shared_b: false,
        };
        self.push(value, op, ng)
    }

    /// `x @ w + b` over the last axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_suffix(y, b)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * kernels::sigmoid(v), Op::Silu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::gelu, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let n = *tx.shape().last().expect("softmax: scalar input");
        let mut value = tx.clone();
        kernels::softmax_rows(value.data_mut(), n);
        let ng = self.needs(x);
        self.push(value, Op::Softmax(x), ng)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let tx = self.value(x);
        let d = *tx.shape().last().expect("layer_norm: scalar input");
        assert_eq!(self.value(gamma).shape(), &[d]);
        assert_eq!(self.value(beta).shape(), &[d]);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = tx.len() / d;
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(tx.shape(), out).unwrap();
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Stride-1 zero-padded convolution, `x: [N, C, H, W]`, `w: [O, C, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        let xs = tx.shape();
        let ws = tw.shape();
        assert_eq!(xs.len(), 4, "conv2d: input must be NCHW");
        assert_eq!(ws.len(), 4, "conv2d: weight must be OCkk");
        assert_eq!(ws[1], xs[1], "conv2d: channel mismatch");
        assert_eq!(ws[2], ws[3], "conv2d: kernel must be square");
        let out_c = ws[0];
        assert_eq!(self.value(b).shape(), &[out_c]);
        let geom = ConvGeom {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel: ws[2],
            pad,
        };
        let (n, oh, ow) = (xs[0], geom.out_h(), geom.out_w());
        let plane = oh * ow;
        let in_size = xs[1] * xs[2] * xs[3];
        let rows = geom.col_rows();
        let mut cols = vec![0.0; rows * plane];
        let mut out = vec![0.0; n * out_c * plane];
        let bias = self.value(b).data();
        for i in 0..n {
            kernels::im2col(&tx.data()[i * in_size..(i + 1) * in_size], geom, &mut cols);
            let dst = &mut out[i * out_c * plane..(i + 1) * out_c * plane];
            kernels::gemm(
                out_c,
                rows,
                plane,
                tw.data(),
                false,
                &cols,
                false,
                dst,
                false,
            );
            for (o, chunk) in dst.chunks_mut(plane).enumerate() {
                for v in chunk.iter_mut() {
                    *v += bias[o];
                }
            }
        }
        let value = Tensor::new(&[n, out_c, oh, ow], out).unwrap();
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(value, Op::Conv2d { x, w, b, geom }, ng)
    }

    /// 2×2 average pooling over the last two axes.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let s = tx.shape();
        let r = s.len();
        assert!(r >= 2);
        let (h, w) = (s[r - 2], s[r - 1]);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2: odd spatial size");
        let planes = tx.len() / (h * w);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            let src = &tx.data()[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    out[(p * oh + y) * ow + xx] =
                        0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        let mut shape = s.to_vec();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let value = Tensor::new(&shape, out).unwrap();
        let ng = self.needs(x);
        self.push(value, Op::AvgPool2(x), ng)
    }

    /// Nearest-neighbour upsampling by `factor` over the last two axes.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Var {
        let tx = self.value(x);
        let s = tx.shape();
        let r = s.len();
        assert!(r >= 2 && factor >= 1);
        let (h, w) = (s[r - 2], s[r - 1]);
        let (oh, ow) = (h * factor, w * factor);
        let planes = tx.len() / (h * w);
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(p * oh + y) * ow + xx] = tx.data()[(p * h + y / factor) * w + xx / factor];
                }
            }
        }
        let mut shape = s.to_vec();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let value = Tensor::new(&shape, out).unwrap();
        let ng = self.needs(x);
        self.push(value, Op::Upsample(x, factor), ng)
    }

    /// Concatenate along `axis`; all other axes must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Var {
        let (xa, xb) = (self.value(a), self.value(b));
        let (sa, sb) = (xa.shape(), xb.shape());
        assert_eq!(sa.len(), sb.len(), "concat: rank mismatch");
        assert!(axis < sa.len());
        for i in 0..sa.len() {
            if i != axis {
                assert_eq!(sa[i], sb[i], "concat: shape mismatch on axis {i}");
            }
        }
        let outer: usize = sa[..axis].iter().product();
        let a_inner: usize = sa[axis..].iter().product();
        let b_inner: usize = sb[axis..].iter().product();
        let mut out = Vec::with_capacity(xa.len() + xb.len());
        for o in 0..outer {
            out.extend_from_slice(&xa.data()[o * a_inner..(o + 1) * a_inner]);
            out.extend_from_slice(&xb.data()[o * b_inner..(o + 1) * b_inner]);
        }
        let mut shape = sa.to_vec();
        shape[axis] += sb[axis];
        let value = Tensor::new(&shape, out).unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(
            value,
            Op::Concat {
                a,
                b,
                outer,
                a_inner,
                b_inner,
            },
            ng,
        )
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let tx = self.value(x);
        let s = tx.shape();
        assert!(
            axis < s.len() && start + len <= s[axis],
            "slice out of range"
        );
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&tx.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let value = Tensor::new(&shape, out).unwrap();
        let ng = self.needs(x);
        let op = Op::Slice {
            x,
            outer,
            inner: s[axis] * inner,
            start: start * inner,
            len: len * inner,
        };
        self.push(value, op, ng)
    }

    /// Rows of `table: [V, D]` at `ids`, giving `[ids.len(), D]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tt = self.value(table);
        assert_eq!(tt.shape().len(), 2, "gather: table must be 2-D");
        let d = tt.shape()[1];
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            assert!(i < tt.shape()[0], "gather: id {i} out of range");
            out.extend_from_slice(&tt.data()[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(&[ids.len(), d], out).unwrap();
        let ng = self.needs(table);
        self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    /// Repeat `x` along a new leading axis of size `n`.
    pub fn broadcast(&mut self, x: Var, n: usize) -> Var {
        let tx = self.value(x);
        let mut out = Vec::with_capacity(tx.len() * n);
        for _ in 0..n {
            out.extend_from_slice(tx.data());
        }
        let mut shape = vec![n];
        shape.extend_from_slice(tx.shape());
        let value = Tensor::new(&shape, out).unwrap();
        let ng = self.needs(x);
        self.push(value, Op::Broadcast(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self
            .value(x)
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("{e}"));
        let ng = self.needs(x);
        self.push(value, Op::Reshape(x), ng)
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let tx = self.value(x);
        let s = tx.shape();
        assert_eq!(perm.len(), s.len(), "permute: rank mismatch");
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let out = permute_data(tx.data(), s, perm);
        let value = Tensor::new(&out_shape, out).unwrap();
        let ng = self.needs(x);
        self.push(value, Op::Permute(x, perm.to_vec()), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        let ng = self.needs(x);
        self.push(value, Op::Mean(x), ng)
    }

    /// Mean squared error between `pred` and `target` over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Var {
        let (p, t) = (self.value(pred), self.value(target));
        assert_eq!(p.shape(), t.shape(), "mse: shape mismatch");
        let sum: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let value = Tensor::scalar(sum / p.len() as f64);
        let ng = self.needs(pred) || self.needs(target);
        self.push(value, Op::Mse(pred, target), ng)
    }

    /// Mean softmax cross-entropy of `logits: [N, C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let tl = self.value(logits);
        assert_eq!(tl.shape().len(), 2);
        let (n, c) = (tl.shape()[0], tl.shape()[1]);
        assert_eq!(labels.len(), n, "cross_entropy: label count");
        let mut probs = tl.data().to_vec();
        kernels::softmax_rows(&mut probs, c);
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            assert!(y < c, "cross_entropy: label out of range");
            let row = &tl.data()[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let value = Tensor::scalar(total / n as f64);
        let ng = self.needs(logits);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Reverse-mode sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward: loss must be scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        Grads { grads }
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        let s = slot(grads, v, g.len());
                        s.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddSuffix(a, b) => {
                if wants(*a) {
                    let s = slot(grads, *a, g.len());
                    s.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if wants(*b) {
                    let inner = val(*b).len();
                    let s = slot(grads, *b, inner);
                    for chunk in g.chunks(inner) {
                        s.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddChannel(x, e) => {
                if wants(*x) {
                    let s = slot(grads, *x, g.len());
                    s.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if wants(*e) {
                    let ne = val(*e).len();
                    let spatial = g.len() / ne;
                    let s = slot(grads, *e, ne);
                    for (acc, chunk) in s.iter_mut().zip(g.chunks(spatial.max(1))) {
                        *acc += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let other = val(*b).data();
                    let s = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        s[i] += g[i] * other[i];
                    }
                }
                if wants(*b) {
                    let other = val(*a).data();
                    let s = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        s[i] += g[i] * other[i];
                    }
                }
            }
            Op::Scale(x, c) => {
                let s = slot(grads, *x, g.len());
                s.iter_mut().zip(g).for_each(|(a, b)| *a += b * c);
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                ta,
                tb,
                shared_b,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (val(*a).data(), val(*b).data());
                let b_stride = if *shared_b { 0 } else { k * n };
                if wants(*a) {
                    let s = slot(grads, *a, ad.len());
                    for i in 0..*batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bd[i * b_stride..i * b_stride + k * n];
                        let si = &mut s[i * m * k..(i + 1) * m * k];
                        if *ta {
                            kernels::gemm(k, n, m, bi, *tb, gi, true, si, true);
                        } else {
                            kernels::gemm(m, n, k, gi, false, bi, !*tb, si, true);
                        }
                    }
                }
                if wants(*b) {
                    let s = slot(grads, *b, bd.len());
                    for i in 0..*batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &ad[i * m * k..(i + 1) * m * k];
                        let si = &mut s[i * b_stride..i * b_stride + k * n];
                        if *tb {
                            kernels::gemm(n, m, k, gi, true, ai, *ta, si, true);
                        } else {
                            kernels::gemm(k, m, n, ai, !*ta, gi, false, si, true);
                        }
                    }
                }
            }
            Op::Silu(x) => {
                let xd = val(*x).data();
                let s = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    let sg = kernels::sigmoid(xd[i]);
                    s[i] += g[i] * sg * (1.0 + xd[i] * (1.0 - sg));
                }
            }
            Op::Gelu(x) => {
                let xd = val(*x).data();
                let s = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    s[i] += g[i] * kernels::gelu_grad(xd[i]);
                }
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                let s = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    s[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let s = slot(grads, *x, g.len());
                for r in 0..g.len() / n {
                    let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        s[r * n + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gm = val(*gamma).data();
                let d = gm.len();
                let rows = g.len() / d;
                if wants(*gamma) {
                    let s = slot(grads, *gamma, d);
                    for r in 0..rows {
                        for j in 0..d {
                            s[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if wants(*beta) {
                    let s = slot(grads, *beta, d);
                    for r in 0..rows {
                        for j in 0..d {
                            s[j] += g[r * d + j];
                        }
                    }
                }
                if wants(*x) {
                    let s = slot(grads, *x, g.len());
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            dxhat[j] = g[r * d + j] * gm[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xhat[r * d + j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            s[r * d + j] += rstd[r] * (dxhat[j] - m1 - xhat[r * d + j] * m2);
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let xs = val(*x).shape().to_vec();
                let wd = val(*w).data();
                let out_c = val(*w).shape()[0];
                let (n, plane) = (xs[0], geom.out_h() * geom.out_w());
                let in_size = xs[1] * xs[2] * xs[3];
                let rows = geom.col_rows();
                if wants(*b) {
                    let s = slot(grads, *b, out_c);
                    for i in 0..n {
                        for o in 0..out_c {
                            let base = (i * out_c + o) * plane;
                            s[o] += g[base..base + plane].iter().sum::<f64>();
                        }
                    }
                }
                let mut cols = vec![0.0; rows * plane];
                if wants(*w) {
                    let xd = val(*x).data();
                    let s = slot(grads, *w, wd.len());
                    for i in 0..n {
                        kernels::im2col(&xd[i * in_size..(i + 1) * in_size], *geom, &mut cols);
                        let gi = &g[i * out_c * plane..(i + 1) * out_c * plane];
                        kernels::gemm(out_c, plane, rows, gi, false, &cols, true, s, true);
                    }
                }
                if wants(*x) {
                    let s = slot(grads, *x, n * in_size);
                    for i in 0..n {
                        let gi = &g[i * out_c * plane..(i + 1) * out_c * plane];
                        kernels::gemm(rows, out_c, plane, wd, true, gi, false, &mut cols, false);
                        kernels::col2im(&cols, *geom, &mut s[i * in_size..(i + 1) * in_size]);
                    }
                }
            }
            Op::AvgPool2(x) => {
                let xs = val(*x).shape();
                let r = xs.len();
                let (h, w) = (xs[r - 2], xs[r - 1]);
                let (oh, ow) = (h / 2, w / 2);
                let s = slot(grads, *x, val(*x).len());
                for p in 0..g.len() / (oh * ow) {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let gv = 0.25 * g[(p * oh + y) * ow + xx];
                            let i = p * h * w + 2 * y * w + 2 * xx;
                            s[i] += gv;
                            s[i + 1] += gv;
                            s[i + w] += gv;
                            s[i + w + 1] += gv;
                        }
                    }
                }
            }
            Op::Upsample(x, f) => {
                let xs = val(*x).shape();
                let r = xs.len();
                let (h, w) = (xs[r - 2], xs[r - 1]);
                let (oh, ow) = (h * f, w * f);
                let s = slot(grads, *x, val(*x).len());
                for p in 0..g.len() / (oh * ow) {
                    for y in 0..oh {
                        for xx in 0..ow {
                            s[(p * h + y / f) * w + xx / f] += g[(p * oh + y) * ow + xx];
                        }
                    }
                }
            }
            Op::Concat {
                a,
                b,
                outer,
                a_inner,
                b_inner,
            } => {
                let stride = a_inner + b_inner;
                if wants(*a) {
                    let s = slot(grads, *a, outer * a_inner);
                    for o in 0..*outer {
                        let src = &g[o * stride..o * stride + a_inner];
                        let dst = &mut s[o * a_inner..(o + 1) * a_inner];
                        dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                }
                if wants(*b) {
                    let s = slot(grads, *b, outer * b_inner);
                    for o in 0..*outer {
                        let src = &g[o * stride + a_inner..(o + 1) * stride];
                        let dst = &mut s[o * b_inner..(o + 1) * b_inner];
                        dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Slice {
                x,
                outer,
                inner,
                start,
                len,
            } => {
                let s = slot(grads, *x, outer * inner);
                for o in 0..*outer {
                    let dst = &mut s[o * inner + start..o * inner + start + len];
                    let src = &g[o * len..(o + 1) * len];
                    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
            }
            Op::Gather { table, ids } => {
                let tt = val(*table);
                let d = tt.shape()[1];
                let s = slot(grads, *table, tt.len());
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        s[i * d + j] += g[r * d + j];
                    }
                }
            }
            Op::Broadcast(x) => {
                let inner = val(*x).len();
                let s = slot(grads, *x, inner);
                for chunk in g.chunks(inner) {
                    s.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
            }
            Op::Reshape(x) => {
                let s = slot(grads, *x, g.len());
                s.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            Op::Permute(x, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let back = permute_data(g, node.value.shape(), &inverse);
                let s = slot(grads, *x, g.len());
                s.iter_mut().zip(&back).for_each(|(a, b)| *a += b);
            }
            Op::Mean(x) => {
                let n = val(*x).len();
                let s = slot(grads, *x, n);
                let gv = g[0] / n as f64;
                s.iter_mut().for_each(|a| *a += gv);
            }
            Op::Mse(p, t) => {
                let (pd, td) = (val(*p).data(), val(*t).data());
                let c = 2.0 * g[0] / pd.len() as f64;
                if wants(*p) {
                    let s = slot(grads, *p, pd.len());
                    for i in 0..pd.len() {
                        s[i] += c * (pd[i] - td[i]);
                    }
                }
                if wants(*t) {
                    let s = slot(grads, *t, pd.len());
                    for i in 0..pd.len() {
                        s[i] -= c * (pd[i] - td[i]);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let c = probs.len() / n;
                let s = slot(grads, *logits, probs.len());
                let scale = g[0] / n as f64;
                for (i, &y) in labels.iter().enumerate() {
                    for j in 0..c {
                        let target = if j == y { 1.0 } else { 0.0 };
                        s[i * c + j] += scale * (probs[i * c + j] - target);
                    }
                }
            }
        }
    }
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}
