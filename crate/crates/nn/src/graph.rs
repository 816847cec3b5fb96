//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation eagerly (values are computed when the
//! node is created). [`Graph::backward`] walks the tape in reverse and
//! returns a [`Gradients`] table indexed by node.

use std::collections::HashMap;

use crate::error::{NnError, Result};
use crate::kernels::{self, AttnShape, ConvGeom, ConvShape, NormStats};
use crate::params::{ParamId, ParamStore};
use crate::real::{lit, Real};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MulConst(Var, Tensor<T>),
    Abs(Var),
    Square(Var),
    Silu(Var),
    Tanh(Var),
    LeakyRelu(Var, T),
    LogSigmoid(Var),
    Sum(Var),
    Mean(Var),
    AddChannelBias(Var, Var),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        shape: ConvShape,
    },
    Upsample2x(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: NormStats<T>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<T>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: Vec<T>,
    },
    ChannelsLast(Var),
    ChannelsFirst(Var),
    TransposeLast2(Var),
    ConcatChannels(Var, Var),
    Reshape(Var),
    StraightThrough(Var),
    GatherRows {
        book: Var,
        indices: Vec<usize>,
    },
    SelectBatch {
        a: Var,
        b: Var,
        take_a: Vec<bool>,
    },
    ScaleBatch(Var, Vec<T>),
    RepeatBatch(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: String) -> NnError {
    NnError::Shape(msg)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient should be reported by [`Graph::backward`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Inserts (once per graph) the current value of a stored parameter.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Copies the value into a new constant node, cutting the gradient.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = lit::<T>(s);
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = lit::<T>(s);
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a), &[a])
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Tensor<T>) -> Result<Var> {
        if c.shape() != self.shape(a) {
            return Err(shape_err(format!(
                "mul_const: {:?} vs {:?}",
                self.shape(a),
                c.shape()
            )));
        }
        let v = self.value(a).zip_map(&c, |x, y| x * y);
        Ok(self.push(v, Op::MulConst(a, c), &[a]))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.abs());
        self.push(v, Op::Abs(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x / (T::one() + (-x).exp()));
        self.push(v, Op::Silu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = lit::<T>(slope);
        let v = self.value(a).map(|x| if x > T::zero() { x } else { x * s });
        self.push(v, Op::LeakyRelu(a, s), &[a])
    }

    /// Numerically stable `log(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .map(|x| x.min(T::zero()) - (-(x.abs())).exp().ln_1p());
        self.push(v, Op::LogSigmoid(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a), &[a])
    }

    /// Adds a per-(sample, channel) bias `[N, C]` to `[N, C, ...]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b);
        if xs.len() < 2 || bs != [xs[0], xs[1]] {
            return Err(shape_err(format!("channel bias {:?} for {:?}", bs, xs)));
        }
        let len: usize = xs[2..].iter().product();
        let mut v = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for (chunk, &bv) in v.data_mut().chunks_mut(len).zip(&bias) {
            for e in chunk {
                *e += bv;
            }
        }
        Ok(self.push(v, Op::AddChannelBias(x, b), &[x, b]))
    }

    /// Convolution of `[N, Cin, D, H, W]` with weights `[Cout, Cin, kd, kh, kw]`.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 5 || ws.len() != 5 {
            return Err(shape_err(format!(
                "conv expects 5D tensors, got {:?} and {:?}",
                xs, ws
            )));
        }
        if ws[1] != xs[1] || ws[2..] != geom.kernel {
            return Err(shape_err(format!(
                "conv weight {:?} incompatible with input {:?}",
                ws, xs
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err("conv bias extent".into()));
            }
        }
        let input = [xs[2], xs[3], xs[4]];
        let output = geom
            .out_dims(input)
            .ok_or_else(|| shape_err(format!("conv kernel larger than input {:?}", input)))?;
        let shape = ConvShape {
            batch: xs[0],
            cin: xs[1],
            cout: ws[0],
            input,
            output,
        };
        let mut y = Tensor::zeros(&[xs[0], ws[0], output[0], output[1], output[2]]);
        kernels::conv_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &shape,
            &geom,
            y.data_mut(),
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            y,
            Op::Conv {
                x,
                w,
                b,
                geom,
                shape,
            },
            &inputs,
        ))
    }

    /// Nearest-neighbour 2x upsampling of `[N, C, D, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 {
            return Err(shape_err("upsample expects 5D input".into()));
        }
        let mut y = Tensor::zeros(&[xs[0], xs[1], 2 * xs[2], 2 * xs[3], 2 * xs[4]]);
        kernels::upsample2x_forward(
            self.value(x).data(),
            xs[0] * xs[1],
            [xs[2], xs[3], xs[4]],
            y.data_mut(),
        );
        Ok(self.push(y, Op::Upsample2x(x), &[x]))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || groups == 0 || xs[1] % groups != 0 {
            return Err(shape_err(format!(
                "group norm: {groups} groups for {:?}",
                xs
            )));
        }
        if self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(shape_err("group norm affine extent".into()));
        }
        let len: usize = xs[2..].iter().product();
        let mut y = Tensor::zeros(&xs);
        let stats = kernels::group_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            xs[0],
            xs[1],
            len,
            groups,
            1e-5,
            y.data_mut(),
        );
        Ok(self.push(
            y,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let width = *xs
            .last()
            .ok_or_else(|| shape_err("layer norm of scalar".into()))?;
        if self.shape(gamma) != [width] || self.shape(beta) != [width] {
            return Err(shape_err("layer norm affine extent".into()));
        }
        let mut y = Tensor::zeros(&xs);
        let stats = kernels::layer_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            width,
            1e-5,
            y.data_mut(),
        );
        Ok(self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            &[x, gamma, beta],
        ))
    }

    /// `x w^T + b` over the trailing dimension; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let k = *xs
            .last()
            .ok_or_else(|| shape_err("linear of scalar".into()))?;
        if ws.len() != 2 || ws[1] != k {
            return Err(shape_err(format!(
                "linear weight {:?} for input {:?}",
                ws, xs
            )));
        }
        let rows = self.value(x).numel() / k;
        let out = ws[0];
        let mut ys = xs.clone();
        *ys.last_mut().unwrap() = out;
        let mut y = Tensor::zeros(&ys);
        crate::real::matmul_into(
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            rows,
            k,
            out,
            y.data_mut(),
            false,
        );
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(shape_err("linear bias extent".into()));
            }
            let bias = self.value(b).data().to_vec();
            for row in y.data_mut().chunks_mut(out) {
                for (e, &bv) in row.iter_mut().zip(&bias) {
                    *e += bv;
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(y, Op::Linear { x, w, b }, &inputs))
    }

    /// Single-head scaled dot-product attention on `[N, L, C]` queries and
    /// `[N, M, C]` keys / `[N, M, Cv]` values.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        let ks = self.shape(k).to_vec();
        let vs = self.shape(v).to_vec();
        if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 {
            return Err(shape_err("attention expects 3D tensors".into()));
        }
        if qs[0] != ks[0] || ks[0] != vs[0] || qs[2] != ks[2] || ks[1] != vs[1] {
            return Err(shape_err(format!(
                "attention extents q{:?} k{:?} v{:?}",
                qs, ks, vs
            )));
        }
        let shape = AttnShape {
            batch: qs[0],
            queries: qs[1],
            keys: ks[1],
            qk_width: qs[2],
            v_width: vs[2],
        };
        let mut out = Tensor::zeros(&[qs[0], qs[1], vs[2]]);
        let probs = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            &shape,
            out.data_mut(),
        );
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// `[N, C, spatial...]` to `[N, L, C]` token layout.
    pub fn channels_last(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 {
            return Err(shape_err("channels_last expects at least 3 dims".into()));
        }
        let (n, c) = (xs[0], xs[1]);
        let l: usize = xs[2..].iter().product();
        let y = permute_ncl(self.value(x).data(), n, c, l);
        let y = Tensor::from_vec(&[n, l, c], y)?;
        Ok(self.push(y, Op::ChannelsLast(x), &[x]))
    }

    /// Inverse of [`Graph::channels_last`], restoring `spatial` extents.
    pub fn channels_first(&mut self, x: Var, spatial: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let l: usize = spatial.iter().product();
        if xs.len() != 3 || xs[1] != l {
            return Err(shape_err(format!(
                "channels_first {:?} to {:?}",
                xs, spatial
            )));
        }
        let (n, c) = (xs[0], xs[2]);
        let y = permute_ncl(self.value(x).data(), n, l, c);
        let mut shape = vec![n, c];
        shape.extend_from_slice(spatial);
        let y = Tensor::from_vec(&shape, y)?;
        Ok(self.push(y, Op::ChannelsFirst(x), &[x]))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(shape_err("transpose_last2 expects 3D input".into()));
        }
        let y = permute_ncl(self.value(x).data(), xs[0], xs[1], xs[2]);
        let y = Tensor::from_vec(&[xs[0], xs[2], xs[1]], y)?;
        Ok(self.push(y, Op::TransposeLast2(x), &[x]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() < 2 || as_.len() != bs.len() || as_[0] != bs[0] || as_[2..] != bs[2..] {
            return Err(shape_err(format!("concat {:?} with {:?}", as_, bs)));
        }
        let n = as_[0];
        let la: usize = as_[1..].iter().product();
        let lb: usize = bs[1..].iter().product();
        let mut data = Vec::with_capacity(n * (la + lb));
        for i in 0..n {
            data.extend_from_slice(&self.value(a).data()[i * la..(i + 1) * la]);
            data.extend_from_slice(&self.value(b).data()[i * lb..(i + 1) * lb]);
        }
        let mut shape = as_.clone();
        shape[1] += bs[1];
        let y = Tensor::from_vec(&shape, data)?;
        Ok(self.push(y, Op::ConcatChannels(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x), &[x]))
    }

    /// Node whose value is `value` but whose gradient passes unchanged to `z`.
    pub fn straight_through(&mut self, z: Var, value: Tensor<T>) -> Result<Var> {
        if value.shape() != self.shape(z) {
            return Err(shape_err("straight-through value extent".into()));
        }
        Ok(self.push(value, Op::StraightThrough(z), &[z]))
    }

    /// Gathers codebook rows `book[K, D]` into a `[N, D, spatial...]` volume.
    /// `indices` are ordered sample-major then site.
    pub fn gather_rows(
        &mut self,
        book: Var,
        indices: &[usize],
        batch: usize,
        spatial: &[usize],
    ) -> Result<Var> {
        let bs = self.shape(book).to_vec();
        let l: usize = spatial.iter().product();
        if bs.len() != 2 || indices.len() != batch * l {
            return Err(shape_err("gather_rows extents".into()));
        }
        let (k, d) = (bs[0], bs[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(shape_err(format!("codebook index {bad} out of range {k}")));
        }
        let bd = self.value(book).data();
        let mut data = vec![T::zero(); batch * d * l];
        for n in 0..batch {
            for site in 0..l {
                let row = indices[n * l + site];
                for c in 0..d {
                    data[(n * d + c) * l + site] = bd[row * d + c];
                }
            }
        }
        let mut shape = vec![batch, d];
        shape.extend_from_slice(spatial);
        let y = Tensor::from_vec(&shape, data)?;
        Ok(self.push(
            y,
            Op::GatherRows {
                book,
                indices: indices.to_vec(),
            },
            &[book],
        ))
    }

    /// Per-sample choice between `a[N, ...]` and a broadcast `b[1, ...]`.
    pub fn select_batch(&mut self, a: Var, b: Var, take_a: &[bool]) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if bs.first() != Some(&1) || as_[1..] != bs[1..] || take_a.len() != as_[0] {
            return Err(shape_err(format!("select_batch {:?} / {:?}", as_, bs)));
        }
        let per = self.value(b).numel();
        let mut y = self.value(a).clone();
        let bd = self.value(b).data().to_vec();
        for (i, &keep) in take_a.iter().enumerate() {
            if !keep {
                y.data_mut()[i * per..(i + 1) * per].copy_from_slice(&bd);
            }
        }
        Ok(self.push(
            y,
            Op::SelectBatch {
                a,
                b,
                take_a: take_a.to_vec(),
            },
            &[a, b],
        ))
    }

    /// Multiplies sample `i` of `x` by `factors[i]`.
    pub fn scale_batch(&mut self, x: Var, factors: &[f64]) -> Result<Var> {
        let n = self.shape(x)[0];
        if factors.len() != n {
            return Err(shape_err("scale_batch factor count".into()));
        }
        let f: Vec<T> = factors.iter().map(|&v| lit(v)).collect();
        let mut y = self.value(x).clone();
        let per = y.numel() / n;
        for (chunk, &s) in y.data_mut().chunks_mut(per).zip(&f) {
            for e in chunk {
                *e *= s;
            }
        }
        Ok(self.push(y, Op::ScaleBatch(x, f), &[x]))
    }

    /// Repeats a `[1, ...]` tensor `n` times along the leading dimension.
    pub fn repeat_batch(&mut self, x: Var, n: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.first() != Some(&1) {
            return Err(shape_err("repeat_batch expects leading extent 1".into()));
        }
        let src = self.value(x).data().to_vec();
        let mut data = Vec::with_capacity(src.len() * n);
        for _ in 0..n {
            data.extend_from_slice(&src);
        }
        let mut shape = xs.clone();
        shape[0] = n;
        let y = Tensor::from_vec(&shape, data)?;
        Ok(self.push(y, Op::RepeatBatch(x), &[x]))
    }

    /// Reverse sweep from the given seed gradients.
    pub fn backward(&self, seeds: &[(Var, Tensor<T>)]) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            if g.shape() != self.shape(*v) {
                return Err(shape_err(format!(
                    "seed gradient {:?} for node of shape {:?}",
                    g.shape(),
                    self.shape(*v)
                )));
            }
            accumulate(&mut grads, &self.nodes, *v, g.clone());
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Convenience for a scalar loss node.
    pub fn backward_scalar(&self, loss: Var) -> Result<Gradients<T>> {
        self.backward(&[(loss, Tensor::full(self.shape(loss), T::one()))])
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].needs_grad;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, nodes, *a, g.clone());
                accumulate(grads, nodes, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, nodes, *a, g.clone());
                if wants(*b) {
                    accumulate(grads, nodes, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    accumulate(grads, nodes, *a, g.zip_map(val(*b), |x, y| x * y));
                }
                if wants(*b) {
                    accumulate(grads, nodes, *b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => accumulate(grads, nodes, *a, g.scale(*s)),
            Op::AddScalar(a) => accumulate(grads, nodes, *a, g.clone()),
            Op::MulConst(a, c) => accumulate(grads, nodes, *a, g.zip_map(c, |x, y| x * y)),
            Op::Abs(a) => {
                let d = g.zip_map(val(*a), |x, y| {
                    if y > T::zero() {
                        x
                    } else if y < T::zero() {
                        -x
                    } else {
                        T::zero()
                    }
                });
                accumulate(grads, nodes, *a, d);
            }
            Op::Square(a) => {
                let two = lit::<T>(2.0);
                accumulate(grads, nodes, *a, g.zip_map(val(*a), |x, y| two * x * y));
            }
            Op::Silu(a) => {
                let d = g.zip_map(val(*a), |x, y| {
                    let s = T::one() / (T::one() + (-y).exp());
                    x * s * (T::one() + y * (T::one() - s))
                });
                accumulate(grads, nodes, *a, d);
            }
            Op::Tanh(a) => {
                accumulate(
                    grads,
                    nodes,
                    *a,
                    g.zip_map(out, |x, y| x * (T::one() - y * y)),
                );
            }
            Op::LeakyRelu(a, s) => {
                let s = *s;
                let d = g.zip_map(val(*a), |x, y| if y > T::zero() { x } else { x * s });
                accumulate(grads, nodes, *a, d);
            }
            Op::LogSigmoid(a) => {
                // d/dx log(sigmoid(x)) = sigmoid(-x)
                let d = g.zip_map(val(*a), |x, y| x / (T::one() + y.exp()));
                accumulate(grads, nodes, *a, d);
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                accumulate(grads, nodes, *a, Tensor::full(val(*a).shape(), s));
            }
            Op::Mean(a) => {
                let n = val(*a).numel().max(1);
                let s = g.data()[0] / T::from_usize(n).unwrap();
                accumulate(grads, nodes, *a, Tensor::full(val(*a).shape(), s));
            }
            Op::AddChannelBias(x, b) => {
                accumulate(grads, nodes, *x, g.clone());
                if wants(*b) {
                    let bs = val(*b).shape().to_vec();
                    let len = g.numel() / (bs[0] * bs[1]);
                    let data = g
                        .data()
                        .chunks(len)
                        .map(|c| c.iter().copied().sum())
                        .collect();
                    accumulate(grads, nodes, *b, Tensor::from_vec(&bs, data).unwrap());
                }
            }
            Op::Conv {
                x,
                w,
                b,
                geom,
                shape,
            } => {
                let mut dw = wants(*w).then(|| Tensor::zeros(val(*w).shape()));
                let mut db = b
                    .filter(|b| wants(*b))
                    .map(|b| Tensor::zeros(val(b).shape()));
                let mut dx = wants(*x).then(|| Tensor::zeros(val(*x).shape()));
                kernels::conv_backward(
                    val(*x).data(),
                    val(*w).data(),
                    g.data(),
                    shape,
                    geom,
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                    dx.as_mut().map(|t| t.data_mut()),
                );
                if let Some(dx) = dx {
                    accumulate(grads, nodes, *x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, nodes, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    accumulate(grads, nodes, *b, db);
                }
            }
            Op::Upsample2x(x) => {
                let xs = val(*x).shape();
                let mut dx = Tensor::zeros(xs);
                kernels::upsample2x_backward(
                    g.data(),
                    xs[0] * xs[1],
                    [xs[2], xs[3], xs[4]],
                    dx.data_mut(),
                );
                accumulate(grads, nodes, *x, dx);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let xs = val(*x).shape();
                let len: usize = xs[2..].iter().product();
                let mut dgamma = Tensor::zeros(val(*gamma).shape());
                let mut dbeta = Tensor::zeros(val(*beta).shape());
                let mut dx = Tensor::zeros(xs);
                kernels::group_norm_backward(
                    val(*x).data(),
                    val(*gamma).data(),
                    g.data(),
                    stats,
                    xs[0],
                    xs[1],
                    len,
                    *groups,
                    dgamma.data_mut(),
                    dbeta.data_mut(),
                    dx.data_mut(),
                );
                accumulate(grads, nodes, *x, dx);
                accumulate(grads, nodes, *gamma, dgamma);
                accumulate(grads, nodes, *beta, dbeta);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let xs = val(*x).shape();
                let mut dgamma = Tensor::zeros(val(*gamma).shape());
                let mut dbeta = Tensor::zeros(val(*beta).shape());
                let mut dx = Tensor::zeros(xs);
                kernels::layer_norm_backward(
                    val(*x).data(),
                    val(*gamma).data(),
                    g.data(),
                    stats,
                    *xs.last().unwrap(),
                    dgamma.data_mut(),
                    dbeta.data_mut(),
                    dx.data_mut(),
                );
                accumulate(grads, nodes, *x, dx);
                accumulate(grads, nodes, *gamma, dgamma);
                accumulate(grads, nodes, *beta, dbeta);
            }
            Op::Linear { x, w, b } => {
                let xs = val(*x).shape();
                let ws = val(*w).shape();
                let (out_w, k) = (ws[0], ws[1]);
                let rows = val(*x).numel() / k;
                if wants(*x) {
                    let mut dx = Tensor::zeros(xs);
                    crate::real::matmul_into(
                        g.data(),
                        false,
                        val(*w).data(),
                        false,
                        rows,
                        out_w,
                        k,
                        dx.data_mut(),
                        false,
                    );
                    accumulate(grads, nodes, *x, dx);
                }
                if wants(*w) {
                    let mut dw = Tensor::zeros(ws);
                    crate::real::matmul_into(
                        g.data(),
                        true,
                        val(*x).data(),
                        false,
                        out_w,
                        rows,
                        k,
                        dw.data_mut(),
                        false,
                    );
                    accumulate(grads, nodes, *w, dw);
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); out_w];
                    for row in g.data().chunks(out_w) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(grads, nodes, *b, Tensor::from_vec(&[out_w], db).unwrap());
                }
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            } => {
                let mut dq = Tensor::zeros(val(*q).shape());
                let mut dk = Tensor::zeros(val(*k).shape());
                let mut dv = Tensor::zeros(val(*v).shape());
                kernels::attention_backward(
                    val(*q).data(),
                    val(*k).data(),
                    val(*v).data(),
                    probs,
                    g.data(),
                    shape,
                    dq.data_mut(),
                    dk.data_mut(),
                    dv.data_mut(),
                );
                accumulate(grads, nodes, *q, dq);
                accumulate(grads, nodes, *k, dk);
                accumulate(grads, nodes, *v, dv);
            }
            Op::ChannelsLast(x) => {
                let xs = val(*x).shape();
                let (n, c) = (xs[0], xs[1]);
                let l = val(*x).numel() / (n * c);
                let d = permute_ncl(g.data(), n, l, c);
                accumulate(grads, nodes, *x, Tensor::from_vec(xs, d).unwrap());
            }
            Op::ChannelsFirst(x) => {
                let xs = val(*x).shape();
                let d = permute_ncl(g.data(), xs[0], xs[2], xs[1]);
                accumulate(grads, nodes, *x, Tensor::from_vec(xs, d).unwrap());
            }
            Op::TransposeLast2(x) => {
                let xs = val(*x).shape();
                let d = permute_ncl(g.data(), xs[0], xs[2], xs[1]);
                accumulate(grads, nodes, *x, Tensor::from_vec(xs, d).unwrap());
            }
            Op::ConcatChannels(a, b) => {
                let as_ = val(*a).shape();
                let bs = val(*b).shape();
                let n = as_[0];
                let la: usize = as_[1..].iter().product();
                let lb: usize = bs[1..].iter().product();
                let mut da = Vec::with_capacity(n * la);
                let mut db = Vec::with_capacity(n * lb);
                for chunk in g.data().chunks(la + lb) {
                    da.extend_from_slice(&chunk[..la]);
                    db.extend_from_slice(&chunk[la..]);
                }
                accumulate(grads, nodes, *a, Tensor::from_vec(as_, da).unwrap());
                accumulate(grads, nodes, *b, Tensor::from_vec(bs, db).unwrap());
            }
            Op::Reshape(x) | Op::StraightThrough(x) => {
                let d = g.clone().reshape(val(*x).shape()).unwrap();
                accumulate(grads, nodes, *x, d);
            }
            Op::GatherRows { book, indices } => {
                let bs = val(*book).shape();
                let (k, d) = (bs[0], bs[1]);
                let batch = g.dim(0);
                let l = g.numel() / (batch * d);
                let mut db = vec![T::zero(); k * d];
                for n in 0..batch {
                    for site in 0..l {
                        let row = indices[n * l + site];
                        for c in 0..d {
                            db[row * d + c] += g.data()[(n * d + c) * l + site];
                        }
                    }
                }
                accumulate(grads, nodes, *book, Tensor::from_vec(bs, db).unwrap());
            }
            Op::SelectBatch { a, b, take_a } => {
                let per = val(*b).numel();
                let mut da = g.clone();
                let mut db = vec![T::zero(); per];
                for (i, &keep) in take_a.iter().enumerate() {
                    if !keep {
                        let chunk = &mut da.data_mut()[i * per..(i + 1) * per];
                        for (acc, e) in db.iter_mut().zip(chunk.iter_mut()) {
                            *acc += *e;
                            *e = T::zero();
                        }
                    }
                }
                accumulate(grads, nodes, *a, da);
                if wants(*b) {
                    accumulate(
                        grads,
                        nodes,
                        *b,
                        Tensor::from_vec(val(*b).shape(), db).unwrap(),
                    );
                }
            }
            Op::ScaleBatch(x, f) => {
                let mut d = g.clone();
                let per = d.numel() / f.len();
                for (chunk, &s) in d.data_mut().chunks_mut(per).zip(f) {
                    for e in chunk {
                        *e *= s;
                    }
                }
                accumulate(grads, nodes, *x, d);
            }
            Op::RepeatBatch(x) => {
                let per = val(*x).numel();
                let mut d = vec![T::zero(); per];
                for chunk in g.data().chunks(per) {
                    for (acc, &e) in d.iter_mut().zip(chunk) {
                        *acc += e;
                    }
                }
                accumulate(
                    grads,
                    nodes,
                    *x,
                    Tensor::from_vec(val(*x).shape(), d).unwrap(),
                );
            }
        }
    }

    /// Parameter handles present in this graph.
    pub fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&p, &v)| (p, v))
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], nodes: &[Node<T>], v: Var, g: Tensor<T>) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// `[n, a, b]` to `[n, b, a]`.
fn permute_ncl<T: Real>(x: &[T], n: usize, a: usize, b: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for i in 0..n {
        let src = &x[i * a * b..(i + 1) * a * b];
        let dst = &mut y[i * a * b..(i + 1) * a * b];
        for r in 0..a {
            for c in 0..b {
                dst[c * a + r] = src[r * b + c];
            }
        }
    }
    y
}

/// Gradients produced by one reverse sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every parameter used in `graph`, zero-filled for
    /// parameters that received none.
    pub fn param_grads(&self, graph: &Graph<T>) -> ParamGrads<T> {
        let mut out = ParamGrads::default();
        for (pid, var) in graph.param_vars() {
            let g = self
                .get(var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(graph.shape(var)));
            out.insert(pid, g);
        }
        out
    }
}

/// Gradient table keyed by parameter.
#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    map: HashMap<ParamId, Tensor<T>>,
}

impl<T> Default for ParamGrads<T> {
    fn default() -> Self {
        Self {
            map: HashMap::new(),
        }
    }
}

impl<T: Real> ParamGrads<T> {
    pub fn insert(&mut self, id: ParamId, g: Tensor<T>) {
        match self.map.get_mut(&id) {
            Some(existing) => existing.add_assign(&g),
            None => {
                self.map.insert(id, g);
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.map.get(&id)
    }

    pub fn merge(&mut self, other: ParamGrads<T>) {
        for (id, g) in other.map {
            self.insert(id, g);
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.map.values_mut() {
            for e in g.data_mut() {
                *e *= s;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.map.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        let mut ids: Vec<_> = self.map.keys().copied().collect();
        ids.sort();
        ids.iter()
            .map(|id| {
                let n = self.map[id].norm();
                n * n
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(Tensor::is_finite)
    }
}
