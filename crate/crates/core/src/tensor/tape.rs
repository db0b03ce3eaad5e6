use super::kernels::{self, ConvGeom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
        shared_b: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBroadcast(Var, Var),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
        training: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        out_channels: usize,
    },
    AvgPool(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        a: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    RepeatLeading(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<T>,
        weights: Vec<T>,
        log_probs: Vec<T>,
    },
    L2NormalizeRows {
        a: Var,
        norms: Vec<T>,
    },
}

/// Batch statistics returned by a training-mode batch norm, for updating
/// running buffers. Variance is unbiased.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Normalization source for [`Tape::batch_norm2d`].
pub enum BnMode<'a, T> {
    Train,
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Dynamic gradient tape. Rebuilt for every forward pass.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    values: Vec<Tensor<T>>,
    grads: Vec<Option<Vec<T>>>,
    requires: Vec<bool>,
    ops: Vec<Op<T>>,
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            grads: Vec::new(),
            requires: Vec::new(),
            ops: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, requires: bool, op: Op<T>) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires);
        self.ops.push(if requires { op } else { Op::Leaf });
        Var(self.values.len() - 1)
    }

    /// Trainable leaf; receives a gradient on backward.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, true, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.values[v.0].shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of operation records still holding saved state.
    pub fn recorded_ops(&self) -> usize {
        self.ops.iter().filter(|op| !matches!(op, Op::Leaf)).count()
    }

    fn req(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires[v.0])
    }

    // ----- linear algebra -----

    /// Matrix product over the last two axes.
    ///
    /// `b` is either rank 2 (shared across every leading index of `a`) or has
    /// exactly the leading dims of `a`. With `trans_b`, the last two axes of
    /// `b` are read transposed.
    pub fn matmul_ext(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(format!("matmul needs rank ≥ 2, got {sa:?} and {sb:?}")));
        }
        let k = sa[sa.len() - 1];
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(Error::shape(format!("matmul inner dims differ: {sa:?} · {sb:?}")));
        }
        let shared_b = sb.len() == 2;
        let (batch, m) = if shared_b {
            (1, sa[..sa.len() - 1].iter().product())
        } else {
            if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(Error::shape(format!("matmul batch dims differ: {sa:?} · {sb:?}")));
            }
            (sa[..sa.len() - 2].iter().product(), sa[sa.len() - 2])
        };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let ad = self.values[a.0].data();
            let bd = self.values[b.0].data();
            for bi in 0..batch {
                let aslice = &ad[bi * m * k..(bi + 1) * m * k];
                let bslice = if shared_b { bd } else { &bd[bi * k * n..(bi + 1) * k * n] };
                let cslice = &mut out[bi * m * n..(bi + 1) * m * n];
                if trans_b {
                    kernels::matmul_nt(aslice, bslice, cslice, m, k, n);
                } else {
                    kernels::matmul_nn(aslice, bslice, cslice, m, k, n);
                }
            }
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let value = Tensor::new(shape, out)?;
        let requires = self.req(&[a, b]);
        Ok(self.push(
            value,
            requires,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
                shared_b,
            },
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false)
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, true)
    }

    // ----- elementwise -----

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let r = self.req(&[a, b]);
        Ok(self.push(value, r, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let r = self.req(&[a, b]);
        Ok(self.push(value, r, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.values[a.0].map(|x| x * s);
        let r = self.req(&[a]);
        self.push(value, r, Op::Scale(a, s))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s (bias,
    /// positional embedding).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(format!("cannot broadcast {sb:?} onto {sa:?}")));
        }
        let bd = self.values[b.0].data();
        let w = bd.len();
        let data = self.values[a.0]
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % w])
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let r = self.req(&[a, b]);
        Ok(self.push(value, r, Op::AddBroadcast(a, b)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.values[a.0].map(|x| if x > T::zero() { x } else { T::zero() });
        let r = self.req(&[a]);
        self.push(value, r, Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.values[a.0].map(gelu);
        let r = self.req(&[a]);
        self.push(value, r, Op::Gelu(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let src = &self.values[a.0];
        if src.has_nan() {
            return Err(Error::Numeric("NaN in softmax input".into()));
        }
        let c = *src.shape().last().ok_or_else(|| Error::shape("softmax of a scalar"))?;
        let mut data = src.data().to_vec();
        for row in data.chunks_mut(c) {
            kernels::softmax_inplace(row);
        }
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let r = self.req(&[a]);
        Ok(self.push(value, r, Op::Softmax(a)))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let src = &self.values[a.0];
        if src.has_nan() {
            return Err(Error::Numeric("NaN in log_softmax input".into()));
        }
        let c = *src.shape().last().ok_or_else(|| Error::shape("log_softmax of a scalar"))?;
        let mut data = src.data().to_vec();
        for row in data.chunks_mut(c) {
            kernels::log_softmax_inplace(row);
        }
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let r = self.req(&[a]);
        Ok(self.push(value, r, Op::LogSoftmax(a)))
    }

    // ----- normalization -----

    /// Layer norm over the last axis with affine `gamma`, `beta`.
    /// A constant row normalizes to exactly zero before the affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let d = *self.shape(x).last().ok_or_else(|| Error::shape("layer_norm of a scalar"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(format!(
                "layer_norm affine must be [{d}], got {:?}/{:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let xd = self.values[x.0].data();
        let g = self.values[gamma.0].data();
        let bt = self.values[beta.0].data();
        let rows = xd.len() / d;
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xd.len()];
        let dn = T::of(d as f64);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bt[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let r = self.req(&[x, gamma, beta]);
        Ok(self.push(
            value,
            r,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Batch norm over NCHW input, per channel.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let s = self.shape(x).to_vec();
        let [n, c, h, w] = s[..] else {
            return Err(Error::shape(format!("batch_norm2d needs NCHW, got {s:?}")));
        };
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm2d affine must be [C]"));
        }
        let hw = h * w;
        let count = n * hw;
        let xd = self.values[x.0].data();
        let (mean, var, training) = match mode {
            BnMode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for img in 0..n {
                        s += xd[(img * c + ch) * hw..(img * c + ch + 1) * hw].iter().copied().sum::<T>();
                    }
                    let mu = s / T::of(count as f64);
                    let mut v = T::zero();
                    for img in 0..n {
                        for &val in &xd[(img * c + ch) * hw..(img * c + ch + 1) * hw] {
                            v += (val - mu) * (val - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = v / T::of(count as f64);
                }
                (mean, var, true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm2d running stats must be [C]"));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let g = self.values[gamma.0].data();
        let bt = self.values[beta.0].data();
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * hw;
                for i in base..base + hw {
                    let hval = (xd[i] - mean[ch]) * rstd[ch];
                    xhat[i] = hval;
                    out[i] = hval * g[ch] + bt[ch];
                }
            }
        }
        let stats = training.then(|| {
            let unbias = if count > 1 {
                T::of(count as f64 / (count as f64 - 1.0))
            } else {
                T::one()
            };
            BatchStats {
                mean: mean.clone(),
                var: var.iter().map(|&v| v * unbias).collect(),
            }
        });
        let value = Tensor::new(s, out)?;
        let r = self.req(&[x, gamma, beta]);
        let v = self.push(
            value,
            r,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                training,
            },
        );
        Ok((v, stats))
    }

    /// Normalizes every row (last axis) to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let d = *self.shape(a).last().ok_or_else(|| Error::shape("normalize of a scalar"))?;
        let src = self.values[a.0].data();
        let mut norms = Vec::with_capacity(src.len() / d);
        let mut out = src.to_vec();
        for row in out.chunks_mut(d) {
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::of(1e-12));
            norms.push(nrm);
            row.iter_mut().for_each(|v| *v = *v / nrm);
        }
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let r = self.req(&[a]);
        Ok(self.push(value, r, Op::L2NormalizeRows { a, norms }))
    }

    // ----- convolution / pooling -----

    /// NCHW input, OIHW kernel, no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (&[n, c, h, wd], &[o, ci, kh, kw]) = (&sx[..], &sw[..]) else {
            return Err(Error::shape(format!("conv2d needs NCHW/OIHW, got {sx:?}/{sw:?}")));
        };
        if c != ci {
            return Err(Error::shape(format!("conv2d channels {c} vs kernel {ci}")));
        }
        if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape("conv2d kernel larger than padded input"));
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kh,
            kw,
            stride,
            pad,
        };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let l = oh * ow;
        let ckk = geom.col_rows();
        let mut cols = vec![T::zero(); ckk * l];
        let mut out = vec![T::zero(); n * o * l];
        let xd = self.values[x.0].data();
        let wdat = self.values[w.0].data();
        for img in 0..n {
            kernels::im2col(&xd[img * c * h * wd..(img + 1) * c * h * wd], &geom, &mut cols);
            kernels::matmul_nn(wdat, &cols, &mut out[img * o * l..(img + 1) * o * l], o, ckk, l);
        }
        let value = Tensor::new([n, o, oh, ow], out)?;
        let r = self.req(&[x, w]);
        Ok(self.push(
            value,
            r,
            Op::Conv2d {
                x,
                w,
                geom,
                out_channels: o,
            },
        ))
    }

    /// Global average pool: [N,C,H,W] → [N,C].
    pub fn avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [n, c, h, w] = s[..] else {
            return Err(Error::shape(format!("avg_pool needs NCHW, got {s:?}")));
        };
        let hw = h * w;
        let xd = self.values[x.0].data();
        let inv = T::one() / T::of(hw as f64);
        let data = (0..n * c)
            .map(|i| xd[i * hw..(i + 1) * hw].iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new([n, c], data)?;
        let r = self.req(&[x]);
        Ok(self.push(value, r, Op::AvgPool(x)))
    }

    // ----- shape plumbing -----

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.values[a.0].clone().reshape(shape)?;
        let r = self.req(&[a]);
        Ok(self.push(value, r, Op::Reshape(a)))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!("bad permutation {perm:?} for rank {}", s.len())));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let data = permute_data(self.values[a.0].data(), &s, perm);
        let value = Tensor::new(out_shape, data)?;
        let r = self.req(&[a]);
        Ok(self.push(
            value,
            r,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::shape("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat axis out of range"));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::shape(format!("concat shapes {first:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = outer_inner(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.values[v.0].data()[o * len..(o + 1) * len]);
            }
        }
        let value = Tensor::new(shape, data)?;
        let r = self.req(inputs);
        Ok(self.push(
            value,
            r,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape(format!(
                "narrow({axis}, {start}, {len}) out of range for {s:?}"
            )));
        }
        let (outer, dim, inner) = outer_inner(&s, axis);
        let src = self.values[a.0].data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        let r = self.req(&[a]);
        Ok(self.push(value, r, Op::Narrow { a, axis, start }))
    }

    /// Stacks `n` copies of `a` along a new leading axis.
    pub fn repeat_leading(&mut self, a: Var, n: usize) -> Var {
        let src = &self.values[a.0];
        let mut shape = vec![n];
        shape.extend_from_slice(src.shape());
        let data = src.data().repeat(n);
        let value = Tensor::new(shape, data).expect("repeat shape");
        let r = self.req(&[a]);
        self.push(value, r, Op::RepeatLeading(a))
    }

    // ----- reductions and losses -----

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.values[a.0].sum());
        let r = self.req(&[a]);
        self.push(value, r, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.values[a.0];
        let value = Tensor::scalar(t.sum() / T::of(t.numel().max(1) as f64));
        let r = self.req(&[a]);
        self.push(value, r, Op::Mean(a))
    }

    /// `(1/B) Σ_i w_i Σ_c −t_ic · log softmax(z_i)_c` over `[B, C]` logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &Tensor<T>, weights: &[T]) -> Result<Var> {
        let (b, c) = self.values[logits.0].dims2()?;
        if targets.shape() != [b, c] || weights.len() != b {
            return Err(Error::shape(format!(
                "cross_entropy: logits [{b},{c}], targets {:?}, {} weights",
                targets.shape(),
                weights.len()
            )));
        }
        let src = &self.values[logits.0];
        if src.has_nan() {
            return Err(Error::Numeric("NaN logits in cross entropy".into()));
        }
        let mut log_probs = src.data().to_vec();
        for row in log_probs.chunks_mut(c) {
            kernels::log_softmax_inplace(row);
        }
        let td = targets.data();
        let mut total = T::zero();
        for i in 0..b {
            let mut row = T::zero();
            for j in 0..c {
                let t = td[i * c + j];
                if t != T::zero() {
                    row -= t * log_probs[i * c + j];
                }
            }
            total += weights[i] * row;
        }
        let value = Tensor::scalar(total / T::of(b.max(1) as f64));
        let r = self.req(&[logits]);
        Ok(self.push(
            value,
            r,
            Op::CrossEntropy {
                logits,
                targets: td.to_vec(),
                weights: weights.to_vec(),
                log_probs,
            },
        ))
    }

    // ----- backward -----

    /// Reverse-mode sweep from a scalar `loss`. Gradients accumulate into
    /// every reachable node that requires them; saved op state is released.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires[loss.0] {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
            self.backward_op(i, &op, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [T], &[Tensor<T>])) {
        if !self.requires[v.0] {
            return;
        }
        let n = self.values[v.0].numel();
        let mut g = self.grads[v.0].take().unwrap_or_else(|| vec![T::zero(); n]);
        f(&mut g, &self.values);
        self.grads[v.0] = Some(g);
    }

    fn backward_op(&mut self, out: usize, op: &Op<T>, g: &[T]) {
        match op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
                shared_b,
            } => {
                self.acc(a, |ga, vals| {
                    let bd = vals[b.0].data();
                    for bi in 0..batch {
                        let bs = if shared_b { bd } else { &bd[bi * k * n..(bi + 1) * k * n] };
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let gas = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if trans_b {
                            kernels::matmul_nn(gs, bs, gas, m, n, k);
                        } else {
                            kernels::matmul_nt(gs, bs, gas, m, n, k);
                        }
                    }
                });
                self.acc(b, |gb, vals| {
                    let ad = vals[a.0].data();
                    for bi in 0..batch {
                        let as_ = &ad[bi * m * k..(bi + 1) * m * k];
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let gbs = if shared_b { &mut gb[..] } else { &mut gb[bi * k * n..(bi + 1) * k * n] };
                        if trans_b {
                            kernels::matmul_tn(gs, as_, gbs, m, n, k);
                        } else {
                            kernels::matmul_tn(as_, gs, gbs, m, k, n);
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    self.acc(v, |ga, _| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                }
            }
            &Op::Mul(a, b) => {
                self.acc(a, |ga, vals| {
                    for ((x, &y), &bv) in ga.iter_mut().zip(g).zip(vals[b.0].data()) {
                        *x += y * bv;
                    }
                });
                self.acc(b, |gb, vals| {
                    for ((x, &y), &av) in gb.iter_mut().zip(g).zip(vals[a.0].data()) {
                        *x += y * av;
                    }
                });
            }
            &Op::Scale(a, s) => {
                self.acc(a, |ga, _| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * s));
            }
            &Op::AddBroadcast(a, b) => {
                self.acc(a, |ga, _| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                self.acc(b, |gb, _| {
                    let w = gb.len();
                    for (i, &y) in g.iter().enumerate() {
                        gb[i % w] += y;
                    }
                });
            }
            &Op::Relu(a) => {
                self.acc(a, |ga, vals| {
                    for ((x, &y), &av) in ga.iter_mut().zip(g).zip(vals[a.0].data()) {
                        if av > T::zero() {
                            *x += y;
                        }
                    }
                });
            }
            &Op::Gelu(a) => {
                self.acc(a, |ga, vals| {
                    for ((x, &y), &av) in ga.iter_mut().zip(g).zip(vals[a.0].data()) {
                        *x += y * gelu_grad(av);
                    }
                });
            }
            &Op::Softmax(a) => {
                self.acc(a, |ga, vals| {
                    let p = vals[out].data();
                    let c = *vals[out].shape().last().unwrap();
                    for ((gr, pr), gar) in g.chunks(c).zip(p.chunks(c)).zip(ga.chunks_mut(c)) {
                        let dot: T = gr.iter().zip(pr).map(|(&x, &y)| x * y).sum();
                        for j in 0..c {
                            gar[j] += pr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            &Op::LogSoftmax(a) => {
                self.acc(a, |ga, vals| {
                    let lp = vals[out].data();
                    let c = *vals[out].shape().last().unwrap();
                    for ((gr, lr), gar) in g.chunks(c).zip(lp.chunks(c)).zip(ga.chunks_mut(c)) {
                        let total: T = gr.iter().copied().sum();
                        for j in 0..c {
                            gar[j] += gr[j] - lr[j].exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = rstd.len().max(1);
                let d = xhat.len() / d;
                self.acc(*beta, |gb, _| {
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                    }
                });
                self.acc(*gamma, |gg, _| {
                    for (row, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += row[j] * hrow[j];
                        }
                    }
                });
                self.acc(*x, |gx, vals| {
                    let gm = vals[gamma.0].data();
                    let dn = T::of(d as f64);
                    for (r, ((grow, hrow), gxrow)) in
                        g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate()
                    {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dh = grow[j] * gm[j];
                            s1 += dh;
                            s2 += dh * hrow[j];
                        }
                        for j in 0..d {
                            let dh = grow[j] * gm[j];
                            gxrow[j] += rstd[r] / dn * (dn * dh - s1 - hrow[j] * s2);
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                training,
            } => {
                let s = self.values[x.0].shape().to_vec();
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gh = vec![T::zero(); c];
                for img in 0..n {
                    for ch in 0..c {
                        let base = (img * c + ch) * hw;
                        for i in base..base + hw {
                            sum_g[ch] += g[i];
                            sum_gh[ch] += g[i] * xhat[i];
                        }
                    }
                }
                self.acc(*beta, |gb, _| gb.iter_mut().zip(&sum_g).for_each(|(x, &y)| *x += y));
                self.acc(*gamma, |gg, _| gg.iter_mut().zip(&sum_gh).for_each(|(x, &y)| *x += y));
                let training = *training;
                self.acc(*x, |gx, vals| {
                    let gm = vals[gamma.0].data();
                    let m = T::of((n * hw) as f64);
                    for img in 0..n {
                        for ch in 0..c {
                            let base = (img * c + ch) * hw;
                            let k = gm[ch] * rstd[ch];
                            for i in base..base + hw {
                                gx[i] += if training {
                                    k / m * (m * g[i] - sum_g[ch] - xhat[i] * sum_gh[ch])
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                });
            }
            Op::L2NormalizeRows { a, norms } => {
                self.acc(*a, |ga, vals| {
                    let y = vals[out].data();
                    let d = y.len() / norms.len().max(1);
                    for (r, ((grow, yrow), garow)) in
                        g.chunks(d).zip(y.chunks(d)).zip(ga.chunks_mut(d)).enumerate()
                    {
                        let dot: T = grow.iter().zip(yrow).map(|(&p, &q)| p * q).sum();
                        for j in 0..d {
                            garow[j] += (grow[j] - yrow[j] * dot) / norms[r];
                        }
                    }
                });
            }
            &Op::Conv2d {
                x,
                w,
                geom,
                out_channels: o,
            } => {
                let n = self.values[x.0].shape()[0];
                let l = geom.col_cols();
                let ckk = geom.col_rows();
                let img_len = geom.channels * geom.height * geom.width;
                let mut cols = vec![T::zero(); ckk * l];
                if self.requires[w.0] {
                    let mut gw = self.grads[w.0].take().unwrap_or_else(|| vec![T::zero(); o * ckk]);
                    let xd = self.values[x.0].data();
                    for img in 0..n {
                        kernels::im2col(&xd[img * img_len..(img + 1) * img_len], &geom, &mut cols);
                        kernels::matmul_nt(&g[img * o * l..(img + 1) * o * l], &cols, &mut gw, o, l, ckk);
                    }
                    self.grads[w.0] = Some(gw);
                }
                self.acc(x, |gx, vals| {
                    let wd = vals[w.0].data();
                    for img in 0..n {
                        cols.iter_mut().for_each(|v| *v = T::zero());
                        kernels::matmul_tn(wd, &g[img * o * l..(img + 1) * o * l], &mut cols, o, ckk, l);
                        kernels::col2im(&cols, &geom, &mut gx[img * img_len..(img + 1) * img_len]);
                    }
                });
            }
            &Op::AvgPool(x) => {
                self.acc(x, |gx, vals| {
                    let s = vals[x.0].shape();
                    let hw = s[2] * s[3];
                    let inv = T::one() / T::of(hw as f64);
                    for (i, &y) in g.iter().enumerate() {
                        gx[i * hw..(i + 1) * hw].iter_mut().for_each(|v| *v += y * inv);
                    }
                });
            }
            &Op::Reshape(a) => {
                self.acc(a, |ga, _| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
            }
            Op::Permute { a, perm } => {
                let out_shape = self.values[out].shape().to_vec();
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_data(g, &out_shape, &inv);
                self.acc(*a, |ga, _| ga.iter_mut().zip(&back).for_each(|(x, &y)| *x += y));
            }
            Op::Concat { inputs, axis } => {
                let shape = self.values[out].shape().to_vec();
                let (outer, total, inner) = outer_inner(&shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.values[v.0].shape()[*axis];
                    self.acc(v, |gv, _| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            gv[o * len * inner..(o + 1) * len * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, &y)| *x += y);
                        }
                    });
                    offset += len;
                }
            }
            &Op::Narrow { a, axis, start } => {
                let len = self.values[out].shape()[axis];
                self.acc(a, |ga, vals| {
                    let (outer, dim, inner) = outer_inner(vals[a.0].shape(), axis);
                    for o in 0..outer {
                        let dst = &mut ga[(o * dim + start) * inner..(o * dim + start + len) * inner];
                        dst.iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                            .for_each(|(x, &y)| *x += y);
                    }
                });
            }
            &Op::RepeatLeading(a) => {
                self.acc(a, |ga, _| {
                    let w = ga.len();
                    for chunk in g.chunks(w) {
                        ga.iter_mut().zip(chunk).for_each(|(x, &y)| *x += y);
                    }
                });
            }
            &Op::Sum(a) => {
                self.acc(a, |ga, _| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            &Op::Mean(a) => {
                self.acc(a, |ga, _| {
                    let s = g[0] / T::of(ga.len().max(1) as f64);
                    ga.iter_mut().for_each(|x| *x += s);
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                log_probs,
            } => {
                let b = weights.len();
                let c = targets.len() / b.max(1);
                let scale = g[0] / T::of(b.max(1) as f64);
                self.acc(*logits, |gl, _| {
                    for i in 0..b {
                        let trow = &targets[i * c..(i + 1) * c];
                        let tsum: T = trow.iter().copied().sum();
                        let k = scale * weights[i];
                        for j in 0..c {
                            gl[i * c + j] += k * (log_probs[i * c + j].exp() * tsum - trow[j]);
                        }
                    }
                });
            }
        }
    }
}

fn permute_data<T: Scalar>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    if rank == 0 {
        out.extend_from_slice(src);
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let last = rank - 1;
    let inner = out_shape[last];
    let inner_stride = out_strides[last];
    while out.len() < n {
        for i in 0..inner {
            out.push(src[offset + i * inner_stride]);
        }
        // advance the outer counters
        let mut d = last;
        loop {
            if d == 0 {
                break;
            }
            d -= 1;
            idx[d] += 1;
            offset += out_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= out_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(SQRT_2_OVER_PI);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(SQRT_2_OVER_PI);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::of(3.0) * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_and_projector_matmul() {
        let mut tape = Tape::<f64>::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let p = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let q = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let out = tape.matmul(p, q).unwrap();
        assert_eq!(tape.value(out).data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let s = tape.softmax(a).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let a = tape.constant(t(&[1, 2], &[1000.0, 0.0]));
        let s = tape.softmax(a).unwrap();
        let d = tape.value(s).data();
        assert!((d[0] - 1.0).abs() < 1e-9 && d[1].abs() < 1e-9);
        let a = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let s = tape.softmax(a).unwrap();
        // exp-normalize evaluated independently
        let want = [0.090_030_573_170_380_46, 0.244_728_471_054_797_64, 0.665_240_955_774_821_9];
        for (v, w) in tape.value(s).data().iter().zip(want) {
            assert!((v - w).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_and_identity_conv() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(a);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

        let img: Vec<f64> = (0..9).map(f64::from).collect();
        let x = tape.constant(t(&[1, 1, 3, 3], &img));
        let k = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
        assert_eq!(tape.value(y).data(), &img[..]);
    }

    #[test]
    fn layernorm_of_constant_row_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 4], &[3.0; 4]));
        let g = tape.constant(Tensor::full([4], 1.0));
        let b = tape.constant(Tensor::zeros([4]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        // d/dx (x·y + x·z) = y + z
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.constant(t(&[3], &[0.5, -1.0, 2.0]));
        let z = tape.constant(t(&[3], &[4.0, 0.25, -3.0]));
        let xy = tape.mul(x, y).unwrap();
        let xz = tape.mul(x, z).unwrap();
        let s = tape.add(xy, xz).unwrap();
        let loss = tape.sum(s);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.5, -0.75, -1.0]);
        assert!(tape.grad(y).is_none());
        assert_eq!(tape.recorded_ops(), 0);
    }

    #[test]
    fn permute_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let a = tape.constant(t(&[2, 3, 4], &data));
        let p = tape.permute(a, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        // out[k,i,j] = a[i,j,k]
        assert_eq!(tape.value(p).data()[1 * 6 + 1 * 3 + 2], data[1 * 12 + 2 * 4 + 1]);
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(back).data(), &data[..]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros([2]));
        assert!(tape.backward(x).is_err());
    }
}
