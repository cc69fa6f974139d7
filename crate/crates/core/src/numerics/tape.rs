use super::kernels::{matmul_at_into, matmul_bt_into, matmul_into, softmax_in_place};
use super::tensor::as_matrix;
use super::{sigmoid, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Stride and zero padding of a square-kernel convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    ChannelBias(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Abs(Var),
    Square(Var),
    SoftmaxRows(Var),
    Sum(Var),
    ConcatCols(Vec<Var>),
    SliceCols { src: Var, start: usize },
    Reshape(Var),
    RepeatRows { src: Var, times: usize },
    WeightedRows { weights: Var, rows: Var },
    Embed { table: Var, idx: Vec<usize> },
    GatherSteps { sources: Vec<Var>, picks: Vec<usize> },
    MaskRows { src: Var, mask: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T> },
    Conv2d { input: Var, kernel: Var, spec: ConvSpec },
    GlobalAvgPool(Var),
    Pick { src: Var, index: usize },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations in execution order; [`Tape::backward`] replays them in
/// reverse, visiting each node once.
#[derive(Debug, Default)]
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every node of a consumed tape.
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
    lens: Vec<usize>,
}

impl<T: Real> Grads<T> {
    /// `None` when the node was unreachable from the loss or not differentiable.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient with unreachable nodes reported as zeros.
    pub fn wrt(&self, v: Var) -> Vec<T> {
        self.get(v)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); self.lens[v.0]])
    }
}

fn conv_out(size: usize, k: usize, spec: ConvSpec) -> Option<usize> {
    (size + 2 * spec.pad).checked_sub(k).map(|v| v / spec.stride + 1)
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    spec: ConvSpec,
}

impl ConvGeom {
    fn im2col<T: Real>(&self, img: &[T], cols: &mut [T]) {
        let p = self.ho * self.wo;
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let out = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.spec.stride + ky) as isize - self.spec.pad as isize;
                        for ox in 0..self.wo {
                            let ix = (ox * self.spec.stride + kx) as isize - self.spec.pad as isize;
                            out[oy * self.wo + ox] = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.h
                                && (ix as usize) < self.w
                            {
                                img[(ci * self.h + iy as usize) * self.w + ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], img: &mut [T]) {
        let p = self.ho * self.wo;
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.spec.stride + ky) as isize - self.spec.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.spec.stride + kx) as isize - self.spec.pad as isize;
                            if ix < 0 || ix as usize >= self.w {
                                continue;
                            }
                            let at = (ci * self.h + iy as usize) * self.w + ix as usize;
                            img[at] = img[at] + src[oy * self.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let rows = if cols == 0 { 0 } else { shape.iter().product::<usize>() / cols };
    (rows, cols)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Records a tensor as a leaf; it participates in backward iff it requires grad.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn variable(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?.with_grad();
        Ok(self.leaf(&t))
    }

    /// Copy of `v` cut off from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let err = || Error::shape("matmul", sa, sb);
        let (m, k) = as_matrix(sa).ok_or_else(err)?;
        let (k2, n) = as_matrix(sb).ok_or_else(err)?;
        if k != k2 || sb.len() != 2 {
            return Err(err());
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-n bias to every row of `[.., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = rows_cols(self.shape(x));
        if self.shape(bias) != [n] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bv)| v + bv))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(shape, out, Op::AddBias(x, bias), rg))
    }

    /// Adds a per-channel bias to an NCHW map.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 4 || self.shape(bias) != [sx[1]] {
            return Err(Error::shape("channel_bias", sx, self.shape(bias)));
        }
        let (c, plane) = (sx[1], sx[2] * sx[3]);
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bv = b[i % c];
            chunk.iter_mut().for_each(|v| *v = *v + bv);
        }
        let shape = sx.to_vec();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(shape, out, Op::ChannelBias(x, bias), rg))
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, out, op, rg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.map(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, T::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    /// Entrywise absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, x: Var) -> Var {
        self.map(x, T::abs, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, |v| v * v, Op::Square(x))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        if self.value(x).iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDomain("softmax input contains NaN or Inf".into()));
        }
        let (_, n) = rows_cols(self.shape(x));
        if n == 0 {
            return Err(Error::contract("softmax over an empty axis"));
        }
        let mut out = self.value(x).to_vec();
        out.chunks_mut(n).for_each(softmax_in_place);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::SoftmaxRows(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    /// Concatenates `[m×nᵢ]` matrices along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let (m, _) = rows_cols(self.shape(first));
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = rows_cols(self.shape(p));
            if pm != m || self.shape(p).len() > 2 {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![m, total], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(x));
        if start + len > n {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, len]));
        }
        let out = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![m, len], out, Op::SliceCols { src: x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), &shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::Reshape(x), rg))
    }

    /// `[B×n] -> [B·times×n]`, each row repeated `times` times in place.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let (m, n) = rows_cols(self.shape(x));
        let mut out = Vec::with_capacity(m * times * n);
        for row in self.value(x).chunks(n) {
            for _ in 0..times {
                out.extend_from_slice(row);
            }
        }
        let rg = self.rg(&[x]);
        self.push(vec![m * times, n], out, Op::RepeatRows { src: x, times }, rg)
    }

    /// Per batch row b: `Σⱼ weights[b,j] · rows[b·K + j, :]`.
    /// `weights` is `[B×K]`, `rows` is `[B·K×c]`; the result is `[B×c]`.
    pub fn weighted_rows(&mut self, weights: Var, rows: Var) -> Result<Var> {
        let (b, k) = rows_cols(self.shape(weights));
        let (bk, c) = rows_cols(self.shape(rows));
        if bk != b * k {
            return Err(Error::shape("weighted_rows", self.shape(weights), self.shape(rows)));
        }
        let mut out = vec![T::zero(); b * c];
        let (w, r) = (self.value(weights), self.value(rows));
        for bi in 0..b {
            matmul_into(
                &w[bi * k..(bi + 1) * k],
                &r[bi * k * c..(bi + 1) * k * c],
                &mut out[bi * c..(bi + 1) * c],
                1,
                k,
                c,
            );
        }
        let rg = self.rg(&[weights, rows]);
        Ok(self.push(vec![b, c], out, Op::WeightedRows { weights, rows }, rg))
    }

    /// Row lookup into an `[N×E]` table.
    pub fn embed(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (n, e) = rows_cols(self.shape(table));
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::contract(format!("embedding index {bad} out of range {n}")));
        }
        let t = self.value(table);
        let out = idx.iter().flat_map(|&i| t[i * e..(i + 1) * e].iter().copied()).collect();
        let rg = self.rg(&[table]);
        Ok(self.push(vec![idx.len(), e], out, Op::Embed { table, idx: idx.to_vec() }, rg))
    }

    /// Row b of the result is row b of `sources[picks[b]]`; all sources share one shape.
    pub fn gather_steps(&mut self, sources: &[Var], picks: &[usize]) -> Result<Var> {
        let first = *sources.first().ok_or_else(|| Error::contract("gather of nothing"))?;
        let shape = self.shape(first).to_vec();
        let (m, n) = rows_cols(&shape);
        if picks.len() != m || picks.iter().any(|&p| p >= sources.len()) {
            return Err(Error::contract("gather_steps picks out of range"));
        }
        for &s in sources {
            if self.shape(s) != shape.as_slice() {
                return Err(Error::shape("gather_steps", &shape, self.shape(s)));
            }
        }
        let out = picks
            .iter()
            .enumerate()
            .flat_map(|(r, &p)| self.value(sources[p])[r * n..(r + 1) * n].iter().copied())
            .collect();
        let rg = self.rg(sources);
        Ok(self.push(
            vec![m, n],
            out,
            Op::GatherSteps {
                sources: sources.to_vec(),
                picks: picks.to_vec(),
            },
            rg,
        ))
    }

    /// Multiplies row r by the constant `mask[r]`.
    pub fn mask_rows(&mut self, x: Var, mask: &[T]) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(x));
        if mask.len() != m {
            return Err(Error::shape("mask_rows", self.shape(x), &[mask.len()]));
        }
        let out = self
            .value(x)
            .chunks(n)
            .zip(mask)
            .flat_map(|(row, &s)| row.iter().map(move |&v| v * s))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::MaskRows { src: x, mask: mask.to_vec() }, rg))
    }

    /// Summed negative log-likelihood of `targets` under row-softmax of `[B×N]`
    /// logits. Rows whose target is `None` contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(logits));
        if targets.len() != m {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if targets.iter().flatten().any(|&t| t >= n) {
            return Err(Error::contract("cross_entropy target out of range"));
        }
        if self.value(logits).iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDomain("logits contain NaN or Inf".into()));
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = T::zero();
        for (row, target) in probs.chunks_mut(n).zip(targets) {
            softmax_in_place(row);
            if let Some(t) = *target {
                loss = loss - row[t].max(T::min_positive_value()).ln();
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    fn conv_geom(&self, input: Var, kernel: Var, spec: ConvSpec) -> Result<(usize, usize, ConvGeom)> {
        let (si, sk) = (self.shape(input), self.shape(kernel));
        let err = || Error::shape("conv2d", si, sk);
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] || spec.stride == 0 {
            return Err(err());
        }
        let ho = conv_out(si[2], sk[2], spec).ok_or_else(err)?;
        let wo = conv_out(si[3], sk[3], spec).ok_or_else(err)?;
        Ok((
            si[0],
            sk[0],
            ConvGeom {
                c: si[1],
                h: si[2],
                w: si[3],
                kh: sk[2],
                kw: sk[3],
                ho,
                wo,
                spec,
            },
        ))
    }

    /// 2-D cross-correlation of `[B,C,H,W]` input with `[O,C,kh,kw]` kernels.
    pub fn conv2d(&mut self, input: Var, kernel: Var, spec: ConvSpec) -> Result<Var> {
        let (b, o, g) = self.conv_geom(input, kernel, spec)?;
        let (ckk, p, plane) = (g.c * g.kh * g.kw, g.ho * g.wo, g.c * g.h * g.w);
        let mut cols = vec![T::zero(); ckk * p];
        let mut out = vec![T::zero(); b * o * p];
        let (x, k) = (self.value(input), self.value(kernel));
        for bi in 0..b {
            g.im2col(&x[bi * plane..(bi + 1) * plane], &mut cols);
            matmul_into(k, &cols, &mut out[bi * o * p..(bi + 1) * o * p], o, ckk, p);
        }
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(vec![b, o, g.ho, g.wo], out, Op::Conv2d { input, kernel, spec }, rg))
    }

    /// `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", s, &[0, 0, 0, 0]));
        }
        let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
        let inv = T::one() / T::lit(plane as f64);
        let out = self.value(x).chunks(plane).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![b, c], out, Op::GlobalAvgPool(x), rg))
    }

    /// Single element as a scalar, flat index.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = *self
            .value(x)
            .get(index)
            .ok_or_else(|| Error::contract(format!("pick index {index} out of range")))?;
        let rg = self.rg(&[x]);
        Ok(self.push(vec![1], vec![v], Op::Pick { src: x, index }, rg))
    }

    /// Reverse pass from a scalar loss. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Grads<T>> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let nodes = self.nodes;
        let lens: Vec<usize> = nodes.iter().map(|n| n.value.len()).collect();
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
            grads[i] = Some(g);
        }
        // non-differentiable nodes never hold gradients
        for (g, n) in grads.iter_mut().zip(&nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Grads { grads, lens })
    }
}

fn slot<'a, T: Real>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn backprop<T: Real>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |v: Var| -> &[T] { &nodes[v.0].value };
    let shape = |v: Var| -> &[usize] { &nodes[v.0].shape };
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = as_matrix(shape(*a)).unwrap();
            let n = shape(*b)[1];
            if let Some(ga) = slot(nodes, grads, *a) {
                matmul_bt_into(g, val(*b), ga, m, n, k);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                matmul_at_into(val(*a), g, gb, m, k, n);
            }
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(gv) = slot(nodes, grads, v) {
                    gv.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(d, &s)| *d = *d - s);
            }
        }
        Op::Mul(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((d, &s), &o) in ga.iter_mut().zip(g).zip(val(*b)) {
                    *d = *d + s * o;
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for ((d, &s), &o) in gb.iter_mut().zip(g).zip(val(*a)) {
                    *d = *d + s * o;
                }
            }
        }
        Op::AddBias(x, bias) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s);
            }
            if let Some(gb) = slot(nodes, grads, *bias) {
                let n = gb.len();
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(d, &s)| *d = *d + s);
                }
            }
        }
        Op::ChannelBias(x, bias) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s);
            }
            let s = shape(*x);
            let (c, plane) = (s[1], s[2] * s[3]);
            if let Some(gb) = slot(nodes, grads, *bias) {
                for (i, chunk) in g.chunks(plane).enumerate() {
                    gb[i % c] = gb[i % c] + chunk.iter().copied().sum::<T>();
                }
            }
        }
        Op::Scale(x, s) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v * *s);
            }
        }
        Op::Sigmoid(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((d, &s), &y) in gx.iter_mut().zip(g).zip(&node.value) {
                    *d = *d + s * y * (T::one() - y);
                }
            }
        }
        Op::Tanh(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((d, &s), &y) in gx.iter_mut().zip(g).zip(&node.value) {
                    *d = *d + s * (T::one() - y * y);
                }
            }
        }
        Op::Relu(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((d, &s), &y) in gx.iter_mut().zip(g).zip(&node.value) {
                    if y > T::zero() {
                        *d = *d + s;
                    }
                }
            }
        }
        Op::Abs(x) => {
            let input = val(*x);
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((d, &s), &v) in gx.iter_mut().zip(g).zip(input) {
                    if v > T::zero() {
                        *d = *d + s;
                    } else if v < T::zero() {
                        *d = *d - s;
                    }
                }
            }
        }
        Op::Square(x) => {
            let input = val(*x);
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((d, &s), &v) in gx.iter_mut().zip(g).zip(input) {
                    *d = *d + s * (v + v);
                }
            }
        }
        Op::SoftmaxRows(x) => {
            let (_, n) = rows_cols(&node.shape);
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((drow, grow), yrow) in gx.chunks_mut(n).zip(g.chunks(n)).zip(node.value.chunks(n)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for ((d, &s), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d = *d + y * (s - dot);
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().for_each(|d| *d = *d + g[0]);
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.shape[1];
            let mut offset = 0;
            for &p in parts {
                let (_, w) = rows_cols(shape(p));
                if let Some(gp) = slot(nodes, grads, p) {
                    for (r, drow) in gp.chunks_mut(w).enumerate() {
                        let src = &g[r * total + offset..r * total + offset + w];
                        drow.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
                    }
                }
                offset += w;
            }
        }
        Op::SliceCols { src, start } => {
            let (_, n) = rows_cols(shape(*src));
            let len = node.shape[1];
            if let Some(gs) = slot(nodes, grads, *src) {
                for (drow, grow) in gs.chunks_mut(n).zip(g.chunks(len)) {
                    drow[*start..start + len]
                        .iter_mut()
                        .zip(grow)
                        .for_each(|(d, &s)| *d = *d + s);
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(d, &s)| *d = *d + s);
            }
        }
        Op::RepeatRows { src, times } => {
            let (_, n) = rows_cols(shape(*src));
            if let Some(gs) = slot(nodes, grads, *src) {
                for (r, drow) in gs.chunks_mut(n).enumerate() {
                    for t in 0..*times {
                        let at = (r * times + t) * n;
                        drow.iter_mut().zip(&g[at..at + n]).for_each(|(d, &s)| *d = *d + s);
                    }
                }
            }
        }
        Op::WeightedRows { weights, rows } => {
            let (b, k) = rows_cols(shape(*weights));
            let c = node.shape[1];
            if let Some(gw) = slot(nodes, grads, *weights) {
                let r = val(*rows);
                for bi in 0..b {
                    matmul_bt_into(
                        &g[bi * c..(bi + 1) * c],
                        &r[bi * k * c..(bi + 1) * k * c],
                        &mut gw[bi * k..(bi + 1) * k],
                        1,
                        c,
                        k,
                    );
                }
            }
            if let Some(gr) = slot(nodes, grads, *rows) {
                let w = val(*weights);
                for bi in 0..b {
                    matmul_at_into(
                        &w[bi * k..(bi + 1) * k],
                        &g[bi * c..(bi + 1) * c],
                        &mut gr[bi * k * c..(bi + 1) * k * c],
                        1,
                        k,
                        c,
                    );
                }
            }
        }
        Op::Embed { table, idx } => {
            let e = node.shape[1];
            if let Some(gt) = slot(nodes, grads, *table) {
                for (r, &i) in idx.iter().enumerate() {
                    gt[i * e..(i + 1) * e]
                        .iter_mut()
                        .zip(&g[r * e..(r + 1) * e])
                        .for_each(|(d, &s)| *d = *d + s);
                }
            }
        }
        Op::GatherSteps { sources, picks } => {
            let n = node.shape[1];
            for (r, &p) in picks.iter().enumerate() {
                if let Some(gs) = slot(nodes, grads, sources[p]) {
                    gs[r * n..(r + 1) * n]
                        .iter_mut()
                        .zip(&g[r * n..(r + 1) * n])
                        .for_each(|(d, &s)| *d = *d + s);
                }
            }
        }
        Op::MaskRows { src, mask } => {
            let (_, n) = rows_cols(&node.shape);
            if let Some(gs) = slot(nodes, grads, *src) {
                for ((drow, grow), &m) in gs.chunks_mut(n).zip(g.chunks(n)).zip(mask) {
                    drow.iter_mut().zip(grow).for_each(|(d, &s)| *d = *d + s * m);
                }
            }
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let (_, n) = rows_cols(shape(*logits));
            if let Some(gl) = slot(nodes, grads, *logits) {
                for ((drow, prow), target) in gl.chunks_mut(n).zip(probs.chunks(n)).zip(targets) {
                    if let Some(t) = *target {
                        for (j, (d, &p)) in drow.iter_mut().zip(prow).enumerate() {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            *d = *d + g[0] * (p - onehot);
                        }
                    }
                }
            }
        }
        Op::Conv2d { input, kernel, spec } => {
            let (si, sk) = (shape(*input), shape(*kernel));
            let geom = ConvGeom {
                c: si[1],
                h: si[2],
                w: si[3],
                kh: sk[2],
                kw: sk[3],
                ho: node.shape[2],
                wo: node.shape[3],
                spec: *spec,
            };
            let (b, o) = (si[0], sk[0]);
            let (ckk, p, plane) = (geom.c * geom.kh * geom.kw, geom.ho * geom.wo, geom.c * geom.h * geom.w);
            let x = val(*input);
            let k = val(*kernel);
            let mut cols = vec![T::zero(); ckk * p];
            if nodes[kernel.0].requires_grad {
                let gk = slot(nodes, grads, *kernel).unwrap();
                for bi in 0..b {
                    geom.im2col(&x[bi * plane..(bi + 1) * plane], &mut cols);
                    matmul_bt_into(&g[bi * o * p..(bi + 1) * o * p], &cols, gk, o, p, ckk);
                }
            }
            if let Some(gx) = slot(nodes, grads, *input) {
                for bi in 0..b {
                    cols.iter_mut().for_each(|v| *v = T::zero());
                    matmul_at_into(k, &g[bi * o * p..(bi + 1) * o * p], &mut cols, o, ckk, p);
                    geom.col2im(&cols, &mut gx[bi * plane..(bi + 1) * plane]);
                }
            }
        }
        Op::GlobalAvgPool(x) => {
            let s = shape(*x);
            let plane = s[2] * s[3];
            let inv = T::one() / T::lit(plane as f64);
            if let Some(gx) = slot(nodes, grads, *x) {
                for (chunk, &s) in gx.chunks_mut(plane).zip(g) {
                    chunk.iter_mut().for_each(|d| *d = *d + s * inv);
                }
            }
        }
        Op::Pick { src, index } => {
            if let Some(gs) = slot(nodes, grads, *src) {
                gs[*index] = gs[*index] + g[0];
            }
        }
    }
}
