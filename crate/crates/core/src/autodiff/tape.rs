use crate::error::{Error, Result};

use super::tensor::{gemm, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeluMode {
    Tanh,
    Erf,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Transpose(Var),
    Reshape(Var),
    SliceLast { x: Var, start: usize },
    Concat(Vec<Var>),
    GatherRows { x: Var, rows: Vec<usize> },
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { x: Var, mode: GeluMode },
    Relu(Var),
    EmbeddingAdd { x: Var, table: Var },
    MseMasked { pred: Var, target: Vec<T>, mask: Vec<bool>, count: usize },
    CausalMaskFill(Var),
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var, heads: usize },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Record of a forward computation, replayed in reverse by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients indexed by [`Var`]; unreached nodes read as zeros.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => Tensor::new(&self.shapes[v.0], g.clone()),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        match self.grads[v.0].take() {
            Some(g) => Tensor::new(&self.shapes[v.0], g),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape { op, detail: detail.into() }
}

fn rows_cols<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    let c = t.last_dim();
    (t.numel() / c.max(1), c)
}

fn gelu_tanh_parts(x: f64) -> (f64, f64) {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    const C: f64 = 0.044_715;
    let u = K * (x + C * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * C * x * x);
    (y, dy)
}

fn gelu_erf_parts(x: f64) -> (f64, f64) {
    let cdf = 0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    (x * cdf, cdf + x * pdf)
}

fn gelu_tanh_f32(x: f32) -> (f32, f32) {
    const K: f32 = 0.797_884_6;
    const C: f32 = 0.044_715;
    let u = K * (x + C * x * x * x);
    // libm's tanhf dominates the MLP otherwise; saturates correctly at +-inf.
    let t = 1.0 - 2.0 / ((2.0 * u).exp() + 1.0);
    (0.5 * x * (1.0 + t), 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * C * x * x))
}

fn gelu_parts<T: Scalar>(x: T, mode: GeluMode) -> (T, T) {
    match mode {
        GeluMode::Tanh if T::NAME == "f32" => {
            let (y, d) = gelu_tanh_f32(x.to_f32().unwrap_or(0.0));
            (T::of(y as f64), T::of(d as f64))
        }
        GeluMode::Tanh => {
            let (y, d) = gelu_tanh_parts(x.as_f64());
            (T::of(y), T::of(d))
        }
        GeluMode::Erf => {
            let (y, d) = gelu_erf_parts(x.as_f64());
            (T::of(y), T::of(d))
        }
    }
}

fn transpose_last2<T: Scalar>(data: &[T], batch: usize, r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for b in 0..batch {
        let src = &data[b * r * c..(b + 1) * r * c];
        let dst = &mut out[b * r * c..(b + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf (inputs, targets).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// `[..., k] x [k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape.len() != 2 {
            return Err(shape_err("matmul", format!("right operand must be 2-D, got {:?}", bv.shape)));
        }
        let (k, n) = (bv.shape[0], bv.shape[1]);
        if av.last_dim() != k {
            return Err(shape_err("matmul", format!("{:?} x {:?}", av.shape, bv.shape)));
        }
        let m = av.numel() / k;
        let mut out = vec![T::zero(); m * n];
        gemm(false, false, m, k, n, T::one(), &av.data, &bv.data, T::zero(), &mut out);
        let mut shape = av.shape.clone();
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Tensor::new(&shape, out), Op::MatMul(a, b), &[a, b]))
    }

    /// `[B, m, k] x [B, k, n] -> [B, m, n]`; with `trans_b` the right operand
    /// is `[B, n, k]` and is used transposed.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape.len() != 3 || bv.shape.len() != 3 || av.shape[0] != bv.shape[0] {
            return Err(shape_err("batch_matmul", format!("{:?} x {:?}", av.shape, bv.shape)));
        }
        let (batch, m, k) = (av.shape[0], av.shape[1], av.shape[2]);
        let (kb, n) = if trans_b { (bv.shape[2], bv.shape[1]) } else { (bv.shape[1], bv.shape[2]) };
        if kb != k {
            return Err(shape_err("batch_matmul", format!("{:?} x {:?} (trans_b={trans_b})", av.shape, bv.shape)));
        }
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            gemm(
                false,
                trans_b,
                m,
                k,
                n,
                T::one(),
                &av.data[i * m * k..(i + 1) * m * k],
                &bv.data[i * k * n..(i + 1) * k * n],
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(self.push(Tensor::new(&[batch, m, n], out), Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(shape_err("add", format!("{:?} + {:?}", av.shape, bv.shape)));
        }
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| x + y).collect();
        let shape = av.shape.clone();
        Ok(self.push(Tensor::new(&shape, data), Op::Add(a, b), &[a, b]))
    }

    /// Adds a `[C]` bias to every row of `[..., C]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.last_dim();
        if bv.numel() != c {
            return Err(shape_err("add_bias", format!("{:?} + {:?}", xv.shape, bv.shape)));
        }
        let mut data = xv.data.clone();
        for row in data.chunks_exact_mut(c) {
            for (v, &b) in row.iter_mut().zip(&bv.data) {
                *v = *v + b;
            }
        }
        let shape = xv.shape.clone();
        Ok(self.push(Tensor::new(&shape, data), Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(&xv.shape, xv.data.iter().map(|&v| v * factor).collect());
        self.push(t, Op::Scale(x, factor), &[x])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let rank = xv.shape.len();
        if rank < 2 {
            return Err(shape_err("transpose", format!("rank {rank} < 2")));
        }
        let (r, c) = (xv.shape[rank - 2], xv.shape[rank - 1]);
        let batch = xv.numel() / (r * c).max(1);
        let data = transpose_last2(&xv.data, batch, r, c);
        let mut shape = xv.shape.clone();
        shape.swap(rank - 2, rank - 1);
        Ok(self.push(Tensor::new(&shape, data), Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != xv.numel() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", xv.shape)));
        }
        let t = Tensor::new(shape, xv.data.clone());
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        if start + len > c || len == 0 {
            return Err(shape_err("slice", format!("{start}..{} of axis {c}", start + len)));
        }
        let data = xv.data.chunks_exact(c).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let mut shape = xv.shape.clone();
        *shape.last_mut().unwrap() = len;
        Ok(self.push(Tensor::new(&shape, data), Op::SliceLast { x, start }, &[x]))
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        let lead = &self.value(*first).shape[..self.value(*first).shape.len() - 1].to_vec();
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if &s[..s.len() - 1] != lead.as_slice() {
                return Err(shape_err("concat", format!("leading shapes {:?} vs {lead:?}", s)));
            }
            total += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let v = self.value(*p);
                let c = v.last_dim();
                data.extend_from_slice(&v.data[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead.clone();
        shape.push(total);
        Ok(self.push(Tensor::new(&shape, data), Op::Concat(parts.to_vec()), parts))
    }

    /// Selects rows of the second-to-last axis: `[B, T, C] -> [B, len, C]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape.len() != 3 {
            return Err(shape_err("gather_rows", format!("expected [B, T, C], got {:?}", xv.shape)));
        }
        let (b, t, c) = (xv.shape[0], xv.shape[1], xv.shape[2]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= t) {
            return Err(shape_err("gather_rows", format!("row {bad} out of range {t}")));
        }
        let mut data = Vec::with_capacity(b * rows.len() * c);
        for bi in 0..b {
            for &r in rows {
                let off = (bi * t + r) * c;
                data.extend_from_slice(&xv.data[off..off + c]);
            }
        }
        let t_new = Tensor::new(&[b, rows.len(), c], data);
        Ok(self.push(t_new, Op::GatherRows { x, rows: rows.to_vec() }, &[x]))
    }

    /// Row-wise softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.last_dim();
        let mut data = xv.data.clone();
        for row in data.chunks_exact_mut(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let shape = xv.shape.clone();
        self.push(Tensor::new(&shape, data), Op::Softmax(x), &[x])
    }

    /// Normalises each row of `[..., C]` to zero mean and unit variance, then
    /// applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = rows_cols(xv);
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(shape_err("layer_norm", format!("affine size must be {c}")));
        }
        let (g, bt) = (&self.value(gamma).data, &self.value(beta).data);
        let inv_c = T::of(1.0 / c as f64);
        let eps = T::of(eps);
        let mut xhat = vec![T::zero(); rows * c];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * c];
        for r in 0..rows {
            let row = &xv.data[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + bt[j];
            }
        }
        let shape = xv.shape.clone();
        Ok(self.push(Tensor::new(&shape, out), Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    pub fn gelu(&mut self, x: Var, mode: GeluMode) -> Var {
        let xv = self.value(x);
        let data = xv.data.iter().map(|&v| gelu_parts(v, mode).0).collect();
        let shape = xv.shape.clone();
        self.push(Tensor::new(&shape, data), Op::Gelu { x, mode }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data.iter().map(|&v| v.max(T::zero())).collect();
        let shape = xv.shape.clone();
        self.push(Tensor::new(&shape, data), Op::Relu(x), &[x])
    }

    /// Adds rows `0..T` of a `[P, C]` table to each sequence of `[B, T, C]`.
    pub fn embedding_add(&mut self, x: Var, table: Var) -> Result<Var> {
        let (xv, tv) = (self.value(x), self.value(table));
        if xv.shape.len() != 3 || tv.shape.len() != 2 || xv.shape[2] != tv.shape[1] {
            return Err(shape_err("embedding_add", format!("{:?} + table {:?}", xv.shape, tv.shape)));
        }
        let (t, c) = (xv.shape[1], xv.shape[2]);
        if t > tv.shape[0] {
            return Err(shape_err(
                "embedding_add",
                format!("sequence length {t} exceeds {} positions", tv.shape[0]),
            ));
        }
        let mut data = xv.data.clone();
        for seq in data.chunks_exact_mut(t * c) {
            for (v, &p) in seq.iter_mut().zip(&tv.data[..t * c]) {
                *v = *v + p;
            }
        }
        let shape = xv.shape.clone();
        Ok(self.push(Tensor::new(&shape, data), Op::EmbeddingAdd { x, table }, &[x, table]))
    }

    /// Mean of `(pred - target)^2` over the entries where `mask` is set.
    pub fn mse_masked(&mut self, pred: Var, target: &[T], mask: &[bool]) -> Result<Var> {
        let pv = self.value(pred);
        if target.len() != pv.numel() || mask.len() != pv.numel() {
            return Err(shape_err(
                "mse_masked",
                format!("prediction has {} entries, target {}, mask {}", pv.numel(), target.len(), mask.len()),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(shape_err("mse_masked", "empty mask"));
        }
        let sum = pv
            .data
            .iter()
            .zip(target)
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|((&p, &t), _)| (p - t) * (p - t))
            .sum::<T>();
        let loss = sum / T::of(count as f64);
        let op = Op::MseMasked { pred, target: target.to_vec(), mask: mask.to_vec(), count };
        Ok(self.push(Tensor::scalar(loss), op, &[pred]))
    }

    /// Sets entries above the diagonal of each trailing `[T, T]` block to
    /// negative infinity.
    pub fn causal_mask_fill(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let rank = xv.shape.len();
        if rank < 2 || xv.shape[rank - 1] != xv.shape[rank - 2] {
            return Err(shape_err("causal_mask_fill", format!("expected [..., T, T], got {:?}", xv.shape)));
        }
        let t = xv.shape[rank - 1];
        let mut data = xv.data.clone();
        for block in data.chunks_exact_mut(t * t) {
            for i in 0..t {
                for v in &mut block[i * t + i + 1..(i + 1) * t] {
                    *v = T::neg_infinity();
                }
            }
        }
        let shape = xv.shape.clone();
        Ok(self.push(Tensor::new(&shape, data), Op::CausalMaskFill(x), &[x]))
    }

    /// `[B, T, H * D] -> [B * H, T, D]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape.len() != 3 || heads == 0 || !xv.shape[2].is_multiple_of(heads) {
            return Err(shape_err("split_heads", format!("{:?} into {heads} heads", xv.shape)));
        }
        let (b, t, c) = (xv.shape[0], xv.shape[1], xv.shape[2]);
        let d = c / heads;
        let mut data = vec![T::zero(); xv.numel()];
        for bi in 0..b {
            for ti in 0..t {
                let src = &xv.data[(bi * t + ti) * c..(bi * t + ti + 1) * c];
                for h in 0..heads {
                    let dst = ((bi * heads + h) * t + ti) * d;
                    data[dst..dst + d].copy_from_slice(&src[h * d..(h + 1) * d]);
                }
            }
        }
        Ok(self.push(Tensor::new(&[b * heads, t, d], data), Op::SplitHeads { x, heads }, &[x]))
    }

    /// `[B * H, T, D] -> [B, T, H * D]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape.len() != 3 || heads == 0 || !xv.shape[0].is_multiple_of(heads) {
            return Err(shape_err("merge_heads", format!("{:?} from {heads} heads", xv.shape)));
        }
        let (bh, t, d) = (xv.shape[0], xv.shape[1], xv.shape[2]);
        let b = bh / heads;
        let c = heads * d;
        let mut data = vec![T::zero(); xv.numel()];
        for bi in 0..b {
            for h in 0..heads {
                for ti in 0..t {
                    let src = ((bi * heads + h) * t + ti) * d;
                    let dst = (bi * t + ti) * c + h * d;
                    data[dst..dst + d].copy_from_slice(&xv.data[src..src + d]);
                }
            }
        }
        Ok(self.push(Tensor::new(&[b, t, c], data), Op::MergeHeads { x, heads }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].value.shape),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        // Only differentiable leaves keep gradients.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect() })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.numel()]))
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: impl Fn(usize) -> T) {
        if let Some(acc) = self.slot(grads, v) {
            for (j, a) in acc.iter_mut().enumerate() {
                *a = *a + contrib(j);
            }
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (k, n) = (bv.shape[0], bv.shape[1]);
                let m = av.numel() / k;
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(false, true, m, n, k, T::one(), g, &bv.data, T::one(), ga);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(true, false, k, m, n, T::one(), &av.data, g, T::one(), gb);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (av.shape[0], av.shape[1], av.shape[2]);
                let n = node.value.shape[2];
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..batch {
                        // dA = dC * op(B)^T
                        gemm(
                            false,
                            !trans_b,
                            m,
                            n,
                            k,
                            T::one(),
                            &g[i * m * n..(i + 1) * m * n],
                            &bv.data[i * k * n..(i + 1) * k * n],
                            T::one(),
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av.data[i * m * k..(i + 1) * m * k];
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // B is [n, k]: dB = dC^T * A
                            gemm(true, false, n, m, k, T::one(), gi, ai, T::one(), out);
                        } else {
                            // dB = A^T * dC
                            gemm(true, false, k, m, n, T::one(), ai, gi, T::one(), out);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |j| g[j]);
                self.accumulate(grads, *b, |j| g[j]);
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, |j| g[j]);
                if let Some(gb) = self.slot(grads, *bias) {
                    let c = gb.len();
                    for row in g.chunks_exact(c) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                }
            }
            Op::Scale(x, f) => self.accumulate(grads, *x, |j| g[j] * *f),
            Op::Transpose(x) => {
                let s = &node.value.shape;
                let rank = s.len();
                let (r, c) = (s[rank - 2], s[rank - 1]);
                let back = transpose_last2(g, g.len() / (r * c).max(1), r, c);
                self.accumulate(grads, *x, |j| back[j]);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, |j| g[j]),
            Op::SliceLast { x, start } => {
                let len = node.value.last_dim();
                let c = self.value(*x).last_dim();
                let start = *start;
                if let Some(gx) = self.slot(grads, *x) {
                    for (row_g, row_x) in g.chunks_exact(len).zip(gx.chunks_exact_mut(c)) {
                        for (a, &v) in row_x[start..start + len].iter_mut().zip(row_g) {
                            *a = *a + v;
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let total = node.value.last_dim();
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).last_dim();
                    if let Some(gp) = self.slot(grads, *p) {
                        for (row_p, row_g) in gp.chunks_exact_mut(c).zip(g.chunks_exact(total)) {
                            for (a, &v) in row_p.iter_mut().zip(&row_g[offset..offset + c]) {
                                *a = *a + v;
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::GatherRows { x, rows } => {
                let s = &self.value(*x).shape;
                let (t, c) = (s[1], s[2]);
                if let Some(gx) = self.slot(grads, *x) {
                    for (bi, chunk) in g.chunks_exact(rows.len() * c).enumerate() {
                        for (ri, &r) in rows.iter().enumerate() {
                            let dst = (bi * t + r) * c;
                            for j in 0..c {
                                gx[dst + j] = gx[dst + j] + chunk[ri * c + j];
                            }
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = &node.value.data;
                let c = node.value.last_dim();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((yr, gr), xr) in y.chunks_exact(c).zip(g.chunks_exact(c)).zip(gx.chunks_exact_mut(c)) {
                        let dotp = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                        for j in 0..c {
                            xr[j] = xr[j] + yr[j] * (gr[j] - dotp);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = node.value.last_dim();
                let gam = &self.value(*gamma).data;
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (hr, gr) in xhat.chunks_exact(c).zip(g.chunks_exact(c)) {
                        for j in 0..c {
                            gg[j] = gg[j] + hr[j] * gr[j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for gr in g.chunks_exact(c) {
                        for j in 0..c {
                            gb[j] = gb[j] + gr[j];
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let inv_c = T::of(1.0 / c as f64);
                    for (r, ((hr, gr), xr)) in
                        xhat.chunks_exact(c).zip(g.chunks_exact(c)).zip(gx.chunks_exact_mut(c)).enumerate()
                    {
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..c {
                            let d = gr[j] * gam[j];
                            mean_d = mean_d + d;
                            mean_dh = mean_dh + d * hr[j];
                        }
                        mean_d = mean_d * inv_c;
                        mean_dh = mean_dh * inv_c;
                        for j in 0..c {
                            let d = gr[j] * gam[j];
                            xr[j] = xr[j] + rstd[r] * (d - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Gelu { x, mode } => {
                let xv = &self.value(*x).data;
                self.accumulate(grads, *x, |j| g[j] * gelu_parts(xv[j], *mode).1);
            }
            Op::Relu(x) => {
                let xv = &self.value(*x).data;
                self.accumulate(grads, *x, |j| if xv[j] > T::zero() { g[j] } else { T::zero() });
            }
            Op::EmbeddingAdd { x, table } => {
                self.accumulate(grads, *x, |j| g[j]);
                let s = &node.value.shape;
                let tc = s[1] * s[2];
                if let Some(gt) = self.slot(grads, *table) {
                    for seq in g.chunks_exact(tc) {
                        for (a, &v) in gt[..tc].iter_mut().zip(seq) {
                            *a = *a + v;
                        }
                    }
                }
            }
            Op::MseMasked { pred, target, mask, count } => {
                let p = &self.value(*pred).data;
                let f = g[0] * T::of(2.0 / *count as f64);
                self.accumulate(grads, *pred, |j| if mask[j] { f * (p[j] - target[j]) } else { T::zero() });
            }
            Op::CausalMaskFill(x) => {
                let t = node.value.last_dim();
                self.accumulate(grads, *x, |j| {
                    let within = j % (t * t);
                    if within % t > within / t {
                        T::zero()
                    } else {
                        g[j]
                    }
                });
            }
            Op::SplitHeads { x, heads } => {
                let s = &self.value(*x).shape;
                let (b, t, c) = (s[0], s[1], s[2]);
                let d = c / heads;
                if let Some(gx) = self.slot(grads, *x) {
                    for bi in 0..b {
                        for ti in 0..t {
                            for h in 0..*heads {
                                let src = ((bi * heads + h) * t + ti) * d;
                                let dst = (bi * t + ti) * c + h * d;
                                for j in 0..d {
                                    gx[dst + j] = gx[dst + j] + g[src + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { x, heads } => {
                let s = &self.value(*x).shape;
                let (bh, t, d) = (s[0], s[1], s[2]);
                let c = heads * d;
                if let Some(gx) = self.slot(grads, *x) {
                    for bi in 0..bh / heads {
                        for h in 0..*heads {
                            for ti in 0..t {
                                let src = (bi * t + ti) * c + h * d;
                                let dst = ((bi * heads + h) * t + ti) * d;
                                for j in 0..d {
                                    gx[dst + j] = gx[dst + j] + g[src + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => self.accumulate(grads, *x, |_| g[0]),
        }
    }
}
