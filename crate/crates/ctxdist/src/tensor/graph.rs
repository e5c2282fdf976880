//! Define-by-run gradient graph with a single consuming backward pass.
//!
//! Nodes are appended in execution order, so creation order is already a
//! topological order and the backward pass is one reverse sweep that visits
//! each node exactly once. Gradients accumulate additively where a node feeds
//! several consumers. Retaining a graph for a second backward is unsupported:
//! `backward` takes the graph by value.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ensure_finite, Result, Tensor, TensorError};

/// Handle to a node inside one [`GradGraph`]. Not valid across graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Transpose { x: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    AddScalar { x: usize },
    Gelu { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize },
    SoftmaxLast { x: usize },
    LogSoftmaxLast { x: usize },
    Embedding { table: usize, ids: Vec<usize> },
    Dropout { x: usize, mask: Vec<f64> },
    TakeRow { x: usize, row: usize },
    SliceCols { x: usize, start: usize, len: usize },
    ConcatCols { parts: Vec<usize> },
    SumAll { x: usize },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    trainable: bool,
}

/// Gradients of a scalar loss with respect to the graph's trainable leaves.
#[derive(Debug)]
pub struct GradMap {
    grads: HashMap<NodeId, Tensor>,
}

impl GradMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

/// Operation tape recording one forward computation.
pub struct GradGraph {
    nodes: Vec<Node>,
}

impl GradGraph {
    pub fn new() -> Self {
        GradGraph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Enters a tensor as a leaf. It becomes a gradient target iff it was
    /// marked trainable via [`Tensor::trainable`].
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Enters a tensor as a constant; no gradient flows to it.
    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, false)
    }

    pub fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Copies a node's current value out of the graph.
    pub fn value(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("graph node holds a valid tensor")
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, trainable: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { data, shape, op, trainable });
        id
    }

    fn checked(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, name: &'static str) -> Result<NodeId> {
        ensure_finite(&data, name)?;
        Ok(self.push(data, shape, op, false))
    }

    fn dims2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.nodes[id.0].shape;
        if s.len() != 2 {
            return Err(TensorError::Shape { op, detail: format!("expected 2-D operand, got {s:?}") });
        }
        Ok((s[0], s[1]))
    }

    /// `a[m x k] @ b[k x n] -> [m x n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if k != kb {
            return Err(TensorError::Shape {
                op: "matmul",
                detail: format!("inner dimensions disagree: {:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            });
        }
        let out = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        self.checked(out, vec![m, n], Op::Matmul { a: a.0, b: b.0 }, "matmul")
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "transpose")?;
        let src = &self.nodes[x.0].data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.checked(out, vec![c, r], Op::Transpose { x: x.0 }, "transpose")
    }

    /// Elementwise sum of two same-shape nodes.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.checked(out, shape, Op::Add { a: a.0, b: b.0 }, "add")
    }

    /// Elementwise product of two same-shape nodes.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.checked(out, shape, Op::Mul { a: a.0, b: b.0 }, "mul")
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::Shape {
                op,
                detail: format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            });
        }
        Ok(())
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.checked(out, shape, Op::Scale { x: x.0, c }, "scale")
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v + c).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.checked(out, shape, Op::AddScalar { x: x.0 }, "add_scalar")
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| gelu_value(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.checked(out, shape, Op::Gelu { x: x.0 }, "gelu")
    }

    /// Row-wise layer normalization over the last dimension with learned
    /// `gamma` and `beta` (both 1-D of the feature width).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let width = *self.nodes[x.0].shape.last().expect("tensor shapes are non-empty");
        for (p, name) in [(gamma, "gamma"), (beta, "beta")] {
            let s = &self.nodes[p.0].shape;
            if s.len() != 1 || s[0] != width {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    detail: format!("{name} must be 1-D of width {width}, got {s:?}"),
                });
            }
        }
        let rows = self.nodes[x.0].data.len() / width;
        let mut out = vec![0.0; self.nodes[x.0].data.len()];
        {
            let xd = &self.nodes[x.0].data;
            let g = &self.nodes[gamma.0].data;
            let b = &self.nodes[beta.0].data;
            for r in 0..rows {
                let row = &xd[r * width..(r + 1) * width];
                let mean = row.iter().sum::<f64>() / width as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
                let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for j in 0..width {
                    out[r * width + j] = (row[j] - mean) * inv_std * g[j] + b[j];
                }
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        self.checked(out, shape, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0 }, "layer_norm")
    }

    /// Softmax over the last dimension with max-subtraction for stability.
    pub fn softmax_lastdim(&mut self, x: NodeId) -> Result<NodeId> {
        let width = self.lastdim(x, "softmax_lastdim")?;
        let out = softmax_rows(&self.nodes[x.0].data, width);
        let shape = self.nodes[x.0].shape.clone();
        self.checked(out, shape, Op::SoftmaxLast { x: x.0 }, "softmax_lastdim")
    }

    /// Log-softmax over the last dimension, computed in log space.
    pub fn log_softmax_lastdim(&mut self, x: NodeId) -> Result<NodeId> {
        let width = self.lastdim(x, "log_softmax_lastdim")?;
        let out = log_softmax_rows(&self.nodes[x.0].data, width);
        let shape = self.nodes[x.0].shape.clone();
        self.checked(out, shape, Op::LogSoftmaxLast { x: x.0 }, "log_softmax_lastdim")
    }

    fn lastdim(&self, x: NodeId, op: &'static str) -> Result<usize> {
        match self.nodes[x.0].shape.last() {
            Some(&w) if w >= 1 => Ok(w),
            _ => Err(TensorError::Shape { op, detail: "empty last dimension".into() }),
        }
    }

    /// Row lookup: `table[ids[t], :]` stacked into a `[len(ids) x width]` output.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (rows, width) = self.dims2(table, "embedding")?;
        if ids.is_empty() {
            return Err(TensorError::Shape { op: "embedding", detail: "empty id sequence".into() });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Contract {
                op: "embedding",
                detail: format!("id {bad} out of range for table with {rows} rows"),
            });
        }
        let src = &self.nodes[table.0].data;
        let mut out = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            out.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        self.checked(out, vec![ids.len(), width], Op::Embedding { table: table.0, ids: ids.to_vec() }, "embedding")
    }

    /// Inverted dropout: at train time keeps each entry with probability
    /// `1 - p` and scales kept entries by `1 / (1 - p)`; the eval path is the
    /// identity (the input node is returned unchanged).
    pub fn dropout(&mut self, x: NodeId, p: f64, seed: u64, train: bool) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Contract {
                op: "dropout",
                detail: format!("p must be in [0, 1), got {p}"),
            });
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep_scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.nodes[x.0].data.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep_scale })
            .collect();
        let out: Vec<f64> = self.nodes[x.0].data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.checked(out, shape, Op::Dropout { x: x.0, mask }, "dropout")
    }

    /// Extracts row `row` of a 2-D node as a 1-D node.
    pub fn take_row(&mut self, x: NodeId, row: usize) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "take_row")?;
        if row >= r {
            return Err(TensorError::Contract {
                op: "take_row",
                detail: format!("row {row} out of range for {r} rows"),
            });
        }
        let out = self.nodes[x.0].data[row * c..(row + 1) * c].to_vec();
        self.checked(out, vec![c], Op::TakeRow { x: x.0, row }, "take_row")
    }

    /// Column slice `[.., start..start+len]` of a 2-D node.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(TensorError::Shape {
                op: "slice_cols",
                detail: format!("slice {start}..{} out of range for {c} columns", start + len),
            });
        }
        let src = &self.nodes[x.0].data;
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        self.checked(out, vec![r, len], Op::SliceCols { x: x.0, start, len }, "slice_cols")
    }

    /// Concatenates 2-D nodes with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::Shape { op: "concat_cols", detail: "no parts".into() });
        }
        let (rows, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    detail: format!("row counts disagree: {rows} vs {r}"),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = &self.nodes[p.0].data;
                out.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        let ids = parts.iter().map(|p| p.0).collect();
        self.checked(out, vec![rows, total], Op::ConcatCols { parts: ids }, "concat_cols")
    }

    /// Sum of all entries as a scalar node.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        self.checked(vec![s], vec![1], Op::SumAll { x: x.0 }, "sum_all")
    }

    /// Reverse sweep from a scalar loss. Consumes the graph; gradients for
    /// every trainable leaf come back in the map, everything else is dropped.
    pub fn backward(self, loss: NodeId) -> Result<GradMap> {
        let n = self.nodes.len();
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::Contract {
                op: "backward",
                detail: format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].shape),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    // Keep leaf grads for the final map.
                    grads[i] = Some(g);
                    continue;
                }
                Op::Matmul { a, b } => {
                    let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                    let n_cols = self.nodes[*b].shape[1];
                    let b_t = transpose_raw(&self.nodes[*b].data, k, n_cols);
                    let da = matmul_raw(&g, &b_t, m, n_cols, k);
                    let a_t = transpose_raw(&self.nodes[*a].data, m, k);
                    let db = matmul_raw(&a_t, &g, k, m, n_cols);
                    accumulate(&mut grads[*a], &da);
                    accumulate(&mut grads[*b], &db);
                }
                Op::Transpose { x } => {
                    let (r, c) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let gx = transpose_raw(&g, r, c);
                    accumulate(&mut grads[*x], &gx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads[*a], &g);
                    accumulate(&mut grads[*b], &g);
                }
                Op::Mul { a, b } => {
                    let da: Vec<f64> = g.iter().zip(&self.nodes[*b].data).map(|(g, v)| g * v).collect();
                    let db: Vec<f64> = g.iter().zip(&self.nodes[*a].data).map(|(g, v)| g * v).collect();
                    accumulate(&mut grads[*a], &da);
                    accumulate(&mut grads[*b], &db);
                }
                Op::Scale { x, c } => {
                    let gx: Vec<f64> = g.iter().map(|v| v * c).collect();
                    accumulate(&mut grads[*x], &gx);
                }
                Op::AddScalar { x } => {
                    accumulate(&mut grads[*x], &g);
                }
                Op::Gelu { x } => {
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[*x].data)
                        .map(|(g, &v)| g * gelu_derivative(v))
                        .collect();
                    accumulate(&mut grads[*x], &gx);
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let width = *self.nodes[i].shape.last().expect("tensor shapes are non-empty");
                    let rows = self.nodes[i].data.len() / width;
                    let xd = &self.nodes[*x].data;
                    let gd = &self.nodes[*gamma].data;
                    let mut dx = vec![0.0; xd.len()];
                    let mut dgamma = vec![0.0; width];
                    let mut dbeta = vec![0.0; width];
                    for r in 0..rows {
                        let row = &xd[r * width..(r + 1) * width];
                        let grow = &g[r * width..(r + 1) * width];
                        let mean = row.iter().sum::<f64>() / width as f64;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
                        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                        let gg: Vec<f64> = grow.iter().zip(gd).map(|(g, ga)| g * ga).collect();
                        let mean_gg = gg.iter().sum::<f64>() / width as f64;
                        let mean_gg_xhat =
                            gg.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / width as f64;
                        for j in 0..width {
                            dx[r * width + j] = (gg[j] - mean_gg - xhat[j] * mean_gg_xhat) * inv_std;
                            dgamma[j] += grow[j] * xhat[j];
                            dbeta[j] += grow[j];
                        }
                    }
                    accumulate(&mut grads[*x], &dx);
                    accumulate(&mut grads[*gamma], &dgamma);
                    accumulate(&mut grads[*beta], &dbeta);
                }
                Op::SoftmaxLast { x } => {
                    let width = *self.nodes[i].shape.last().expect("tensor shapes are non-empty");
                    let s = &self.nodes[i].data;
                    let rows = s.len() / width;
                    let mut gx = vec![0.0; s.len()];
                    for r in 0..rows {
                        let srow = &s[r * width..(r + 1) * width];
                        let grow = &g[r * width..(r + 1) * width];
                        let dot: f64 = srow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..width {
                            gx[r * width + j] = srow[j] * (grow[j] - dot);
                        }
                    }
                    accumulate(&mut grads[*x], &gx);
                }
                Op::LogSoftmaxLast { x } => {
                    let width = *self.nodes[i].shape.last().expect("tensor shapes are non-empty");
                    let ls = &self.nodes[i].data;
                    let rows = ls.len() / width;
                    let mut gx = vec![0.0; ls.len()];
                    for r in 0..rows {
                        let lrow = &ls[r * width..(r + 1) * width];
                        let grow = &g[r * width..(r + 1) * width];
                        let gsum: f64 = grow.iter().sum();
                        for j in 0..width {
                            gx[r * width + j] = grow[j] - lrow[j].exp() * gsum;
                        }
                    }
                    accumulate(&mut grads[*x], &gx);
                }
                Op::Embedding { table, ids } => {
                    let width = self.nodes[*table].shape[1];
                    let mut dt = vec![0.0; self.nodes[*table].data.len()];
                    for (t, &id) in ids.iter().enumerate() {
                        for j in 0..width {
                            dt[id * width + j] += g[t * width + j];
                        }
                    }
                    accumulate(&mut grads[*table], &dt);
                }
                Op::Dropout { x, mask } => {
                    let gx: Vec<f64> = g.iter().zip(mask).map(|(g, m)| g * m).collect();
                    accumulate(&mut grads[*x], &gx);
                }
                Op::TakeRow { x, row } => {
                    let c = self.nodes[i].data.len();
                    let mut gx = vec![0.0; self.nodes[*x].data.len()];
                    gx[row * c..(row + 1) * c].copy_from_slice(&g);
                    accumulate(&mut grads[*x], &gx);
                }
                Op::SliceCols { x, start, len } => {
                    let (r, c) = (self.nodes[*x].shape[0], self.nodes[*x].shape[1]);
                    let mut gx = vec![0.0; r * c];
                    for i_row in 0..r {
                        for j in 0..*len {
                            gx[i_row * c + start + j] = g[i_row * len + j];
                        }
                    }
                    accumulate(&mut grads[*x], &gx);
                }
                Op::ConcatCols { parts } => {
                    let total = self.nodes[i].shape[1];
                    let rows = self.nodes[i].shape[0];
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p].shape[1];
                        let mut gp = vec![0.0; rows * w];
                        for i_row in 0..rows {
                            gp[i_row * w..(i_row + 1) * w]
                                .copy_from_slice(&g[i_row * total + offset..i_row * total + offset + w]);
                        }
                        accumulate(&mut grads[p], &gp);
                        offset += w;
                    }
                }
                Op::SumAll { x } => {
                    let gx = vec![g[0]; self.nodes[*x].data.len()];
                    accumulate(&mut grads[*x], &gx);
                }
            }
        }

        let mut map = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.trainable {
                if let Some(g) = grads[i].take() {
                    let t = Tensor::new(node.shape.clone(), g)?;
                    map.insert(NodeId(i), t);
                }
            }
        }
        if map.is_empty() {
            return Err(TensorError::Contract {
                op: "backward",
                detail: "loss is not connected to any trainable leaf".into(),
            });
        }
        Ok(GradMap { grads: map })
    }
}

impl Default for GradGraph {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

/// Row-major `a[m x k] @ b[k x n]`, ikj loop order.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

pub(crate) fn softmax_rows(data: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..data.len() / width {
        let row = &data[r * width..(r + 1) * width];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..width {
            let e = (row[j] - max).exp();
            out[r * width + j] = e;
            sum += e;
        }
        for j in 0..width {
            out[r * width + j] /= sum;
        }
    }
    out
}

pub(crate) fn log_softmax_rows(data: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..data.len() / width {
        let row = &data[r * width..(r + 1) * width];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for j in 0..width {
            out[r * width + j] = row[j] - max - log_sum;
        }
    }
    out
}

fn gelu_value(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = c * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * c * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn randn_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
    }

    /// Reference matmul in the naive i-j-k order, independent of the
    /// production i-k-j kernel.
    fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(m, k, n) in &[(1, 1, 1), (2, 3, 4), (5, 7, 3), (8, 8, 8)] {
            let a = randn_vec(m * k, &mut rng);
            let b = randn_vec(k * n, &mut rng);
            let got = matmul_raw(&a, &b, m, k, n);
            let want = matmul_oracle(&a, &b, m, k, n);
            for (g, w) in got.iter().zip(&want) {
                assert_relative_eq!(g, w, max_relative = 1e-12, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut g = GradGraph::new();
        let a = g.constant(&Tensor::zeros(&[2, 3]));
        let b = g.constant(&Tensor::zeros(&[4, 2]));
        assert!(matches!(g.matmul(a, b), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn sum_of_matmul_has_analytic_gradient() {
        // loss = sum(A @ B) => dA = ones @ B^T, dB = A^T @ ones.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (m, k, n) = (3, 4, 2);
        let a_t = Tensor::new(vec![m, k], randn_vec(m * k, &mut rng)).unwrap().trainable();
        let b_t = Tensor::new(vec![k, n], randn_vec(k * n, &mut rng)).unwrap().trainable();
        let mut g = GradGraph::new();
        let a = g.leaf(&a_t);
        let b = g.leaf(&b_t);
        let c = g.matmul(a, b).unwrap();
        let loss = g.sum_all(c).unwrap();
        let grads = g.backward(loss).unwrap();

        let da = grads.get(a).unwrap();
        let db = grads.get(b).unwrap();
        for i in 0..m {
            for p in 0..k {
                let want: f64 = (0..n).map(|j| b_t.data()[p * n + j]).sum();
                assert_relative_eq!(da.data()[i * k + p], want, max_relative = 1e-12);
            }
        }
        for p in 0..k {
            for j in 0..n {
                let want: f64 = (0..m).map(|i| a_t.data()[i * k + p]).sum();
                assert_relative_eq!(db.data()[p * n + j], want, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn shared_leaf_accumulates_gradient() {
        let x_t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap().trainable();
        let mut g = GradGraph::new();
        let x = g.leaf(&x_t);
        let y = g.add(x, x).unwrap();
        let loss = g.sum_all(y).unwrap();
        let grads = g.backward(loss).unwrap();
        for &v in grads.get(x).unwrap().data() {
            assert_relative_eq!(v, 2.0, max_relative = 1e-15);
        }
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let t = Tensor::new(vec![4, 6], randn_vec(24, &mut rng)).unwrap();
        let mut g = GradGraph::new();
        let x = g.constant(&t);
        let s = g.softmax_lastdim(x).unwrap();
        let out = g.value(s);
        for r in 0..4 {
            let row = &out.data()[r * 6..(r + 1) * 6];
            assert!(row.iter().all(|&v| v > 0.0));
            assert_relative_eq!(row.iter().sum::<f64>(), 1.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn softmax_uniform_logits_give_uniform_distribution() {
        let t = Tensor::new(vec![1, 5], vec![3.0; 5]).unwrap();
        let mut g = GradGraph::new();
        let x = g.constant(&t);
        let s = g.softmax_lastdim(x).unwrap();
        for &v in g.value(s).data() {
            assert_relative_eq!(v, 0.2, max_relative = 1e-14);
        }
    }

    #[test]
    fn log_softmax_agrees_with_softmax_log() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let t = Tensor::new(vec![3, 9], randn_vec(27, &mut rng)).unwrap();
        let mut g = GradGraph::new();
        let x = g.constant(&t);
        let s = g.softmax_lastdim(x).unwrap();
        let ls = g.log_softmax_lastdim(x).unwrap();
        let s_v = g.value(s);
        let ls_v = g.value(ls);
        for (a, b) in s_v.data().iter().zip(ls_v.data()) {
            assert_relative_eq!(a.ln(), *b, max_relative = 1e-12, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_extreme_logits_stay_finite() {
        let t = Tensor::new(vec![1, 3], vec![1e30, -1e30, 0.0]).unwrap();
        let mut g = GradGraph::new();
        let x = g.constant(&t);
        let s = g.softmax_lastdim(x).unwrap();
        let v = g.value(s);
        assert!(v.data().iter().all(|x| x.is_finite()));
        assert_relative_eq!(v.data()[0], 1.0, max_relative = 1e-12);
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let width = 8;
        let t = Tensor::new(vec![3, width], randn_vec(3 * width, &mut rng)).unwrap();
        let gamma = Tensor::new(vec![width], vec![1.0; width]).unwrap();
        let beta = Tensor::zeros(&[width]);
        let mut g = GradGraph::new();
        let x = g.constant(&t);
        let ga = g.constant(&gamma);
        let be = g.constant(&beta);
        let y = g.layer_norm(x, ga, be).unwrap();
        let out = g.value(y);
        for r in 0..3 {
            let row = &out.data()[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            assert_relative_eq!(mean, 0.0, epsilon = 1e-12);
            assert_relative_eq!(var, 1.0, max_relative = 1e-3);
        }
    }

    #[test]
    fn dropout_eval_is_identity() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut g = GradGraph::new();
        let x = g.constant(&t);
        let y = g.dropout(x, 0.5, 42, false).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_train_scales_kept_entries() {
        let n = 4096;
        let t = Tensor::new(vec![n], vec![1.0; n]).unwrap();
        let mut g = GradGraph::new();
        let x = g.constant(&t);
        let y = g.dropout(x, 0.25, 7, true).unwrap();
        let out = g.value(y);
        let scale = 1.0 / 0.75;
        let mut kept = 0usize;
        for &v in out.data() {
            assert!(v == 0.0 || (v - scale).abs() < 1e-12);
            if v != 0.0 {
                kept += 1;
            }
        }
        let frac = kept as f64 / n as f64;
        assert!((frac - 0.75).abs() < 0.05, "kept fraction {frac} far from 0.75");
    }

    #[test]
    fn dropout_same_seed_same_mask() {
        let t = Tensor::new(vec![64], vec![1.0; 64]).unwrap();
        let run = |seed| {
            let mut g = GradGraph::new();
            let x = g.constant(&t);
            let y = g.dropout(x, 0.5, seed, true).unwrap();
            g.value(y).data().to_vec()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().trainable();
        let mut g = GradGraph::new();
        let x = g.leaf(&t);
        let y = g.scale(x, 2.0).unwrap();
        assert!(matches!(g.backward(y), Err(TensorError::Contract { .. })));
    }

    #[test]
    fn backward_requires_a_trainable_leaf() {
        let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut g = GradGraph::new();
        let x = g.constant(&t);
        let loss = g.sum_all(x).unwrap();
        assert!(matches!(g.backward(loss), Err(TensorError::Contract { .. })));
    }

    /// Central finite differences against backward for a composite of most
    /// ops: embedding -> matmul -> gelu -> layer_norm -> dropout-off ->
    /// log_softmax -> masked sum.
    #[test]
    fn composite_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (vocab, width) = (5, 4);
        let table0 = randn_vec(vocab * width, &mut rng);
        let w0 = randn_vec(width * width, &mut rng);
        let gamma0 = vec![1.0, 0.9, 1.1, 1.05];
        let beta0 = vec![0.0, 0.1, -0.1, 0.05];
        let ids = [0usize, 3, 1, 4];

        let f = |table: &[f64], w: &[f64], gamma: &[f64], beta: &[f64]| -> (f64, Option<GradMap>, Vec<NodeId>) {
            let mut g = GradGraph::new();
            let t = g.leaf(&Tensor::new(vec![vocab, width], table.to_vec()).unwrap().trainable());
            let wn = g.leaf(&Tensor::new(vec![width, width], w.to_vec()).unwrap().trainable());
            let ga = g.leaf(&Tensor::new(vec![width], gamma.to_vec()).unwrap().trainable());
            let be = g.leaf(&Tensor::new(vec![width], beta.to_vec()).unwrap().trainable());
            let e = g.embedding(t, &ids).unwrap();
            let h = g.matmul(e, wn).unwrap();
            let a = g.gelu(h).unwrap();
            let n = g.layer_norm(a, ga, be).unwrap();
            let n = g.dropout(n, 0.1, 99, false).unwrap();
            let ls = g.log_softmax_lastdim(n).unwrap();
            let last = g.take_row(ls, 3).unwrap();
            // Weighted sum picks an uneven direction through the row.
            let wts = Tensor::new(vec![width], vec![0.7, -0.3, 0.45, 0.15]).unwrap();
            let wn2 = g.constant(&wts);
            let prod = g.mul(last, wn2).unwrap();
            let loss = g.sum_all(prod).unwrap();
            let val = g.value(loss).item().unwrap();
            let leafs = vec![t, wn, ga, be];
            (val, Some(g.backward(loss).unwrap()), leafs)
        };

        let (_, grads, leafs) = f(&table0, &w0, &gamma0, &beta0);
        let grads = grads.unwrap();
        let h = 1e-5;
        let params: [(&[f64], usize); 4] =
            [(&table0, 0), (&w0, 1), (&gamma0, 2), (&beta0, 3)];
        for (vals, which) in params {
            let analytic = grads.get(leafs[which]).unwrap();
            for idx in 0..vals.len() {
                let mut plus = vals.to_vec();
                let mut minus = vals.to_vec();
                plus[idx] += h;
                minus[idx] -= h;
                let eval = |v: &[f64]| -> f64 {
                    let sets: [&[f64]; 4] = match which {
                        0 => [v, &w0, &gamma0, &beta0],
                        1 => [&table0, v, &gamma0, &beta0],
                        2 => [&table0, &w0, v, &beta0],
                        _ => [&table0, &w0, &gamma0, v],
                    };
                    let mut g = GradGraph::new();
                    let t = g.constant(&Tensor::new(vec![vocab, width], sets[0].to_vec()).unwrap());
                    let wn = g.leaf(&Tensor::new(vec![width, width], sets[1].to_vec()).unwrap().trainable());
                    let ga = g.constant(&Tensor::new(vec![width], sets[2].to_vec()).unwrap());
                    let be = g.constant(&Tensor::new(vec![width], sets[3].to_vec()).unwrap());
                    let e = g.embedding(t, &ids).unwrap();
                    let h2 = g.matmul(e, wn).unwrap();
                    let a = g.gelu(h2).unwrap();
                    let n = g.layer_norm(a, ga, be).unwrap();
                    let ls = g.log_softmax_lastdim(n).unwrap();
                    let last = g.take_row(ls, 3).unwrap();
                    let wts = Tensor::new(vec![width], vec![0.7, -0.3, 0.45, 0.15]).unwrap();
                    let wn2 = g.constant(&wts);
                    let prod = g.mul(last, wn2).unwrap();
                    let loss = g.sum_all(prod).unwrap();
                    g.value(loss).item().unwrap()
                };
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = analytic.data()[idx];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    ((fd - an) / denom).abs() < 1e-4,
                    "param set {which} index {idx}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn slice_and_concat_round_trip() {
        let t = Tensor::new(vec![2, 6], (0..12).map(|v| v as f64).collect()).unwrap();
        let mut g = GradGraph::new();
        let x = g.constant(&t);
        let a = g.slice_cols(x, 0, 2).unwrap();
        let b = g.slice_cols(x, 2, 3).unwrap();
        let c = g.slice_cols(x, 5, 1).unwrap();
        let back = g.concat_cols(&[a, b, c]).unwrap();
        assert_eq!(g.value(back).data(), t.data());
    }

    #[test]
    fn embedding_rejects_out_of_range_id() {
        let t = Tensor::new(vec![3, 2], vec![0.0; 6]).unwrap();
        let mut g = GradGraph::new();
        let x = g.constant(&t);
        assert!(matches!(g.embedding(x, &[0, 3]), Err(TensorError::Contract { .. })));
    }

    #[test]
    fn embedding_backward_scatter_adds_repeated_ids() {
        let t = Tensor::new(vec![3, 2], vec![0.5; 6]).unwrap().trainable();
        let mut g = GradGraph::new();
        let x = g.leaf(&t);
        let e = g.embedding(x, &[1, 1, 2]).unwrap();
        let loss = g.sum_all(e).unwrap();
        let grads = g.backward(loss).unwrap();
        let dt = grads.get(x).unwrap();
        assert_eq!(dt.data(), &[0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
    }
}
