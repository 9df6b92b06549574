//! Minimal reverse-mode automatic differentiation over dense row-major
//! tensors: the substrate for the encoder, the decoder, and both training
//! objectives.
//!
//! A [`Tape`] is a Wengert list: every operation appends a node holding its
//! value, a zeroed gradient, and enough context to run its backward rule.
//! [`Tape::backward`] walks the list in exact reverse. Shape mismatches are
//! contract violations and panic with both shapes in the message. No
//! operation mutates its inputs' values, and a tape is single-threaded;
//! independent tapes may run on separate threads.

pub mod kernels;
pub mod optim;

pub use optim::{adamw_step, cosine_warmup_lr, AdamHyper, AdamState};

/// Dense row-major tensor value.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match {} values",
            shape,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows/cols of a 2-D tensor.
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected 2-D tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Transpose2D { a: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    AddBias { a: usize, bias: usize },
    Softmax { a: usize, axis: usize },
    LayerNorm { a: usize, gamma: usize, beta: usize, mean: Vec<f64>, rstd: Vec<f64> },
    Relu { a: usize },
    Gelu { a: usize },
    Embedding { table: usize, ids: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize, len: usize },
    Reshape { a: usize },
    MaskedFill { a: usize, mask: Vec<bool> },
    Dropout { a: usize, scale_mask: Vec<f64> },
    CrossEntropy { logits: usize, grad_rows: Vec<f64>, count: usize },
    GatherLogSoftmax { logits: usize, targets: Vec<usize>, probs: Vec<f64> },
    DotConst { a: usize, weights: Vec<f64> },
    PillarPool { points: usize, empty: usize, argmax: Vec<usize> },
    Im2Col3x3 { a: usize, h: usize, w: usize },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    pub fn value_tensor(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.nodes[v.0].shape.clone(),
            data: self.nodes[v.0].value.clone(),
        }
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let s = &self.nodes[v.0].shape;
        assert_eq!(s.len(), 2, "expected 2-D tensor, got {s:?}");
        (s[0], s[1])
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        self.nodes.push(Node {
            shape,
            value,
            grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Installs a tensor as a differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.data, Op::Leaf)
    }

    /// `[m, k] @ [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, ka) = self.dims2(a);
        let (kb, n) = self.dims2(b);
        assert_eq!(
            ka, kb,
            "matmul inner-dim mismatch: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a), self.value(b), m, ka, n, &mut out);
        self.push(vec![m, n], out, Op::Matmul { a: a.0, b: b.0 })
    }

    pub fn transpose2d(&mut self, a: Var) -> Var {
        let (r, c) = self.dims2(a);
        let av = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av[i * c + j];
            }
        }
        self.push(vec![c, r], out, Op::Transpose2D { a: a.0 })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "add shape mismatch: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        self.push(self.nodes[a.0].shape.clone(), out, Op::Add { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "mul shape mismatch: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        self.push(self.nodes[a.0].shape.clone(), out, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        self.push(self.nodes[a.0].shape.clone(), out, Op::Scale { a: a.0, c })
    }

    /// `[r, c] + [c]` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (r, c) = self.dims2(a);
        assert_eq!(
            self.shape(bias),
            &[c],
            "bias shape mismatch: {:?} vs {:?}",
            self.shape(a),
            self.shape(bias)
        );
        let bv = self.value(bias).to_vec();
        let mut out = self.value(a).to_vec();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += bv[j];
            }
        }
        self.push(vec![r, c], out, Op::AddBias { a: a.0, bias: bias.0 })
    }

    /// Softmax along `axis` of a 2-D tensor.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Var {
        let (r, c) = self.dims2(a);
        assert!(axis < 2, "softmax axis {axis} out of range for 2-D tensor");
        let mut out = self.value(a).to_vec();
        if axis == 1 {
            for i in 0..r {
                kernels::softmax_row(&mut out[i * c..(i + 1) * c]);
            }
        } else {
            for j in 0..c {
                let mut col: Vec<f64> = (0..r).map(|i| out[i * c + j]).collect();
                kernels::softmax_row(&mut col);
                for i in 0..r {
                    out[i * c + j] = col[i];
                }
            }
        }
        self.push(vec![r, c], out, Op::Softmax { a: a.0, axis })
    }

    /// Layer norm over the last axis of `[r, c]` with `gamma`, `beta` of `[c]`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (r, c) = self.dims2(a);
        assert_eq!(
            self.shape(gamma),
            &[c],
            "layer_norm gamma mismatch: {:?} vs {:?}",
            self.shape(a),
            self.shape(gamma)
        );
        assert_eq!(self.shape(beta), &[c]);
        let mut out = vec![0.0; r * c];
        let mut mean = vec![0.0; r];
        let mut rstd = vec![0.0; r];
        for i in 0..r {
            let (m, s) = kernels::layer_norm_row(
                &self.nodes[a.0].value[i * c..(i + 1) * c],
                self.value(gamma),
                self.value(beta),
                eps,
                &mut out[i * c..(i + 1) * c],
            );
            mean[i] = m;
            rstd[i] = s;
        }
        self.push(
            vec![r, c],
            out,
            Op::LayerNorm {
                a: a.0,
                gamma: gamma.0,
                beta: beta.0,
                mean,
                rstd,
            },
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|&x| kernels::relu(x)).collect();
        self.push(self.nodes[a.0].shape.clone(), out, Op::Relu { a: a.0 })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|&x| kernels::gelu(x)).collect();
        self.push(self.nodes[a.0].shape.clone(), out, Op::Gelu { a: a.0 })
    }

    /// Rows of `table: [v, d]` selected by `ids` -> `[len(ids), d]`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Var {
        let (v, d) = self.dims2(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "embedding id {id} out of table size {v}");
            out.extend_from_slice(&self.nodes[table.0].value[id * d..(id + 1) * d]);
        }
        self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
        )
    }

    /// Concatenates 2-D tensors along `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        assert!(axis < 2, "concat axis {axis} out of range for 2-D tensors");
        let (r0, c0) = self.dims2(parts[0]);
        let (mut rows, mut cols) = (r0, c0);
        for &p in &parts[1..] {
            let (r, c) = self.dims2(p);
            if axis == 0 {
                assert_eq!(c, c0, "concat column mismatch: {c} vs {c0}");
                rows += r;
            } else {
                assert_eq!(r, r0, "concat row mismatch: {r} vs {r0}");
                cols += c;
            }
        }
        let mut out = Vec::with_capacity(rows * cols);
        if axis == 0 {
            for &p in parts {
                out.extend_from_slice(self.value(p));
            }
        } else {
            for i in 0..rows {
                for &p in parts {
                    let (_, c) = self.dims2(p);
                    out.extend_from_slice(&self.nodes[p.0].value[i * c..(i + 1) * c]);
                }
            }
        }
        self.push(
            vec![rows, cols],
            out,
            Op::Concat {
                parts: parts.iter().map(|v| v.0).collect(),
                axis,
            },
        )
    }

    /// Contiguous slice of a 2-D tensor along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let (r, c) = self.dims2(a);
        assert!(axis < 2);
        let av = self.value(a);
        let (out, shape) = if axis == 0 {
            assert!(
                start + len <= r,
                "slice rows {start}+{len} out of {:?}",
                self.shape(a)
            );
            (av[start * c..(start + len) * c].to_vec(), vec![len, c])
        } else {
            assert!(
                start + len <= c,
                "slice cols {start}+{len} out of {:?}",
                self.shape(a)
            );
            let mut out = Vec::with_capacity(r * len);
            for i in 0..r {
                out.extend_from_slice(&av[i * c + start..i * c + start + len]);
            }
            (out, vec![r, len])
        };
        self.push(
            shape,
            out,
            Op::Slice {
                a: a.0,
                axis,
                start,
                len,
            },
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.nodes[a.0].value.len(),
            "reshape {:?} -> {:?} changes element count",
            self.shape(a),
            shape
        );
        let out = self.value(a).to_vec();
        self.push(shape.to_vec(), out, Op::Reshape { a: a.0 })
    }

    /// Replaces elements where `mask` is true by `fill`; gradient is zero at
    /// masked positions.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], fill: f64) -> Var {
        assert_eq!(
            mask.len(),
            self.nodes[a.0].value.len(),
            "mask length {} vs tensor {:?}",
            mask.len(),
            self.shape(a)
        );
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { fill } else { x })
            .collect();
        self.push(
            self.nodes[a.0].shape.clone(),
            out,
            Op::MaskedFill {
                a: a.0,
                mask: mask.to_vec(),
            },
        )
    }

    /// Elementwise scaling by a constant keep-mask (entries 0 or 1/keep_p).
    pub fn dropout_mask(&mut self, a: Var, scale_mask: Vec<f64>) -> Var {
        assert_eq!(scale_mask.len(), self.nodes[a.0].value.len());
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(&scale_mask)
            .map(|(&x, &m)| x * m)
            .collect();
        self.push(
            self.nodes[a.0].shape.clone(),
            out,
            Op::Dropout {
                a: a.0,
                scale_mask,
            },
        )
    }

    /// Mean token cross-entropy of `logits: [t, v]` against `targets`,
    /// skipping positions whose target equals `ignore_index`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], ignore_index: Option<u32>) -> Var {
        let (t, v) = self.dims2(logits);
        assert_eq!(
            targets.len(),
            t,
            "cross_entropy targets {} vs logits {:?}",
            targets.len(),
            self.shape(logits)
        );
        let lv = self.value(logits);
        let mut count = 0usize;
        let mut total = 0.0;
        // Row gradients (softmax - onehot) cached for backward; zero rows for
        // ignored targets.
        let mut grad_rows = vec![0.0; t * v];
        for (i, &tgt) in targets.iter().enumerate() {
            if Some(tgt) == ignore_index {
                continue;
            }
            let tgt = tgt as usize;
            assert!(tgt < v, "target {tgt} out of vocab {v}");
            let row = &lv[i * v..(i + 1) * v];
            let lse = kernels::log_sum_exp(row);
            total += lse - row[tgt];
            count += 1;
            let g = &mut grad_rows[i * v..(i + 1) * v];
            for (j, &x) in row.iter().enumerate() {
                g[j] = (x - lse).exp();
            }
            g[tgt] -= 1.0;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits: logits.0,
                grad_rows,
                count,
            },
        )
    }

    /// Per-row log-softmax probability of the row's target:
    /// `out[i] = log_softmax(logits[i])[targets[i]]`.
    pub fn gather_log_softmax(&mut self, logits: Var, targets: &[usize]) -> Var {
        let (t, v) = self.dims2(logits);
        assert_eq!(targets.len(), t);
        let lv = self.value(logits);
        let mut out = vec![0.0; t];
        let mut probs = vec![0.0; t * v];
        for (i, &tgt) in targets.iter().enumerate() {
            assert!(tgt < v, "target {tgt} out of vocab {v}");
            let row = &lv[i * v..(i + 1) * v];
            let lse = kernels::log_sum_exp(row);
            out[i] = row[tgt] - lse;
            let p = &mut probs[i * v..(i + 1) * v];
            for (j, &x) in row.iter().enumerate() {
                p[j] = (x - lse).exp();
            }
        }
        self.push(
            vec![t],
            out,
            Op::GatherLogSoftmax {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Scalar dot product with a constant weight vector.
    pub fn dot_const(&mut self, a: Var, weights: &[f64]) -> Var {
        assert_eq!(
            weights.len(),
            self.nodes[a.0].value.len(),
            "dot_const weights {} vs tensor {:?}",
            weights.len(),
            self.shape(a)
        );
        let s: f64 = self.value(a).iter().zip(weights).map(|(x, w)| x * w).sum();
        self.push(
            vec![1],
            vec![s],
            Op::DotConst {
                a: a.0,
                weights: weights.to_vec(),
            },
        )
    }

    /// Per-cell max-pool of point features `[n, d]` into `num_cells` rows;
    /// cells with no points take the `empty: [d]` embedding row.
    pub fn pillar_pool(
        &mut self,
        points: Var,
        cell_of_point: &[usize],
        num_cells: usize,
        empty: Var,
    ) -> Var {
        let (n, d) = self.dims2(points);
        assert_eq!(cell_of_point.len(), n);
        assert_eq!(
            self.shape(empty),
            &[d],
            "empty embedding shape {:?} vs feature dim {d}",
            self.shape(empty)
        );
        let pv = self.value(points);
        let ev = self.value(empty).to_vec();
        let mut out = vec![f64::NEG_INFINITY; num_cells * d];
        // usize::MAX marks "no point" (empty-cell rows).
        let mut argmax = vec![usize::MAX; num_cells * d];
        for (p, &cell) in cell_of_point.iter().enumerate() {
            assert!(cell < num_cells, "cell {cell} out of {num_cells}");
            for j in 0..d {
                let v = pv[p * d + j];
                let slot = cell * d + j;
                if argmax[slot] == usize::MAX || v > out[slot] {
                    out[slot] = v;
                    argmax[slot] = p;
                }
            }
        }
        for cell in 0..num_cells {
            if argmax[cell * d] == usize::MAX {
                out[cell * d..(cell + 1) * d].copy_from_slice(&ev);
            }
        }
        self.push(
            vec![num_cells, d],
            out,
            Op::PillarPool {
                points: points.0,
                empty: empty.0,
                argmax,
            },
        )
    }

    /// 3x3 zero-padded neighborhood gather over an `[h*w, c]` grid,
    /// producing `[h*w, 9c]` rows for convolution-as-matmul.
    pub fn im2col3x3(&mut self, a: Var, h: usize, w: usize) -> Var {
        let (cells, c) = self.dims2(a);
        assert_eq!(cells, h * w, "grid {:?} vs {h}x{w}", self.shape(a));
        let av = self.value(a);
        let mut out = vec![0.0; h * w * 9 * c];
        for i in 0..h {
            for j in 0..w {
                let base = (i * w + j) * 9 * c;
                for (tap, (di, dj)) in NEIGHBORS_3X3.iter().enumerate() {
                    let (ni, nj) = (i as isize + di, j as isize + dj);
                    if ni < 0 || nj < 0 || ni >= h as isize || nj >= w as isize {
                        continue;
                    }
                    let src = (ni as usize * w + nj as usize) * c;
                    out[base + tap * c..base + (tap + 1) * c]
                        .copy_from_slice(&av[src..src + c]);
                }
            }
        }
        self.push(vec![h * w, 9 * c], out, Op::Im2Col3x3 { a: a.0, h, w })
    }

    /// Reverse-mode sweep from a scalar loss. Every participating tensor's
    /// gradient afterwards equals d(loss)/d(tensor).
    pub fn backward(&mut self, loss: Var) {
        assert!(!self.nodes.is_empty(), "backward on an empty tape");
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward requires a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        self.nodes[loss.0].grad[0] = 1.0;
        for i in (0..self.nodes.len()).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if node.grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (m, n) = (node.shape[0], node.shape[1]);
                    let k = before[*a].shape[1];
                    // dA += dC @ B^T ; dB += A^T @ dC
                    if a == b {
                        let x = before[*a].value.clone();
                        kernels::matmul_bt_acc(&node.grad, &x, m, n, k, &mut before[*a].grad);
                        kernels::matmul_at_acc(&x, &node.grad, k, m, n, &mut before[*a].grad);
                    } else {
                        let (first, second) = split_two(before, *a, *b);
                        kernels::matmul_bt_acc(&node.grad, &second.value, m, n, k, &mut first.grad);
                        kernels::matmul_at_acc(&first.value, &node.grad, k, m, n, &mut second.grad);
                    }
                }
                Op::Transpose2D { a } => {
                    let (c, r) = (node.shape[0], node.shape[1]);
                    let ga = &mut before[*a].grad;
                    for i2 in 0..c {
                        for j2 in 0..r {
                            ga[j2 * c + i2] += node.grad[i2 * r + j2];
                        }
                    }
                }
                Op::Add { a, b } => {
                    for (g, &d) in before[*a].grad.iter_mut().zip(&node.grad) {
                        *g += d;
                    }
                    for (g, &d) in before[*b].grad.iter_mut().zip(&node.grad) {
                        *g += d;
                    }
                }
                Op::Mul { a, b } => {
                    if a == b {
                        let n_in = before[*a].value.len();
                        for idx in 0..n_in {
                            let v = before[*a].value[idx];
                            before[*a].grad[idx] += 2.0 * node.grad[idx] * v;
                        }
                    } else {
                        let (first, second) = split_two(before, *a, *b);
                        for ((g, &d), &v) in
                            first.grad.iter_mut().zip(&node.grad).zip(&second.value)
                        {
                            *g += d * v;
                        }
                        for ((g, &d), &v) in
                            second.grad.iter_mut().zip(&node.grad).zip(&first.value)
                        {
                            *g += d * v;
                        }
                    }
                }
                Op::Scale { a, c } => {
                    for (g, &d) in before[*a].grad.iter_mut().zip(&node.grad) {
                        *g += d * c;
                    }
                }
                Op::AddBias { a, bias } => {
                    let cols = node.shape[1];
                    for (g, &d) in before[*a].grad.iter_mut().zip(&node.grad) {
                        *g += d;
                    }
                    let gb = &mut before[*bias].grad;
                    for (idx, &d) in node.grad.iter().enumerate() {
                        gb[idx % cols] += d;
                    }
                }
                Op::Softmax { a, axis } => {
                    let (r, c) = (node.shape[0], node.shape[1]);
                    let ga = &mut before[*a].grad;
                    if *axis == 1 {
                        for i2 in 0..r {
                            let y = &node.value[i2 * c..(i2 + 1) * c];
                            let dy = &node.grad[i2 * c..(i2 + 1) * c];
                            let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                            for j2 in 0..c {
                                ga[i2 * c + j2] += y[j2] * (dy[j2] - dot);
                            }
                        }
                    } else {
                        for j2 in 0..c {
                            let mut dot = 0.0;
                            for i2 in 0..r {
                                dot += node.value[i2 * c + j2] * node.grad[i2 * c + j2];
                            }
                            for i2 in 0..r {
                                let y = node.value[i2 * c + j2];
                                ga[i2 * c + j2] += y * (node.grad[i2 * c + j2] - dot);
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    a,
                    gamma,
                    beta,
                    mean,
                    rstd,
                } => {
                    let (r, c) = (node.shape[0], node.shape[1]);
                    let gamma_val = before[*gamma].value.clone();
                    let a_val = before[*a].value.clone();
                    for i2 in 0..r {
                        let dy = &node.grad[i2 * c..(i2 + 1) * c];
                        let xr = &a_val[i2 * c..(i2 + 1) * c];
                        let (mu, rs) = (mean[i2], rstd[i2]);
                        let xhat: Vec<f64> = xr.iter().map(|&x| (x - mu) * rs).collect();
                        let dyg: Vec<f64> =
                            dy.iter().zip(&gamma_val).map(|(&d, &g)| d * g).collect();
                        let m1: f64 = dyg.iter().sum::<f64>() / c as f64;
                        let m2: f64 =
                            dyg.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        {
                            let ga = &mut before[*a].grad[i2 * c..(i2 + 1) * c];
                            for j2 in 0..c {
                                ga[j2] += rs * (dyg[j2] - m1 - xhat[j2] * m2);
                            }
                        }
                        {
                            let gg = &mut before[*gamma].grad;
                            for j2 in 0..c {
                                gg[j2] += dy[j2] * xhat[j2];
                            }
                        }
                        {
                            let gb = &mut before[*beta].grad;
                            for j2 in 0..c {
                                gb[j2] += dy[j2];
                            }
                        }
                    }
                }
                Op::Relu { a } => {
                    for ((g, &d), &x) in before[*a]
                        .grad
                        .iter_mut()
                        .zip(&node.grad)
                        .zip(before[*a].value.iter())
                    {
                        *g += d * kernels::relu_grad(x);
                    }
                }
                Op::Gelu { a } => {
                    let n_in = before[*a].value.len();
                    for idx in 0..n_in {
                        let x = before[*a].value[idx];
                        before[*a].grad[idx] += node.grad[idx] * kernels::gelu_grad(x);
                    }
                }
                Op::Embedding { table, ids } => {
                    let d = node.shape[1];
                    let gt = &mut before[*table].grad;
                    for (t2, &id) in ids.iter().enumerate() {
                        for j2 in 0..d {
                            gt[id * d + j2] += node.grad[t2 * d + j2];
                        }
                    }
                }
                Op::Concat { parts, axis } => {
                    if *axis == 0 {
                        let mut row0 = 0usize;
                        let cols = node.shape[1];
                        for &p in parts {
                            let pr = before[p].shape[0];
                            for (g, &d) in before[p]
                                .grad
                                .iter_mut()
                                .zip(&node.grad[row0 * cols..(row0 + pr) * cols])
                            {
                                *g += d;
                            }
                            row0 += pr;
                        }
                    } else {
                        let rows = node.shape[0];
                        let cols = node.shape[1];
                        let mut col0 = 0usize;
                        for &p in parts {
                            let pc = before[p].shape[1];
                            let gp = &mut before[p].grad;
                            for i2 in 0..rows {
                                for j2 in 0..pc {
                                    gp[i2 * pc + j2] += node.grad[i2 * cols + col0 + j2];
                                }
                            }
                            col0 += pc;
                        }
                    }
                }
                Op::Slice {
                    a,
                    axis,
                    start,
                    len,
                } => {
                    let ga = &mut before[*a].grad;
                    let src_cols = before[*a].shape[1];
                    if *axis == 0 {
                        let cols = node.shape[1];
                        for (off, &d) in node.grad.iter().enumerate() {
                            ga[start * cols + off] += d;
                        }
                        let _ = len;
                    } else {
                        let rows = node.shape[0];
                        for i2 in 0..rows {
                            for j2 in 0..*len {
                                ga[i2 * src_cols + start + j2] += node.grad[i2 * len + j2];
                            }
                        }
                    }
                }
                Op::Reshape { a } => {
                    for (g, &d) in before[*a].grad.iter_mut().zip(&node.grad) {
                        *g += d;
                    }
                }
                Op::MaskedFill { a, mask } => {
                    for ((g, &d), &m) in before[*a].grad.iter_mut().zip(&node.grad).zip(mask) {
                        if !m {
                            *g += d;
                        }
                    }
                }
                Op::Dropout { a, scale_mask } => {
                    for ((g, &d), &m) in
                        before[*a].grad.iter_mut().zip(&node.grad).zip(scale_mask)
                    {
                        *g += d * m;
                    }
                }
                Op::CrossEntropy {
                    logits,
                    grad_rows,
                    count,
                } => {
                    if *count > 0 {
                        let scale = node.grad[0] / *count as f64;
                        for (g, &r) in before[*logits].grad.iter_mut().zip(grad_rows) {
                            *g += scale * r;
                        }
                    }
                }
                Op::GatherLogSoftmax {
                    logits,
                    targets,
                    probs,
                } => {
                    let v = before[*logits].shape[1];
                    let gl = &mut before[*logits].grad;
                    for (t2, &tgt) in targets.iter().enumerate() {
                        let up = node.grad[t2];
                        if up == 0.0 {
                            continue;
                        }
                        let p = &probs[t2 * v..(t2 + 1) * v];
                        for j2 in 0..v {
                            gl[t2 * v + j2] -= up * p[j2];
                        }
                        gl[t2 * v + tgt] += up;
                    }
                }
                Op::DotConst { a, weights } => {
                    let up = node.grad[0];
                    for (g, &w) in before[*a].grad.iter_mut().zip(weights) {
                        *g += up * w;
                    }
                }
                Op::PillarPool {
                    points,
                    empty,
                    argmax,
                } => {
                    let d = node.shape[1];
                    let num_cells = node.shape[0];
                    let (gp, ge) = split_two(before, *points, *empty);
                    for cell in 0..num_cells {
                        for j2 in 0..d {
                            let slot = cell * d + j2;
                            let src = argmax[slot];
                            if src == usize::MAX {
                                ge.grad[j2] += node.grad[slot];
                            } else {
                                gp.grad[src * d + j2] += node.grad[slot];
                            }
                        }
                    }
                }
                Op::Im2Col3x3 { a, h, w } => {
                    let c = before[*a].shape[1];
                    let ga = &mut before[*a].grad;
                    for i2 in 0..*h {
                        for j2 in 0..*w {
                            let base = (i2 * w + j2) * 9 * c;
                            for (tap, (di, dj)) in NEIGHBORS_3X3.iter().enumerate() {
                                let (ni, nj) = (i2 as isize + di, j2 as isize + dj);
                                if ni < 0 || nj < 0 || ni >= *h as isize || nj >= *w as isize {
                                    continue;
                                }
                                let dst = (ni as usize * w + nj as usize) * c;
                                for k2 in 0..c {
                                    ga[dst + k2] += node.grad[base + tap * c + k2];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

const NEIGHBORS_3X3: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Two distinct mutable nodes out of the prefix slice.
fn split_two(nodes: &mut [Node], a: usize, b: usize) -> (&mut Node, &mut Node) {
    assert_ne!(a, b, "op reuses one input twice; route through distinct leaves");
    if a < b {
        let (lo, hi) = nodes.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = nodes.split_at_mut(a);
        let second = &mut lo[b];
        (&mut hi[0], second)
    }
}

#[cfg(test)]
mod tests;
