//! Operation tape: forward ops record themselves, `backward` replays in
//! reverse creation order (which is a reverse topological order, since ops
//! can only reference earlier nodes).

use super::{Elem, TensorData, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<E: Elem> {
    Leaf,
    /// Batched matmul. `plan` holds one (a_off, b_off, c_off) triple per
    /// (m x k) * (k x n) instance; the 2-D-weight case is a single instance
    /// over the flattened batch.
    Matmul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
        plan: Vec<(usize, usize, usize)>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        c: E,
    },
    Sum {
        a: NodeId,
    },
    EmbedGather {
        table: NodeId,
        ids: Vec<usize>,
    },
    RmsNorm {
        x: NodeId,
        gamma: NodeId,
        inv_rms: Vec<E>,
    },
    Silu {
        x: NodeId,
    },
    Softmax {
        x: NodeId,
    },
    CausalSoftmax {
        x: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<E>,
    },
    Rope {
        x: NodeId,
        base: f64,
    },
    Reshape {
        x: NodeId,
    },
    Transpose {
        x: NodeId,
        perm: Vec<usize>,
    },
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
}

struct Node<E: Elem> {
    value: TensorData<E>,
    requires: bool,
    op: Op<E>,
}

/// Reverse-mode autodiff tape over dense tensors.
///
/// A graph is confined to one training step: build the loss, call
/// [`Graph::backward`], read gradients off the leaves, drop the graph.
pub struct Graph<E: Elem> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Elem> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Graph<E> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &TensorData<E> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target w.r.t. node `id`, if any was
    /// accumulated.
    pub fn grad(&self, id: NodeId) -> Option<&[E]> {
        self.grads[id.0].as_deref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires
    }

    fn push(&mut self, value: TensorData<E>, requires: bool, op: Op<E>) -> NodeId {
        self.nodes.push(Node {
            value,
            requires,
            op,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: TensorData<E>, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Values of the left operand of every matmul that consumed `weight` as
    /// its right operand. This is the calibration tap for post-training
    /// quantization: each returned tensor is shaped `[.., m, d_in]`.
    pub fn matmul_input_values(&self, weight: NodeId) -> Vec<&TensorData<E>> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Matmul { a, b, .. } if *b == weight => Some(&self.nodes[a.0].value),
                _ => None,
            })
            .collect()
    }

    fn req(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    // ---- forward ops -----------------------------------------------------

    /// `a @ b` with three accepted shape patterns:
    /// - `a: [.., m, k]`, `b: [k, n]` (shared weight),
    /// - equal leading dims on both sides,
    /// - equal leading dims except the last one (head axis), where
    ///   `a_heads % b_heads == 0` (grouped-query attention).
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = |details: String| TensorError::ShapeMismatch {
            op: "matmul",
            details,
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch(format!("need >=2-d operands, got {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(mismatch(format!("inner dims differ: {sa:?} x {sb:?}")));
        }

        let batch_a: usize = sa[..sa.len() - 2].iter().product();
        let mut plan = Vec::new();
        let mut out_shape;
        let (em, ek, en);
        if sb.len() == 2 {
            // One big gemm over the flattened batch.
            out_shape = sa[..sa.len() - 2].to_vec();
            out_shape.push(m);
            out_shape.push(n);
            plan.push((0, 0, 0));
            em = batch_a * m;
            ek = k;
            en = n;
        } else {
            if sa.len() != sb.len() {
                return Err(mismatch(format!("rank mismatch: {sa:?} x {sb:?}")));
            }
            let la = &sa[..sa.len() - 2];
            let lb = &sb[..sb.len() - 2];
            if la[..la.len() - 1] != lb[..lb.len() - 1] {
                return Err(mismatch(format!("leading dims differ: {sa:?} x {sb:?}")));
            }
            let (ha, hb) = (la[la.len() - 1], lb[lb.len() - 1]);
            if ha % hb != 0 {
                return Err(mismatch(format!(
                    "head dims not groupable: {ha} vs {hb} in {sa:?} x {sb:?}"
                )));
            }
            let group = ha / hb;
            let outer: usize = la[..la.len() - 1].iter().product();
            out_shape = la.to_vec();
            out_shape.push(m);
            out_shape.push(n);
            for o in 0..outer {
                for h in 0..ha {
                    let a_off = (o * ha + h) * m * k;
                    let b_off = (o * hb + h / group) * k * n;
                    let c_off = (o * ha + h) * m * n;
                    plan.push((a_off, b_off, c_off));
                }
            }
            em = m;
            ek = k;
            en = n;
        }

        let mut out = TensorData::zeros(out_shape);
        {
            let av = self.nodes[a.0].value.data();
            let bv = self.nodes[b.0].value.data();
            for &(ao, bo, co) in &plan {
                E::gemm(
                    em,
                    ek,
                    en,
                    E::ONE,
                    &av[ao..],
                    ek as isize,
                    1,
                    &bv[bo..],
                    en as isize,
                    1,
                    E::ZERO,
                    &mut out.data_mut()[co..],
                );
            }
        }
        let requires = self.req(a) || self.req(b);
        Ok(self.push(
            out,
            requires,
            Op::Matmul {
                a,
                b,
                m: em,
                k: ek,
                n: en,
                plan,
            },
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                details: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let data: Vec<E> = {
            let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
            av.iter().zip(bv).map(|(&x, &y)| x + y).collect()
        };
        let out = TensorData::new(self.shape(a).to_vec(), data);
        let requires = self.req(a) || self.req(b);
        Ok(self.push(out, requires, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                details: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let data: Vec<E> = {
            let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
            av.iter().zip(bv).map(|(&x, &y)| x * y).collect()
        };
        let out = TensorData::new(self.shape(a).to_vec(), data);
        let requires = self.req(a) || self.req(b);
        Ok(self.push(out, requires, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let ce = E::from_f64(c);
        let data: Vec<E> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .map(|&x| x * ce)
            .collect();
        let out = TensorData::new(self.shape(a).to_vec(), data);
        let requires = self.req(a);
        self.push(out, requires, Op::Scale { a, c: ce })
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        // Fixed left-to-right fold in element precision.
        let mut acc_e = E::ZERO;
        for &x in self.nodes[a.0].value.data() {
            acc_e += x;
        }
        let out = TensorData::scalar(acc_e);
        let requires = self.req(a);
        self.push(out, requires, Op::Sum { a })
    }

    /// Gather rows of a `[vocab, d]` table. `ids` is logically shaped
    /// `prefix_shape`; output is `prefix_shape + [d]`.
    pub fn embed_gather(
        &mut self,
        table: NodeId,
        ids: &[usize],
        prefix_shape: &[usize],
    ) -> Result<NodeId, TensorError> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "embed_gather",
                details: format!("table must be 2-d, got {ts:?}"),
            });
        }
        if prefix_shape.iter().product::<usize>() != ids.len() {
            return Err(TensorError::ShapeMismatch {
                op: "embed_gather",
                details: format!("prefix {prefix_shape:?} vs {} ids", ids.len()),
            });
        }
        let (vocab, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(TensorError::IndexError {
                op: "embed_gather",
                details: format!("id {bad} out of range for vocab {vocab}"),
            });
        }
        let mut shape = prefix_shape.to_vec();
        shape.push(d);
        let mut data = Vec::with_capacity(ids.len() * d);
        {
            let tv = self.nodes[table.0].value.data();
            for &id in ids {
                data.extend_from_slice(&tv[id * d..(id + 1) * d]);
            }
        }
        let out = TensorData::new(shape, data);
        let requires = self.req(table);
        Ok(self.push(
            out,
            requires,
            Op::EmbedGather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// y = x / sqrt(mean(x^2) + eps) * gamma over the last axis.
    pub fn rms_norm(&mut self, x: NodeId, gamma: NodeId, eps: f64) -> Result<NodeId, TensorError> {
        let sx = self.shape(x).to_vec();
        let sg = self.shape(gamma).to_vec();
        if sx.is_empty() || sg.len() != 1 || sg[0] != *sx.last().unwrap() {
            return Err(TensorError::ShapeMismatch {
                op: "rms_norm",
                details: format!("x {sx:?} vs gamma {sg:?}"),
            });
        }
        if eps <= 0.0 {
            return Err(TensorError::Contract {
                op: "rms_norm",
                details: format!("eps must be > 0, got {eps}"),
            });
        }
        let d = sg[0];
        let rows = self.nodes[x.0].value.numel() / d;
        let eps_e = E::from_f64(eps);
        let mut out = vec![E::ZERO; rows * d];
        let mut inv_rms = Vec::with_capacity(rows);
        {
            let xv = self.nodes[x.0].value.data();
            let gv = self.nodes[gamma.0].value.data();
            let d_e = E::from_f64(d as f64);
            for r in 0..rows {
                let row = &xv[r * d..(r + 1) * d];
                let mut ms = E::ZERO;
                for &v in row {
                    ms += v * v;
                }
                let inv = E::ONE / (ms / d_e + eps_e).sqrt();
                inv_rms.push(inv);
                for j in 0..d {
                    out[r * d + j] = row[j] * inv * gv[j];
                }
            }
        }
        let requires = self.req(x) || self.req(gamma);
        Ok(self.push(
            TensorData::new(sx, out),
            requires,
            Op::RmsNorm {
                x,
                gamma,
                inv_rms,
            },
        ))
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let data: Vec<E> = self.nodes[x.0]
            .value
            .data()
            .iter()
            .map(|&v| {
                let sig = E::ONE / (E::ONE + (-v).exp());
                v * sig
            })
            .collect();
        let out = TensorData::new(self.shape(x).to_vec(), data);
        let requires = self.req(x);
        self.push(out, requires, Op::Silu { x })
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "softmax",
                details: "scalar input".into(),
            });
        }
        let d = *sx.last().unwrap();
        let rows = self.nodes[x.0].value.numel() / d;
        let mut out = vec![E::ZERO; rows * d];
        {
            let xv = self.nodes[x.0].value.data();
            for r in 0..rows {
                softmax_row(&xv[r * d..(r + 1) * d], &mut out[r * d..(r + 1) * d]);
            }
        }
        let requires = self.req(x);
        Ok(self.push(TensorData::new(sx, out), requires, Op::Softmax { x }))
    }

    /// Row-causal softmax over the trailing `[S, S]` dims: row `i` normalizes
    /// over columns `0..=i`; later columns get probability exactly 0.
    pub fn causal_softmax(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 || sx[sx.len() - 1] != sx[sx.len() - 2] {
            return Err(TensorError::ShapeMismatch {
                op: "causal_softmax",
                details: format!("need trailing square dims, got {sx:?}"),
            });
        }
        let s = sx[sx.len() - 1];
        let batch = self.nodes[x.0].value.numel() / (s * s);
        let mut out = vec![E::ZERO; batch * s * s];
        {
            let xv = self.nodes[x.0].value.data();
            for b in 0..batch {
                for i in 0..s {
                    let off = b * s * s + i * s;
                    softmax_row(&xv[off..off + i + 1], &mut out[off..off + i + 1]);
                }
            }
        }
        let requires = self.req(x);
        Ok(self.push(
            TensorData::new(sx, out),
            requires,
            Op::CausalSoftmax { x },
        ))
    }

    /// Mean over rows of -log softmax(logits)[target]. `logits: [rows, V]`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
    ) -> Result<NodeId, TensorError> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                details: format!("logits must be 2-d, got {sl:?}"),
            });
        }
        let (rows, v) = (sl[0], sl[1]);
        if targets.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                details: format!("{} targets for {rows} rows", targets.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(TensorError::IndexError {
                op: "softmax_cross_entropy",
                details: format!("target {bad} out of range for vocab {v}"),
            });
        }
        let mut probs = vec![E::ZERO; rows * v];
        let mut loss_acc = E::ZERO;
        {
            let lv = self.nodes[logits.0].value.data();
            for r in 0..rows {
                let row = &lv[r * v..(r + 1) * v];
                let mut max = row[0];
                for &x in row {
                    if x > max {
                        max = x;
                    }
                }
                let mut denom = E::ZERO;
                for &x in row {
                    denom += (x - max).exp();
                }
                let lse = max + denom.ln();
                for j in 0..v {
                    probs[r * v + j] = (row[j] - lse).exp();
                }
                loss_acc += lse - row[targets[r]];
            }
        }
        let loss = loss_acc / E::from_f64(rows as f64);
        let requires = self.req(logits);
        Ok(self.push(
            TensorData::scalar(loss),
            requires,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Rotary position embedding on `[B, H, S, dh]` (dh even), interleaved
    /// pair convention, position = index along S.
    pub fn rope(&mut self, x: NodeId, base: f64) -> Result<NodeId, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || sx[3] % 2 != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "rope",
                details: format!("need [B, H, S, even dh], got {sx:?}"),
            });
        }
        let (bsz, heads, s, dh) = (sx[0], sx[1], sx[2], sx[3]);
        let mut out = self.nodes[x.0].value.data().to_vec();
        apply_rope(&mut out, bsz * heads, s, dh, base, false);
        let requires = self.req(x);
        Ok(self.push(TensorData::new(sx, out), requires, Op::Rope { x, base }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.nodes[x.0].value.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                details: format!(
                    "cannot view {:?} as {shape:?}",
                    self.shape(x)
                ),
            });
        }
        let out = TensorData::new(shape.to_vec(), self.nodes[x.0].value.data().to_vec());
        let requires = self.req(x);
        Ok(self.push(out, requires, Op::Reshape { x }))
    }

    pub fn transpose(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId, TensorError> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if perm.len() != sx.len() || perm.iter().any(|&p| p >= sx.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                details: format!("bad permutation {perm:?} for {sx:?}"),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| sx[p]).collect();
        let mut out = vec![E::ZERO; self.nodes[x.0].value.numel()];
        permute_into(self.nodes[x.0].value.data(), &sx, perm, &mut out);
        let requires = self.req(x);
        Ok(self.push(
            TensorData::new(out_shape, out),
            requires,
            Op::Transpose {
                x,
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn slice(
        &mut self,
        x: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<NodeId, TensorError> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || start + len > sx[axis] {
            return Err(TensorError::IndexError {
                op: "slice",
                details: format!("axis {axis} range {start}+{len} of {sx:?}"),
            });
        }
        let outer: usize = sx[..axis].iter().product();
        let inner: usize = sx[axis + 1..].iter().product();
        let mut out_shape = sx.clone();
        out_shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        {
            let xv = self.nodes[x.0].value.data();
            for o in 0..outer {
                let base = o * sx[axis] * inner + start * inner;
                out.extend_from_slice(&xv[base..base + len * inner]);
            }
        }
        let requires = self.req(x);
        Ok(self.push(
            TensorData::new(out_shape, out),
            requires,
            Op::Slice {
                x,
                axis,
                start,
                len,
            },
        ))
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId, TensorError> {
        if inputs.is_empty() {
            return Err(TensorError::Contract {
                op: "concat",
                details: "no inputs".into(),
            });
        }
        let s0 = self.shape(inputs[0]).to_vec();
        if axis >= s0.len() {
            return Err(TensorError::IndexError {
                op: "concat",
                details: format!("axis {axis} of {s0:?}"),
            });
        }
        let mut axis_total = 0;
        for &i in inputs {
            let si = self.shape(i);
            if si.len() != s0.len()
                || si
                    .iter()
                    .zip(&s0)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    details: format!("{si:?} vs {s0:?} (axis {axis})"),
                });
            }
            axis_total += si[axis];
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let mut out_shape = s0.clone();
        out_shape[axis] = axis_total;
        let mut out = vec![E::ZERO; outer * axis_total * inner];
        let mut col = 0;
        for &i in inputs {
            let ai = self.shape(i)[axis];
            let xv = self.nodes[i.0].value.data();
            for o in 0..outer {
                let src = o * ai * inner;
                let dst = o * axis_total * inner + col * inner;
                out[dst..dst + ai * inner].copy_from_slice(&xv[src..src + ai * inner]);
            }
            col += ai;
        }
        let requires = inputs.iter().any(|&i| self.req(i));
        Ok(self.push(
            TensorData::new(out_shape, out),
            requires,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    // ---- backward --------------------------------------------------------

    /// Accumulate d loss / d node for every node that (transitively) requires
    /// grad. `loss` must be scalar.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(TensorError::Contract {
                op: "backward",
                details: format!(
                    "loss must be scalar, got shape {:?}",
                    self.shape(loss)
                ),
            });
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![E::ONE]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires {
                continue;
            }
            let Some(dout) = self.grads[i].take() else {
                continue;
            };
            self.accumulate_inputs(i, &dout);
            self.grads[i] = Some(dout);
        }
        Ok(())
    }

    fn ensure_grad(&mut self, id: NodeId) -> &mut [E] {
        let n = self.nodes[id.0].value.numel();
        self.grads[id.0].get_or_insert_with(|| vec![E::ZERO; n])
    }

    fn accumulate_inputs(&mut self, i: usize, dout: &[E]) {
        // Bounce through raw indices: `op` is read from an immutable borrow
        // that ends before grads are written.
        enum Todo<E: Elem> {
            None,
            Simple(Vec<(NodeId, Vec<E>)>),
        }
        let todo = match &self.nodes[i].op {
            Op::Leaf => Todo::None,
            Op::Matmul {
                a,
                b,
                m,
                k,
                n,
                plan,
            } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                let plan = plan.clone();
                let mut da = if self.req(a) {
                    Some(vec![E::ZERO; self.nodes[a.0].value.numel()])
                } else {
                    None
                };
                let mut db = if self.req(b) {
                    Some(vec![E::ZERO; self.nodes[b.0].value.numel()])
                } else {
                    None
                };
                {
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    for &(ao, bo, co) in &plan {
                        if let Some(da) = da.as_mut() {
                            // da = dc (m x n) * b^T (n x k)
                            E::gemm(
                                m,
                                n,
                                k,
                                E::ONE,
                                &dout[co..],
                                n as isize,
                                1,
                                &bv[bo..],
                                1,
                                n as isize,
                                E::ONE,
                                &mut da[ao..],
                            );
                        }
                        if let Some(db) = db.as_mut() {
                            // db += a^T (k x m) * dc (m x n)
                            E::gemm(
                                k,
                                m,
                                n,
                                E::ONE,
                                &av[ao..],
                                1,
                                k as isize,
                                &dout[co..],
                                n as isize,
                                1,
                                E::ONE,
                                &mut db[bo..],
                            );
                        }
                    }
                }
                let mut v = Vec::new();
                if let Some(da) = da {
                    v.push((a, da));
                }
                if let Some(db) = db {
                    v.push((b, db));
                }
                Todo::Simple(v)
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                let mut v = Vec::new();
                if self.req(a) {
                    v.push((a, dout.to_vec()));
                }
                if self.req(b) {
                    v.push((b, dout.to_vec()));
                }
                Todo::Simple(v)
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let mut v = Vec::new();
                if self.req(a) {
                    let bv = self.nodes[b.0].value.data();
                    v.push((a, dout.iter().zip(bv).map(|(&d, &x)| d * x).collect()));
                }
                if self.req(b) {
                    let av = self.nodes[a.0].value.data();
                    v.push((b, dout.iter().zip(av).map(|(&d, &x)| d * x).collect()));
                }
                Todo::Simple(v)
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                if self.req(a) {
                    Todo::Simple(vec![(a, dout.iter().map(|&d| d * c).collect())])
                } else {
                    Todo::None
                }
            }
            Op::Sum { a } => {
                let a = *a;
                if self.req(a) {
                    let n = self.nodes[a.0].value.numel();
                    Todo::Simple(vec![(a, vec![dout[0]; n])])
                } else {
                    Todo::None
                }
            }
            Op::EmbedGather { table, ids } => {
                let table = *table;
                if self.req(table) {
                    let d = self.shape(table)[1];
                    let mut dt = vec![E::ZERO; self.nodes[table.0].value.numel()];
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += dout[row * d + j];
                        }
                    }
                    Todo::Simple(vec![(table, dt)])
                } else {
                    Todo::None
                }
            }
            Op::RmsNorm {
                x,
                gamma,
                inv_rms,
            } => {
                let (x, gamma) = (*x, *gamma);
                let d = self.shape(gamma)[0];
                let rows = self.nodes[x.0].value.numel() / d;
                let xv = self.nodes[x.0].value.data();
                let gv = self.nodes[gamma.0].value.data();
                let mut dx = if self.req(x) {
                    Some(vec![E::ZERO; rows * d])
                } else {
                    None
                };
                let mut dg = if self.req(gamma) {
                    Some(vec![E::ZERO; d])
                } else {
                    None
                };
                let d_e = E::from_f64(d as f64);
                for r in 0..rows {
                    let inv = inv_rms[r];
                    let xr = &xv[r * d..(r + 1) * d];
                    let dr = &dout[r * d..(r + 1) * d];
                    if let Some(dg) = dg.as_mut() {
                        for j in 0..d {
                            dg[j] += dr[j] * xr[j] * inv;
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        let mut dot = E::ZERO;
                        for j in 0..d {
                            dot += dr[j] * gv[j] * xr[j];
                        }
                        let coeff = inv * inv * inv / d_e * dot;
                        for j in 0..d {
                            dx[r * d + j] = inv * gv[j] * dr[j] - coeff * xr[j];
                        }
                    }
                }
                let mut v = Vec::new();
                if let Some(dx) = dx {
                    v.push((x, dx));
                }
                if let Some(dg) = dg {
                    v.push((gamma, dg));
                }
                Todo::Simple(v)
            }
            Op::Silu { x } => {
                let x = *x;
                if self.req(x) {
                    let xv = self.nodes[x.0].value.data();
                    let dx = dout
                        .iter()
                        .zip(xv)
                        .map(|(&d, &v)| {
                            let sig = E::ONE / (E::ONE + (-v).exp());
                            d * (sig * (E::ONE + v * (E::ONE - sig)))
                        })
                        .collect();
                    Todo::Simple(vec![(x, dx)])
                } else {
                    Todo::None
                }
            }
            Op::Softmax { x } => {
                let x = *x;
                if self.req(x) {
                    let y = self.nodes[i].value.data();
                    let d = *self.shape(NodeId(i)).last().unwrap();
                    let rows = y.len() / d;
                    let mut dx = vec![E::ZERO; y.len()];
                    for r in 0..rows {
                        softmax_backward_row(
                            &y[r * d..(r + 1) * d],
                            &dout[r * d..(r + 1) * d],
                            &mut dx[r * d..(r + 1) * d],
                        );
                    }
                    Todo::Simple(vec![(x, dx)])
                } else {
                    Todo::None
                }
            }
            Op::CausalSoftmax { x } => {
                let x = *x;
                if self.req(x) {
                    let y = self.nodes[i].value.data();
                    let sx = self.shape(NodeId(i));
                    let s = sx[sx.len() - 1];
                    let batch = y.len() / (s * s);
                    let mut dx = vec![E::ZERO; y.len()];
                    for b in 0..batch {
                        for r in 0..s {
                            let off = b * s * s + r * s;
                            softmax_backward_row(
                                &y[off..off + r + 1],
                                &dout[off..off + r + 1],
                                &mut dx[off..off + r + 1],
                            );
                        }
                    }
                    Todo::Simple(vec![(x, dx)])
                } else {
                    Todo::None
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let logits = *logits;
                if self.req(logits) {
                    let rows = targets.len();
                    let v = probs.len() / rows;
                    let scale = dout[0] / E::from_f64(rows as f64);
                    let mut dl = vec![E::ZERO; probs.len()];
                    for r in 0..rows {
                        for j in 0..v {
                            let onehot = if j == targets[r] { E::ONE } else { E::ZERO };
                            dl[r * v + j] = (probs[r * v + j] - onehot) * scale;
                        }
                    }
                    Todo::Simple(vec![(logits, dl)])
                } else {
                    Todo::None
                }
            }
            Op::Rope { x, base } => {
                let (x, base) = (*x, *base);
                if self.req(x) {
                    let sx = self.shape(x).to_vec();
                    let (bsz, heads, s, dh) = (sx[0], sx[1], sx[2], sx[3]);
                    let mut dx = dout.to_vec();
                    apply_rope(&mut dx, bsz * heads, s, dh, base, true);
                    Todo::Simple(vec![(x, dx)])
                } else {
                    Todo::None
                }
            }
            Op::Reshape { x } => {
                let x = *x;
                if self.req(x) {
                    Todo::Simple(vec![(x, dout.to_vec())])
                } else {
                    Todo::None
                }
            }
            Op::Transpose { x, perm } => {
                let x = *x;
                if self.req(x) {
                    // Gradient flows through the inverse permutation.
                    let mut inv = vec![0usize; perm.len()];
                    for (i_ax, &p) in perm.iter().enumerate() {
                        inv[p] = i_ax;
                    }
                    let out_shape = self.shape(NodeId(i)).to_vec();
                    let mut dx = vec![E::ZERO; dout.len()];
                    permute_into(dout, &out_shape, &inv, &mut dx);
                    Todo::Simple(vec![(x, dx)])
                } else {
                    Todo::None
                }
            }
            Op::Slice {
                x,
                axis,
                start,
                len,
            } => {
                let (x, axis, start, len) = (*x, *axis, *start, *len);
                if self.req(x) {
                    let sx = self.shape(x).to_vec();
                    let outer: usize = sx[..axis].iter().product();
                    let inner: usize = sx[axis + 1..].iter().product();
                    let mut dx = vec![E::ZERO; self.nodes[x.0].value.numel()];
                    for o in 0..outer {
                        let dst = o * sx[axis] * inner + start * inner;
                        let src = o * len * inner;
                        dx[dst..dst + len * inner].copy_from_slice(&dout[src..src + len * inner]);
                    }
                    Todo::Simple(vec![(x, dx)])
                } else {
                    Todo::None
                }
            }
            Op::Concat { inputs, axis } => {
                let inputs = inputs.clone();
                let axis = *axis;
                let out_shape = self.shape(NodeId(i)).to_vec();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[axis];
                let mut v = Vec::new();
                let mut col = 0;
                for &inp in &inputs {
                    let ai = self.shape(inp)[axis];
                    if self.req(inp) {
                        let mut dx = vec![E::ZERO; self.nodes[inp.0].value.numel()];
                        for o in 0..outer {
                            let src = o * total * inner + col * inner;
                            let dst = o * ai * inner;
                            dx[dst..dst + ai * inner]
                                .copy_from_slice(&dout[src..src + ai * inner]);
                        }
                        v.push((inp, dx));
                    }
                    col += ai;
                }
                Todo::Simple(v)
            }
        };

        if let Todo::Simple(pairs) = todo {
            for (id, contribution) in pairs {
                let g = self.ensure_grad(id);
                for (gi, &ci) in g.iter_mut().zip(&contribution) {
                    *gi += ci;
                }
            }
        }
    }
}

fn softmax_row<E: Elem>(row: &[E], out: &mut [E]) {
    let mut max = row[0];
    for &x in row {
        if x > max {
            max = x;
        }
    }
    let mut denom = E::ZERO;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        denom += e;
    }
    for o in out.iter_mut() {
        *o = *o / denom;
    }
}

/// dx = (dy - sum(dy * y)) * y, the softmax vjp for one row.
fn softmax_backward_row<E: Elem>(y: &[E], dy: &[E], dx: &mut [E]) {
    let mut dot = E::ZERO;
    for (&a, &b) in y.iter().zip(dy) {
        dot += a * b;
    }
    for ((o, &yi), &dyi) in dx.iter_mut().zip(y).zip(dy) {
        *o = (dyi - dot) * yi;
    }
}

/// out[i0, i1, ..] = in[perm applied], odometer walk over the output shape.
fn permute_into<E: Elem>(input: &[E], in_shape: &[usize], perm: &[usize], out: &mut [E]) {
    let rank = in_shape.len();
    if rank == 0 {
        out[0] = input[0];
        return;
    }
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank - 1).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut idx = vec![0usize; rank];
    let mut in_off = 0usize;
    for o in out.iter_mut() {
        *o = input[in_off];
        for d in (0..rank).rev() {
            idx[d] += 1;
            in_off += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            in_off -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

/// In-place rotation of `[rows, S, dh]` pair-interleaved coordinates. The
/// angle table depends only on (position, pair index), so it is built once.
fn apply_rope<E: Elem>(data: &mut [E], rows: usize, s: usize, dh: usize, base: f64, inverse: bool) {
    let half = dh / 2;
    let mut table = Vec::with_capacity(s * half);
    for pos in 0..s {
        for i in 0..half {
            let theta = pos as f64 * base.powf(-2.0 * i as f64 / dh as f64);
            let (sin, cos) = theta.sin_cos();
            let sin = if inverse { -sin } else { sin };
            table.push((E::from_f64(sin), E::from_f64(cos)));
        }
    }
    for row in 0..rows {
        for pos in 0..s {
            let off = (row * s + pos) * dh;
            for i in 0..half {
                let (sin, cos) = table[pos * half + i];
                let u = data[off + 2 * i];
                let v = data[off + 2 * i + 1];
                data[off + 2 * i] = u * cos - v * sin;
                data[off + 2 * i + 1] = u * sin + v * cos;
            }
        }
    }
}
