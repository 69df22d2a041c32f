//! Wengert-tape reverse-mode automatic differentiation over [`RealArray`].
//!
//! Operations are recorded eagerly during the forward pass and replayed in
//! reverse to accumulate adjoints. The op set is closed: matmul, conv2d
//! (valid cross-correlation via im2col), elementwise add/sub/mul/scale,
//! tanh/exp/log/relu/softplus/square, elementwise min, full and row-wise
//! sum/mean/logsumexp, and a diagonal-Gaussian log-density fused op.
//!
//! Determinism: single-threaded per tape, adjoints accumulated in fixed
//! (reverse tape) order, so identical tapes give bitwise-identical
//! gradients.
//!
//! NaN policy: values are never allowed to escape a tape unchecked.
//! [`Tape::forward_backward`] and [`Tape::check_finite`] scan every node and
//! report the first op that produced a non-finite value; the backward pass
//! re-checks adjoints op by op.

use crate::array::{Grads, RealArray};
use crate::error::{CsrlError, Result};

pub type NodeId = usize;

const LN_2PI: f32 = 1.8378770664093453;

#[derive(Debug, Clone)]
enum Source {
    /// Leaf holding (a copy of) a named parameter; receives a gradient.
    Param(String),
    /// Leaf constant; no gradient is reported for it.
    Const,
    Op(Op),
}

#[derive(Debug, Clone)]
enum Op {
    /// out[m,n] = a[m,k] @ b[k,n]
    Matmul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    /// Valid cross-correlation, stride `s`:
    /// input [b, cin, h, w] * kernel [cout, cin, kh, kw] -> [b, cout, ho, wo].
    Conv2d { input: NodeId, kernel: NodeId, stride: usize, dims: ConvDims },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    /// x + bias broadcast: bias[j] added to every block of `inner` elements
    /// at channel j (inner = 1 for dense rows, h*w for conv channels).
    AddBias { x: NodeId, bias: NodeId, inner: usize },
    Scale { x: NodeId, c: f32 },
    AddScalar { x: NodeId },
    Tanh { x: NodeId },
    Exp { x: NodeId },
    Log { x: NodeId },
    Relu { x: NodeId },
    Softplus { x: NodeId },
    Square { x: NodeId },
    /// Elementwise min; gradient routes to the smaller input (ties -> a).
    MinElem { a: NodeId, b: NodeId },
    Sum { x: NodeId },
    Mean { x: NodeId },
    /// Row sums of an array viewed as [rows, cols] -> [rows].
    RowSum { x: NodeId, rows: usize, cols: usize },
    /// Max-shifted log-sum-exp over the whole array -> scalar.
    Logsumexp { x: NodeId },
    /// Max-shifted log-sum-exp per row of [rows, cols] -> [rows].
    LogsumexpRows { x: NodeId, rows: usize, cols: usize },
    /// Elementwise log N(x | mean, exp(log_std)^2) for a saved constant x;
    /// differentiable w.r.t. mean and log_std.
    GaussLogDensity { mean: NodeId, log_std: NodeId },
    /// Metadata-only view change; the identity on data.
    Reshape { x: NodeId },
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Matmul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Tanh { .. } => "tanh",
            Op::Exp { .. } => "exp",
            Op::Log { .. } => "log",
            Op::Relu { .. } => "relu",
            Op::Softplus { .. } => "softplus",
            Op::Square { .. } => "square",
            Op::MinElem { .. } => "min_elem",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::RowSum { .. } => "row_sum",
            Op::Logsumexp { .. } => "logsumexp",
            Op::LogsumexpRows { .. } => "logsumexp_rows",
            Op::GaussLogDensity { .. } => "gauss_log_density",
            Op::Reshape { .. } => "reshape",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    source: Source,
    value: RealArray,
    /// Forward-pass buffers kept for backward (im2col columns, the
    /// Gaussian-density sample point).
    saved: Option<RealArray>,
}

/// The computation tape. Build leaves with [`Tape::param`] /
/// [`Tape::constant`], compose ops, then call [`Tape::forward_backward`]
/// on a scalar loss node.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &RealArray {
        &self.nodes[id].value
    }

    fn push(&mut self, source: Source, value: RealArray) -> NodeId {
        self.nodes.push(Node {
            source,
            value,
            saved: None,
        });
        self.nodes.len() - 1
    }

    /// Registers a named parameter leaf (value copied onto the tape).
    pub fn param(&mut self, name: &str, value: &RealArray) -> NodeId {
        self.push(Source::Param(name.to_string()), value.clone())
    }

    pub fn constant(&mut self, value: RealArray) -> NodeId {
        self.push(Source::Const, value)
    }

    // ── op builders ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa.len(), 2, "matmul lhs must be 2-d, got {:?}", sa);
        assert_eq!(sb.len(), 2, "matmul rhs must be 2-d, got {:?}", sb);
        assert_eq!(sa[1], sb[0], "matmul inner dims {:?} x {:?}", sa, sb);
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0f32; m * n];
        sgemm_nn(
            m,
            k,
            n,
            self.nodes[a].value.data(),
            self.nodes[b].value.data(),
            &mut out,
        );
        self.push(
            Source::Op(Op::Matmul { a, b, m, k, n }),
            RealArray::from_vec(&[m, n], out),
        )
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, stride: usize) -> Result<NodeId> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        if si.len() != 4 || sk.len() != 4 {
            return Err(CsrlError::ShapeMismatch {
                context: "conv2d expects [b,cin,h,w] input and [cout,cin,kh,kw] kernel".into(),
                expected: vec![4],
                got: vec![si.len(), sk.len()],
            });
        }
        let (batch, cin, h, w) = (si[0], si[1], si[2], si[3]);
        let (cout, kcin, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        if kcin != cin || kh > h || kw > w || stride == 0 {
            return Err(CsrlError::ShapeMismatch {
                context: format!("conv2d input {:?} kernel {:?} stride {}", si, sk, stride),
                expected: si,
                got: sk,
            });
        }
        let ho = (h - kh) / stride + 1;
        let wo = (w - kw) / stride + 1;
        let dims = ConvDims {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho,
            wo,
        };

        let ckk = cin * kh * kw;
        let rows = batch * ho * wo;
        let cols = im2col(self.nodes[input].value.data(), dims, stride);
        // kernel reshaped [cout, ckk]; out_rows = cols @ kernel^T
        let mut kmat_t = vec![0.0f32; ckk * cout];
        transpose(
            self.nodes[kernel].value.data(),
            cout,
            ckk,
            &mut kmat_t,
        );
        let mut out_rows = vec![0.0f32; rows * cout];
        sgemm_nn(rows, ckk, cout, &cols, &kmat_t, &mut out_rows);

        // permute [b*ho*wo, cout] -> [b, cout, ho, wo]
        let mut out = vec![0.0f32; batch * cout * ho * wo];
        for b in 0..batch {
            for p in 0..ho * wo {
                let row = &out_rows[(b * ho * wo + p) * cout..][..cout];
                for (c, v) in row.iter().enumerate() {
                    out[((b * cout + c) * ho * wo) + p] = *v;
                }
            }
        }

        let id = self.push(
            Source::Op(Op::Conv2d {
                input,
                kernel,
                stride,
                dims,
            }),
            RealArray::from_vec(&[batch, cout, ho, wo], out),
        );
        self.nodes[id].saved = Some(RealArray::from_vec(&[rows, ckk], cols));
        Ok(id)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, Op::Mul { a, b }, |x, y| x * y)
    }

    pub fn min_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, Op::MinElem { a, b }, |x, y| if x <= y { x } else { y })
    }

    fn zip(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f32, f32) -> f32) -> NodeId {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "elementwise {} shape mismatch",
            op.name()
        );
        let shape = self.shape(a).to_vec();
        let data = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        self.push(Source::Op(op), RealArray::from_vec(&shape, data))
    }

    /// Adds `bias` (length n) to x, broadcasting each bias[j] over blocks of
    /// `inner` consecutive elements: dense rows use inner = 1, conv feature
    /// maps use inner = h*w.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId, inner: usize) -> NodeId {
        let n = self.nodes[bias].value.len();
        let len = self.nodes[x].value.len();
        assert_eq!(len % (n * inner), 0, "bias broadcast mismatch");
        let shape = self.shape(x).to_vec();
        let bdata = self.nodes[bias].value.data().to_vec();
        let mut data = self.nodes[x].value.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += bdata[(i / inner) % n];
        }
        self.push(
            Source::Op(Op::AddBias { x, bias, inner }),
            RealArray::from_vec(&shape, data),
        )
    }

    pub fn scale(&mut self, x: NodeId, c: f32) -> NodeId {
        self.map(x, Op::Scale { x, c }, |v| c * v)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f32) -> NodeId {
        self.map(x, Op::AddScalar { x }, |v| v + c)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.map(x, Op::Tanh { x }, |v| v.tanh())
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.map(x, Op::Exp { x }, |v| v.exp())
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.map(x, Op::Log { x }, |v| v.ln())
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.map(x, Op::Relu { x }, |v| v.max(0.0))
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.map(x, Op::Softplus { x }, |v| v.max(0.0) + (-v.abs()).exp().ln_1p())
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.map(x, Op::Square { x }, |v| v * v)
    }

    fn map(&mut self, x: NodeId, op: Op, f: impl Fn(f32) -> f32) -> NodeId {
        let shape = self.shape(x).to_vec();
        let data = self.nodes[x].value.data().iter().map(|v| f(*v)).collect();
        self.push(Source::Op(op), RealArray::from_vec(&shape, data))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x].value.data().iter().map(|v| *v as f64).sum();
        self.push(Source::Op(Op::Sum { x }), RealArray::scalar(s as f32))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].value.len();
        assert!(n > 0, "mean of empty array");
        let s: f64 = self.nodes[x].value.data().iter().map(|v| *v as f64).sum();
        self.push(
            Source::Op(Op::Mean { x }),
            RealArray::scalar((s / n as f64) as f32),
        )
    }

    pub fn row_sum(&mut self, x: NodeId, rows: usize, cols: usize) -> NodeId {
        assert_eq!(self.nodes[x].value.len(), rows * cols);
        let data = self.nodes[x].value.data();
        let out: Vec<f32> = (0..rows)
            .map(|r| data[r * cols..(r + 1) * cols].iter().map(|v| *v as f64).sum::<f64>() as f32)
            .collect();
        self.push(
            Source::Op(Op::RowSum { x, rows, cols }),
            RealArray::from_vec(&[rows], out),
        )
    }

    /// Max-shifted log-sum-exp of the whole array; stable for magnitudes
    /// up to at least 1e4.
    pub fn logsumexp(&mut self, x: NodeId) -> Result<NodeId> {
        if self.nodes[x].value.is_empty() {
            return Err(CsrlError::Tape("logsumexp of empty input".into()));
        }
        let v = lse(self.nodes[x].value.data());
        Ok(self.push(Source::Op(Op::Logsumexp { x }), RealArray::scalar(v)))
    }

    pub fn logsumexp_rows(&mut self, x: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        if cols == 0 || rows == 0 {
            return Err(CsrlError::Tape("logsumexp_rows of empty input".into()));
        }
        assert_eq!(self.nodes[x].value.len(), rows * cols);
        let data = self.nodes[x].value.data();
        let out: Vec<f32> = (0..rows).map(|r| lse(&data[r * cols..(r + 1) * cols])).collect();
        Ok(self.push(
            Source::Op(Op::LogsumexpRows { x, rows, cols }),
            RealArray::from_vec(&[rows], out),
        ))
    }

    /// Elementwise log-density of a diagonal Gaussian evaluated at the
    /// constant point `at`, parameterized by `mean` and `log_std` nodes.
    pub fn gauss_log_density(&mut self, mean: NodeId, log_std: NodeId, at: &RealArray) -> NodeId {
        assert_eq!(self.shape(mean), self.shape(log_std));
        assert_eq!(self.shape(mean), at.shape());
        let shape = self.shape(mean).to_vec();
        let m = self.nodes[mean].value.data();
        let ls = self.nodes[log_std].value.data();
        let data: Vec<f32> = m
            .iter()
            .zip(ls)
            .zip(at.data())
            .map(|((mu, l), x)| {
                let z = (x - mu) * (-l).exp();
                -0.5 * LN_2PI - l - 0.5 * z * z
            })
            .collect();
        let id = self.push(
            Source::Op(Op::GaussLogDensity { mean, log_std }),
            RealArray::from_vec(&shape, data),
        );
        self.nodes[id].saved = Some(at.clone());
        id
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.nodes[x].value.len(),
            "reshape must preserve element count"
        );
        let data = self.nodes[x].value.data().to_vec();
        self.push(
            Source::Op(Op::Reshape { x }),
            RealArray::from_vec(shape, data),
        )
    }

    /// clamp(x, lo, hi) composed from the closed op set:
    /// min(x, hi), then max via negated min. Gradient passes through
    /// inside the range and at the boundaries (tie goes to x).
    pub fn clamp(&mut self, x: NodeId, lo: f32, hi: f32) -> NodeId {
        let shape = self.shape(x).to_vec();
        let hi_node = self.constant(RealArray::full(&shape, hi));
        let capped = self.min_elem(x, hi_node);
        let neg = self.scale(capped, -1.0);
        let neg_lo = self.constant(RealArray::full(&shape, -lo));
        let m = self.min_elem(neg, neg_lo);
        self.scale(m, -1.0)
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    // ── checking & backward ─────────────────────────────────────────

    /// Scans every node value; errors on the first op that produced a
    /// non-finite entry. Use on calculator tapes that skip backward.
    pub fn check_finite(&self) -> Result<()> {
        for (id, node) in self.nodes.iter().enumerate() {
            if !node.value.all_finite() {
                return Err(CsrlError::NonFinite {
                    op: self.describe(id),
                    node: id,
                });
            }
        }
        Ok(())
    }

    fn describe(&self, id: NodeId) -> String {
        match &self.nodes[id].source {
            Source::Param(name) => format!("param `{}`", name),
            Source::Const => "constant".to_string(),
            Source::Op(op) => op.name().to_string(),
        }
    }

    /// Reverse-mode sweep from a scalar loss node. Returns the adjoint of
    /// every `param` leaf (zero arrays for leaves off the loss path).
    pub fn forward_backward(&mut self, loss: NodeId) -> Result<Grads> {
        if self.nodes[loss].value.len() != 1 {
            return Err(CsrlError::Tape(format!(
                "loss node must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.check_finite()?;

        let mut adj: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        adj[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            let go = match adj[id].take() {
                Some(g) => g,
                None => continue,
            };
            if go.iter().any(|v| !v.is_finite()) {
                return Err(CsrlError::NonFinite {
                    op: self.describe(id),
                    node: id,
                });
            }
            if let Source::Op(op) = self.nodes[id].source.clone() {
                self.backprop(&op, id, &go, &mut adj);
            }
            adj[id] = Some(go);
        }

        // a parameter may appear as several leaves (e.g. one forward per
        // candidate set); its gradient is the sum over all of them
        let mut grads = Grads::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Source::Param(name) = &node.source {
                let entry = grads
                    .entry(name.clone())
                    .or_insert_with(|| RealArray::zeros(node.value.shape()));
                if let Some(g) = &adj[id] {
                    for (acc, v) in entry.data_mut().iter_mut().zip(g) {
                        *acc += v;
                    }
                }
            }
        }
        Ok(grads)
    }

    fn grad_buf<'a>(
        adj: &'a mut [Option<Vec<f32>>],
        id: NodeId,
        len: usize,
    ) -> &'a mut Vec<f32> {
        adj[id].get_or_insert_with(|| vec![0.0; len])
    }

    fn backprop(&self, op: &Op, out: NodeId, go: &[f32], adj: &mut [Option<Vec<f32>>]) {
        match *op {
            Op::Matmul { a, b, m, k, n } => {
                let av = self.nodes[a].value.data();
                let bv = self.nodes[b].value.data();
                // dA += go @ B^T, dB += A^T @ go, both via transposed copies
                // so the hot kernel stays row-major.
                let mut bt = vec![0.0f32; n * k];
                transpose(bv, k, n, &mut bt);
                let da = Self::grad_buf(adj, a, m * k);
                sgemm_nn(m, n, k, go, &bt, da);
                let mut at = vec![0.0f32; k * m];
                transpose(av, m, k, &mut at);
                let db = Self::grad_buf(adj, b, k * n);
                sgemm_nn(k, m, n, &at, go, db);
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                dims,
            } => {
                let ckk = dims.cin * dims.kh * dims.kw;
                let rows = dims.batch * dims.ho * dims.wo;
                let cols = self.nodes[out].saved.as_ref().expect("conv cols").data();
                // gather dout [b,cout,ho,wo] -> rows [b*ho*wo, cout]
                let hw = dims.ho * dims.wo;
                let mut dout_rows = vec![0.0f32; rows * dims.cout];
                for b in 0..dims.batch {
                    for c in 0..dims.cout {
                        let src = &go[(b * dims.cout + c) * hw..][..hw];
                        for (p, v) in src.iter().enumerate() {
                            dout_rows[(b * hw + p) * dims.cout + c] = *v;
                        }
                    }
                }
                // dKernel[cout, ckk] += dout_rows^T @ cols
                let mut drows_t = vec![0.0f32; dims.cout * rows];
                transpose(&dout_rows, rows, dims.cout, &mut drows_t);
                let dk = Self::grad_buf(adj, kernel, dims.cout * ckk);
                sgemm_nn(dims.cout, rows, ckk, &drows_t, cols, dk);
                // dCols = dout_rows @ kernel[cout, ckk]
                let kv = self.nodes[kernel].value.data();
                let mut dcols = vec![0.0f32; rows * ckk];
                sgemm_nn(rows, dims.cout, ckk, &dout_rows, kv, &mut dcols);
                let di = Self::grad_buf(adj, input, dims.batch * dims.cin * dims.h * dims.w);
                col2im(&dcols, dims, stride, di);
            }
            Op::Add { a, b } => {
                axpy_into(adj, a, go, 1.0);
                axpy_into(adj, b, go, 1.0);
            }
            Op::Sub { a, b } => {
                axpy_into(adj, a, go, 1.0);
                axpy_into(adj, b, go, -1.0);
            }
            Op::Mul { a, b } => {
                let av = self.nodes[a].value.data().to_vec();
                let bv = self.nodes[b].value.data().to_vec();
                let da = Self::grad_buf(adj, a, go.len());
                for i in 0..go.len() {
                    da[i] += go[i] * bv[i];
                }
                let db = Self::grad_buf(adj, b, go.len());
                for i in 0..go.len() {
                    db[i] += go[i] * av[i];
                }
            }
            Op::AddBias { x, bias, inner } => {
                axpy_into(adj, x, go, 1.0);
                let n = self.nodes[bias].value.len();
                let db = Self::grad_buf(adj, bias, n);
                for (i, v) in go.iter().enumerate() {
                    db[(i / inner) % n] += v;
                }
            }
            Op::Scale { x, c } => axpy_into(adj, x, go, c),
            Op::AddScalar { x } => axpy_into(adj, x, go, 1.0),
            Op::Tanh { x } => {
                let y = self.nodes[out].value.data();
                let dx = Self::grad_buf(adj, x, go.len());
                for i in 0..go.len() {
                    dx[i] += go[i] * (1.0 - y[i] * y[i]);
                }
            }
            Op::Exp { x } => {
                let y = self.nodes[out].value.data();
                let dx = Self::grad_buf(adj, x, go.len());
                for i in 0..go.len() {
                    dx[i] += go[i] * y[i];
                }
            }
            Op::Log { x } => {
                let xv = self.nodes[x].value.data().to_vec();
                let dx = Self::grad_buf(adj, x, go.len());
                for i in 0..go.len() {
                    dx[i] += go[i] / xv[i];
                }
            }
            Op::Relu { x } => {
                let xv = self.nodes[x].value.data().to_vec();
                let dx = Self::grad_buf(adj, x, go.len());
                for i in 0..go.len() {
                    if xv[i] > 0.0 {
                        dx[i] += go[i];
                    }
                }
            }
            Op::Softplus { x } => {
                let xv = self.nodes[x].value.data().to_vec();
                let dx = Self::grad_buf(adj, x, go.len());
                for i in 0..go.len() {
                    dx[i] += go[i] / (1.0 + (-xv[i]).exp());
                }
            }
            Op::Square { x } => {
                let xv = self.nodes[x].value.data().to_vec();
                let dx = Self::grad_buf(adj, x, go.len());
                for i in 0..go.len() {
                    dx[i] += go[i] * 2.0 * xv[i];
                }
            }
            Op::MinElem { a, b } => {
                let av = self.nodes[a].value.data().to_vec();
                let bv = self.nodes[b].value.data().to_vec();
                let da = Self::grad_buf(adj, a, go.len());
                for i in 0..go.len() {
                    if av[i] <= bv[i] {
                        da[i] += go[i];
                    }
                }
                let db = Self::grad_buf(adj, b, go.len());
                for i in 0..go.len() {
                    if av[i] > bv[i] {
                        db[i] += go[i];
                    }
                }
            }
            Op::Sum { x } => {
                let n = self.nodes[x].value.len();
                let dx = Self::grad_buf(adj, x, n);
                for v in dx.iter_mut() {
                    *v += go[0];
                }
            }
            Op::Mean { x } => {
                let n = self.nodes[x].value.len();
                let g = go[0] / n as f32;
                let dx = Self::grad_buf(adj, x, n);
                for v in dx.iter_mut() {
                    *v += g;
                }
            }
            Op::RowSum { x, rows, cols } => {
                let dx = Self::grad_buf(adj, x, rows * cols);
                for r in 0..rows {
                    for c in 0..cols {
                        dx[r * cols + c] += go[r];
                    }
                }
            }
            Op::Logsumexp { x } => {
                let y = self.nodes[out].value.item();
                let xv = self.nodes[x].value.data().to_vec();
                let dx = Self::grad_buf(adj, x, xv.len());
                for i in 0..xv.len() {
                    dx[i] += go[0] * (xv[i] - y).exp();
                }
            }
            Op::LogsumexpRows { x, rows, cols } => {
                let yv = self.nodes[out].value.data().to_vec();
                let xv = self.nodes[x].value.data().to_vec();
                let dx = Self::grad_buf(adj, x, rows * cols);
                for r in 0..rows {
                    for c in 0..cols {
                        dx[r * cols + c] += go[r] * (xv[r * cols + c] - yv[r]).exp();
                    }
                }
            }
            Op::Reshape { x } => axpy_into(adj, x, go, 1.0),
            Op::GaussLogDensity { mean, log_std } => {
                let mv = self.nodes[mean].value.data().to_vec();
                let lv = self.nodes[log_std].value.data().to_vec();
                let xv = self.nodes[out].saved.as_ref().expect("gauss point").data().to_vec();
                let dm = Self::grad_buf(adj, mean, go.len());
                for i in 0..go.len() {
                    let inv_s = (-lv[i]).exp();
                    let z = (xv[i] - mv[i]) * inv_s;
                    dm[i] += go[i] * z * inv_s;
                }
                let dl = Self::grad_buf(adj, log_std, go.len());
                for i in 0..go.len() {
                    let z = (xv[i] - mv[i]) * (-lv[i]).exp();
                    dl[i] += go[i] * (z * z - 1.0);
                }
            }
        }
    }
}

fn axpy_into(adj: &mut [Option<Vec<f32>>], target: NodeId, go: &[f32], scale: f32) {
    let buf = adj[target].get_or_insert_with(|| vec![0.0; go.len()]);
    for (d, g) in buf.iter_mut().zip(go) {
        *d += scale * g;
    }
}

fn lse(xs: &[f32]) -> f32 {
    let m = xs.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|v| ((v - m) as f64).exp()).sum();
    m + (s.ln() as f32)
}

// ── kernels ─────────────────────────────────────────────────────────

/// c[m,n] += a[m,k] @ b[k,n], row-major. The ikj order keeps the inner
/// loop contiguous over b and c so it auto-vectorizes.
pub fn sgemm_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

pub fn transpose(src: &[f32], rows: usize, cols: usize, dst: &mut [f32]) {
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(dst.len(), rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

fn im2col(input: &[f32], d: ConvDims, stride: usize) -> Vec<f32> {
    let ckk = d.cin * d.kh * d.kw;
    let mut cols = vec![0.0f32; d.batch * d.ho * d.wo * ckk];
    let mut row = 0;
    for b in 0..d.batch {
        for oy in 0..d.ho {
            for ox in 0..d.wo {
                let base = row * ckk;
                let mut idx = 0;
                for c in 0..d.cin {
                    let plane = &input[(b * d.cin + c) * d.h * d.w..][..d.h * d.w];
                    for ky in 0..d.kh {
                        let y = oy * stride + ky;
                        let xoff = ox * stride;
                        let src = &plane[y * d.w + xoff..y * d.w + xoff + d.kw];
                        cols[base + idx..base + idx + d.kw].copy_from_slice(src);
                        idx += d.kw;
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im(dcols: &[f32], d: ConvDims, stride: usize, dinput: &mut [f32]) {
    let ckk = d.cin * d.kh * d.kw;
    let mut row = 0;
    for b in 0..d.batch {
        for oy in 0..d.ho {
            for ox in 0..d.wo {
                let base = row * ckk;
                let mut idx = 0;
                for c in 0..d.cin {
                    let plane_off = (b * d.cin + c) * d.h * d.w;
                    for ky in 0..d.kh {
                        let y = oy * stride + ky;
                        let xoff = ox * stride;
                        let dst = &mut dinput[plane_off + y * d.w + xoff..][..d.kw];
                        for (dv, sv) in dst.iter_mut().zip(&dcols[base + idx..base + idx + d.kw]) {
                            *dv += sv;
                        }
                        idx += d.kw;
                    }
                }
                row += 1;
            }
        }
    }
}
