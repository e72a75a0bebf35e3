//! The Wengert tape: op recording, forward evaluation, reverse sweep.

use thiserror::Error;

use crate::CCE_LOG_FLOOR;

/// Index of a tensor on its tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Spatial padding mode for convolutions. Stride is fixed at 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output spatial dims equal input dims; zero padding split floor-first.
    Same,
    /// No padding; output dims are `input - kernel + 1`.
    Valid,
}

/// Distance between two equal-length vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceKind {
    Euclidean,
    Cosine,
    Manhattan,
    Canberra,
}

impl DistanceKind {
    pub const ALL: [DistanceKind; 4] = [
        DistanceKind::Euclidean,
        DistanceKind::Cosine,
        DistanceKind::Manhattan,
        DistanceKind::Canberra,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistanceKind::Euclidean => "euclidean",
            DistanceKind::Cosine => "cosine",
            DistanceKind::Manhattan => "manhattan",
            DistanceKind::Canberra => "canberra",
        }
    }

    pub fn parse(s: &str) -> Option<DistanceKind> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl std::fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: zero vector has no defined value")]
    ZeroVector { op: &'static str },
    #[error("{op}: operand list is empty")]
    EmptyOperands { op: &'static str },
}

/// Which input (one or both of the two middle elements) a median coordinate
/// came from, recorded at forward time so the reverse sweep can route grads.
#[derive(Debug, Clone, Copy)]
enum MedianPick {
    One(u32),
    Two(u32, u32),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    Abs(TensorId),
    Sqrt(TensorId),
    Relu(TensorId),
    Sigmoid(TensorId),
    Softmax(TensorId),
    Sum(TensorId),
    Conv2d {
        input: TensorId,
        kernel: TensorId,
        pad: (usize, usize),
    },
    AddChannelBias {
        map: TensorId,
        bias: TensorId,
    },
    MaxPool2x2 {
        input: TensorId,
        switches: Vec<u32>,
    },
    Gap(TensorId),
    Dense {
        input: TensorId,
        weights: TensorId,
        bias: TensorId,
    },
    ConcatChannels(TensorId, TensorId),
    ConcatVec(TensorId, TensorId),
    MulGate {
        map: TensorId,
        gate: TensorId,
    },
    CceLoss {
        pred: TensorId,
        target: TensorId,
    },
    StackScalars(Vec<TensorId>),
    MeanStack(Vec<TensorId>),
    MedianStack {
        parts: Vec<TensorId>,
        picks: Vec<MedianPick>,
    },
    Distance {
        a: TensorId,
        b: TensorId,
        kind: DistanceKind,
    },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

/// Records primitive applications in topological order; operands of every
/// entry were produced earlier on the same tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
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

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Scalar value of a `[1]`-shaped tensor.
    pub fn scalar(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    /// Gradient buffer filled by the last [`Tape::backward`] call. `None` for
    /// tensors that do not require grad and never sat on the loss path.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
            op,
        });
        id
    }

    fn any_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    pub fn leaf(
        &mut self,
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
    ) -> Result<TensorId, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ShapeMismatch {
                op: "leaf",
                detail: format!("shape {:?} does not describe {} values", shape, data.len()),
            });
        }
        Ok(self.push(data, shape, requires_grad, Op::Leaf))
    }

    pub fn vector(&mut self, data: Vec<f64>, requires_grad: bool) -> TensorId {
        let n = data.len();
        self.leaf(data, vec![n], requires_grad)
            .expect("vector leaf is always well-shaped")
    }

    pub fn constant(&mut self, value: f64) -> TensorId {
        self.push(vec![value], vec![1], false, Op::Leaf)
    }

    // ── Elementwise and reductions ──────────────────────────────────────

    fn same_shape(
        &self,
        op: &'static str,
        a: TensorId,
        b: TensorId,
    ) -> Result<(), TensorError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!(
                    "{:?} vs {:?}",
                    self.nodes[a.0].shape, self.nodes[b.0].shape
                ),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape("add", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(data, shape, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape("sub", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(data, shape, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape("mul", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(data, shape, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let data = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(data, shape, rg, Op::Scale(a, c))
    }

    pub fn abs(&mut self, a: TensorId) -> TensorId {
        let data = self.nodes[a.0].data.iter().map(|x| x.abs()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(data, shape, rg, Op::Abs(a))
    }

    pub fn sqrt(&mut self, a: TensorId) -> TensorId {
        let data = self.nodes[a.0].data.iter().map(|x| x.sqrt()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(data, shape, rg, Op::Sqrt(a))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data = self.nodes[a.0].data.iter().map(|x| x.max(0.0)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(data, shape, rg, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let data = self.nodes[a.0]
            .data
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push(data, shape, rg, Op::Sigmoid(a))
    }

    /// Max-shifted softmax over a vector; output sums to 1 within 1e-9.
    pub fn softmax(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        if self.nodes[a.0].shape.len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "softmax",
                detail: format!("expected a vector, got {:?}", self.nodes[a.0].shape),
            });
        }
        let x = &self.nodes[a.0].data;
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
        let total: f64 = exps.iter().sum();
        let data: Vec<f64> = exps.iter().map(|e| e / total).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(data, shape, rg, Op::Softmax(a)))
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let total: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![total], vec![1], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = self.nodes[a.0].data.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    // ── Convolution stack ───────────────────────────────────────────────

    /// 2-D convolution over an `[H, W, Cin]` map with an
    /// `[kh, kw, Cin, Cout]` kernel, stride 1.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        padding: Padding,
    ) -> Result<TensorId, TensorError> {
        let ishape = &self.nodes[input.0].shape;
        let kshape = &self.nodes[kernel.0].shape;
        if ishape.len() != 3 || kshape.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input {:?} kernel {:?}", ishape, kshape),
            });
        }
        let (h, w, cin) = (ishape[0], ishape[1], ishape[2]);
        let (kh, kw, kcin, cout) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        if kcin != cin {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input has {cin} channels, kernel expects {kcin}"),
            });
        }
        let (pad, oh, ow) = match padding {
            Padding::Same => (((kh - 1) / 2, (kw - 1) / 2), h, w),
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(TensorError::ShapeMismatch {
                        op: "conv2d",
                        detail: format!("kernel {kh}x{kw} exceeds input {h}x{w}"),
                    });
                }
                ((0, 0), h - kh + 1, w - kw + 1)
            }
        };
        let mut out = vec![0.0; oh * ow * cout];
        {
            let inp = &self.nodes[input.0].data;
            let ker = &self.nodes[kernel.0].data;
            for orow in 0..oh {
                for ocol in 0..ow {
                    let out_base = (orow * ow + ocol) * cout;
                    for r in 0..kh {
                        let ih = orow + r;
                        if ih < pad.0 || ih - pad.0 >= h {
                            continue;
                        }
                        let ih = ih - pad.0;
                        for s in 0..kw {
                            let iw = ocol + s;
                            if iw < pad.1 || iw - pad.1 >= w {
                                continue;
                            }
                            let iw = iw - pad.1;
                            let in_base = (ih * w + iw) * cin;
                            let k_base = (r * kw + s) * cin * cout;
                            for ic in 0..cin {
                                let v = inp[in_base + ic];
                                if v == 0.0 {
                                    continue;
                                }
                                let krow = k_base + ic * cout;
                                for oc in 0..cout {
                                    out[out_base + oc] += v * ker[krow + oc];
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.any_grad(&[input, kernel]);
        Ok(self.push(
            out,
            vec![oh, ow, cout],
            rg,
            Op::Conv2d { input, kernel, pad },
        ))
    }

    /// Adds a per-channel bias `[C]` to an `[H, W, C]` map.
    pub fn add_channel_bias(
        &mut self,
        map: TensorId,
        bias: TensorId,
    ) -> Result<TensorId, TensorError> {
        let mshape = &self.nodes[map.0].shape;
        let bshape = &self.nodes[bias.0].shape;
        if mshape.len() != 3 || bshape.len() != 1 || bshape[0] != mshape[2] {
            return Err(TensorError::ShapeMismatch {
                op: "add_channel_bias",
                detail: format!("map {:?} bias {:?}", mshape, bshape),
            });
        }
        let c = mshape[2];
        let data: Vec<f64> = self.nodes[map.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + self.nodes[bias.0].data[i % c])
            .collect();
        let shape = mshape.clone();
        let rg = self.any_grad(&[map, bias]);
        Ok(self.push(data, shape, rg, Op::AddChannelBias { map, bias }))
    }

    /// 2x2 max pooling with stride 2; trailing odd rows/columns are dropped.
    pub fn max_pool_2x2(&mut self, input: TensorId) -> Result<TensorId, TensorError> {
        let ishape = &self.nodes[input.0].shape;
        if ishape.len() != 3 || ishape[0] < 2 || ishape[1] < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "max_pool_2x2",
                detail: format!("need an [H>=2, W>=2, C] map, got {:?}", ishape),
            });
        }
        let (h, w, c) = (ishape[0], ishape[1], ishape[2]);
        let (oh, ow) = (h / 2, w / 2);
        let inp = &self.nodes[input.0].data;
        let mut out = vec![0.0; oh * ow * c];
        let mut switches = vec![0u32; oh * ow * c];
        for orow in 0..oh {
            for ocol in 0..ow {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for dr in 0..2 {
                        for dc in 0..2 {
                            let idx = ((orow * 2 + dr) * w + (ocol * 2 + dc)) * c + ch;
                            if inp[idx] > best {
                                best = inp[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (orow * ow + ocol) * c + ch;
                    out[o] = best;
                    switches[o] = best_idx as u32;
                }
            }
        }
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(
            out,
            vec![oh, ow, c],
            rg,
            Op::MaxPool2x2 { input, switches },
        ))
    }

    /// Global average pooling: `[H, W, C]` -> `[C]`, the spatial mean per
    /// channel.
    pub fn gap(&mut self, input: TensorId) -> Result<TensorId, TensorError> {
        let ishape = &self.nodes[input.0].shape;
        if ishape.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "gap",
                detail: format!("expected [H, W, C], got {:?}", ishape),
            });
        }
        let (h, w, c) = (ishape[0], ishape[1], ishape[2]);
        let inp = &self.nodes[input.0].data;
        let mut out = vec![0.0; c];
        for hw in 0..h * w {
            for ch in 0..c {
                out[ch] += inp[hw * c + ch];
            }
        }
        let denom = (h * w) as f64;
        for v in &mut out {
            *v /= denom;
        }
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(out, vec![c], rg, Op::Gap(input)))
    }

    /// Affine map: `[n] x [n, m] + [m] -> [m]`.
    pub fn dense(
        &mut self,
        input: TensorId,
        weights: TensorId,
        bias: TensorId,
    ) -> Result<TensorId, TensorError> {
        let ishape = &self.nodes[input.0].shape;
        let wshape = &self.nodes[weights.0].shape;
        let bshape = &self.nodes[bias.0].shape;
        let ok = ishape.len() == 1
            && wshape.len() == 2
            && bshape.len() == 1
            && wshape[0] == ishape[0]
            && wshape[1] == bshape[0];
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "dense",
                detail: format!("input {:?} weights {:?} bias {:?}", ishape, wshape, bshape),
            });
        }
        let (n, m) = (wshape[0], wshape[1]);
        let inp = &self.nodes[input.0].data;
        let ws = &self.nodes[weights.0].data;
        let mut out = self.nodes[bias.0].data.clone();
        for i in 0..n {
            let v = inp[i];
            if v == 0.0 {
                continue;
            }
            for j in 0..m {
                out[j] += v * ws[i * m + j];
            }
        }
        let rg = self.any_grad(&[input, weights, bias]);
        Ok(self.push(
            out,
            vec![m],
            rg,
            Op::Dense {
                input,
                weights,
                bias,
            },
        ))
    }

    /// Concatenates two `[H, W, *]` maps along the channel axis.
    pub fn concat_channels(
        &mut self,
        a: TensorId,
        b: TensorId,
    ) -> Result<TensorId, TensorError> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[1] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                detail: format!("{:?} vs {:?}", sa, sb),
            });
        }
        let (h, w, ca, cb) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = Vec::with_capacity(h * w * (ca + cb));
        for hw in 0..h * w {
            data.extend_from_slice(&self.nodes[a.0].data[hw * ca..(hw + 1) * ca]);
            data.extend_from_slice(&self.nodes[b.0].data[hw * cb..(hw + 1) * cb]);
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(data, vec![h, w, ca + cb], rg, Op::ConcatChannels(a, b)))
    }

    /// Concatenates two vectors.
    pub fn concat_vec(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa.len() != 1 || sb.len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "concat_vec",
                detail: format!("{:?} vs {:?}", sa, sb),
            });
        }
        let mut data = self.nodes[a.0].data.clone();
        data.extend_from_slice(&self.nodes[b.0].data);
        let n = data.len();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(data, vec![n], rg, Op::ConcatVec(a, b)))
    }

    /// Multiplies an `[H, W, C]` map by an `[H, W, 1]` gate, broadcast over
    /// channels.
    pub fn mul_gate(&mut self, map: TensorId, gate: TensorId) -> Result<TensorId, TensorError> {
        let sm = &self.nodes[map.0].shape;
        let sg = &self.nodes[gate.0].shape;
        let ok = sm.len() == 3 && sg.len() == 3 && sg[2] == 1 && sm[0] == sg[0] && sm[1] == sg[1];
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "mul_gate",
                detail: format!("map {:?} gate {:?}", sm, sg),
            });
        }
        let c = sm[2];
        let data: Vec<f64> = self.nodes[map.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.nodes[gate.0].data[i / c])
            .collect();
        let shape = sm.clone();
        let rg = self.any_grad(&[map, gate]);
        Ok(self.push(data, shape, rg, Op::MulGate { map, gate }))
    }

    // ── Losses and prototype ops ────────────────────────────────────────

    /// Categorical cross-entropy `-sum(target * ln(pred))` with the log
    /// clamped at [`CCE_LOG_FLOOR`].
    pub fn cce_loss(&mut self, pred: TensorId, target: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape("cce_loss", pred, target)?;
        if self.nodes[pred.0].shape.len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "cce_loss",
                detail: format!("expected vectors, got {:?}", self.nodes[pred.0].shape),
            });
        }
        let loss: f64 = self.nodes[pred.0]
            .data
            .iter()
            .zip(&self.nodes[target.0].data)
            .map(|(&p, &t)| -t * p.max(CCE_LOG_FLOOR).ln())
            .sum();
        let rg = self.nodes[pred.0].requires_grad;
        Ok(self.push(vec![loss], vec![1], rg, Op::CceLoss { pred, target }))
    }

    /// Packs scalar tensors into one vector.
    pub fn stack_scalars(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyOperands {
                op: "stack_scalars",
            });
        }
        let mut data = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.nodes[p.0].data.len() != 1 {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_scalars",
                    detail: format!("part has shape {:?}", self.nodes[p.0].shape),
                });
            }
            data.push(self.nodes[p.0].data[0]);
        }
        let n = data.len();
        let rg = self.any_grad(parts);
        Ok(self.push(data, vec![n], rg, Op::StackScalars(parts.to_vec())))
    }

    /// Coordinate-wise mean of equal-shape vectors.
    pub fn mean_stack(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        self.check_stack("mean_stack", parts)?;
        let n = self.nodes[parts[0].0].data.len();
        let mut data = vec![0.0; n];
        for &p in parts {
            for (acc, v) in data.iter_mut().zip(&self.nodes[p.0].data) {
                *acc += v;
            }
        }
        let k = parts.len() as f64;
        for v in &mut data {
            *v /= k;
        }
        let rg = self.any_grad(parts);
        Ok(self.push(data, vec![n], rg, Op::MeanStack(parts.to_vec())))
    }

    /// Coordinate-wise median of equal-shape vectors. For an even count the
    /// two middle values are averaged; value ties resolve by operand order.
    pub fn median_stack(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        self.check_stack("median_stack", parts)?;
        let n = self.nodes[parts[0].0].data.len();
        let k = parts.len();
        let mut data = vec![0.0; n];
        let mut picks = Vec::with_capacity(n);
        let mut order: Vec<(f64, u32)> = Vec::with_capacity(k);
        for j in 0..n {
            order.clear();
            for (pi, &p) in parts.iter().enumerate() {
                order.push((self.nodes[p.0].data[j], pi as u32));
            }
            order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            if k % 2 == 1 {
                let (v, pi) = order[k / 2];
                data[j] = v;
                picks.push(MedianPick::One(pi));
            } else {
                let (lo, pi_lo) = order[k / 2 - 1];
                let (hi, pi_hi) = order[k / 2];
                data[j] = 0.5 * (lo + hi);
                picks.push(MedianPick::Two(pi_lo, pi_hi));
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            data,
            vec![n],
            rg,
            Op::MedianStack {
                parts: parts.to_vec(),
                picks,
            },
        ))
    }

    fn check_stack(&self, op: &'static str, parts: &[TensorId]) -> Result<(), TensorError> {
        let first = *parts.first().ok_or(TensorError::EmptyOperands { op })?;
        if self.nodes[first.0].shape.len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("expected vectors, got {:?}", self.nodes[first.0].shape),
            });
        }
        for &p in &parts[1..] {
            if self.nodes[p.0].shape != self.nodes[first.0].shape {
                return Err(TensorError::ShapeMismatch {
                    op,
                    detail: format!(
                        "{:?} vs {:?}",
                        self.nodes[first.0].shape, self.nodes[p.0].shape
                    ),
                });
            }
        }
        Ok(())
    }

    /// Distance between two equal-length vectors as a differentiable scalar.
    pub fn distance(
        &mut self,
        a: TensorId,
        b: TensorId,
        kind: DistanceKind,
    ) -> Result<TensorId, TensorError> {
        self.same_shape("distance", a, b)?;
        if self.nodes[a.0].shape.len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "distance",
                detail: format!("expected vectors, got {:?}", self.nodes[a.0].shape),
            });
        }
        let va = &self.nodes[a.0].data;
        let vb = &self.nodes[b.0].data;
        let value = match kind {
            DistanceKind::Euclidean => va
                .iter()
                .zip(vb)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
            DistanceKind::Manhattan => va.iter().zip(vb).map(|(x, y)| (x - y).abs()).sum(),
            DistanceKind::Cosine => {
                let dot: f64 = va.iter().zip(vb).map(|(x, y)| x * y).sum();
                let na: f64 = va.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb: f64 = vb.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    return Err(TensorError::ZeroVector { op: "cosine" });
                }
                1.0 - dot / (na * nb)
            }
            DistanceKind::Canberra => va
                .iter()
                .zip(vb)
                .map(|(x, y)| {
                    let den = x.abs() + y.abs();
                    if den == 0.0 {
                        0.0
                    } else {
                        (x - y).abs() / den
                    }
                })
                .sum(),
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(vec![value], vec![1], rg, Op::Distance { a, b, kind }))
    }

    // ── Reverse sweep ───────────────────────────────────────────────────

    /// Accumulates gradients of `loss` into every tensor that requires grad.
    /// Leaves off the loss path keep a zero buffer.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.nodes[loss.0].shape != [1] {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        self.grads = self
            .nodes
            .iter()
            .map(|n| {
                if n.requires_grad {
                    Some(vec![0.0; n.data.len()])
                } else {
                    None
                }
            })
            .collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0].as_mut().unwrap()[0] = 1.0;

        for i in (0..=loss.0).rev() {
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &gout);
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    fn add_grad(&mut self, id: TensorId, f: impl FnOnce(&mut [f64])) {
        if let Some(g) = self.grads[id.0].as_mut() {
            f(g);
        }
    }

    fn propagate(&mut self, i: usize, gout: &[f64]) {
        // The node is temporarily detached so operand data and grad buffers
        // can be borrowed without aliasing.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.add_grad(a, |g| {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
                self.add_grad(b, |g| {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.add_grad(a, |g| {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
                self.add_grad(b, |g| {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi -= go;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let da: Vec<f64> = self.nodes[b.0]
                    .data
                    .iter()
                    .zip(gout)
                    .map(|(v, g)| v * g)
                    .collect();
                let db: Vec<f64> = self.nodes[a.0]
                    .data
                    .iter()
                    .zip(gout)
                    .map(|(v, g)| v * g)
                    .collect();
                self.add_grad(a, |g| {
                    for (gi, d) in g.iter_mut().zip(&da) {
                        *gi += d;
                    }
                });
                self.add_grad(b, |g| {
                    for (gi, d) in g.iter_mut().zip(&db) {
                        *gi += d;
                    }
                });
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                self.add_grad(a, |g| {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi += c * go;
                    }
                });
            }
            Op::Abs(a) => {
                let a = *a;
                let d: Vec<f64> = self.nodes[a.0]
                    .data
                    .iter()
                    .zip(gout)
                    .map(|(v, g)| sign(*v) * g)
                    .collect();
                self.add_grad(a, |g| {
                    for (gi, dv) in g.iter_mut().zip(&d) {
                        *gi += dv;
                    }
                });
            }
            Op::Sqrt(a) => {
                let a = *a;
                let d: Vec<f64> = self.nodes[i]
                    .data
                    .iter()
                    .zip(gout)
                    .map(|(y, g)| if *y > 0.0 { g / (2.0 * y) } else { 0.0 })
                    .collect();
                self.add_grad(a, |g| {
                    for (gi, dv) in g.iter_mut().zip(&d) {
                        *gi += dv;
                    }
                });
            }
            Op::Relu(a) => {
                let a = *a;
                let d: Vec<f64> = self.nodes[a.0]
                    .data
                    .iter()
                    .zip(gout)
                    .map(|(v, g)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.add_grad(a, |g| {
                    for (gi, dv) in g.iter_mut().zip(&d) {
                        *gi += dv;
                    }
                });
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let d: Vec<f64> = self.nodes[i]
                    .data
                    .iter()
                    .zip(gout)
                    .map(|(y, g)| y * (1.0 - y) * g)
                    .collect();
                self.add_grad(a, |g| {
                    for (gi, dv) in g.iter_mut().zip(&d) {
                        *gi += dv;
                    }
                });
            }
            Op::Softmax(a) => {
                let a = *a;
                let y = &self.nodes[i].data;
                let dot: f64 = y.iter().zip(gout).map(|(yi, gi)| yi * gi).sum();
                let d: Vec<f64> = y
                    .iter()
                    .zip(gout)
                    .map(|(yi, gi)| yi * (gi - dot))
                    .collect();
                self.add_grad(a, |g| {
                    for (gi, dv) in g.iter_mut().zip(&d) {
                        *gi += dv;
                    }
                });
            }
            Op::Sum(a) => {
                let a = *a;
                let g0 = gout[0];
                self.add_grad(a, |g| {
                    for gi in g.iter_mut() {
                        *gi += g0;
                    }
                });
            }
            Op::Conv2d { input, kernel, pad } => {
                let (input, kernel, pad) = (*input, *kernel, *pad);
                let ishape = self.nodes[input.0].shape.clone();
                let kshape = self.nodes[kernel.0].shape.clone();
                let oshape = self.nodes[i].shape.clone();
                let (h, w, cin) = (ishape[0], ishape[1], ishape[2]);
                let (kh, kw, cout) = (kshape[0], kshape[1], kshape[3]);
                let (oh, ow) = (oshape[0], oshape[1]);
                let want_input = self.grads[input.0].is_some();
                let want_kernel = self.grads[kernel.0].is_some();
                let mut dinput = vec![0.0; if want_input { h * w * cin } else { 0 }];
                let mut dkernel = vec![0.0; if want_kernel { kh * kw * cin * cout } else { 0 }];
                {
                    let inp = &self.nodes[input.0].data;
                    let ker = &self.nodes[kernel.0].data;
                    for orow in 0..oh {
                        for ocol in 0..ow {
                            let gbase = (orow * ow + ocol) * cout;
                            for r in 0..kh {
                                let ih = orow + r;
                                if ih < pad.0 || ih - pad.0 >= h {
                                    continue;
                                }
                                let ih = ih - pad.0;
                                for s in 0..kw {
                                    let iw = ocol + s;
                                    if iw < pad.1 || iw - pad.1 >= w {
                                        continue;
                                    }
                                    let iw = iw - pad.1;
                                    let in_base = (ih * w + iw) * cin;
                                    let k_base = (r * kw + s) * cin * cout;
                                    for ic in 0..cin {
                                        let krow = k_base + ic * cout;
                                        if want_input {
                                            let mut acc = 0.0;
                                            for oc in 0..cout {
                                                acc += gout[gbase + oc] * ker[krow + oc];
                                            }
                                            dinput[in_base + ic] += acc;
                                        }
                                        if want_kernel {
                                            let v = inp[in_base + ic];
                                            if v != 0.0 {
                                                for oc in 0..cout {
                                                    dkernel[krow + oc] += v * gout[gbase + oc];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if want_input {
                    self.add_grad(input, |g| {
                        for (gi, dv) in g.iter_mut().zip(&dinput) {
                            *gi += dv;
                        }
                    });
                }
                if want_kernel {
                    self.add_grad(kernel, |g| {
                        for (gi, dv) in g.iter_mut().zip(&dkernel) {
                            *gi += dv;
                        }
                    });
                }
            }
            Op::AddChannelBias { map, bias } => {
                let (map, bias) = (*map, *bias);
                let c = self.nodes[bias.0].data.len();
                self.add_grad(map, |g| {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
                self.add_grad(bias, |g| {
                    for (idx, go) in gout.iter().enumerate() {
                        g[idx % c] += go;
                    }
                });
            }
            Op::MaxPool2x2 { input, switches } => {
                let input = *input;
                let routes: Vec<(u32, f64)> = switches
                    .iter()
                    .zip(gout)
                    .map(|(&s, &g)| (s, g))
                    .collect();
                self.add_grad(input, |g| {
                    for (s, gv) in routes {
                        g[s as usize] += gv;
                    }
                });
            }
            Op::Gap(a) => {
                let a = *a;
                let shape = self.nodes[a.0].shape.clone();
                let (h, w, c) = (shape[0], shape[1], shape[2]);
                let inv = 1.0 / (h * w) as f64;
                self.add_grad(a, |g| {
                    for hw in 0..h * w {
                        for ch in 0..c {
                            g[hw * c + ch] += gout[ch] * inv;
                        }
                    }
                });
            }
            Op::Dense {
                input,
                weights,
                bias,
            } => {
                let (input, weights, bias) = (*input, *weights, *bias);
                let n = self.nodes[input.0].data.len();
                let m = self.nodes[bias.0].data.len();
                let want_input = self.grads[input.0].is_some();
                let want_weights = self.grads[weights.0].is_some();
                let mut dinput = vec![0.0; if want_input { n } else { 0 }];
                let mut dweights = vec![0.0; if want_weights { n * m } else { 0 }];
                {
                    let inp = &self.nodes[input.0].data;
                    let ws = &self.nodes[weights.0].data;
                    for idx in 0..n {
                        if want_input {
                            let mut acc = 0.0;
                            for j in 0..m {
                                acc += gout[j] * ws[idx * m + j];
                            }
                            dinput[idx] = acc;
                        }
                        if want_weights {
                            let v = inp[idx];
                            if v != 0.0 {
                                for j in 0..m {
                                    dweights[idx * m + j] = v * gout[j];
                                }
                            }
                        }
                    }
                }
                if want_input {
                    self.add_grad(input, |g| {
                        for (gi, dv) in g.iter_mut().zip(&dinput) {
                            *gi += dv;
                        }
                    });
                }
                if want_weights {
                    self.add_grad(weights, |g| {
                        for (gi, dv) in g.iter_mut().zip(&dweights) {
                            *gi += dv;
                        }
                    });
                }
                self.add_grad(bias, |g| {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                });
            }
            Op::ConcatChannels(a, b) => {
                let (a, b) = (*a, *b);
                let sa = self.nodes[a.0].shape.clone();
                let sb = self.nodes[b.0].shape.clone();
                let (ca, cb) = (sa[2], sb[2]);
                let hw = sa[0] * sa[1];
                self.add_grad(a, |g| {
                    for i2 in 0..hw {
                        for ch in 0..ca {
                            g[i2 * ca + ch] += gout[i2 * (ca + cb) + ch];
                        }
                    }
                });
                self.add_grad(b, |g| {
                    for i2 in 0..hw {
                        for ch in 0..cb {
                            g[i2 * cb + ch] += gout[i2 * (ca + cb) + ca + ch];
                        }
                    }
                });
            }
            Op::ConcatVec(a, b) => {
                let (a, b) = (*a, *b);
                let na = self.nodes[a.0].data.len();
                self.add_grad(a, |g| {
                    for (gi, go) in g.iter_mut().zip(&gout[..na]) {
                        *gi += go;
                    }
                });
                self.add_grad(b, |g| {
                    for (gi, go) in g.iter_mut().zip(&gout[na..]) {
                        *gi += go;
                    }
                });
            }
            Op::MulGate { map, gate } => {
                let (map, gate) = (*map, *gate);
                let c = self.nodes[map.0].shape[2];
                let dmap: Vec<f64> = gout
                    .iter()
                    .enumerate()
                    .map(|(idx, g)| g * self.nodes[gate.0].data[idx / c])
                    .collect();
                let mut dgate = vec![0.0; self.nodes[gate.0].data.len()];
                for (idx, g) in gout.iter().enumerate() {
                    dgate[idx / c] += g * self.nodes[map.0].data[idx];
                }
                self.add_grad(map, |g| {
                    for (gi, dv) in g.iter_mut().zip(&dmap) {
                        *gi += dv;
                    }
                });
                self.add_grad(gate, |g| {
                    for (gi, dv) in g.iter_mut().zip(&dgate) {
                        *gi += dv;
                    }
                });
            }
            Op::CceLoss { pred, target } => {
                let (pred, target) = (*pred, *target);
                let g0 = gout[0];
                let d: Vec<f64> = self.nodes[pred.0]
                    .data
                    .iter()
                    .zip(&self.nodes[target.0].data)
                    .map(|(&p, &t)| {
                        if p > CCE_LOG_FLOOR {
                            -t / p * g0
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.add_grad(pred, |g| {
                    for (gi, dv) in g.iter_mut().zip(&d) {
                        *gi += dv;
                    }
                });
            }
            Op::StackScalars(parts) => {
                let parts = parts.clone();
                for (idx, p) in parts.into_iter().enumerate() {
                    let gv = gout[idx];
                    self.add_grad(p, |g| g[0] += gv);
                }
            }
            Op::MeanStack(parts) => {
                let parts = parts.clone();
                let inv = 1.0 / parts.len() as f64;
                for p in parts {
                    self.add_grad(p, |g| {
                        for (gi, go) in g.iter_mut().zip(gout) {
                            *gi += go * inv;
                        }
                    });
                }
            }
            Op::MedianStack { parts, picks } => {
                let parts = parts.clone();
                let picks = picks.clone();
                for (j, pick) in picks.into_iter().enumerate() {
                    let gv = gout[j];
                    match pick {
                        MedianPick::One(pi) => {
                            self.add_grad(parts[pi as usize], |g| g[j] += gv);
                        }
                        MedianPick::Two(lo, hi) => {
                            self.add_grad(parts[lo as usize], |g| g[j] += 0.5 * gv);
                            self.add_grad(parts[hi as usize], |g| g[j] += 0.5 * gv);
                        }
                    }
                }
            }
            Op::Distance { a, b, kind } => {
                let (a, b, kind) = (*a, *b, *kind);
                let g0 = gout[0];
                let va = &self.nodes[a.0].data;
                let vb = &self.nodes[b.0].data;
                let n = va.len();
                let mut da = vec![0.0; n];
                let mut db = vec![0.0; n];
                match kind {
                    DistanceKind::Euclidean => {
                        let dist = self.nodes[i].data[0];
                        if dist > 0.0 {
                            for j in 0..n {
                                let d = (va[j] - vb[j]) / dist;
                                da[j] = g0 * d;
                                db[j] = -g0 * d;
                            }
                        }
                    }
                    DistanceKind::Manhattan => {
                        for j in 0..n {
                            let s = sign(va[j] - vb[j]);
                            da[j] = g0 * s;
                            db[j] = -g0 * s;
                        }
                    }
                    DistanceKind::Cosine => {
                        let dot: f64 = va.iter().zip(vb).map(|(x, y)| x * y).sum();
                        let na: f64 = va.iter().map(|x| x * x).sum::<f64>().sqrt();
                        let nb: f64 = vb.iter().map(|x| x * x).sum::<f64>().sqrt();
                        for j in 0..n {
                            da[j] = g0 * (dot * va[j] / (na * na * na * nb) - vb[j] / (na * nb));
                            db[j] = g0 * (dot * vb[j] / (nb * nb * nb * na) - va[j] / (na * nb));
                        }
                    }
                    DistanceKind::Canberra => {
                        for j in 0..n {
                            let den = va[j].abs() + vb[j].abs();
                            if den == 0.0 {
                                continue;
                            }
                            let diff = va[j] - vb[j];
                            let num = diff.abs();
                            da[j] = g0 * (sign(diff) * den - num * sign(va[j])) / (den * den);
                            db[j] = g0 * (-sign(diff) * den - num * sign(vb[j])) / (den * den);
                        }
                    }
                }
                self.add_grad(a, |g| {
                    for (gi, dv) in g.iter_mut().zip(&da) {
                        *gi += dv;
                    }
                });
                self.add_grad(b, |g| {
                    for (gi, dv) in g.iter_mut().zip(&db) {
                        *gi += dv;
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn conv_identity_kernel() {
        let mut t = Tape::new();
        let x = t
            .leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![2, 3, 1], false)
            .unwrap();
        let k = t.leaf(vec![1.0], vec![1, 1, 1, 1], false).unwrap();
        let y = t.conv2d(x, k, Padding::Same).unwrap();
        assert_eq!(t.data(y), t.data(x));
    }

    #[test]
    fn conv_column_3x1_valid() {
        let mut t = Tape::new();
        let x = t
            .leaf(vec![1.0, 2.0, 3.0, 4.0], vec![4, 1, 1], false)
            .unwrap();
        let k = t
            .leaf(vec![1.0, 1.0, 1.0], vec![3, 1, 1, 1], false)
            .unwrap();
        let y = t.conv2d(x, k, Padding::Valid).unwrap();
        assert_eq!(t.shape(y), &[2, 1, 1]);
        assert_eq!(t.data(y), &[6.0, 9.0]);
    }

    #[test]
    fn conv_zero_kernel_annihilates_and_zeroes_grads() {
        let mut t = Tape::new();
        let x = t
            .leaf(vec![1.0, -2.0, 3.0, 4.0], vec![2, 2, 1], true)
            .unwrap();
        let k = t.leaf(vec![0.0; 9], vec![3, 3, 1, 1], false).unwrap();
        let y = t.conv2d(x, k, Padding::Same).unwrap();
        assert!(t.data(y).iter().all(|&v| v == 0.0));
        let loss = t.sum(y);
        t.backward(loss).unwrap();
        assert!(t.grad(x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_channel_mismatch_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(vec![0.0; 12], vec![2, 3, 2], false).unwrap();
        let k = t.leaf(vec![0.0; 3], vec![1, 1, 3, 1], false).unwrap();
        assert!(matches!(
            t.conv2d(x, k, Padding::Same),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn gap_examples() {
        let mut t = Tape::new();
        let c = t.leaf(vec![3.0; 12], vec![3, 4, 1], false).unwrap();
        assert_eq!(t.data(t.gap(c).unwrap()), &[3.0]);

        let m = t
            .leaf(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2, 1], false)
            .unwrap();
        assert_eq!(t.data(t.gap(m).unwrap()), &[2.5]);

        // channel independence: one all-zero channel stays zero
        let two = t
            .leaf(vec![5.0, 0.0, 7.0, 0.0], vec![1, 2, 2], false)
            .unwrap();
        assert_eq!(t.data(t.gap(two).unwrap()), &[6.0, 0.0]);
    }

    #[test]
    fn gap_backward_distributes_uniformly() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0; 6], vec![2, 3, 1], true).unwrap();
        let g = t.gap(x).unwrap();
        let loss = t.sum(g);
        t.backward(loss).unwrap();
        for &v in t.grad(x).unwrap() {
            assert_close(v, 1.0 / 6.0, 1e-15);
        }
    }

    #[test]
    fn dense_examples() {
        let mut t = Tape::new();
        let x = t.vector(vec![1.0, 2.0], false);
        let eye = t.leaf(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2], false).unwrap();
        let zero_b = t.vector(vec![0.0, 0.0], false);
        let y = t.dense(x, eye, zero_b).unwrap();
        assert_eq!(t.data(y), &[1.0, 2.0]);

        let zero_w = t.leaf(vec![0.0; 4], vec![2, 2], false).unwrap();
        let b = t.vector(vec![5.0, -1.0], false);
        let y = t.dense(x, zero_w, b).unwrap();
        assert_eq!(t.data(y), &[5.0, -1.0]);

        let w = t.leaf(vec![1.0, 0.0, 0.0, 2.0], vec![2, 2], false).unwrap();
        let b = t.vector(vec![0.0, 1.0], false);
        let y = t.dense(x, w, b).unwrap();
        assert_eq!(t.data(y), &[1.0, 5.0]);

        let bad = t.vector(vec![1.0, 2.0, 3.0], false);
        assert!(t.dense(bad, w, b).is_err());
    }

    #[test]
    fn activation_examples() {
        let mut t = Tape::new();
        let x = t.vector(vec![-1.0, 0.0, 2.0], false);
        assert_eq!(t.data(t.relu(x)), &[0.0, 0.0, 2.0]);

        let z = t.vector(vec![0.0], false);
        assert_eq!(t.data(t.sigmoid(z)), &[0.5]);

        for c in [-3.0, 0.0, 7.5] {
            let v = t.vector(vec![c; 3], false);
            let s = t.softmax(v).unwrap();
            for &p in t.data(s) {
                assert_close(p, 1.0 / 3.0, 1e-12);
            }
        }
    }

    #[test]
    fn softmax_normalises_and_is_open_interval() {
        let mut t = Tape::new();
        let v = t.vector(vec![1e3, -1e3, 0.0, 55.5], false);
        let s = t.softmax(v).unwrap();
        let total: f64 = t.data(s).iter().sum();
        assert_close(total, 1.0, 1e-9);
        for &p in t.data(s) {
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn cce_examples() {
        let mut t = Tape::new();
        let p = t.vector(vec![1.0, 0.0, 0.0], false);
        let y = t.vector(vec![1.0, 0.0, 0.0], false);
        assert!(t.scalar(t.cce_loss(p, y).unwrap()) <= 1e-7);

        let third = 1.0 / 3.0;
        let p = t.vector(vec![third; 3], false);
        let y = t.vector(vec![0.0, 1.0, 0.0], false);
        assert_close(t.scalar(t.cce_loss(p, y).unwrap()), 3f64.ln(), 1e-12);

        let p = t.vector(vec![0.5, 0.25, 0.25], false);
        let y = t.vector(vec![1.0, 0.0, 0.0], false);
        assert_close(t.scalar(t.cce_loss(p, y).unwrap()), 2f64.ln(), 1e-12);

        let short = t.vector(vec![1.0], false);
        assert!(t.cce_loss(short, y).is_err());
    }

    #[test]
    fn backward_square_and_sigmoid() {
        let mut t = Tape::new();
        let x = t.vector(vec![3.0], true);
        let sq = t.mul(x, x).unwrap();
        t.backward(sq).unwrap();
        assert_close(t.grad(x).unwrap()[0], 6.0, 1e-12);

        let mut t = Tape::new();
        let x = t.vector(vec![0.0], true);
        let s = t.sigmoid(x);
        t.backward(s).unwrap();
        assert_close(t.grad(x).unwrap()[0], 0.25, 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar_and_zeroes_off_path() {
        let mut t = Tape::new();
        let x = t.vector(vec![1.0, 2.0], true);
        let y = t.relu(x);
        assert!(matches!(
            t.backward(y),
            Err(TensorError::NonScalarLoss { .. })
        ));

        let mut t = Tape::new();
        let x = t.vector(vec![2.0], true);
        let unused = t.vector(vec![7.0], true);
        let loss = t.mul(x, x).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(unused).unwrap(), &[0.0]);
    }

    #[test]
    fn maxpool_forward_and_routing() {
        let mut t = Tape::new();
        let x = t
            .leaf(
                vec![1.0, 5.0, 2.0, 3.0, 4.0, 0.0, 1.0, 1.0, 9.0],
                vec![3, 3, 1],
                true,
            )
            .unwrap();
        let y = t.max_pool_2x2(x).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 1]);
        assert_eq!(t.data(y), &[5.0]);
        let loss = t.sum(y);
        t.backward(loss).unwrap();
        let g = t.grad(x).unwrap();
        assert_eq!(g[1], 1.0);
        assert_eq!(g.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn distance_examples() {
        let mut t = Tape::new();
        let a = t.vector(vec![0.0, 0.0], false);
        let b = t.vector(vec![3.0, 4.0], false);
        assert_close(
            t.scalar(t.distance(a, b, DistanceKind::Euclidean).unwrap()),
            5.0,
            1e-12,
        );

        let x = t.vector(vec![1.5, -2.0, 0.25], false);
        assert_eq!(
            t.scalar(t.distance(x, x, DistanceKind::Manhattan).unwrap()),
            0.0
        );

        let a = t.vector(vec![1.0, 2.0], false);
        let b = t.vector(vec![3.0, 2.0], false);
        assert_close(
            t.scalar(t.distance(a, b, DistanceKind::Canberra).unwrap()),
            0.5,
            1e-12,
        );

        let zero = t.vector(vec![0.0, 0.0], false);
        let one = t.vector(vec![1.0, 0.0], false);
        assert!(matches!(
            t.distance(zero, one, DistanceKind::Cosine),
            Err(TensorError::ZeroVector { .. })
        ));
    }

    #[test]
    fn stack_ops() {
        let mut t = Tape::new();
        let a = t.vector(vec![1.0, 2.0], true);
        let b = t.vector(vec![3.0, 4.0], true);
        let m = t.mean_stack(&[a, b]).unwrap();
        assert_eq!(t.data(m), &[2.0, 3.0]);

        let c = t.vector(vec![10.0, 0.0], false);
        let d = t.vector(vec![2.0, 0.0], false);
        let e = t.vector(vec![1.0, 0.0], false);
        let med = t.median_stack(&[c, d, e]).unwrap();
        assert_eq!(t.data(med), &[2.0, 0.0]);

        // even count: average of the two middle values
        let f = t.vector(vec![4.0, 0.0], false);
        let med4 = t.median_stack(&[c, d, e, f]).unwrap();
        assert_eq!(t.data(med4), &[3.0, 0.0]);

        let s1 = t.constant(1.5);
        let s2 = t.constant(-0.5);
        let stacked = t.stack_scalars(&[s1, s2]).unwrap();
        assert_eq!(t.data(stacked), &[1.5, -0.5]);
    }

    #[test]
    fn median_even_count_splits_gradient() {
        let mut t = Tape::new();
        let a = t.vector(vec![1.0], true);
        let b = t.vector(vec![2.0], true);
        let c = t.vector(vec![3.0], true);
        let d = t.vector(vec![4.0], true);
        let med = t.median_stack(&[a, b, c, d]).unwrap();
        let loss = t.sum(med);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[0.0]);
        assert_eq!(t.grad(b).unwrap(), &[0.5]);
        assert_eq!(t.grad(c).unwrap(), &[0.5]);
        assert_eq!(t.grad(d).unwrap(), &[0.0]);
    }
}
