//! Same-resolution convolutional segmentation network with dropout,
//! reverse-mode gradients, and plain SGD.
//!
//! The backbone is a stack of zero-padded stride-1 layers; each client
//! owns a 1x1-conv head producing one channel per annotated label plus
//! background. All stochastic behaviour is driven by an explicit
//! [`RngState`], so a (params, input, rng, mode) tuple fully determines
//! the output.

use crate::error::{Error, Result};
use crate::registry::ClientId;
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::{LabelMap, Tensor};
use rand::Rng;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv3x3,
    Relu,
    Dropout,
    Conv1x1,
}

/// One backbone layer. `dropout_p` is meaningful only for dropout layers;
/// relu and dropout carry equal in/out channel counts.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub dropout_p: f64,
}

impl LayerSpec {
    pub fn conv3x3(in_channels: usize, out_channels: usize) -> Self {
        LayerSpec { kind: LayerKind::Conv3x3, in_channels, out_channels, dropout_p: 0.0 }
    }

    pub fn conv1x1(in_channels: usize, out_channels: usize) -> Self {
        LayerSpec { kind: LayerKind::Conv1x1, in_channels, out_channels, dropout_p: 0.0 }
    }

    pub fn relu(channels: usize) -> Self {
        LayerSpec { kind: LayerKind::Relu, in_channels: channels, out_channels: channels, dropout_p: 0.0 }
    }

    pub fn dropout(channels: usize, p: f64) -> Self {
        LayerSpec { kind: LayerKind::Dropout, in_channels: channels, out_channels: channels, dropout_p: p }
    }

    pub fn has_params(&self) -> bool {
        matches!(self.kind, LayerKind::Conv3x3 | LayerKind::Conv1x1)
    }

    fn kernel_dims(&self) -> Option<Vec<usize>> {
        match self.kind {
            LayerKind::Conv3x3 => Some(vec![self.out_channels, self.in_channels, 3, 3]),
            LayerKind::Conv1x1 => Some(vec![self.out_channels, self.in_channels, 1, 1]),
            _ => None,
        }
    }
}

/// Validates that channel counts chain correctly through a layer stack.
pub fn validate_chain(layers: &[LayerSpec], input_channels: usize) -> Result<usize> {
    let mut c = input_channels;
    for (i, l) in layers.iter().enumerate() {
        if l.in_channels != c {
            return Err(Error::ShapeMismatch(format!(
                "layer {i} ({:?}) expects {} input channels, got {c}",
                l.kind, l.in_channels
            )));
        }
        if matches!(l.kind, LayerKind::Relu | LayerKind::Dropout) && l.out_channels != l.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "layer {i} ({:?}) must preserve channel count",
                l.kind
            )));
        }
        if l.kind == LayerKind::Dropout && !(0.0..1.0).contains(&l.dropout_p) {
            return Err(Error::InvalidArgument(format!(
                "dropout_p {} outside [0,1)",
                l.dropout_p
            )));
        }
        c = l.out_channels;
    }
    Ok(c)
}

/// The default backbone: three 3x3 convolutions with relu, dropout after
/// each hidden activation, 32 output feature channels.
pub fn default_backbone(dropout_p: f64) -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv3x3(1, 16),
        LayerSpec::relu(16),
        LayerSpec::dropout(16, dropout_p),
        LayerSpec::conv3x3(16, 32),
        LayerSpec::relu(32),
        LayerSpec::dropout(32, dropout_p),
        LayerSpec::conv3x3(32, 32),
        LayerSpec::relu(32),
    ]
}

/// Parameters (if any) of one backbone layer, paired with its spec.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<S: Scalar> {
    pub spec: LayerSpec,
    pub kernel: Option<Tensor<S>>,
    pub bias: Option<Tensor<S>>,
}

/// A client head: 1x1 convolution from backbone features to
/// 1 + |client labels| channels (channel 0 is background).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<S: Scalar> {
    pub kernel: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> HeadParams<S> {
    pub fn out_channels(&self) -> usize {
        self.kernel.dims()[0]
    }
}

/// Shared backbone parameters plus one head per client. Heads are local
/// state: the federation averages backbones only.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S: Scalar> {
    pub backbone: Vec<LayerParams<S>>,
    pub heads: BTreeMap<ClientId, HeadParams<S>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    McTest,
    Deterministic,
}

impl Mode {
    fn dropout_active(self) -> bool {
        matches!(self, Mode::Train | Mode::McTest)
    }
}

fn uniform_kernel<S: Scalar>(dims: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<S> {
    let a = (1.0 / fan_in as f64).sqrt();
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| S::of(rng.gen_range(-a..a))).collect();
    Tensor::from_vec(dims, data).expect("consistent dims")
}

impl<S: Scalar> ModelParams<S> {
    /// Initializes a full model: kernels uniform in [-a, a] with
    /// a = sqrt(1 / fan_in), biases zero. Deterministic in `rng`.
    pub fn init(
        backbone: &[LayerSpec],
        head_channels: &BTreeMap<ClientId, usize>,
        rng: RngState,
    ) -> Result<Self> {
        let feat = validate_chain(backbone, 1)?;
        let mut layers = Vec::with_capacity(backbone.len());
        for (i, spec) in backbone.iter().enumerate() {
            let (kernel, bias) = match spec.kernel_dims() {
                Some(dims) => {
                    let fan_in = spec.in_channels * dims[2] * dims[3];
                    let mut r = rng.derive(i as u64).rng();
                    (
                        Some(uniform_kernel(&dims, fan_in, &mut r)),
                        Some(Tensor::zeros(&[spec.out_channels])),
                    )
                }
                None => (None, None),
            };
            layers.push(LayerParams { spec: spec.clone(), kernel, bias });
        }
        let mut heads = BTreeMap::new();
        for (idx, (cid, &channels)) in head_channels.iter().enumerate() {
            if channels < 2 {
                return Err(Error::InvalidArgument(format!(
                    "head '{cid}' needs at least background plus one label"
                )));
            }
            let mut r = rng.derive(1000 + idx as u64).rng();
            heads.insert(
                cid.clone(),
                HeadParams {
                    kernel: uniform_kernel(&[channels, feat, 1, 1], feat, &mut r),
                    bias: Tensor::zeros(&[channels]),
                },
            );
        }
        Ok(ModelParams { backbone: layers, heads })
    }

    pub fn head(&self, id: &ClientId) -> Result<&HeadParams<S>> {
        self.heads.get(id).ok_or_else(|| Error::UnknownHead(id.to_string()))
    }

    pub fn backbone_feature_channels(&self) -> Result<usize> {
        let specs: Vec<LayerSpec> = self.backbone.iter().map(|l| l.spec.clone()).collect();
        validate_chain(&specs, 1)
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams {
            backbone: self
                .backbone
                .iter()
                .map(|l| LayerParams {
                    spec: l.spec.clone(),
                    kernel: l.kernel.as_ref().map(|k| k.cast()),
                    bias: l.bias.as_ref().map(|b| b.cast()),
                })
                .collect(),
            heads: self
                .heads
                .iter()
                .map(|(c, h)| (c.clone(), HeadParams { kernel: h.kernel.cast(), bias: h.bias.cast() }))
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Convolution kernels (direct, zero-padded, stride 1)
// ---------------------------------------------------------------------------

/// out_row += k0 * in_row shifted left + k1 * in_row + k2 * in_row shifted right,
/// with zero padding at both ends.
fn row_conv3<S: Scalar>(out_row: &mut [S], in_row: &[S], k0: S, k1: S, k2: S) {
    let w = out_row.len();
    if w == 1 {
        out_row[0] = out_row[0] + k1 * in_row[0];
        return;
    }
    out_row[0] = out_row[0] + k1 * in_row[0] + k2 * in_row[1];
    let (mid, a, b, c) = (
        &mut out_row[1..w - 1],
        &in_row[0..w - 2],
        &in_row[1..w - 1],
        &in_row[2..w],
    );
    for (((o, &a), &b), &c) in mid.iter_mut().zip(a).zip(b).zip(c) {
        *o = *o + k0 * a + k1 * b + k2 * c;
    }
    out_row[w - 1] = out_row[w - 1] + k0 * in_row[w - 2] + k1 * in_row[w - 1];
}

const LANES: usize = 8;

/// Lane-parallel dot product with a fixed reduction order (8 strided
/// partial sums, then a left-to-right fold), so results do not depend
/// on the schedule while the inner loop vectorizes.
fn lane_dot<S: Scalar>(x: &[S], y: &[S]) -> S {
    let mut acc = [S::zero(); LANES];
    let mut xc = x.chunks_exact(LANES);
    let mut yc = y.chunks_exact(LANES);
    for (xa, ya) in (&mut xc).zip(&mut yc) {
        let xa: &[S; LANES] = xa.try_into().expect("exact chunk");
        let ya: &[S; LANES] = ya.try_into().expect("exact chunk");
        for l in 0..LANES {
            acc[l] = acc[l] + xa[l] * ya[l];
        }
    }
    let mut d = S::zero();
    for l in 0..LANES {
        d = d + acc[l];
    }
    for (&a, &b) in xc.remainder().iter().zip(yc.remainder()) {
        d = d + a * b;
    }
    d
}

/// Three shifted dot products of g_row against in_row (zero padded),
/// sharing one pass: returns sums of g[x]*in[x-1], g[x]*in[x], g[x]*in[x+1].
fn row_dot3<S: Scalar>(g_row: &[S], in_row: &[S]) -> (S, S, S) {
    let w = g_row.len();
    if w == 1 {
        return (S::zero(), g_row[0] * in_row[0], S::zero());
    }
    let g_mid = &g_row[1..w - 1];
    let a = &in_row[0..w - 2];
    let b = &in_row[1..w - 1];
    let c = &in_row[2..w];

    let mut acc0 = [S::zero(); LANES];
    let mut acc1 = [S::zero(); LANES];
    let mut acc2 = [S::zero(); LANES];
    let mut gc = g_mid.chunks_exact(LANES);
    let mut ac = a.chunks_exact(LANES);
    let mut bc = b.chunks_exact(LANES);
    let mut cc = c.chunks_exact(LANES);
    loop {
        let (Some(gs), Some(as_), Some(bs), Some(cs)) = (gc.next(), ac.next(), bc.next(), cc.next())
        else {
            break;
        };
        let gs: &[S; LANES] = gs.try_into().expect("exact chunk");
        let as_: &[S; LANES] = as_.try_into().expect("exact chunk");
        let bs: &[S; LANES] = bs.try_into().expect("exact chunk");
        let cs: &[S; LANES] = cs.try_into().expect("exact chunk");
        for l in 0..LANES {
            let g = gs[l];
            acc0[l] = acc0[l] + g * as_[l];
            acc1[l] = acc1[l] + g * bs[l];
            acc2[l] = acc2[l] + g * cs[l];
        }
    }
    let mut d0 = S::zero();
    let mut d1 = S::zero();
    let mut d2 = S::zero();
    for l in 0..LANES {
        d0 = d0 + acc0[l];
        d1 = d1 + acc1[l];
        d2 = d2 + acc2[l];
    }
    for (((&g, &a), &b), &c) in gc
        .remainder()
        .iter()
        .zip(ac.remainder())
        .zip(bc.remainder())
        .zip(cc.remainder())
    {
        d0 = d0 + g * a;
        d1 = d1 + g * b;
        d2 = d2 + g * c;
    }
    d1 = d1 + g_row[0] * in_row[0];
    d2 = d2 + g_row[0] * in_row[1];
    let g = g_row[w - 1];
    d0 = d0 + g * in_row[w - 2];
    d1 = d1 + g * in_row[w - 1];
    (d0, d1, d2)
}

/// Accumulates a full 3x3 convolution of `input` into `out` using the
/// 9 kernel values `k` for one (out-channel, in-channel) pair.
fn conv3x3_plane_accum<S: Scalar>(out_plane: &mut [S], in_plane: &[S], k: &[S], h: usize, w: usize) {
    for y in 0..h {
        let out_row = &mut out_plane[y * w..(y + 1) * w];
        for ky in 0..3usize {
            let iy = (y + ky) as isize - 1;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            let in_row = &in_plane[iy as usize * w..(iy as usize + 1) * w];
            row_conv3(out_row, in_row, k[ky * 3], k[ky * 3 + 1], k[ky * 3 + 2]);
        }
    }
}

fn conv3x3_forward<S: Scalar>(input: &Tensor<S>, kernel: &Tensor<S>, bias: &Tensor<S>) -> Tensor<S> {
    let (ci, h, w) = (input.dims()[0], input.dims()[1], input.dims()[2]);
    let co = kernel.dims()[0];
    let mut out = Tensor::zeros(&[co, h, w]);
    for o in 0..co {
        let b = bias.data()[o];
        out.plane_mut(o).fill(b);
        for i in 0..ci {
            let kbase = (o * ci + i) * 9;
            let k = &kernel.data()[kbase..kbase + 9];
            let k = k.to_vec();
            conv3x3_plane_accum(out.plane_mut(o), input.plane(i), &k, h, w);
        }
    }
    out
}

/// Gradient w.r.t. the convolution input: correlate the output gradient
/// with the spatially flipped, channel-transposed kernel.
fn conv3x3_backward_input<S: Scalar>(grad_out: &Tensor<S>, kernel: &Tensor<S>) -> Tensor<S> {
    let (co, h, w) = (grad_out.dims()[0], grad_out.dims()[1], grad_out.dims()[2]);
    let ci = kernel.dims()[1];
    let mut grad_in = Tensor::zeros(&[ci, h, w]);
    for i in 0..ci {
        for o in 0..co {
            let kbase = (o * ci + i) * 9;
            let k = &kernel.data()[kbase..kbase + 9];
            let flipped = [k[8], k[7], k[6], k[5], k[4], k[3], k[2], k[1], k[0]];
            conv3x3_plane_accum(grad_in.plane_mut(i), grad_out.plane(o), &flipped, h, w);
        }
    }
    grad_in
}

fn conv3x3_backward_params<S: Scalar>(
    grad_out: &Tensor<S>,
    input: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>) {
    let (co, h, w) = (grad_out.dims()[0], grad_out.dims()[1], grad_out.dims()[2]);
    let ci = input.dims()[0];
    let mut grad_k = Tensor::zeros(&[co, ci, 3, 3]);
    let mut grad_b = Tensor::zeros(&[co]);
    for o in 0..co {
        let g_plane = grad_out.plane(o);
        grad_b.data_mut()[o] = g_plane.iter().copied().sum();
        for i in 0..ci {
            let in_plane = input.plane(i);
            let mut acc = [S::zero(); 9];
            for y in 0..h {
                let g_row = &g_plane[y * w..(y + 1) * w];
                for ky in 0..3usize {
                    let iy = (y + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_row = &in_plane[iy as usize * w..(iy as usize + 1) * w];
                    let (d0, d1, d2) = row_dot3(g_row, in_row);
                    acc[ky * 3] = acc[ky * 3] + d0;
                    acc[ky * 3 + 1] = acc[ky * 3 + 1] + d1;
                    acc[ky * 3 + 2] = acc[ky * 3 + 2] + d2;
                }
            }
            let kbase = (o * ci + i) * 9;
            grad_k.data_mut()[kbase..kbase + 9].copy_from_slice(&acc);
        }
    }
    (grad_k, grad_b)
}

fn conv1x1_forward<S: Scalar>(input: &Tensor<S>, kernel: &Tensor<S>, bias: &Tensor<S>) -> Tensor<S> {
    let (ci, h, w) = (input.dims()[0], input.dims()[1], input.dims()[2]);
    let co = kernel.dims()[0];
    let mut out = Tensor::zeros(&[co, h, w]);
    for o in 0..co {
        let b = bias.data()[o];
        out.plane_mut(o).fill(b);
        for i in 0..ci {
            let kv = kernel.data()[o * ci + i];
            let in_plane = input.plane(i);
            let out_plane = out.plane_mut(o);
            for (ov, &iv) in out_plane.iter_mut().zip(in_plane) {
                *ov = *ov + kv * iv;
            }
        }
    }
    out
}

fn conv1x1_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    input: &Tensor<S>,
    kernel: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let (co, h, w) = (grad_out.dims()[0], grad_out.dims()[1], grad_out.dims()[2]);
    let ci = input.dims()[0];
    let mut grad_k = Tensor::zeros(&[co, ci, 1, 1]);
    let mut grad_b = Tensor::zeros(&[co]);
    let mut grad_in = Tensor::zeros(&[ci, h, w]);
    for o in 0..co {
        let g_plane = grad_out.plane(o);
        grad_b.data_mut()[o] = g_plane.iter().copied().sum();
        for i in 0..ci {
            let in_plane = input.plane(i);
            grad_k.data_mut()[o * ci + i] = lane_dot(g_plane, in_plane);
            let kv = kernel.data()[o * ci + i];
            let gi = grad_in.plane_mut(i);
            for (dst, &g) in gi.iter_mut().zip(g_plane) {
                *dst = *dst + kv * g;
            }
        }
    }
    (grad_k, grad_b, grad_in)
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

/// Inverted dropout: when active, each element is independently zeroed
/// with probability `p` and survivors are scaled by 1/(1-p); inactive is
/// the identity. Errors when p is outside [0, 1).
pub fn dropout_apply<S: Scalar>(x: &Tensor<S>, p: f64, rng: RngState, active: bool) -> Result<Tensor<S>> {
    let mask = dropout_mask(x.len(), p, rng, active)?;
    let mut out = x.clone();
    apply_mask(&mut out, &mask);
    Ok(out)
}

/// Multiplicative factors (0 or 1/(1-p)) for one dropout application.
fn dropout_mask<S: Scalar>(len: usize, p: f64, rng: RngState, active: bool) -> Result<Vec<S>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("dropout probability {p} outside [0,1)")));
    }
    if !active || p == 0.0 {
        return Ok(vec![S::one(); len]);
    }
    let keep_scale = S::of(1.0 / (1.0 - p));
    let mut r = rng.rng();
    Ok((0..len)
        .map(|_| if r.gen::<f64>() < p { S::zero() } else { keep_scale })
        .collect())
}

fn apply_mask<S: Scalar>(x: &mut Tensor<S>, mask: &[S]) {
    for (v, &m) in x.data_mut().iter_mut().zip(mask) {
        *v = *v * m;
    }
}

// ---------------------------------------------------------------------------
// Softmax and cross entropy
// ---------------------------------------------------------------------------

/// Per-pixel softmax over the channel axis, stabilized by max subtraction.
pub fn softmax_channels<S: Scalar>(logits: &Tensor<S>) -> Tensor<S> {
    let (c, h, w) = (logits.dims()[0], logits.dims()[1], logits.dims()[2]);
    let hw = h * w;
    let mut out = Tensor::zeros(&[c, h, w]);
    let data = logits.data();
    for p in 0..hw {
        let mut m = data[p];
        for ch in 1..c {
            let v = data[ch * hw + p];
            if v > m {
                m = v;
            }
        }
        let mut sum = S::zero();
        for ch in 0..c {
            let e = (data[ch * hw + p] - m).exp();
            out.data_mut()[ch * hw + p] = e;
            sum = sum + e;
        }
        for ch in 0..c {
            let slot = &mut out.data_mut()[ch * hw + p];
            *slot = *slot / sum;
        }
    }
    out
}

/// Mean over pixels of the negative log probability of the target channel.
pub fn cross_entropy<S: Scalar>(probs: &Tensor<S>, target: &LabelMap) -> Result<S> {
    let (c, h, w) = (probs.dims()[0], probs.dims()[1], probs.dims()[2]);
    if target.height() != h || target.width() != w {
        return Err(Error::ShapeMismatch(format!(
            "target {}x{} vs probs {}x{}",
            target.height(),
            target.width(),
            h,
            w
        )));
    }
    let hw = h * w;
    let mut acc = S::zero();
    for (p, &t) in target.pixels().iter().enumerate() {
        if t as usize >= c {
            return Err(Error::InvalidArgument(format!(
                "target label {t} out of range for {c} channels"
            )));
        }
        acc = acc - probs.data()[t as usize * hw + p].ln();
    }
    Ok(acc / S::of(hw as f64))
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

struct ForwardCache<S: Scalar> {
    /// Input to each backbone layer, in order, plus the head input last.
    inputs: Vec<Tensor<S>>,
    /// Dropout factor vectors, indexed like the backbone.
    masks: Vec<Option<Vec<S>>>,
}

fn forward_impl<S: Scalar>(
    params: &ModelParams<S>,
    head_id: &ClientId,
    input: &Tensor<S>,
    mode: Mode,
    rng: RngState,
    want_cache: bool,
) -> Result<(Tensor<S>, Option<ForwardCache<S>>)> {
    let head = params.head(head_id)?;
    if input.dims().len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "input must be [C,H,W], got {:?}",
            input.dims()
        )));
    }
    input.ensure_finite("forward input")?;
    let first_in = params
        .backbone
        .first()
        .map(|l| l.spec.in_channels)
        .unwrap_or(head.kernel.dims()[1]);
    if input.dims()[0] != first_in {
        return Err(Error::ShapeMismatch(format!(
            "input has {} channels, network expects {first_in}",
            input.dims()[0]
        )));
    }

    let mut inputs = Vec::new();
    let mut masks = Vec::new();
    let mut x = input.clone();
    for (idx, layer) in params.backbone.iter().enumerate() {
        if x.dims()[0] != layer.spec.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "layer {idx} expects {} channels, got {}",
                layer.spec.in_channels,
                x.dims()[0]
            )));
        }
        let mut mask = None;
        let next = match layer.spec.kind {
            LayerKind::Conv3x3 => conv3x3_forward(
                &x,
                layer.kernel.as_ref().expect("conv has kernel"),
                layer.bias.as_ref().expect("conv has bias"),
            ),
            LayerKind::Conv1x1 => conv1x1_forward(
                &x,
                layer.kernel.as_ref().expect("conv has kernel"),
                layer.bias.as_ref().expect("conv has bias"),
            ),
            LayerKind::Relu => x.map(|v| if v > S::zero() { v } else { S::zero() }),
            LayerKind::Dropout => {
                let m = dropout_mask::<S>(
                    x.len(),
                    layer.spec.dropout_p,
                    rng.derive(idx as u64),
                    mode.dropout_active(),
                )?;
                let mut y = x.clone();
                apply_mask(&mut y, &m);
                mask = Some(m);
                y
            }
        };
        if want_cache {
            inputs.push(x);
            masks.push(mask);
        }
        x = next;
    }
    let feat_channels = x.dims()[0];
    if head.kernel.dims()[1] != feat_channels {
        return Err(Error::ShapeMismatch(format!(
            "head '{head_id}' consumes {} channels, backbone produces {feat_channels}",
            head.kernel.dims()[1]
        )));
    }
    let logits = conv1x1_forward(&x, &head.kernel, &head.bias);
    logits.ensure_finite("forward logits")?;
    let cache = if want_cache {
        inputs.push(x);
        Some(ForwardCache { inputs, masks })
    } else {
        None
    };
    Ok((logits, cache))
}

/// Runs the backbone and the selected head, producing logits with
/// 1 + |labels of head| channels. Dropout is live in `Train` and
/// `McTest`; `Deterministic` is a pure function of (params, input).
pub fn forward<S: Scalar>(
    params: &ModelParams<S>,
    head_id: &ClientId,
    input: &Tensor<S>,
    mode: Mode,
    rng: RngState,
) -> Result<Tensor<S>> {
    forward_impl(params, head_id, input, mode, rng, false).map(|(logits, _)| logits)
}

/// Gradients for the backbone and one head, shape-congruent with the
/// parameters they correspond to.
#[derive(Debug, Clone)]
pub struct Grads<S: Scalar> {
    pub backbone: Vec<(Option<Tensor<S>>, Option<Tensor<S>>)>,
    pub head_kernel: Tensor<S>,
    pub head_bias: Tensor<S>,
}

impl<S: Scalar> Grads<S> {
    pub fn zeros_like(params: &ModelParams<S>, head_id: &ClientId) -> Result<Self> {
        let head = params.head(head_id)?;
        Ok(Grads {
            backbone: params
                .backbone
                .iter()
                .map(|l| {
                    (
                        l.kernel.as_ref().map(|k| Tensor::zeros(k.dims())),
                        l.bias.as_ref().map(|b| Tensor::zeros(b.dims())),
                    )
                })
                .collect(),
            head_kernel: Tensor::zeros(head.kernel.dims()),
            head_bias: Tensor::zeros(head.bias.dims()),
        })
    }

    /// self += other * scale
    pub fn accumulate(&mut self, other: &Grads<S>, scale: S) {
        fn axpy<S: Scalar>(dst: &mut Tensor<S>, src: &Tensor<S>, scale: S) {
            for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = *d + scale * s;
            }
        }
        for ((dk, db), (sk, sb)) in self.backbone.iter_mut().zip(&other.backbone) {
            if let (Some(d), Some(s)) = (dk.as_mut(), sk.as_ref()) {
                axpy(d, s, scale);
            }
            if let (Some(d), Some(s)) = (db.as_mut(), sb.as_ref()) {
                axpy(d, s, scale);
            }
        }
        axpy(&mut self.head_kernel, &other.head_kernel, scale);
        axpy(&mut self.head_bias, &other.head_bias, scale);
    }

    pub fn max_abs(&self) -> f64 {
        let mut m = 0.0f64;
        let mut scan = |t: &Tensor<S>| {
            for &v in t.data() {
                m = m.max(v.widen().abs());
            }
        };
        for (k, b) in &self.backbone {
            if let Some(k) = k {
                scan(k);
            }
            if let Some(b) = b {
                scan(b);
            }
        }
        scan(&self.head_kernel);
        scan(&self.head_bias);
        m
    }
}

/// Cross-entropy loss and exact reverse-mode gradients for one example,
/// using the same dropout masks as the corresponding `Train` forward
/// with this `rng`.
pub fn loss_and_grads<S: Scalar>(
    params: &ModelParams<S>,
    head_id: &ClientId,
    input: &Tensor<S>,
    target: &LabelMap,
    rng: RngState,
) -> Result<(S, Grads<S>)> {
    let (logits, cache) = forward_impl(params, head_id, input, Mode::Train, rng, true)?;
    let cache = cache.expect("cache requested");
    let probs = softmax_channels(&logits);
    let loss = cross_entropy(&probs, target)?;

    let (h, w) = (probs.dims()[1], probs.dims()[2]);
    let hw = h * w;
    let inv_n = S::of(1.0 / hw as f64);
    let mut grad = probs.clone();
    for (p, &t) in target.pixels().iter().enumerate() {
        let slot = &mut grad.data_mut()[t as usize * hw + p];
        *slot = *slot - S::one();
    }
    for v in grad.data_mut() {
        *v = *v * inv_n;
    }

    let head = params.head(head_id)?;
    let head_input = cache.inputs.last().expect("head input cached");
    let (head_k, head_b, mut grad_x) = conv1x1_backward(&grad, head_input, &head.kernel);

    let mut backbone_grads: Vec<(Option<Tensor<S>>, Option<Tensor<S>>)> =
        vec![(None, None); params.backbone.len()];
    for (idx, layer) in params.backbone.iter().enumerate().rev() {
        let layer_input = &cache.inputs[idx];
        match layer.spec.kind {
            LayerKind::Conv3x3 => {
                let (gk, gb) = conv3x3_backward_params(&grad_x, layer_input);
                let gi = conv3x3_backward_input(&grad_x, layer.kernel.as_ref().unwrap());
                backbone_grads[idx] = (Some(gk), Some(gb));
                grad_x = gi;
            }
            LayerKind::Conv1x1 => {
                let (gk, gb, gi) =
                    conv1x1_backward(&grad_x, layer_input, layer.kernel.as_ref().unwrap());
                backbone_grads[idx] = (Some(gk), Some(gb));
                grad_x = gi;
            }
            LayerKind::Relu => {
                let mut gi = grad_x.clone();
                for (g, &x) in gi.data_mut().iter_mut().zip(layer_input.data()) {
                    if x <= S::zero() {
                        *g = S::zero();
                    }
                }
                grad_x = gi;
            }
            LayerKind::Dropout => {
                let mask = cache.masks[idx].as_ref().expect("dropout mask cached");
                let mut gi = grad_x.clone();
                apply_mask(&mut gi, mask);
                grad_x = gi;
            }
        }
    }
    Ok((
        loss,
        Grads {
            backbone: backbone_grads,
            head_kernel: head_k,
            head_bias: head_b,
        },
    ))
}

/// Exact reverse-mode gradients of cross_entropy(softmax(forward)) with
/// the dropout masks of the paired `Train` forward.
pub fn backward<S: Scalar>(
    params: &ModelParams<S>,
    head_id: &ClientId,
    input: &Tensor<S>,
    target: &LabelMap,
    rng: RngState,
) -> Result<Grads<S>> {
    loss_and_grads(params, head_id, input, target, rng).map(|(_, g)| g)
}

/// params <- params - lr * grads, elementwise, for the backbone and the
/// named head. Other heads are untouched.
pub fn sgd_step<S: Scalar>(
    params: &mut ModelParams<S>,
    grads: &Grads<S>,
    head_id: &ClientId,
    lr: S,
) -> Result<()> {
    if grads.backbone.len() != params.backbone.len() {
        return Err(Error::ShapeMismatch("gradient/backbone layer count".into()));
    }
    fn step<S: Scalar>(p: &mut Tensor<S>, g: &Tensor<S>, lr: S) -> Result<()> {
        if !p.same_shape(g) {
            return Err(Error::ShapeMismatch(format!(
                "param {:?} vs grad {:?}",
                p.dims(),
                g.dims()
            )));
        }
        for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv = *pv - lr * gv;
        }
        Ok(())
    }
    for (layer, (gk, gb)) in params.backbone.iter_mut().zip(&grads.backbone) {
        if let (Some(p), Some(g)) = (layer.kernel.as_mut(), gk.as_ref()) {
            step(p, g, lr)?;
        }
        if let (Some(p), Some(g)) = (layer.bias.as_mut(), gb.as_ref()) {
            step(p, g, lr)?;
        }
    }
    let head = params
        .heads
        .get_mut(head_id)
        .ok_or_else(|| Error::UnknownHead(head_id.to_string()))?;
    step(&mut head.kernel, &grads.head_kernel, lr)?;
    step(&mut head.bias, &grads.head_bias, lr)?;
    Ok(())
}

/// One training instance for gradient validation.
pub struct GradCheckInstance<'a> {
    pub head_id: &'a ClientId,
    pub input: &'a Tensor<f64>,
    pub target: &'a LabelMap,
    pub rng: RngState,
}

enum ParamSlot {
    BackboneKernel(usize),
    BackboneBias(usize),
    HeadKernel,
    HeadBias,
}

fn slot_tensor_mut<'a>(
    params: &'a mut ModelParams<f64>,
    slot: &ParamSlot,
    head_id: &ClientId,
) -> &'a mut Tensor<f64> {
    match slot {
        ParamSlot::BackboneKernel(i) => params.backbone[*i].kernel.as_mut().unwrap(),
        ParamSlot::BackboneBias(i) => params.backbone[*i].bias.as_mut().unwrap(),
        ParamSlot::HeadKernel => &mut params.heads.get_mut(head_id).unwrap().kernel,
        ParamSlot::HeadBias => &mut params.heads.get_mut(head_id).unwrap().bias,
    }
}

fn slot_grad<'a>(grads: &'a Grads<f64>, slot: &ParamSlot) -> &'a Tensor<f64> {
    match slot {
        ParamSlot::BackboneKernel(i) => grads.backbone[*i].0.as_ref().unwrap(),
        ParamSlot::BackboneBias(i) => grads.backbone[*i].1.as_ref().unwrap(),
        ParamSlot::HeadKernel => &grads.head_kernel,
        ParamSlot::HeadBias => &grads.head_bias,
    }
}

/// Compares supplied analytic gradients against central finite
/// differences of the train-mode loss (same dropout masks), returning
/// the max over parameters of
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
pub fn grad_check_against(
    params: &ModelParams<f64>,
    instance: &GradCheckInstance,
    eps: f64,
    analytic: &Grads<f64>,
) -> Result<f64> {
    let probe = |params: &ModelParams<f64>| -> Result<f64> {
        let (logits, _) =
            forward_impl(params, instance.head_id, instance.input, Mode::Train, instance.rng, false)?;
        let probs = softmax_channels(&logits);
        cross_entropy(&probs, instance.target)
    };

    let mut slots = Vec::new();
    for (idx, layer) in params.backbone.iter().enumerate() {
        if layer.kernel.is_some() {
            slots.push(ParamSlot::BackboneKernel(idx));
        }
        if layer.bias.is_some() {
            slots.push(ParamSlot::BackboneBias(idx));
        }
    }
    slots.push(ParamSlot::HeadKernel);
    slots.push(ParamSlot::HeadBias);

    let mut scratch = params.clone();
    let mut worst = 0.0f64;
    for slot in &slots {
        let n = slot_grad(analytic, slot).len();
        for j in 0..n {
            let original = slot_tensor_mut(&mut scratch, slot, instance.head_id).data()[j];
            slot_tensor_mut(&mut scratch, slot, instance.head_id).data_mut()[j] = original + eps;
            let loss_plus = probe(&scratch)?;
            slot_tensor_mut(&mut scratch, slot, instance.head_id).data_mut()[j] = original - eps;
            let loss_minus = probe(&scratch)?;
            slot_tensor_mut(&mut scratch, slot, instance.head_id).data_mut()[j] = original;
            let numeric = (loss_plus - loss_minus) / (2.0 * eps);
            let a = slot_grad(analytic, slot).data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

/// Compares reverse-mode gradients against central finite differences.
pub fn grad_check(params: &ModelParams<f64>, instance: &GradCheckInstance, eps: f64) -> Result<f64> {
    let (_, analytic) =
        loss_and_grads(params, instance.head_id, instance.input, instance.target, instance.rng)?;
    grad_check_against(params, instance, eps, &analytic)
}

/// Smallest |preactivation| across all relu layers of a train-mode
/// forward. Finite differencing is only meaningful away from the relu
/// kinks: a probe of size eps can flip a unit whose preactivation sits
/// within roughly eps * sensitivity of zero, so grad-check instances
/// must keep this margin comfortably above eps.
pub fn relu_kink_margin(
    params: &ModelParams<f64>,
    head_id: &ClientId,
    input: &Tensor<f64>,
    rng: RngState,
) -> Result<f64> {
    let (_, cache) = forward_impl(params, head_id, input, Mode::Train, rng, true)?;
    let cache = cache.expect("cache requested");
    let mut margin = f64::INFINITY;
    for (idx, layer) in params.backbone.iter().enumerate() {
        if layer.spec.kind == LayerKind::Relu {
            for &v in cache.inputs[idx].data() {
                margin = margin.min(v.abs());
            }
        }
    }
    Ok(margin)
}

/// Location in [-cap, cap] maximizing the distance to the nearest value.
fn farthest_point(sorted: &[f64], cap: f64) -> f64 {
    let score = |t: f64| {
        sorted
            .iter()
            .map(|v| (v - t).abs())
            .fold(f64::INFINITY, f64::min)
    };
    let mut best_t = 0.0;
    let mut best = score(0.0);
    let mut consider = |t: f64| {
        let t = t.clamp(-cap, cap);
        let s = score(t);
        if s > best {
            best = s;
            best_t = t;
        }
    };
    consider(-cap);
    consider(cap);
    for pair in sorted.windows(2) {
        consider((pair[0] + pair[1]) / 2.0);
    }
    best_t
}

/// Shifts conv biases so that relu preactivations sit as far from zero
/// as possible (bias shifts capped at 0.2), making the instance safe for
/// central finite differences. Layers are handled front to back and the
/// forward is recomputed after each relu since downstream
/// preactivations move. Returns the achieved kink margin.
pub fn nudge_off_kinks(
    params: &mut ModelParams<f64>,
    head_id: &ClientId,
    input: &Tensor<f64>,
    rng: RngState,
) -> Result<f64> {
    let relu_indices: Vec<usize> = params
        .backbone
        .iter()
        .enumerate()
        .filter(|(_, l)| l.spec.kind == LayerKind::Relu)
        .map(|(i, _)| i)
        .collect();
    for idx in relu_indices {
        // only nudge when the immediately preceding layer owns a bias
        let prev = match idx.checked_sub(1) {
            Some(p) if params.backbone[p].bias.is_some() => p,
            _ => continue,
        };
        let (_, cache) = forward_impl(params, head_id, input, Mode::Train, rng, true)?;
        let pre = &cache.expect("cache requested").inputs[idx];
        let channels = pre.dims()[0];
        for ch in 0..channels {
            let mut vals: Vec<f64> = pre.plane(ch).to_vec();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let t = farthest_point(&vals, 0.2);
            params.backbone[prev].bias.as_mut().unwrap().data_mut()[ch] -= t;
        }
    }
    relu_kink_margin(params, head_id, input, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_head(channels: usize) -> BTreeMap<ClientId, usize> {
        let mut m = BTreeMap::new();
        m.insert(ClientId::from("c"), channels);
        m
    }

    fn toy_params(dropout_p: f64, seed: u64) -> ModelParams<f64> {
        ModelParams::init(&default_backbone(dropout_p), &single_head(3), RngState::new(seed, 0)).unwrap()
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let mut params = toy_params(0.0, 1);
        for layer in &mut params.backbone {
            if let Some(k) = layer.kernel.as_mut() {
                k.data_mut().fill(0.0);
            }
        }
        let head = params.heads.get_mut(&ClientId::from("c")).unwrap();
        head.kernel.data_mut().fill(0.0);
        let input = Tensor::filled(&[1, 4, 4], 0.7);
        let logits = forward(&params, &ClientId::from("c"), &input, Mode::Train, RngState::new(0, 0)).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deterministic_mode_ignores_rng() {
        let params = toy_params(0.9, 2);
        let input = Tensor::filled(&[1, 5, 5], 0.3);
        let c = ClientId::from("c");
        let a = forward(&params, &c, &input, Mode::Deterministic, RngState::new(1, 1)).unwrap();
        let b = forward(&params, &c, &input, Mode::Deterministic, RngState::new(999, 5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn train_mode_is_deterministic_in_rng() {
        let params = toy_params(0.5, 3);
        let input = Tensor::filled(&[1, 6, 6], 0.4);
        let c = ClientId::from("c");
        let a = forward(&params, &c, &input, Mode::Train, RngState::new(11, 0)).unwrap();
        let b = forward(&params, &c, &input, Mode::Train, RngState::new(11, 0)).unwrap();
        assert_eq!(a, b);
        let d = forward(&params, &c, &input, Mode::Train, RngState::new(12, 0)).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn unknown_head_errors() {
        let params = toy_params(0.0, 4);
        let input = Tensor::filled(&[1, 4, 4], 0.1);
        assert!(matches!(
            forward(&params, &ClientId::from("nope"), &input, Mode::Train, RngState::new(0, 0)),
            Err(Error::UnknownHead(_))
        ));
    }

    #[test]
    fn dropout_identity_cases() {
        let x = Tensor::<f64>::filled(&[2, 3, 3], 1.5);
        let out = dropout_apply(&x, 0.0, RngState::new(5, 0), true).unwrap();
        assert_eq!(out, x);
        let out = dropout_apply(&x, 0.7, RngState::new(5, 0), false).unwrap();
        assert_eq!(out, x);
        assert!(dropout_apply(&x, 1.0, RngState::new(5, 0), true).is_err());
    }

    #[test]
    fn dropout_survivors_are_scaled() {
        let x = Tensor::<f64>::filled(&[1, 8, 8], 3.0);
        let out = dropout_apply(&x, 0.5, RngState::new(9, 0), true).unwrap();
        for &v in out.data() {
            assert!(v == 0.0 || (v - 6.0).abs() < 1e-12, "got {v}");
        }
        // the mask must not be degenerate at p = 0.5 over 64 draws
        assert!(out.data().iter().any(|&v| v == 0.0));
        assert!(out.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn dropout_mean_matches_identity() {
        // inverted dropout is unbiased: E[mask * x] = x
        let p = 0.3;
        let draws = 100_000usize;
        let root = RngState::new(17, 0);
        let mut sum = 0.0f64;
        for i in 0..draws {
            let m = dropout_mask::<f64>(1, p, root.derive(i as u64), true).unwrap();
            sum += m[0];
        }
        let mean = sum / draws as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        // 3-sigma band for the estimator: sd of one draw is sqrt(p/(1-p))
        let sigma = (p / (1.0 - p)).sqrt() / (draws as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * sigma, "mean {mean} outside 3 sigma {sigma}");
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let logits = Tensor::<f64>::filled(&[4, 2, 2], 0.25);
        let probs = softmax_channels(&logits);
        for &v in probs.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
        let logits = Tensor::<f64>::from_vec(&[2, 1, 1], vec![0.0, 3.0f64.ln()]).unwrap();
        let probs = softmax_channels(&logits);
        assert!((probs.data()[0] - 0.25).abs() < 1e-12);
        assert!((probs.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance_and_extremes() {
        let logits = Tensor::<f64>::from_vec(&[3, 1, 1], vec![1.0, -2.0, 0.5]).unwrap();
        let shifted = logits.map(|v| v + 100.0);
        let a = softmax_channels(&logits);
        let b = softmax_channels(&shifted);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
        let extreme = Tensor::<f64>::from_vec(&[3, 1, 1], vec![1e4, -1e4, 0.0]).unwrap();
        let p = softmax_channels(&extreme);
        let sum: f64 = p.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(p.all_finite());
    }

    #[test]
    fn cross_entropy_cases() {
        // probability 1 on the target everywhere -> zero loss
        let probs = Tensor::<f64>::from_vec(&[2, 1, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let target = LabelMap::from_vec(1, 2, vec![0, 0]).unwrap();
        assert_eq!(cross_entropy(&probs, &target).unwrap(), 0.0);

        // uniform over two channels -> ln 2
        let probs = Tensor::<f64>::filled(&[2, 1, 2], 0.5);
        let loss = cross_entropy(&probs, &target).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);

        // hand-evaluated two-pixel case
        let probs = Tensor::<f64>::from_vec(&[2, 1, 2], vec![0.9, 0.2, 0.1, 0.8]).unwrap();
        let loss = cross_entropy(&probs, &target).unwrap();
        let expect = -(0.9f64.ln() + 0.2f64.ln()) / 2.0;
        assert!((loss - expect).abs() < 1e-12);

        // out-of-range target
        let bad = LabelMap::from_vec(1, 2, vec![0, 5]).unwrap();
        assert!(cross_entropy(&probs, &bad).is_err());
    }

    #[test]
    fn sgd_step_definitional_cases() {
        let c = ClientId::from("c");
        let mut params = toy_params(0.0, 6);
        let before = params.clone();
        let input = Tensor::filled(&[1, 4, 4], 0.2);
        let target = LabelMap::zeros(4, 4);
        let grads = backward(&params, &c, &input, &target, RngState::new(0, 0)).unwrap();

        // lr = 0 leaves parameters untouched
        sgd_step(&mut params, &grads, &c, 0.0).unwrap();
        assert_eq!(params, before);

        // single-element check: p - lr*g
        let mut params = before.clone();
        let p0 = params.backbone[0].kernel.as_ref().unwrap().data()[0];
        let g0 = grads.backbone[0].0.as_ref().unwrap().data()[0];
        sgd_step(&mut params, &grads, &c, 0.5).unwrap();
        let p1 = params.backbone[0].kernel.as_ref().unwrap().data()[0];
        assert!((p1 - (p0 - 0.5 * g0)).abs() < 1e-15);

        // two steps with frozen grads equal one step with summed grads
        let mut twice = before.clone();
        sgd_step(&mut twice, &grads, &c, 0.25).unwrap();
        sgd_step(&mut twice, &grads, &c, 0.25).unwrap();
        let mut summed = before.clone();
        let mut double = Grads::zeros_like(&before, &c).unwrap();
        double.accumulate(&grads, 2.0);
        sgd_step(&mut summed, &double, &c, 0.25).unwrap();
        let a = twice.backbone[0].kernel.as_ref().unwrap();
        let b = summed.backbone[0].kernel.as_ref().unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_step_decreases_loss() {
        let c = ClientId::from("c");
        let mut params = toy_params(0.25, 7);
        let input = {
            let mut r = RngState::new(21, 0).rng();
            let data = (0..36).map(|_| r.gen_range(0.0..1.0)).collect();
            Tensor::from_vec(&[1, 6, 6], data).unwrap()
        };
        let target = {
            let mut r = RngState::new(22, 0).rng();
            LabelMap::from_vec(6, 6, (0..36).map(|_| r.gen_range(0..3u32)).collect()).unwrap()
        };
        let rng = RngState::new(23, 0);
        let (loss0, grads) = loss_and_grads(&params, &c, &input, &target, rng).unwrap();
        sgd_step(&mut params, &grads, &c, 0.05).unwrap();
        let (loss1, _) = loss_and_grads(&params, &c, &input, &target, rng).unwrap();
        assert!(loss1 < loss0, "loss did not decrease: {loss0} -> {loss1}");
    }

    #[test]
    fn perfect_fit_has_vanishing_gradient() {
        // Build a 1x1-conv-only model whose head drives the target channel
        // to probability ~1 everywhere; gradients must vanish.
        let c = ClientId::from("c");
        let backbone = vec![LayerSpec::conv1x1(1, 2)];
        let mut heads = BTreeMap::new();
        heads.insert(c.clone(), 3usize);
        let mut params = ModelParams::<f64>::init(&backbone, &heads, RngState::new(1, 0)).unwrap();
        // backbone passes input through on channel 0
        let l = &mut params.backbone[0];
        l.kernel.as_mut().unwrap().data_mut().copy_from_slice(&[1.0, 0.0]);
        // head: huge bias on channel 1, nothing else
        let h = params.heads.get_mut(&c).unwrap();
        h.kernel.data_mut().fill(0.0);
        h.bias.data_mut().copy_from_slice(&[0.0, 60.0, 0.0]);
        let input = Tensor::filled(&[1, 3, 3], 0.5);
        let target = LabelMap::from_vec(3, 3, vec![1; 9]).unwrap();
        let grads = backward(&params, &c, &input, &target, RngState::new(0, 0)).unwrap();
        assert!(grads.max_abs() < 1e-8, "grad norm {}", grads.max_abs());
    }

    #[test]
    fn grad_check_linear_single_layer() {
        let c = ClientId::from("c");
        let backbone: Vec<LayerSpec> = vec![];
        let mut heads = BTreeMap::new();
        heads.insert(c.clone(), 3usize);
        // no backbone layers: head consumes the input directly
        let params = {
            let mut p = ModelParams::<f64>::init(&backbone, &heads, RngState::new(2, 0)).unwrap();
            p.heads.get_mut(&c).unwrap().kernel =
                Tensor::from_vec(&[3, 1, 1, 1], vec![0.4, -0.2, 0.1]).unwrap();
            p
        };
        let input = {
            let mut r = RngState::new(3, 0).rng();
            Tensor::from_vec(&[1, 4, 4], (0..16).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap()
        };
        let target = {
            let mut r = RngState::new(4, 0).rng();
            LabelMap::from_vec(4, 4, (0..16).map(|_| r.gen_range(0..3u32)).collect()).unwrap()
        };
        let inst = GradCheckInstance { head_id: &c, input: &input, target: &target, rng: RngState::new(5, 0) };
        let err = grad_check(&params, &inst, 1e-4).unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    /// Random instance of the default net, biases nudged so relu
    /// preactivations clear the kink margin needed for differencing.
    fn nudged_instance(seed: u64) -> (ModelParams<f64>, Tensor<f64>, LabelMap, RngState) {
        let c = ClientId::from("c");
        let mut params = toy_params(0.25, seed);
        let mut r = RngState::new(seed, 1).rng();
        let input =
            Tensor::from_vec(&[1, 4, 4], (0..16).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap();
        let target =
            LabelMap::from_vec(4, 4, (0..16).map(|_| r.gen_range(0..3u32)).collect()).unwrap();
        let rng = RngState::new(seed, 2);
        let margin = nudge_off_kinks(&mut params, &c, &input, rng).unwrap();
        assert!(margin > 1e-3, "kink margin {margin} too small for seed {seed}");
        (params, input, target, rng)
    }

    #[test]
    fn grad_check_full_net_and_corruption() {
        let c = ClientId::from("c");
        let (params, input, target, rng) = nudged_instance(0);
        let inst = GradCheckInstance { head_id: &c, input: &input, target: &target, rng };
        let clean = grad_check(&params, &inst, 1e-4).unwrap();
        assert!(clean < 1e-4, "clean error {clean}");

        // scale one analytic gradient entry by 1.01; the check must flag it
        let (_, mut grads) = loss_and_grads(&params, &c, &input, &target, inst.rng).unwrap();
        let slot = &mut grads.backbone[0].0.as_mut().unwrap().data_mut()[0];
        *slot *= 1.01;
        let reported = grad_check_against(&params, &inst, 1e-4, &grads).unwrap();
        assert!(reported > 5e-3, "corruption not detected: {reported}");
    }
}
