//! Monte Carlo dropout posterior sampling, the per-pixel decomposition
//! of predictive covariance into aleatoric and epistemic parts, and
//! expected calibration error.
//!
//! Uncertainty math always runs in 64-bit regardless of the training
//! dtype so the algebraic identities stay assertable: per pixel,
//!   aleatoric = (1/T) sum_t [diag(p_t) - p_t p_t'],
//!   epistemic = (1/T) sum_t (p_t - mean)(p_t - mean)',
//! and trace(aleatoric + epistemic) = 1 - |mean|^2 when samples sum to 1.

use crate::error::{Error, Result};
use crate::nn::{forward, softmax_channels, Mode, ModelParams};
use crate::numfmt::fmt_sig6;
use crate::registry::ClientId;
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// T Monte Carlo softmax samples, stored as one [T, C, H, W] tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorStack<S: Scalar> {
    samples: Tensor<S>,
}

impl<S: Scalar> PosteriorStack<S> {
    /// Stacks per-pass probability tensors; each (t, pixel) slice must
    /// sum to 1 within 1e-6.
    pub fn from_samples(samples: Vec<Tensor<S>>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("posterior stack needs T >= 1 samples".into()));
        }
        let dims = samples[0].dims().to_vec();
        if dims.len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "posterior samples must be [C,H,W], got {dims:?}"
            )));
        }
        let (c, h, w) = (dims[0], dims[1], dims[2]);
        let mut data = Vec::with_capacity(samples.len() * c * h * w);
        for s in &samples {
            if s.dims() != dims.as_slice() {
                return Err(Error::ShapeMismatch("posterior samples differ in shape".into()));
            }
            let hw = h * w;
            for p in 0..hw {
                let mut sum = 0.0f64;
                for ch in 0..c {
                    sum += s.data()[ch * hw + p].widen();
                }
                if (sum - 1.0).abs() > 1e-6 {
                    return Err(Error::InvalidArgument(format!(
                        "posterior sample pixel sums to {sum}, not 1"
                    )));
                }
            }
            data.extend_from_slice(s.data());
        }
        Ok(PosteriorStack {
            samples: Tensor::from_vec(&[samples.len(), c, h, w], data)?,
        })
    }

    pub fn t_count(&self) -> usize {
        self.samples.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.samples.dims()[1]
    }

    pub fn height(&self) -> usize {
        self.samples.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.samples.dims()[3]
    }

    /// Probability of channel `c` at flat pixel `p` in pass `t`.
    pub fn prob(&self, t: usize, c: usize, p: usize) -> S {
        let (_, ch, h, w) = (
            self.samples.dims()[0],
            self.samples.dims()[1],
            self.samples.dims()[2],
            self.samples.dims()[3],
        );
        self.samples.data()[(t * ch + c) * (h * w) + p]
    }

    pub fn as_tensor(&self) -> &Tensor<S> {
        &self.samples
    }
}

/// T stochastic forward passes (dropout live), softmax applied to each.
/// Pass t draws its masks from rng.derive(t), so the stack is
/// deterministic in (params, image, rng).
pub fn mc_sample<S: Scalar>(
    params: &ModelParams<S>,
    head_id: &ClientId,
    image: &Tensor<S>,
    t_count: usize,
    rng: RngState,
) -> Result<PosteriorStack<S>> {
    if t_count < 1 {
        return Err(Error::InvalidArgument("T must be >= 1".into()));
    }
    let mut samples = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let logits = forward(params, head_id, image, Mode::McTest, rng.derive(t as u64))?;
        samples.push(softmax_channels(&logits));
    }
    PosteriorStack::from_samples(samples)
}

/// Arithmetic mean over the T passes; per-pixel channel sums stay 1.
pub fn mean_prob<S: Scalar>(stack: &PosteriorStack<S>) -> Tensor<S> {
    let (t_count, c, h, w) = (
        stack.t_count(),
        stack.channels(),
        stack.height(),
        stack.width(),
    );
    let chw = c * h * w;
    let mut out = Tensor::zeros(&[c, h, w]);
    for t in 0..t_count {
        let base = t * chw;
        for (o, &s) in out
            .data_mut()
            .iter_mut()
            .zip(&stack.as_tensor().data()[base..base + chw])
        {
            *o = *o + s;
        }
    }
    let inv = S::of(1.0 / t_count as f64);
    for v in out.data_mut() {
        *v = *v * inv;
    }
    out
}

/// Per-pixel uncertainty traces; full C x C matrices are optional.
#[derive(Debug, Clone)]
pub struct UncertaintyMaps {
    pub aleatoric_trace: Tensor<f64>,
    pub epistemic_trace: Tensor<f64>,
    pub total_trace: Tensor<f64>,
    /// total_trace normalized by its tight bound 1 - 1/C, in [0,1].
    pub scalar_u: Tensor<f64>,
    pub channels: usize,
    /// [C, C, H, W] matrices when requested.
    pub aleatoric_matrix: Option<Tensor<f64>>,
    pub epistemic_matrix: Option<Tensor<f64>>,
}

fn decompose<S: Scalar>(stack: &PosteriorStack<S>, want_matrices: bool) -> Result<UncertaintyMaps> {
    let t_count = stack.t_count();
    if t_count < 2 {
        return Err(Error::InvalidArgument(
            "epistemic estimates need T >= 2 samples".into(),
        ));
    }
    let (c, h, w) = (stack.channels(), stack.height(), stack.width());
    let hw = h * w;
    let inv_t = 1.0 / t_count as f64;

    let mut aleatoric_trace = Tensor::<f64>::zeros(&[h, w]);
    let mut epistemic_trace = Tensor::<f64>::zeros(&[h, w]);
    let mut total_trace = Tensor::<f64>::zeros(&[h, w]);
    let mut amat = want_matrices.then(|| Tensor::<f64>::zeros(&[c, c, h, w]));
    let mut emat = want_matrices.then(|| Tensor::<f64>::zeros(&[c, c, h, w]));

    let mut p_t = vec![0.0f64; c];
    let mut mean = vec![0.0f64; c];
    for p in 0..hw {
        mean.iter_mut().for_each(|m| *m = 0.0);
        for t in 0..t_count {
            for ch in 0..c {
                mean[ch] += stack.prob(t, ch, p).widen();
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_t);

        let mut a_tr = 0.0f64;
        let mut e_tr = 0.0f64;
        for t in 0..t_count {
            for ch in 0..c {
                p_t[ch] = stack.prob(t, ch, p).widen();
            }
            for ch in 0..c {
                a_tr += p_t[ch] - p_t[ch] * p_t[ch];
                let d = p_t[ch] - mean[ch];
                e_tr += d * d;
            }
            if let (Some(am), Some(em)) = (amat.as_mut(), emat.as_mut()) {
                for i in 0..c {
                    for j in 0..c {
                        let diag = if i == j { p_t[i] } else { 0.0 };
                        let a = diag - p_t[i] * p_t[j];
                        let e = (p_t[i] - mean[i]) * (p_t[j] - mean[j]);
                        am.data_mut()[(i * c + j) * hw + p] += a * inv_t;
                        em.data_mut()[(i * c + j) * hw + p] += e * inv_t;
                    }
                }
            }
        }
        a_tr *= inv_t;
        e_tr *= inv_t;
        aleatoric_trace.data_mut()[p] = a_tr;
        epistemic_trace.data_mut()[p] = e_tr;
        total_trace.data_mut()[p] = a_tr + e_tr;
    }

    let mut maps = UncertaintyMaps {
        aleatoric_trace,
        epistemic_trace,
        total_trace,
        scalar_u: Tensor::zeros(&[h, w]),
        channels: c,
        aleatoric_matrix: amat,
        epistemic_matrix: emat,
    };
    maps.scalar_u = scalar_uncertainty(&maps, c)?;
    Ok(maps)
}

/// Splits the predictive covariance into its data-dependent and
/// model-dependent parts, keeping the per-pixel traces.
pub fn uncertainty_decompose<S: Scalar>(stack: &PosteriorStack<S>) -> Result<UncertaintyMaps> {
    decompose(stack, false)
}

/// Like [`uncertainty_decompose`] but also retains the full C x C
/// matrices (tests assert row sums and additivity on them).
pub fn uncertainty_decompose_full<S: Scalar>(stack: &PosteriorStack<S>) -> Result<UncertaintyMaps> {
    decompose(stack, true)
}

/// Normalized scalar uncertainty: total trace divided by its tight
/// upper bound 1 - 1/C, clamped to [0,1] against round-off.
pub fn scalar_uncertainty(maps: &UncertaintyMaps, channels: usize) -> Result<Tensor<f64>> {
    if channels < 2 {
        return Err(Error::InvalidArgument("scalar uncertainty needs C >= 2".into()));
    }
    let norm = 1.0 - 1.0 / channels as f64;
    Ok(maps.total_trace.map(|v| (v / norm).clamp(0.0, 1.0)))
}

/// How the per-pixel scalar uncertainty is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UNorm {
    /// total_trace / (1 - 1/C), the default.
    TraceNorm,
    /// Per-image min-max rescaling of the total trace.
    PerImageMinmax,
}

impl std::str::FromStr for UNorm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "trace_norm" => Ok(UNorm::TraceNorm),
            "per_image_minmax" => Ok(UNorm::PerImageMinmax),
            other => Err(format!("unknown u_norm '{other}'")),
        }
    }
}

pub fn normalize_u(maps: &UncertaintyMaps, channels: usize, how: UNorm) -> Result<Tensor<f64>> {
    match how {
        UNorm::TraceNorm => scalar_uncertainty(maps, channels),
        UNorm::PerImageMinmax => {
            let lo = maps.total_trace.data().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = maps
                .total_trace
                .data()
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            if hi - lo < 1e-15 {
                return Ok(Tensor::zeros(&[
                    maps.total_trace.dims()[0],
                    maps.total_trace.dims()[1],
                ]));
            }
            Ok(maps.total_trace.map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)))
        }
    }
}

// ---------------------------------------------------------------------------
// Expected calibration error
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub conf: f64,
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub bins: Vec<CalibrationBin>,
    pub ece: f64,
    pub n: usize,
}

impl CalibrationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count,conf,acc\n");
        for b in &self.bins {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                fmt_sig6(b.lo),
                fmt_sig6(b.hi),
                b.count,
                fmt_sig6(b.conf),
                fmt_sig6(b.acc)
            ));
        }
        out
    }
}

/// Bin index (0-based) for a confidence: M equal-width right-closed
/// intervals over (0,1], with 0 falling into the first bin.
fn bin_index(conf: f64, bins: usize) -> usize {
    for m in 1..=bins {
        if conf <= m as f64 / bins as f64 {
            return m - 1;
        }
    }
    bins - 1
}

/// Expected calibration error over M equal-width bins: the
/// count-weighted mean of |accuracy - confidence| per bin.
pub fn ece(confidences: &[f64], correctness: &[bool], bins: usize) -> Result<CalibrationReport> {
    if bins < 1 {
        return Err(Error::InvalidArgument("bin count must be >= 1".into()));
    }
    if confidences.len() != correctness.len() {
        return Err(Error::InvalidArgument(format!(
            "length mismatch: {} confidences vs {} correctness flags",
            confidences.len(),
            correctness.len()
        )));
    }
    if confidences.is_empty() {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    for &c in confidences {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::InvalidArgument(format!("confidence {c} outside [0,1]")));
        }
    }
    let n = confidences.len();
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0f64; bins];
    let mut acc_sum = vec![0.0f64; bins];
    for (&c, &ok) in confidences.iter().zip(correctness) {
        let b = bin_index(c, bins);
        count[b] += 1;
        conf_sum[b] += c;
        if ok {
            acc_sum[b] += 1.0;
        }
    }
    let mut out_bins = Vec::with_capacity(bins);
    let mut total = 0.0f64;
    for m in 0..bins {
        let (conf, acc) = if count[m] > 0 {
            (conf_sum[m] / count[m] as f64, acc_sum[m] / count[m] as f64)
        } else {
            (0.0, 0.0)
        };
        if count[m] > 0 {
            total += (count[m] as f64 / n as f64) * (acc - conf).abs();
        }
        out_bins.push(CalibrationBin {
            lo: m as f64 / bins as f64,
            hi: (m + 1) as f64 / bins as f64,
            count: count[m],
            conf,
            acc,
        });
    }
    Ok(CalibrationReport { bins: out_bins, ece: total, n })
}
