//! Reference forward pass written as straight-line loops, independent of
//! the library's convolution kernels, used to pin the network math.

use funavg_core::nn::{default_backbone, dropout_apply, forward, LayerKind, ModelParams, Mode};
use funavg_core::registry::ClientId;
use funavg_core::rng::RngState;
use funavg_core::tensor::Tensor;
use rand::Rng;
use std::collections::BTreeMap;

/// Direct convolution by definition: quadruple loops, explicit zero
/// padding, no shared helpers with the implementation under test.
fn naive_conv(
    input: &[Vec<Vec<f64>>],
    kernel: &Tensor<f64>,
    bias: &Tensor<f64>,
    ksize: usize,
) -> Vec<Vec<Vec<f64>>> {
    let ci = input.len();
    let h = input[0].len();
    let w = input[0][0].len();
    let co = kernel.dims()[0];
    let pad = (ksize - 1) / 2;
    let mut out = vec![vec![vec![0.0f64; w]; h]; co];
    for o in 0..co {
        for y in 0..h {
            for x in 0..w {
                let mut acc = bias.data()[o];
                for i in 0..ci {
                    for ky in 0..ksize {
                        for kx in 0..ksize {
                            let iy = y as isize + ky as isize - pad as isize;
                            let ix = x as isize + kx as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let kv = kernel.data()
                                [((o * ci + i) * ksize + ky) * ksize + kx];
                            acc += kv * input[i][iy as usize][ix as usize];
                        }
                    }
                }
                out[o][y][x] = acc;
            }
        }
    }
    out
}

fn to_nested(t: &Tensor<f64>) -> Vec<Vec<Vec<f64>>> {
    let (c, h, w) = (t.dims()[0], t.dims()[1], t.dims()[2]);
    let mut out = vec![vec![vec![0.0; w]; h]; c];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[ch][y][x] = t.data()[(ch * h + y) * w + x];
            }
        }
    }
    out
}

/// Full reference forward: conv/relu/dropout layers in order, then the
/// head. Dropout masks are supplied explicitly.
fn reference_forward(
    params: &ModelParams<f64>,
    head: &ClientId,
    input: &Tensor<f64>,
    masks: &[Option<Vec<f64>>],
) -> Vec<Vec<Vec<f64>>> {
    let mut x = to_nested(input);
    for (idx, layer) in params.backbone.iter().enumerate() {
        x = match layer.spec.kind {
            LayerKind::Conv3x3 => naive_conv(
                &x,
                layer.kernel.as_ref().unwrap(),
                layer.bias.as_ref().unwrap(),
                3,
            ),
            LayerKind::Conv1x1 => naive_conv(
                &x,
                layer.kernel.as_ref().unwrap(),
                layer.bias.as_ref().unwrap(),
                1,
            ),
            LayerKind::Relu => x
                .iter()
                .map(|p| {
                    p.iter()
                        .map(|row| row.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect())
                        .collect()
                })
                .collect(),
            LayerKind::Dropout => {
                let m = masks[idx].as_ref().expect("mask supplied for dropout layer");
                let h = x[0].len();
                let w = x[0][0].len();
                x.iter()
                    .enumerate()
                    .map(|(c, p)| {
                        p.iter()
                            .enumerate()
                            .map(|(y, row)| {
                                row.iter()
                                    .enumerate()
                                    .map(|(xx, &v)| v * m[(c * h + y) * w + xx])
                                    .collect()
                            })
                            .collect()
                    })
                    .collect()
            }
        };
    }
    let hp = params.heads.get(head).unwrap();
    naive_conv(&x, &hp.kernel, &hp.bias, 1)
}

fn max_abs_diff(logits: &Tensor<f64>, reference: &[Vec<Vec<f64>>]) -> f64 {
    let (c, h, w) = (logits.dims()[0], logits.dims()[1], logits.dims()[2]);
    let mut worst = 0.0f64;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let d = (logits.data()[(ch * h + y) * w + x] - reference[ch][y][x]).abs();
                worst = worst.max(d);
            }
        }
    }
    worst
}

fn fixture(seed: u64) -> (ModelParams<f64>, ClientId, Tensor<f64>) {
    let c = ClientId::from("c");
    let mut heads = BTreeMap::new();
    heads.insert(c.clone(), 4usize);
    let params =
        ModelParams::<f64>::init(&default_backbone(0.25), &heads, RngState::new(seed, 0)).unwrap();
    let mut r = RngState::new(seed, 7).rng();
    let input =
        Tensor::from_vec(&[1, 8, 8], (0..64).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap();
    (params, c, input)
}

#[test]
fn forward_matches_reference_deterministic() {
    let (params, c, input) = fixture(42);
    let logits = forward(&params, &c, &input, Mode::Deterministic, RngState::new(0, 0)).unwrap();
    let masks: Vec<Option<Vec<f64>>> = params
        .backbone
        .iter()
        .map(|layer| Some(vec![1.0; layer.spec.in_channels * 64]))
        .collect();
    let reference = reference_forward(&params, &c, &input, &masks);
    let diff = max_abs_diff(&logits, &reference);
    assert!(diff < 1e-12, "max abs diff {diff}");
}

#[test]
fn forward_matches_reference_with_dropout() {
    let (params, c, input) = fixture(43);
    let rng = RngState::new(99, 5);
    let logits = forward(&params, &c, &input, Mode::Train, rng).unwrap();

    // Extract the masks the implementation will draw: dropout of a ones
    // tensor under the per-layer derived state yields the factor field.
    let mut masks: Vec<Option<Vec<f64>>> = vec![None; params.backbone.len()];
    for (idx, layer) in params.backbone.iter().enumerate() {
        if layer.spec.kind == LayerKind::Dropout {
            let ones = Tensor::<f64>::filled(&[layer.spec.in_channels, 8, 8], 1.0);
            let factors =
                dropout_apply(&ones, layer.spec.dropout_p, rng.derive(idx as u64), true).unwrap();
            masks[idx] = Some(factors.into_data());
        } else {
            masks[idx] = Some(vec![1.0; layer.spec.in_channels * 64]);
        }
    }
    let reference = reference_forward(&params, &c, &input, &masks);
    let diff = max_abs_diff(&logits, &reference);
    assert!(diff < 1e-12, "max abs diff {diff}");
}

#[test]
fn all_zero_parameters_give_all_zero_logits() {
    let (mut params, c, input) = fixture(44);
    for layer in &mut params.backbone {
        if let Some(k) = layer.kernel.as_mut() {
            k.data_mut().fill(0.0);
        }
    }
    let h = params.heads.get_mut(&c).unwrap();
    h.kernel.data_mut().fill(0.0);
    h.bias.data_mut().fill(0.0);
    let logits = forward(&params, &c, &input, Mode::Deterministic, RngState::new(0, 0)).unwrap();
    assert!(logits.data().iter().all(|&v| v == 0.0));
}
