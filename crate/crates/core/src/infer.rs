//! Assembles per-head MC-mean probabilities into a global prediction:
//! channels averaged with the per-label client counts as divisors, the
//! background channel optionally down-weighted by the ensemble
//! uncertainty, then a per-pixel argmax.
//!
//! The assembled vector is NOT normalized: sums over heterogeneous
//! heads exceed 1 in general, and no consumer may assume otherwise.

use crate::error::{Error, Result};
use crate::numfmt::fmt_sig6;
use crate::registry::{ClientId, LabelRegistry};
use crate::scalar::Scalar;
use crate::tensor::{LabelMap, Tensor};

/// One head's contribution: MC-mean probabilities in its local channel
/// order plus its per-pixel scalar uncertainty.
#[derive(Debug, Clone)]
pub struct HeadPrediction<S: Scalar> {
    pub client_id: ClientId,
    pub mean_probs: Tensor<S>,
    pub scalar_u: Tensor<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleMode {
    Vanilla,
    FunAvg,
}

impl std::fmt::Display for EnsembleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EnsembleMode::Vanilla => write!(f, "vanilla"),
            EnsembleMode::FunAvg => write!(f, "funavg"),
        }
    }
}

/// How per-head uncertainties combine into the ensemble map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UAgg {
    Mean,
    Max,
}

impl std::str::FromStr for UAgg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mean" => Ok(UAgg::Mean),
            "max" => Ok(UAgg::Max),
            other => Err(format!("unknown u_agg '{other}'")),
        }
    }
}

/// Assembled global-channel probabilities, the ensemble uncertainty,
/// and the argmax label map.
#[derive(Debug, Clone)]
pub struct GlobalPrediction<S: Scalar> {
    pub probs: Tensor<S>,
    pub ensemble_u: Tensor<f64>,
    pub labels: LabelMap,
    pub mode: EnsembleMode,
}

/// Scatters a head's local channels into the global channel layout:
/// background to channel 0, each label to its registry channel, labels
/// the head does not annotate left at exactly 0.
pub fn align_channels<S: Scalar>(
    head_probs: &Tensor<S>,
    client: &ClientId,
    registry: &LabelRegistry,
) -> Result<Tensor<S>> {
    let local_c = head_probs.dims()[0];
    if local_c != registry.head_channels(client)? {
        return Err(Error::ShapeMismatch(format!(
            "head '{client}' has {local_c} channels, registry expects {}",
            registry.head_channels(client)?
        )));
    }
    let (h, w) = (head_probs.dims()[1], head_probs.dims()[2]);
    let mut out = Tensor::zeros(&[registry.num_global_channels(), h, w]);
    for local in 0..local_c {
        let global = registry.global_channel_of_local(client, local)?;
        out.plane_mut(global).copy_from_slice(head_probs.plane(local));
    }
    Ok(out)
}

/// Inverse of [`align_channels`]: gathers a head's channels back out of
/// the global layout, bit-exactly.
pub fn gather_channels<S: Scalar>(
    global_probs: &Tensor<S>,
    client: &ClientId,
    registry: &LabelRegistry,
) -> Result<Tensor<S>> {
    let (h, w) = (global_probs.dims()[1], global_probs.dims()[2]);
    let local_c = registry.head_channels(client)?;
    let mut out = Tensor::zeros(&[local_c, h, w]);
    for local in 0..local_c {
        let global = registry.global_channel_of_local(client, local)?;
        out.plane_mut(local).copy_from_slice(global_probs.plane(global));
    }
    Ok(out)
}

/// Per-pixel argmax over the assembled channels; exact ties break
/// toward the lowest channel index, so background wins exact ties.
pub fn predict<S: Scalar>(probs: &Tensor<S>) -> LabelMap {
    let (c, h, w) = (probs.dims()[0], probs.dims()[1], probs.dims()[2]);
    let hw = h * w;
    let mut labels = LabelMap::zeros(h, w);
    for p in 0..hw {
        let mut best = 0usize;
        let mut best_v = probs.data()[p];
        for ch in 1..c {
            let v = probs.data()[ch * hw + p];
            if v > best_v {
                best_v = v;
                best = ch;
            }
        }
        labels.pixels_mut()[p] = best as u32;
    }
    labels
}

/// Vanilla ensemble: per global label, the sum of the possessing heads'
/// probabilities divided by how many heads possess it; background summed
/// over all heads and divided by the head count. Heads are processed in
/// client-id order regardless of input order.
pub fn ensemble_average<S: Scalar>(
    head_preds: &[HeadPrediction<S>],
    registry: &LabelRegistry,
    u_agg: UAgg,
) -> Result<GlobalPrediction<S>> {
    if head_preds.is_empty() {
        return Err(Error::InvalidArgument("ensemble needs at least one head".into()));
    }
    let (h, w) = (head_preds[0].mean_probs.dims()[1], head_preds[0].mean_probs.dims()[2]);
    for hp in head_preds {
        if hp.mean_probs.dims()[1] != h || hp.mean_probs.dims()[2] != w {
            return Err(Error::ShapeMismatch("head predictions differ in extent".into()));
        }
        if hp.scalar_u.dims() != [h, w] {
            return Err(Error::ShapeMismatch("scalar_u extent mismatch".into()));
        }
    }
    let mut order: Vec<usize> = (0..head_preds.len()).collect();
    order.sort_by(|&a, &b| head_preds[a].client_id.cmp(&head_preds[b].client_id));

    let n_global = registry.num_global_channels();
    // per-channel divisor: heads in this ensemble possessing the label
    let mut k = vec![0usize; n_global];
    k[0] = head_preds.len();
    for hp in head_preds {
        for label in registry.client_label_list(&hp.client_id)? {
            k[registry.global_channel(label)?] += 1;
        }
    }
    for (c, &kc) in k.iter().enumerate().skip(1) {
        if kc == 0 {
            return Err(Error::Data(format!(
                "label '{}' (channel {c}) has no head in the ensemble",
                registry.global_labels()[c - 1]
            )));
        }
    }

    let hw = h * w;
    let mut probs = Tensor::<S>::zeros(&[n_global, h, w]);
    for &i in &order {
        let aligned = align_channels(&head_preds[i].mean_probs, &head_preds[i].client_id, registry)?;
        // sum only channels this head possesses so absent labels stay 0
        let mut possessed = vec![false; n_global];
        possessed[0] = true;
        for label in registry.client_label_list(&head_preds[i].client_id)? {
            possessed[registry.global_channel(label)?] = true;
        }
        for (c, has) in possessed.iter().enumerate() {
            if !has {
                continue;
            }
            let dst = probs.plane_mut(c);
            let src = aligned.plane(c);
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + s;
            }
        }
    }
    for (c, &kc) in k.iter().enumerate() {
        let inv = S::of(1.0 / kc as f64);
        for v in probs.plane_mut(c) {
            *v = *v * inv;
        }
    }

    let mut ensemble_u = Tensor::<f64>::zeros(&[h, w]);
    match u_agg {
        UAgg::Mean => {
            for &i in &order {
                for (d, &s) in ensemble_u.data_mut().iter_mut().zip(head_preds[i].scalar_u.data()) {
                    *d += s;
                }
            }
            let inv = 1.0 / head_preds.len() as f64;
            for v in ensemble_u.data_mut() {
                *v *= inv;
            }
        }
        UAgg::Max => {
            for &i in &order {
                for (d, &s) in ensemble_u.data_mut().iter_mut().zip(head_preds[i].scalar_u.data()) {
                    *d = d.max(s);
                }
            }
        }
    }
    let _ = hw;
    let labels = predict(&probs);
    Ok(GlobalPrediction { probs, ensemble_u, labels, mode: EnsembleMode::Vanilla })
}

/// Background reweighting: channel 0 is scaled pointwise by (1 - u),
/// every other channel is untouched bitwise, and the argmax is
/// recomputed. No renormalization is applied afterwards.
pub fn funavg_reweight<S: Scalar>(
    global: &GlobalPrediction<S>,
    u: &Tensor<f64>,
) -> Result<GlobalPrediction<S>> {
    let (h, w) = (global.probs.dims()[1], global.probs.dims()[2]);
    if u.dims() != [h, w] {
        return Err(Error::ShapeMismatch(format!(
            "uncertainty map {:?} vs prediction {h}x{w}",
            u.dims()
        )));
    }
    for &v in u.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!("uncertainty {v} outside [0,1]")));
        }
    }
    let mut probs = global.probs.clone();
    {
        let bg = probs.plane_mut(0);
        for (b, &uv) in bg.iter_mut().zip(u.data()) {
            *b = *b * S::of(1.0 - uv);
        }
    }
    let labels = predict(&probs);
    Ok(GlobalPrediction {
        probs,
        ensemble_u: global.ensemble_u.clone(),
        labels,
        mode: EnsembleMode::FunAvg,
    })
}

/// Binary portable graymap (P5) encoding of a label map, for eyeballing.
pub fn labels_to_pgm(labels: &LabelMap, maxval: u32) -> Result<Vec<u8>> {
    if maxval == 0 || maxval > 255 {
        return Err(Error::InvalidArgument(format!("P5 maxval {maxval} outside 1..=255")));
    }
    let mut out = format!("P5\n{} {}\n{}\n", labels.width(), labels.height(), maxval).into_bytes();
    for &v in labels.pixels() {
        if v > maxval {
            return Err(Error::Data(format!("label {v} exceeds maxval {maxval}")));
        }
        out.push(v as u8);
    }
    Ok(out)
}

/// Writes the CSV row block for an assembled prediction's per-label
/// probability means (diagnostic output).
pub fn summarize_probs<S: Scalar>(pred: &GlobalPrediction<S>, registry: &LabelRegistry) -> String {
    let mut out = String::from("channel,label,mean_prob\n");
    let hw = pred.probs.dims()[1] * pred.probs.dims()[2];
    for c in 0..pred.probs.dims()[0] {
        let mean: f64 = pred.probs.plane(c).iter().map(|v| v.widen()).sum::<f64>() / hw as f64;
        let name = if c == 0 { "background" } else { &registry.global_labels()[c - 1] };
        out.push_str(&format!("{c},{name},{}\n", fmt_sig6(mean)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use std::collections::BTreeMap;

    /// Fig-2a-shaped fixture: three sites, a label only site 1 knows and
    /// a label sites 2 and 3 know.
    fn spleen_liver_registry() -> LabelRegistry {
        let globals: Vec<String> = vec!["spleen".into(), "liver".into()];
        let mut sets = BTreeMap::new();
        sets.insert(ClientId::from("s1"), vec!["spleen".into()]);
        sets.insert(ClientId::from("s2"), vec!["liver".into()]);
        sets.insert(ClientId::from("s3"), vec!["liver".into()]);
        LabelRegistry::new(globals, sets).unwrap()
    }

    fn one_pixel_head(id: &str, probs: &[f64]) -> HeadPrediction<f64> {
        HeadPrediction {
            client_id: ClientId::from(id),
            mean_probs: Tensor::from_vec(&[probs.len(), 1, 1], probs.to_vec()).unwrap(),
            scalar_u: Tensor::zeros(&[1, 1]),
        }
    }

    #[test]
    fn align_is_permutation_for_full_head() {
        let globals: Vec<String> = vec!["a".into(), "b".into()];
        let mut sets = BTreeMap::new();
        sets.insert(ClientId::from("c"), vec!["b".into(), "a".into()]);
        let reg = LabelRegistry::new(globals, sets).unwrap();
        let head = Tensor::from_vec(&[3, 1, 1], vec![0.5, 0.3, 0.2]).unwrap();
        let aligned = align_channels(&head, &ClientId::from("c"), &reg).unwrap();
        assert_eq!(aligned.data(), &[0.5, 0.3, 0.2]);
    }

    #[test]
    fn align_zeroes_absent_labels_and_round_trips() {
        let reg = spleen_liver_registry();
        let c = ClientId::from("s2");
        let head = Tensor::from_vec(&[2, 1, 2], vec![0.9, 0.8, 0.1, 0.2]).unwrap();
        let aligned = align_channels(&head, &c, &reg).unwrap();
        // global channels: bg, spleen, liver
        assert_eq!(aligned.plane(0), &[0.9, 0.8]);
        assert_eq!(aligned.plane(1), &[0.0, 0.0]);
        assert_eq!(aligned.plane(2), &[0.1, 0.2]);
        let back = gather_channels(&aligned, &c, &reg).unwrap();
        assert_eq!(back, head);
    }

    #[test]
    fn align_rejects_channel_mismatch() {
        let reg = spleen_liver_registry();
        let head = Tensor::from_vec(&[3, 1, 1], vec![0.3, 0.3, 0.4]).unwrap();
        assert!(align_channels(&head, &ClientId::from("s1"), &reg).is_err());
    }

    #[test]
    fn ensemble_reproduces_figure_scenario() {
        let reg = spleen_liver_registry();
        let heads = vec![
            one_pixel_head("s1", &[0.4, 0.6]),
            one_pixel_head("s2", &[0.9, 0.1]),
            one_pixel_head("s3", &[0.8, 0.2]),
        ];
        let pred = ensemble_average(&heads, &reg, UAgg::Mean).unwrap();
        let bg = pred.probs.data()[0];
        let spleen = pred.probs.data()[1];
        let liver = pred.probs.data()[2];
        assert!((bg - 0.7).abs() < 1e-12);
        assert!((spleen - 0.6).abs() < 1e-12);
        assert!((liver - 0.15).abs() < 1e-12);
        // vanilla argmax picks background
        assert_eq!(pred.labels.pixels(), &[0]);

        // reweighting by u = 0.5 flips the pixel to spleen
        let u = Tensor::filled(&[1, 1], 0.5);
        let fun = funavg_reweight(&pred, &u).unwrap();
        assert!((fun.probs.data()[0] - 0.35).abs() < 1e-12);
        assert_eq!(fun.probs.data()[1], spleen);
        assert_eq!(fun.probs.data()[2], liver);
        assert_eq!(fun.labels.pixels(), &[1]);
    }

    #[test]
    fn single_head_ensemble_equals_aligned_probs() {
        let globals: Vec<String> = vec!["a".into()];
        let mut sets = BTreeMap::new();
        sets.insert(ClientId::from("only"), vec!["a".into()]);
        let reg = LabelRegistry::new(globals, sets).unwrap();
        let heads = vec![one_pixel_head("only", &[0.3, 0.7])];
        let pred = ensemble_average(&heads, &reg, UAgg::Mean).unwrap();
        assert_eq!(pred.probs.data(), &[0.3, 0.7]);
        assert_eq!(pred.labels.pixels(), &[1]);
    }

    #[test]
    fn identical_full_heads_are_idempotent() {
        let globals: Vec<String> = vec!["a".into(), "b".into()];
        let mut sets = BTreeMap::new();
        sets.insert(ClientId::from("x"), globals.clone());
        sets.insert(ClientId::from("y"), globals.clone());
        let reg = LabelRegistry::new(globals, sets).unwrap();
        let heads = vec![
            one_pixel_head("x", &[0.2, 0.5, 0.3]),
            one_pixel_head("y", &[0.2, 0.5, 0.3]),
        ];
        let pred = ensemble_average(&heads, &reg, UAgg::Mean).unwrap();
        for (g, e) in pred.probs.data().iter().zip([0.2, 0.5, 0.3]) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn ensemble_with_orphaned_label_errors() {
        let reg = spleen_liver_registry();
        // omit the only spleen head
        let heads = vec![one_pixel_head("s2", &[0.9, 0.1]), one_pixel_head("s3", &[0.8, 0.2])];
        let err = ensemble_average(&heads, &reg, UAgg::Mean).unwrap_err();
        assert!(err.to_string().contains("spleen"), "{err}");
    }

    #[test]
    fn ensemble_u_mean_and_max() {
        let reg = spleen_liver_registry();
        let mut heads = vec![
            one_pixel_head("s1", &[0.4, 0.6]),
            one_pixel_head("s2", &[0.9, 0.1]),
            one_pixel_head("s3", &[0.8, 0.2]),
        ];
        heads[0].scalar_u = Tensor::filled(&[1, 1], 0.9);
        heads[1].scalar_u = Tensor::filled(&[1, 1], 0.3);
        heads[2].scalar_u = Tensor::filled(&[1, 1], 0.3);
        let mean = ensemble_average(&heads, &reg, UAgg::Mean).unwrap();
        assert!((mean.ensemble_u.data()[0] - 0.5).abs() < 1e-12);
        let max = ensemble_average(&heads, &reg, UAgg::Max).unwrap();
        assert_eq!(max.ensemble_u.data()[0], 0.9);
    }

    #[test]
    fn reweight_extremes() {
        let reg = spleen_liver_registry();
        let heads = vec![
            one_pixel_head("s1", &[0.4, 0.6]),
            one_pixel_head("s2", &[0.9, 0.1]),
            one_pixel_head("s3", &[0.8, 0.2]),
        ];
        let pred = ensemble_average(&heads, &reg, UAgg::Mean).unwrap();
        // u = 0 leaves the prediction identical
        let fun = funavg_reweight(&pred, &Tensor::zeros(&[1, 1])).unwrap();
        assert_eq!(fun.probs.data(), pred.probs.data());
        assert_eq!(fun.labels, pred.labels);
        // u = 1 kills background entirely
        let fun = funavg_reweight(&pred, &Tensor::filled(&[1, 1], 1.0)).unwrap();
        assert_eq!(fun.probs.data()[0], 0.0);
        assert_eq!(fun.labels.pixels(), &[1]);
        // out-of-range u rejected
        assert!(funavg_reweight(&pred, &Tensor::filled(&[1, 1], 1.5)).is_err());
    }

    #[test]
    fn predict_tie_breaks_toward_background() {
        let probs = Tensor::from_vec(&[3, 1, 2], vec![0.5, 0.2, 0.5, 0.5, 0.3, 0.2]).unwrap();
        let labels = predict(&probs);
        // pixel 0: bg ties label1 at 0.5 -> background wins
        // pixel 1: label1 wins at 0.5
        assert_eq!(labels.pixels(), &[0, 1]);

        // scale invariance of the argmax
        let scaled = probs.map(|v| v * 3.5);
        assert_eq!(predict(&scaled), labels);

        // constant dominant channel
        let probs = Tensor::from_vec(&[2, 1, 3], vec![0.1, 0.1, 0.1, 0.9, 0.9, 0.9]).unwrap();
        assert_eq!(predict(&probs).pixels(), &[1, 1, 1]);
    }

    #[test]
    fn reweight_changes_only_vanilla_background_pixels() {
        // fuzz: random assembled predictions and u maps
        let mut r = crate::rng::RngState::new(123, 0).rng();
        for _ in 0..200 {
            let c = r.gen_range(2..6usize);
            let hw = 16usize;
            let mut data = Vec::with_capacity(c * hw);
            for _ in 0..c * hw {
                data.push(r.gen_range(0.0..1.0));
            }
            let probs = Tensor::<f64>::from_vec(&[c, 4, 4], data).unwrap();
            let labels = predict(&probs);
            let pred = GlobalPrediction {
                probs,
                ensemble_u: Tensor::zeros(&[4, 4]),
                labels,
                mode: EnsembleMode::Vanilla,
            };
            let u = {
                let mut d = Vec::with_capacity(hw);
                for _ in 0..hw {
                    d.push(r.gen_range(0.0..=1.0));
                }
                Tensor::from_vec(&[4, 4], d).unwrap()
            };
            let fun = funavg_reweight(&pred, &u).unwrap();
            for p in 0..hw {
                let before = pred.labels.pixels()[p];
                let after = fun.labels.pixels()[p];
                if after != before {
                    assert_eq!(before, 0, "non-background pixel changed label");
                }
                // structure channels bitwise untouched
                for ch in 1..c {
                    assert_eq!(
                        pred.probs.data()[ch * hw + p].to_bits(),
                        fun.probs.data()[ch * hw + p].to_bits()
                    );
                }
            }
        }
    }

    #[test]
    fn pgm_export_shape() {
        let labels = LabelMap::from_vec(2, 3, vec![0, 1, 2, 3, 4, 5]).unwrap();
        let pgm = labels_to_pgm(&labels, 5).unwrap();
        assert!(pgm.starts_with(b"P5\n3 2\n5\n"));
        assert_eq!(pgm.len(), b"P5\n3 2\n5\n".len() + 6);
        assert!(labels_to_pgm(&labels, 4).is_err());
        assert!(labels_to_pgm(&labels, 300).is_err());
    }
}
