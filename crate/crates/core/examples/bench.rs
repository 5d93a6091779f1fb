use funavg_core::fed::*;
use funavg_core::metrics::dice;
use funavg_core::nn::*;
use funavg_core::registry::{ClientId, LabelRegistry};
use funavg_core::rng::{tags, RngState};
use funavg_core::scalar::Dtype;
use funavg_core::synth::*;
use funavg_core::infer::predict;
use funavg_core::tensor::Tensor;
use std::collections::BTreeMap;
use std::time::Instant;

fn main() {
    let globals: Vec<String> = ["disk","square","ellipse","ring","bar"].iter().map(|s| s.to_string()).collect();
    let mut sets = BTreeMap::new();
    sets.insert(ClientId::from("c"), globals.clone());
    let reg = LabelRegistry::new(globals, sets).unwrap();
    let cid = ClientId::from("c");
    let world = make_world(RngState::new(7, 0).derive(tags::WORLD), 40, 64, &reg).unwrap();
    let masked: Vec<Sample> = world.iter().map(|s| mask_labels(s, reg.client_label_list(&cid).unwrap(), &reg).unwrap()).collect();
    let (train, test) = split_train_test(masked, 0.8, RngState::new(7, 0).derive(tags::SPLIT)).unwrap();
    let ds = ClientDataset { client_id: cid.clone(), train, test: test.clone() };
    let tset = prepare_train_set::<f32>(&ds, &reg).unwrap();

    for lr in [0.1f64, 0.3, 0.6, 1.0] {
        let cfg = FedConfig { rounds: 1, local_epochs: 1, lr, batch_size: 4, dropout_p: 0.25, seed: 7, dtype: Dtype::F32 };
        let spec = default_backbone(0.25);
        let mut chan = BTreeMap::new();
        chan.insert(cid.clone(), reg.head_channels(&cid).unwrap());
        let init = init_model::<f32>(&cfg, &spec, &chan).unwrap();
        let mut backbone = init.backbone.clone();
        let mut head = init.heads.values().next().unwrap().clone();
        let t0 = Instant::now();
        let mut report = vec![];
        for chunk in 0..8 {
            let rng = RngState::new(7, 0).derive(tags::TRAIN).derive(chunk as u64).derive(0);
            let (b, h, losses) = local_train(backbone, head, &tset, 4, lr, 4, rng).unwrap();
            backbone = b; head = h;
            // eval mean dice over foreground labels on test set (deterministic forward)
            let model = ModelParams { backbone: backbone.clone(), heads: { let mut m = BTreeMap::new(); m.insert(cid.clone(), head.clone()); m } };
            let mut dices = vec![];
            for s in &test {
                let logits = forward(&model, &cid, &s.image.cast::<f32>(), Mode::Deterministic, RngState::new(0,0)).unwrap();
                let pred = predict(&softmax_channels(&logits));
                for ch in 1..=5u32 { dices.push(dice(&pred, &s.full_labels, ch)); }
            }
            let md = dices.iter().sum::<f64>() / dices.len() as f64;
            report.push(format!("ep{}: loss {:.3} dice {:.3}", (chunk+1)*4, losses.last().unwrap(), md));
        }
        println!("lr={lr}: {} ({:.1}s)", report.join(" | "), t0.elapsed().as_secs_f64());
    }
    let _ = Tensor::<f32>::zeros(&[1]);
}
