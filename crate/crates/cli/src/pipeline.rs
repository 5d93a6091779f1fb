//! The experiment pipeline behind the CLI verbs: generate, train,
//! infer, evaluate, reproduce. A run directory holds one seed's
//! artifacts; reproduce drives the full matrix over a seed list and
//! aggregates across seeds.

use crate::config::{OthersScope, RunConfig};
use crate::dataset::{generate, read_dataset, write_dataset, GeneratedDataset};
use crate::error::{CliError, Result};
use crate::manifest::{
    hash_bytes, hash_dir, stage_is_current, write_stage_mark, RunManifest, StageMark,
};
use crate::threads::{par_map, RayonRunner};
use funavg_core::fed::{
    load_state, prepare_train_set, run_centralized, run_federation, run_local_only, save_state,
    ClientTrainSet, FedConfig, FedState,
};
use funavg_core::funt;
use funavg_core::infer::{
    ensemble_average, funavg_reweight, labels_to_pgm, predict, EnsembleMode, GlobalPrediction,
    HeadPrediction,
};
use funavg_core::metrics::{
    dice_opt, improvement_csv, improvement_report, wilcoxon_csv, wilcoxon_signed_rank, DiceRecord,
    DiceTable, Method, WilcoxonRow,
};
use funavg_core::nn::{forward, softmax_channels, Mode};
use funavg_core::numfmt::fmt_sig6;
use funavg_core::registry::ClientId;
use funavg_core::rng::{tags, RngState};
use funavg_core::scalar::{Dtype, Scalar};
use funavg_core::tensor::{LabelMap, Tensor};
use funavg_core::uq::{ece, mc_sample, mean_prob, normalize_u, uncertainty_decompose};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Federated,
    Centralized,
    Local,
}

impl TrainMode {
    pub fn dir_name(&self) -> &'static str {
        match self {
            TrainMode::Federated => "train_federated",
            TrainMode::Centralized => "train_centralized",
            TrainMode::Local => "train_local",
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "federated" => Ok(TrainMode::Federated),
            "centralized" => Ok(TrainMode::Centralized),
            "local" => Ok(TrainMode::Local),
            other => Err(format!("unknown train mode '{other}'")),
        }
    }
}

pub fn sample_id(client: &ClientId, index: usize) -> String {
    format!("{client}_{index:04}")
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

/// Generates the dataset for one seed into `<run_dir>/dataset`.
pub fn cmd_generate(cfg: &RunConfig, run_dir: &Path, seed: u64) -> Result<()> {
    let ds = generate(cfg, seed)?;
    let dir = run_dir.join("dataset");
    std::fs::create_dir_all(&dir)?;
    write_dataset(&dir, &ds, cfg)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn fed_config(cfg: &RunConfig, seed: u64) -> FedConfig {
    FedConfig {
        rounds: cfg.federation.rounds,
        local_epochs: cfg.federation.epochs,
        lr: cfg.federation.lr,
        batch_size: cfg.federation.batch,
        dropout_p: cfg.model.dropout_p,
        seed,
        dtype: cfg.model.dtype,
    }
}

fn losses_csv(log: &[funavg_core::fed::LossRecord]) -> String {
    let mut out = String::from("round,epoch,client,loss\n");
    for r in log {
        out.push_str(&format!("{},{},{},{}\n", r.round, r.epoch, r.client, fmt_sig6(r.loss)));
    }
    out
}

fn train_typed<S: Scalar>(
    cfg: &RunConfig,
    ds: &GeneratedDataset,
    run_dir: &Path,
    mode: TrainMode,
    seed: u64,
) -> Result<()> {
    let spec = cfg.backbone_spec()?;
    let fc = fed_config(cfg, seed);
    let train_sets: Vec<ClientTrainSet<S>> = ds
        .clients
        .iter()
        .map(|c| prepare_train_set::<S>(c, &ds.registry))
        .collect::<funavg_core::Result<_>>()
        .map_err(CliError::from)?;
    let echo = format!("config_sha256={}\n{}", hash_bytes(cfg.echo().as_bytes()), cfg.echo());
    let out = run_dir.join(mode.dir_name());
    std::fs::create_dir_all(&out)?;
    match mode {
        TrainMode::Federated => {
            let state = run_federation(&fc, &spec, &train_sets, &RayonRunner).map_err(CliError::from)?;
            std::fs::write(out.join("losses.csv"), losses_csv(&state.loss_log))?;
            save_state(&out, &state, &echo).map_err(CliError::from)?;
        }
        TrainMode::Centralized => {
            let state = run_centralized(&fc, &spec, &train_sets).map_err(CliError::from)?;
            std::fs::write(out.join("losses.csv"), losses_csv(&state.loss_log))?;
            save_state(&out, &state, &echo).map_err(CliError::from)?;
        }
        TrainMode::Local => {
            let states = run_local_only(&fc, &spec, &train_sets, &RayonRunner).map_err(CliError::from)?;
            let mut log = Vec::new();
            for (cid, state) in &states {
                log.extend(state.loss_log.iter().cloned());
                save_state(&out.join(cid.to_string()), state, &echo).map_err(CliError::from)?;
            }
            log.sort_by(|a, b| {
                (a.round, a.epoch, a.client.clone()).cmp(&(b.round, b.epoch, b.client.clone()))
            });
            std::fs::write(out.join("losses.csv"), losses_csv(&log))?;
        }
    }
    Ok(())
}

/// Trains one mode on `<run_dir>/dataset`, writing checkpoints and the
/// per-(round, epoch, client) loss log.
pub fn cmd_train(cfg: &RunConfig, run_dir: &Path, mode: TrainMode, seed: u64) -> Result<()> {
    let dataset_dir = run_dir.join("dataset");
    if !dataset_dir.join("manifest.txt").exists() {
        return Err(CliError::Data(format!(
            "no dataset at {}; run `funavg generate` first",
            dataset_dir.display()
        )));
    }
    let ds = read_dataset(&dataset_dir)?;
    match cfg.model.dtype {
        Dtype::F32 => train_typed::<f32>(cfg, &ds, run_dir, mode, seed),
        Dtype::F64 => train_typed::<f64>(cfg, &ds, run_dir, mode, seed),
    }
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

fn checkpoint_kind(checkpoint: &Path) -> String {
    let name = checkpoint
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_else(|| "checkpoint".into());
    name.strip_prefix("train_").map(str::to_string).unwrap_or(name)
}

struct CaseOutput<S: Scalar> {
    id: String,
    preds: Vec<(EnsembleMode, GlobalPrediction<S>)>,
}

fn infer_ensemble_typed<S: Scalar>(
    cfg: &RunConfig,
    ds: &GeneratedDataset,
    run_dir: &Path,
    checkpoint: &Path,
    modes: &[EnsembleMode],
    seed: u64,
) -> Result<()> {
    let spec = cfg.backbone_spec()?;
    let client_ids: Vec<ClientId> = ds.clients.iter().map(|c| c.client_id.clone()).collect();
    let state: FedState<S> = load_state(checkpoint, &spec, &client_ids).map_err(CliError::from)?;
    let model = state.model();
    for cid in &client_ids {
        let expect = ds.registry.head_channels(cid).map_err(CliError::from)?;
        let got = model.head(cid).map_err(CliError::from)?.out_channels();
        if got != expect {
            return Err(CliError::Data(format!(
                "head '{cid}' has {got} channels but the registry expects {expect}"
            )));
        }
    }
    let kind = checkpoint_kind(checkpoint);
    let out_dirs: Vec<(EnsembleMode, PathBuf)> = modes
        .iter()
        .map(|m| (*m, run_dir.join(format!("infer_{kind}_{m}"))))
        .collect();
    for (_, d) in &out_dirs {
        std::fs::create_dir_all(d)?;
    }
    let infer_rng = RngState::new(seed, 0).derive(tags::INFER);
    let t_count = cfg.uq.t;

    // jobs: one per (test client, case)
    struct Job<'a> {
        id: String,
        image: &'a Tensor<f32>,
        rng: RngState,
    }
    let mut jobs = Vec::new();
    for (ci, c) in ds.clients.iter().enumerate() {
        for (case, sample) in c.test.iter().enumerate() {
            let id = sample_id(&c.client_id, c.train.len() + case);
            jobs.push(Job {
                id,
                image: &sample.image,
                rng: infer_rng.derive(ci as u64).derive(case as u64),
            });
        }
    }
    let registry = &ds.registry;
    let outputs: Vec<Result<CaseOutput<S>>> = par_map(jobs, |job| {
        let image = job.image.cast::<S>();
        let mut head_preds = Vec::new();
        for (hi, cid) in client_ids.iter().enumerate() {
            let stack = mc_sample(&model, cid, &image, t_count, job.rng.derive(hi as u64))
                .map_err(CliError::from)?;
            let mean = mean_prob(&stack);
            let maps = uncertainty_decompose(&stack).map_err(CliError::from)?;
            let channels = registry.head_channels(cid).map_err(CliError::from)?;
            let u = normalize_u(&maps, channels, cfg.uq.u_norm).map_err(CliError::from)?;
            head_preds.push(HeadPrediction {
                client_id: cid.clone(),
                mean_probs: mean,
                scalar_u: u,
            });
        }
        let vanilla = ensemble_average(&head_preds, registry, cfg.uq.u_agg).map_err(CliError::from)?;
        let mut preds = Vec::new();
        for (mode, _) in &out_dirs {
            let pred = match mode {
                EnsembleMode::Vanilla => vanilla.clone(),
                EnsembleMode::FunAvg => {
                    funavg_reweight(&vanilla, &vanilla.ensemble_u).map_err(CliError::from)?
                }
            };
            preds.push((*mode, pred));
        }
        Ok(CaseOutput { id: job.id, preds })
    });

    let maxval = registry.global_labels().len() as u32;
    for out in outputs {
        let out = out?;
        for (mode, pred) in out.preds {
            let dir = &out_dirs.iter().find(|(m, _)| *m == mode).expect("mode dir").1;
            funt::write_file(&dir.join(format!("probs_{}.funt", out.id)), &pred.probs)
                .map_err(CliError::from)?;
            funt::write_file(
                &dir.join(format!("labels_{}.funt", out.id)),
                &pred.labels.to_tensor(),
            )
            .map_err(CliError::from)?;
            funt::write_file(&dir.join(format!("u_{}.funt", out.id)), &pred.ensemble_u)
                .map_err(CliError::from)?;
            let pgm = labels_to_pgm(&pred.labels, maxval.max(1)).map_err(CliError::from)?;
            std::fs::write(dir.join(format!("labels_{}.pgm", out.id)), pgm)?;
        }
    }
    Ok(())
}

/// Ensemble inference over the test split: per image, MC sampling for
/// every head, uncertainty decomposition, channel assembly, and (for
/// the funavg mode) background reweighting. Computing both modes in
/// one call shares the MC stacks; outputs are identical to separate
/// invocations because the sampling rng depends only on (seed, case).
pub fn cmd_infer(
    cfg: &RunConfig,
    run_dir: &Path,
    checkpoint: &Path,
    modes: &[EnsembleMode],
    seed: u64,
) -> Result<()> {
    let ds = read_dataset(&run_dir.join("dataset"))?;
    match cfg.model.dtype {
        Dtype::F32 => infer_ensemble_typed::<f32>(cfg, &ds, run_dir, checkpoint, modes, seed),
        Dtype::F64 => infer_ensemble_typed::<f64>(cfg, &ds, run_dir, checkpoint, modes, seed),
    }
}

fn infer_local_typed<S: Scalar>(cfg: &RunConfig, ds: &GeneratedDataset, run_dir: &Path) -> Result<()> {
    let spec = cfg.backbone_spec()?;
    let local_root = run_dir.join("train_local");
    for model_client in ds.clients.iter().map(|c| c.client_id.clone()) {
        let ckpt = local_root.join(model_client.to_string());
        if !ckpt.exists() {
            return Err(CliError::Data(format!(
                "missing local checkpoint for client '{model_client}' at {}",
                ckpt.display()
            )));
        }
        let state: FedState<S> =
            load_state(&ckpt, &spec, std::slice::from_ref(&model_client)).map_err(CliError::from)?;
        let model = state.model();
        let out = run_dir.join("infer_local").join(model_client.to_string());
        std::fs::create_dir_all(&out)?;
        // channel translation: local head channel -> global label id
        let mut lut = Vec::new();
        for local in 0..ds.registry.head_channels(&model_client).map_err(CliError::from)? {
            lut.push(
                ds.registry
                    .global_channel_of_local(&model_client, local)
                    .map_err(CliError::from)? as u32,
            );
        }
        struct Job<'a> {
            id: String,
            image: &'a Tensor<f32>,
        }
        let mut jobs = Vec::new();
        for c in &ds.clients {
            for (case, sample) in c.test.iter().enumerate() {
                jobs.push(Job {
                    id: sample_id(&c.client_id, c.train.len() + case),
                    image: &sample.image,
                });
            }
        }
        let model_ref = &model;
        let lut_ref = &lut;
        let mc = &model_client;
        let results: Vec<Result<(String, LabelMap)>> = par_map(jobs, |job| {
            let image = job.image.cast::<S>();
            let logits = forward(model_ref, mc, &image, Mode::Deterministic, RngState::new(0, 0))
                .map_err(CliError::from)?;
            let probs = softmax_channels(&logits);
            let local = predict(&probs);
            let mut mapped = local.clone();
            for v in mapped.pixels_mut() {
                *v = lut_ref[*v as usize];
            }
            Ok((job.id, mapped))
        });
        for r in results {
            let (id, labels) = r?;
            funt::write_file(&out.join(format!("labels_{id}.funt")), &labels.to_tensor())
                .map_err(CliError::from)?;
        }
    }
    Ok(())
}

/// Per-client local models applied to every client's test split with a
/// deterministic forward; predictions are stored with global label ids.
pub fn cmd_infer_local(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    let ds = read_dataset(&run_dir.join("dataset"))?;
    match cfg.model.dtype {
        Dtype::F32 => infer_local_typed::<f32>(cfg, &ds, run_dir),
        Dtype::F64 => infer_local_typed::<f64>(cfg, &ds, run_dir),
    }
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

fn load_labels(path: &Path) -> Result<LabelMap> {
    let t = funt::read_file_as::<f32>(path).map_err(CliError::from)?;
    LabelMap::from_tensor(&t).map_err(CliError::from)
}

const ENSEMBLE_DIRS: [(Method, &str); 4] = [
    (Method::CenAvg, "infer_centralized_vanilla"),
    (Method::CunAvg, "infer_centralized_funavg"),
    (Method::FedAvg, "infer_federated_vanilla"),
    (Method::FunAvg, "infer_federated_funavg"),
];

/// Builds the Dice table, Wilcoxon tests, calibration reports, and the
/// improvement-by-label file from the prediction directories.
pub fn cmd_evaluate(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    let ds = read_dataset(&run_dir.join("dataset"))?;
    let registry = &ds.registry;
    let report_dir = run_dir.join("report");
    std::fs::create_dir_all(&report_dir)?;
    let both_empty = cfg.eval.dice_both_empty_one;
    let global: Vec<(String, u32)> = registry
        .global_labels()
        .iter()
        .enumerate()
        .map(|(i, l)| (l.clone(), i as u32 + 1))
        .collect();

    let mut table = DiceTable::default();
    // per (method, client): per-case mean dice, for paired testing
    let mut case_means: BTreeMap<(Method, ClientId), Vec<f64>> = BTreeMap::new();
    let mut ece_rows = String::from("method,n,ece\n");

    for (method, dirname) in ENSEMBLE_DIRS {
        let dir = run_dir.join(dirname);
        if !dir.exists() {
            return Err(CliError::Data(format!(
                "missing predictions at {}; run `funavg infer` first",
                dir.display()
            )));
        }
        let mut confs = Vec::new();
        let mut correct = Vec::new();
        for c in &ds.clients {
            for (case, sample) in c.test.iter().enumerate() {
                let id = sample_id(&c.client_id, c.train.len() + case);
                let pred = load_labels(&dir.join(format!("labels_{id}.funt")))?;
                let gt = &sample.full_labels;
                if pred.height() != gt.height() || pred.width() != gt.width() {
                    return Err(CliError::Data(format!(
                        "prediction {id} extent {}x{} does not match ground truth {}x{}",
                        pred.height(),
                        pred.width(),
                        gt.height(),
                        gt.width()
                    )));
                }
                let mut per_case = Vec::new();
                for (label, channel) in &global {
                    if let Some(d) = dice_opt(&pred, gt, *channel, both_empty) {
                        per_case.push(d);
                        table.push(DiceRecord {
                            method,
                            client: c.client_id.clone(),
                            label: label.clone(),
                            case_index: case,
                            dice: d,
                        });
                    }
                }
                if !per_case.is_empty() {
                    let m = per_case.iter().sum::<f64>() / per_case.len() as f64;
                    case_means.entry((method, c.client_id.clone())).or_default().push(m);
                }

                // calibration inputs from the assembled probabilities
                let probs = funt::read_file(&dir.join(format!("probs_{id}.funt")))
                    .map_err(CliError::from)?
                    .to_f64();
                let (ch, h, w) = (probs.dims()[0], probs.dims()[1], probs.dims()[2]);
                let hw = h * w;
                for p in 0..hw {
                    let mut best = 0usize;
                    let mut best_v = probs.data()[p];
                    for k in 1..ch {
                        let v = probs.data()[k * hw + p];
                        if v > best_v {
                            best_v = v;
                            best = k;
                        }
                    }
                    confs.push(best_v.clamp(0.0, 1.0));
                    correct.push(best as u32 == gt.pixels()[p]);
                }
            }
        }
        let report = ece(&confs, &correct, cfg.uq.ece_bins).map_err(CliError::from)?;
        std::fs::write(report_dir.join(format!("reliability_{method}.csv")), report.to_csv())?;
        ece_rows.push_str(&format!("{method},{},{}\n", report.n, fmt_sig6(report.ece)));
    }

    // Same / Others from the per-client local models
    let local_root = run_dir.join("infer_local");
    for model_c in &ds.clients {
        let mdir = local_root.join(model_c.client_id.to_string());
        if !mdir.exists() {
            return Err(CliError::Data(format!(
                "missing local predictions at {}; run `funavg infer --mode local`",
                mdir.display()
            )));
        }
        let own_labels: Vec<&(String, u32)> = global
            .iter()
            .filter(|(l, _)| registry.has_label(&model_c.client_id, l))
            .collect();
        for (case, sample) in model_c.test.iter().enumerate() {
            let id = sample_id(&model_c.client_id, model_c.train.len() + case);
            let pred = load_labels(&mdir.join(format!("labels_{id}.funt")))?;
            for (label, channel) in &own_labels {
                if let Some(d) = dice_opt(&pred, &sample.full_labels, *channel, both_empty) {
                    table.push(DiceRecord {
                        method: Method::Same,
                        client: model_c.client_id.clone(),
                        label: label.clone(),
                        case_index: case,
                        dice: d,
                    });
                }
            }
        }
        for (ti, test_c) in ds.clients.iter().enumerate() {
            if test_c.client_id == model_c.client_id {
                continue;
            }
            let scope: Vec<&(String, u32)> = match cfg.eval.others_scope {
                OthersScope::SiteLabels => global
                    .iter()
                    .filter(|(l, _)| registry.has_label(&test_c.client_id, l))
                    .collect(),
                OthersScope::ModelLabels => own_labels.clone(),
            };
            for (case, sample) in test_c.test.iter().enumerate() {
                let id = sample_id(&test_c.client_id, test_c.train.len() + case);
                let pred = load_labels(&mdir.join(format!("labels_{id}.funt")))?;
                for (label, channel) in &scope {
                    if let Some(d) = dice_opt(&pred, &sample.full_labels, *channel, both_empty) {
                        table.push(DiceRecord {
                            method: Method::Others,
                            client: test_c.client_id.clone(),
                            label: label.clone(),
                            case_index: case * ds.clients.len() + ti,
                            dice: d,
                        });
                    }
                }
            }
        }
    }

    // paired tests per dataset and pooled, vanilla vs uncertainty weighted
    let mut wrows = Vec::new();
    for (a, b) in [(Method::CenAvg, Method::CunAvg), (Method::FedAvg, Method::FunAvg)] {
        let mut pooled_a = Vec::new();
        let mut pooled_b = Vec::new();
        for c in &ds.clients {
            let xs = case_means.get(&(a, c.client_id.clone())).cloned().unwrap_or_default();
            let ys = case_means.get(&(b, c.client_id.clone())).cloned().unwrap_or_default();
            pooled_a.extend_from_slice(&xs);
            pooled_b.extend_from_slice(&ys);
            wrows.push(WilcoxonRow {
                dataset: c.client_id.to_string(),
                method_a: a,
                method_b: b,
                test: wilcoxon_signed_rank(&xs, &ys).map_err(|e| e.to_string()),
            });
        }
        wrows.push(WilcoxonRow {
            dataset: "all".into(),
            method_a: a,
            method_b: b,
            test: wilcoxon_signed_rank(&pooled_a, &pooled_b).map_err(|e| e.to_string()),
        });
    }

    std::fs::write(report_dir.join("dice_table.csv"), table.to_csv())?;
    std::fs::write(report_dir.join("summary.csv"), table.summary_csv())?;
    std::fs::write(report_dir.join("wilcoxon.csv"), wilcoxon_csv(&wrows))?;
    std::fs::write(report_dir.join("ece.csv"), ece_rows)?;
    let rows = improvement_report(&table, &table, registry).map_err(CliError::from)?;
    std::fs::write(report_dir.join("improvement.csv"), improvement_csv(&rows))?;
    let meta = format!(
        "pairing=per_test_case\nothers_scope={}\ndice_both_empty={}\nconfidence=max_channel_of_assembled_probs\naggregation=per_dataset_mean_then_row_mean\n",
        match cfg.eval.others_scope {
            OthersScope::SiteLabels => "site_labels",
            OthersScope::ModelLabels => "model_labels",
        },
        if both_empty { "one" } else { "skip" }
    );
    std::fs::write(report_dir.join("report_meta.txt"), meta)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// reproduce
// ---------------------------------------------------------------------------

fn run_stage(
    dir: &Path,
    name: &str,
    config_hash: &str,
    resume: bool,
    manifest: &mut RunManifest,
    body: impl FnOnce() -> Result<()>,
) -> Result<()> {
    if resume && stage_is_current(dir, name, config_hash) {
        let mark = crate::manifest::read_stage_mark(dir).expect("mark read by stage_is_current");
        manifest.add(mark);
        eprintln!("[skip] {name} (up to date)");
        return Ok(());
    }
    if dir.exists() {
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::create_dir_all(dir)?;
    let started = Instant::now();
    body().map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("stage {name}: {m}")),
        CliError::Data(m) => CliError::Data(format!("stage {name}: {m}")),
        CliError::Numeric(m) => CliError::Numeric(format!("stage {name}: {m}")),
        CliError::Io(m) => CliError::Io(format!("stage {name}: {m}")),
    })?;
    let mark = StageMark {
        name: name.to_string(),
        config_hash: config_hash.to_string(),
        content_hash: hash_dir(dir)?,
        wall_secs: started.elapsed().as_secs_f64(),
    };
    write_stage_mark(dir, &mark)?;
    eprintln!("[done] {name} ({:.1}s)", mark.wall_secs);
    manifest.add(mark);
    Ok(())
}

/// Full pipeline over the configured seed list: generate, train all
/// three modes, infer both averaging modes for both trained ensembles
/// plus the local models, evaluate, then aggregate across seeds.
pub fn cmd_reproduce(cfg: &RunConfig, out_root: &Path, resume: bool, seed_override: Option<u64>) -> Result<()> {
    let seeds: Vec<u64> = match seed_override {
        Some(s) => vec![s],
        None => cfg.eval.seeds.clone(),
    };
    std::fs::create_dir_all(out_root)?;
    let mut manifest = RunManifest::default();
    for &seed in &seeds {
        let run_dir = out_root.join(format!("seed_{seed}"));
        std::fs::create_dir_all(&run_dir)?;
        let stage_hash = |stage: &str| {
            hash_bytes(format!("{}\nseed={seed}\nstage={stage}", cfg.echo()).as_bytes())
        };
        run_stage(
            &run_dir.join("dataset"),
            &format!("seed{seed}.generate"),
            &stage_hash("generate"),
            resume,
            &mut manifest,
            || cmd_generate(cfg, &run_dir, seed),
        )?;
        for mode in [TrainMode::Local, TrainMode::Centralized, TrainMode::Federated] {
            run_stage(
                &run_dir.join(mode.dir_name()),
                &format!("seed{seed}.{}", mode.dir_name()),
                &stage_hash(mode.dir_name()),
                resume,
                &mut manifest,
                || cmd_train(cfg, &run_dir, mode, seed),
            )?;
        }
        for (kind, ckpt) in [("federated", "train_federated"), ("centralized", "train_centralized")] {
            // both averaging modes share the MC stacks; stage covers two dirs
            let vanilla_dir = run_dir.join(format!("infer_{kind}_vanilla"));
            let funavg_dir = run_dir.join(format!("infer_{kind}_funavg"));
            let name = format!("seed{seed}.infer_{kind}");
            let h = stage_hash(&format!("infer_{kind}"));
            let current = resume
                && stage_is_current(&vanilla_dir, &name, &h)
                && funavg_dir.exists();
            if current {
                manifest.add(crate::manifest::read_stage_mark(&vanilla_dir).expect("mark"));
                eprintln!("[skip] {name} (up to date)");
                continue;
            }
            for d in [&vanilla_dir, &funavg_dir] {
                if d.exists() {
                    std::fs::remove_dir_all(d)?;
                }
            }
            let started = Instant::now();
            cmd_infer(
                cfg,
                &run_dir,
                &run_dir.join(ckpt),
                &[EnsembleMode::Vanilla, EnsembleMode::FunAvg],
                seed,
            )?;
            let mark = StageMark {
                name: name.clone(),
                config_hash: h,
                content_hash: hash_dir(&vanilla_dir)?,
                wall_secs: started.elapsed().as_secs_f64(),
            };
            write_stage_mark(&vanilla_dir, &mark)?;
            eprintln!("[done] {name} ({:.1}s)", mark.wall_secs);
            manifest.add(mark);
        }
        run_stage(
            &run_dir.join("infer_local"),
            &format!("seed{seed}.infer_local"),
            &stage_hash("infer_local"),
            resume,
            &mut manifest,
            || cmd_infer_local(cfg, &run_dir),
        )?;
        run_stage(
            &run_dir.join("report"),
            &format!("seed{seed}.evaluate"),
            &stage_hash("evaluate"),
            resume,
            &mut manifest,
            || cmd_evaluate(cfg, &run_dir),
        )?;
    }
    aggregate_seeds(cfg, out_root, &seeds)?;
    manifest.write(&out_root.join("run_manifest.txt"), &cfg.echo())?;
    Ok(())
}

/// Cross-seed aggregation: mean and sd per summary cell, per
/// improvement row, and per ECE entry.
fn aggregate_seeds(cfg: &RunConfig, out_root: &Path, seeds: &[u64]) -> Result<()> {
    use funavg_core::metrics::{mean_sd, parse_summary_csv};
    let agg_dir = out_root.join("aggregate");
    std::fs::create_dir_all(&agg_dir)?;

    // summary cells
    let mut cells: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut cell_order: Vec<(String, String)> = Vec::new();
    for &seed in seeds {
        let text = std::fs::read_to_string(
            out_root.join(format!("seed_{seed}")).join("report/summary.csv"),
        )?;
        // preserve first-seen emission order for stable output
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, ',');
            let m = parts.next().unwrap_or_default().to_string();
            let c = parts.next().unwrap_or_default().to_string();
            let key = (m, c);
            if !cell_order.contains(&key) {
                cell_order.push(key);
            }
        }
        for (k, v) in parse_summary_csv(&text).map_err(CliError::from)? {
            cells.entry(k).or_default().push(v);
        }
    }
    let mut out = String::from("method,column,mean,sd,n_seeds\n");
    for key in &cell_order {
        if let Some(vals) = cells.get(key) {
            let (m, s) = mean_sd(vals);
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                key.0,
                key.1,
                fmt_sig6(m),
                fmt_sig6(s),
                vals.len()
            ));
        }
    }
    std::fs::write(agg_dir.join("summary_mean_sd.csv"), out)?;

    // improvement rows keyed by label
    let registry = cfg.registry()?;
    let counts = registry.presence_counts();
    let mut fed: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut fun: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for &seed in seeds {
        let text = std::fs::read_to_string(
            out_root.join(format!("seed_{seed}")).join("report/improvement.csv"),
        )?;
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 5 {
                return Err(CliError::Data(format!("improvement.csv line malformed: {line}")));
            }
            let label = parts[0].to_string();
            let fed_v: f64 = parts[2].parse().map_err(|e| CliError::Data(format!("{e}")))?;
            let fun_v: f64 = parts[3].parse().map_err(|e| CliError::Data(format!("{e}")))?;
            fed.entry(label.clone()).or_default().push(fed_v);
            fun.entry(label).or_default().push(fun_v);
        }
    }
    let mut rows: Vec<(u32, String)> = registry
        .global_labels()
        .iter()
        .enumerate()
        .map(|(i, l)| (counts[i], l.clone()))
        .collect();
    rows.sort_by(|a, b| a.0.cmp(&b.0));
    let mut out = String::from("label,k,dice_fed_mean,dice_fun_mean,delta_mean,delta_sd,n_seeds\n");
    for (k, label) in rows {
        let fed_vals = fed.get(&label).cloned().unwrap_or_default();
        let fun_vals = fun.get(&label).cloned().unwrap_or_default();
        if fed_vals.is_empty() {
            continue;
        }
        let deltas: Vec<f64> = fed_vals.iter().zip(&fun_vals).map(|(a, b)| b - a).collect();
        let (fm, _) = mean_sd(&fed_vals);
        let (um, _) = mean_sd(&fun_vals);
        let (dm, dsd) = mean_sd(&deltas);
        out.push_str(&format!(
            "{label},{k},{},{},{},{},{}\n",
            fmt_sig6(fm),
            fmt_sig6(um),
            fmt_sig6(dm),
            fmt_sig6(dsd),
            deltas.len()
        ));
    }
    std::fs::write(agg_dir.join("improvement_mean_sd.csv"), out)?;

    // calibration
    let mut eces: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for &seed in seeds {
        let text =
            std::fs::read_to_string(out_root.join(format!("seed_{seed}")).join("report/ece.csv"))?;
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            let v: f64 = parts[2].parse().map_err(|e| CliError::Data(format!("{e}")))?;
            eces.entry(parts[0].to_string()).or_default().push(v);
        }
    }
    let mut out = String::from("method,ece_mean,ece_sd,n_seeds\n");
    for (m, vals) in &eces {
        let (mean, sd) = mean_sd(vals);
        out.push_str(&format!("{m},{},{},{}\n", fmt_sig6(mean), fmt_sig6(sd), vals.len()));
    }
    std::fs::write(agg_dir.join("ece_mean_sd.csv"), out)?;
    Ok(())
}
