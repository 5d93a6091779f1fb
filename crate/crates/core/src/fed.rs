//! Federated training protocol: broadcast the shared backbone, run local
//! SGD per client on its own head, then average backbones weighted by
//! client data size. Centralized and local-only baselines reuse the same
//! machinery so budgets and rng schedules line up.
//!
//! Rng schedule: one master state per run; round r / client i trains
//! with master.derive(TRAIN).derive(r).derive(i), so a one-client
//! federation is bitwise identical to sequential per-round local
//! training, and client work is independent of execution order.

use crate::error::{Error, Result};
use crate::nn::{
    loss_and_grads, sgd_step, Grads, HeadParams, LayerParams, LayerSpec, ModelParams,
};
use crate::registry::{ClientId, LabelRegistry};
use crate::rng::{tags, RngState};
use crate::scalar::{Dtype, Scalar};
use crate::synth::ClientDataset;
use crate::tensor::{LabelMap, Tensor};
use rand::Rng;
use std::collections::BTreeMap;
use std::path::Path;

/// Round structure and optimizer settings for one training run.
#[derive(Debug, Clone)]
pub struct FedConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub dropout_p: f64,
    pub seed: u64,
    pub dtype: Dtype,
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds < 1 {
            return Err(Error::InvalidArgument("rounds must be >= 1".into()));
        }
        if self.local_epochs < 1 {
            return Err(Error::InvalidArgument("local_epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidArgument("dropout_p must be in [0,1)".into()));
        }
        Ok(())
    }
}

/// One training example in a client's local channel space.
#[derive(Debug, Clone)]
pub struct TrainItem<S: Scalar> {
    pub input: Tensor<S>,
    pub target: LabelMap,
}

/// A client's training view: inputs cast to the run dtype, targets
/// rewritten into the client's head channels.
#[derive(Debug, Clone)]
pub struct ClientTrainSet<S: Scalar> {
    pub client_id: ClientId,
    pub head_channels: usize,
    pub items: Vec<TrainItem<S>>,
}

pub fn prepare_train_set<S: Scalar>(
    ds: &ClientDataset,
    registry: &LabelRegistry,
) -> Result<ClientTrainSet<S>> {
    let items = ds
        .train
        .iter()
        .map(|s| {
            let labels = s.client_labels.as_ref().ok_or_else(|| {
                Error::Data(format!("sample of client '{}' has no client labels", ds.client_id))
            })?;
            Ok(TrainItem {
                input: s.image.cast::<S>(),
                target: registry.to_local_targets(&ds.client_id, labels)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClientTrainSet {
        client_id: ds.client_id.clone(),
        head_channels: registry.head_channels(&ds.client_id)?,
        items,
    })
}

/// Trained state after a run: the aggregated backbone, every client's
/// head (never averaged), and the loss trace.
#[derive(Debug, Clone)]
pub struct FedState<S: Scalar> {
    pub backbone: Vec<LayerParams<S>>,
    pub heads: BTreeMap<ClientId, HeadParams<S>>,
    pub round_index: usize,
    pub loss_log: Vec<LossRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub round: usize,
    pub epoch: usize,
    pub client: ClientId,
    pub loss: f64,
}

impl<S: Scalar> FedState<S> {
    pub fn into_model(self) -> ModelParams<S> {
        ModelParams { backbone: self.backbone, heads: self.heads }
    }

    pub fn model(&self) -> ModelParams<S> {
        ModelParams { backbone: self.backbone.clone(), heads: self.heads.clone() }
    }
}

// ---------------------------------------------------------------------------
// Local training
// ---------------------------------------------------------------------------

fn epoch_order(n: usize, rng: RngState) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng.rng();
    for i in (1..n).rev() {
        let j = r.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Mini-batch SGD for `epochs` epochs on one client's data. Batches are
/// reshuffled per epoch from rng.derive(epoch); gradients are averaged
/// over the batch. Deterministic given (inputs, rng).
pub fn local_train<S: Scalar>(
    backbone: Vec<LayerParams<S>>,
    head: HeadParams<S>,
    data: &ClientTrainSet<S>,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    rng: RngState,
) -> Result<(Vec<LayerParams<S>>, HeadParams<S>, Vec<f64>)> {
    if data.items.is_empty() {
        return Err(Error::Data(format!("client '{}' has an empty dataset", data.client_id)));
    }
    if batch_size < 1 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let cid = data.client_id.clone();
    let mut heads = BTreeMap::new();
    heads.insert(cid.clone(), head);
    let mut params = ModelParams { backbone, heads };
    let lr_s = S::of(lr);
    let n = data.items.len();
    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let erng = rng.derive(epoch as u64);
        let order = epoch_order(n, erng.derive(0));
        let mut loss_sum = 0.0f64;
        for (step, batch) in order.chunks(batch_size).enumerate() {
            let mut acc = Grads::zeros_like(&params, &cid)?;
            let scale = S::of(1.0 / batch.len() as f64);
            for (j, &item_idx) in batch.iter().enumerate() {
                let item = &data.items[item_idx];
                let item_rng = erng.derive(1 + (step * batch_size + j) as u64);
                let (loss, grads) =
                    loss_and_grads(&params, &cid, &item.input, &item.target, item_rng)?;
                let loss = loss.widen();
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "training loss diverged for client '{cid}' (round-local epoch {epoch})"
                    )));
                }
                loss_sum += loss;
                acc.accumulate(&grads, scale);
            }
            sgd_step(&mut params, &acc, &cid, lr_s)?;
        }
        epoch_losses.push(loss_sum / n as f64);
    }
    let head = params.heads.remove(&cid).expect("head present");
    Ok((params.backbone, head, epoch_losses))
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

fn congruent<S: Scalar>(a: &[LayerParams<S>], b: &[LayerParams<S>]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.spec == y.spec
                && x.kernel.as_ref().map(Tensor::dims) == y.kernel.as_ref().map(Tensor::dims)
                && x.bias.as_ref().map(Tensor::dims) == y.bias.as_ref().map(Tensor::dims)
        })
}

/// Data-size-weighted mean of backbones: sum_i (n_i / n) theta_i,
/// accumulated elementwise in the order given (callers pass client-id
/// order so 32-bit results are reproducible).
pub fn fedavg_aggregate<S: Scalar>(
    backbones: &[(Vec<LayerParams<S>>, usize)],
) -> Result<Vec<LayerParams<S>>> {
    if backbones.is_empty() {
        return Err(Error::InvalidArgument("no backbones to aggregate".into()));
    }
    for (_, n) in backbones {
        if *n == 0 {
            return Err(Error::InvalidArgument("client weight n_i must be positive".into()));
        }
    }
    let first = &backbones[0].0;
    for (b, _) in &backbones[1..] {
        if !congruent(first, b) {
            return Err(Error::ShapeMismatch("backbones are not shape-congruent".into()));
        }
    }
    if backbones.len() == 1 {
        return Ok(first.clone());
    }
    let total: usize = backbones.iter().map(|(_, n)| n).sum();
    let mut out: Vec<LayerParams<S>> = first
        .iter()
        .map(|l| LayerParams {
            spec: l.spec.clone(),
            kernel: l.kernel.as_ref().map(|k| Tensor::zeros(k.dims())),
            bias: l.bias.as_ref().map(|b| Tensor::zeros(b.dims())),
        })
        .collect();
    for (backbone, n) in backbones {
        let w = S::of(*n as f64 / total as f64);
        for (dst, src) in out.iter_mut().zip(backbone) {
            if let (Some(d), Some(s)) = (dst.kernel.as_mut(), src.kernel.as_ref()) {
                for (dv, &sv) in d.data_mut().iter_mut().zip(s.data()) {
                    *dv = *dv + w * sv;
                }
            }
            if let (Some(d), Some(s)) = (dst.bias.as_mut(), src.bias.as_ref()) {
                for (dv, &sv) in d.data_mut().iter_mut().zip(s.data()) {
                    *dv = *dv + w * sv;
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Round execution
// ---------------------------------------------------------------------------

/// One client's work for one round, self-contained so rounds can fan
/// out across threads.
pub struct LocalTrainJob<S: Scalar> {
    pub client_index: usize,
    pub backbone: Vec<LayerParams<S>>,
    pub head: HeadParams<S>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub rng: RngState,
}

pub struct LocalTrainOutcome<S: Scalar> {
    pub client_index: usize,
    pub backbone: Vec<LayerParams<S>>,
    pub head: HeadParams<S>,
    pub epoch_losses: Vec<f64>,
}

pub fn execute_job<S: Scalar>(
    job: LocalTrainJob<S>,
    data: &ClientTrainSet<S>,
) -> Result<LocalTrainOutcome<S>> {
    let (backbone, head, epoch_losses) = local_train(
        job.backbone,
        job.head,
        data,
        job.epochs,
        job.lr,
        job.batch_size,
        job.rng,
    )?;
    Ok(LocalTrainOutcome { client_index: job.client_index, backbone, head, epoch_losses })
}

/// Executes the independent client jobs of one round. Implementations
/// may run them concurrently but must return outcomes for all jobs;
/// results are ordered by client afterwards, so scheduling cannot
/// change the aggregate.
pub trait RoundRunner<S: Scalar>: Sync {
    fn run(
        &self,
        jobs: Vec<LocalTrainJob<S>>,
        data: &[ClientTrainSet<S>],
    ) -> Result<Vec<LocalTrainOutcome<S>>>;
}

pub struct SequentialRunner;

impl<S: Scalar> RoundRunner<S> for SequentialRunner {
    fn run(
        &self,
        jobs: Vec<LocalTrainJob<S>>,
        data: &[ClientTrainSet<S>],
    ) -> Result<Vec<LocalTrainOutcome<S>>> {
        jobs.into_iter()
            .map(|j| {
                let idx = j.client_index;
                execute_job(j, &data[idx])
            })
            .collect()
    }
}

/// Shared initialization for every training mode: same master seed,
/// same backbone draw, heads drawn per enumeration index. Keeping the
/// backbone start identical across modes makes them comparable.
pub fn init_model<S: Scalar>(
    cfg: &FedConfig,
    backbone_spec: &[LayerSpec],
    head_channels: &BTreeMap<ClientId, usize>,
) -> Result<ModelParams<S>> {
    let master = RngState::new(cfg.seed, 0);
    ModelParams::init(backbone_spec, head_channels, master.derive(tags::INIT))
}

fn head_channel_map<S: Scalar>(clients: &[ClientTrainSet<S>]) -> BTreeMap<ClientId, usize> {
    clients
        .iter()
        .map(|c| (c.client_id.clone(), c.head_channels))
        .collect()
}

/// R rounds of broadcast -> local SGD -> data-weighted backbone
/// averaging. Heads persist locally across rounds (warm start).
pub fn run_federation<S: Scalar>(
    cfg: &FedConfig,
    backbone_spec: &[LayerSpec],
    clients: &[ClientTrainSet<S>],
    runner: &dyn RoundRunner<S>,
) -> Result<FedState<S>> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(Error::InvalidArgument("federation needs at least one client".into()));
    }
    let init = init_model::<S>(cfg, backbone_spec, &head_channel_map(clients))?;
    let master = RngState::new(cfg.seed, 0);
    let train_rng = master.derive(tags::TRAIN);

    let mut backbone = init.backbone;
    let mut heads = init.heads;
    let mut loss_log = Vec::new();
    for round in 0..cfg.rounds {
        let round_rng = train_rng.derive(round as u64);
        let jobs: Vec<LocalTrainJob<S>> = clients
            .iter()
            .enumerate()
            .map(|(i, c)| LocalTrainJob {
                client_index: i,
                backbone: backbone.clone(),
                head: heads.get(&c.client_id).expect("head exists").clone(),
                epochs: cfg.local_epochs,
                lr: cfg.lr,
                batch_size: cfg.batch_size,
                rng: round_rng.derive(i as u64),
            })
            .collect();
        let mut outcomes = runner.run(jobs, clients)?;
        outcomes.sort_by_key(|o| o.client_index);
        if outcomes.len() != clients.len() {
            return Err(Error::Data("round runner lost a client outcome".into()));
        }
        for o in &outcomes {
            let c = &clients[o.client_index];
            heads.insert(c.client_id.clone(), o.head.clone());
            for (e, &l) in o.epoch_losses.iter().enumerate() {
                loss_log.push(LossRecord {
                    round,
                    epoch: e,
                    client: c.client_id.clone(),
                    loss: l,
                });
            }
        }
        let weighted: Vec<(Vec<LayerParams<S>>, usize)> = outcomes
            .into_iter()
            .map(|o| {
                let n = clients[o.client_index].items.len();
                (o.backbone, n)
            })
            .collect();
        backbone = fedavg_aggregate(&weighted)?;
    }
    Ok(FedState { backbone, heads, round_index: cfg.rounds, loss_log })
}

/// Centralized baseline: one model with every head; within each round
/// and epoch the clients' batches are interleaved round-robin, each
/// step backpropagating through the owning client's head only. Total
/// step budget matches the federated run.
pub fn run_centralized<S: Scalar>(
    cfg: &FedConfig,
    backbone_spec: &[LayerSpec],
    clients: &[ClientTrainSet<S>],
) -> Result<FedState<S>> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(Error::InvalidArgument("no clients".into()));
    }
    let mut params = init_model::<S>(cfg, backbone_spec, &head_channel_map(clients))?;
    let master = RngState::new(cfg.seed, 0);
    let train_rng = master.derive(tags::TRAIN);
    let lr_s = S::of(cfg.lr);
    let mut loss_log = Vec::new();

    for round in 0..cfg.rounds {
        let round_rng = train_rng.derive(round as u64);
        for epoch in 0..cfg.local_epochs {
            // per-client shuffled batch queues, same schedule a round of
            // local training would use
            let mut queues: Vec<Vec<Vec<usize>>> = Vec::new();
            let mut loss_sums = vec![0.0f64; clients.len()];
            for (i, c) in clients.iter().enumerate() {
                let erng = round_rng.derive(i as u64).derive(epoch as u64);
                let order = epoch_order(c.items.len(), erng.derive(0));
                queues.push(order.chunks(cfg.batch_size).map(|b| b.to_vec()).collect());
            }
            let max_batches = queues.iter().map(Vec::len).max().unwrap_or(0);
            for cycle in 0..max_batches {
                for (i, c) in clients.iter().enumerate() {
                    let Some(batch) = queues[i].get(cycle) else { continue };
                    let erng = round_rng.derive(i as u64).derive(epoch as u64);
                    let mut acc = Grads::zeros_like(&params, &c.client_id)?;
                    let scale = S::of(1.0 / batch.len() as f64);
                    for (j, &item_idx) in batch.iter().enumerate() {
                        let item = &c.items[item_idx];
                        let item_rng = erng.derive(1 + (cycle * cfg.batch_size + j) as u64);
                        let (loss, grads) = loss_and_grads(
                            &params,
                            &c.client_id,
                            &item.input,
                            &item.target,
                            item_rng,
                        )?;
                        let loss = loss.widen();
                        if !loss.is_finite() {
                            return Err(Error::NonFinite(format!(
                                "training loss diverged for client '{}' (centralized)",
                                c.client_id
                            )));
                        }
                        loss_sums[i] += loss;
                        acc.accumulate(&grads, scale);
                    }
                    sgd_step(&mut params, &acc, &c.client_id, lr_s)?;
                }
            }
            for (i, c) in clients.iter().enumerate() {
                loss_log.push(LossRecord {
                    round,
                    epoch,
                    client: c.client_id.clone(),
                    loss: loss_sums[i] / c.items.len() as f64,
                });
            }
        }
    }
    Ok(FedState {
        backbone: params.backbone,
        heads: params.heads,
        round_index: cfg.rounds,
        loss_log,
    })
}

/// Independent full models per client, no communication. Per-client
/// budget is rounds x local_epochs epochs, run as per-round calls so
/// the rng schedule matches the federated one.
pub fn run_local_only<S: Scalar>(
    cfg: &FedConfig,
    backbone_spec: &[LayerSpec],
    clients: &[ClientTrainSet<S>],
    runner: &dyn RoundRunner<S>,
) -> Result<BTreeMap<ClientId, FedState<S>>> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(Error::InvalidArgument("no clients".into()));
    }
    let master = RngState::new(cfg.seed, 0);
    let train_rng = master.derive(tags::TRAIN);

    // initial per-client models, each holding only its own head
    let mut models: Vec<ModelParams<S>> = clients
        .iter()
        .map(|c| {
            let mut one = BTreeMap::new();
            one.insert(c.client_id.clone(), c.head_channels);
            ModelParams::init(backbone_spec, &one, master.derive(tags::INIT))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut logs: Vec<Vec<LossRecord>> = vec![Vec::new(); clients.len()];

    for round in 0..cfg.rounds {
        let round_rng = train_rng.derive(round as u64);
        let jobs: Vec<LocalTrainJob<S>> = clients
            .iter()
            .enumerate()
            .map(|(i, c)| LocalTrainJob {
                client_index: i,
                backbone: models[i].backbone.clone(),
                head: models[i].heads.get(&c.client_id).expect("own head").clone(),
                epochs: cfg.local_epochs,
                lr: cfg.lr,
                batch_size: cfg.batch_size,
                rng: round_rng.derive(i as u64),
            })
            .collect();
        let mut outcomes = runner.run(jobs, clients)?;
        outcomes.sort_by_key(|o| o.client_index);
        for o in outcomes {
            let i = o.client_index;
            models[i].backbone = o.backbone;
            models[i].heads.insert(clients[i].client_id.clone(), o.head);
            for (e, &l) in o.epoch_losses.iter().enumerate() {
                logs[i].push(LossRecord {
                    round,
                    epoch: e,
                    client: clients[i].client_id.clone(),
                    loss: l,
                });
            }
        }
    }
    Ok(clients
        .iter()
        .zip(models)
        .zip(logs)
        .map(|((c, m), log)| {
            (
                c.client_id.clone(),
                FedState {
                    backbone: m.backbone,
                    heads: m.heads,
                    round_index: cfg.rounds,
                    loss_log: log,
                },
            )
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Checkpoint serialization
// ---------------------------------------------------------------------------

fn flatten<S: Scalar>(tensors: &[(&str, &Tensor<S>)]) -> (Tensor<S>, String) {
    let mut data = Vec::new();
    let mut layout = String::new();
    for (name, t) in tensors {
        data.extend_from_slice(t.data());
        let dims: Vec<String> = t.dims().iter().map(|d| d.to_string()).collect();
        layout.push_str(&format!("{name}={}\n", dims.join(",")));
    }
    let n = data.len();
    (Tensor::from_vec(&[n.max(1)], if n == 0 { vec![S::zero()] } else { data }).unwrap(), layout)
}

fn backbone_tensor_list<S: Scalar>(backbone: &[LayerParams<S>]) -> Vec<(String, &Tensor<S>)> {
    let mut out = Vec::new();
    for (i, l) in backbone.iter().enumerate() {
        if let Some(k) = &l.kernel {
            out.push((format!("layer{i}.kernel"), k));
        }
        if let Some(b) = &l.bias {
            out.push((format!("layer{i}.bias"), b));
        }
    }
    out
}

/// Writes `backbone.funt` (concatenated per-layer tensors) plus
/// `layout.txt`, one `head_<client>.funt` per head, and `state.txt`
/// holding the round index and a config echo.
pub fn save_state<S: Scalar>(dir: &Path, state: &FedState<S>, config_echo: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let named = backbone_tensor_list(&state.backbone);
    let refs: Vec<(&str, &Tensor<S>)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    let (flat, mut layout) = flatten(&refs);
    crate::funt::write_file(&dir.join("backbone.funt"), &flat)?;
    for (cid, head) in &state.heads {
        let refs = vec![
            (format!("head.{cid}.kernel"), &head.kernel),
            (format!("head.{cid}.bias"), &head.bias),
        ];
        let refs2: Vec<(&str, &Tensor<S>)> = refs.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        let (flat, l) = flatten(&refs2);
        crate::funt::write_file(&dir.join(format!("head_{cid}.funt")), &flat)?;
        layout.push_str(&l);
    }
    std::fs::write(dir.join("layout.txt"), layout)?;
    let mut statetxt = format!("round={}\n", state.round_index);
    statetxt.push_str(config_echo);
    std::fs::write(dir.join("state.txt"), statetxt)?;
    Ok(())
}

fn parse_layout(path: &Path) -> Result<BTreeMap<String, Vec<usize>>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (name, dims) = line.split_once('=').ok_or_else(|| Error::Format {
            path: path.display().to_string(),
            message: format!("line {}: expected name=dims", no + 1),
        })?;
        let dims = dims
            .split(',')
            .map(|d| d.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format {
                path: path.display().to_string(),
                message: format!("line {}: {e}", no + 1),
            })?;
        out.insert(name.to_string(), dims);
    }
    Ok(out)
}

/// Loads a checkpoint saved by [`save_state`]. The backbone layer stack
/// (kinds, channels, dropout rate) comes from the caller; shapes are
/// validated against `layout.txt`.
pub fn load_state<S: Scalar>(
    dir: &Path,
    backbone_spec: &[LayerSpec],
    clients: &[ClientId],
) -> Result<FedState<S>> {
    let layout = parse_layout(&dir.join("layout.txt"))?;
    let flat = crate::funt::read_file_as::<S>(&dir.join("backbone.funt"))?;
    let mut offset = 0usize;
    let mut backbone = Vec::new();
    for (i, spec) in backbone_spec.iter().enumerate() {
        let mut take = |name: String| -> Result<Tensor<S>> {
            let dims = layout.get(&name).ok_or_else(|| Error::Format {
                path: dir.join("layout.txt").display().to_string(),
                message: format!("missing entry '{name}'"),
            })?;
            let len: usize = dims.iter().product();
            if offset + len > flat.len() {
                return Err(Error::Format {
                    path: dir.join("backbone.funt").display().to_string(),
                    message: "backbone payload shorter than layout".into(),
                });
            }
            let t = Tensor::from_vec(dims, flat.data()[offset..offset + len].to_vec())?;
            offset += len;
            Ok(t)
        };
        let (kernel, bias) = if spec.has_params() {
            (Some(take(format!("layer{i}.kernel"))?), Some(take(format!("layer{i}.bias"))?))
        } else {
            (None, None)
        };
        backbone.push(LayerParams { spec: spec.clone(), kernel, bias });
    }
    if offset != flat.len() {
        return Err(Error::Format {
            path: dir.join("backbone.funt").display().to_string(),
            message: format!("trailing {} elements beyond layout", flat.len() - offset),
        });
    }
    let mut heads = BTreeMap::new();
    for cid in clients {
        let path = dir.join(format!("head_{cid}.funt"));
        if !path.exists() {
            return Err(Error::Data(format!(
                "checkpoint {} is missing head file for client '{cid}'",
                dir.display()
            )));
        }
        let flat = crate::funt::read_file_as::<S>(&path)?;
        let kdims = layout.get(&format!("head.{cid}.kernel")).ok_or_else(|| Error::Format {
            path: dir.join("layout.txt").display().to_string(),
            message: format!("missing entry 'head.{cid}.kernel'"),
        })?;
        let bdims = layout.get(&format!("head.{cid}.bias")).ok_or_else(|| Error::Format {
            path: dir.join("layout.txt").display().to_string(),
            message: format!("missing entry 'head.{cid}.bias'"),
        })?;
        let klen: usize = kdims.iter().product();
        let blen: usize = bdims.iter().product();
        if klen + blen != flat.len() {
            return Err(Error::Format {
                path: path.display().to_string(),
                message: format!("expected {} elements, found {}", klen + blen, flat.len()),
            });
        }
        heads.insert(
            cid.clone(),
            HeadParams {
                kernel: Tensor::from_vec(kdims, flat.data()[..klen].to_vec())?,
                bias: Tensor::from_vec(bdims, flat.data()[klen..].to_vec())?,
            },
        );
    }
    let statetxt = std::fs::read_to_string(dir.join("state.txt"))?;
    let round_index = statetxt
        .lines()
        .find_map(|l| l.strip_prefix("round="))
        .and_then(|v| v.trim().parse::<usize>().ok())
        .ok_or_else(|| Error::Format {
            path: dir.join("state.txt").display().to_string(),
            message: "missing round= line".into(),
        })?;
    Ok(FedState { backbone, heads, round_index, loss_log: Vec::new() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::default_backbone;
    use crate::synth::{make_world, mask_labels, Sample};

    fn tiny_registry() -> LabelRegistry {
        let globals: Vec<String> = vec!["disk".into(), "square".into()];
        let mut sets = BTreeMap::new();
        sets.insert(ClientId::from("a"), vec!["disk".into()]);
        sets.insert(ClientId::from("b"), vec!["disk".into(), "square".into()]);
        LabelRegistry::new(globals, sets).unwrap()
    }

    fn tiny_clients(n_a: usize, n_b: usize, size: usize) -> (LabelRegistry, Vec<ClientTrainSet<f64>>) {
        let reg = tiny_registry();
        let mut out = Vec::new();
        for (idx, (cid, n)) in [("a", n_a), ("b", n_b)].iter().enumerate() {
            let cid = ClientId::from(*cid);
            let world = make_world(RngState::new(50 + idx as u64, 0), *n, size, &reg).unwrap();
            let samples: Vec<Sample> = world
                .iter()
                .map(|s| mask_labels(s, reg.client_label_list(&cid).unwrap(), &reg).unwrap())
                .collect();
            let ds = ClientDataset { client_id: cid, train: samples, test: Vec::new() };
            out.push(prepare_train_set::<f64>(&ds, &reg).unwrap());
        }
        (reg, out)
    }

    fn cfg(rounds: usize, epochs: usize, lr: f64, seed: u64) -> FedConfig {
        FedConfig {
            rounds,
            local_epochs: epochs,
            lr,
            batch_size: 2,
            dropout_p: 0.25,
            seed,
            dtype: Dtype::F64,
        }
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        assert!(cfg(1, 1, 0.0, 1).validate().is_err());
        assert!(cfg(0, 1, 0.1, 1).validate().is_err());
        assert!(cfg(1, 0, 0.1, 1).validate().is_err());
        assert!(FedConfig { batch_size: 0, ..cfg(1, 1, 0.1, 1) }.validate().is_err());
        assert!(cfg(1, 1, 0.1, 1).validate().is_ok());
    }

    #[test]
    fn local_train_is_deterministic_and_descends() {
        let (_, clients) = tiny_clients(3, 2, 32);
        let spec = default_backbone(0.25);
        let mut chan = BTreeMap::new();
        chan.insert(clients[0].client_id.clone(), clients[0].head_channels);
        let base = cfg(1, 1, 1e-3, 3);
        let init = init_model::<f64>(&base, &spec, &chan).unwrap();
        let one = ClientTrainSet {
            client_id: clients[0].client_id.clone(),
            head_channels: clients[0].head_channels,
            items: clients[0].items[..1].to_vec(),
        };
        let run = |rng| {
            local_train(
                init.backbone.clone(),
                init.heads.values().next().unwrap().clone(),
                &one,
                20,
                1e-3,
                1,
                rng,
            )
            .unwrap()
        };
        let (b1, h1, losses1) = run(RngState::new(7, 7));
        let (b2, h2, losses2) = run(RngState::new(7, 7));
        assert_eq!(b1, b2);
        assert_eq!(h1, h2);
        assert_eq!(losses1, losses2);
        assert!(
            losses1.last().unwrap() < losses1.first().unwrap(),
            "no descent: {losses1:?}"
        );
    }

    #[test]
    fn local_train_rejects_empty_dataset() {
        let (_, clients) = tiny_clients(2, 2, 32);
        let spec = default_backbone(0.0);
        let mut chan = BTreeMap::new();
        chan.insert(clients[0].client_id.clone(), clients[0].head_channels);
        let init = init_model::<f64>(&cfg(1, 1, 0.1, 0), &spec, &chan).unwrap();
        let empty = ClientTrainSet::<f64> {
            client_id: clients[0].client_id.clone(),
            head_channels: clients[0].head_channels,
            items: Vec::new(),
        };
        assert!(local_train(
            init.backbone.clone(),
            init.heads.values().next().unwrap().clone(),
            &empty,
            1,
            0.1,
            2,
            RngState::new(0, 0)
        )
        .is_err());
    }

    #[test]
    fn aggregate_hand_case_and_fixed_point() {
        // n=(1,3), params (0,4) -> 3.0
        let spec = vec![LayerSpec::conv1x1(1, 1)];
        let mk = |v: f64| {
            vec![LayerParams::<f64> {
                spec: spec[0].clone(),
                kernel: Some(Tensor::filled(&[1, 1, 1, 1], v)),
                bias: Some(Tensor::filled(&[1], v)),
            }]
        };
        let out = fedavg_aggregate(&[(mk(0.0), 1), (mk(4.0), 3)]).unwrap();
        assert_eq!(out[0].kernel.as_ref().unwrap().data()[0], 3.0);

        // identical weights are a fixed point
        let out = fedavg_aggregate(&[(mk(1.25), 2), (mk(1.25), 5)]).unwrap();
        assert!((out[0].kernel.as_ref().unwrap().data()[0] - 1.25).abs() < 1e-15);

        // single client returns the input bitwise
        let single = mk(-0.0);
        let out = fedavg_aggregate(&[(single.clone(), 7)]).unwrap();
        assert_eq!(
            out[0].kernel.as_ref().unwrap().data()[0].to_bits(),
            single[0].kernel.as_ref().unwrap().data()[0].to_bits()
        );

        // errors
        assert!(fedavg_aggregate::<f64>(&[]).is_err());
        assert!(fedavg_aggregate(&[(mk(1.0), 0)]).is_err());
    }

    #[test]
    fn aggregate_is_convex_elementwise() {
        let spec = vec![LayerSpec::conv1x1(1, 1)];
        let mut r = RngState::new(77, 0).rng();
        for _ in 0..50 {
            let vals: Vec<f64> = (0..3).map(|_| r.gen_range(-2.0..2.0)).collect();
            let ns: Vec<usize> = (0..3).map(|_| r.gen_range(1..100)).collect();
            let backbones: Vec<(Vec<LayerParams<f64>>, usize)> = vals
                .iter()
                .zip(&ns)
                .map(|(&v, &n)| {
                    (
                        vec![LayerParams {
                            spec: spec[0].clone(),
                            kernel: Some(Tensor::filled(&[1, 1, 1, 1], v)),
                            bias: None,
                        }],
                        n,
                    )
                })
                .collect();
            let out = fedavg_aggregate(&backbones).unwrap();
            let got = out[0].kernel.as_ref().unwrap().data()[0];
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(got >= lo - 1e-12 && got <= hi + 1e-12, "{got} outside [{lo},{hi}]");
        }
    }

    #[test]
    fn one_client_federation_equals_sequential_training() {
        let (_, clients) = tiny_clients(3, 2, 32);
        let one = vec![clients[0].clone()];
        let spec = default_backbone(0.25);
        let c = cfg(3, 2, 0.05, 11);
        let fed = run_federation(&c, &spec, &one, &SequentialRunner).unwrap();

        // sequential oracle: R direct local_train calls with the per-round
        // rng states the protocol derives
        let mut chan = BTreeMap::new();
        chan.insert(one[0].client_id.clone(), one[0].head_channels);
        let init = init_model::<f64>(&c, &spec, &chan).unwrap();
        let master = RngState::new(c.seed, 0);
        let mut backbone = init.backbone;
        let mut head = init.heads.into_values().next().unwrap();
        for round in 0..c.rounds {
            let rng = master.derive(tags::TRAIN).derive(round as u64).derive(0);
            let (b, h, _) =
                local_train(backbone, head, &one[0], c.local_epochs, c.lr, c.batch_size, rng)
                    .unwrap();
            backbone = b;
            head = h;
        }
        assert_eq!(fed.backbone, backbone);
        assert_eq!(fed.heads.values().next().unwrap(), &head);
    }

    #[test]
    fn heads_persist_and_logs_account() {
        let (_, clients) = tiny_clients(3, 2, 32);
        let spec = default_backbone(0.25);
        let c = cfg(2, 1, 0.05, 13);
        let before_heads: Vec<usize> = clients.iter().map(|c| c.head_channels).collect();
        let fed = run_federation(&c, &spec, &clients, &SequentialRunner).unwrap();
        assert_eq!(fed.heads.len(), 2);
        for (cid, head) in &fed.heads {
            let idx = clients.iter().position(|c| &c.client_id == cid).unwrap();
            assert_eq!(head.out_channels(), before_heads[idx]);
        }
        assert_eq!(fed.round_index, 2);
        // loss log accounting: rounds x epochs x clients
        assert_eq!(fed.loss_log.len(), 2 * 2);
    }

    #[test]
    fn federation_determinism_across_runs() {
        let (_, clients) = tiny_clients(2, 3, 32);
        let spec = default_backbone(0.25);
        let c = cfg(2, 1, 0.05, 21);
        let a = run_federation(&c, &spec, &clients, &SequentialRunner).unwrap();
        let b = run_federation(&c, &spec, &clients, &SequentialRunner).unwrap();
        assert_eq!(a.backbone, b.backbone);
        assert_eq!(a.heads, b.heads);
        assert_eq!(a.loss_log, b.loss_log);
    }

    #[test]
    fn centralized_one_client_equals_local_only() {
        let (_, clients) = tiny_clients(3, 2, 32);
        let one = vec![clients[0].clone()];
        let spec = default_backbone(0.25);
        let c = cfg(2, 2, 0.05, 31);
        let cen = run_centralized(&c, &spec, &one).unwrap();
        let loc = run_local_only(&c, &spec, &one, &SequentialRunner).unwrap();
        let loc = loc.get(&one[0].client_id).unwrap();
        assert_eq!(cen.backbone, loc.backbone);
        assert_eq!(cen.heads, loc.heads);
    }

    #[test]
    fn centralized_budget_accounting() {
        let (_, clients) = tiny_clients(3, 2, 32);
        let spec = default_backbone(0.25);
        let c = cfg(2, 2, 0.05, 33);
        let cen = run_centralized(&c, &spec, &clients).unwrap();
        // one loss record per (round, epoch, client)
        assert_eq!(cen.loss_log.len(), c.rounds * c.local_epochs * clients.len());
    }

    #[test]
    fn local_only_isolation() {
        let (_, clients) = tiny_clients(2, 3, 32);
        let spec = default_backbone(0.25);
        let c = cfg(1, 1, 0.05, 41);
        let all = run_local_only(&c, &spec, &clients, &SequentialRunner).unwrap();
        // change client b's data; client a's model must be bit-identical
        let mut mutated = clients.clone();
        mutated[1].items.truncate(1);
        let again = run_local_only(&c, &spec, &mutated, &SequentialRunner).unwrap();
        let a_id = &clients[0].client_id;
        assert_eq!(all.get(a_id).unwrap().backbone, again.get(a_id).unwrap().backbone);
        assert_eq!(all.get(a_id).unwrap().heads, again.get(a_id).unwrap().heads);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let (_, clients) = tiny_clients(2, 2, 32);
        let spec = default_backbone(0.25);
        let c = cfg(1, 1, 0.05, 51);
        let fed = run_federation(&c, &spec, &clients, &SequentialRunner).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_state(dir.path(), &fed, "note=test\n").unwrap();
        let ids: Vec<ClientId> = clients.iter().map(|c| c.client_id.clone()).collect();
        let loaded = load_state::<f64>(dir.path(), &spec, &ids).unwrap();
        assert_eq!(loaded.backbone, fed.backbone);
        assert_eq!(loaded.heads, fed.heads);
        assert_eq!(loaded.round_index, fed.round_index);

        // missing head file is a hard error naming the client
        std::fs::remove_file(dir.path().join("head_a.funt")).unwrap();
        let err = load_state::<f64>(dir.path(), &spec, &ids).unwrap_err();
        assert!(err.to_string().contains('a'), "{err}");
    }
}
