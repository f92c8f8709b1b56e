//! The three exchange protocols, built over one model core.
//!
//! Each round function moves typed [`Message`]s between parties,
//! billing every payload to the sending or receiving client's counters
//! and appending to an exchange trace. Server-side link traffic is the
//! mirror image of the clients' and is not double-counted: the server
//! entry carries FLOPs only.
//!
//! Clients are processed in ascending id order everywhere, which pins
//! the arithmetic order of aggregation and keeps runs bit-reproducible.

use crate::accounting::{flops_model, CostModelParams, PartyCosts, Phase, RoundCosts};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{AdapterManifest, LayeredNet};
use crate::optim::{AdamParams, AdamState};
use crate::rng::{self, streams, Stream};
use crate::tensor::{cross_entropy, cross_entropy_grad, kl_distill_loss, softmax_rows, Matrix};

/// One payload crossing the network.
#[derive(Debug, Clone)]
pub enum Message {
    /// Flat adapter values plus the manifest describing their layout.
    AdapterUpdate {
        values: Vec<f64>,
        manifest: AdapterManifest,
    },
    /// Pre-softmax class scores, one row per sample.
    LogitBatch { logits: Matrix },
    /// Boundary activations with their labels (one scalar each).
    ActivationBatch {
        activations: Matrix,
        labels: Vec<usize>,
    },
    /// Loss gradient at the boundary activations.
    GradientBatch { grads: Matrix },
}

impl Message {
    /// Scalars serialized on the wire for this payload.
    pub fn payload_scalars(&self) -> u64 {
        match self {
            Message::AdapterUpdate { values, .. } => values.len() as u64,
            Message::LogitBatch { logits } => (logits.rows() * logits.cols()) as u64,
            Message::ActivationBatch { activations, labels } => {
                (activations.rows() * activations.cols() + labels.len()) as u64
            }
            Message::GradientBatch { grads } => (grads.rows() * grads.cols()) as u64,
        }
    }

    pub fn kind(&self) -> MessageKind {
        match self {
            Message::AdapterUpdate { .. } => MessageKind::Adapters,
            Message::LogitBatch { .. } => MessageKind::Logits,
            Message::ActivationBatch { .. } => MessageKind::Activations,
            Message::GradientBatch { .. } => MessageKind::Gradients,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageKind {
    Adapters,
    Logits,
    Activations,
    Gradients,
}

/// Direction relative to the client.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Uplink,
    Downlink,
}

/// One exchange, as seen from one client's link.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEntry {
    pub client: usize,
    pub direction: Direction,
    pub kind: MessageKind,
    pub bytes: u64,
}

/// Costs, exchange trace, and any server-observed training losses for
/// one protocol round. `batch_losses` is filled by the split protocol
/// (the server computes a loss per boundary batch); the other two
/// protocols train inside the clients and leave it empty.
#[derive(Debug, Clone, Default)]
pub struct RoundOutcome {
    pub costs: RoundCosts,
    pub trace: Vec<TraceEntry>,
    pub batch_losses: Vec<f64>,
}

/// Losses and FLOPs from one training call.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    pub flops: u64,
}

/// One participant: private shard, model replica, optimizer state over
/// its trainable slice, and a private random stream.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub model: LayeredNet,
    pub shard: Dataset,
    pub opt: AdamState,
    pub stream: Stream,
}

impl ClientState {
    /// `trainable_len` is the flat length of the adapter slice this
    /// client optimizes: the full manifest for parameter and logit
    /// exchange, the prefix manifest under a split.
    pub fn new(id: usize, model: LayeredNet, shard: Dataset, trainable_len: usize, seed: u64) -> Self {
        ClientState {
            id,
            model,
            shard,
            opt: AdamState::new(trainable_len),
            stream: rng::client_stream(seed, id),
        }
    }
}

/// Server for direct parameter exchange: owns the global model.
#[derive(Debug, Clone)]
pub struct FedServer {
    pub model: LayeredNet,
}

impl FedServer {
    pub fn new(model: LayeredNet) -> Self {
        FedServer { model }
    }
}

/// Server for logit exchange: owns a full model replica, the public
/// set, and the optimizer that distills into the replica.
#[derive(Debug, Clone)]
pub struct KdServer {
    pub model: LayeredNet,
    pub public: Dataset,
    pub opt: AdamState,
    pub stream: Stream,
}

impl KdServer {
    pub fn new(model: LayeredNet, public: Dataset, seed: u64) -> Self {
        let opt = AdamState::new(model.manifest().scalar_len());
        KdServer {
            model,
            public,
            opt,
            stream: rng::stream(seed, streams::SERVER),
        }
    }
}

/// Server for split execution: owns the suffix side of the cut (and a
/// full model replica so the aggregated prefix can be composed in for
/// evaluation).
#[derive(Debug, Clone)]
pub struct SplitServer {
    pub model: LayeredNet,
    pub split_point: usize,
    pub opt: AdamState,
    pub stream: Stream,
}

impl SplitServer {
    pub fn new(model: LayeredNet, split_point: usize, seed: u64) -> Result<Self> {
        let layers = model.arch().layers();
        if split_point == 0 || split_point >= layers {
            return Err(Error::Config(format!(
                "split point {split_point} outside [1, {}]",
                layers - 1
            )));
        }
        let opt = AdamState::new(model.manifest_range(split_point + 1, layers).scalar_len());
        Ok(SplitServer {
            model,
            split_point,
            opt,
            stream: rng::stream(seed, streams::SERVER),
        })
    }
}

/// Knobs for the logit-exchange protocol.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdConfig {
    pub temperature: f64,
    /// Weight of the distillation term; `1 - lambda` goes to plain
    /// cross-entropy on the public labels.
    pub lambda: f64,
    pub server_epochs: usize,
    pub client_epochs: usize,
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig {
            temperature: 1.0,
            lambda: 0.5,
            server_epochs: 1,
            client_epochs: 1,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Knobs for the split protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitConfig {
    pub split_point: usize,
    /// Samples each client pushes through the boundary per round.
    pub samples_per_round: usize,
    pub batch: usize,
}

impl SplitConfig {
    pub fn validate(&self, model: &LayeredNet) -> Result<()> {
        let layers = model.arch().layers();
        if self.split_point == 0 || self.split_point >= layers {
            return Err(Error::Config(format!(
                "split point {} outside [1, {}]",
                self.split_point,
                layers - 1
            )));
        }
        if self.samples_per_round == 0 {
            return Err(Error::Config("samples_per_round must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// What a minibatch step optimizes.
enum Objective<'a> {
    /// Cross-entropy against the dataset labels.
    Supervised,
    /// `lambda` x distillation against fixed teacher logits plus
    /// `1 - lambda` x cross-entropy against the dataset labels.
    Distill {
        teacher: &'a Matrix,
        temperature: f64,
        lambda: f64,
    },
}

fn gather_rows(m: &Matrix, ids: &[usize]) -> Result<Matrix> {
    let mut v = Vec::with_capacity(ids.len() * m.cols());
    for &i in ids {
        v.extend_from_slice(m.row(i));
    }
    Matrix::new(ids.len(), m.cols(), v)
}

/// Seeded minibatch training of a model's full adapter set. One shuffle
/// per epoch, last partial batch kept. Both supervised fine-tuning and
/// distillation run through this single engine, so configurations that
/// are mathematically equal stay bit-equal.
#[allow(clippy::too_many_arguments)]
fn minibatch_train(
    model: &mut LayeredNet,
    data: &Dataset,
    objective: Objective,
    epochs: usize,
    batch: usize,
    opt: &mut AdamState,
    hyper: &AdamParams,
    stream: &mut Stream,
) -> Result<TrainLog> {
    let mut log = TrainLog::default();
    if epochs == 0 {
        return Ok(log);
    }
    if data.n() == 0 {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    if batch == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let layers = model.arch().layers();
    let manifest = model.manifest();
    if opt.len() != manifest.scalar_len() {
        return Err(Error::shape(
            "minibatch_train",
            format!("optimizer over {}", opt.len()),
            format!("adapters of {}", manifest.scalar_len()),
        ));
    }

    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..data.n()).collect();
    for _ in 0..epochs {
        order.shuffle(stream);
        for ids in order.chunks(batch) {
            let bx = gather_rows(data.x(), ids)?;
            let by: Vec<usize> = ids.iter().map(|&i| data.labels()[i]).collect();
            let (logits, tape) = model.forward_range(&bx, 0, layers, true, Some(stream))?;

            let (loss, grad) = match objective {
                Objective::Supervised => {
                    let probs = softmax_rows(&logits);
                    (cross_entropy(&probs, &by)?, cross_entropy_grad(&probs, &by)?)
                }
                Objective::Distill {
                    teacher,
                    temperature,
                    lambda,
                } => {
                    let bt = gather_rows(teacher, ids)?;
                    let probs = softmax_rows(&logits);
                    let mut loss = (1.0 - lambda) * cross_entropy(&probs, &by)?;
                    let mut grad = cross_entropy_grad(&probs, &by)?;
                    grad.scale(1.0 - lambda);
                    if lambda > 0.0 {
                        loss += lambda * kl_distill_loss(&bt, &logits, temperature)?;
                        let mut student_t = logits.clone();
                        student_t.scale(1.0 / temperature);
                        let mut diff = softmax_rows(&student_t);
                        let mut teacher_t = bt;
                        teacher_t.scale(1.0 / temperature);
                        diff.add_scaled(&softmax_rows(&teacher_t), -1.0)?;
                        diff.scale(lambda * temperature / ids.len() as f64);
                        grad.add_in_place(&diff)?;
                    }
                    (loss, grad)
                }
            };

            let (grads, _) = model.backward_range(&tape, &grad)?;
            let flat = grads.flatten(&manifest)?;
            let (mut params, _) = model.export_adapters();
            opt.update(&mut params, &flat, hyper)?;
            model.import_adapters(&params, &manifest)?;

            log.losses.push(loss);
            log.flops += flops_model(
                model.arch(),
                model.lora(),
                ids.len() as u64,
                0,
                layers,
                Phase::Train,
            )?;
        }
    }
    Ok(log)
}

/// Minibatch cross-entropy fine-tuning of one client on its own shard.
pub fn local_finetune(
    client: &mut ClientState,
    epochs: usize,
    batch: usize,
    hyper: &AdamParams,
) -> Result<TrainLog> {
    if epochs == 0 {
        return Ok(TrainLog::default());
    }
    if client.shard.n() == 0 {
        return Err(Error::Config(format!("client {} has an empty shard", client.id)));
    }
    let ClientState {
        model,
        shard,
        opt,
        stream,
        ..
    } = client;
    minibatch_train(model, shard, Objective::Supervised, epochs, batch, opt, hyper, stream)
}

/// Distills fixed teacher logits into a model on the public set,
/// mixing in supervised loss on the public labels by `1 - lambda`.
#[allow(clippy::too_many_arguments)]
pub fn distill(
    model: &mut LayeredNet,
    teacher: &Matrix,
    public: &Dataset,
    kd: &KdConfig,
    epochs: usize,
    batch: usize,
    opt: &mut AdamState,
    hyper: &AdamParams,
    stream: &mut Stream,
) -> Result<TrainLog> {
    kd.validate()?;
    if teacher.rows() != public.n() || teacher.cols() != public.n_classes() {
        return Err(Error::shape(
            "distill",
            format!("teacher {}x{}", teacher.rows(), teacher.cols()),
            format!("public {}x{}", public.n(), public.n_classes()),
        ));
    }
    minibatch_train(
        model,
        public,
        Objective::Distill {
            teacher,
            temperature: kd.temperature,
            lambda: kd.lambda,
        },
        epochs,
        batch,
        opt,
        hyper,
        stream,
    )
}

/// Normalized weighted mean in pivot-delta form:
/// `x0 + sum_j (w_j / W) (x_j - x0)`. Identical inputs come back
/// unchanged and a unit weight selects its input exactly; permuting
/// inputs moves the result by at most rounding noise.
fn weighted_mean_flat(items: &[&[f64]], weights: &[f64]) -> Result<Vec<f64>> {
    if items.is_empty() || items.len() != weights.len() {
        return Err(Error::shape(
            "weighted_mean",
            format!("{} items", items.len()),
            format!("{} weights", weights.len()),
        ));
    }
    let len = items[0].len();
    if let Some(bad) = items.iter().find(|v| v.len() != len) {
        return Err(Error::shape(
            "weighted_mean",
            format!("item of {}", bad.len()),
            format!("item of {len}"),
        ));
    }
    if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
        return Err(Error::Config(format!("weights must be finite and >= 0, got {weights:?}")));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Config("weights must not all be zero".into()));
    }
    let pivot = items[0];
    let mut out = pivot.to_vec();
    for (item, &w) in items.iter().zip(weights).skip(1) {
        let q = w / total;
        for ((o, &v), &v0) in out.iter_mut().zip(item.iter()).zip(pivot) {
            *o += q * (v - v0);
        }
    }
    Ok(out)
}

/// Weighted elementwise mean of flat adapter payloads. Weights are
/// normalized to sum 1; callers default them to shard sizes.
pub fn aggregate_adapters(updates: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    let refs: Vec<&[f64]> = updates.iter().map(|u| u.as_slice()).collect();
    weighted_mean_flat(&refs, weights)
}

/// Weighted mean of equal-shape logit matrices.
pub fn aggregate_logits(batches: &[Matrix], weights: &[f64]) -> Result<Matrix> {
    if batches.is_empty() {
        return Err(Error::shape("aggregate_logits", "0 batches", "at least 1"));
    }
    let (rows, cols) = (batches[0].rows(), batches[0].cols());
    for b in batches {
        if b.rows() != rows || b.cols() != cols {
            return Err(Error::shape(
                "aggregate_logits",
                format!("{}x{}", b.rows(), b.cols()),
                format!("{rows}x{cols}"),
            ));
        }
    }
    let refs: Vec<&[f64]> = batches.iter().map(|b| b.values()).collect();
    Matrix::new(rows, cols, weighted_mean_flat(&refs, weights)?)
}

/// Eval-mode logits of a client's model on the public inputs, plus the
/// forward FLOPs spent producing them.
pub fn client_logits(client: &ClientState, public_x: &Matrix) -> Result<(Message, u64)> {
    if public_x.rows() == 0 {
        return Err(Error::Config("public set is empty".into()));
    }
    let layers = client.model.arch().layers();
    let (logits, _) = client.model.forward_range(public_x, 0, layers, false, None)?;
    let flops = flops_model(
        client.model.arch(),
        client.model.lora(),
        public_x.rows() as u64,
        0,
        layers,
        Phase::Eval,
    )?;
    Ok((Message::LogitBatch { logits }, flops))
}

fn validate_cohort(clients: &[ClientState], server_model: &LayeredNet) -> Result<()> {
    if clients.is_empty() {
        return Err(Error::Config("need at least one client".into()));
    }
    for (i, c) in clients.iter().enumerate() {
        if c.id != i {
            return Err(Error::Config(format!(
                "client ids must be dense and ascending; position {i} holds id {}",
                c.id
            )));
        }
        if c.model.arch() != server_model.arch() || c.model.lora() != server_model.lora() {
            return Err(Error::Config(format!(
                "client {i} does not share the server's architecture and adapter config"
            )));
        }
    }
    Ok(())
}

fn shard_weights(clients: &[ClientState]) -> Vec<f64> {
    clients.iter().map(|c| c.shard.n() as f64).collect()
}

fn note(
    outcome: &mut RoundOutcome,
    client: usize,
    direction: Direction,
    msg: &Message,
    price: &CostModelParams,
) {
    let bytes = msg.payload_scalars() * price.bytes_per_scalar;
    let party = &mut outcome.costs.clients[client];
    match direction {
        Direction::Uplink => party.uplink_bytes += bytes,
        Direction::Downlink => party.downlink_bytes += bytes,
    }
    outcome.trace.push(TraceEntry {
        client,
        direction,
        kind: msg.kind(),
        bytes,
    });
}

/// One round of direct parameter exchange: broadcast the global
/// adapters, fine-tune locally, upload, and install the weighted mean
/// as the new global adapters.
pub fn fed_round(
    server: &mut FedServer,
    clients: &mut [ClientState],
    epochs: usize,
    batch: usize,
    hyper: &AdamParams,
    price: &CostModelParams,
) -> Result<RoundOutcome> {
    validate_cohort(clients, &server.model)?;
    let mut outcome = RoundOutcome {
        costs: RoundCosts {
            clients: vec![PartyCosts::default(); clients.len()],
            server: PartyCosts::default(),
        },
        ..Default::default()
    };

    let (values, manifest) = server.model.export_adapters();
    let broadcast = Message::AdapterUpdate {
        values,
        manifest: manifest.clone(),
    };
    for c in clients.iter_mut() {
        let Message::AdapterUpdate { values, .. } = &broadcast else {
            unreachable!()
        };
        c.model.import_adapters(values, &manifest)?;
        note(&mut outcome, c.id, Direction::Downlink, &broadcast, price);
    }

    let mut updates = Vec::with_capacity(clients.len());
    for c in clients.iter_mut() {
        let log = local_finetune(c, epochs, batch, hyper)?;
        outcome.costs.clients[c.id].flops += log.flops;
        let (values, _) = c.model.export_adapters();
        let upload = Message::AdapterUpdate {
            values,
            manifest: manifest.clone(),
        };
        note(&mut outcome, c.id, Direction::Uplink, &upload, price);
        let Message::AdapterUpdate { values, .. } = upload else {
            unreachable!()
        };
        updates.push(values);
    }

    let aggregated = aggregate_adapters(&updates, &shard_weights(clients))?;
    server.model.import_adapters(&aggregated, &manifest)?;
    Ok(outcome)
}

/// One round of logit exchange: fine-tune locally, upload public-set
/// logits, aggregate into a teacher, distill the server model, then
/// broadcast the server's logits for client-side distillation.
pub fn kd_round(
    server: &mut KdServer,
    clients: &mut [ClientState],
    kd: &KdConfig,
    epochs: usize,
    batch: usize,
    hyper: &AdamParams,
    price: &CostModelParams,
) -> Result<RoundOutcome> {
    validate_cohort(clients, &server.model)?;
    kd.validate()?;
    if server.public.n() == 0 {
        return Err(Error::Config("logit exchange requires a nonempty public set".into()));
    }
    let mut outcome = RoundOutcome {
        costs: RoundCosts {
            clients: vec![PartyCosts::default(); clients.len()],
            server: PartyCosts::default(),
        },
        ..Default::default()
    };
    let layers = server.model.arch().layers();

    for c in clients.iter_mut() {
        let log = local_finetune(c, epochs, batch, hyper)?;
        outcome.costs.clients[c.id].flops += log.flops;
    }

    let mut batches = Vec::with_capacity(clients.len());
    for c in clients.iter() {
        let (msg, flops) = client_logits(c, server.public.x())?;
        outcome.costs.clients[c.id].flops += flops;
        note(&mut outcome, c.id, Direction::Uplink, &msg, price);
        let Message::LogitBatch { logits } = msg else {
            unreachable!()
        };
        batches.push(logits);
    }

    let teacher = aggregate_logits(&batches, &shard_weights(clients))?;
    let log = distill(
        &mut server.model,
        &teacher,
        &server.public,
        kd,
        kd.server_epochs,
        batch,
        &mut server.opt,
        hyper,
        &mut server.stream,
    )?;
    outcome.costs.server.flops += log.flops;

    let (global_logits, _) = server.model.forward_range(server.public.x(), 0, layers, false, None)?;
    outcome.costs.server.flops += flops_model(
        server.model.arch(),
        server.model.lora(),
        server.public.n() as u64,
        0,
        layers,
        Phase::Eval,
    )?;

    let broadcast = Message::LogitBatch {
        logits: global_logits,
    };
    for c in clients.iter() {
        note(&mut outcome, c.id, Direction::Downlink, &broadcast, price);
    }
    let Message::LogitBatch {
        logits: global_logits,
    } = broadcast
    else {
        unreachable!()
    };

    for c in clients.iter_mut() {
        let log = distill(
            &mut c.model,
            &global_logits,
            &server.public,
            kd,
            kd.client_epochs,
            batch,
            &mut c.opt,
            hyper,
            &mut c.stream,
        )?;
        outcome.costs.clients[c.id].flops += log.flops;
    }
    Ok(outcome)
}

/// One round of split execution. Per client, in id order: push a
/// seeded subsample through the boundary batch by batch (activations
/// and labels up, loss gradients down), the server training its suffix
/// adapters and the client its prefix adapters as the batches flow.
/// After all clients, prefix adapters are uploaded, aggregated,
/// installed in the server's replica, and broadcast back.
pub fn split_round(
    server: &mut SplitServer,
    clients: &mut [ClientState],
    cfg: &SplitConfig,
    hyper: &AdamParams,
    price: &CostModelParams,
) -> Result<RoundOutcome> {
    validate_cohort(clients, &server.model)?;
    cfg.validate(&server.model)?;
    if cfg.split_point != server.split_point {
        return Err(Error::Config(format!(
            "config splits at {}, server at {}",
            cfg.split_point, server.split_point
        )));
    }
    let k = server.split_point;
    let layers = server.model.arch().layers();
    let prefix_manifest = server.model.manifest_range(1, k);
    let suffix_manifest = server.model.manifest_range(k + 1, layers);
    for c in clients.iter() {
        if cfg.samples_per_round > c.shard.n() {
            return Err(Error::Config(format!(
                "samples_per_round {} exceeds client {}'s shard of {}",
                cfg.samples_per_round,
                c.id,
                c.shard.n()
            )));
        }
        if c.opt.len() != prefix_manifest.scalar_len() {
            return Err(Error::Config(format!(
                "client {} optimizer covers {} scalars, prefix needs {}",
                c.id,
                c.opt.len(),
                prefix_manifest.scalar_len()
            )));
        }
    }

    let mut outcome = RoundOutcome {
        costs: RoundCosts {
            clients: vec![PartyCosts::default(); clients.len()],
            server: PartyCosts::default(),
        },
        ..Default::default()
    };

    use rand::seq::SliceRandom;
    for c in clients.iter_mut() {
        let mut order: Vec<usize> = (0..c.shard.n()).collect();
        order.shuffle(&mut c.stream);
        order.truncate(cfg.samples_per_round);

        for ids in order.chunks(cfg.batch) {
            let bx = gather_rows(c.shard.x(), ids)?;
            let by: Vec<usize> = ids.iter().map(|&i| c.shard.labels()[i]).collect();

            let (activations, client_tape) = c.model.forward_range(&bx, 0, k, true, Some(&mut c.stream))?;
            outcome.costs.clients[c.id].flops += flops_model(
                c.model.arch(),
                c.model.lora(),
                ids.len() as u64,
                0,
                k,
                Phase::Train,
            )?;
            let up = Message::ActivationBatch {
                activations,
                labels: by,
            };
            note(&mut outcome, c.id, Direction::Uplink, &up, price);
            let Message::ActivationBatch { activations, labels } = up else {
                unreachable!()
            };

            let (logits, server_tape) =
                server
                    .model
                    .forward_range(&activations, k, layers, true, Some(&mut server.stream))?;
            let probs = softmax_rows(&logits);
            let loss = cross_entropy(&probs, &labels)?;
            let grad = cross_entropy_grad(&probs, &labels)?;
            let (suffix_grads, boundary_grad) = server.model.backward_range(&server_tape, &grad)?;

            let flat = suffix_grads.flatten(&suffix_manifest)?;
            let (mut params, _) = server.model.export_range(k + 1, layers);
            server.opt.update(&mut params, &flat, hyper)?;
            server.model.import_adapters(&params, &suffix_manifest)?;
            outcome.costs.server.flops += flops_model(
                server.model.arch(),
                server.model.lora(),
                ids.len() as u64,
                k,
                layers,
                Phase::Train,
            )?;

            let down = Message::GradientBatch {
                grads: boundary_grad,
            };
            note(&mut outcome, c.id, Direction::Downlink, &down, price);
            let Message::GradientBatch { grads } = down else {
                unreachable!()
            };

            let (prefix_grads, _) = c.model.backward_range(&client_tape, &grads)?;
            let flat = prefix_grads.flatten(&prefix_manifest)?;
            let (mut params, _) = c.model.export_range(1, k);
            c.opt.update(&mut params, &flat, hyper)?;
            c.model.import_adapters(&params, &prefix_manifest)?;

            outcome.batch_losses.push(loss);
        }
    }

    let mut updates = Vec::with_capacity(clients.len());
    for c in clients.iter() {
        let (values, _) = c.model.export_range(1, k);
        let up = Message::AdapterUpdate {
            values,
            manifest: prefix_manifest.clone(),
        };
        note(&mut outcome, c.id, Direction::Uplink, &up, price);
        let Message::AdapterUpdate { values, .. } = up else {
            unreachable!()
        };
        updates.push(values);
    }

    let aggregated = aggregate_adapters(&updates, &shard_weights(clients))?;
    server.model.import_adapters(&aggregated, &prefix_manifest)?;

    let broadcast = Message::AdapterUpdate {
        values: aggregated,
        manifest: prefix_manifest.clone(),
    };
    for c in clients.iter_mut() {
        let Message::AdapterUpdate { values, .. } = &broadcast else {
            unreachable!()
        };
        c.model.import_adapters(values, &prefix_manifest)?;
        note(&mut outcome, c.id, Direction::Downlink, &broadcast, price);
    }
    Ok(outcome)
}
