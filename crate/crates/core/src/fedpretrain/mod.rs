//! Simulated federated pretraining.
//!
//! Every client hosts one table with a private featurizer and head plus a
//! local copy of the shared backbone. A round is: broadcast the server
//! weights, let every client take `n_local` optimizer steps, then add the
//! sum of the clients' shared-weight deltas to the server weights.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BatchStream, PreparedTable, DEFAULT_BATCH_SIZE};
use crate::error::{Error, Result};
use crate::model::{BackboneConfig, BACKBONE_PREFIX};
use crate::objectives::{ObjectiveConfig, TableModel};
use crate::tensor::{Float, OptimizerConfig, OptimizerState, ParamSet, Tensor};

pub use checkpoint::{Checkpoint, CheckpointMeta, FORMAT_VERSION, MAGIC};

/// Which parameters are exchanged with the server.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShareMode {
    /// Every backbone block.
    #[default]
    BlocksOnly,
    /// Every backbone block and the CLS embedding.
    BlocksPlusCls,
    /// Only the first backbone block.
    FirstBlockOnly,
}

impl ShareMode {
    pub const ALL: [ShareMode; 3] = [ShareMode::BlocksOnly, ShareMode::BlocksPlusCls, ShareMode::FirstBlockOnly];

    pub fn is_shared(self, name: &str) -> bool {
        match self {
            ShareMode::BlocksOnly => name.starts_with(BACKBONE_PREFIX),
            ShareMode::BlocksPlusCls => name.starts_with(BACKBONE_PREFIX) || name == crate::model::CLS_PARAM,
            ShareMode::FirstBlockOnly => name.starts_with("backbone.0."),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ShareMode::BlocksOnly => "blocks_only",
            ShareMode::BlocksPlusCls => "blocks_plus_cls",
            ShareMode::FirstBlockOnly => "first_block_only",
        }
    }
}

impl fmt::Display for ShareMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShareMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShareMode::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            Error::Config(format!("unknown share mode `{s}` (blocks_only, blocks_plus_cls, first_block_only)"))
        })
    }
}

/// How client deltas are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// `w + sum_k delta_k`.
    #[default]
    Sum,
    /// `w + (sum_k delta_k) / K`.
    Mean,
}

pub const DEFAULT_CHECKPOINT_ROUNDS: [usize; 5] = [250, 500, 1000, 1500, 2000];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FedConfig {
    /// Local optimizer steps per round.
    pub n_local: usize,
    pub rounds: usize,
    pub share_mode: ShareMode,
    pub aggregation: Aggregation,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    /// Rounds after which a checkpoint is emitted; the final round always is.
    pub checkpoint_rounds: Vec<usize>,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            n_local: 5,
            rounds: 2000,
            share_mode: ShareMode::BlocksOnly,
            aggregation: Aggregation::Sum,
            optimizer: OptimizerConfig::default(),
            batch_size: DEFAULT_BATCH_SIZE,
            checkpoint_rounds: DEFAULT_CHECKPOINT_ROUNDS.to_vec(),
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    /// Sorted checkpoint rounds within `0..=rounds`, always including `rounds`.
    pub fn checkpoint_schedule(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.checkpoint_rounds.iter().copied().filter(|&r| r <= self.rounds).collect();
        s.push(self.rounds);
        s.sort_unstable();
        s.dedup();
        s
    }
}

/// Shared-weight change of one client over one round, in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Delta {
    pub client: usize,
    pub tensors: Vec<(String, Vec<f64>)>,
}

/// Per-client seed derived from the run seed.
pub fn client_seed(run_seed: u64, index: usize) -> u64 {
    run_seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// RNG streams a client derives from its seed.
pub const CORRUPTION_STREAM: u64 = 11;
pub const DROPOUT_STREAM: u64 = 12;

pub fn seeded_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One pretraining participant.
///
/// From `seed` it derives: parameter init (`TableModel::init(seed)`), the
/// batch order (`BatchStream` over the training rows with `seed`), the
/// corruption RNG ([`CORRUPTION_STREAM`]) and per-step dropout seeds drawn
/// from [`DROPOUT_STREAM`].
#[derive(Clone, Debug)]
pub struct Client<F> {
    pub index: usize,
    pub table: PreparedTable,
    pub model: TableModel,
    pub params: ParamSet<F>,
    pub optimizer: OptimizerState<F>,
    stream: BatchStream,
    corrupt_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
}

impl<F: Float> Client<F> {
    pub fn new(index: usize, table: PreparedTable, model: TableModel, fed: &FedConfig, seed: u64) -> Result<Self> {
        fed.validate()?;
        if table.split.train.is_empty() {
            return Err(Error::Dataset(format!("client {index} (`{}`) has an empty training split", table.name)));
        }
        let mut params = model.init::<F>(seed)?;
        params.set_shared_by(|n| fed.share_mode.is_shared(n));
        let stream = BatchStream::new(table.split.train.clone(), fed.batch_size, true, seed)?;
        Ok(Self {
            index,
            table,
            model,
            params,
            optimizer: OptimizerState::new(fed.optimizer),
            stream,
            corrupt_rng: seeded_stream(seed, CORRUPTION_STREAM),
            dropout_rng: seeded_stream(seed, DROPOUT_STREAM),
        })
    }

    /// Current shared tensors widened to f64.
    pub fn shared_values(&self) -> Vec<(String, Vec<f64>)> {
        self.params.shared().map(|(n, p)| (n.to_string(), p.tensor.to_f64_vec())).collect()
    }

    /// One loss/backward/optimizer step on the next batch.
    pub fn step(&mut self) -> Result<f64> {
        let rows = self.stream.next_batch();
        let graph_seed: u64 = self.dropout_rng.random();
        self.model
            .train_step(&mut self.params, &mut self.optimizer, &self.table, &rows, graph_seed, &mut self.corrupt_rng)
            .map_err(|e| Error::Protocol(format!("client {} failed: {e}", self.index)))
    }
}

/// Runs `n_steps` local steps and returns the shared-weight delta and the
/// mean loss (NaN when `n_steps` is 0).
pub fn client_local_steps<F: Float>(client: &mut Client<F>, n_steps: usize) -> Result<(Delta, f64)> {
    let before = client.shared_values();
    let mut total = 0.0;
    for _ in 0..n_steps {
        total += client.step()?;
    }
    let after = client.shared_values();
    let tensors = before
        .into_iter()
        .zip(after)
        .map(|((name, b), (_, a))| (name, a.iter().zip(&b).map(|(x, y)| x - y).collect()))
        .collect();
    Ok((Delta { client: client.index, tensors }, total / n_steps as f64))
}

/// Canonical shared weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Server<F> {
    pub shared: Vec<(String, Tensor<F>)>,
    pub round: usize,
    pub n_clients: usize,
    pub aggregation: Aggregation,
    pub aggregation_events: usize,
    pub broadcast_events: usize,
}

impl<F: Float> Server<F> {
    /// Starts from the shared tensors of `params`.
    pub fn from_params(params: &ParamSet<F>, n_clients: usize, aggregation: Aggregation) -> Result<Self> {
        if n_clients == 0 {
            return Err(Error::Config("pretraining needs at least one client".into()));
        }
        let shared: Vec<_> = params
            .shared()
            .map(|(n, p)| {
                let mut t = p.tensor.clone();
                t.clear_grad();
                (n.to_string(), t)
            })
            .collect();
        Ok(Self { shared, round: 0, n_clients, aggregation, aggregation_events: 0, broadcast_events: 0 })
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<F>> {
        self.shared.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Adds the combined deltas of all clients. Deltas may arrive in any
    /// order; they are summed in client-index order.
    pub fn aggregate(&mut self, deltas: &[Delta]) -> Result<()> {
        let mut ordered: Vec<&Delta> = deltas.iter().collect();
        ordered.sort_by_key(|d| d.client);
        let indices: Vec<usize> = ordered.iter().map(|d| d.client).collect();
        if indices != (0..self.n_clients).collect::<Vec<_>>() {
            return Err(Error::Protocol(format!(
                "round {} expects one delta from each of {} clients, got clients {indices:?}",
                self.round + 1,
                self.n_clients
            )));
        }
        for d in &ordered {
            if d.tensors.len() != self.shared.len()
                || d.tensors.iter().zip(&self.shared).any(|((n, v), (sn, st))| n != sn || v.len() != st.numel())
            {
                return Err(Error::Protocol(format!(
                    "delta from client {} does not match the shared weights",
                    d.client
                )));
            }
        }
        let k = self.n_clients as f64;
        for (i, (_, w)) in self.shared.iter_mut().enumerate() {
            for (j, v) in w.data_mut().iter_mut().enumerate() {
                let mut sum = 0.0;
                for d in &ordered {
                    sum += d.tensors[i].1[j];
                }
                if self.aggregation == Aggregation::Mean {
                    sum /= k;
                }
                *v = F::of(v.as_f64() + sum);
            }
        }
        self.round += 1;
        self.aggregation_events += 1;
        Ok(())
    }

    /// Overwrites every client's shared tensors with the server's.
    pub fn broadcast(&mut self, clients: &mut [Client<F>]) -> Result<()> {
        for c in clients.iter_mut() {
            for (name, t) in &self.shared {
                let p = c
                    .params
                    .get(name)
                    .ok_or_else(|| Error::Protocol(format!("client {} has no shared tensor `{name}`", c.index)))?;
                if !p.shared {
                    return Err(Error::Protocol(format!("`{name}` is not shared on client {}", c.index)));
                }
                c.params.assign(name, t)?;
            }
        }
        self.broadcast_events += 1;
        Ok(())
    }

    pub fn checkpoint(&self, backbone: BackboneConfig, meta: CheckpointMeta) -> Checkpoint {
        let tensors = self.shared.iter().map(|(n, t)| (n.clone(), t.cast::<f32>().with_requires_grad(false))).collect();
        Checkpoint { backbone, tensors, meta }
    }
}

/// Builds one client per table; objectives are assigned round-robin.
pub fn build_clients<F: Float>(
    tables: Vec<PreparedTable>,
    backbone: BackboneConfig,
    objectives: &[ObjectiveConfig],
    fed: &FedConfig,
    run_seed: u64,
) -> Result<Vec<Client<F>>> {
    if tables.is_empty() || objectives.is_empty() {
        return Err(Error::Config("pretraining needs at least one table and one objective".into()));
    }
    tables
        .into_iter()
        .enumerate()
        .map(|(k, t)| {
            let model = TableModel::new(&t, backbone, objectives[k % objectives.len()])?;
            Client::new(k, t, model, fed, client_seed(run_seed, k))
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    /// Mean client loss of each round.
    pub round_losses: Vec<f64>,
    pub aggregation_events: usize,
    pub broadcast_events: usize,
    pub checkpoint_rounds: Vec<usize>,
}

/// Synchronous pretraining loop. `on_checkpoint(round, server)` runs after
/// every scheduled round (and for round 0 when it is scheduled).
pub fn pretrain_run<F: Float>(
    clients: &mut [Client<F>],
    server: &mut Server<F>,
    fed: &FedConfig,
    mut on_checkpoint: impl FnMut(usize, &Server<F>) -> Result<()>,
) -> Result<PretrainLog> {
    fed.validate()?;
    if clients.len() != server.n_clients {
        return Err(Error::Protocol(format!("server expects {} clients, got {}", server.n_clients, clients.len())));
    }
    let schedule = fed.checkpoint_schedule();
    let mut log = PretrainLog::default();
    server.broadcast(clients)?;
    if schedule.first() == Some(&0) {
        on_checkpoint(0, server)?;
        log.checkpoint_rounds.push(0);
    }
    for round in 1..=fed.rounds {
        let results: Vec<(Delta, f64)> =
            clients.par_iter_mut().map(|c| client_local_steps(c, fed.n_local)).collect::<Result<_>>()?;
        let mean_loss = results.iter().map(|r| r.1).sum::<f64>() / results.len() as f64;
        let deltas: Vec<Delta> = results.into_iter().map(|r| r.0).collect();
        server.aggregate(&deltas)?;
        server.broadcast(clients)?;
        log.round_losses.push(mean_loss);
        if schedule.binary_search(&round).is_ok() {
            on_checkpoint(round, server)?;
            log.checkpoint_rounds.push(round);
        }
    }
    log.aggregation_events = server.aggregation_events;
    log.broadcast_events = server.broadcast_events;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_suite, Split, SyntheticConfig};
    use crate::model::BackboneVariant;
    use crate::objectives::ObjectiveKind;

    fn tables(n: usize) -> Vec<PreparedTable> {
        generate_synthetic_suite(&SyntheticConfig::new(n, 40, 4, 3, 5))
            .unwrap()
            .into_iter()
            .map(|t| {
                let n = t.n_rows();
                t.prepare(Split::all_train(n)).unwrap()
            })
            .collect()
    }

    fn small() -> BackboneConfig {
        BackboneConfig {
            variant: BackboneVariant::Ftt,
            n_blocks: 1,
            d: 8,
            n_heads: 2,
            attn_dropout: 0.1,
            ff_dropout: 0.1,
        }
    }

    fn objective() -> ObjectiveConfig {
        ObjectiveConfig { head_hidden: 8, projection_dim: 8, ..ObjectiveConfig::new(ObjectiveKind::Reconstruction) }
    }

    fn fed(rounds: usize, n_local: usize) -> FedConfig {
        FedConfig { rounds, n_local, batch_size: 16, checkpoint_rounds: vec![2], ..FedConfig::default() }
    }

    fn delta(client: usize, v: Vec<f64>) -> Delta {
        Delta { client, tensors: vec![("backbone.w".into(), v)] }
    }

    fn server(w: Vec<f32>, k: usize) -> Server<f32> {
        let mut ps = ParamSet::new();
        let n = w.len();
        ps.insert("backbone.w", Tensor::new(vec![n], w).unwrap(), true).unwrap();
        ps.set_shared_by(|_| true);
        Server::from_params(&ps, k, Aggregation::Sum).unwrap()
    }

    #[test]
    fn aggregation_examples() {
        let mut s = server(vec![1.0, 2.0], 2);
        s.aggregate(&[delta(1, vec![-0.5, 0.25]), delta(0, vec![0.5, -0.25])]).unwrap();
        assert_eq!(s.shared[0].1.data(), &[1.0, 2.0]);

        let mut s = server(vec![1.0, 2.0], 3);
        let d = vec![0.25, -1.0];
        s.aggregate(&[delta(0, d.clone()), delta(1, d.clone()), delta(2, d)]).unwrap();
        assert_eq!(s.shared[0].1.data(), &[1.75, -1.0]);

        let mut s = server(vec![1.0], 2);
        assert!(matches!(s.aggregate(&[delta(0, vec![0.0])]), Err(Error::Protocol(_))));
        assert!(matches!(s.aggregate(&[delta(0, vec![0.0]), delta(0, vec![0.0])]), Err(Error::Protocol(_))));
    }

    #[test]
    fn mean_mode_divides_by_client_count() {
        let mut s = server(vec![0.0], 2);
        s.aggregation = Aggregation::Mean;
        s.aggregate(&[delta(0, vec![1.0]), delta(1, vec![3.0])]).unwrap();
        assert_eq!(s.shared[0].1.data(), &[2.0]);
    }

    #[test]
    fn zero_steps_give_zero_delta() {
        let mut clients = build_clients::<f32>(tables(1), small(), &[objective()], &fed(1, 1), 0).unwrap();
        let (d, _) = client_local_steps(&mut clients[0], 0).unwrap();
        assert!(d.tensors.iter().all(|(_, v)| v.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn broadcast_syncs_shared_and_leaves_featurizers() {
        let cfg = FedConfig { share_mode: ShareMode::BlocksPlusCls, ..fed(2, 2) };
        let mut clients = build_clients::<f32>(tables(3), small(), &[objective()], &cfg, 1).unwrap();
        let mut srv = Server::from_params(&clients[0].params, 3, Aggregation::Sum).unwrap();
        assert!(srv.tensor(crate::model::CLS_PARAM).is_some());
        pretrain_run(&mut clients, &mut srv, &cfg, |_, _| Ok(())).unwrap();
        for c in &clients {
            for (name, t) in &srv.shared {
                assert_eq!(c.params.tensor(name).unwrap().data(), t.data());
            }
        }
        let private = |c: &Client<f32>| -> Vec<f32> {
            c.params.iter().filter(|(_, p)| !p.shared).flat_map(|(_, p)| p.tensor.data().to_vec()).collect()
        };
        assert_ne!(private(&clients[0]), private(&clients[1]));
    }

    #[test]
    fn run_counts_events_and_checkpoints() {
        let cfg = fed(4, 2);
        let mut clients = build_clients::<f32>(tables(2), small(), &[objective()], &cfg, 2).unwrap();
        let mut srv = Server::from_params(&clients[0].params, 2, Aggregation::Sum).unwrap();
        let mut seen = Vec::new();
        let log = pretrain_run(&mut clients, &mut srv, &cfg, |r, _| {
            seen.push(r);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![2, 4]);
        assert_eq!(log.aggregation_events, 4);
        assert_eq!(log.round_losses.len(), 4);
        assert!(log.round_losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn zero_rounds_checkpoint_is_the_initialization() {
        let cfg = FedConfig { checkpoint_rounds: vec![], ..fed(0, 5) };
        let mut clients = build_clients::<f32>(tables(2), small(), &[objective()], &cfg, 3).unwrap();
        let init = clients[0].shared_values();
        let mut srv = Server::from_params(&clients[0].params, 2, Aggregation::Sum).unwrap();
        let mut got = None;
        pretrain_run(&mut clients, &mut srv, &cfg, |r, s| {
            got = Some((r, s.shared.clone()));
            Ok(())
        })
        .unwrap();
        let (r, shared) = got.unwrap();
        assert_eq!(r, 0);
        for ((n, t), (m, v)) in shared.iter().zip(&init) {
            assert_eq!(n, m);
            assert_eq!(t.to_f64_vec(), *v);
        }
    }

    #[test]
    fn identical_clients_produce_identical_deltas() {
        let t = tables(1).remove(0);
        let cfg = fed(1, 3);
        let m = TableModel::new(&t, small(), objective()).unwrap();
        let mut a = Client::<f32>::new(0, t.clone(), m.clone(), &cfg, 9).unwrap();
        let mut b = Client::<f32>::new(1, t, m, &cfg, 9).unwrap();
        let (da, _) = client_local_steps(&mut a, 3).unwrap();
        let (db, _) = client_local_steps(&mut b, 3).unwrap();
        assert_eq!(da.tensors, db.tensors);
    }

    #[test]
    fn share_mode_partitions() {
        assert!(ShareMode::BlocksOnly.is_shared("backbone.2.ff.in.weight"));
        assert!(!ShareMode::BlocksOnly.is_shared("featurizer.cls"));
        assert!(ShareMode::BlocksPlusCls.is_shared("featurizer.cls"));
        assert!(ShareMode::FirstBlockOnly.is_shared("backbone.0.attn.q.weight"));
        assert!(!ShareMode::FirstBlockOnly.is_shared("backbone.1.attn.q.weight"));
        assert!(!ShareMode::FirstBlockOnly.is_shared("backbone.10.attn.q.weight"));
        assert_eq!("blocks_plus_cls".parse::<ShareMode>().unwrap(), ShareMode::BlocksPlusCls);
    }
}
