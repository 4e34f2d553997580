//! Round engines for the relay-based protocol and its baselines.
//!
//! One round of the relay protocol runs five stages on a shared event clock:
//! (1) every client initializes from an edge model — overlapping clients
//! either take the earliest-arriving broadcast (fastest selection) or a fixed
//! home ES; (2) clients train locally, local clients and NOCs upload, ROCs
//! hold their models; (3) each ES forms the data-weighted cell average of the
//! uploads; (4) each ROC merges an arriving neighbor cell aggregate with its
//! own local model and forwards it, the composite data volume traveling with
//! the model; (5) each ES takes the data-weighted average of its own cell
//! aggregate and the incoming relayed models, boundary cells contributing
//! zero weight for the missing side. Every `kappa` rounds all clients'
//! latest local models reach the cloud, which broadcasts the global average
//! back to every ES.
//!
//! Baselines: HFL (fixed assignment, no relays), FedMES (overlapping clients
//! wait for all covering broadcasts, train on their weighted average, upload
//! to all covering ESs), and FL-EOCD (as FedMES, but uploads merge the
//! trained model with edge models cached in the previous round).
//!
//! All aggregation is a sequential reduction in ascending id order, so runs
//! reproduce bit-for-bit regardless of thread count.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::channel::{self, ChannelParams, EsRoundTimes, GainTable};
use crate::config::{AlgorithmKind, ArchKind, DatasetKind, ExperimentConfig, ScheduleKind};
use crate::datagen::{self, PartitionPlan, Shard};
use crate::error::{FedocError, Result};
use crate::learner::{self, ArchDescriptor, LrSchedule, ModelParams, SgdOpts};
use crate::rng;
use crate::topology::{build_topology, ClientId, ClientRole, Topology};

// ---------------------------------------------------------------------------
// Aggregation primitives
// ---------------------------------------------------------------------------

pub mod agg {
    //! Data-weighted model averages.
    //!
    //! Computed as `base + sum_i (w_i / W) * (x_i - base)`, which makes the
    //! average of identical inputs return those bits unchanged and keeps
    //! every coordinate inside the convex hull of its inputs up to rounding.

    /// Weighted mean of `(weight, model)` pairs in the given order.
    ///
    /// Weights must be nonnegative with a positive sum.
    pub fn weighted_mean(items: &[(f64, &[f64])]) -> Vec<f64> {
        assert!(!items.is_empty(), "cannot average zero models");
        let total: f64 = items.iter().map(|(w, _)| *w).sum();
        assert!(
            total > 0.0 && items.iter().all(|(w, _)| *w >= 0.0),
            "aggregation weights must be nonnegative with positive sum"
        );
        let base = items[0].1;
        let mut out = base.to_vec();
        for &(w, x) in items {
            assert_eq!(x.len(), base.len(), "model dimension mismatch");
            let c = w / total;
            if c == 0.0 {
                continue;
            }
            for (o, (&xv, &bv)) in out.iter_mut().zip(x.iter().zip(base)) {
                *o += c * (xv - bv);
            }
        }
        out
    }

    /// Cell aggregate over uploads: returns the average and the data volume.
    pub fn aggregate_cell(items: &[(f64, &[f64])]) -> (Vec<f64>, f64) {
        let total = items.iter().map(|(w, _)| *w).sum();
        (weighted_mean(items), total)
    }

    /// Relay merge of a neighbor cell aggregate with the ROC's local model;
    /// returns the forwarded model and its composite data volume.
    pub fn aggregate_relay(
        cell_volume: f64,
        cell_model: &[f64],
        roc_volume: f64,
        roc_model: &[f64],
    ) -> (Vec<f64>, f64) {
        (
            weighted_mean(&[(cell_volume, cell_model), (roc_volume, roc_model)]),
            cell_volume + roc_volume,
        )
    }

    /// Round-end edge model: own cell aggregate plus incoming relayed models.
    pub fn aggregate_edge(items: &[(f64, &[f64])]) -> Vec<f64> {
        weighted_mean(items)
    }

    /// Cloud model over per-cell aggregates.
    pub fn aggregate_cloud(items: &[(f64, &[f64])]) -> Vec<f64> {
        weighted_mean(items)
    }
}

// ---------------------------------------------------------------------------
// Traces
// ---------------------------------------------------------------------------

/// Per-round initialization choice of every overlapping client.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SelectionRecord {
    /// (client, selected cell); exactly one entry per OC per round.
    pub choices: Vec<(ClientId, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub loss: f64,
    pub per_es_accuracy: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RoundTrace {
    pub round: usize,
    pub per_es: Vec<EsRoundTimes>,
    /// Absolute broadcast-ready time of each ES after this round.
    pub per_es_ready: Vec<f64>,
    pub selection: SelectionRecord,
    /// SHA-256 of each edge model's little-endian bytes.
    pub checksums: Vec<String>,
    pub metrics: Option<EvalMetrics>,
    /// Simulated wall clock when the round's models exist everywhere.
    pub sim_time_s: f64,
    pub cloud_round: bool,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub algorithm: AlgorithmKind,
    pub topology: Topology,
    pub traces: Vec<RoundTrace>,
    pub initial_model: ModelParams,
    pub final_edge_models: Vec<ModelParams>,
    pub final_cloud_model: Option<ModelParams>,
    /// Simulated seconds at the first evaluation reaching the target.
    pub time_to_target: Option<f64>,
    /// Per-round edge models when trajectory recording is on.
    pub edge_trajectory: Option<Vec<Vec<Vec<f64>>>>,
    /// (round, per-ES models) snapshots when checkpointing is on.
    pub snapshots: Vec<(usize, Vec<Vec<f64>>)>,
}

pub fn model_checksum(w: &[f64]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for v in w {
        hasher.update(v.to_le_bytes());
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Fixed home cell per overlapping client, uniform between the two covering
/// cells; shared by HFL, the fixed-selection variant, and the analysis runs.
pub fn fixed_assignment(topo: &Topology, seed: u64) -> BTreeMap<ClientId, usize> {
    let mut out = BTreeMap::new();
    for (pair, ids) in topo.overlap_clients.iter().enumerate() {
        for &k in ids {
            let mut rs = rng::stream(seed, "fixed-home", &[k as u64]);
            let home = if rand::Rng::gen_bool(&mut rs, 0.5) { pair } else { pair + 1 };
            out.insert(k, home);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

pub struct Engine {
    cfg: ExperimentConfig,
    pub topo: Topology,
    pub plan: PartitionPlan,
    shards: Vec<Shard>,
    test: Shard,
    chan: ChannelParams,
    gains: GainTable,
    taus: Vec<f64>,
    sched: LrSchedule,
    opts: SgdOpts,
    arch: ArchDescriptor,
    fixed_home: BTreeMap<ClientId, usize>,
    /// Client data volumes n^(k).
    n: Vec<f64>,
    /// Covered clients per cell and their total data volume (FedMES view).
    mes_members: Vec<Vec<ClientId>>,
    mes_sizes: Vec<f64>,
    cast_cache: Vec<f64>,

    // Mutable per-round state.
    edge: Vec<Vec<f64>>,
    ready: Vec<f64>,
    client_models: Vec<Vec<f64>>,
    cache: BTreeMap<ClientId, Vec<(usize, Vec<f64>)>>,
}

impl Engine {
    pub fn new(cfg: ExperimentConfig) -> Result<Engine> {
        cfg.validate()?;
        let topo = build_topology(&cfg, cfg.seeds.topology)?;
        let mnist_dir = cfg.mnist_dir();
        let (train, test) = datagen::load_dataset(&cfg.dataset, mnist_dir.as_deref(), cfg.seeds.data)?;
        train.validate()?;
        test.validate()?;
        let plan = datagen::partition_noniid(&train, &topo, &cfg.partition, cfg.seeds.data)?;
        let shards: Vec<Shard> = (0..topo.num_clients()).map(|k| plan.shard(&train, k)).collect();
        if let Some(k) = shards.iter().position(Shard::is_empty) {
            return Err(FedocError::EmptyShard(k));
        }

        let test_shard = match cfg.run.eval_subset {
            Some(size) if size < test.len() => Shard::from_dataset(
                &test.stratified_subset(size, rng::subseed(cfg.seeds.data, "eval-subset", &[])),
            ),
            _ => Shard::from_dataset(&test),
        };

        let arch = match cfg.training.arch.kind {
            ArchKind::Logistic => ArchDescriptor::Logistic {
                input_dim: train.dims,
                num_classes: train.num_classes,
            },
            ArchKind::Mlp => ArchDescriptor::Mlp {
                input_dim: train.dims,
                hidden: cfg.training.arch.hidden,
                num_classes: train.num_classes,
            },
        };
        let sched = match cfg.training.schedule.kind {
            ScheduleKind::Exponential => LrSchedule::Exponential {
                eta0: cfg.training.schedule.eta0,
                decay: cfg.training.schedule.decay,
            },
            ScheduleKind::Theoretical => LrSchedule::Theoretical {
                epochs: cfg.training.local_epochs,
            },
        };
        let opts = SgdOpts {
            epochs: cfg.training.local_epochs,
            batch_size: cfg.training.batch_size,
            iteration_mode: cfg.training.iteration_mode,
        };

        let chan = ChannelParams::from_spec(&cfg.channel, arch.param_count());
        let gains = channel::sample_gains(&topo, &chan, cfg.seeds.channel);
        let taus = channel::sample_compute_times(topo.num_clients(), &chan, cfg.seeds.channel);
        let fixed_home = fixed_assignment(&topo, cfg.seeds.topology);
        let n: Vec<f64> = (0..topo.num_clients()).map(|k| plan.client_size(k) as f64).collect();

        let mes_members: Vec<Vec<ClientId>> =
            (0..topo.num_servers).map(|cell| topo.covered_clients(cell)).collect();
        let mes_sizes: Vec<f64> = mes_members
            .iter()
            .map(|ids| ids.iter().map(|&k| n[k]).sum())
            .collect();
        let cast_cache: Vec<f64> = (0..topo.num_servers)
            .map(|cell| channel::broadcast_latency(cell, &mes_members[cell], &gains, &chan))
            .collect();

        let init = arch.init_model(rng::subseed(cfg.seeds.training, "round0-init", &[]));
        let edge = vec![init.w.clone(); topo.num_servers];
        let client_models = vec![init.w.clone(); topo.num_clients()];

        Ok(Engine {
            topo,
            plan,
            shards,
            test: test_shard,
            chan,
            gains,
            taus,
            sched,
            opts,
            arch,
            fixed_home,
            n,
            mes_members,
            mes_sizes,
            cast_cache,
            edge,
            ready: vec![0.0; cfg.topology.num_servers],
            client_models,
            cache: BTreeMap::new(),
            cfg,
        })
    }

    fn resample_round(&mut self, round: usize) {
        if self.cfg.channel.resample_gains_per_round {
            let seed = rng::subseed(self.cfg.seeds.channel, "round-gains", &[round as u64]);
            self.gains = channel::sample_gains(&self.topo, &self.chan, seed);
            self.cast_cache = (0..self.topo.num_servers)
                .map(|cell| channel::broadcast_latency(cell, &self.mes_members[cell], &self.gains, &self.chan))
                .collect();
        }
    }

    /// Train the given clients in parallel; results merge in ascending id order.
    fn train_all(&self, inits: Vec<(ClientId, Vec<f64>)>, round: usize) -> BTreeMap<ClientId, Vec<f64>> {
        let results: Vec<(ClientId, Vec<f64>)> = inits
            .into_par_iter()
            .map(|(k, w0)| {
                let m0 = ModelParams { arch: self.arch, w: w0 };
                let seed = rng::subseed(self.cfg.seeds.training, "client-round", &[k as u64, round as u64]);
                let m = learner::local_sgd(&m0, &self.shards[k], &self.opts, &self.sched, round, seed)
                    .expect("shards validated nonempty");
                (k, m.w)
            })
            .collect();
        results.into_iter().collect()
    }

    fn cell_aggregates(
        &self,
        s_sets: &[Vec<ClientId>],
        models: &BTreeMap<ClientId, Vec<f64>>,
    ) -> Vec<(Vec<f64>, f64)> {
        s_sets
            .iter()
            .enumerate()
            .map(|(cell, s)| {
                if s.is_empty() {
                    // No uploads: the edge model stands with zero data volume.
                    (self.edge[cell].clone(), 0.0)
                } else {
                    let items: Vec<(f64, &[f64])> =
                        s.iter().map(|&k| (self.n[k], models[&k].as_slice())).collect();
                    agg::aggregate_cell(&items)
                }
            })
            .collect()
    }

    fn evaluate_edges(&self) -> EvalMetrics {
        let per_es: Vec<(f64, f64)> = self
            .edge
            .par_iter()
            .map(|w| learner::evaluate(&ModelParams { arch: self.arch, w: w.clone() }, &self.test))
            .collect();
        let l = per_es.len() as f64;
        EvalMetrics {
            accuracy: per_es.iter().map(|(a, _)| a).sum::<f64>() / l,
            loss: per_es.iter().map(|(_, x)| x).sum::<f64>() / l,
            per_es_accuracy: per_es.iter().map(|(a, _)| *a).collect(),
        }
    }

    /// One round of the relay protocol (fastest or fixed OC selection).
    fn round_fedoc(&mut self, round: usize, fastest: bool) -> RoundTrace {
        let l = self.topo.num_servers;
        let avail: Vec<f64> = (0..l).map(|c| self.ready[c] + self.cast_cache[c]).collect();

        // Stage 1: initialization choices.
        let mut selection = SelectionRecord::default();
        let mut init_cell: BTreeMap<ClientId, usize> = BTreeMap::new();
        let mut s_sets: Vec<Vec<ClientId>> = self.topo.local_clients.clone();
        for (cell, ids) in self.topo.local_clients.iter().enumerate() {
            for &k in ids {
                init_cell.insert(k, cell);
            }
        }
        for (pair, ids) in self.topo.overlap_clients.iter().enumerate() {
            if ids.is_empty() {
                continue;
            }
            let roc = self.topo.relay(pair);
            for &k in ids {
                let sel = if fastest {
                    // Earliest broadcast wins; ties break to the lower index.
                    if avail[pair + 1] < avail[pair] { pair + 1 } else { pair }
                } else {
                    self.fixed_home[&k]
                };
                selection.choices.push((k, sel));
                init_cell.insert(k, sel);
                if k != roc {
                    s_sets[sel].push(k);
                }
            }
        }
        for s in &mut s_sets {
            s.sort_unstable();
        }

        // Stage 2: local training (ROCs train too but do not upload).
        let inits: Vec<(ClientId, Vec<f64>)> = (0..self.topo.num_clients())
            .map(|k| (k, self.edge[init_cell[&k]].clone()))
            .collect();
        let trained = self.train_all(inits, round);
        for (&k, w) in &trained {
            self.client_models[k] = w.clone();
        }

        // Stage 3: cell aggregates.
        let cell_aggs = self.cell_aggregates(&s_sets, &trained);

        // Stage 4: two directed relays per populated pair.
        let mut incoming: Vec<Vec<(f64, Vec<f64>)>> = vec![Vec::new(); l];
        for pair in 0..self.topo.num_pairs() {
            if self.topo.overlap_clients[pair].is_empty() {
                continue;
            }
            let roc = self.topo.relay(pair);
            let roc_model = &trained[&roc];
            let (a, b) = (pair, pair + 1);
            let (to_a, vol_a) =
                agg::aggregate_relay(cell_aggs[b].1, &cell_aggs[b].0, self.n[roc], roc_model);
            incoming[a].push((vol_a, to_a));
            let (to_b, vol_b) =
                agg::aggregate_relay(cell_aggs[a].1, &cell_aggs[a].0, self.n[roc], roc_model);
            incoming[b].push((vol_b, to_b));
        }

        // Stage 5: edge update; a boundary cell simply has no incoming entry.
        for cell in 0..l {
            let mut items: Vec<(f64, &[f64])> = Vec::with_capacity(1 + incoming[cell].len());
            items.push((cell_aggs[cell].1, cell_aggs[cell].0.as_slice()));
            for (w, m) in &incoming[cell] {
                items.push((*w, m.as_slice()));
            }
            if items.iter().map(|(w, _)| w).sum::<f64>() > 0.0 {
                self.edge[cell] = agg::aggregate_edge(&items);
            }
        }

        // Event clock: stage-5 completion is the later of the cell's own
        // chain and the incoming relay arrivals.
        let mut times = channel::round_times(&self.topo, &self.gains, &self.taus, self.opts.epochs, &self.chan, &s_sets);
        let own_done: Vec<f64> = (0..l).map(|c| self.ready[c] + times[c].t_edge).collect();
        let mut next_ready = own_done.clone();
        for pair in 0..self.topo.num_pairs() {
            if self.topo.overlap_clients[pair].is_empty() {
                continue;
            }
            let roc = self.topo.relay(pair);
            let (a, b) = (pair, pair + 1);
            let into_a = own_done[b] + channel::relay_latency(b, a, roc, &self.gains, &self.chan);
            let into_b = own_done[a] + channel::relay_latency(a, b, roc, &self.gains, &self.chan);
            next_ready[a] = next_ready[a].max(into_a);
            next_ready[b] = next_ready[b].max(into_b);
        }

        let cloud_round = self.cfg.kappa.divides(round);
        if cloud_round {
            // Every client's latest local model reaches the cloud, grouped by
            // cell with each relay attached to a unique cell.
            let groups = fedoc_cloud_groups(&self.topo, &s_sets);
            let hats: Vec<(Vec<f64>, f64)> = groups
                .iter()
                .map(|g| {
                    let items: Vec<(f64, &[f64])> =
                        g.iter().map(|&k| (self.n[k], self.client_models[k].as_slice())).collect();
                    agg::aggregate_cell(&items)
                })
                .collect();
            let items: Vec<(f64, &[f64])> = hats.iter().map(|(w, v)| (*v, w.as_slice())).collect();
            let cloud = agg::aggregate_cloud(&items);
            self.edge = vec![cloud; l];
            let t_cloud = channel::cloud_latency(&times, &self.chan);
            let sync = next_ready.iter().cloned().fold(0.0, f64::max) + t_cloud;
            next_ready = vec![sync; l];
        } else {
            // Relay columns are only meaningful when the relay stage ran.
        }
        if !fastest {
            // Same stages, same clock; only stage-1 selection differed.
        }
        self.ready = next_ready;
        for t in &mut times {
            if self.topo.num_pairs() == 0 {
                t.t_relay = 0.0;
            }
        }
        self.finish_trace(round, times, selection, cloud_round)
    }

    /// One round of hierarchical FL: fixed membership, no relay stage.
    fn round_hfl(&mut self, round: usize) -> RoundTrace {
        let l = self.topo.num_servers;
        let mut selection = SelectionRecord::default();
        let mut init_cell: BTreeMap<ClientId, usize> = BTreeMap::new();
        let mut s_sets: Vec<Vec<ClientId>> = self.topo.local_clients.clone();
        for (cell, ids) in self.topo.local_clients.iter().enumerate() {
            for &k in ids {
                init_cell.insert(k, cell);
            }
        }
        for ids in self.topo.overlap_clients.iter() {
            for &k in ids {
                let home = self.fixed_home[&k];
                selection.choices.push((k, home));
                init_cell.insert(k, home);
                s_sets[home].push(k);
            }
        }
        for s in &mut s_sets {
            s.sort_unstable();
        }

        let inits: Vec<(ClientId, Vec<f64>)> = (0..self.topo.num_clients())
            .map(|k| (k, self.edge[init_cell[&k]].clone()))
            .collect();
        let trained = self.train_all(inits, round);
        for (&k, w) in &trained {
            self.client_models[k] = w.clone();
        }

        let cell_aggs = self.cell_aggregates(&s_sets, &trained);
        let mut volumes = vec![0.0; l];
        for (cell, (model, volume)) in cell_aggs.into_iter().enumerate() {
            if volume > 0.0 {
                self.edge[cell] = model;
            }
            volumes[cell] = volume;
        }

        let mut times = channel::round_times(&self.topo, &self.gains, &self.taus, self.opts.epochs, &self.chan, &s_sets);
        for t in &mut times {
            t.t_relay = 0.0;
        }
        let mut next_ready: Vec<f64> = (0..l).map(|c| self.ready[c] + times[c].t_edge).collect();

        let cloud_round = self.cfg.kappa.divides(round);
        if cloud_round {
            let items: Vec<(f64, &[f64])> = (0..l)
                .filter(|&c| volumes[c] > 0.0)
                .map(|c| (volumes[c], self.edge[c].as_slice()))
                .collect();
            let cloud = agg::aggregate_cloud(&items);
            self.edge = vec![cloud; l];
            let t_cloud = channel::cloud_latency(&times, &self.chan);
            let sync = next_ready.iter().cloned().fold(0.0, f64::max) + t_cloud;
            next_ready = vec![sync; l];
        }
        self.ready = next_ready;
        self.finish_trace(round, times, selection, cloud_round)
    }

    /// FedMES round; with `cache_merge` it becomes FL-EOCD.
    fn round_fedmes(&mut self, round: usize, cache_merge: bool) -> RoundTrace {
        let l = self.topo.num_servers;
        let avail: Vec<f64> = (0..l).map(|c| self.ready[c] + self.cast_cache[c]).collect();

        // Initialization: OCs wait for every covering broadcast and start from
        // the data-weighted average of the received edge models.
        let mut arrival: Vec<f64> = vec![0.0; self.topo.num_clients()];
        let mut inits: Vec<(ClientId, Vec<f64>)> = Vec::with_capacity(self.topo.num_clients());
        for k in 0..self.topo.num_clients() {
            match self.topo.role_of(k).expect("valid topology") {
                ClientRole::Local { cell } => {
                    arrival[k] = avail[cell];
                    inits.push((k, self.edge[cell].clone()));
                }
                ClientRole::Noc { pair } | ClientRole::Roc { pair } => {
                    let (a, b) = (pair, pair + 1);
                    arrival[k] = avail[a].max(avail[b]);
                    let w = agg::weighted_mean(&[
                        (self.mes_sizes[a], self.edge[a].as_slice()),
                        (self.mes_sizes[b], self.edge[b].as_slice()),
                    ]);
                    inits.push((k, w));
                }
            }
        }
        let trained = self.train_all(inits, round);
        for (&k, w) in &trained {
            self.client_models[k] = w.clone();
        }

        // Uploads: plain trained models, or cache-merged for FL-EOCD. Cached
        // edge models carry one-round staleness by construction.
        let mut uploads: BTreeMap<ClientId, Vec<f64>> = BTreeMap::new();
        for k in 0..self.topo.num_clients() {
            let w = &trained[&k];
            let merged = if cache_merge {
                match self.cache.get(&k) {
                    Some(entries) if !entries.is_empty() => {
                        let mut items: Vec<(f64, &[f64])> = vec![(self.n[k], w.as_slice())];
                        for (cell, model) in entries {
                            items.push((self.mes_sizes[*cell], model.as_slice()));
                        }
                        agg::weighted_mean(&items)
                    }
                    _ => w.clone(),
                }
            } else {
                w.clone()
            };
            uploads.insert(k, merged);
        }
        if cache_merge {
            // Cache the edge models received this round for the next one.
            for (pair, ids) in self.topo.overlap_clients.iter().enumerate() {
                for &k in ids {
                    self.cache.insert(
                        k,
                        vec![(pair, self.edge[pair].clone()), (pair + 1, self.edge[pair + 1].clone())],
                    );
                }
            }
        }

        // Each ES aggregates over every covered client (OCs counted by every
        // covering ES; the double counting is inherent to the baseline).
        let cell_aggs = self.cell_aggregates(&self.mes_members.clone(), &uploads);
        for (cell, (model, volume)) in cell_aggs.into_iter().enumerate() {
            if volume > 0.0 {
                self.edge[cell] = model;
            }
        }

        // Event clock with per-client start times (OC waits are real waits).
        let mut stage_done = vec![0.0f64; l];
        for cell in 0..l {
            let members = &self.mes_members[cell];
            let slowest = members
                .iter()
                .map(|&k| arrival[k] + self.opts.epochs as f64 * self.taus[k])
                .fold(0.0, f64::max);
            stage_done[cell] =
                slowest + channel::upload_latency(cell, members, &self.gains, &self.chan);
        }
        let mut times = channel::round_times(
            &self.topo,
            &self.gains,
            &self.taus,
            self.opts.epochs,
            &self.chan,
            &self.mes_members.clone(),
        );
        for t in &mut times {
            t.t_relay = 0.0;
        }
        let mut next_ready = stage_done;

        let cloud_round = self.cfg.kappa.divides(round);
        if cloud_round {
            let items: Vec<(f64, &[f64])> = (0..l)
                .map(|c| (self.mes_sizes[c], self.edge[c].as_slice()))
                .collect();
            let cloud = agg::aggregate_cloud(&items);
            self.edge = vec![cloud; l];
            let t_cloud = channel::cloud_latency(&times, &self.chan);
            let sync = next_ready.iter().cloned().fold(0.0, f64::max) + t_cloud;
            next_ready = vec![sync; l];
        }
        self.ready = next_ready;
        self.finish_trace(round, times, SelectionRecord::default(), cloud_round)
    }

    fn finish_trace(
        &self,
        round: usize,
        times: Vec<EsRoundTimes>,
        selection: SelectionRecord,
        cloud_round: bool,
    ) -> RoundTrace {
        let checksums = self.edge.iter().map(|w| model_checksum(w)).collect();
        RoundTrace {
            round,
            per_es: times,
            per_es_ready: self.ready.clone(),
            selection,
            checksums,
            metrics: None,
            sim_time_s: self.ready.iter().cloned().fold(0.0, f64::max),
            cloud_round,
        }
    }

    /// Run all configured rounds; evaluates every `eval_interval` rounds.
    pub fn run(&mut self) -> Result<RunResult> {
        let rounds = self.cfg.training.rounds;
        let algo = self.cfg.algorithm;
        let initial = ModelParams { arch: self.arch, w: self.edge.first().cloned().unwrap_or_default() };
        let mut traces: Vec<RoundTrace> = Vec::with_capacity(rounds);
        let mut trajectory: Option<Vec<Vec<Vec<f64>>>> =
            self.cfg.run.record_trajectories.then(Vec::new);
        let mut snapshots = Vec::new();
        let mut time_to_target = None;
        let mut last_cloud: Option<Vec<f64>> = None;

        for r in 1..=rounds {
            self.resample_round(r);
            let mut trace = match algo {
                AlgorithmKind::FedocFastest => self.round_fedoc(r, true),
                AlgorithmKind::FedocFixed => self.round_fedoc(r, false),
                AlgorithmKind::Hfl => self.round_hfl(r),
                AlgorithmKind::Fedmes => self.round_fedmes(r, false),
                AlgorithmKind::FlEocd => self.round_fedmes(r, true),
            };
            if trace.cloud_round {
                last_cloud = Some(self.edge[0].clone());
            }
            if let Some(t) = trajectory.as_mut() {
                t.push(self.edge.clone());
            }
            if self.cfg.run.checkpoint_interval > 0 && r % self.cfg.run.checkpoint_interval == 0 {
                snapshots.push((r, self.edge.clone()));
            }
            let eval_due = r % self.cfg.run.eval_interval == 0 || r == rounds;
            if eval_due {
                let metrics = self.evaluate_edges();
                let hit = metrics.accuracy >= self.cfg.training.target_accuracy;
                trace.metrics = Some(metrics);
                if hit && time_to_target.is_none() {
                    time_to_target = Some(trace.sim_time_s);
                }
                traces.push(trace);
                if hit && self.cfg.run.stop_at_target {
                    break;
                }
            } else {
                traces.push(trace);
            }
        }

        Ok(RunResult {
            algorithm: algo,
            topology: self.topo.clone(),
            traces,
            final_edge_models: self
                .edge
                .iter()
                .map(|w| ModelParams { arch: self.arch, w: w.clone() })
                .collect(),
            final_cloud_model: last_cloud.map(|w| ModelParams { arch: self.arch, w }),
            initial_model: initial,
            time_to_target,
            edge_trajectory: trajectory,
            snapshots,
        })
    }
}

/// Cloud grouping for the relay protocol: the round's upload sets plus each
/// relay attached to a unique cell (first pair to its left cell, later pairs
/// to their right cell) so the groups partition all clients.
pub fn fedoc_cloud_groups(topo: &Topology, s_sets: &[Vec<ClientId>]) -> Vec<Vec<ClientId>> {
    let mut groups = s_sets.to_vec();
    for pair in 0..topo.num_pairs() {
        if topo.overlap_clients[pair].is_empty() {
            continue;
        }
        let cell = if pair == 0 { 0 } else { pair + 1 };
        groups[cell].push(topo.relay(pair));
        groups[cell].sort_unstable();
    }
    groups
}

/// Run one experiment end to end from a validated config.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    Engine::new(cfg.clone())?.run()
}

// ---------------------------------------------------------------------------
// Marker propagation (tag mode)
// ---------------------------------------------------------------------------

pub type TagSet = std::collections::BTreeSet<usize>;

/// Run the relay dataflow with models replaced by provenance tag sets and
/// every aggregation replaced by set union; no cloud aggregation.
///
/// Returns the per-ES tag sets after each round. Selection choices cannot
/// affect the result (an uploader's tags always come from a broadcast the
/// receiving ES already incorporates), so OCs deterministically take the
/// lower cell.
pub fn marker_propagation(topo: &Topology, rounds: usize) -> Vec<Vec<TagSet>> {
    let l = topo.num_servers;
    let mut edge: Vec<TagSet> = (0..l).map(|c| TagSet::from([c])).collect();
    let mut out = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        // Stages 1-3: every uploader initializes from its selected broadcast,
        // so a cell aggregate's tags equal the cell's own broadcast tags.
        let stage3: Vec<TagSet> = edge.clone();
        // Stages 4-5: relays union the neighbor aggregate with the ROC tags.
        let mut next = edge.clone();
        for pair in 0..topo.num_pairs() {
            if topo.overlap_clients[pair].is_empty() {
                continue;
            }
            let roc_tags = edge[pair].clone(); // ROC initialized from the lower cell
            let (a, b) = (pair, pair + 1);
            let mut to_a = stage3[b].clone();
            to_a.extend(roc_tags.iter().copied());
            let mut to_b = stage3[a].clone();
            to_b.extend(roc_tags.iter().copied());
            next[a].extend(to_a);
            next[b].extend(to_b);
        }
        edge = next;
        out.push(edge.clone());
    }
    out
}

/// First round (1-based) after which ES 1's tag set covers every ES;
/// 0 when the chain is trivially complete before any round.
pub fn marker_completion_round(topo: &Topology, max_rounds: usize) -> Option<usize> {
    let l = topo.num_servers;
    if l == 1 {
        return Some(0);
    }
    let history = marker_propagation(topo, max_rounds);
    history.iter().position(|sets| sets[0].len() == l).map(|i| i + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ExperimentConfig, Kappa};
    use rand::Rng;

    fn desk_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.topology.num_servers = 3;
        cfg.topology.num_clients = 12;
        cfg.topology.overlap_sizes = vec![2, 2];
        cfg.dataset.classes = 4;
        cfg.dataset.dims = 6;
        cfg.dataset.per_class = 60;
        cfg.dataset.test_per_class = 20;
        cfg.partition.classes_per_client = 2;
        cfg.partition.classes_per_cell = 3;
        cfg.training.rounds = 4;
        cfg.training.local_epochs = 2;
        cfg.training.batch_size = 10;
        cfg.run.eval_interval = 2;
        cfg
    }

    #[test]
    fn weighted_mean_matches_hand_example() {
        // Two uploaders with volumes (1, 3) and scalar models (0, 4).
        let (m, total) = agg::aggregate_cell(&[(1.0, &[0.0][..]), (3.0, &[4.0][..])]);
        assert_eq!(m, vec![3.0]);
        assert_eq!(total, 4.0);
    }

    #[test]
    fn aggregations_are_exactly_idempotent() {
        let w = [0.1, -2.7, 3.3];
        let items: Vec<(f64, &[f64])> = vec![(1.0, &w), (3.0, &w), (0.5, &w)];
        assert_eq!(agg::weighted_mean(&items), w.to_vec());
        let (relay, vol) = agg::aggregate_relay(4.0, &w, 2.0, &w);
        assert_eq!(relay, w.to_vec());
        assert_eq!(vol, 6.0);
        assert_eq!(agg::aggregate_edge(&items), w.to_vec());
        assert_eq!(agg::aggregate_cloud(&items), w.to_vec());
    }

    #[test]
    fn middle_cell_mixes_all_three_cells() {
        // Equal data volumes, distinct cell models (a, b, c); ROC models equal
        // their home cell's model. The middle cell's round-end model must put
        // positive weight on all of a, b, c.
        let (a, b, c) = (1.0, 5.0, 9.0);
        let n = 10.0;
        let roc_n = 1.0;
        let (to_mid_from_left, v_left) = agg::aggregate_relay(n, &[a], roc_n, &[a]);
        let (to_mid_from_right, v_right) = agg::aggregate_relay(n, &[c], roc_n, &[c]);
        let out = agg::aggregate_edge(&[
            (n, &[b][..]),
            (v_left, to_mid_from_left.as_slice()),
            (v_right, to_mid_from_right.as_slice()),
        ]);
        // Convex combination strictly inside (a, c), off b.
        assert!(out[0] > a && out[0] < c);
        assert!((out[0] - b).abs() > 1e-12);
        // Coefficients recovered: weight on b is n / (n + v_left + v_right).
        let expect = (n * b + v_left * a + v_right * c) / (n + v_left + v_right);
        assert!((out[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn scalar_mass_channel_is_conserved() {
        let mut rs = rng::stream(4, "mass", &[]);
        for _ in 0..50 {
            let k = 2 + rs.gen_range(0..5);
            let weights: Vec<f64> = (0..k).map(|_| 0.1 + 10.0 * rs.gen::<f64>()).collect();
            let ones = vec![[1.0]; k];
            let items: Vec<(f64, &[f64])> =
                weights.iter().zip(&ones).map(|(&w, m)| (w, &m[..])).collect();
            assert_eq!(agg::weighted_mean(&items), vec![1.0]);
        }
    }

    #[test]
    fn zero_rounds_is_a_noop() {
        let mut cfg = desk_cfg();
        cfg.training.rounds = 0;
        let result = run_experiment(&cfg).unwrap();
        assert!(result.traces.is_empty());
        assert_eq!(result.final_edge_models[0].w, result.initial_model.w);
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = desk_cfg();
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        for (ta, tb) in a.traces.iter().zip(&b.traces) {
            assert_eq!(ta.checksums, tb.checksums);
            assert_eq!(ta.sim_time_s, tb.sim_time_s);
        }
        assert_eq!(
            a.final_edge_models[0].w, b.final_edge_models[0].w,
            "final models must match bit for bit"
        );
    }

    #[test]
    fn selection_constraint_holds_every_round() {
        for algo in [AlgorithmKind::FedocFastest, AlgorithmKind::FedocFixed, AlgorithmKind::Hfl] {
            let mut cfg = desk_cfg();
            cfg.algorithm = algo;
            let result = run_experiment(&cfg).unwrap();
            let topo = &result.topology;
            let ocs: Vec<ClientId> = topo.overlap_clients.iter().flatten().copied().collect();
            for trace in &result.traces {
                assert_eq!(trace.selection.choices.len(), ocs.len());
                for &(k, cell) in &trace.selection.choices {
                    // Exactly one covering ES selected per OC per round.
                    assert!(topo.covering_cells(k).contains(&cell));
                }
                let mut seen: Vec<ClientId> =
                    trace.selection.choices.iter().map(|&(k, _)| k).collect();
                seen.sort_unstable();
                let mut expect = ocs.clone();
                expect.sort_unstable();
                assert_eq!(seen, expect);
            }
        }
    }

    #[test]
    fn event_clock_is_strictly_monotone() {
        for algo in AlgorithmKind::ALL {
            let mut cfg = desk_cfg();
            cfg.algorithm = algo;
            cfg.kappa = Kappa::Every(2);
            let result = run_experiment(&cfg).unwrap();
            let mut prev = vec![0.0; 3];
            for trace in &result.traces {
                for (cell, (&now, &before)) in trace.per_es_ready.iter().zip(&prev).enumerate() {
                    assert!(now > before, "{algo} round {} ES {cell}: {now} <= {before}", trace.round);
                }
                prev = trace.per_es_ready.clone();
            }
        }
    }

    #[test]
    fn hfl_kappa_one_synchronizes_every_round() {
        let mut cfg = desk_cfg();
        cfg.algorithm = AlgorithmKind::Hfl;
        cfg.kappa = Kappa::Every(1);
        let result = run_experiment(&cfg).unwrap();
        for trace in &result.traces {
            assert!(trace.cloud_round);
            assert!(trace.checksums.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn hfl_cloud_free_leaves_cells_apart() {
        let mut cfg = desk_cfg();
        cfg.algorithm = AlgorithmKind::Hfl;
        cfg.kappa = Kappa::Inf; // kappa > R: no cloud step executes
        let result = run_experiment(&cfg).unwrap();
        assert!(result.traces.iter().all(|t| !t.cloud_round));
        let last = result.traces.last().unwrap();
        assert!(last.checksums.windows(2).any(|w| w[0] != w[1]),
            "non-IID cells should diverge without cloud sync");
        assert!(result.final_cloud_model.is_none());
    }

    #[test]
    fn fedmes_and_fleocd_coincide_on_the_first_round() {
        // Empty cache: FL-EOCD uploads equal the plain trained models.
        let mut a = desk_cfg();
        a.algorithm = AlgorithmKind::Fedmes;
        a.training.rounds = 1;
        let mut b = a.clone();
        b.algorithm = AlgorithmKind::FlEocd;
        let ra = run_experiment(&a).unwrap();
        let rb = run_experiment(&b).unwrap();
        assert_eq!(ra.traces[0].checksums, rb.traces[0].checksums);
    }

    #[test]
    fn fleocd_diverges_from_fedmes_after_caching() {
        let mut a = desk_cfg();
        a.algorithm = AlgorithmKind::Fedmes;
        let mut b = a.clone();
        b.algorithm = AlgorithmKind::FlEocd;
        let ra = run_experiment(&a).unwrap();
        let rb = run_experiment(&b).unwrap();
        assert_ne!(ra.traces.last().unwrap().checksums, rb.traces.last().unwrap().checksums);
    }

    #[test]
    fn fedmes_ocs_wait_for_both_broadcasts() {
        // The FedMES clock cannot run ahead of the slower covering cell.
        let mut cfg = desk_cfg();
        cfg.algorithm = AlgorithmKind::Fedmes;
        cfg.training.rounds = 3;
        let result = run_experiment(&cfg).unwrap();
        for trace in &result.traces {
            for t in &trace.per_es {
                assert!(t.t_relay == 0.0);
            }
        }
    }

    #[test]
    fn record_trajectories_snapshots_every_round() {
        let mut cfg = desk_cfg();
        cfg.run.record_trajectories = true;
        cfg.run.checkpoint_interval = 2;
        let result = run_experiment(&cfg).unwrap();
        let traj = result.edge_trajectory.as_ref().unwrap();
        assert_eq!(traj.len(), 4);
        assert_eq!(result.snapshots.len(), 2);
    }

    #[test]
    fn marker_propagation_matches_chain_distance() {
        // L = 3: ES 1 holds {0,1} after round 1 and {0,1,2} after round 2.
        let mut cfg = desk_cfg();
        cfg.topology.num_clients = 13;
        cfg.topology.overlap_sizes = vec![1, 1];
        cfg.topology.balance = false;
        let topo = build_topology(&cfg, 2).unwrap();
        let history = marker_propagation(&topo, 3);
        assert_eq!(history[0][0], TagSet::from([0, 1]));
        assert_eq!(history[1][0], TagSet::from([0, 1, 2]));
        assert_eq!(marker_completion_round(&topo, 8), Some(2));
    }

    #[test]
    fn marker_single_cell_is_complete_at_round_zero() {
        let mut cfg = desk_cfg();
        cfg.topology.num_servers = 1;
        cfg.topology.num_clients = 5;
        cfg.topology.overlap_sizes = vec![];
        let topo = build_topology(&cfg, 2).unwrap();
        assert_eq!(marker_completion_round(&topo, 4), Some(0));
    }

    #[test]
    fn stop_at_target_halts_early() {
        let mut cfg = desk_cfg();
        cfg.dataset.spread = 0.1; // easy blobs
        cfg.partition.classes_per_client = 4;
        cfg.partition.classes_per_cell = 4;
        cfg.training.rounds = 30;
        cfg.training.schedule.eta0 = 0.5;
        cfg.training.target_accuracy = 0.8;
        cfg.run.eval_interval = 1;
        cfg.run.stop_at_target = true;
        cfg.kappa = Kappa::Every(1);
        let result = run_experiment(&cfg).unwrap();
        assert!(result.time_to_target.is_some());
        assert!(result.traces.len() < 30, "should stop before the round cap");
    }
}
