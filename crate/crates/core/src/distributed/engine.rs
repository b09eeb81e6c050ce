//! The data-parallel epoch loop.
//!
//! Each worker owns a model replica, an optimizer and a slice of every
//! mini-batch. Per mini-batch it runs forward and backward on its slice, then
//! reduces the gradient and loss partials in one fused collective and applies
//! the same optimizer step as every other rank.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode, Tensor};
use crate::bench::TimingBreakdown;
use crate::distributed::collective::WorkerGroup;
use crate::distributed::shard::ShardPlan;
use crate::distributed::transport::{inproc_group, Tag};
use crate::error::{Error, Result};
use crate::exact::{ExactSum, ExactVec};
use crate::model::Generator;
use crate::optim::{Optimizer, OptimizerConfig};
use crate::pde_loss::{initial_condition, loss_nodes, LossConfig, PhysicalDomain};
use crate::scalar::Scalar;

/// Where train-mode batch-norm statistics come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    /// Statistics over the global mini-batch, reduced across workers.
    #[default]
    Sync,
    /// Statistics over each worker's local slice only.
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub batchnorm: BnMode,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

/// `count` values of `c` drawn uniformly from `[lo, hi]`, sorted ascending.
pub fn sample_pool(lo: f64, hi: f64, count: usize, seed: u64) -> Result<Vec<f64>> {
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(Error::Config(format!("invalid sample range [{lo}, {hi}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // separate stream from weight initialization, which uses stream 0
    rng.set_stream(1);
    let mut v: Vec<f64> = (0..count)
        .map(|_| if lo == hi { lo } else { rng.random_range(lo..=hi) })
        .collect();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// One logged mini-batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinibatchRecord {
    /// Seconds since the worker started, plus any resume offset.
    pub wall_time_sec: f64,
    pub epoch: usize,
    pub minibatch: usize,
    /// Loss of the global mini-batch before the update.
    pub loss: f64,
    pub physics: f64,
    pub boundary: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub minibatches: Vec<MinibatchRecord>,
    /// Mean of the mini-batch losses.
    pub mean_loss: f64,
    /// Timers of the rank with the largest compute time; wall time is the
    /// maximum over ranks.
    pub timing: TimingBreakdown,
    /// Hash of parameters and batch-norm statistics, equal on every rank.
    pub checksum: u64,
    pub lbfgs_fallbacks: usize,
}

/// Gradient and loss of the global mini-batch.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub physics: f64,
    pub boundary: f64,
    pub grad: Vec<f64>,
}

/// Forward and backward over the local slice followed by the fused reduction.
pub fn evaluate<S: Scalar>(
    model: &mut Generator<S>,
    group: &mut WorkerGroup,
    ic: &Tensor<S>,
    global: usize,
    cfg: &EngineConfig,
    domain: &PhysicalDomain,
) -> Result<Evaluation> {
    let mut g = Graph::new();
    let ic_node = g.input(ic.clone());
    let sync = cfg.batchnorm == BnMode::Sync;
    let fp = model.build(&mut g, ic_node, Mode::Train, sync, group)?;
    let nodes = loss_nodes(&mut g, fp.output, ic_node, &cfg.loss, domain, global)?;
    g.backward(nodes.total, group)?;

    let mut fused = g.param_grads();
    let nparam = fused.len();
    let partial = g
        .batch_partial(nodes.total)
        .ok_or_else(|| Error::InvalidArgument("loss root is not a batch mean".into()))?;
    fused.extend(&ExactVec::from(partial));
    for id in [nodes.physics, nodes.boundary] {
        let s: ExactSum = g.value(id).data().iter().map(|v| v.as_f64()).collect();
        fused.extend(&ExactVec::from(&s));
    }
    group.allreduce_exact(&mut fused, Tag::Gradient)?;

    let mut vals = fused.values();
    let tail = vals.split_off(nparam);
    let scale = global as f64;
    let out = Evaluation {
        loss: tail[0] / scale,
        physics: tail[1] / scale,
        boundary: tail[2] / scale,
        grad: vals,
    };
    if !out.loss.is_finite() {
        return Err(Error::NonFinite(format!("reduced loss = {}", out.loss)));
    }
    Ok(out)
}

/// Replaces every replica's running statistics by their mean over ranks.
pub fn sync_batchnorm<S: Scalar>(group: &mut WorkerGroup, model: &mut Generator<S>) -> Result<()> {
    let stats = model.bn_stats();
    let mut layout = vec![stats.len() as u64];
    layout.extend(stats.iter().map(|(m, _)| m.len() as u64));
    let all = group.allgather_unmeasured(&layout)?;
    if let Some(r) = all.iter().position(|l| *l != layout) {
        return Err(Error::InvalidArgument(format!(
            "batch-norm layout of rank {r} ({} layers) differs from rank {} ({} layers)",
            all[r].first().copied().unwrap_or(0),
            group.rank(),
            stats.len()
        )));
    }
    let flat: Vec<f64> = stats
        .iter()
        .flat_map(|(m, v)| m.iter().chain(v).copied())
        .collect();
    let mut acc = ExactVec::from_values(&flat);
    group.allreduce_exact(&mut acc, Tag::BnStats)?;
    let mean = acc.means(group.size());
    let mut off = 0;
    let synced: Vec<(Vec<f64>, Vec<f64>)> = stats
        .iter()
        .map(|(m, _)| {
            let c = m.len();
            let out = (mean[off..off + c].to_vec(), mean[off + c..off + 2 * c].to_vec());
            off += 2 * c;
            out
        })
        .collect();
    model.set_bn_stats(&synced)
}

/// FNV-1a over parameter and running-statistic bits.
pub fn replica_checksum<S: Scalar>(model: &Generator<S>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |v: f64| {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    model.flatten().into_iter().for_each(&mut eat);
    for (m, v) in model.bn_stats() {
        m.into_iter().chain(v).for_each(&mut eat);
    }
    h
}

/// One rank of a training run.
pub struct Worker<S: Scalar> {
    pub group: WorkerGroup,
    pub model: Generator<S>,
    pub optimizer: Optimizer,
    params: Vec<f64>,
    plan: ShardPlan,
    samples: Arc<Vec<f64>>,
    config: EngineConfig,
    domain: PhysicalDomain,
    started: Instant,
    time_offset: f64,
}

impl<S: Scalar> Worker<S> {
    pub fn new(
        group: WorkerGroup,
        model: Generator<S>,
        plan: ShardPlan,
        samples: Arc<Vec<f64>>,
        config: EngineConfig,
    ) -> Result<Self> {
        config.loss.validate()?;
        config.optimizer.validate()?;
        if plan.workers != group.size() {
            return Err(Error::Config(format!(
                "shard plan is for {} workers but the group has {}",
                plan.workers,
                group.size()
            )));
        }
        if samples.len() != plan.samples {
            return Err(Error::Config(format!(
                "sample pool holds {} values, plan expects {}",
                samples.len(),
                plan.samples
            )));
        }
        let params = model.flatten();
        let optimizer = Optimizer::new(&config.optimizer, params.len())?;
        let domain = PhysicalDomain::new(model.config().resolution)?;
        Ok(Self {
            group,
            model,
            optimizer,
            params,
            plan,
            samples,
            config,
            domain,
            started: Instant::now(),
            time_offset: 0.0,
        })
    }

    /// Seconds added to every logged wall time (for resumed runs).
    pub fn set_time_offset(&mut self, seconds: f64) {
        self.time_offset = seconds;
    }

    /// Master (f64) parameters; the model holds them rounded to `S`.
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        self.model.unflatten(&params)?;
        self.params = params;
        Ok(())
    }

    fn local_ic(&self, mb: usize) -> Result<(Tensor<S>, usize)> {
        let range = self.plan.shard(mb, self.group.rank())?;
        let n = self.domain.n;
        let cs = &self.samples[range];
        let flat: Vec<f64> = cs.iter().flat_map(|&c| initial_condition(c, n)).collect();
        Ok((Tensor::from_f64(&[cs.len(), n], &flat)?, self.plan.batch_size(mb)?))
    }

    /// Runs mini-batch `mb` of `epoch` and returns its pre-update record.
    pub fn step(&mut self, epoch: usize, mb: usize) -> Result<(MinibatchRecord, bool)> {
        let (ic, global) = self.local_ic(mb)?;
        let Worker {
            group,
            model,
            optimizer,
            params,
            config,
            domain,
            ..
        } = self;
        let first = evaluate(model, group, &ic, global, config, domain)?;
        let mut fallback = false;
        match optimizer {
            Optimizer::Sgd(sgd) => sgd.step(params, &first.grad)?,
            Optimizer::Lbfgs(lbfgs) => {
                // only the evaluation at the current point advances running statistics
                let stats = model.bn_stats();
                let report = lbfgs.step_from(params, first.loss, &first.grad, |x| {
                    model.unflatten(x)?;
                    let e = evaluate(model, group, &ic, global, config, domain)?;
                    Ok((e.loss, e.grad))
                })?;
                fallback = report.fallback;
                model.set_bn_stats(&stats)?;
            }
        }
        model.unflatten(params)?;
        let record = MinibatchRecord {
            wall_time_sec: self.time_offset + self.started.elapsed().as_secs_f64(),
            epoch,
            minibatch: mb,
            loss: first.loss,
            physics: first.physics,
            boundary: first.boundary,
        };
        Ok((record, fallback))
    }

    /// All mini-batches of one epoch, then batch-norm synchronization and a
    /// cross-rank replica check.
    pub fn train_epoch(&mut self, epoch: usize) -> Result<EpochSummary> {
        self.group.reset_comm_time();
        let start = Instant::now();
        let mut records = Vec::with_capacity(self.plan.minibatches);
        let mut fallbacks = 0;
        for mb in 0..self.plan.minibatches {
            let (r, fb) = self.step(epoch, mb)?;
            fallbacks += fb as usize;
            records.push(r);
        }
        sync_batchnorm(&mut self.group, &mut self.model)?;
        let wall = start.elapsed();
        let comm = self.group.comm_time();
        let compute = wall.saturating_sub(comm);

        let checksum = replica_checksum(&self.model);
        let mine = [
            checksum,
            compute.as_secs_f64().to_bits(),
            comm.as_secs_f64().to_bits(),
            wall.as_secs_f64().to_bits(),
        ];
        let all = self.group.allgather_unmeasured(&mine)?;
        if let Some(r) = all.iter().position(|w| w[0] != all[0][0]) {
            return Err(Error::ReplicaDivergence(format!(
                "epoch {epoch}: checksum of rank {r} is {:#018x}, rank 0 has {:#018x}",
                all[r][0], all[0][0]
            )));
        }
        let secs = |w: u64| f64::from_bits(w);
        let slowest = all
            .iter()
            .max_by(|a, b| secs(a[1]).total_cmp(&secs(b[1])))
            .expect("at least one rank");
        let wall_max = all.iter().map(|w| secs(w[3])).fold(0.0, f64::max);
        let timing = TimingBreakdown {
            p: self.group.size(),
            epoch,
            resolution: self.domain.n,
            batch: self.plan.batch,
            compute_sec: secs(slowest[1]),
            comm_sec: secs(slowest[2]),
            wall_sec: wall_max,
        };
        let mean_loss = records.iter().map(|r| r.loss).sum::<f64>() / records.len() as f64;
        Ok(EpochSummary {
            epoch,
            minibatches: records,
            mean_loss,
            timing,
            checksum,
            lbfgs_fallbacks: fallbacks,
        })
    }

    /// Agrees on whether to continue: every rank learns whether any rank
    /// (typically rank 0 after writing logs) reported failure.
    pub fn agree(&mut self, ok: bool) -> Result<bool> {
        let all = self.group.allgather_unmeasured(&[ok as u64])?;
        Ok(all.iter().all(|w| w.first() == Some(&1)))
    }
}

/// What an in-process run hands back from rank 0.
pub struct RunOutcome<S: Scalar> {
    pub model: Generator<S>,
    pub optimizer: Optimizer,
    pub params: Vec<f64>,
    pub epochs: Vec<EpochSummary>,
}

/// Options for [`train_inproc`].
pub struct RunOptions {
    pub workers: usize,
    /// First epoch number (1-based); later than 1 when resuming.
    pub first_epoch: usize,
    pub epochs: usize,
    pub timeout: Duration,
    pub time_offset: f64,
    /// Record compute and communication timers.
    pub instrument: bool,
    /// Optimizer state to resume from, as written by [`Optimizer::state_words`].
    pub optimizer_state: Option<Vec<u64>>,
    /// Master parameters to resume from.
    pub params: Option<Vec<f64>>,
}

impl RunOptions {
    pub fn new(workers: usize, epochs: usize) -> Self {
        Self {
            workers,
            first_epoch: 1,
            epochs,
            timeout: crate::distributed::collective::DEFAULT_TIMEOUT,
            time_offset: 0.0,
            instrument: true,
            optimizer_state: None,
            params: None,
        }
    }
}

/// Callback run on rank 0 after every epoch; an error stops all ranks.
pub type EpochObserver<'a, S> =
    dyn FnMut(&EpochSummary, &Generator<S>, &Optimizer, &[f64]) -> Result<()> + Send + 'a;

/// Runs the epoch loop for one rank until `epochs` epochs are done or the
/// observer fails.
pub fn run_worker<S: Scalar>(
    worker: &mut Worker<S>,
    opts: &RunOptions,
    mut observer: Option<&mut EpochObserver<'_, S>>,
) -> Result<Vec<EpochSummary>> {
    if let Some(words) = &opts.optimizer_state {
        worker.optimizer.restore(words)?;
    }
    if let Some(params) = &opts.params {
        worker.set_params(params.clone())?;
    }
    worker.set_time_offset(opts.time_offset);
    worker.group.set_instrumented(opts.instrument);
    let mut out = Vec::with_capacity(opts.epochs);
    for e in opts.first_epoch..opts.first_epoch + opts.epochs {
        let summary = worker.train_epoch(e)?;
        let mut failure = None;
        if let Some(obs) = observer.as_deref_mut() {
            if let Err(err) = obs(&summary, &worker.model, &worker.optimizer, &worker.params) {
                failure = Some(err);
            }
        }
        let go_on = worker.agree(failure.is_none())?;
        if let Some(err) = failure {
            return Err(err);
        }
        if !go_on {
            return Err(Error::Transport {
                rank: worker.group.rank(),
                detail: "rank 0 aborted the run".into(),
            });
        }
        out.push(summary);
    }
    Ok(out)
}

/// Trains with `opts.workers` threads connected by in-process channels.
/// Every replica starts from a copy of `model`.
pub fn train_inproc<S: Scalar>(
    model: Generator<S>,
    plan: ShardPlan,
    samples: Arc<Vec<f64>>,
    config: EngineConfig,
    opts: &RunOptions,
    observer: Option<&mut EpochObserver<'_, S>>,
) -> Result<RunOutcome<S>> {
    if plan.workers != opts.workers {
        return Err(Error::Config(format!(
            "shard plan is for {} workers, run requests {}",
            plan.workers, opts.workers
        )));
    }
    let mut workers = Vec::with_capacity(opts.workers);
    for t in inproc_group(opts.workers) {
        let group = WorkerGroup::new(Box::new(t)).with_timeout(opts.timeout);
        workers.push(Worker::new(group, model.clone(), plan, samples.clone(), config)?);
    }
    let mut observer = observer;
    let results: Vec<Result<Vec<EpochSummary>>> = std::thread::scope(|s| {
        let handles: Vec<_> = workers
            .iter_mut()
            .map(|w| {
                let obs = if w.group.rank() == 0 { observer.take() } else { None };
                s.spawn(move || run_worker(w, opts, obs))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join().unwrap_or_else(|_| {
                    Err(Error::Numerical("worker thread panicked".into()))
                })
            })
            .collect()
    });
    let epochs = pick_result(results)?;
    let w0 = workers.swap_remove(0);
    Ok(RunOutcome {
        params: w0.params,
        model: w0.model,
        optimizer: w0.optimizer,
        epochs,
    })
}

/// Rank 0's result, or the most informative error: the lowest-rank error
/// that is not a consequence of another rank stopping.
pub(crate) fn pick_result<T>(results: Vec<Result<T>>) -> Result<T> {
    let mut first_ok = None;
    let mut primary = None;
    let mut secondary = None;
    for r in results {
        match r {
            Ok(v) => {
                if first_ok.is_none() {
                    first_ok = Some(v);
                }
            }
            Err(e @ (Error::Timeout { .. } | Error::Transport { .. })) => {
                secondary.get_or_insert(e);
            }
            Err(e) => {
                primary.get_or_insert(e);
            }
        }
    }
    match (primary, secondary, first_ok) {
        (Some(e), _, _) | (None, Some(e), _) => Err(e),
        (None, None, Some(v)) => Ok(v),
        (None, None, None) => Err(Error::InvalidArgument("no workers".into())),
    }
}
