//! Data-parallel training: sharding, transports, collectives and the epoch loop.

pub mod collective;
pub mod engine;
pub mod shard;
pub mod transport;

pub use collective::{WorkerGroup, DEFAULT_TIMEOUT};
pub use engine::{
    evaluate, replica_checksum, run_worker, sample_pool, sync_batchnorm, train_inproc, BnMode,
    EngineConfig, EpochObserver, EpochSummary, Evaluation, MinibatchRecord, RunOptions, RunOutcome,
    Worker,
};
pub use shard::ShardPlan;
pub use transport::{inproc_group, InProcTransport, Tag, TcpTransport, Transport};
