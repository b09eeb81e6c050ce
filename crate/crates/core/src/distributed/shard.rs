//! Worker-count-independent partitioning of the sample pool.

use std::ops::Range;

use serde::Serialize;

use crate::error::{Error, Result};

/// Sample and batch counts adjusted so every mini-batch splits evenly over `p` workers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ShardPlan {
    pub requested_samples: usize,
    pub requested_batch: usize,
    pub workers: usize,
    /// `p * ceil(N_s / p)`
    pub samples: usize,
    /// `p * floor(b_s / p)`
    pub batch: usize,
    pub local_samples: usize,
    pub local_batch: usize,
    pub minibatches: usize,
}

impl ShardPlan {
    pub fn new(samples: usize, batch: usize, workers: usize) -> Result<Self> {
        if workers == 0 {
            return Err(Error::Config("worker count must be at least 1".into()));
        }
        if samples == 0 {
            return Err(Error::Config("sample count must be at least 1".into()));
        }
        if batch < workers {
            return Err(Error::Config(format!(
                "batch size {batch} is smaller than the worker count {workers}; \
                 every worker needs at least one sample per mini-batch"
            )));
        }
        let local_samples = samples.div_ceil(workers);
        let local_batch = batch / workers;
        let adj_samples = workers * local_samples;
        let adj_batch = workers * local_batch;
        Ok(Self {
            requested_samples: samples,
            requested_batch: batch,
            workers,
            samples: adj_samples,
            batch: adj_batch,
            local_samples,
            local_batch,
            minibatches: adj_samples.div_ceil(adj_batch),
        })
    }

    /// Size of the last mini-batch (`N_s' mod b_s'`, or a full batch).
    pub fn remainder(&self) -> usize {
        match self.samples % self.batch {
            0 => self.batch,
            r => r,
        }
    }

    /// Global size of mini-batch `mb`.
    pub fn batch_size(&self, mb: usize) -> Result<usize> {
        self.check_mb(mb)?;
        Ok(if mb + 1 == self.minibatches {
            self.remainder()
        } else {
            self.batch
        })
    }

    /// Indices of mini-batch `mb` in the sample pool.
    pub fn global_range(&self, mb: usize) -> Result<Range<usize>> {
        let start = mb * self.batch;
        Ok(start..start + self.batch_size(mb)?)
    }

    /// Contiguous slice of mini-batch `mb` owned by `rank`.
    pub fn shard(&self, mb: usize, rank: usize) -> Result<Range<usize>> {
        if rank >= self.workers {
            return Err(Error::InvalidArgument(format!(
                "rank {rank} out of range for {} workers",
                self.workers
            )));
        }
        let size = self.batch_size(mb)?;
        let local = size / self.workers;
        let start = mb * self.batch + rank * local;
        Ok(start..start + local)
    }

    fn check_mb(&self, mb: usize) -> Result<()> {
        if mb >= self.minibatches {
            return Err(Error::InvalidArgument(format!(
                "mini-batch {mb} out of range ({} per epoch)",
                self.minibatches
            )));
        }
        Ok(())
    }
}
