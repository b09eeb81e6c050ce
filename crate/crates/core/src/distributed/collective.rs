//! Blocking collectives over a [`Transport`].
//!
//! Reductions combine [`ExactVec`] accumulators along a binomial tree rooted
//! at rank 0 (children merged in ascending rank order) and broadcast the
//! result back down the same tree. Because the accumulators are exact, every
//! rank ends with the same bits, and those bits do not depend on `p`.

use std::time::{Duration, Instant};

use crate::autodiff::BatchReducer;
use crate::distributed::transport::{Tag, Transport};
use crate::error::{Error, Result};
use crate::exact::ExactVec;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

const STATUS_OK: u64 = 0;
const STATUS_MISMATCH: u64 = 1;

/// One rank's handle on the worker group.
pub struct WorkerGroup {
    transport: Box<dyn Transport>,
    timeout: Duration,
    comm: Duration,
    instrumented: bool,
}

impl WorkerGroup {
    pub fn new(transport: Box<dyn Transport>) -> Self {
        Self {
            transport,
            timeout: DEFAULT_TIMEOUT,
            comm: Duration::ZERO,
            instrumented: true,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn rank(&self) -> usize {
        self.transport.rank()
    }

    pub fn size(&self) -> usize {
        self.transport.size()
    }

    /// Turns communication timers on or off.
    pub fn set_instrumented(&mut self, on: bool) {
        self.instrumented = on;
    }

    pub fn instrumented(&self) -> bool {
        self.instrumented
    }

    /// Time spent blocked in measured collectives since the last reset.
    pub fn comm_time(&self) -> Duration {
        self.comm
    }

    pub fn reset_comm_time(&mut self) {
        self.comm = Duration::ZERO;
    }

    /// In-place exact sum over all ranks.
    pub fn allreduce_exact(&mut self, v: &mut ExactVec, tag: Tag) -> Result<()> {
        if !self.instrumented {
            return self.reduce_broadcast(v, tag);
        }
        let start = Instant::now();
        let out = self.reduce_broadcast(v, tag);
        self.comm += start.elapsed();
        out
    }

    /// Correctly rounded elementwise sum over all ranks.
    pub fn allreduce_sum(&mut self, local: &[f64]) -> Result<Vec<f64>> {
        let mut acc = ExactVec::from_values(local);
        self.allreduce_exact(&mut acc, Tag::Gradient)?;
        Ok(acc.values())
    }

    /// Correctly rounded elementwise mean over all ranks.
    pub fn allreduce_mean(&mut self, local: &[f64]) -> Result<Vec<f64>> {
        let mut acc = ExactVec::from_values(local);
        self.allreduce_exact(&mut acc, Tag::Gradient)?;
        Ok(acc.means(self.size()))
    }

    /// Every rank's words, in rank order. Not counted as communication time,
    /// so timers can be aggregated with it.
    pub fn allgather_unmeasured(&mut self, words: &[u64]) -> Result<Vec<Vec<u64>>> {
        let (rank, p) = (self.rank(), self.size());
        if rank != 0 {
            self.transport.send(0, Tag::Control, words)?;
            let flat = self.transport.recv(0, Tag::Control, self.timeout)?;
            return unpack(&flat, p).ok_or_else(|| Error::Transport {
                rank,
                detail: "malformed gather payload".into(),
            });
        }
        let mut all = vec![words.to_vec()];
        for peer in 1..p {
            all.push(self.transport.recv(peer, Tag::Control, self.timeout)?);
        }
        let flat = pack(&all);
        for peer in 1..p {
            self.transport.send(peer, Tag::Control, &flat)?;
        }
        Ok(all)
    }

    pub fn barrier(&mut self) -> Result<()> {
        let mut token = ExactVec::zeros(0);
        self.allreduce_exact(&mut token, Tag::Control)
    }

    fn reduce_broadcast(&mut self, v: &mut ExactVec, tag: Tag) -> Result<()> {
        let (rank, p) = (self.rank(), self.size());
        if p == 1 {
            return Ok(());
        }
        let own_len = v.len() as u64;
        // messages carry a status word, then the accumulator or a mismatch description
        let mut acc = Some(v.clone());
        let mut mismatch: Option<[u64; 4]> = None;

        let mut mask = 1;
        while mask < p {
            if rank & mask != 0 {
                let payload = match mismatch {
                    Some(m) => [&[STATUS_MISMATCH][..], &m].concat(),
                    None => {
                        let a = acc.as_ref().expect("accumulator");
                        [&[STATUS_OK][..], &a.to_words()].concat()
                    }
                };
                self.transport.send(rank - mask, tag, &payload)?;
                break;
            }
            let child = rank + mask;
            if child < p {
                let got = self.transport.recv(child, tag, self.timeout)?;
                match decode(&got, rank, child)? {
                    Decoded::Mismatch(m) => {
                        mismatch.get_or_insert(m);
                    }
                    Decoded::Values(theirs) => {
                        if mismatch.is_none() {
                            if theirs.len() as u64 != own_len {
                                mismatch = Some([rank as u64, own_len, child as u64, theirs.len() as u64]);
                            } else if let Some(a) = acc.as_mut() {
                                a.merge(&theirs);
                            }
                        }
                    }
                }
            }
            mask <<= 1;
        }

        // broadcast down the same tree
        let result = if rank == 0 {
            match mismatch {
                Some(m) => [&[STATUS_MISMATCH][..], &m].concat(),
                None => [&[STATUS_OK][..], &acc.as_ref().expect("accumulator").to_words()].concat(),
            }
        } else {
            let parent = rank - (rank & rank.wrapping_neg());
            self.transport.recv(parent, tag, self.timeout)?
        };
        let mut child_mask = if rank == 0 {
            p.next_power_of_two() >> 1
        } else {
            (rank & rank.wrapping_neg()) >> 1
        };
        while child_mask > 0 {
            let child = rank + child_mask;
            if child < p {
                self.transport.send(child, tag, &result)?;
            }
            child_mask >>= 1;
        }
        match decode(&result, rank, 0)? {
            Decoded::Mismatch([a, la, b, lb]) => Err(Error::InvalidArgument(format!(
                "allreduce length mismatch: rank {a} supplied {la} entries, rank {b} supplied {lb}"
            ))),
            Decoded::Values(sum) => {
                *v = sum;
                Ok(())
            }
        }
    }
}

enum Decoded {
    Values(ExactVec),
    Mismatch([u64; 4]),
}

fn decode(words: &[u64], rank: usize, from: usize) -> Result<Decoded> {
    let bad = || Error::Transport {
        rank,
        detail: format!("malformed reduction payload from rank {from}"),
    };
    match words.split_first() {
        Some((&STATUS_OK, rest)) => ExactVec::from_words(rest).map(Decoded::Values).ok_or_else(bad),
        Some((&STATUS_MISMATCH, &[a, la, b, lb])) => Ok(Decoded::Mismatch([a, la, b, lb])),
        _ => Err(bad()),
    }
}

fn pack(parts: &[Vec<u64>]) -> Vec<u64> {
    let mut out = Vec::new();
    for p in parts {
        out.push(p.len() as u64);
        out.extend_from_slice(p);
    }
    out
}

fn unpack(mut flat: &[u64], count: usize) -> Option<Vec<Vec<u64>>> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (&n, rest) = flat.split_first()?;
        let n = usize::try_from(n).ok()?;
        if rest.len() < n {
            return None;
        }
        out.push(rest[..n].to_vec());
        flat = &rest[n..];
    }
    flat.is_empty().then_some(out)
}

impl BatchReducer for WorkerGroup {
    fn reduce(&mut self, partial: &mut ExactVec) -> Result<()> {
        self.allreduce_exact(partial, Tag::BnStats)
    }
}
