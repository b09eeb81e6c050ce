//! The `pdegen` command line: `train`, `solve`, `infer`, `compare`, `bench`.
//!
//! Output files written by `train` into the output directory:
//!
//! | file | contents |
//! |------|----------|
//! | `effective.toml` | the configuration after shard-plan adjustment |
//! | `train_log.csv` | one row per mini-batch plus one summary row per epoch |
//! | `timing.csv` | per-epoch compute / communication / wall seconds |
//! | `checkpoint.bin` | latest generator checkpoint |
//! | `checkpoint_eNNNNN.bin` | kept checkpoints when `output.keep_every > 0` |
//! | `state.bin` | resume state: epoch, elapsed time, master parameters, optimizer |

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::bench::{append_timing_csv, run_scaling_sweep, TimingRow, TIMING_FORMAT, TIMING_HEADER};
use crate::config::{RunConfig, TransportConfig};
use crate::distributed::{
    run_worker, sample_pool, train_inproc, EpochSummary, RunOptions, TcpTransport, Worker,
    WorkerGroup,
};
use crate::error::{Error, Result};
use crate::model::{checkpoint_precision, Cursor, Generator};
use crate::optim::Optimizer;
use crate::oracle::{compute_norms, solve_fdm, Field, FdmConfig, DEFAULT_CFL};
use crate::autodiff::Tensor;
use crate::pde_loss::initial_condition;
use crate::scalar::{Precision, Scalar};

pub const TRAIN_LOG_HEADER: &str = "row,wall_time_sec,epoch,minibatch,loss,physics,boundary";
pub const TRAIN_LOG_FORMAT: &str = "# format=1";
pub const STATE_MAGIC: &[u8; 8] = b"PDGNSTAT";
pub const STATE_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "pdegen", version, about = "Train and evaluate Burgers' equation generators")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a generator from a run configuration.
    Train(TrainArgs),
    /// Solve one problem instance with the finite-difference oracle.
    Solve(SolveArgs),
    /// Evaluate a trained generator for one parameter value.
    Infer(InferArgs),
    /// Print the norm report of two field files (generator first, reference second).
    Compare(CompareArgs),
    /// Strong-scaling sweep over worker counts.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed_override: Option<u64>,
    /// This process's rank; required with the tcp transport.
    #[arg(long)]
    pub rank: Option<usize>,
    /// Continue from `checkpoint.bin` and `state.bin` in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long)]
    pub c: f64,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Oracle cells (default: max(2048, 2N)).
    #[arg(long)]
    pub nx: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_CFL)]
    pub cfl: f64,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub c: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    pub generated: PathBuf,
    pub reference: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated worker counts.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    pub p: Vec<usize>,
    /// Epochs per worker count (default: the config's).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Write the timing CSV here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    match run(cli.command, &mut std::io::stdout()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cmd: Command, stdout: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Train(a) => cmd_train(&a),
        Command::Solve(a) => cmd_solve(&a, stdout),
        Command::Infer(a) => cmd_infer(&a, stdout),
        Command::Compare(a) => cmd_compare(&a, stdout),
        Command::Bench(a) => cmd_bench(&a, stdout),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_field(path: &Path, field: &Field) -> Result<()> {
    let mut bytes = Vec::new();
    field.write(&mut bytes)?;
    write_atomic(path, &bytes)
}

fn read_field(path: &Path) -> Result<Field> {
    let f = fs::File::open(path)
        .map_err(|e| Error::InvalidArgument(format!("cannot open {}: {e}", path.display())))?;
    Field::read(BufReader::new(f))
}

/// Resume state written after every epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub wall_sec: f64,
    pub params: Vec<f64>,
    pub optimizer: Vec<u64>,
}

impl TrainState {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(48 + 8 * (self.params.len() + self.optimizer.len()));
        b.extend_from_slice(STATE_MAGIC);
        b.extend_from_slice(&STATE_VERSION.to_le_bytes());
        b.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        b.extend_from_slice(&self.wall_sec.to_le_bytes());
        b.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for v in &self.params {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&(self.optimizer.len() as u64).to_le_bytes());
        for w in &self.optimizer {
            b.extend_from_slice(&w.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != STATE_MAGIC {
            return Err(Error::Format("not a training state file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(cur.array()?);
        if version != STATE_VERSION {
            return Err(Error::Format(format!("unsupported state version {version}")));
        }
        let epoch = cur.usize()?;
        let wall_sec = cur.f64()?;
        let np = cur.usize()?;
        if np > bytes.len() / 8 {
            return Err(Error::Format("state parameter count exceeds file size".into()));
        }
        let params = (0..np).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
        let nw = cur.usize()?;
        if nw > bytes.len() / 8 {
            return Err(Error::Format("state optimizer length exceeds file size".into()));
        }
        let optimizer = (0..nw).map(|_| cur.u64()).collect::<Result<Vec<_>>>()?;
        if cur.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after training state".into()));
        }
        Ok(Self {
            epoch,
            wall_sec,
            params,
            optimizer,
        })
    }
}

/// Train-log lines for one epoch: its mini-batch rows and a summary row.
pub fn train_log_rows(summary: &EpochSummary) -> Vec<String> {
    let mut rows: Vec<String> = summary
        .minibatches
        .iter()
        .map(|r| {
            format!(
                "minibatch,{:.6},{},{},{},{},{}",
                r.wall_time_sec, r.epoch, r.minibatch, r.loss, r.physics, r.boundary
            )
        })
        .collect();
    let wall = summary.minibatches.last().map_or(0.0, |r| r.wall_time_sec);
    rows.push(format!("epoch,{wall:.6},{},,{},,", summary.epoch, summary.mean_loss));
    rows
}

struct OutputFiles {
    dir: PathBuf,
    keep_every: usize,
}

impl OutputFiles {
    fn log(&self) -> PathBuf {
        self.dir.join("train_log.csv")
    }
    fn timing(&self) -> PathBuf {
        self.dir.join("timing.csv")
    }
    fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.bin")
    }
    fn state(&self) -> PathBuf {
        self.dir.join("state.bin")
    }

    fn start_fresh(&self, effective: &RunConfig) -> Result<()> {
        fs::create_dir_all(&self.dir)?;
        fs::write(self.dir.join("effective.toml"), effective.to_toml())?;
        fs::write(self.log(), format!("{TRAIN_LOG_FORMAT}\n{TRAIN_LOG_HEADER}\n"))?;
        fs::write(self.timing(), format!("{TIMING_FORMAT}\n{TIMING_HEADER}\n"))?;
        Ok(())
    }

    fn record<S: Scalar>(
        &self,
        summary: &EpochSummary,
        model: &Generator<S>,
        optimizer: &Optimizer,
        params: &[f64],
    ) -> Result<()> {
        let mut log = fs::OpenOptions::new().append(true).open(self.log())?;
        let mut text = train_log_rows(summary).join("\n");
        text.push('\n');
        log.write_all(text.as_bytes())?;
        append_timing_csv(&self.timing(), &[TimingRow::new(&summary.timing, summary.mean_loss)])?;

        let mut ckpt = Vec::new();
        model.write_checkpoint(&mut ckpt)?;
        write_atomic(&self.checkpoint(), &ckpt)?;
        if self.keep_every > 0 && summary.epoch.is_multiple_of(self.keep_every) {
            fs::write(self.dir.join(format!("checkpoint_e{:05}.bin", summary.epoch)), &ckpt)?;
        }
        let state = TrainState {
            epoch: summary.epoch,
            wall_sec: summary.minibatches.last().map_or(0.0, |r| r.wall_time_sec),
            params: params.to_vec(),
            optimizer: optimizer.state_words(),
        };
        write_atomic(&self.state(), &state.to_bytes())?;
        eprintln!(
            "epoch {} loss {:.6e} compute {:.3}s comm {:.3}s wall {:.3}s",
            summary.epoch,
            summary.mean_loss,
            summary.timing.compute_sec,
            summary.timing.comm_sec,
            summary.timing.wall_sec
        );
        Ok(())
    }
}

/// Everything except the epoch count must match for a resume.
fn check_resumable(dir: &Path, effective: &RunConfig) -> Result<()> {
    let path = dir.join("effective.toml");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("cannot resume: {}: {e}", path.display())))?;
    let mut stored = RunConfig::from_toml(&text)?;
    stored.train.epochs = effective.train.epochs;
    if &stored != effective {
        return Err(Error::Config(format!(
            "cannot resume: {} differs from the requested configuration",
            path.display()
        )));
    }
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed_override {
        cfg.train.seed = seed;
    }
    if let Some(dir) = &a.out {
        cfg.output.dir = dir.clone();
    }
    match cfg.model.precision {
        Precision::F32 => train_typed::<f32>(&cfg, a),
        Precision::F64 => train_typed::<f64>(&cfg, a),
    }
}

fn train_typed<S: Scalar>(cfg: &RunConfig, a: &TrainArgs) -> Result<()> {
    let effective = cfg.effective()?;
    let plan = cfg.shard_plan()?;
    let rank = match (&cfg.transport, a.rank) {
        (TransportConfig::Inproc, None) => 0,
        (TransportConfig::Inproc, Some(_)) => {
            return Err(Error::Config("--rank only applies to the tcp transport".into()))
        }
        (TransportConfig::Tcp { .. }, None) => {
            return Err(Error::Config("the tcp transport needs --rank".into()))
        }
        (TransportConfig::Tcp { addresses }, Some(r)) if r >= addresses.len() => {
            return Err(Error::Config(format!(
                "--rank {r} is out of range for {} workers",
                addresses.len()
            )))
        }
        (TransportConfig::Tcp { .. }, Some(r)) => r,
    };
    let files = OutputFiles {
        dir: cfg.output.dir.clone(),
        keep_every: cfg.output.keep_every,
    };

    let mut opts = RunOptions::new(cfg.train.workers, cfg.train.epochs);
    opts.timeout = cfg.timeout();
    let model = if a.resume {
        check_resumable(&files.dir, &effective)?;
        let bytes = fs::read(files.state())?;
        let state = TrainState::from_bytes(&bytes)?;
        let model = Generator::<S>::read_checkpoint(BufReader::new(fs::File::open(files.checkpoint())?))?;
        if state.epoch >= cfg.train.epochs {
            eprintln!("already trained {} of {} epochs", state.epoch, cfg.train.epochs);
            return Ok(());
        }
        opts.first_epoch = state.epoch + 1;
        opts.epochs = cfg.train.epochs - state.epoch;
        opts.time_offset = state.wall_sec;
        opts.params = Some(state.params);
        opts.optimizer_state = Some(state.optimizer);
        model
    } else {
        if rank == 0 {
            files.start_fresh(&effective)?;
        }
        let mut model = Generator::<S>::new(cfg.generator_config())?;
        model.set_bn_momentum(cfg.model.bn_momentum)?;
        model
    };
    let samples = Arc::new(sample_pool(cfg.data.c_min, cfg.data.c_max, plan.samples, cfg.train.seed)?);

    let mut observer = |s: &EpochSummary, m: &Generator<S>, o: &Optimizer, p: &[f64]| files.record(s, m, o, p);
    match &cfg.transport {
        TransportConfig::Inproc => {
            train_inproc(model, plan, samples, cfg.engine_config(), &opts, Some(&mut observer))?;
        }
        TransportConfig::Tcp { .. } => {
            let addrs = cfg.socket_addrs()?;
            let t = TcpTransport::connect(rank, &addrs, cfg.timeout())?;
            let group = WorkerGroup::new(Box::new(t)).with_timeout(cfg.timeout());
            let mut worker = Worker::new(group, model, plan, samples, cfg.engine_config())?;
            let obs = if rank == 0 { Some(&mut observer as &mut _) } else { None };
            run_worker(&mut worker, &opts, obs)?;
        }
    }
    Ok(())
}

pub fn cmd_solve(a: &SolveArgs, stdout: &mut dyn Write) -> Result<()> {
    let cfg = FdmConfig { nx: a.nx, cfl: a.cfl };
    let t = Instant::now();
    let field = solve_fdm(a.c, &cfg, a.n)?;
    let secs = t.elapsed().as_secs_f64();
    write_field(&a.out, &field)?;
    writeln!(stdout, "solve_sec={secs:.6}")?;
    Ok(())
}

fn infer_typed<S: Scalar>(bytes: &[u8], c: f64) -> Result<(Field, f64)> {
    let model = Generator::<S>::from_checkpoint_bytes(bytes)?;
    let n = model.config().resolution;
    let t = Instant::now();
    let out = model.infer(&Tensor::from_f64(&[1, n], &initial_condition(c, n))?)?;
    let secs = t.elapsed().as_secs_f64();
    Ok((Field::new(n, c, out.to_f64_vec())?, secs))
}

/// One generator forward pass; returns the field and the inference seconds.
pub fn infer_checkpoint(path: &Path, c: f64) -> Result<(Field, f64)> {
    if !c.is_finite() {
        return Err(Error::InvalidArgument(format!("c must be finite, got {c}")));
    }
    let bytes = fs::read(path)
        .map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", path.display())))?;
    match checkpoint_precision(&bytes)? {
        Precision::F32 => infer_typed::<f32>(&bytes, c),
        Precision::F64 => infer_typed::<f64>(&bytes, c),
    }
}

pub fn cmd_infer(a: &InferArgs, stdout: &mut dyn Write) -> Result<()> {
    let (field, secs) = infer_checkpoint(&a.checkpoint, a.c)?;
    write_field(&a.out, &field)?;
    writeln!(stdout, "infer_sec={secs:.6}")?;
    Ok(())
}

pub fn cmd_compare(a: &CompareArgs, stdout: &mut dyn Write) -> Result<()> {
    let g = read_field(&a.generated)?;
    let fd = read_field(&a.reference)?;
    let report = compute_norms(&g, &fd)?;
    write!(stdout, "{}", report.to_csv())?;
    Ok(())
}

pub fn cmd_bench(a: &BenchArgs, stdout: &mut dyn Write) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    if a.p.is_empty() {
        return Err(Error::InvalidArgument("--p needs at least one worker count".into()));
    }
    let epochs = a.epochs.unwrap_or(cfg.train.epochs);
    if epochs == 0 {
        return Err(Error::InvalidArgument("--epochs must be at least 1".into()));
    }
    let report = run_scaling_sweep(&cfg, &a.p, epochs)?;
    if let Some(path) = &a.out {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        append_timing_csv(path, &report.rows)?;
    }
    write!(stdout, "{}", report.summary())?;
    Ok(())
}
