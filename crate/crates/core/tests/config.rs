use pdegen_core::config::RunConfig;
use pdegen_core::distributed::BnMode;
use pdegen_core::optim::OptimizerConfig;
use pdegen_core::{Error, Precision};

const MINIMAL: &str = "\
[model]
resolution = 32

[data]
c_min = 3.0
c_max = 6.0
samples = 32
batch = 8

[train]
epochs = 10
seed = 1
";

fn config_error(text: &str) -> String {
    match RunConfig::from_toml(text) {
        Err(Error::Config(msg)) => msg,
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn defaults_fill_optional_sections() {
    let c = RunConfig::from_toml(MINIMAL).unwrap();
    assert_eq!(c.model.precision, Precision::F32);
    assert_eq!(c.train.workers, 1);
    assert_eq!(c.train.batchnorm, BnMode::Sync);
    assert_eq!(c.loss.lambda, 10.0);
    assert!(!c.loss.x_boundary);
    assert!(matches!(c.optimizer, OptimizerConfig::Sgd(s) if s.lr == 1e-3 && s.momentum == 0.9));
    assert_eq!(c.generator_config().seed, 1);
}

#[test]
fn echoed_config_round_trips_with_every_default() {
    let c = RunConfig::from_toml(MINIMAL).unwrap();
    let text = c.to_toml();
    for key in ["lambda", "bn_momentum", "collective_timeout_sec", "cfl", "momentum", "kind"] {
        assert!(text.contains(key), "{key} not echoed:\n{text}");
    }
    assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
}

#[test]
fn effective_config_applies_the_shard_plan() {
    let text = MINIMAL
        .replace("samples = 32", "samples = 100")
        .replace("batch = 8", "batch = 32")
        .replace("seed = 1", "seed = 1\nworkers = 8");
    let c = RunConfig::from_toml(&text).unwrap();
    let e = c.effective().unwrap();
    assert_eq!((e.data.samples, e.data.batch), (104, 32));
    assert_eq!(e.effective().unwrap(), e);
}

#[test]
fn unknown_keys_are_rejected_with_their_line() {
    let msg = config_error(&MINIMAL.replace("seed = 1", "seed = 1\nbogus = 3"));
    assert!(msg.starts_with("line 13:"), "{msg}");
    assert!(msg.contains("bogus"), "{msg}");
    let msg = config_error(&format!("{MINIMAL}\n[extra]\nx = 1\n"));
    assert!(msg.contains("extra"), "{msg}");
}

#[test]
fn missing_keys_are_named() {
    let msg = config_error(&MINIMAL.replace("c_min = 3.0\n", ""));
    assert!(msg.contains("c_min"), "{msg}");
    assert!(msg.starts_with("line "), "{msg}");
}

#[test]
fn validation_errors_point_at_the_key() {
    let text = MINIMAL.replace("batch = 8", "batch = 3").replace("seed = 1", "seed = 1\nworkers = 4");
    let msg = config_error(&text);
    assert!(msg.starts_with("line 8: [data] batch"), "{msg}");

    let msg = config_error(&MINIMAL.replace("resolution = 32", "resolution = 48"));
    assert!(msg.starts_with("line 2: [model] resolution"), "{msg}");

    let msg = config_error(&format!("{MINIMAL}\n[loss]\nlambda = -1.0\n"));
    assert!(msg.starts_with("line 15: [loss] lambda"), "{msg}");

    let msg = config_error(&MINIMAL.replace("c_max = 6.0", "c_max = 2.0"));
    assert!(msg.contains("[data] c_min"), "{msg}");

    let msg = config_error(&MINIMAL.replace("epochs = 10", "epochs = 0"));
    assert!(msg.starts_with("line 11: [train] epochs"), "{msg}");

    let msg = config_error(&format!("format = 2\n{MINIMAL}"));
    assert!(msg.starts_with("line 1:"), "{msg}");
}

#[test]
fn optimizer_and_transport_sections() {
    let text = format!(
        "{}\n[optimizer]\nkind = \"lbfgs\"\nhistory = 5\n\n[transport]\nkind = \"tcp\"\naddresses = [\"127.0.0.1:7001\", \"127.0.0.1:7002\"]\n",
        MINIMAL.replace("seed = 1", "seed = 1\nworkers = 2")
    );
    let c = RunConfig::from_toml(&text).unwrap();
    assert!(matches!(c.optimizer, OptimizerConfig::Lbfgs(l) if l.history == 5));
    assert_eq!(c.socket_addrs().unwrap().len(), 2);

    let msg = config_error(&text.replace(", \"127.0.0.1:7002\"", ""));
    assert!(msg.contains("[transport] addresses"), "{msg}");
    let msg = config_error(&text.replace("127.0.0.1:7002", "nowhere"));
    assert!(msg.contains("nowhere"), "{msg}");
    let msg = config_error(&text.replace("history = 5", "history = 5\nlr = 0.1"));
    assert!(msg.contains("lr"), "{msg}");
}
