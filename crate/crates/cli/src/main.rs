use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use plphp_core::config::KEYS;
use plphp_core::experiment::{replay_cmd, run_and_write, sweep_and_write, write_sweep_csv};
use plphp_core::{exit, Error, ExperimentConfig};

fn help_for(key: &str) -> &'static str {
    match key {
        "model-layers" => "number of decoder layers N (>= 4)",
        "model-heads" => "attention heads per layer H",
        "model-dim" => "model width D (must equal H x head-dim)",
        "head-dim" => "per-head width",
        "vocab-size" => "synthetic vocabulary size",
        "max-positions" => "position embedding table size",
        "segments" => "prompt layout, e.g. T:8,I:92,T:4 (must end with text)",
        "method" => "none | plphp | fastv | vtw",
        "r" => "base vision-token retention rate",
        "dr" => "retention adjustment for attentive/indifferent layers",
        "alpha" => "vision-attentive threshold",
        "beta" => "vision-indifferent threshold",
        "first-layer" => "first pruned layer, 1-based (default 3)",
        "last-layer" => "last pruned layer, 1-based (default N-1)",
        "fastv-k" => "FastV pruning layer K",
        "fastv-ratio" => "FastV fraction of vision tokens dropped",
        "vtw-k" => "VTW layer from which vision tokens are dropped (default ceil(N/2))",
        "seed" => "seed for weights and token ids",
        "steps" => "greedy decode steps (latency is reported from 16 steps up)",
        "trace-out" => "write the PLPT attention trace here",
        "trace" => "PLPT trace to replay",
        "report-out" => "JSON report path; the per-layer CSV goes next to it",
        "csv-out" => "per-layer CSV path (overrides the default next to the JSON)",
        "sweep-out" => "sweep CSV path (stdout if absent)",
        "grid-r" => "comma-separated r values to sweep",
        "grid-dr" => "comma-separated dr values to sweep",
        "grid-alpha" => "comma-separated alpha values to sweep",
        "grid-beta" => "comma-separated beta values to sweep",
        _ => "",
    }
}

fn with_keys(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("flat key = value config file; flags override it"),
    );
    KEYS.iter().fold(cmd, |cmd, key| {
        cmd.arg(
            Arg::new(*key)
                .long(*key)
                .value_name("VALUE")
                .action(ArgAction::Set)
                .allow_hyphen_values(false)
                .help(help_for(key)),
        )
    })
}

fn cli() -> Command {
    Command::new("plphp")
        .about("Per-layer per-head vision-token KV-cache pruning experiments")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(with_keys(
            Command::new("run").about("prefill + decode under one pruning method; write reports"),
        ))
        .subcommand(with_keys(
            Command::new("sweep").about("run PLPHP over a grid of r / dr / alpha / beta"),
        ))
        .subcommand(with_keys(
            Command::new("replay").about("recompute pruning decisions from a PLPT trace"),
        ))
}

fn load_config(m: &ArgMatches) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = m.get_one::<String>("config") {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.into(),
            source,
        })?;
        cfg.apply_file(&text)?;
    }
    for key in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn dispatch(m: &ArgMatches) -> Result<(), Error> {
    match m.subcommand() {
        Some(("run", sub)) => {
            let cfg = load_config(sub)?;
            let out = run_and_write(&cfg)?;
            let metrics = &out.report.metrics;
            println!(
                "method={} RR={:.4} KV={:.4} latency_ms={} tokens={:?}",
                cfg.method,
                metrics.retention_rate,
                metrics.kv_fraction,
                opt(metrics.decode_latency_ms),
                out.report.generated_tokens
            );
        }
        Some(("sweep", sub)) => {
            let cfg = load_config(sub)?;
            let rows = sweep_and_write(&cfg)?;
            if cfg.sweep_out.is_none() {
                write_sweep_csv(&rows, std::io::stdout().lock())?;
            } else {
                let failed = rows.iter().filter(|r| r.status != "ok").count();
                println!("{} grid points, {failed} failed", rows.len());
            }
        }
        Some(("replay", sub)) => {
            let cfg = load_config(sub)?;
            let report = replay_cmd(&cfg)?;
            if cfg.report_out.is_none() {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                println!(
                    "RR={:.4} KV={:.4} layers={}",
                    report.metrics.retention_rate,
                    report.metrics.kv_fraction,
                    report.decisions.len()
                );
            }
        }
        _ => unreachable!("subcommand_required"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    match dispatch(&matches) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("plphp: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_is_consistent() {
        cli().debug_assert();
        assert!(KEYS.iter().all(|k| !help_for(k).is_empty()));
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("exp.conf");
        std::fs::write(&file, "r = 0.3\nseed = 7\n").unwrap();
        let m = cli()
            .try_get_matches_from([
                "plphp",
                "run",
                "--config",
                file.to_str().unwrap(),
                "--r",
                "0.5",
            ])
            .unwrap();
        let cfg = load_config(m.subcommand_matches("run").unwrap()).unwrap();
        assert_eq!(cfg.pruning.r, 0.5);
        assert_eq!(cfg.seed, 7);
    }
}
