use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use hsfl_core::config::{ConfigError, RunConfig, KEYS};
use hsfl_core::coordination::checkpoint::Checkpoint;
use hsfl_core::coordination::run_experiment;
use hsfl_core::protocol::audit_transcript_bytes;

const SEED_ENV: &str = "HSFL_SEED";

fn flag_name(key: &str) -> String {
    key.replace('_', "-")
}

fn run_command() -> Command {
    let defaults = RunConfig::default();
    let mut cmd = Command::new("run")
        .about("Train, personalize and evaluate; writes artifacts and prints the summary")
        .arg(
            Arg::new("config")
                .long("config")
                .short('c')
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("key = value configuration file; flags override it"),
        );
    for (key, help) in KEYS {
        let default = defaults.get(key).unwrap_or_default();
        let mut arg = Arg::new(*key)
            .long(flag_name(key))
            .value_name("VALUE")
            .action(ArgAction::Set)
            .help(format!("{help} [default: {default}]"));
        if default == "true" || default == "false" {
            arg = arg.num_args(0..=1).default_missing_value("true");
        }
        cmd = cmd.arg(arg);
    }
    cmd
}

fn cli() -> Command {
    Command::new("hsfl")
        .about("Hybrid split-federated learning simulator")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(run_command())
        .subcommand(
            Command::new("audit")
                .about("Check a recorded transcript for label-bearing or malformed frames")
                .arg(
                    Arg::new("transcript")
                        .required(true)
                        .value_parser(clap::value_parser!(PathBuf)),
                ),
        )
        .subcommand(
            Command::new("inspect")
                .about("Validate a checkpoint and list its entities")
                .arg(
                    Arg::new("checkpoint")
                        .required(true)
                        .value_parser(clap::value_parser!(PathBuf)),
                ),
        )
}

/// File values first, then `HSFL_SEED`, then flags.
fn resolve_config(m: &ArgMatches, seed_env: Option<String>) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = m.get_one::<PathBuf>("config") {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("config", format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    if let Some(seed) = seed_env {
        cfg.set("seed", &seed)?;
    }
    for (key, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_run(m: &ArgMatches) -> ExitCode {
    let cfg = match resolve_config(m, std::env::var(SEED_ENV).ok()) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match run_experiment(&cfg) {
        Ok(report) => {
            print!("{}", report.summary());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn cmd_audit(path: &Path) -> ExitCode {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return ExitCode::from(2);
        }
    };
    match audit_transcript_bytes(&bytes) {
        Ok(report) => {
            print!("{report}");
            if report.is_clean() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            match e.offset() {
                Some(offset) => eprintln!("error: corrupt transcript at byte {offset}: {e}"),
                None => eprintln!("error: {e}"),
            }
            ExitCode::from(2)
        }
    }
}

fn cmd_inspect(path: &Path) -> ExitCode {
    match Checkpoint::read(path) {
        Ok(ckpt) => {
            print!("{ckpt}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            ExitCode::from(2)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match matches.subcommand() {
        Some(("run", m)) => cmd_run(m),
        Some(("audit", m)) => cmd_audit(m.get_one::<PathBuf>("transcript").expect("required")),
        Some(("inspect", m)) => cmd_inspect(m.get_one::<PathBuf>("checkpoint").expect("required")),
        _ => ExitCode::from(1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matches(args: &[&str]) -> ArgMatches {
        let m = cli().try_get_matches_from(args).unwrap();
        m.subcommand_matches("run").unwrap().clone()
    }

    #[test]
    fn every_key_has_a_flag() {
        let cmd = run_command();
        for (key, _) in KEYS {
            assert!(
                cmd.get_arguments()
                    .any(|a| a.get_long() == Some(&flag_name(key))),
                "{key}"
            );
        }
    }

    #[test]
    fn flags_override_env_which_overrides_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.conf");
        std::fs::write(&path, "seed = 3\nrounds = 7\n").unwrap();
        let p = path.to_str().unwrap();
        let cfg = resolve_config(&matches(&["hsfl", "run", "--config", p]), None).unwrap();
        assert_eq!((cfg.seed, cfg.rounds), (3, 7));
        let cfg =
            resolve_config(&matches(&["hsfl", "run", "--config", p]), Some("5".into())).unwrap();
        assert_eq!(cfg.seed, 5);
        let cfg = resolve_config(
            &matches(&["hsfl", "run", "--config", p, "--seed", "9"]),
            Some("5".into()),
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn flag_equals_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.conf");
        std::fs::write(
            &path,
            "gamma = 0.25\nexit_set = 2,3\nstochastic_exit = false\n",
        )
        .unwrap();
        let from_file = resolve_config(
            &matches(&["hsfl", "run", "-c", path.to_str().unwrap()]),
            None,
        )
        .unwrap();
        let from_flags = resolve_config(
            &matches(&[
                "hsfl",
                "run",
                "--gamma",
                "0.25",
                "--exit-set",
                "2,3",
                "--stochastic-exit",
                "false",
            ]),
            None,
        )
        .unwrap();
        assert_eq!(from_file, from_flags);
    }

    #[test]
    fn bare_boolean_flag_means_true() {
        let cfg = resolve_config(&matches(&["hsfl", "run", "--record-transcript"]), None).unwrap();
        assert!(cfg.record_transcript);
    }

    #[test]
    fn invalid_value_names_the_key() {
        let err = resolve_config(&matches(&["hsfl", "run", "--gamma", "1.5"]), None).unwrap_err();
        assert_eq!(err.key, "gamma");
    }
}
