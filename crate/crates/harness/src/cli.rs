//! Argument parsing and exit-code mapping.
//!
//! Every config key is also a flag of the same name, so `--steps 50`
//! overrides `"steps": 50` from `--config`.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::commands;
use crate::config::{keys, RunConfig};
use crate::error::Result;

const SUBCOMMANDS: [(&str, &str); 6] = [
    (
        "grad-check",
        "Finite-difference check of every differentiable path",
    ),
    (
        "train",
        "Run the requested training stages into a run directory",
    ),
    (
        "route-stats",
        "Aggregate expert shares over the final logged steps of a run",
    ),
    (
        "ablate",
        "Train every variant of the experts or placement axis",
    ),
    (
        "lift",
        "Lift a camera frame's depth map to world coordinates",
    ),
    (
        "gen-csqa",
        "Generate grounded CSQA pairs from scene-graph pairs",
    ),
];

fn command() -> Command {
    let keys = keys();
    let mut root = Command::new("synmoe")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Sparse MoE toy pipeline harness")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in SUBCOMMANDS {
        let mut sub = Command::new(name).about(about).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("Flat JSON config; flags override its keys"),
        );
        for key in &keys {
            let mut arg = Arg::new(key.clone())
                .long(key.clone())
                .value_name("VALUE")
                .action(ArgAction::Set);
            if key.contains('_') {
                arg = arg.alias(key.replace('_', "-"));
            }
            sub = sub.arg(arg);
        }
        root = root.subcommand(sub);
    }
    root
}

fn overrides(m: &ArgMatches) -> Vec<(String, String)> {
    keys()
        .into_iter()
        .filter_map(|k| m.get_one::<String>(&k).map(|v| (k.clone(), v.clone())))
        .collect()
}

fn dispatch(name: &str, cfg: &RunConfig, log: &mut dyn Write) -> Result<()> {
    match name {
        "grad-check" => commands::grad_check(cfg, log).map(drop),
        "train" => commands::train(cfg, log).map(drop),
        "route-stats" => commands::route_stats(cfg, log).map(drop),
        "ablate" => commands::ablate(cfg, log).map(drop),
        "lift" => commands::lift(cfg, log).map(drop),
        "gen-csqa" => commands::gen_csqa(cfg, log).map(drop),
        other => unreachable!("clap accepted unknown subcommand {other}"),
    }
}

fn report(err: &dyn std::error::Error) {
    let mut msg = format!("error: {err}");
    let mut src = err.source();
    while let Some(s) = src {
        msg.push_str(&format!("\n  caused by: {s}"));
        src = s.source();
    }
    eprintln!("{msg}");
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code: 0 success, 1 domain or validation error, 2 internal
/// invariant breach.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let Some((name, sub)) = matches.subcommand() else {
        return 1;
    };
    let file = sub.get_one::<PathBuf>("config");
    let cfg = match RunConfig::resolve(file.map(PathBuf::as_path), &overrides(sub)) {
        Ok(c) => c,
        Err(e) => {
            report(&e);
            return e.exit_code();
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match dispatch(name, &cfg, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            report(&e);
            e.exit_code()
        }
    }
}
