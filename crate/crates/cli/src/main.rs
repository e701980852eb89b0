//! `brex`: generate worlds and demonstrations, pretrain encoders, sample
//! reward posteriors, evaluate policies and run the gridworld ablations.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{Arg, ArgAction, Command};

use settings::Settings;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or input files. Exit code 2.
    Input(String),
    /// The computation itself failed. Exit code 3.
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl From<brex_core::Error> for CliError {
    fn from(e: brex_core::Error) -> Self {
        use brex_core::Error as E;
        match e {
            E::InvalidInput(_) | E::DimensionMismatch { .. } | E::Format(_) | E::Json(_) => CliError::Input(e.to_string()),
            E::NoAdmissibleInit(_) | E::Diverged(_) | E::Io(_) => CliError::Runtime(e.to_string()),
        }
    }
}

const MCMC_KEYS: [Key; 7] = [
    ("beta", "50", "likelihood inverse temperature"),
    ("step_sigma", "0.005", "proposal standard deviation"),
    ("n_steps", "10000", "number of proposals"),
    ("burn_in", "1000", "samples dropped when summarizing"),
    ("thin", "5", "keep every thin-th sample when summarizing"),
    ("seed", "0", "random seed"),
    ("out", "chain.bin", "chain file; a JSON sidecar is written next to it"),
];

/// `(key, default, help)`. An empty default means "not set".
type Key = (&'static str, &'static str, &'static str);

/// Every command with its name, summary and settings.
fn commands() -> Vec<(&'static str, &'static str, Vec<Key>)> {
    let mcmc = |extra: &[Key]| {
        let mut v = extra.to_vec();
        v.extend_from_slice(&MCMC_KEYS);
        v.push(("csv", "", "also export the chain as CSV"));
        v
    };
    vec![
        (
            "gen-world",
            "Generate a random gridworld",
            vec![
                ("width", "6", "grid width"),
                ("height", "6", "grid height"),
                ("k", "4", "number of one-hot cell features"),
                ("gamma", "0.9", "discount factor"),
                ("seed", "0", "random seed"),
                ("out", "world.json", "output world file"),
            ],
        ),
        (
            "gen-demos",
            "Generate demonstrations and preferences",
            vec![
                ("world", "", "world file"),
                ("mode", "ranked", "ranked | optimal | auto"),
                ("count", "10", "number of demonstrations"),
                ("horizon", "20", "steps per demonstration"),
                ("demonstrator", "greedy", "optimal demonstrator: greedy | boltzmann"),
                ("demo_beta", "10", "inverse temperature of the boltzmann demonstrator"),
                ("n_random", "", "random rollouts ranked below the demos in auto mode (default: count)"),
                ("reward", "", "true reward file (default: sampled from the seed)"),
                ("reward_out", "", "write the true reward here"),
                ("seed", "0", "random seed"),
                ("out", "demos.json", "output dataset file"),
            ],
        ),
        (
            "pretrain",
            "Pretrain a state encoder with self-supervised losses",
            vec![
                ("world", "", "world file"),
                ("demos", "", "dataset file"),
                ("steps", "2000", "optimizer steps"),
                ("batch", "1", "samples of each loss per step"),
                ("hidden", "32", "hidden layer width"),
                ("latent", "16", "latent feature count"),
                ("learning_rate", "0.001", "AdamW learning rate"),
                ("weight_decay", "0.001", "AdamW weight decay"),
                ("w_inverse", "1", "inverse dynamics loss weight"),
                ("w_forward", "1", "forward dynamics loss weight"),
                ("w_temporal", "1", "temporal distance loss weight"),
                ("w_vae", "1", "variational loss weight"),
                ("w_ranking", "1", "ranking loss weight"),
                ("seed", "0", "random seed"),
                ("out", "encoder.json", "output encoder file"),
                ("log", "", "training log CSV"),
            ],
        ),
        (
            "mcmc-brex",
            "Sample the reward posterior from preferences",
            mcmc(&[
                ("demos", "", "dataset file"),
                ("encoder", "", "use latent features from this encoder"),
                ("world", "", "world file (needed with encoder)"),
                ("nonneg_prior", "true", "require a non-negative return for the lowest-ranked demo"),
            ]),
        ),
        (
            "mcmc-birl",
            "Sample the reward posterior with Bayesian IRL",
            mcmc(&[("world", "", "world file"), ("demos", "", "dataset file")]),
        ),
        (
            "baseline",
            "Train ensemble or MC-dropout reward heads into a chain file",
            vec![
                ("demos", "", "dataset file"),
                ("encoder", "", "use latent features from this encoder"),
                ("world", "", "world file (needed with encoder)"),
                ("method", "ensemble", "ensemble | dropout"),
                ("members", "5", "ensemble size"),
                ("subsample", "0.8", "fraction of preferences per member"),
                ("p", "0.5", "dropout probability"),
                ("masks", "50", "dropout masks sampled at evaluation"),
                ("epochs", "50", "passes over the preferences"),
                ("learning_rate", "0.01", "Adam learning rate"),
                ("seed", "0", "random seed"),
                ("out", "baseline.bin", "chain file"),
            ],
        ),
        (
            "eval",
            "Rank policies by posterior mean and value at risk",
            vec![
                ("chain", "", "chain file"),
                ("demos", "", "evaluate each demonstration's feature sum"),
                ("policies", "", "JSON list of {name, phi}"),
                ("encoder", "", "map demonstrations through this encoder"),
                ("world", "", "world file (needed with encoder)"),
                ("reward", "", "true reward file for true returns"),
                ("delta", "0.05", "VaR level"),
                ("burn_in", "", "override the chain's burn-in"),
                ("thin", "", "override the chain's thinning"),
                ("out", "", "CSV report (default: stdout)"),
                ("json", "", "JSON report"),
            ],
        ),
        (
            "bench",
            "Time a posterior chain on synthetic preferences",
            vec![
                ("n_trajectories", "12", "ranked trajectories (all pairs become preferences)"),
                ("k", "64", "feature count"),
                ("n_proposals", "100000", "proposals"),
                ("beta", "1", "likelihood inverse temperature"),
                ("step_sigma", "0.005", "proposal standard deviation"),
                ("seed", "0", "random seed"),
                ("out", "", "JSON report (default: stdout)"),
            ],
        ),
        (
            "experiment",
            "Gridworld ablations over many random worlds",
            vec![
                ("which", "all", "c1 | c2 | c3 | all"),
                ("n_worlds", "100", "number of random worlds"),
                ("demo_counts", "2,5,10,20,30", "demonstration counts"),
                ("width", "6", "grid width"),
                ("height", "6", "grid height"),
                ("k", "4", "feature count"),
                ("gamma", "0.9", "discount factor"),
                ("horizon", "20", "demonstration length"),
                ("beta", "50", "likelihood inverse temperature"),
                ("step_sigma", "0.005", "proposal standard deviation"),
                ("brex_steps", "100000", "proposals per B-REX chain (10% burn-in)"),
                ("birl_steps", "10000", "proposals per B-IRL chain (10% burn-in)"),
                ("thin", "5", "thinning"),
                ("seed", "0", "base seed; world i uses seed + i"),
                ("workers", "0", "worker threads (0: all cores)"),
                ("out_dir", "", "write <which>.csv files here (default: stdout)"),
            ],
        ),
    ]
}

fn build_cli() -> Command {
    let mut cli = Command::new("brex")
        .about("Reward posteriors from ranked demonstrations and high-confidence policy evaluation")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg(
            Arg::new("verbose")
                .short('v')
                .long("verbose")
                .action(ArgAction::Count)
                .global(true)
                .help("more log output"),
        );
    for (name, about, keys) in commands() {
        let mut sub = Command::new(name)
            .about(about)
            .arg(
                Arg::new("config")
                    .long("config")
                    .value_name("FILE")
                    .value_parser(clap::value_parser!(PathBuf))
                    .help("flat key=value config file"),
            )
            .arg(
                Arg::new("show_config")
                    .long("show-config")
                    .action(ArgAction::SetTrue)
                    .help("print the effective settings and exit"),
            );
        for (key, default, help) in keys {
            let help = if default.is_empty() {
                help.to_string()
            } else {
                format!("{help} [default: {default}]")
            };
            sub = sub.arg(Arg::new(key).long(key.replace('_', "-")).value_name("VALUE").help(help));
        }
        cli = cli.subcommand(sub);
    }
    cli
}

fn run() -> Result<(), CliError> {
    let matches = build_cli().get_matches();
    let level = match matches.get_count("verbose") {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let keys = commands().into_iter().find(|c| c.0 == name).expect("known command").2;
    let defaults: Vec<(&str, &str)> = keys.iter().map(|(k, d, _)| (*k, *d)).collect();
    let mut settings = Settings::with_defaults(&defaults);
    if let Some(path) = sub.get_one::<PathBuf>("config") {
        settings.apply_file(path)?;
    }
    for (key, _, _) in &keys {
        if sub.value_source(key) == Some(ValueSource::CommandLine) {
            let v: &String = sub.get_one(key).expect("flag has a value");
            settings.set(key, v.clone());
        }
    }
    if sub.get_flag("show_config") {
        print!("{}", settings.render());
        return Ok(());
    }
    commands::dispatch(name, &settings)
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("brex: {e}");
            ExitCode::from(match e {
                CliError::Input(_) => 2,
                CliError::Runtime(_) => 3,
            })
        }
    }
}
