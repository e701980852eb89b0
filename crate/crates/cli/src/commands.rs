use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use brex_core::birl::run_mcmc_birl;
use brex_core::brex::run_mcmc;
use brex_core::chain::{chain_mean_raw, ChainKind, ChainSidecar, McmcConfig, PosteriorChain};
use brex_core::demos::{
    auto_rank_vs_random, dedup_demos, generate_optimal_demos, generate_ranked_random_demos,
    sample_ground_truth_reward, Demonstrator, PreferenceDataset,
};
use brex_core::embed::{pretrain, LossWeights, Pretrained, PretrainConfig};
use brex_core::experiment::{bench_brex, run_ablations, Ablation, BenchConfig, ExperimentConfig};
use brex_core::hcpe::{evaluate_policies, EvalPolicy};
use brex_core::mdp::{dot, GridWorld, RewardWeights};
use brex_core::rng::{seeded, substream};
use brex_core::uq::{dropout_samples, ensemble_to_chain, rows_to_chain, train_dropout_head, train_ensemble, TrexConfig};

use crate::settings::Settings;
use crate::CliError;

pub const REWARD_FORMAT: &str = "brex-reward/1";

#[derive(Debug, Serialize, Deserialize)]
struct RewardDoc {
    format: String,
    weights: Vec<f64>,
    seed: Option<u64>,
}

pub fn dispatch(name: &str, s: &Settings) -> Result<(), CliError> {
    match name {
        "gen-world" => gen_world(s),
        "gen-demos" => gen_demos(s),
        "pretrain" => cmd_pretrain(s),
        "mcmc-brex" => mcmc_brex(s),
        "mcmc-birl" => mcmc_birl(s),
        "baseline" => baseline(s),
        "eval" => eval(s),
        "bench" => bench(s),
        "experiment" => experiment(s),
        _ => unreachable!("clap only accepts known commands"),
    }
}

fn read(path: &str) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("cannot read {path}: {e}")))
}

/// Attaches the file name to parse errors, which already carry line and
/// column.
fn parsed<T>(path: &str, r: brex_core::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| CliError::Input(format!("{path}: {e}")))
}

fn write(path: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Runtime(format!("cannot write {path}: {e}")))
}

fn emit(path: Option<&str>, contents: &str) -> Result<(), CliError> {
    match path {
        Some(p) => write(p, contents),
        None => {
            print!("{contents}");
            Ok(())
        }
    }
}

fn load_world(s: &Settings) -> Result<GridWorld, CliError> {
    let path = s.required("world")?;
    parsed(path, GridWorld::from_json(&read(path)?))
}

fn load_demos(s: &Settings) -> Result<PreferenceDataset, CliError> {
    let path = s.required("demos")?;
    parsed(path, PreferenceDataset::from_json(&read(path)?))
}

fn load_reward(path: &str) -> Result<RewardWeights, CliError> {
    let doc: RewardDoc =
        serde_json::from_str(&read(path)?).map_err(|e| CliError::Input(format!("{path}: {e}")))?;
    if doc.format != REWARD_FORMAT {
        return Err(CliError::Input(format!("{path}: unknown reward format {:?}", doc.format)));
    }
    parsed(path, RewardWeights::unconstrained(doc.weights))
}

/// The dataset with feature sums replaced by encoder latent sums, when an
/// encoder is configured.
fn maybe_encode(s: &Settings, data: PreferenceDataset) -> Result<PreferenceDataset, CliError> {
    let Some(path) = s.optional("encoder") else {
        return Ok(data);
    };
    let enc = parsed(path, Pretrained::from_json(&read(path)?))?;
    let world = load_world(s)?;
    if enc.encoder().input_len() != world.state_vector_len() {
        return Err(CliError::Input(format!(
            "{path}: encoder expects {} inputs but the world's states have {}",
            enc.encoder().input_len(),
            world.state_vector_len()
        )));
    }
    let latents = (0..world.n_states())
        .map(|st| enc.encoder().encode(&world.state_vector(st)))
        .collect::<brex_core::Result<Vec<_>>>()?;
    if data.trajectories().iter().flat_map(|t| t.states()).any(|st| st >= world.n_states()) {
        return Err(CliError::Input("dataset visits states outside the world".into()));
    }
    Ok(data.refeaturize(|st| latents[st].clone())?)
}

fn mcmc_config(s: &Settings) -> Result<McmcConfig, CliError> {
    let cfg = McmcConfig {
        beta: s.get("beta")?,
        step_sigma: s.get("step_sigma")?,
        n_steps: s.get("n_steps")?,
        burn_in: s.get("burn_in")?,
        thin: s.get("thin")?,
        seed: s.get("seed")?,
        nonneg_prior: if s.optional("nonneg_prior").is_some() { s.get("nonneg_prior")? } else { false },
    };
    cfg.validate()?;
    Ok(cfg)
}

fn sidecar_path(chain: &str) -> String {
    format!("{chain}.json")
}

fn save_chain(s: &Settings, chain: &PosteriorChain) -> Result<(), CliError> {
    let out = s.required("out")?;
    write(out, chain.to_bytes())?;
    let mut side = serde_json::to_value(chain.sidecar()).expect("sidecar serializes");
    side["settings"] = json!(s.map());
    write(&sidecar_path(out), serde_json::to_string_pretty(&side).expect("json") + "\n")?;
    if let Some(csv) = s.optional("csv") {
        write(csv, s.csv_header() + &chain.to_csv())?;
    }
    eprintln!(
        "wrote {out}: {} samples of {} weights, acceptance rate {:.3}",
        chain.len(),
        chain.k(),
        chain.acceptance_rate()
    );
    Ok(())
}

fn load_chain(path: &str) -> Result<PosteriorChain, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Input(format!("cannot read {path}: {e}")))?;
    let chain = parsed(path, PosteriorChain::from_bytes(&bytes))?;
    let side = sidecar_path(path);
    if !Path::new(&side).exists() {
        return Ok(chain);
    }
    let doc: ChainSidecar =
        serde_json::from_str(&read(&side)?).map_err(|e| CliError::Input(format!("{side}: {e}")))?;
    parsed(&side, chain.with_sidecar(&doc))
}

fn gen_world(s: &Settings) -> Result<(), CliError> {
    let seed: u64 = s.get("seed")?;
    let world = GridWorld::random(s.get("width")?, s.get("height")?, s.get("k")?, s.get("gamma")?, &mut seeded(seed))?;
    let mut doc = world.to_doc();
    doc.seed = Some(seed);
    write(s.required("out")?, serde_json::to_string_pretty(&doc).expect("json") + "\n")
}

fn gen_demos(s: &Settings) -> Result<(), CliError> {
    let world = load_world(s)?;
    let seed: u64 = s.get("seed")?;
    let truth = match s.optional("reward") {
        Some(p) => load_reward(p)?,
        None => sample_ground_truth_reward(world.k(), &mut substream(seed, 1))?,
    };
    if truth.len() != world.k() {
        return Err(CliError::Input(format!("reward has {} weights, world has {} features", truth.len(), world.k())));
    }
    let mut rng = substream(seed, 2);
    let count: usize = s.get("count")?;
    let horizon: usize = s.get("horizon")?;
    let optimal = |rng: &mut _| -> Result<PreferenceDataset, CliError> {
        let demonstrator = match s.raw("demonstrator") {
            "greedy" => Demonstrator::Greedy,
            "boltzmann" => Demonstrator::Boltzmann(s.get("demo_beta")?),
            other => return Err(CliError::Input(format!("unknown demonstrator {other:?}"))),
        };
        let starts: Vec<usize> = (0..count).map(|_| Rng::gen_range(rng, 0..world.n_states())).collect();
        Ok(generate_optimal_demos(&world, &truth, horizon, &starts, demonstrator, rng)?)
    };
    let mut data = match s.raw("mode") {
        "ranked" => generate_ranked_random_demos(&world, &truth, count, horizon, &mut rng)?,
        "optimal" => optimal(&mut rng)?,
        "auto" => {
            let demos = optimal(&mut rng)?;
            let n_random = match s.optional("n_random") {
                Some(_) => s.get("n_random")?,
                None => count,
            };
            auto_rank_vs_random(&demos, &world, n_random, horizon, &mut rng)?
        }
        other => return Err(CliError::Input(format!("unknown mode {other:?}; expected ranked, optimal or auto"))),
    };
    data.provenance.seed = Some(seed);
    data.provenance.world_hash = Some(world.content_hash());
    data.provenance.settings = s.map().clone();
    write(s.required("out")?, data.to_json() + "\n")?;
    if let Some(p) = s.optional("reward_out") {
        let doc = RewardDoc {
            format: REWARD_FORMAT.into(),
            weights: truth.as_slice().to_vec(),
            seed: Some(seed),
        };
        write(p, serde_json::to_string_pretty(&doc).expect("json") + "\n")?;
    }
    Ok(())
}

fn cmd_pretrain(s: &Settings) -> Result<(), CliError> {
    let world = load_world(s)?;
    let data = load_demos(s)?;
    let cfg = PretrainConfig {
        weights: LossWeights {
            inverse: s.get("w_inverse")?,
            forward: s.get("w_forward")?,
            temporal: s.get("w_temporal")?,
            vae: s.get("w_vae")?,
            ranking: s.get("w_ranking")?,
        },
        learning_rate: s.get("learning_rate")?,
        weight_decay: s.get("weight_decay")?,
        steps: s.get("steps")?,
        batch: s.get("batch")?,
        hidden: s.get("hidden")?,
        latent: s.get("latent")?,
        seed: s.get("seed")?,
        ..PretrainConfig::default()
    };
    let trained = pretrain(&data, &world, &cfg)?;
    write(s.required("out")?, trained.to_json() + "\n")?;
    if let Some(p) = s.optional("log") {
        write(p, s.csv_header() + &trained.log.to_csv())?;
    }
    Ok(())
}

fn mcmc_brex(s: &Settings) -> Result<(), CliError> {
    let data = maybe_encode(s, load_demos(s)?)?;
    if data.prefs().is_empty() {
        return Err(CliError::Input(format!(
            "{}: dataset has no preferences; generate ranked or auto-ranked demonstrations",
            s.raw("demos")
        )));
    }
    let cfg = mcmc_config(s)?;
    let chain = run_mcmc(&data, &cfg, &mut seeded(cfg.seed))?;
    save_chain(s, &chain)
}

fn mcmc_birl(s: &Settings) -> Result<(), CliError> {
    let world = load_world(s)?;
    let data = load_demos(s)?;
    let cfg = mcmc_config(s)?;
    let pairs = dedup_demos(data.trajectories());
    let chain = run_mcmc_birl(&world, &pairs, &cfg, &mut seeded(cfg.seed))?;
    save_chain(s, &chain)
}

fn baseline(s: &Settings) -> Result<(), CliError> {
    let data = maybe_encode(s, load_demos(s)?)?;
    let seed: u64 = s.get("seed")?;
    let trex = TrexConfig {
        epochs: s.get("epochs")?,
        learning_rate: s.get("learning_rate")?,
        seed,
    };
    let chain = match s.raw("method") {
        "ensemble" => ensemble_to_chain(&train_ensemble(&data, s.get("members")?, s.get("subsample")?, &trex)?, seed)?,
        "dropout" => {
            let p: f64 = s.get("p")?;
            let head = train_dropout_head(&data, p, &trex)?;
            let rows = dropout_samples(&head, s.get("masks")?, p, &mut substream(seed, 7));
            rows_to_chain(ChainKind::Dropout, &rows, seed)?
        }
        other => return Err(CliError::Input(format!("unknown method {other:?}; expected ensemble or dropout"))),
    };
    save_chain(s, &chain)
}

fn eval(s: &Settings) -> Result<(), CliError> {
    let chain_path = s.required("chain")?;
    let chain = load_chain(chain_path)?;
    let burn_in = match s.optional("burn_in") {
        Some(_) => s.get("burn_in")?,
        None => chain.config.burn_in,
    };
    let thin = match s.optional("thin") {
        Some(_) => s.get("thin")?,
        None => chain.config.thin,
    };
    let kept = chain.thinned(burn_in, thin)?;
    let delta: f64 = s.get("delta")?;

    let mut policies = Vec::new();
    if s.optional("demos").is_some() {
        let raw = load_demos(s)?;
        let truth = s.optional("reward").map(load_reward).transpose()?;
        let encoded = maybe_encode(s, raw.clone())?;
        for (i, phi) in encoded.feature_sums().iter().enumerate() {
            let mut p = EvalPolicy::new(format!("demo{i}"), phi.clone());
            p.true_return = truth.as_ref().map(|w| dot(w.as_slice(), &raw.feature_sums()[i]));
            p.length = Some(raw.trajectories()[i].len() as f64);
            policies.push(p);
        }
    }
    if let Some(path) = s.optional("policies") {
        let list: Vec<EvalPolicy> =
            serde_json::from_str(&read(path)?).map_err(|e| CliError::Input(format!("{path}: {e}")))?;
        policies.extend(list);
    }
    if policies.is_empty() {
        return Err(CliError::Input("nothing to evaluate; give demos or policies".into()));
    }
    let report = evaluate_policies(&kept, &policies, delta)?;
    emit(s.optional("out"), &(s.csv_header() + &report.to_csv()))?;
    if let Some(p) = s.optional("json") {
        let doc = json!({ "settings": s.map(), "report": report });
        write(p, serde_json::to_string_pretty(&doc).expect("json") + "\n")?;
    }
    let mean = chain_mean_raw(&chain, burn_in, thin)?;
    log::info!("posterior mean weights: {mean:?}");
    Ok(())
}

fn bench(s: &Settings) -> Result<(), CliError> {
    let cfg = BenchConfig {
        n_trajectories: s.get("n_trajectories")?,
        k: s.get("k")?,
        n_proposals: s.get("n_proposals")?,
        beta: s.get("beta")?,
        step_sigma: s.get("step_sigma")?,
        seed: s.get("seed")?,
    };
    let report = bench_brex(&cfg)?;
    eprintln!(
        "{} preferences, k = {}: {} proposals in {:.3} s ({:.0} proposals/s)",
        report.n_prefs, cfg.k, cfg.n_proposals, report.seconds, report.proposals_per_sec
    );
    let doc: Value = json!({ "format": "brex-bench/1", "settings": s.map(), "report": report });
    emit(s.optional("out"), &(serde_json::to_string_pretty(&doc).expect("json") + "\n"))
}

fn experiment(s: &Settings) -> Result<(), CliError> {
    let which: Vec<Ablation> = match s.raw("which") {
        "all" => vec![Ablation::C1, Ablation::C2, Ablation::C3],
        one => vec![Ablation::parse(one)?],
    };
    let workers: usize = s.get("workers")?;
    let cfg = ExperimentConfig {
        n_worlds: s.get("n_worlds")?,
        demo_counts: s.list("demo_counts")?,
        width: s.get("width")?,
        height: s.get("height")?,
        k: s.get("k")?,
        gamma: s.get("gamma")?,
        horizon: s.get("horizon")?,
        mcmc: McmcConfig {
            beta: s.get("beta")?,
            step_sigma: s.get("step_sigma")?,
            thin: s.get("thin")?,
            ..McmcConfig::gridworld(0).with_steps(s.get("birl_steps")?)
        },
        brex_steps: s.get("brex_steps")?,
        base_seed: s.get("seed")?,
        workers: if workers == 0 {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            workers
        },
    };
    let tables = run_ablations(&cfg, &which)?;
    // The worker count does not change results, so keep it out of the files.
    let mut header = s.clone();
    header.set("workers", "-".into());
    for t in &tables {
        if t.failures > 0 {
            eprintln!("{:?}: {} of {} worlds failed and were skipped", t.ablation, t.failures, t.n_worlds);
        }
        let csv = header.csv_header() + &t.to_csv();
        match s.optional("out_dir") {
            Some(dir) => write(&format!("{dir}/{}.csv", format!("{:?}", t.ablation).to_lowercase()), csv)?,
            None => print!("{csv}"),
        }
    }
    Ok(())
}
