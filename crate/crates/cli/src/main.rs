use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use sibp::chain::ChainOutput;
use sibp::error::{Error, Result};
use sibp::gibbs::run_chains;
use sibp::io::{self, ChainMeta, Dataset, ModelKind, Observations, RunConfig};
use sibp::latent::LatentBackend;
use sibp::metrics;
use sibp::multinomial::MultinomialModel;
use sibp::negbin::NegBinModel;
use sibp::predict::predict_factors;
use sibp::scenario::{generate_seeded, ScenarioKind, ScenarioSpec};
use sibp::verify::{self, VerifyOptions};

#[derive(Parser)]
#[command(name = "sibp", version, about = "Spatial Indian buffet process factor models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic data set.
    Simulate(SimulateArgs),
    /// Run the Gibbs sampler and store the chains.
    Fit(FitArgs),
    /// Predict factor presence at new sites from a stored fit.
    Predict(PredictArgs),
    /// Check prior properties and the Pólya-gamma sampler numerically.
    Verify(VerifyArgs),
    /// Rand index, prediction MSE or DIC from stored files.
    #[command(subcommand)]
    Metrics(MetricsCommand),
    /// Print the default run configuration as TOML.
    Config,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value = "I")]
    scenario: ScenarioKind,
    #[arg(long, default_value_t = 80)]
    n: usize,
    #[arg(long, default_value_t = 20)]
    n_test: usize,
    #[arg(long, default_value_t = 50)]
    features: usize,
    #[arg(long, default_value_t = 5)]
    categories: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    locations: PathBuf,
    #[arg(long)]
    observations: PathBuf,
    /// TOML run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long, default_value_t = 1)]
    chains: usize,
    /// Use the nearest-neighbour GP with this many neighbours.
    #[arg(long, value_name = "M")]
    nngp: Option<usize>,
    /// Exchangeable kernel (the non-spatial IBP baseline).
    #[arg(long)]
    exchangeable: bool,
    /// Persist U with every draw; required by `predict`.
    #[arg(long)]
    store_u: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    keep: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    #[arg(long)]
    truncation: Option<usize>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    /// Directory written by `fit`.
    #[arg(long)]
    fit: PathBuf,
    /// Locations file of the new sites.
    #[arg(long)]
    sites: PathBuf,
    /// Presence records `id,factor,probability`.
    #[arg(long)]
    out: PathBuf,
    /// Also write predictive category probabilities (multinomial fits).
    #[arg(long)]
    probabilities: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct VerifyArgs {
    /// Smaller Monte Carlo sizes.
    #[arg(long)]
    quick: bool,
    /// E[K*] for every (τ, ψ) combination.
    #[arg(long)]
    full_grid: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Report file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum MetricsCommand {
    /// Best-matched rand index of each true factor.
    Rand {
        /// True memberships as a factor table.
        #[arg(long)]
        truth: PathBuf,
        /// Presence probabilities as a factor table.
        #[arg(long)]
        presence: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Mean squared error between two probability tables.
    Mse {
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Deviance information criterion of a stored fit.
    Dic {
        #[arg(long)]
        fit: PathBuf,
    },
}

/// Failure of a run: bad input or a failed check (exit 1) or a numerical
/// abort (exit 2).
enum Failure {
    Engine(Error),
    Checks(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Engine(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Engine(e.into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::Predict(a) => predict(a),
        Command::Verify(a) => run_verify(a),
        Command::Metrics(m) => run_metrics(m),
        Command::Config => print_config(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Checks(n)) => {
            eprintln!("error: {n} check(s) failed");
            ExitCode::from(1)
        }
        Err(Failure::Engine(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn print_line(value: serde_json::Value) {
    println!("{value}");
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn simulate(a: SimulateArgs) -> std::result::Result<(), Failure> {
    let spec = ScenarioSpec { scenario: a.scenario, n: a.n, n_test: a.n_test, features: a.features, categories: a.categories, seed: a.seed };
    let sc = generate_seeded(&spec)?;
    ensure_dir(&a.out)?;
    let ids: Vec<String> = sc.locations.iter().map(|l| l.id.clone()).collect();
    let test_ids: Vec<String> = sc.test_locations.iter().map(|l| l.id.clone()).collect();
    io::write_locations(&a.out.join("locations.csv"), &sc.locations)?;
    io::write_locations(&a.out.join("test_locations.csv"), &sc.test_locations)?;
    io::write_multinomial(&a.out.join("observations.csv"), &ids, &sc.data)?;
    io::write_probabilities(&a.out.join("probabilities.csv"), &ids, &sc.probs)?;
    io::write_probabilities(&a.out.join("test_probabilities.csv"), &test_ids, &sc.test_probs)?;
    if let (Some(z), Some(zt)) = (&sc.true_z, &sc.true_z_test) {
        io::write_membership(&a.out.join("true_z.csv"), &ids, z)?;
        io::write_membership(&a.out.join("test_true_z.csv"), &test_ids, zt)?;
    }
    std::fs::write(a.out.join("scenario.json"), serde_json::to_string_pretty(&spec).map_err(Error::from)? + "\n")?;
    print_line(json!({ "command": "simulate", "out": a.out, "n": a.n, "n_test": a.n_test }));
    Ok(())
}

fn resolve_config(a: &FitArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(m) = a.model {
        cfg.model = m;
    }
    let s = &mut cfg.sampler;
    if let Some(m) = a.nngp {
        s.latent = LatentBackend::Nngp { neighbors: m };
    }
    if a.exchangeable {
        *s = s.clone().exchangeable();
    }
    s.store_u |= a.store_u;
    s.seed = a.seed.unwrap_or(s.seed);
    s.burn_in = a.burn_in.unwrap_or(s.burn_in);
    s.keep = a.keep.unwrap_or(s.keep);
    s.thin = a.thin.unwrap_or(s.thin);
    s.truncation = a.truncation.unwrap_or(s.truncation);
    s.validate()?;
    Ok(cfg)
}

/// Observation model built from a data set and the configured priors.
enum Model {
    Multinomial(MultinomialModel),
    Negbin(NegBinModel),
}

fn build_model(data: &Dataset, cfg: &RunConfig) -> Result<Model> {
    let k = cfg.sampler.truncation;
    let gammas = cfg.priors.gammas(k);
    match (&data.observations, cfg.model) {
        (Observations::Multinomial(d), ModelKind::Multinomial) => {
            let mut m = MultinomialModel::new(d.clone(), k).with_precisions(gammas)?;
            if let Some(p) = cfg.priors.effect_prior {
                m = m.with_effect_prior(p)?;
            }
            Ok(Model::Multinomial(m))
        }
        (Observations::Counts(d), ModelKind::Negbin) => {
            Ok(Model::Negbin(NegBinModel::new(d.clone(), k, cfg.priors.nu_prior).with_precisions(gammas)?))
        }
        _ => Err(Error::InvalidParameter("observations do not match the model kind".into())),
    }
}

fn chain_path(dir: &Path, c: usize) -> PathBuf {
    dir.join(format!("chain-{}.jsonl", c + 1))
}

fn fit(a: FitArgs) -> std::result::Result<(), Failure> {
    let cfg = resolve_config(&a)?;
    let data = io::load_dataset(&a.locations, &a.observations, cfg.model)?;
    let model = build_model(&data, &cfg)?;
    let started = Instant::now();
    let chains = match &model {
        Model::Multinomial(m) => run_chains(m, &data.locations, &cfg.sampler, a.chains)?,
        Model::Negbin(m) => run_chains(m, &data.locations, &cfg.sampler, a.chains)?,
    };
    ensure_dir(&a.out)?;
    for (c, chain) in chains.iter().enumerate() {
        io::write_chain(&chain_path(&a.out, c), chain)?;
    }
    let merged = ChainOutput::merge(chains)?;
    let ids: Vec<String> = data.locations.iter().map(|l| l.id.clone()).collect();
    io::write_presence(&a.out.join("presence.csv"), &ids, &merged)?;
    let (categories, n_features) = match &data.observations {
        Observations::Multinomial(d) => (d.categories().to_vec(), d.categories().len()),
        Observations::Counts(d) => (Vec::new(), d.n_features()),
    };
    let meta = ChainMeta {
        model: cfg.model,
        n_subjects: merged.n_subjects,
        n_factors: merged.n_factors,
        kernel: merged.kernel,
        ids,
        config: cfg,
        categories,
        n_features,
        chains: a.chains,
        psi_acceptance: merged.psi_acceptance,
        locations: std::path::absolute(&a.locations)?,
        observations: std::path::absolute(&a.observations)?,
    };
    meta.write(&a.out.join("meta.json"))?;
    let non_null = metrics::non_null_factors(&merged.presence(), 0.5);
    print_line(json!({
        "command": "fit",
        "out": a.out,
        "chains": a.chains,
        "draws": merged.len(),
        "non_null_factors": non_null.iter().map(|k| k + 1).collect::<Vec<_>>(),
        "psi_acceptance": merged.psi_acceptance,
        "seconds": started.elapsed().as_secs_f64(),
    }));
    Ok(())
}

/// Metadata, the rebuilt data set and all chains of a stored fit, pooled.
fn load_fit(dir: &Path) -> Result<(ChainMeta, Dataset, ChainOutput)> {
    let meta = ChainMeta::read(&dir.join("meta.json"))?;
    let data = io::load_dataset(&meta.locations, &meta.observations, meta.model)?;
    if let Observations::Multinomial(d) = &data.observations {
        if d.categories() != meta.categories.as_slice() {
            return Err(Error::Shape("observation file no longer matches the fit's category counts".into()));
        }
    }
    let chains = (0..meta.chains.max(1)).map(|c| io::read_chain(&chain_path(dir, c), &meta)).collect::<Result<Vec<_>>>()?;
    Ok((meta, data, ChainOutput::merge(chains)?))
}

fn predict(a: PredictArgs) -> std::result::Result<(), Failure> {
    let (meta, data, chain) = load_fit(&a.fit)?;
    let sites = io::read_locations(&a.sites)?;
    let backend = meta.config.sampler.latent;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let preds = match build_model(&data, &meta.config)? {
        Model::Multinomial(mut m) => {
            let model = a.probabilities.as_ref().map(|_| &mut m);
            predict_factors(&sites, &data.locations, &chain, backend, model, &mut rng)?
        }
        Model::Negbin(_) => {
            if a.probabilities.is_some() {
                return Err(Error::InvalidParameter("category probabilities need a multinomial fit".into()).into());
            }
            predict_factors(&sites, &data.locations, &chain, backend, None::<&mut NegBinModel>, &mut rng)?
        }
    };
    io::write_predictions(&a.out, &preds)?;
    if let Some(path) = &a.probabilities {
        let ids: Vec<String> = preds.iter().map(|p| p.site.id.clone()).collect();
        let probs = preds
            .iter()
            .map(|p| split_probabilities(p.mean.as_deref().unwrap_or_default(), &meta.categories))
            .collect::<Vec<_>>();
        io::write_probabilities(path, &ids, &probs)?;
    }
    print_line(json!({ "command": "predict", "sites": preds.len(), "draws": chain.len() }));
    Ok(())
}

/// Splits a flat per-feature probability vector into one slice per feature.
fn split_probabilities(flat: &[f64], categories: &[usize]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(categories.len());
    let mut pos = 0;
    for &c in categories {
        out.push(flat[pos..pos + c].to_vec());
        pos += c;
    }
    out
}

fn run_verify(a: VerifyArgs) -> std::result::Result<(), Failure> {
    let mut opts = if a.quick { VerifyOptions::quick() } else { VerifyOptions::default() };
    opts.full_grid = a.full_grid;
    opts.seed = a.seed;
    let records = verify::run_all(&opts)?;
    match &a.out {
        Some(p) => verify::write_report(&records, BufWriter::new(File::create(p)?))?,
        None => verify::write_report(&records, std::io::stdout().lock())?,
    }
    let failed = records.iter().filter(|r| !r.pass).count();
    if failed > 0 {
        return Err(Failure::Checks(failed));
    }
    Ok(())
}

fn run_metrics(m: MetricsCommand) -> std::result::Result<(), Failure> {
    match m {
        MetricsCommand::Rand { truth, presence, threshold } => {
            let t = io::read_factor_table(&truth)?;
            let p = io::read_factor_table(&presence)?;
            if t.ids != p.ids {
                return Err(Error::Shape("truth and presence tables list different subjects".into()).into());
            }
            let truth_sets: Vec<Vec<bool>> =
                (0..t.data.ncols()).map(|k| metrics::membership(&t.data, k, threshold)).collect();
            let non_null = metrics::non_null_factors(&p.data, threshold);
            let est: Vec<Vec<bool>> = non_null.iter().map(|&k| metrics::membership(&p.data, k, threshold)).collect();
            let ri = metrics::matched_rand_indices(&truth_sets, &est)?;
            print_line(json!({
                "metric": "rand_index",
                "non_null_factors": non_null.iter().map(|k| k + 1).collect::<Vec<_>>(),
                "values": ri,
            }));
        }
        MetricsCommand::Mse { estimate, truth } => {
            let e = io::read_probabilities(&estimate)?;
            let t = io::read_probabilities(&truth)?;
            if e.ids != t.ids {
                return Err(Error::Shape("probability tables list different sites".into()).into());
            }
            print_line(json!({ "metric": "mse", "value": metrics::prediction_mse(&e.data, &t.data)? }));
        }
        MetricsCommand::Dic { fit } => {
            let (meta, data, chain) = load_fit(&fit)?;
            let d = match build_model(&data, &meta.config)? {
                Model::Multinomial(mut m) => metrics::dic(&chain, &mut m)?,
                Model::Negbin(mut m) => metrics::dic(&chain, &mut m)?,
            };
            print_line(json!({
                "metric": "dic",
                "dic": d.dic,
                "mean_deviance": d.mean_deviance,
                "plugin_deviance": d.plugin_deviance,
                "p_d": d.p_d,
            }));
        }
    }
    Ok(())
}

fn print_config() -> std::result::Result<(), Failure> {
    let text = RunConfig::default().to_toml_string()?;
    std::io::stdout().write_all(text.as_bytes())?;
    Ok(())
}
