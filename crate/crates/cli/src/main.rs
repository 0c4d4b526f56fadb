use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dlvm::sim::{
    default_generator, draw_participants, evaluate_runs, generate_population, run_cohort, run_protocol, OutputRanges,
    ProtocolConfig, ProtocolKind, SimConfig, TbCounts,
};
use dlvm::{io, Checkpoint, DecoderWeights, Dims, ThetaVector, TrainConfig};
use dlvm_service::ServiceConfig;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "dlvm", version, about = "Latent variable models for adaptive cognitive testing")]
struct Cli {
    /// JSON file with `train`, `sim` and `service` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a decoder to battery data.
    Train(TrainArgs),
    /// Draw synthetic participants and write their battery trials.
    SimulatePopulation(SimulateArgs),
    /// Run one simulated adaptive session and write its log.
    RunSession(SessionArgs),
    /// Score a protocol against ground truth on a synthetic cohort.
    Evaluate(EvaluateArgs),
    /// Evaluate the adaptive protocol over several update weights.
    Sweep(SweepArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    latent_dim: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Trials as CSV or JSON. Without it a synthetic training cohort is used.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 96)]
    participants: usize,
    #[arg(long, default_value_t = 11)]
    generator_seed: u64,
    #[command(flatten)]
    model: ModelArgs,
    /// Output directory.
    #[arg(long, default_value = "model")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Battery {
    Standard,
    Training,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 96)]
    participants: usize,
    #[arg(long, value_enum, default_value = "training")]
    battery: Battery,
    #[arg(long, default_value_t = 11)]
    generator_seed: u64,
    /// Trials file; `.csv` or `.json`.
    #[arg(long, default_value = "trials.csv")]
    out: PathBuf,
    /// Also write the true parameter vectors here.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Protocol {
    Tb,
    Ml,
    Random,
}

impl From<Protocol> for ProtocolKind {
    fn from(p: Protocol) -> Self {
        match p {
            Protocol::Tb => ProtocolKind::Tb,
            Protocol::Ml => ProtocolKind::Ml,
            Protocol::Random => ProtocolKind::Random,
        }
    }
}

#[derive(Args)]
struct CohortArgs {
    /// Decoder checkpoint; defaults to the generator itself.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "ml")]
    protocol: Protocol,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long, default_value_t = 11)]
    generator_seed: u64,
    /// KL weight of the per-response latent update.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Args)]
struct SessionArgs {
    #[command(flatten)]
    cohort: CohortArgs,
    #[arg(long, default_value_t = 0)]
    participant_seed: u64,
    #[arg(long, default_value = "session")]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    cohort: CohortArgs,
    #[arg(long, default_value_t = 20)]
    participants: usize,
    /// Run every participant twice and report test-retest agreement.
    #[arg(long)]
    retest: bool,
    #[arg(long, default_value = "evaluation")]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.01, 0.1, 1.0])]
    lambda: Vec<f64>,
    #[arg(long, default_value_t = 20)]
    participants: usize,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long, default_value_t = 11)]
    generator_seed: u64,
    #[arg(long, default_value = "sweep.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    bind: Option<std::net::SocketAddr>,
    #[arg(long)]
    static_dir: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct FileConfig {
    train: TrainConfig,
    sim: SimConfig,
    service: ServiceConfig,
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(FileConfig::default()),
    }
}

fn load_model(path: &Path) -> Result<DecoderWeights> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Checkpoint::from_json(&text)?.to_weights()?)
}

fn theta_header(first: &str) -> Vec<String> {
    std::iter::once(first.to_string()).chain((0..dlvm::THETA_DIM).map(|j| format!("theta_{j}"))).collect()
}

fn write_theta_rows<K: ToString>(path: &Path, key: &str, rows: impl IntoIterator<Item = (K, ThetaVector)>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(theta_header(key))?;
    for (k, theta) in rows {
        w.write_record(std::iter::once(k.to_string()).chain(theta.0.iter().map(|v| v.to_string())))?;
    }
    w.flush()?;
    Ok(())
}

fn sim_config(base: &SimConfig, args: &CohortArgs, seed: u64) -> SimConfig {
    let mut cfg = *base;
    cfg.protocol = ProtocolConfig { kind: args.protocol.into(), seed, ..cfg.protocol };
    if let Some(b) = args.budget {
        cfg.protocol.budget = b;
    }
    if let Some(l) = args.lambda {
        cfg.mi.lambda = l;
    }
    if let Some(n) = args.iterations {
        cfg.mi.update_iterations = n;
    }
    cfg
}

fn model_or_generator(path: Option<&Path>, generator: &DecoderWeights) -> Result<DecoderWeights> {
    match path {
        Some(p) => load_model(p),
        None => Ok(generator.clone()),
    }
}

fn train(cfg: &FileConfig, seed: u64, args: TrainArgs) -> Result<()> {
    let data = match &args.data {
        Some(p) => io::read_trials(p)?,
        None => {
            let g = default_generator(args.generator_seed)?;
            generate_population(args.participants, &g, &TbCounts::training().items(), seed)?.0
        }
    };
    let mut tc = TrainConfig { seed, ..cfg.train };
    if let Some(v) = args.model.lambda {
        tc.lambda = v;
    }
    if let Some(v) = args.model.iterations {
        tc.iterations = v;
    }
    if let Some(v) = args.model.lr {
        tc.learning_rate = v;
    }
    if let Some(v) = args.model.latent_dim {
        tc.dims = Dims { latent: v, ..tc.dims };
    }
    let res = dlvm::train(&data, &tc)?;
    fs::create_dir_all(&args.out)?;
    let meta = serde_json::json!({ "config": tc, "participants": data.participants.len(), "trials": data.n_trials() });
    fs::write(args.out.join("model.json"), Checkpoint::from_weights(&res.weights, seed, meta).to_json()?)?;
    io::write_loss_trace_csv(&args.out.join("loss.csv"), &res.loss_trace)?;
    io::write_latents_json(&args.out.join("latents.json"), &data, &res.latents)?;
    println!(
        "trained on {} participants, {} trials; final loss {:.4}",
        data.participants.len(),
        data.n_trials(),
        res.loss_trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn simulate(seed: u64, args: SimulateArgs) -> Result<()> {
    let g = default_generator(args.generator_seed)?;
    let counts = match args.battery {
        Battery::Standard => TbCounts::default(),
        Battery::Training => TbCounts::training(),
    };
    let (data, participants) = generate_population(args.participants, &g, &counts.items(), seed)?;
    io::write_trials(&args.out, &data)?;
    if let Some(path) = &args.truth {
        let rows = participants.iter().map(|p| Ok((p.id.clone(), p.theta(&g)?))).collect::<dlvm::Result<Vec<_>>>()?;
        write_theta_rows(path, "participant_id", rows)?;
    }
    println!("wrote {} trials for {} participants", data.n_trials(), participants.len());
    Ok(())
}

fn run_session(cfg: &FileConfig, seed: u64, args: SessionArgs) -> Result<()> {
    if args.cohort.protocol == Protocol::Tb {
        bail!("run-session drives the adaptive protocols; use evaluate for the battery");
    }
    let g = default_generator(args.cohort.generator_seed)?;
    let model = model_or_generator(args.cohort.model.as_deref(), &g)?;
    let participant = &draw_participants(1, args.participant_seed, "s")[0];
    let sc = sim_config(&cfg.sim, &args.cohort, seed);
    let run = run_protocol(participant, &g, Some(&model), &sc, 0)?;
    fs::create_dir_all(&args.out)?;
    io::write_session_log(&args.out.join("session.jsonl"), &run.log)?;
    write_theta_rows(
        &args.out.join("estimates.csv"),
        "items",
        run.path.iter().enumerate().map(|(i, t)| (run.path_start + i, *t)),
    )?;
    let truth = participant.theta(&g)?;
    println!("items {}", run.trials.len());
    println!("estimate {:?}", run.theta.0);
    println!("truth    {:?}", truth.0);
    println!("summed normalized error {:.4}", OutputRanges::default().summed_error(&run.theta, &truth));
    Ok(())
}

fn evaluate(cfg: &FileConfig, seed: u64, args: EvaluateArgs) -> Result<()> {
    let g = default_generator(args.cohort.generator_seed)?;
    let model = model_or_generator(args.cohort.model.as_deref(), &g)?;
    let participants = draw_participants(args.participants, seed, "e");
    let truth = participants.iter().map(|p| p.theta(&g)).collect::<dlvm::Result<Vec<_>>>()?;
    let sc = sim_config(&cfg.sim, &args.cohort, seed);
    let runs = run_cohort(&participants, &g, Some(&model), &sc, 0)?;
    let retest = if args.retest { Some(run_cohort(&participants, &g, Some(&model), &sc, 1)?) } else { None };
    let ranges = OutputRanges::default();
    let report = evaluate_runs(&runs, &truth, retest.as_deref(), &ranges)?;

    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
    let mut w = csv::Writer::from_path(args.out.join("convergence.csv"))?;
    w.write_record(["items", "summed_rmse"])?;
    for (n, v) in report.convergence.item_counts.iter().zip(&report.convergence.summed_rmse) {
        w.write_record([n.to_string(), v.to_string()])?;
    }
    w.flush()?;
    write_theta_rows(&args.out.join("estimates.csv"), "participant_id", runs.iter().map(|r| (r.participant_id.clone(), r.theta)))?;
    println!(
        "{:?}: {} participants, {} items each, cohort rmse {:.4}",
        report.kind, report.n_participants, report.items_per_participant, report.rmse_to_truth
    );
    if let Some(rt) = &report.retest {
        for c in rt {
            println!("slot {:2}: r {:.3} icc {:.3}", c.slot, c.pearson, c.icc);
        }
    }
    Ok(())
}

fn sweep(cfg: &FileConfig, seed: u64, args: SweepArgs) -> Result<()> {
    let g = default_generator(args.generator_seed)?;
    let model = model_or_generator(args.model.as_deref(), &g)?;
    let participants = draw_participants(args.participants, seed, "w");
    let truth = participants.iter().map(|p| p.theta(&g)).collect::<dlvm::Result<Vec<_>>>()?;
    let ranges = OutputRanges::default();
    let mut w = csv::Writer::from_path(&args.out)?;
    w.write_record(["lambda", "protocol", "rmse"])?;
    for &lambda in &args.lambda {
        for protocol in [Protocol::Ml, Protocol::Random] {
            let cohort = CohortArgs {
                model: None,
                protocol,
                budget: args.budget,
                generator_seed: args.generator_seed,
                lambda: Some(lambda),
                iterations: None,
            };
            let runs = run_cohort(&participants, &g, Some(&model), &sim_config(&cfg.sim, &cohort, seed), 0)?;
            let report = evaluate_runs(&runs, &truth, None, &ranges)?;
            let name = format!("{:?}", report.kind).to_lowercase();
            println!("lambda {lambda}: {name} rmse {:.4}", report.rmse_to_truth);
            w.write_record([lambda.to_string(), name, report.rmse_to_truth.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn serve(cfg: FileConfig, args: ServeArgs) -> Result<()> {
    let mut sc = cfg.service;
    sc.model_path = args.model.or(sc.model_path);
    sc.data_dir = args.data_dir.unwrap_or(sc.data_dir);
    sc.bind = args.bind.unwrap_or(sc.bind);
    sc.static_dir = args.static_dir.or(sc.static_dir);
    tokio::runtime::Runtime::new()?
        .block_on(dlvm_service::serve(sc))
        .map_err(|e| anyhow::anyhow!(e))
}

fn main() -> Result<()> {
    tracing_subscriber::fmt().with_env_filter(tracing_subscriber::EnvFilter::from_default_env()).init();
    let cli = Cli::parse();
    let cfg = load_config(cli.config.as_deref())?;
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Train(a) => train(&cfg, seed, a),
        Command::SimulatePopulation(a) => simulate(seed, a),
        Command::RunSession(a) => run_session(&cfg, seed, a),
        Command::Evaluate(a) => evaluate(&cfg, seed, a),
        Command::Sweep(a) => sweep(&cfg, seed, a),
        Command::Serve(a) => serve(cfg, a),
    }
}
