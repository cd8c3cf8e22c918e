use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dfc_core::envs::{generate_dataset, Dataset, ScriptedPolicy};
use dfc_core::harness::{chain_policy_evaluation, emit_plots, evaluate, final_score, train, AgentConfig, Variant};
use dfc_core::nn::checkpoint::Checkpoint;
use dfc_core::policy::OneStepPolicy;

/// Output root used when `--out-dir` is not given.
const OUT_ENV: &str = "DFC_OUT_DIR";

#[derive(Parser)]
#[command(name = "dfc", version, about = "Distributional flow critic experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (`key = value` lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured variant: dfc, fc, dc or fql.
    #[arg(long)]
    variant: Option<Variant>,
    /// Output directory; defaults to $DFC_OUT_DIR, then `runs`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the scripted offline dataset for the configured environment.
    GenData(Common),
    /// Train an agent offline, then online, writing metrics and a checkpoint.
    Train(Common),
    /// Evaluate the one-step policy stored in a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out-dir>/checkpoint.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to the configured `eval_episodes`.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Render one SVG learning curve per metric column.
    Plot {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out-dir>/metrics.csv`.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Compare the critic against Monte-Carlo returns on the chain MDP under a
    /// frozen scripted policy.
    OracleCheck {
        #[command(flatten)]
        common: Common,
        /// Frozen policy: uniform, risky or safe.
        #[arg(long, default_value = "uniform")]
        policy: String,
        /// Gradient steps at which the critic is measured.
        #[arg(long, value_delimiter = ',', default_value = "2000,4000,8000,16000")]
        epochs: Vec<usize>,
    },
}

impl Common {
    fn config(&self) -> Result<AgentConfig> {
        let mut cfg = match &self.config {
            Some(p) => AgentConfig::load(p)?,
            None => AgentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(v) = self.variant {
            cfg.variant = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }
}

fn dataset_path(cfg: &AgentConfig, out_dir: &Path) -> PathBuf {
    cfg.dataset.clone().unwrap_or_else(|| out_dir.join(format!("{}.dataset", cfg.env)))
}

fn gen_data(common: &Common) -> Result<()> {
    let mut cfg = common.config()?;
    if let Some(s) = common.seed {
        cfg.dataset_seed = s;
    }
    let out = common.out_dir();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let path = dataset_path(&cfg, &out);
    let ds = generate_dataset(cfg.env, &cfg.env.default_mix(), cfg.dataset_size, cfg.dataset_seed);
    ds.write(&path)?;
    println!("wrote {} transitions to {}", ds.len(), path.display());
    Ok(())
}

fn run_train(common: &Common) -> Result<()> {
    let cfg = common.config()?;
    let out = common.out_dir();
    let path = dataset_path(&cfg, &out);
    if !path.exists() {
        bail!("dataset {} not found; run `dfc gen-data` first", path.display());
    }
    let ds = Dataset::read(&path)?;
    let run = train(&cfg, &ds, &out)?;
    for r in &run.rows {
        println!(
            "step {:>7} {:<7} success {:.3} return {:.2}",
            r.step,
            r.phase.as_str(),
            r.eval_success_rate,
            r.eval_mean_return
        );
    }
    if let Some(score) = final_score(&run.rows) {
        println!("final score (mean of last three evaluations): {score:.3}");
    }
    println!("metrics: {}", run.metrics_path.display());
    println!("checkpoint: {}", run.checkpoint_path.display());
    Ok(())
}

fn run_eval(common: &Common, checkpoint: Option<&Path>, episodes: Option<usize>) -> Result<()> {
    let cfg = common.config()?;
    let out = common.out_dir();
    let ck_path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| out.join("checkpoint.bin"));
    let ck = Checkpoint::read(&ck_path)?;
    let net = ck.get("actor").context("checkpoint has no `actor` network")?.clone();
    let actor = OneStepPolicy::from_mlp(net, cfg.lr_actor);
    let n = episodes.unwrap_or(cfg.eval_episodes);
    let report = evaluate(
        &|s: &[f64], rng: &mut dyn rand::RngCore| Ok(actor.sample(&dfc_core::Tensor::row(s), rng)?.into_data()),
        cfg.env,
        n,
        cfg.seed,
    )?;
    let csv_path = out.join("eval.csv");
    let mut text = String::from("episode,return,success\n");
    for (i, (r, s)) in report.returns.iter().zip(&report.successes).enumerate() {
        text.push_str(&format!("{i},{r},{}\n", u8::from(*s)));
    }
    std::fs::create_dir_all(&out)?;
    std::fs::write(&csv_path, text)?;
    println!(
        "success rate {:.3}, mean return {:.3} over {n} episodes",
        report.success_rate, report.mean_return
    );
    println!("per-episode results: {}", csv_path.display());
    Ok(())
}

fn run_plot(common: &Common, metrics: Option<&Path>) -> Result<()> {
    let out = common.out_dir();
    let metrics = metrics.map(Path::to_path_buf).unwrap_or_else(|| out.join("metrics.csv"));
    for p in emit_plots(&metrics, &out)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn run_oracle_check(common: &Common, policy: &str, epochs: &[usize]) -> Result<()> {
    let mut cfg = common.config()?;
    cfg.env = dfc_core::envs::EnvKind::Chain;
    let policy = match policy {
        "uniform" => ScriptedPolicy::Uniform,
        "risky" => ScriptedPolicy::Constant(vec![0.5]),
        "safe" => ScriptedPolicy::Constant(vec![-0.5]),
        other => bail!("unknown policy `{other}` (expected uniform, risky or safe)"),
    };
    let out = common.out_dir();
    std::fs::create_dir_all(&out)?;
    let report = chain_policy_evaluation(&cfg, &policy, epochs)?;
    let header: Vec<String> = report.probes.iter().map(|p| format!("s{}_a{}", p.state, p.action_id())).collect();
    println!("{:>8} {}", "epoch", header.iter().map(|h| format!("{h:>8}")).collect::<String>());
    for (e, row) in report.epochs.iter().zip(&report.w1) {
        println!("{e:>8} {}", row.iter().map(|w| format!("{w:>8.4}")).collect::<String>());
    }
    report.write_w1_csv(&out.join("chain_w1.csv"))?;
    report.write_samples_csv(&out.join("chain_quantiles.csv"), cfg.m)?;
    if let Some(w) = report.final_max_w1() {
        println!(
            "worst final W1 {w:.4}; non-increasing over last three epochs: {}",
            report.tail_non_increasing(3)
        );
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Train(c) => run_train(c),
        Command::Eval {
            common,
            checkpoint,
            episodes,
        } => run_eval(common, checkpoint.as_deref(), *episodes),
        Command::Plot { common, metrics } => run_plot(common, metrics.as_deref()),
        Command::OracleCheck { common, policy, epochs } => run_oracle_check(common, policy, epochs),
    }
}
