//! Command-line harness: dataset generation, the two training stages,
//! sampling, evaluation, plots, and the bundled mock judge endpoint.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

use uniref_core::backbone::{checkpoint, init_params, Instruction};
use uniref_core::flowmatch::train_sft;
use uniref_core::harness::{
    evaluate, load_config, plot_metrics, write_resolved_config, EvalOptions, HarnessError,
    RunConfig, RunDirLock,
};
use uniref_core::msgrpo::{train_rl, RolloutPrompt};
use uniref_core::rasters::{read_png, write_png};
use uniref_core::rewards::mock::MockJudgeServer;
use uniref_core::sampler::{sample, SampleConfig, SampleMode, SamplePrompt};
use uniref_core::taskgen::{
    gen_composition_sample, gen_dataset, gen_edit_sample, read_dataset, write_dataset, GenConfig,
    GeneratedSample, TaskKind,
};

#[derive(Parser)]
#[command(name = "uniref", version, about = "Desk-scale multi-reference image generation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DataKind {
    Mixed,
    Edit,
    Compose,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CliSampleMode {
    Ode,
    Sde,
}

impl From<CliSampleMode> for SampleMode {
    fn from(mode: CliSampleMode) -> Self {
        match mode {
            CliSampleMode::Ode => SampleMode::Deterministic,
            CliSampleMode::Sde => SampleMode::Stochastic,
        }
    }
}

fn parse_override(raw: &str) -> Result<(String, String), String> {
    raw.split_once('=')
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| format!("override `{raw}` is not key.path=value"))
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config leaf by dotted path, e.g. --set sft.steps=500.
    #[arg(long = "set", value_parser = parse_override)]
    set: Vec<(String, String)>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        Ok(load_config(self.config.as_deref(), &self.set)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of editing and composition samples.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "mixed")]
        kind: DataKind,
    },
    /// Supervised training with the pixel-budget curriculum.
    TrainSft {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from a checkpoint instead of fresh initialization.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Group-relative RL from an SFT checkpoint.
    TrainRl {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Prompts per phase drawn from this dataset; generated from the
        /// seed when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Pool size per phase when prompts are generated.
        #[arg(long, default_value_t = 50)]
        prompt_pool: usize,
    },
    /// Generate one image from references and an instruction.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        refs: Vec<PathBuf>,
        /// Instruction text, e.g. "PLACE REF_1 CELL_TL PLACE REF_2 CELL_BR".
        #[arg(long)]
        instruction: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "ode")]
        mode: CliSampleMode,
        #[arg(long, default_value_t = 25)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.5)]
        noise_level: f64,
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Pixel budget for the references (0 disables rescaling).
        #[arg(long, default_value_t = 1024)]
        budget: u64,
    },
    /// Evaluate a checkpoint over a dataset with the configured judge.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Sample stochastically instead of the deterministic default.
        #[arg(long)]
        stochastic: bool,
    },
    /// Render SVG charts from metrics files.
    Plot {
        #[arg(long, num_args = 1.., required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the judge wire protocol locally via the programmatic judge.
    JudgeMock {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "127.0.0.1:8901")]
        addr: String,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(error) = run(cli) {
        eprintln!("error: {error:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            config,
            count,
            seed,
            out,
            kind,
        } => gen_data(config, count, seed, out, kind),
        Command::TrainSft {
            config,
            dataset,
            out,
            seed,
            ckpt,
        } => train_sft_cmd(config, dataset, out, seed, ckpt),
        Command::TrainRl {
            config,
            ckpt,
            out,
            seed,
            dataset,
            prompt_pool,
        } => train_rl_cmd(config, ckpt, out, seed, dataset, prompt_pool),
        Command::Sample {
            ckpt,
            refs,
            instruction,
            out,
            mode,
            steps,
            seed,
            noise_level,
            size,
            budget,
        } => sample_cmd(
            ckpt,
            refs,
            instruction,
            out,
            mode,
            steps,
            seed,
            noise_level,
            size,
            budget,
        ),
        Command::Eval {
            config,
            ckpt,
            dataset,
            out,
            seed,
            stochastic,
        } => eval_cmd(config, ckpt, dataset, out, seed, stochastic),
        Command::Plot { metrics, out } => {
            let charts = plot_metrics(&metrics, &out)?;
            for chart in charts {
                println!("{}", chart.display());
            }
            Ok(())
        }
        Command::JudgeMock { config, addr } => {
            let config = config.load()?;
            let server = MockJudgeServer::start(&addr, config.judge_config.clone())
                .map_err(HarnessError::from)?;
            println!("{}", server.url());
            println!("serving POST /v1/judge; press Ctrl-C to stop");
            loop {
                std::thread::sleep(std::time::Duration::from_secs(3600));
            }
        }
    }
}

fn init_workers(config: &RunConfig) {
    uniref_core::harness::init_worker_pool(config.workers);
}

fn gen_data(
    config: ConfigArgs,
    count: usize,
    seed: Option<u64>,
    out: PathBuf,
    kind: DataKind,
) -> Result<()> {
    let mut run = config.load()?;
    if let Some(seed) = seed {
        run.seed = seed;
    }
    let gen = match kind {
        DataKind::Mixed => run.gen,
        DataKind::Edit => GenConfig {
            edit_fraction: 1.0,
            ..run.gen
        },
        DataKind::Compose => GenConfig {
            edit_fraction: 0.0,
            ..run.gen
        },
    };
    let samples = gen_dataset(run.seed, count, &gen);
    let manifest = write_dataset(&samples, &out, run.sft.patch_pixels)?;
    println!(
        "wrote {} records to {}",
        manifest.records.len(),
        out.display()
    );
    Ok(())
}

fn require_dataset(flag: Option<PathBuf>, config: &RunConfig) -> Result<PathBuf> {
    flag.or_else(|| config.dataset.clone())
        .context("no dataset directory: pass --dataset or set `dataset` in the config")
}

fn require_out(flag: Option<PathBuf>, config: &RunConfig) -> Result<PathBuf> {
    flag.or_else(|| config.out_dir.clone())
        .context("no output directory: pass --out or set `out_dir` in the config")
}

fn train_sft_cmd(
    config: ConfigArgs,
    dataset: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    ckpt: Option<PathBuf>,
) -> Result<()> {
    let mut run = config.load()?;
    if let Some(seed) = seed {
        run.seed = seed;
        run.sft.seed = seed;
    }
    let dataset_dir = require_dataset(dataset, &run)?;
    let out_dir = require_out(out, &run)?;
    init_workers(&run);
    let _lock = RunDirLock::acquire(&out_dir)?;
    write_resolved_config(&out_dir, &run)?;

    let (generated, _) = read_dataset(&dataset_dir)?;
    let samples: Vec<_> = generated.into_iter().map(|g| g.sample).collect();
    let params = match ckpt {
        Some(path) => checkpoint::load(&path)?.0,
        None => init_params(&run.model, run.seed)?,
    };
    let outcome = train_sft(&run.sft, &samples, params, Some(&out_dir))?;
    let last = outcome.metrics.last().expect("at least one step");
    println!(
        "trained {} steps; final loss {:.4}; checkpoints: {}",
        run.sft.steps,
        last.loss,
        outcome
            .checkpoints
            .last()
            .map(|p| p.display().to_string())
            .unwrap_or_default()
    );
    Ok(())
}

fn prompt_pools(
    run: &RunConfig,
    dataset: Option<PathBuf>,
    pool: usize,
) -> Result<Vec<Vec<RolloutPrompt>>> {
    let from_dataset: Option<Vec<GeneratedSample>> = match dataset {
        Some(dir) => Some(read_dataset(&dir)?.0),
        None => None,
    };
    let mut pools = Vec::new();
    for (phase_index, phase) in run.rl.phases.iter().enumerate() {
        let prompts: Vec<RolloutPrompt> = match &from_dataset {
            Some(samples) => samples
                .iter()
                .enumerate()
                .filter(|(_, g)| g.kind == phase.kind)
                .map(|(i, g)| RolloutPrompt::from_generated(format!("ds_{i:06}"), g))
                .collect(),
            None => (0..pool)
                .map(|i| {
                    let mut rng = uniref_core::seeding::derive_rng(
                        run.seed,
                        "rl.prompt_pool",
                        phase_index as u64,
                        i as u64,
                    );
                    let g = match phase.kind {
                        TaskKind::Compose => {
                            gen_composition_sample(&mut rng, (run.gen.k_min, run.gen.k_max))
                        }
                        TaskKind::Edit => gen_edit_sample(&mut rng),
                    };
                    RolloutPrompt::from_generated(format!("gen_{phase_index}_{i:06}"), &g)
                })
                .collect(),
        };
        if phase.steps > 0 && prompts.is_empty() {
            bail!(
                "phase {phase_index} ({}) has no prompts of its kind",
                phase.kind
            );
        }
        pools.push(prompts);
    }
    Ok(pools)
}

fn train_rl_cmd(
    config: ConfigArgs,
    ckpt: PathBuf,
    out: Option<PathBuf>,
    seed: Option<u64>,
    dataset: Option<PathBuf>,
    prompt_pool: usize,
) -> Result<()> {
    let mut run = config.load()?;
    if let Some(seed) = seed {
        run.seed = seed;
        run.rl.seed = seed;
    }
    let out_dir = require_out(out, &run)?;
    init_workers(&run);
    let _lock = RunDirLock::acquire(&out_dir)?;
    write_resolved_config(&out_dir, &run)?;

    let (params, sft_step) = checkpoint::load(&ckpt)?;
    let pools = prompt_pools(&run, dataset, prompt_pool)?;
    let judge = run.build_judge()?;
    let run_id = format!("rl-{}-{}", run.seed, sft_step);
    let outcome = train_rl(&run.rl, &pools, &params, judge.as_ref(), Some(&out_dir), &run_id)?;
    if let Some(last) = outcome.metrics.last() {
        println!(
            "finished {} steps; last mean reward {:.3}; final checkpoint {}",
            outcome.metrics.len(),
            last.mean_reward,
            outcome
                .checkpoints
                .last()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        );
    } else {
        println!("no RL steps configured; parameters unchanged");
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sample_cmd(
    ckpt: PathBuf,
    refs: Vec<PathBuf>,
    instruction: String,
    out: PathBuf,
    mode: CliSampleMode,
    steps: usize,
    seed: u64,
    noise_level: f64,
    size: usize,
    budget: u64,
) -> Result<()> {
    let (params, _) = checkpoint::load(&ckpt)?;
    let references: Vec<_> = refs
        .iter()
        .map(|p| read_png(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<_>>()?;
    let instruction = Instruction::parse(&instruction)?;
    let patch = ((params.config.token_channels / 3) as f64).sqrt() as usize;
    let config = SampleConfig {
        steps,
        mode: mode.into(),
        noise_level,
        target_height: size,
        target_width: size,
        patch_pixels: patch,
        reference_budget: (budget > 0).then_some(budget),
    };
    let mut rng = uniref_core::seeding::derive_rng(seed, "cli.sample", 0, 0);
    let (image, _) = sample(
        &params,
        &SamplePrompt {
            references: &references,
            instruction: &instruction,
        },
        &config,
        &mut rng,
    )?;
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_png(&image, &out)?;
    println!("{}", out.display());
    Ok(())
}

fn eval_cmd(
    config: ConfigArgs,
    ckpt: PathBuf,
    dataset: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    stochastic: bool,
) -> Result<()> {
    let mut run = config.load()?;
    if let Some(seed) = seed {
        run.seed = seed;
    }
    let dataset_dir = dataset
        .or_else(|| run.eval_dataset.clone())
        .or_else(|| run.dataset.clone())
        .context("no dataset directory: pass --dataset or set `eval_dataset` in the config")?;
    let out_dir = require_out(out, &run)?;
    init_workers(&run);
    let _lock = RunDirLock::acquire(&out_dir)?;
    write_resolved_config(&out_dir, &run)?;

    let (params, _) = checkpoint::load(&ckpt)?;
    let (generated, _) = read_dataset(&dataset_dir)?;
    let judge = run.build_judge()?;
    let options = EvalOptions {
        steps: run.rl.steps_t,
        mode: if stochastic {
            SampleMode::Stochastic
        } else {
            SampleMode::Deterministic
        },
        noise_level: run.rl.noise_level,
        seed: run.seed,
        patch_pixels: run.sft.patch_pixels,
        reference_budget: run.rl.reference_budget,
    };
    let report = evaluate(&params, &generated, judge.as_ref(), &options)?;
    std::fs::write(
        out_dir.join("eval_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    std::fs::write(out_dir.join("eval_table.txt"), report.table())?;
    print!("{}", report.table());
    Ok(())
}
