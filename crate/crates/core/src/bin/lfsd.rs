//! `lfsd`: pretrain, run, evaluate, report on and ablate lifelong sessions.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lifelong_diffusion::checkpoint::save_denoiser;
use lifelong_diffusion::config::{load_config, ExperimentConfig, Method};
use lifelong_diffusion::harness::{
    emit_report, evaluate_run, prepare_seed, read_metrics, run_experiment, run_id, run_matrix, write_metrics,
    RunManifest,
};
use lifelong_diffusion::sampler::sample;
use lifelong_diffusion::{rng, Error, Result};

#[derive(Parser)]
#[command(name = "lfsd", version, about = "Lifelong few-shot diffusion customization at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed; defaults to the first seed in the config (all of them for `ablate`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the base model and save it with its probe TA.
    Pretrain(Common),
    /// Run every session of one method and evaluate after each.
    Run {
        #[command(flatten)]
        common: Common,
        /// Overrides the config's `method`.
        #[arg(long)]
        method: Option<Method>,
    },
    /// Re-evaluate a finished run from its checkpoints and compare metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: Option<Method>,
    },
    /// Merge the manifests under `<out>/runs` into report tables.
    Report(Common),
    /// Run the method matrix over the config's seeds and write the report.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
}

fn config_of(common: &Common) -> Result<ExperimentConfig> {
    match &common.config {
        Some(path) => load_config(path),
        None => Ok(ExperimentConfig::default()),
    }
}

fn seed_of(common: &Common, config: &ExperimentConfig) -> u64 {
    common.seed.unwrap_or(config.seeds[0])
}

fn manifests_under(out: &Path, seed: Option<u64>) -> Result<Vec<RunManifest>> {
    let runs = out.join("runs");
    let mut manifests = Vec::new();
    if runs.is_dir() {
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(&runs)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        dirs.sort();
        for dir in dirs {
            let path = dir.join("manifest.json");
            if path.is_file() {
                let m = RunManifest::load(&path)?;
                if seed.is_none_or(|s| s == m.seed) {
                    manifests.push(m);
                }
            }
        }
    }
    Ok(manifests)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(common) => {
            let config = config_of(&common)?;
            let seed = seed_of(&common, &config);
            let pre = prepare_seed(&config, seed)?;
            let path = common.out.join("pretrain").join(format!("seed{seed}.lfsd"));
            std::fs::create_dir_all(path.parent().unwrap())?;
            save_denoiser(&pre.model, &path)?;
            let sched = config.train_schedule()?;
            for token in config.base_tokens() {
                let mut r = rng::stream(seed, &format!("eval/0/{token}"));
                let gen = sample(&pre.model, token, &sched, config.icgen.guidance, &mut r, config.eval.n_samples)?;
                let ta = lifelong_diffusion::eval::text_alignment(&pre.probe, &gen, token)?;
                println!("token {token}: TA {ta:.4}");
            }
            println!("saved {} ({:.1}s)", path.display(), pre.pretrain_s);
        }
        Command::Run { common, method } => {
            let config = config_of(&common)?;
            let seed = seed_of(&common, &config);
            let method = method.unwrap_or(config.method);
            let outcome = run_experiment(&config, method, seed, Some(&common.out))?;
            println!("{}", outcome.manifest.manifest_path().display());
            if let Some(f) = outcome.manifest.failure {
                return Err(Error::Training { step: 0, message: f });
            }
        }
        Command::Eval { common, method } => {
            let config = config_of(&common)?;
            let seed = seed_of(&common, &config);
            let id = run_id(method.unwrap_or(config.method), seed);
            let manifest = RunManifest::load(&common.out.join("runs").join(&id).join("manifest.json"))?;
            let rows = evaluate_run(&config, &manifest)?;
            let dir = manifest.run_dir.join("report");
            std::fs::create_dir_all(&dir)?;
            let path = dir.join("metrics_eval.csv");
            write_metrics(&path, &rows)?;
            if rows != read_metrics(&manifest.metrics_csv)? {
                return Err(Error::Protocol(format!(
                    "re-evaluation of {id} differs from {}",
                    manifest.metrics_csv.display()
                )));
            }
            println!("{} matches {}", path.display(), manifest.metrics_csv.display());
        }
        Command::Report(common) => {
            let manifests = manifests_under(&common.out, common.seed)?;
            let files = emit_report(&manifests, &common.out.join("report"))?;
            println!("{}", files.merged.display());
        }
        Command::Ablate { common, workers } => {
            let config = config_of(&common)?;
            let seeds = common.seed.map_or_else(|| config.seeds.clone(), |s| vec![s]);
            let outcomes = run_matrix(&config, &config.methods, &seeds, Some(&common.out), workers)?;
            let manifests: Vec<RunManifest> = outcomes.into_iter().map(|o| o.manifest).collect();
            let files = emit_report(&manifests, &common.out.join("report"))?;
            for m in manifests.iter().filter(|m| !m.completed) {
                eprintln!("{} failed: {}", m.run_id, m.failure.as_deref().unwrap_or("unknown"));
            }
            println!("{}", files.summary.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lfsd: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
