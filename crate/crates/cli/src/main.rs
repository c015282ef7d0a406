use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gdp::config::RunConfig;
use gdp::gradsuite::{run_suite, FD_TOLERANCE};
use gdp::pipeline::{
    ablate, emit_report, evaluate, format_ablation, generate, initial_params, run_finetune, run_pretrain, save_model,
    write_evaluation, write_generations, write_synth, Prepared,
};
use gdp::tensor::ParamStore;
use gdp::training::{load_checkpoint, LoadOptions, RunDir};
use gdp::Error;

#[derive(Parser, Debug)]
#[command(name = "gdp", version, about = "Multimodal EHR encoder-decoder: data, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic cohort as JSONL.
    Synth,
    /// Fit vocabulary, statistics and tokenizer; write encoded timelines.
    Preprocess,
    /// Generative pretraining with the auxiliary objectives.
    Pretrain,
    /// Multi-task fine-tuning with progressive unfreezing.
    Finetune,
    /// Score the test split and write the metric report.
    Evaluate,
    /// Generate summaries for the test split next to their references.
    Generate,
    /// Finite-difference checks of every operation and the full losses.
    Gradcheck {
        /// Entries probed per parameter tensor in the whole-model checks.
        #[arg(long, default_value_t = 4)]
        per_tensor: usize,
    },
    /// Pretraining-objective ablation matrix.
    Ablate {
        /// Number of consecutive seeds starting at the run seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
}

fn resolve_config(cli: &Cli) -> gdp::Result<RunConfig> {
    let mut overrides = cli.set.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    match &cli.config {
        Some(p) => RunConfig::load(p, &overrides),
        None => RunConfig::resolve("", &overrides),
    }
}

fn stage_dir(run: &Path, stage: &str, cfg: &RunConfig) -> gdp::Result<RunDir> {
    let dir = RunDir::create(&run.join(stage))?;
    dir.write("config.txt", &cfg.snapshot())?;
    Ok(dir)
}

fn load_into(path: &Path, store: &mut ParamStore<f32>, cfg: &RunConfig) -> gdp::Result<()> {
    let opts = LoadOptions {
        init_heads_fresh: cfg.train.init_heads_fresh,
        seed: cfg.seed,
    };
    load_checkpoint(path, store, opts, &cfg.train).map(|_| ())
}

/// Model for evaluation: fine-tuned, else pretrained.
fn trained_model(cfg: &RunConfig, run: &Path) -> gdp::Result<ParamStore<f32>> {
    let candidates = [run.join("finetune/best.ckpt"), run.join("pretrain/best.ckpt")];
    let path = candidates
        .iter()
        .find(|p| p.exists())
        .ok_or_else(|| Error::MissingFiles(candidates.to_vec()))?;
    log::info!("loading {}", path.display());
    let mut store = gdp::model::init_params(&cfg.model, cfg.seed)?;
    load_into(path, &mut store, cfg)?;
    Ok(store)
}

fn run(cli: &Cli) -> gdp::Result<bool> {
    let cfg = resolve_config(cli)?;
    let run = cli.run_dir.as_path();
    std::fs::create_dir_all(run).map_err(|e| Error::Io {
        path: run.to_path_buf(),
        source: e,
    })?;
    match &cli.command {
        Command::Synth => {
            let path = write_synth(&cfg, run)?;
            println!("wrote {} admissions to {}", cfg.data.synth_admissions, path.display());
        }
        Command::Preprocess => {
            let dir = stage_dir(run, "preprocess", &cfg)?;
            let data = Prepared::for_run(&cfg, run)?;
            data.save_encoded(&dir.root)?;
            println!(
                "encoded {} / {} / {} admissions; tokenizer vocabulary {}",
                data.train.len(),
                data.val.len(),
                data.test.len(),
                data.artifacts.tokenizer.vocab_size()
            );
        }
        Command::Pretrain => {
            let dir = stage_dir(run, "pretrain", &cfg)?;
            let data = Prepared::for_run(&cfg, run)?;
            let mut store = initial_params(&cfg)?;
            let out = run_pretrain(&cfg, &data, &mut store, Some(&dir))?;
            save_model(&dir, &store, "pretrain")?;
            println!(
                "pretrained {} epochs, {} optimizer steps; best validation perplexity {:.4} at epoch {}",
                out.epochs_run, out.optimizer_steps, out.best_metric, out.best_epoch
            );
        }
        Command::Finetune => {
            let dir = stage_dir(run, "finetune", &cfg)?;
            let data = Prepared::for_run(&cfg, run)?;
            let mut store = initial_params(&cfg)?;
            let pretrained = run.join("pretrain/best.ckpt");
            if cfg.train.init_checkpoint.is_empty() && pretrained.exists() {
                load_into(&pretrained, &mut store, &cfg)?;
            }
            let out = run_finetune(&cfg, &data, &mut store, Some(&dir))?;
            save_model(&dir, &store, "finetune")?;
            println!(
                "fine-tuned {} epochs; best mean validation AUROC {:.4} at epoch {}",
                out.epochs_run, out.best_metric, out.best_epoch
            );
        }
        Command::Evaluate => {
            let data = Prepared::for_run(&cfg, run)?;
            let store = trained_model(&cfg, run)?;
            let eval = evaluate(&cfg, &store, &data.artifacts.tokenizer, &data.test, "gdp")?;
            let dir = RunDir::create(run)?;
            dir.write("config.txt", &cfg.snapshot())?;
            write_evaluation(&dir, &eval)?;
            let (text, _) = emit_report(run)?;
            print!("{text}");
        }
        Command::Generate => {
            let data = Prepared::for_run(&cfg, run)?;
            let store = trained_model(&cfg, run)?;
            let gens = generate(&cfg, &store, &data.artifacts.tokenizer, &data.test, cfg.eval.generate_limit)?;
            let path = run.join("generations.jsonl");
            write_generations(&path, &gens)?;
            println!("wrote {} generations to {}", gens.len(), path.display());
        }
        Command::Gradcheck { per_tensor } => {
            let entries = run_suite(cfg.seed, *per_tensor)?;
            let mut ok = true;
            for e in &entries {
                ok &= e.passed();
                println!("{:<32} {:>10.3e} {}", e.name, e.max_rel_error, if e.passed() { "ok" } else { "FAIL" });
            }
            println!("tolerance {FD_TOLERANCE:e}: {}", if ok { "all passed" } else { "failures" });
            return Ok(ok);
        }
        Command::Ablate { seeds } => {
            if *seeds == 0 {
                return Err(Error::Usage("--seeds must be at least 1".into()));
            }
            let list: Vec<u64> = (0..*seeds).map(|i| cfg.seed + i).collect();
            let rows = ablate(&cfg, &list)?;
            let text = format_ablation(&rows);
            let dir = stage_dir(run, "ablation", &cfg)?;
            dir.write("ablation.txt", &text)?;
            print!("{text}");
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ (Error::Usage(_) | Error::Config { .. })) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
