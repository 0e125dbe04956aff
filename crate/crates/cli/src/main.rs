use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use graphnf::checkpoint::{save_model_p, save_model_u};
use graphnf::config::ExperimentConfig;
use graphnf::dataset::{generate_synthetic, load_bundle, make_splits, save_bundle, SyntheticConfig};
use graphnf::methods::{build_method, method_names, GraphNfSca};
use graphnf::pipeline::{
    evaluate_method, pretrained_p, pretrained_u, run_ablation, run_m_sweep, save_splits, train_p, train_u, write_file,
    write_log, write_report, Experiment, PipelineError, Variant,
};
use log::info;
use serde_json::json;

#[derive(Parser)]
#[command(name = "graphnf", version, about = "Graph neural field HRTF personalization and upsampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; every key has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory receiving every output of the command.
    #[arg(long)]
    output_dir: PathBuf,
    /// Bundle directory (overrides data.bundle).
    #[arg(long)]
    bundle: Option<PathBuf>,
    /// Split file from make-splits (overrides data.splits).
    #[arg(long)]
    splits: Option<PathBuf>,
    /// Global seed (overrides seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Threads for per-subject evaluation and fine-tuning (overrides jobs).
    #[arg(long)]
    jobs: Option<usize>,
    /// Config override as dotted.key=value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic bundle.
    GenSynth {
        /// TOML synthetic-generator config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory the bundle is written to.
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        directions: Option<usize>,
        /// Frequency bins per ear.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Write subject splits and the measurement subset as JSON.
    MakeSplits(Common),
    /// Pre-train the personalization network.
    TrainP(Common),
    /// Pre-train the upsampling network.
    TrainU(Common),
    /// Fine-tune the upsampling head for every test subject.
    Finetune(Common),
    /// Evaluate one method on the test subjects.
    Eval {
        #[command(flatten)]
        common: Common,
        /// One of graphnf, graphnf-sca, nn, sel-lsd, sel-itd, sel-ild, lininterp, hrtf-u.
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(method_names()))]
        method: String,
    },
    /// Compare module-integration variants, optionally sweeping the retrieval size.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of no-clue-no-fusion, clue-no-fusion, full, sca.
        #[arg(long, value_delimiter = ',', value_parser = parse_variant)]
        variants: Option<Vec<Variant>>,
        /// Comma-separated retrieval sizes to sweep instead of the variants.
        #[arg(long, value_delimiter = ',')]
        sweep_m: Option<Vec<usize>>,
    },
    /// Print a bundle summary.
    InspectBundle {
        #[arg(long)]
        bundle: PathBuf,
        /// Also write the summary as inspect.json here.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s).ok_or_else(|| format!("unknown variant `{s}`"))
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig, PipelineError> {
        let mut overrides = self.overrides.clone();
        let path = |p: &Path| format!("{:?}", p.display().to_string());
        if let Some(b) = &self.bundle {
            overrides.push(format!("data.bundle={}", path(b)));
        }
        if let Some(s) = &self.splits {
            overrides.push(format!("data.splits={}", path(s)));
        }
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        if let Some(j) = self.jobs {
            overrides.push(format!("jobs={j}"));
        }
        Ok(ExperimentConfig::load(self.config.as_deref(), &overrides)?)
    }

    /// Loads the experiment and records the resolved config next to the outputs.
    fn experiment(&self) -> Result<Experiment, PipelineError> {
        let cfg = self.config()?;
        create_dir(&self.output_dir)?;
        write_file(&self.output_dir.join("config.toml"), cfg.to_toml())?;
        Experiment::load(cfg)
    }
}

fn create_dir(dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))
}

fn gen_synth(
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    subjects: Option<usize>,
    directions: Option<usize>,
    k: Option<usize>,
) -> Result<(), PipelineError> {
    let mut cfg: SyntheticConfig = match config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| PipelineError::io(p, e))?;
            toml::from_str(&text).map_err(|e| PipelineError::Setup(format!("{}: {e}", p.display())))?
        }
        None => SyntheticConfig::default(),
    };
    cfg.seed = seed.unwrap_or(cfg.seed);
    cfg.subjects = subjects.unwrap_or(cfg.subjects);
    cfg.directions = directions.unwrap_or(cfg.directions);
    cfg.k = k.unwrap_or(cfg.k);
    let bundle = generate_synthetic(&cfg)?;
    create_dir(out)?;
    save_bundle(&bundle, out)?;
    info!("wrote {} subjects × {} directions to {}", bundle.subject_count(), bundle.direction_count(), out.display());
    Ok(())
}

fn inspect(bundle: &Path, out: Option<&Path>) -> Result<(), PipelineError> {
    let b = load_bundle(bundle)?;
    let summary = json!({
        "subjects": b.subject_count(),
        "directions": b.direction_count(),
        "K": b.k(),
        "sample_rate": b.sample_rate(),
        "has_hrirs": b.has_hrirs(),
        "taps": b.has_hrirs().then(|| b.taps()),
        "provenance": b.provenance(),
        "first_subjects": b.subjects().iter().take(5).collect::<Vec<_>>(),
    });
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    println!("{text}");
    if let Some(dir) = out {
        create_dir(dir)?;
        write_file(&dir.join("inspect.json"), text + "\n")?;
    }
    Ok(())
}

fn finetune(c: &Common) -> Result<(), PipelineError> {
    let exp = c.experiment()?;
    let (p, pers) = pretrained_p(&exp)?;
    let u = pretrained_u(&exp)?;
    let sca = GraphNfSca::new(p, pers, u, exp.stencils()?);
    let tuned = exp.per_test_subject(|s| Ok((s, sca.adapt(&exp, s)?)))?;
    let dir = c.output_dir.join("finetuned");
    create_dir(&dir)?;
    let mut log = String::from("subject,epoch,loss\n");
    for (s, ft) in &tuned {
        let id = exp.subject_id(*s);
        save_model_u(&ft.model, &dir.join(format!("model_u_{id}.ckpt")))?;
        for (e, l) in ft.epoch_losses.iter().enumerate() {
            log.push_str(&format!("{id},{},{l}\n", e + 1));
        }
    }
    write_file(&c.output_dir.join("finetune_log.csv"), log)
}

fn ablate(c: &Common, variants: Option<&[Variant]>, sweep: Option<&[usize]>) -> Result<(), PipelineError> {
    let exp = c.experiment()?;
    let reports = match sweep {
        Some(ms) => run_m_sweep(&exp, ms)?.into_iter().map(|(_, r)| r).collect::<Vec<_>>(),
        None => run_ablation(&exp, variants.unwrap_or(&Variant::ALL))?.into_iter().map(|(_, r)| r).collect(),
    };
    let mut table = String::from("method,mean_lsd_db,mean_ild_err_db,exceed_count\n");
    for r in &reports {
        write_report(r, &c.output_dir, &r.method)?;
        table.push_str(&format!("{},{},{},{}\n", r.method, r.mean_lsd, r.mean_ild_err, r.exceed_count()));
    }
    write_file(&c.output_dir.join("ablation.csv"), table)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::GenSynth { config, output_dir, seed, subjects, directions, k } => {
            gen_synth(config.as_deref(), &output_dir, seed, subjects, directions, k)
        }
        Command::MakeSplits(c) => {
            let cfg = c.config()?;
            let path = cfg.data.bundle.clone().ok_or_else(|| PipelineError::Setup("no bundle given".into()))?;
            let bundle = load_bundle(&path)?;
            let d = &cfg.data;
            let splits = make_splits(&bundle, d.fractions, d.measurements, d.split_seed)?;
            create_dir(&c.output_dir)?;
            write_file(&c.output_dir.join("config.toml"), cfg.to_toml())?;
            save_splits(&splits, &c.output_dir.join("splits.json"))
        }
        Command::TrainP(c) => {
            let exp = c.experiment()?;
            let (model, _, log) = train_p(&exp, exp.config.wiring(), exp.config.retrieval.m)?;
            save_model_p(&model, &c.output_dir.join("model_p.ckpt"))?;
            write_log(&log, &c.output_dir.join("train_p_log.csv"))
        }
        Command::TrainU(c) => {
            let exp = c.experiment()?;
            let (model, log) = train_u(&exp)?;
            save_model_u(&model, &c.output_dir.join("model_u.ckpt"))?;
            write_log(&log, &c.output_dir.join("train_u_log.csv"))
        }
        Command::Finetune(c) => finetune(&c),
        Command::Eval { common, method } => {
            let exp = common.experiment()?;
            let m = build_method(&method, &exp)?;
            let run = evaluate_method(&exp, m.as_ref())?;
            write_report(&run.report, &common.output_dir, &method)?;
            print!("{}", run.report.summary());
            Ok(())
        }
        Command::Ablate { common, variants, sweep_m } => ablate(&common, variants.as_deref(), sweep_m.as_deref()),
        Command::InspectBundle { bundle, output_dir } => inspect(&bundle, output_dir.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GRAPHNF_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
