use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gmner::eval::EvalReport;
use gmner::pipeline::{Pipeline, PipelineConfig};

#[derive(Parser)]
#[command(name = "gmner", version, about = "Grounded multimodal NER pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the guideline table and synthesize training data.
    Synthesize(Common),
    /// Train the CRF on the annotated set plus synthesized data.
    Train(Common),
    /// Label the test set and store marginals.
    Infer(Common),
    /// Route uncertain mentions to the refiner and merge verdicts.
    Refine(Common),
    /// Pick in-context examples for grounding.
    Select(Common),
    /// Ground refined mentions to image regions.
    Ground(Common),
    /// Score predictions against the test set.
    Eval(Gated),
    /// Run every enabled stage, then evaluate.
    RunAll(Gated),
}

#[derive(Args)]
struct Common {
    /// Pipeline config file (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a config field, e.g. `--set stages.stage2=false`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    work_dir: Option<PathBuf>,
    /// Gateway mode: live, record or replay.
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Args)]
struct Gated {
    #[command(flatten)]
    common: Common,
    /// Exit non-zero when F1 falls below this value.
    #[arg(long)]
    gate: Option<f64>,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

impl Common {
    fn pipeline(&self) -> gmner::Result<Pipeline> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        if let Some(w) = &self.work_dir {
            overrides.push(format!("work_dir={}", toml_string(&w.display().to_string())));
        }
        if let Some(m) = &self.mode {
            overrides.push(format!("gateway.mode={}", toml_string(m)));
        }
        let (config, hash) = PipelineConfig::load(&self.config, &overrides)?;
        Pipeline::new(config, hash)
    }
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn report(pipeline: &Pipeline, report: &EvalReport, gated: &Gated) -> ExitCode {
    if gated.json {
        println!("{}", serde_json::to_string_pretty(report).expect("report serializes"));
    } else {
        print!("{}", report.to_table());
    }
    let gate = gated.gate.or(pipeline.config().eval.f1_gate);
    match gate {
        Some(g) if !report.passes(g) => {
            eprintln!("F1 {:.4} is below the gate {g:.4}", report.f1);
            ExitCode::from(2)
        }
        _ => ExitCode::SUCCESS,
    }
}

fn run(cli: Cli) -> gmner::Result<ExitCode> {
    match cli.command {
        Command::Synthesize(c) => {
            let n = c.pipeline()?.synthesize()?;
            println!("synthesized {n} samples");
        }
        Command::Train(c) => {
            let s = c.pipeline()?.train()?;
            println!(
                "trained on {} sequences ({} synthesized); nll {:.4} -> {:.4}",
                s.examples, s.synthesized, s.initial_loss, s.final_loss
            );
        }
        Command::Infer(c) => c.pipeline()?.infer()?,
        Command::Refine(c) => {
            let s = c.pipeline()?.refine()?;
            println!("{} kept, {} routed to refinement", s.kept, s.routed);
        }
        Command::Select(c) => c.pipeline()?.select()?,
        Command::Ground(c) => c.pipeline()?.ground()?,
        Command::Eval(g) => {
            let p = g.common.pipeline()?;
            let r = p.eval()?;
            return Ok(report(&p, &r, &g));
        }
        Command::RunAll(g) => {
            let p = g.common.pipeline()?;
            let r = p.run_all()?;
            return Ok(report(&p, &r, &g));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
