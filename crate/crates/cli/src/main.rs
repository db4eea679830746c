use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fedsem::harness::{Experiment, ExperimentConfig, Manifest};

#[derive(Parser)]
#[command(
    name = "fedsem",
    version,
    about = "Trust-aware federated zero-shot intrusion detection harness"
)]
struct Cli {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Do not echo the resolved config.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Build and dump prototypes and their disagreements.
    Prototypes,
    /// Synthesize client partitions and the test split.
    Gen,
    /// Run the federated rounds.
    Train,
    /// Assess every test sample with the trained global matrix.
    Infer,
    /// Compute metrics CSVs and the manifest from earlier stage outputs.
    Report,
    /// Full pipeline.
    Run,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}

fn print_headline(m: &Manifest) {
    let h = &m.headline;
    let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_owned(), |v| format!("{v:.4}"));
    println!("seen accuracy      {:.4}", h.seen_accuracy);
    println!("novel AUROC        {}", opt(h.novel_auroc));
    println!(
        "best threshold     {} (accuracy {})",
        opt(h.best_threshold),
        opt(h.threshold_accuracy)
    );
    println!(
        "calibration        {}",
        if h.calibration_monotone {
            "monotone decreasing"
        } else {
            "not monotone"
        }
    );
    println!("final H            {:.6}", h.final_entropy);
    println!(
        "converged round    {}",
        h.converged_round.map_or_else(|| "none".to_owned(), |t| t.to_string())
    );
    println!("config sha256      {}", m.config_sha256);
}

fn execute(cmd: Command, exp: &Experiment) -> Result<()> {
    exp.write_resolved_config().context("config stage failed")?;
    match cmd {
        Command::Prototypes => {
            let protos = exp.prototypes()?;
            for p in protos.iter() {
                println!("{:<28} D = {:.6}", p.concept_id, p.disagreement);
            }
        }
        Command::Gen => {
            let protos = exp.load_prototypes().context("gen stage failed")?;
            let (data, clients) = exp.generate(&protos)?;
            for c in &clients {
                println!("client {:>3}: {} samples", c.client_id, c.len());
            }
            println!("test: {} samples", data.test.len());
        }
        Command::Train => {
            let load = || -> fedsem::Result<_> { Ok((exp.load_prototypes()?, exp.load_clients()?, exp.load_test()?)) };
            let (protos, clients, test) = load().context("train stage failed")?;
            let outcome = exp.train(&protos, &clients, &test)?;
            for r in &outcome.reports {
                println!(
                    "t = {:>3}  H = {:.6}  dH = {:+.3e}  dev = {:.4e}",
                    r.t, r.entropy, r.delta_entropy, r.deviation_norm
                );
            }
        }
        Command::Infer => {
            let load = || -> fedsem::Result<_> { Ok((exp.load_prototypes()?, exp.load_global()?, exp.load_test()?)) };
            let (protos, global, test) = load().context("infer stage failed")?;
            let rows = exp.infer(&protos, &global, &test)?;
            let abstained = rows.iter().filter(|r| r.zds.is_none()).count();
            println!("assessed {} samples ({abstained} abstained)", rows.len());
        }
        Command::Report => print_headline(&exp.report()?),
        Command::Run => print_headline(&exp.run()?.manifest),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = load_config(&cli).context("config stage failed").and_then(|cfg| {
        if !cli.quiet {
            eprintln!("# resolved config\n{}", cfg.to_toml()?);
        }
        let exp = Experiment::new(cfg)?;
        execute(cli.command, &exp)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fedsem: {e:#}");
            ExitCode::FAILURE
        }
    }
}
