//! Command-line front end: `run`, `ablate`, `gradcheck` and `diagnose`.

/// `println!` that ignores a closed stdout.
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

pub mod commands;
pub mod config;
pub mod error;
pub mod svg;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use dsca_core::engine::Variant;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "dsca", version, about = "Continual multimodal model editing on a synthetic backbone")]
pub struct Cli {
    /// JSON experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Master seed for streams, initialization and evaluation. The world keeps its own seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Large-scale hyperparameters with a matching feature width.
    #[arg(long, global = true)]
    pub paper_profile: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one editing experiment.
    Run {
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Run the ablation table with a shared seed.
    Ablate {
        /// Variants to run (repeatable); defaults to every ablation.
        #[arg(long)]
        variant: Vec<Variant>,
    },
    /// Finite-difference check of the analytic gradients.
    Gradcheck {
        #[arg(long, hide = true)]
        corrupt_gradient: Option<f64>,
    },
    /// Overlap, routing and interference diagnostics of a checkpoint.
    Diagnose {
        checkpoint: PathBuf,
        /// Number of replay draws for the routing histogram.
        #[arg(long, default_value_t = 512)]
        probes: usize,
        /// Random trials for the interference checks.
        #[arg(long, default_value_t = 1000)]
        trials: usize,
    },
}

impl Cli {
    pub fn config(&self) -> CliResult<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if self.paper_profile {
            cfg.apply_paper_profile();
        }
        if let Some(s) = self.seed {
            cfg.run.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Command::Run { variant: Some(v) } = &self.command {
            cfg.run.variant = *v;
        }
        cfg.validate().map_err(|(section, e)| CliError::Config(format!("invalid `{section}` section: {e}")))?;
        Ok(cfg)
    }
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    let cfg = cli.config()?;
    match &cli.command {
        Command::Run { .. } => {
            let r = commands::run(&cfg)?;
            say!(
                "{} edits, {} concepts, {} active modules; artifacts in {}",
                r.report.edits_processed,
                r.report.num_concepts,
                r.report.active_dsams,
                cfg.output_dir.display()
            );
            if let Some(m) = r.final_metrics {
                say!("reliability {:.4}", m.reliability);
            }
        }
        Command::Ablate { variant } => {
            let variants = if variant.is_empty() { Variant::ABLATIONS.to_vec() } else { variant.clone() };
            say!("{}", commands::ablate(&cfg, &variants)?.trim_end());
        }
        Command::Gradcheck { corrupt_gradient } => {
            commands::gradcheck(&cfg, *corrupt_gradient)?;
        }
        Command::Diagnose { checkpoint, probes, trials } => {
            let d = commands::diagnose(checkpoint, &cfg.output_dir, cfg.run.seed, *probes, *trials)?;
            match &d.overlap {
                commands::OverlapSection::Defined(o) => {
                    say!("mean overlap {:e}, max overlap {:e}", o.mean_overlap, o.max_overlap)
                }
                commands::OverlapSection::Undefined { k } => say!("overlap: K < 2, undefined (K = {k})"),
            }
            say!(
                "mean active modules per input {:.4}, negligible weights {:.4}",
                d.active.mean_active_per_input, d.routing.fraction_negligible
            );
            say!(
                "lemma: {} violations in {} checks (worst ratio {:e})",
                d.lemma.violations, d.lemma.checks, d.lemma.worst_ratio
            );
            for c in &d.corollary {
                say!(
                    "corollary at overlap {:e}: {} violations in {} checks",
                    c.target_overlap, c.violations, c.checks
                );
            }
            say!("diagnostics in {}", cfg.output_dir.display());
        }
    }
    Ok(())
}
