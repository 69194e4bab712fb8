use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dsca_core::checkpoint::{load_checkpoint, save_checkpoint};
use dsca_core::engine::{Engine, StepRecord, Variant, ACTIVE_WEIGHT};
use dsca_core::experiment::{derive_seed, run_experiment, ExperimentResult};
use dsca_core::gradcheck::{check_random_states, ProblemShape};
use dsca_core::interference::{corollary_trials, lemma_trials, CorollaryReport, LemmaReport, TrialShape};
use dsca_core::metrics::{sparsity_report, SparsityReport};
use dsca_core::subspace::OverlapReport;
use dsca_core::world::{generate_stream, WorldModel};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::svg;

pub const ABLATION_HEADER: &str = "variant,edit_success,locality_drop,generalization,mean_overlap,bwt";

/// Targets of the bounded-interference trials.
pub const COROLLARY_TARGETS: [f64; 3] = [1e-4, 1e-3, 1e-2];

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    write(path, text + "\n")
}

/// Shortest round-trip text; scientific notation for tiny magnitudes.
pub fn num(x: f64) -> String {
    let x = x + 0.0;
    if x != 0.0 && x.abs() < 1e-4 {
        format!("{x:e}")
    } else {
        x.to_string()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn timeseries_csv(steps: &[StepRecord]) -> String {
    let mut s = String::from(
        "step,edits_done,task,align,cdistill,sparse,total,mean_overlap,max_overlap,num_concepts,active_dsams,active_per_input\n",
    );
    for r in steps {
        let l = &r.loss;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.edits_done,
            num(l.task),
            num(l.align),
            num(l.cdistill),
            num(l.sparse),
            num(l.total),
            opt(r.mean_overlap),
            opt(r.max_overlap),
            r.num_concepts,
            r.active_dsams,
            num(r.active_per_input)
        );
    }
    s
}

fn histogram_svg(title: &str, s: &SparsityReport) -> String {
    let bars: Vec<(String, f64)> = s
        .counts
        .iter()
        .enumerate()
        .map(|(i, &c)| (format!("{:.2}", s.edges[i]), c as f64))
        .collect();
    svg::bar_chart(title, "routing weight", "count", &bars)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

/// Runs one experiment and writes report, time series, metrics, accuracy
/// matrix, checkpoints and plots into the output directory.
pub fn run(cfg: &ExperimentConfig) -> CliResult<ExperimentResult> {
    let out = &cfg.output_dir;
    create_dir(out)?;
    write(&out.join("config.json"), cfg.to_json() + "\n")?;
    let world = WorldModel::new(cfg.world.clone())?;
    let ckpt_root = out.join("checkpoints");

    let mut hook = |e: &Engine, done: usize| -> dsca_core::error::Result<()> {
        let dir = ckpt_root.join(format!("edit_{done:06}"));
        info!("checkpoint after {done} edits -> {}", dir.display());
        save_checkpoint(e, &world, &dir)
    };
    let (engine, result) = match run_experiment(&world, &cfg.engine, &cfg.run, &mut hook) {
        Ok(r) => r,
        Err(e) => {
            let _ = write(&out.join("error.txt"), format!("{e}\n"));
            return Err(CliError::Runtime(format!("run failed: {e}")));
        }
    };
    save_checkpoint(&engine, &world, &ckpt_root.join("final"))?;

    write_json(&out.join("report.json"), &result)?;
    write(&out.join("timeseries.csv"), timeseries_csv(&result.report.steps))?;
    let mut jsonl = String::new();
    for r in &result.records {
        jsonl.push_str(&serde_json::to_string(r).map_err(|e| CliError::Runtime(e.to_string()))?);
        jsonl.push('\n');
    }
    write(&out.join("metrics.jsonl"), jsonl)?;
    if let Some(a) = &result.accuracy {
        write(&out.join("accuracy.csv"), a.to_csv())?;
    }
    let points: Vec<(f64, f64)> = result
        .report
        .overlap_trajectory
        .iter()
        .filter_map(|p| p.mean_overlap.map(|m| (p.edits_done as f64, m)))
        .collect();
    write(
        &out.join("overlap.svg"),
        svg::line_chart("Mean subspace overlap", "edits", "mean overlap (log10)", &points, true),
    )?;
    write(&out.join("weights.svg"), histogram_svg("Routing weight histogram", &result.sparsity))?;
    Ok(result)
}

pub fn ablation_row(v: Variant, r: &ExperimentResult) -> String {
    format!(
        "{},{},{},{},{},{}",
        v.id(),
        opt(r.final_metrics.map(|m| m.reliability)),
        opt(r.locality_drop()),
        opt(r.generalization()),
        opt(r.report.final_mean_overlap),
        opt(r.cl.map(|c| c.bwt))
    )
}

/// Runs every variant with the shared seed. Failed variants get an empty
/// row and are reported after the table is written.
pub fn ablate(cfg: &ExperimentConfig, variants: &[Variant]) -> CliResult<String> {
    let out = &cfg.output_dir;
    create_dir(out)?;
    let world = WorldModel::new(cfg.world.clone())?;
    let mut table = format!("{ABLATION_HEADER}\n");
    let mut failed = Vec::new();
    for &v in variants {
        let mut run = cfg.run.clone();
        run.variant = v;
        match run_experiment(&world, &cfg.engine, &run, &mut |_, _| Ok(())) {
            Ok((_, r)) => table.push_str(&ablation_row(v, &r)),
            Err(e) => {
                warn!("variant {v} failed: {e}");
                failed.push(format!("{v}: {e}"));
                table.push_str(&format!("{},,,,,", v.id()));
            }
        }
        table.push('\n');
    }
    write(&out.join("ablation.csv"), &table)?;
    if failed.is_empty() {
        Ok(table)
    } else {
        say!("{}", table.trim_end());
        Err(CliError::Runtime(format!("{} variant(s) failed: {}", failed.len(), failed.join("; "))))
    }
}

#[derive(Debug, Serialize)]
pub struct TensorSummary {
    pub tensor: String,
    pub checked: usize,
    pub worst_rel_err: f64,
}

/// Finite-difference check on random states of the configured shape.
/// `corrupt` shifts every analytic entry (negative control).
pub fn gradcheck(cfg: &ExperimentConfig, corrupt: Option<f64>) -> CliResult<Vec<TensorSummary>> {
    let world = WorldModel::new(cfg.world.clone())?;
    let d = world.dim();
    let r = cfg.engine.r;
    let shape = ProblemShape {
        rank: r,
        bottleneck: cfg.engine.bottleneck,
        modules: (d / r).clamp(1, 3),
        batch_edit: cfg.engine.batch_edit.max(1),
        batch_replay: cfg.engine.batch_replay.max(2),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.run.seed, 4));
    let report = check_random_states(&world, shape, &cfg.engine.loss_weights, &cfg.gradcheck, &mut rng, corrupt)?;

    let mut by_tensor: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    for t in &report.tensors {
        let e = by_tensor.entry(t.tensor.clone()).or_insert((0, 0.0));
        e.0 += t.checked;
        e.1 = e.1.max(t.worst_rel_err);
    }
    let summary: Vec<TensorSummary> = by_tensor
        .into_iter()
        .map(|(tensor, (checked, worst_rel_err))| TensorSummary {
            tensor,
            checked,
            worst_rel_err,
        })
        .collect();
    for s in &summary {
        say!("{:8} checked {:5}  worst relative error {:.3e}", s.tensor, s.checked, s.worst_rel_err);
    }
    create_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join("gradcheck.json"), &report)?;
    if report.passed() {
        say!("gradient check passed (tolerance {:e})", cfg.gradcheck.tolerance);
        Ok(summary)
    } else {
        let mut msg = format!("{} coordinate(s) above {:e}:", report.failures.len(), cfg.gradcheck.tolerance);
        for f in report.failures.iter().take(20) {
            let _ = write!(
                msg,
                "\n  concept {} {}[{}]: analytic {:.6e}, numeric {:.6e}, rel err {:.3e}",
                f.concept, f.tensor, f.index, f.analytic, f.numeric, f.rel_err
            );
        }
        Err(CliError::Gradcheck(msg))
    }
}

#[derive(Debug, Serialize)]
#[serde(tag = "status")]
pub enum OverlapSection {
    #[serde(rename = "ok")]
    Defined(OverlapReport),
    #[serde(rename = "K < 2, undefined")]
    Undefined { k: usize },
}

#[derive(Debug, Serialize)]
pub struct ActiveStats {
    pub num_concepts: usize,
    pub active_dsams: usize,
    pub probes: usize,
    /// Mean number of modules with weight above the activity threshold.
    pub mean_active_per_input: f64,
    pub max_active_per_input: usize,
}

#[derive(Debug, Serialize)]
pub struct Diagnostics {
    pub checkpoint: PathBuf,
    pub step: u64,
    pub overlap: OverlapSection,
    pub routing: SparsityReport,
    pub active: ActiveStats,
    pub lemma: LemmaReport,
    pub corollary: Vec<CorollaryReport>,
}

/// Overlap, routing and interference diagnostics of a checkpoint.
pub fn diagnose(checkpoint: &Path, out: &Path, seed: u64, probes: usize, trials: usize) -> CliResult<Diagnostics> {
    let (engine, world) = load_checkpoint(checkpoint).map_err(|e| CliError::Runtime(e.to_string()))?;
    create_dir(out)?;

    let k = engine.bases().len();
    let overlap = match engine.overlap_report() {
        Some(r) if k >= 2 => OverlapSection::Defined(r),
        _ => OverlapSection::Undefined { k },
    };

    let samples = generate_stream(&world, 0, probes, derive_seed(seed, 5))?;
    let mut decisions = Vec::with_capacity(samples.len());
    for s in &samples {
        decisions.push(engine.edit_inference(s)?.1);
    }
    let routing = sparsity_report(&decisions);
    let counts: Vec<usize> = decisions
        .iter()
        .map(|d| d.weights.iter().filter(|&&w| w > ACTIVE_WEIGHT).count())
        .collect();
    let active = ActiveStats {
        num_concepts: engine.concepts().len(),
        active_dsams: engine.active_dsams(),
        probes: samples.len(),
        mean_active_per_input: if counts.is_empty() {
            0.0
        } else {
            counts.iter().sum::<usize>() as f64 / counts.len() as f64
        },
        max_active_per_input: counts.iter().copied().max().unwrap_or(0),
    };

    let shape = TrialShape {
        trials,
        ..TrialShape::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 6));
    let lemma = lemma_trials(shape, 1e-10, &mut rng)?;
    let corollary = corollary_trials(shape, &COROLLARY_TARGETS, &mut rng)?;

    let diag = Diagnostics {
        checkpoint: checkpoint.to_path_buf(),
        step: engine.step(),
        overlap,
        routing,
        active,
        lemma,
        corollary,
    };
    write_json(&out.join("diagnostics.json"), &diag)?;
    write(&out.join("weights.svg"), histogram_svg("Routing weight histogram", &diag.routing))?;
    let overlap_svg = match &diag.overlap {
        OverlapSection::Defined(r) => {
            let labels: Vec<String> = r.concept_ids.iter().map(|c| c.to_string()).collect();
            let n = r.pairwise.nrows();
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|i| (0..n).map(|j| if i == j { 0.0 } else { r.pairwise[(i, j)] }).collect())
                .collect();
            svg::heatmap("Pairwise subspace overlap", &labels, &rows)
        }
        OverlapSection::Undefined { .. } => svg::bar_chart("Pairwise subspace overlap: K < 2, undefined", "", "", &[]),
    };
    write(&out.join("overlap.svg"), overlap_svg)?;
    Ok(diag)
}
