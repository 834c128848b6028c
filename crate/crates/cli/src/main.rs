//! `moevit`: cost sweeps, training, property checks and routing statistics.
//!
//! Exit codes: 0 success, 1 property failure, 2 usage or config error,
//! 3 numeric failure.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use moevit::checks;
use moevit::cost::{self, Geometry, SweepRow, Variant};
use moevit::model::{
    load_checkpoint, route_stats, run, save_checkpoint, RunConfig, TrainState, METRICS_HEADER,
    ROUTE_STATS_HEADER,
};
use moevit::tensor::{inject_fault, Fault};
use moevit::Error;

#[derive(Parser)]
#[command(name = "moevit", version, about = "Sparse channel-routing vision transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Analytic attention cost of MoE, dense channel-wise and plain ViT blocks.
    Flops(FlopsArgs),
    /// Train on the synthetic multi-channel task.
    Train(TrainArgs),
    /// Run the seeded property suites.
    Check(CheckArgs),
    /// Per-channel routing statistics of a checkpoint.
    RouteStats(RouteStatsArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DatasetArg {
    Jumpcp,
    So2sat,
    Custom,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelArg {
    Moe,
    Dense,
    Vanilla,
    All,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Table,
}

#[derive(clap::Args)]
struct FlopsArgs {
    /// Check the reproduced cost values against their published references.
    #[arg(long)]
    verify_paper: bool,
    /// Geometry preset; all presets when omitted.
    #[arg(long, value_enum)]
    dataset: Option<DatasetArg>,
    /// Patch size; defaults to the preset's.
    #[arg(long)]
    patch: Option<usize>,
    /// Experts per token; every k in 1..=C when omitted.
    #[arg(long)]
    topk: Option<usize>,
    /// Patches per channel (custom geometry).
    #[arg(long)]
    n: Option<usize>,
    /// Channels (custom geometry).
    #[arg(long)]
    c: Option<usize>,
    /// Embedding width (custom geometry).
    #[arg(long)]
    d: Option<usize>,
    /// Architecture; `moe` when --topk is given, otherwise `all`.
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// key = value config file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override applied after the file, e.g. `--set top_k=1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Output directory for metrics.csv and checkpoint/.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cases per suite.
    #[arg(long, default_value_t = 100)]
    cases: usize,
    /// Test fixture: corrupt an operator's backward pass.
    #[arg(long, hide = true, value_enum)]
    inject_fault: Option<FaultArg>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FaultArg {
    FlipMatmulBackward,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DataArg {
    /// The checkpoint's training task.
    Task,
    /// Signal-free noise: every channel is statistically identical.
    Uniform,
}

#[derive(clap::Args)]
struct RouteStatsArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "task")]
    data: DataArg,
    /// Images to route.
    #[arg(long, default_value_t = 256)]
    count: usize,
    /// Layer printed to stdout.
    #[arg(long, default_value_t = 0)]
    layer: usize,
    /// Data split seed; 0 and 1 are the training probe and eval splits.
    #[arg(long, default_value_t = 2)]
    seed: u64,
    /// Also write `layer{l}.csv` for every layer into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failure with its exit code.
struct Fail(u8, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Format(_) | Error::Io(_) => 2,
            Error::Diverged { .. } => 3,
            Error::Shape { .. } | Error::Index { .. } | Error::Contract(_) => 1,
        };
        Fail(code, e.to_string())
    }
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

macro_rules! say {
    ($($t:tt)*) => {
        emit(&format!("{}\n", format_args!($($t)*)))
    };
}

fn usage<T>(msg: impl Into<String>) -> Result<T, Fail> {
    Err(Fail(2, msg.into()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Flops(a) => flops(a),
        Cmd::Train(a) => train(a),
        Cmd::Check(a) => check(a),
        Cmd::RouteStats(a) => stats(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

fn variants(model: ModelArg) -> Vec<Variant> {
    match model {
        ModelArg::Moe => vec![Variant::Moe],
        ModelArg::Dense => vec![Variant::Dense],
        ModelArg::Vanilla => vec![Variant::Vanilla],
        ModelArg::All => vec![Variant::Vanilla, Variant::Dense, Variant::Moe],
    }
}

/// Rows for one geometry; MoE expands over every k when none is given.
fn rows_for(
    models: &[Variant],
    channels: usize,
    topk: Option<usize>,
    mut row: impl FnMut(Variant, usize) -> moevit::Result<SweepRow>,
) -> Result<Vec<SweepRow>, Fail> {
    let mut out = Vec::new();
    for &m in models {
        match (m, topk) {
            (Variant::Moe, None) => {
                for k in 1..=channels {
                    out.push(row(m, k)?);
                }
            }
            (_, k) => out.push(row(m, k.unwrap_or(1))?),
        }
    }
    Ok(out)
}

fn flops(a: FlopsArgs) -> Result<(), Fail> {
    if a.verify_paper {
        let mut checks = cost::reference_checks();
        checks.push(cost::reference_param_delta());
        let passed = checks.iter().filter(|c| c.passes()).count();
        for c in &checks {
            say!("{}", c.line());
        }
        say!("{passed}/{} checks passed", checks.len());
        return if passed == checks.len() {
            Ok(())
        } else {
            Err(Fail(1, format!("{} reproduction checks failed", checks.len() - passed)))
        };
    }
    let models = variants(a.model.unwrap_or(if a.topk.is_some() { ModelArg::Moe } else { ModelArg::All }));
    let custom_flags = a.n.is_some() || a.c.is_some() || a.d.is_some();
    let rows = match a.dataset {
        Some(DatasetArg::Custom) => {
            let (Some(n), Some(c), Some(d)) = (a.n, a.c, a.d) else {
                return usage("--dataset custom needs --n, --c and --d");
            };
            if a.patch.is_some() {
                return usage("--patch does not apply to --dataset custom");
            }
            rows_for(&models, c, a.topk, |m, k| SweepRow::custom(m, n, c, d, k))?
        }
        _ if custom_flags => return usage("--n, --c and --d need --dataset custom"),
        preset => {
            let geometries = match preset {
                Some(DatasetArg::Jumpcp) => vec![Geometry::JumpCp],
                Some(DatasetArg::So2sat) => vec![Geometry::So2Sat],
                _ => vec![Geometry::JumpCp, Geometry::So2Sat],
            };
            let mut rows = Vec::new();
            for g in geometries {
                let p = a.patch.unwrap_or(g.default_patch());
                rows.extend(rows_for(&models, g.channels(), a.topk, |m, k| {
                    SweepRow::at_geometry(m, g, p, k)
                })?);
            }
            rows
        }
    };
    let text = match a.format {
        Format::Csv => cost::sweep_csv(&rows),
        Format::Table => cost::sweep_table(&rows),
    };
    emit(&text);
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<(), Fail> {
    fs::write(path, text).map_err(|e| Fail(2, format!("cannot write {}: {e}", path.display())))
}

fn train(a: TrainArgs) -> Result<(), Fail> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Fail(2, format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for pair in &a.overrides {
        cfg.set_pair(pair)?;
    }
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(steps) = a.steps {
        cfg.train.steps = steps;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    cfg.validate()?;
    fs::create_dir_all(&a.out).map_err(|e| Fail(2, format!("cannot create {}: {e}", a.out.display())))?;

    let mut state = TrainState::new(cfg.spec.clone(), &cfg.train)?;
    let task = cfg.train.task(&state.model.spec)?;
    say!("{METRICS_HEADER}");
    let mut csv = format!("{METRICS_HEADER}\n");
    let outcome = run(&mut state, &cfg.train, &task, |row| {
        let line = row.to_csv();
        say!("{line}");
        csv.push_str(&line);
        csv.push('\n');
    });
    // the partial log is kept for diagnosis even when training diverged
    write_file(&a.out.join("metrics.csv"), &csv)?;
    outcome?;
    save_checkpoint(&a.out.join("checkpoint"), &cfg, &state)?;
    Ok(())
}

fn check(a: CheckArgs) -> Result<(), Fail> {
    if a.cases == 0 {
        eprintln!("warning: --cases 0, no checks run");
        say!("0 checks run");
        return Ok(());
    }
    inject_fault(a.inject_fault.map(|f| match f {
        FaultArg::FlipMatmulBackward => Fault::FlipMatmulBackward,
    }));
    let suites = checks::run_all(a.seed, a.cases)?;
    let mut failed = 0;
    for s in &suites {
        let verdict = if s.passed() { "PASS" } else { "FAIL" };
        say!(
            "{verdict} {}: {}/{} cases passed, max deviation {:.3e}",
            s.name,
            s.run - s.failed,
            s.run,
            s.max_deviation
        );
        if let Some(f) = &s.first_failure {
            failed += s.failed;
            say!(
                "  first counterexample: seed={} case={} {} deviation={:.3e}",
                s.seed, f.case, f.config, f.deviation
            );
        }
    }
    let total: usize = suites.iter().map(|s| s.run).sum();
    say!("{} of {total} checks passed", total - failed);
    if failed > 0 {
        return Err(Fail(1, format!("{failed} property checks failed")));
    }
    Ok(())
}

fn stats(a: RouteStatsArgs) -> Result<(), Fail> {
    if !a.checkpoint.is_dir() {
        return usage(format!("checkpoint {} not found", a.checkpoint.display()));
    }
    let (cfg, state) = load_checkpoint(&a.checkpoint)?;
    if a.layer >= cfg.spec.layers {
        return usage(format!("--layer {} out of range for {} layers", a.layer, cfg.spec.layers));
    }
    let mut task = cfg.train.task(&cfg.spec)?;
    if a.data == DataArg::Uniform {
        task.amplitude = 0.0;
    }
    let layers = route_stats(&state.model, &task.generate(a.count, a.seed))?;
    let csv = |l: usize| -> String {
        let mut s = format!("{ROUTE_STATS_HEADER}\n");
        for stat in &layers[l] {
            s.push_str(&stat.to_csv());
            s.push('\n');
        }
        s
    };
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).map_err(|e| Fail(2, format!("cannot create {}: {e}", dir.display())))?;
        for l in 0..layers.len() {
            write_file(&dir.join(format!("layer{l}.csv")), &csv(l))?;
        }
    }
    emit(&csv(a.layer));
    Ok(())
}
