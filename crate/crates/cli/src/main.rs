//! Command-line entry point: dataset generation, two-stage training,
//! evaluation, the 2x2 ablation, and the numerical verifiers.
//!
//! Exit codes: 0 success, 1 validation/configuration failure, 2 failed
//! numerical check or aborted run.

mod svg;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use mams_core::autograd::{Graph, Mode};
use mams_core::checkpoint::load_checkpoint;
use mams_core::config::{parse_config, render_manifest, FileConfig};
use mams_core::data::{
    generate_synthetic, ingest_chestxray14, load_dataset, save_dataset, Dataset, Split,
    SplitFractions, CHESTXRAY14_CLASSES,
};
use mams_core::ema::{residual_ladder, verify_unrolled_approximation, QuadraticToy};
use mams_core::gradcheck::{run_full_model_check, run_op_checks, REL_TOL};
use mams_core::metrics::{aggregate_runs, roc_points, write_aggregate_csv, Auc};
use mams_core::model::{build_model, GroupKind, ModelGraph};
use mams_core::optim::OptimizerKind;
use mams_core::rng::{stream_rng, Stream};
use mams_core::train::{evaluate, run_ablation, train};
use mams_core::Error as CoreError;

#[derive(Parser)]
#[command(
    name = "mams",
    version,
    about = "EMA-anchored dual-path fusion network: data generation, training, ablation, verifiers"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic long-tailed dataset directory
    GenData(GenDataArgs),
    /// Run the two-stage training protocol
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split
    Eval(EvalArgs),
    /// Run the 2x2 {fusion, momentum} ablation grid across seeds
    Ablate(AblateArgs),
    /// Check the EMA unrolled-gradient approximation on a toy problem
    VerifyEma(VerifyEmaArgs),
    /// Finite-difference checks for every op and the full model
    Gradcheck(GradcheckArgs),
    /// Print per-group parameter counts and the FLOP estimate
    Count(CountArgs),
}

#[derive(Args)]
struct ConfigOpt {
    /// Configuration file ([model]/[train]/[synth] sections, key = value)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root (default: $MAMS_OUT_ROOT or ./runs)
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainOverrides {
    /// Training/split seed
    #[arg(long)]
    seed: Option<u64>,
    /// EMA momentum coefficient
    #[arg(long)]
    m: Option<f64>,
    /// Learning rate
    #[arg(long)]
    eta: Option<f64>,
    /// Optimizer: adam or sgd
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    stage1_steps: Option<usize>,
    #[arg(long)]
    stage2_steps: Option<usize>,
    #[arg(long)]
    use_fusion: Option<bool>,
    #[arg(long)]
    use_momentum: Option<bool>,
    /// Block gradient flow through the momentum branch
    #[arg(long)]
    stop_grad_momentum: Option<bool>,
}

#[derive(Args)]
struct DataOpts {
    /// Dataset directory written by gen-data
    #[arg(long)]
    data: Option<PathBuf>,
    /// ChestX-ray14-style label CSV ("Image Index", "Finding Labels")
    #[arg(long)]
    xray_csv: Option<PathBuf>,
    /// Directory holding the PNG files referenced by the label CSV
    #[arg(long)]
    xray_images: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigOpt,
    /// Generation seed override
    #[arg(long)]
    seed: Option<u64>,
    /// Exact output directory (default: <out root>/data-<timestamp>-seed<seed>)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigOpt,
    #[command(flatten)]
    overrides: TrainOverrides,
    #[command(flatten)]
    data: DataOpts,
    /// Skip SVG plot emission
    #[arg(long)]
    no_plots: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file to load
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    config: ConfigOpt,
    #[command(flatten)]
    data: DataOpts,
    /// Split to score: train, val or test
    #[arg(long, default_value = "val")]
    split: String,
    /// Split seed (default: the seed stored in the checkpoint)
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_plots: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigOpt,
    #[command(flatten)]
    overrides: TrainOverrides,
    #[command(flatten)]
    data: DataOpts,
    /// Number of seeds per cell
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    /// Run cells sequentially instead of in parallel
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct VerifyEmaArgs {
    #[command(flatten)]
    config: ConfigOpt,
    /// SGD steps of the toy run
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// EMA momentum coefficient
    #[arg(long, default_value_t = 0.999)]
    m: f64,
    /// Largest learning rate of the eta, eta/2, eta/4 ladder
    #[arg(long, default_value_t = 1e-3)]
    eta: f64,
    /// Toy problem dimension
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 17)]
    seed: u64,
}

#[derive(Args)]
struct CountArgs {
    #[command(flatten)]
    config: ConfigOpt,
    #[arg(long)]
    use_fusion: Option<bool>,
    #[arg(long)]
    use_momentum: Option<bool>,
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {:#}", err);
            match err.downcast_ref::<CoreError>() {
                Some(CoreError::TrainAbort { .. }) | Some(CoreError::Corruption(_)) => {
                    ExitCode::from(2)
                }
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run() -> Result<ExitCode> {
    match Cli::parse().cmd {
        Cmd::GenData(args) => cmd_gen_data(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Ablate(args) => cmd_ablate(args),
        Cmd::VerifyEma(args) => cmd_verify_ema(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
        Cmd::Count(args) => cmd_count(args),
    }
}

fn load_file_config(path: &Option<PathBuf>) -> Result<FileConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            Ok(parse_config(&text)?)
        }
        None => Ok(FileConfig::default()),
    }
}

fn apply_overrides(cfg: &mut FileConfig, ov: &TrainOverrides) -> Result<()> {
    if let Some(seed) = ov.seed {
        cfg.train.seed = seed;
    }
    if let Some(m) = ov.m {
        cfg.train.momentum = m;
    }
    if let Some(eta) = ov.eta {
        cfg.train.eta = eta;
    }
    if let Some(kind) = &ov.optimizer {
        cfg.train.optimizer = OptimizerKind::parse(kind)?;
    }
    if let Some(steps) = ov.stage1_steps {
        cfg.train.stage1.steps = steps;
    }
    if let Some(steps) = ov.stage2_steps {
        cfg.train.stage2.steps = steps;
    }
    if let Some(v) = ov.use_fusion {
        cfg.train.use_fusion = v;
    }
    if let Some(v) = ov.use_momentum {
        cfg.train.use_momentum = v;
    }
    if let Some(v) = ov.stop_grad_momentum {
        cfg.train.stop_gradient_momentum = v;
    }
    Ok(())
}

fn out_root(opt: &Option<PathBuf>) -> PathBuf {
    opt.clone()
        .or_else(|| std::env::var_os("MAMS_OUT_ROOT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Create `<root>/<prefix>-<timestamp>-seed<seed>`, suffixing on collision.
fn make_run_dir(root: &Path, prefix: &str, seed: u64) -> Result<PathBuf> {
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut n = 0u32;
    loop {
        let name = if n == 0 {
            format!("{}-{}-seed{}", prefix, stamp, seed)
        } else {
            format!("{}-{}-seed{}-{}", prefix, stamp, seed, n)
        };
        let dir = root.join(name);
        if !dir.exists() {
            fs::create_dir_all(&dir)?;
            return Ok(dir);
        }
        n += 1;
    }
}

fn resolve_dataset(cfg: &FileConfig, data: &DataOpts) -> Result<(Dataset, String)> {
    if let Some(dir) = &data.data {
        let ds = load_dataset(dir)?;
        return Ok((ds, format!("dataset_dir {}", dir.display())));
    }
    if let Some(csv) = &data.xray_csv {
        let classes: Vec<String> = CHESTXRAY14_CLASSES.iter().map(|s| s.to_string()).collect();
        let (ds, report) = ingest_chestxray14(csv, data.xray_images.as_deref(), &classes, 224)?;
        for (token, count) in &report.unknown_tokens {
            eprintln!(
                "warning: data: unknown finding '{}' in {} rows (token skipped)",
                token, count
            );
        }
        if report.dropped_missing_images > 0 {
            eprintln!(
                "warning: data: dropped {} rows with missing image files",
                report.dropped_missing_images
            );
        }
        return Ok((ds, format!("xray_csv {}", csv.display())));
    }
    let ds = generate_synthetic(&cfg.synth)?;
    Ok((ds, format!("synthetic seed {}", cfg.synth.seed)))
}

fn write_manifest(dir: &Path, cfg: &FileConfig, extra: &[(String, String)]) -> Result<()> {
    let mut text = render_manifest(cfg);
    if !extra.is_empty() {
        text.push_str("\n# run context (informational)\n");
        for (k, v) in extra {
            text.push_str(&format!("# {} = {}\n", k, v));
        }
    }
    fs::write(dir.join("manifest.txt"), text)?;
    Ok(())
}

fn cmd_gen_data(args: GenDataArgs) -> Result<ExitCode> {
    let mut cfg = load_file_config(&args.config.config)?;
    if let Some(seed) = args.seed {
        cfg.synth.seed = seed;
    }
    let dir = match args.out {
        Some(d) => {
            fs::create_dir_all(&d)?;
            d
        }
        None => make_run_dir(&out_root(&args.config.out_dir), "data", cfg.synth.seed)?,
    };
    let ds = generate_synthetic(&cfg.synth)?;
    save_dataset(&ds, &dir)?;
    write_manifest(&dir, &cfg, &[("command".into(), "gen-data".into())])?;
    let positives = ds.positives_per_class();
    println!("wrote {} images to {}", ds.len(), dir.display());
    for (c, name) in ds.class_names.iter().enumerate() {
        println!("  {}: {} positives", name, positives[c]);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let mut cfg = load_file_config(&args.config.config)?;
    apply_overrides(&mut cfg, &args.overrides)?;
    let (mut ds, source) = resolve_dataset(&cfg, &args.data)?;
    ds.assign_splits(SplitFractions::default(), cfg.train.seed)?;

    let run_dir = make_run_dir(&out_root(&args.config.out_dir), "run", cfg.train.seed)?;
    write_manifest(
        &run_dir,
        &cfg,
        &[
            ("command".into(), "train".into()),
            ("data_source".into(), source),
        ],
    )?;

    let model_cfg = cfg.train.model_config(&cfg.model);
    let mut model = build_model(&model_cfg, cfg.train.seed)?;
    let outcome = train(&mut model, &ds, &cfg.train, Some(&run_dir))?;

    let mut loss_csv = Vec::new();
    outcome.write_loss_csv(&mut loss_csv)?;
    fs::write(run_dir.join("loss.csv"), loss_csv)?;
    if !args.no_plots {
        let series: Vec<(String, Vec<(f64, f64)>)> = [1usize, 2]
            .iter()
            .map(|&stage| {
                (
                    format!("stage {}", stage),
                    outcome
                        .loss_curve
                        .iter()
                        .filter(|p| p.stage == stage)
                        .map(|p| (p.step as f64, p.loss))
                        .collect(),
                )
            })
            .collect();
        fs::write(
            run_dir.join("loss_curve.svg"),
            svg::line_chart("training loss", &series),
        )?;
    }

    for (split, file) in [(Split::Val, "eval_val.csv"), (Split::Test, "eval_test.csv")] {
        let report = evaluate(&mut model, &ds, split, cfg.train.seed)?;
        let mut csv = Vec::new();
        report.write_csv(&mut csv)?;
        fs::write(run_dir.join(file), csv)?;
        println!(
            "{}: mean AUC {}",
            split.as_str(),
            report
                .mean_auc
                .map(|v| format!("{:.4}", v))
                .unwrap_or_else(|| "undefined".into())
        );
    }
    println!(
        "done: {} optimizer steps, {} EMA updates, {:.1}s -> {}",
        outcome.optimizer_steps,
        outcome.ema_updates,
        outcome.wall_secs,
        run_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    let cfg = load_file_config(&args.config.config)?;
    let (mut model, meta) = load_checkpoint(&args.checkpoint)?;
    let (mut ds, _) = resolve_dataset(&cfg, &args.data)?;
    let seed = args.seed.unwrap_or(meta.seed);
    ds.assign_splits(SplitFractions::default(), seed)?;
    let split = match args.split.as_str() {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => return Err(CoreError::Usage(format!("eval: unknown split '{}'", other)).into()),
    };
    let report = evaluate(&mut model, &ds, split, seed)?;

    let run_dir = make_run_dir(&out_root(&args.config.out_dir), "eval", seed)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    fs::write(run_dir.join("eval.csv"), csv)?;
    if !args.no_plots {
        let indices = ds.stage_indices(split, false)?;
        let k = ds.num_classes();
        let mut scores: Vec<Vec<f64>> = vec![Vec::new(); k];
        let mut labels: Vec<Vec<f64>> = vec![Vec::new(); k];
        collect_scores(&mut model, &ds, &indices, &mut scores, &mut labels, seed)?;
        let mut series = Vec::new();
        for c in 0..k {
            if let Ok(points) = roc_points(&scores[c], &labels[c]) {
                series.push((ds.class_names[c].clone(), points));
            }
        }
        fs::write(
            run_dir.join("roc.svg"),
            svg::line_chart(&format!("ROC ({})", split.as_str()), &series),
        )?;
    }
    for c in &report.per_class {
        println!(
            "{:>20}: {}  (pos {}, neg {})",
            c.name,
            match c.auc {
                Auc::Defined(v) => format!("{:.4}", v),
                Auc::Undefined => "undefined".into(),
            },
            c.n_pos,
            c.n_neg
        );
    }
    println!(
        "mean AUC: {}",
        report
            .mean_auc
            .map(|v| format!("{:.4}", v))
            .unwrap_or_else(|| "undefined".into())
    );
    println!("report -> {}", run_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn collect_scores(
    model: &mut ModelGraph,
    ds: &Dataset,
    indices: &[usize],
    scores: &mut [Vec<f64>],
    labels: &mut [Vec<f64>],
    seed: u64,
) -> Result<()> {
    let k = ds.num_classes();
    let mut rng = stream_rng(seed, Stream::Dropout);
    for chunk in indices.chunks(256) {
        let batch = ds.materialize(chunk)?;
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let xv = g.constant(batch.x);
        let logits = model.forward_full(&mut g, &vars, xv, Mode::Eval, &mut rng, false)?;
        let probs = g.value(logits).sigmoid();
        for (row, item) in chunk.iter().enumerate() {
            for c in 0..k {
                scores[c].push(probs.data()[row * k + c]);
                labels[c].push(ds.label(*item)[c]);
            }
        }
    }
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<ExitCode> {
    let mut cfg = load_file_config(&args.config.config)?;
    apply_overrides(&mut cfg, &args.overrides)?;
    let (ds, source) = resolve_dataset(&cfg, &args.data)?;

    let run_dir = make_run_dir(&out_root(&args.config.out_dir), "ablate", cfg.train.seed)?;
    write_manifest(
        &run_dir,
        &cfg,
        &[
            ("command".into(), "ablate".into()),
            ("data_source".into(), source),
            ("seeds".into(), args.seeds.to_string()),
        ],
    )?;

    let outcome = run_ablation(&cfg.model, &ds, &cfg.train, args.seeds, !args.sequential)?;
    let mut table = Vec::new();
    outcome.write_table_csv(&mut table)?;
    fs::write(run_dir.join("ablation_table.csv"), &table)?;
    let mut runs = Vec::new();
    outcome.write_runs_csv(&mut runs)?;
    fs::write(run_dir.join("runs.csv"), runs)?;
    // per-class aggregate of the full cell, one row per class plus MEAN
    if let Some(full) = outcome.cells.iter().find(|c| c.cell.name == "full") {
        if !full.val_reports.is_empty() {
            let rows = aggregate_runs(&full.val_reports)?;
            let mut csv = Vec::new();
            write_aggregate_csv(&rows, &mut csv)?;
            fs::write(run_dir.join("full_cell_per_class.csv"), csv)?;
        }
    }
    print!("{}", String::from_utf8_lossy(&table));
    println!("artifacts -> {}", run_dir.display());

    let failed = outcome.cells.iter().any(|c| c.failure.is_some());
    Ok(if failed {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    })
}

fn cmd_verify_ema(args: VerifyEmaArgs) -> Result<ExitCode> {
    let report = residual_ladder(args.dim, args.steps, args.m, args.eta, args.seed)?;
    let run_dir = make_run_dir(&out_root(&args.config.out_dir), "verify-ema", args.seed)?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    fs::write(run_dir.join("residuals.csv"), &csv)?;

    // frozen-parameter sanity: with eta = 0 the approximation is exact
    let toy = QuadraticToy::new(args.dim, args.seed);
    let frozen = toy.record_sgd(0.0, args.steps);
    let frozen_report = verify_unrolled_approximation(&frozen, args.m)?;
    let frozen_exact = frozen_report.rows.iter().all(|r| r.max_residual == 0.0);

    println!("eta ladder (steps={}, m={}):", args.steps, args.m);
    for (i, final_res) in report.final_residuals.iter().enumerate() {
        println!(
            "  eta={:10.3e}  final max residual = {:.6e}",
            args.eta / f64::powi(2.0, i as i32),
            final_res
        );
    }
    println!(
        "monotone decrease: {}; zero-eta residual exactly zero: {}",
        report.monotone, frozen_exact
    );
    println!("csv -> {}", run_dir.join("residuals.csv").display());
    if report.monotone && frozen_exact {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(2))
    }
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let mut all_ok = true;
    println!("{:<28} {:>14} {:>9} status", "op", "max_rel_error", "checked");
    let mut reports = run_op_checks(args.seed)?;
    reports.push(run_full_model_check(args.seed)?);
    for r in &reports {
        let ok = r.passed();
        all_ok &= ok;
        println!(
            "{:<28} {:>14.3e} {:>9} {}",
            r.name,
            r.max_rel_error,
            r.checked,
            if ok { "ok" } else { "FAIL" }
        );
    }
    println!("tolerance: {:.0e}", REL_TOL);
    Ok(if all_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn cmd_count(args: CountArgs) -> Result<ExitCode> {
    let mut cfg = load_file_config(&args.config.config)?;
    if let Some(v) = args.use_fusion {
        cfg.model.use_fusion = v;
    }
    if let Some(v) = args.use_momentum {
        cfg.model.use_momentum = v;
    }
    let model = build_model(&cfg.model, 0)?;
    let counts = model.count_params();
    println!("{:<12} {:>10}", "group", "params");
    for (kind, n) in &counts.per_group {
        println!("{:<12} {:>10}", kind.name(), n);
    }
    println!("{:<12} {:>10}", "total", counts.total);
    println!(
        "flop estimate per image: {} ({:.6} GFLOPs)",
        model.estimate_flops(),
        model.estimate_flops() as f64 / 1e9
    );
    if cfg.model.use_momentum {
        let equal = counts.group(GroupKind::Momentum) == counts.group(GroupKind::Expansion);
        println!(
            "momentum == expansion parameter count: {}",
            if equal { "yes" } else { "NO" }
        );
    }
    Ok(ExitCode::SUCCESS)
}
