//! Two-stage training, evaluation, and the 2x2 ablation runner.
//!
//! Stage 1 trains with binary cross-entropy on batches filtered to items
//! with at least one positive label; stage 2 trains with the asymmetric loss
//! on the full training split at a larger batch size. When the model carries
//! a momentum branch, the EMA update fires exactly once after every
//! optimizer step. Everything is a pure function of (config, dataset, seed).

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use crate::autograd::{Graph, Mode};
use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::data::{epoch_index_batches, Dataset, Split};
use crate::ema::{EmaState, SgdTrace};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::metrics::{aggregate_runs, AggregateRow, EvalReport};
use crate::model::{build_model, GroupKind, ModelConfig, ModelGraph};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::{stream_rng, Stream};

/// Steps and batch size of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageConfig {
    pub steps: usize,
    pub batch_size: usize,
}

/// Full training-run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub optimizer: OptimizerKind,
    pub eta: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// EMA coefficient of the momentum branch.
    pub momentum: f64,
    pub seed: u64,
    pub use_fusion: bool,
    pub use_momentum: bool,
    pub stop_gradient_momentum: bool,
    pub asl_gamma_pos: f64,
    pub asl_gamma_neg: f64,
    pub asl_prob_shift: f64,
    /// Record flattened expansion-state snapshots after every optimizer
    /// step (for the EMA closed-form cross-check; costs memory).
    pub record_history: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1: StageConfig {
                steps: 2000,
                batch_size: 64,
            },
            stage2: StageConfig {
                steps: 2000,
                batch_size: 128,
            },
            optimizer: OptimizerKind::Adam,
            eta: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            momentum: 0.999,
            seed: 0,
            use_fusion: true,
            use_momentum: true,
            stop_gradient_momentum: false,
            asl_gamma_pos: 0.0,
            asl_gamma_neg: 4.0,
            asl_prob_shift: 0.05,
            record_history: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage1.batch_size < 2 || self.stage2.batch_size < 2 {
            return Err(Error::Config(
                "train: batch sizes must be at least 2 (batch norm)".into(),
            ));
        }
        if self.eta <= 0.0 {
            return Err(Error::Config("train: eta must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "train: momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        LossConfig {
            kind: crate::loss::LossKind::Asl,
            gamma_pos: self.asl_gamma_pos,
            gamma_neg: self.asl_gamma_neg,
            prob_shift: self.asl_prob_shift,
        }
        .validate()
    }

    /// Specialize a base architecture to this run's ablation flags.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            use_fusion: self.use_fusion,
            use_momentum: self.use_momentum,
            ..base.clone()
        }
    }

    fn stage_loss(&self, stage: usize) -> LossConfig {
        if stage == 1 {
            LossConfig::bce()
        } else {
            LossConfig {
                kind: crate::loss::LossKind::Asl,
                gamma_pos: self.asl_gamma_pos,
                gamma_neg: self.asl_gamma_neg,
                prob_shift: self.asl_prob_shift,
            }
        }
    }
}

/// One loss-curve sample.
#[derive(Debug, Clone, Copy)]
pub struct LossPoint {
    pub step: usize,
    pub stage: usize,
    pub loss: f64,
}

/// Everything a finished training run reports.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub loss_curve: Vec<LossPoint>,
    pub optimizer_steps: u64,
    pub ema_updates: u64,
    pub stage1_batch_sizes: Vec<usize>,
    pub stage2_batch_sizes: Vec<usize>,
    /// Items per stage-1 batch that had no positive label (must stay 0).
    pub stage1_all_negative_items: usize,
    /// Expansion-state snapshots after each step, when recording.
    pub theta_history: Vec<Vec<f64>>,
    pub epsilon1: Option<Vec<f64>>,
    pub wall_secs: f64,
}

impl TrainOutcome {
    /// Loss-curve CSV: step, stage, loss_value.
    pub fn write_loss_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "step,stage,loss_value")?;
        for p in &self.loss_curve {
            writeln!(w, "{},{},{:.12}", p.step, p.stage, p.loss)?;
        }
        Ok(())
    }
}

fn flatten_expansion_state(model: &ModelGraph) -> Vec<f64> {
    let mut out = Vec::new();
    for t in model.group_state(GroupKind::Expansion) {
        out.extend_from_slice(t.data());
    }
    out
}

fn grad_norm_dump(model: &ModelGraph) -> String {
    let mut parts = Vec::new();
    for kind in GroupKind::ALL {
        let sq: f64 = model
            .group_params(kind)
            .iter()
            .filter_map(|t| t.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum();
        parts.push(format!("{}={:.6e}", kind.name(), sq.sqrt()));
    }
    parts.join(" ")
}

/// Run the two-stage protocol on a prebuilt model. Checkpoints land in
/// `run_dir` (stage1.ckpt, final.ckpt) when given.
pub fn train(
    model: &mut ModelGraph,
    dataset: &Dataset,
    config: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let started = Instant::now();
    let mut optimizer = Optimizer::new(
        config.optimizer,
        config.eta,
        config.adam_beta1,
        config.adam_beta2,
        config.adam_eps,
    );
    let mut ema = if model.momentum_enabled() {
        Some(EmaState::new(config.momentum)?)
    } else {
        None
    };
    let mut shuffle_rng = stream_rng(config.seed, Stream::Shuffle);
    let mut dropout_rng = stream_rng(config.seed, Stream::Dropout);

    let mut outcome = TrainOutcome {
        loss_curve: Vec::new(),
        optimizer_steps: 0,
        ema_updates: 0,
        stage1_batch_sizes: Vec::new(),
        stage2_batch_sizes: Vec::new(),
        stage1_all_negative_items: 0,
        theta_history: Vec::new(),
        epsilon1: config.record_history.then(|| flatten_expansion_state(model)),
        wall_secs: 0.0,
    };

    let mut global_step = 0usize;
    for stage in [1usize, 2] {
        let stage_cfg = if stage == 1 { config.stage1 } else { config.stage2 };
        let loss_cfg = config.stage_loss(stage);
        let positive_only = stage == 1;
        if stage_cfg.steps == 0 {
            continue;
        }
        let indices = dataset.stage_indices(Split::Train, positive_only)?;
        let mut done = 0usize;
        'epochs: loop {
            let batches =
                epoch_index_batches(&indices, stage_cfg.batch_size, Some(&mut shuffle_rng));
            for chunk in batches {
                if done == stage_cfg.steps {
                    break 'epochs;
                }
                let batch = dataset.materialize(&chunk)?;
                if positive_only {
                    outcome.stage1_all_negative_items += chunk
                        .iter()
                        .filter(|&&i| !dataset.has_positive(i))
                        .count();
                    outcome.stage1_batch_sizes.push(chunk.len());
                } else {
                    outcome.stage2_batch_sizes.push(chunk.len());
                }

                let mut g = Graph::new();
                let vars = model.bind(&mut g);
                let xv = g.constant(batch.x);
                let logits = model.forward_full(
                    &mut g,
                    &vars,
                    xv,
                    Mode::Train,
                    &mut dropout_rng,
                    config.stop_gradient_momentum,
                )?;
                let loss = loss_cfg.apply(&mut g, logits, &batch.y)?;
                let loss_value = g.value(loss).item()?;
                global_step += 1;
                if !loss_value.is_finite() {
                    // best-effort gradient norms for the diagnostic dump
                    let _ = g.backward(loss);
                    model.zero_grads();
                    let _ = model.accumulate_grads(&g, &vars);
                    return Err(Error::TrainAbort {
                        step: global_step,
                        diagnostic: format!(
                            "non-finite loss {} (stage {}, lr {:.3e}, grad norms {})",
                            loss_value,
                            stage,
                            config.eta,
                            grad_norm_dump(model)
                        ),
                    });
                }
                g.backward(loss)?;
                model.zero_grads();
                model.accumulate_grads(&g, &vars)?;
                optimizer.step(&mut model.trainable_params_mut())?;
                outcome.optimizer_steps += 1;
                if let Some(ema) = &mut ema {
                    let pairs = model.ema_pairs().expect("momentum branch present");
                    ema.update_pairs(pairs)?;
                    outcome.ema_updates += 1;
                }
                if config.record_history {
                    outcome.theta_history.push(flatten_expansion_state(model));
                }
                outcome.loss_curve.push(LossPoint {
                    step: global_step,
                    stage,
                    loss: loss_value,
                });
                done += 1;
            }
        }
        if let Some(dir) = run_dir {
            let name = if stage == 1 { "stage1.ckpt" } else { "final.ckpt" };
            let meta = CheckpointMeta {
                step: outcome.optimizer_steps,
                seed: config.seed,
                ema_m: ema.as_ref().map(|e| e.momentum()),
                ema_t: ema.as_ref().map(|e| e.step_count()).unwrap_or(0),
            };
            save_checkpoint(model, &meta, &dir.join(name))?;
        }
    }
    outcome.wall_secs = started.elapsed().as_secs_f64();
    Ok(outcome)
}

/// Record a plain-SGD trace of the full model suitable for the unrolled
/// approximation verifier (requires the SGD optimizer).
pub fn record_sgd_trace(
    model: &mut ModelGraph,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<SgdTrace> {
    if config.optimizer != OptimizerKind::Sgd {
        return Err(Error::Usage(
            "train: the unrolled approximation requires a plain SGD run".into(),
        ));
    }
    let mut cfg = config.clone();
    cfg.record_history = true;
    let theta1 = flatten_expansion_state(model);
    let outcome = train(model, dataset, &cfg, None)?;
    // gradient g_k reconstructed from consecutive snapshots: theta_{k+1} =
    // theta_k - eta * g_k, exactly how plain SGD produced them
    let mut theta = vec![theta1];
    theta.extend(outcome.theta_history.clone());
    let grads = theta
        .windows(2)
        .map(|w| {
            w[0].iter()
                .zip(&w[1])
                .map(|(a, b)| (a - b) / config.eta)
                .collect()
        })
        .collect();
    Ok(SgdTrace {
        eta: config.eta,
        theta,
        grads,
        epsilon1: outcome.epsilon1.expect("recording enabled"),
    })
}

/// Score a split: sigmoid over logits per class, then per-class ROC-AUC.
pub fn evaluate(
    model: &mut ModelGraph,
    dataset: &Dataset,
    split: Split,
    seed: u64,
) -> Result<EvalReport> {
    let indices = dataset.stage_indices(split, false)?;
    let k = dataset.num_classes();
    let mut scores: Vec<Vec<f64>> = vec![Vec::with_capacity(indices.len()); k];
    let mut labels: Vec<Vec<f64>> = vec![Vec::with_capacity(indices.len()); k];
    let mut dummy_rng = stream_rng(seed, Stream::Dropout);
    for chunk in indices.chunks(256) {
        let batch = dataset.materialize(chunk)?;
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let xv = g.constant(batch.x);
        let logits = model.forward_full(&mut g, &vars, xv, Mode::Eval, &mut dummy_rng, false)?;
        let probs = g.value(logits).sigmoid();
        for (row, item) in chunk.iter().enumerate() {
            for c in 0..k {
                scores[c].push(probs.data()[row * k + c]);
                labels[c].push(dataset.label(*item)[c]);
            }
        }
    }
    EvalReport::from_scores(seed, &dataset.class_names, &scores, &labels)
}

// ── ablation ────────────────────────────────────────────────────────────

/// One cell of the 2x2 {fusion, momentum} grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationCell {
    pub name: &'static str,
    pub use_fusion: bool,
    pub use_momentum: bool,
}

pub const ABLATION_CELLS: [AblationCell; 4] = [
    AblationCell {
        name: "baseline",
        use_fusion: false,
        use_momentum: false,
    },
    AblationCell {
        name: "fusion-only",
        use_fusion: true,
        use_momentum: false,
    },
    AblationCell {
        name: "momentum-only",
        use_fusion: false,
        use_momentum: true,
    },
    AblationCell {
        name: "full",
        use_fusion: true,
        use_momentum: true,
    },
];

/// Results of one cell across seeds.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: AblationCell,
    pub params: usize,
    pub flops: u64,
    pub val_reports: Vec<EvalReport>,
    pub test_reports: Vec<EvalReport>,
    pub wall_secs: f64,
    /// Set when any seed of this cell aborted.
    pub failure: Option<String>,
}

impl CellResult {
    pub fn val_mean_aucs(&self) -> Vec<f64> {
        self.val_reports.iter().filter_map(|r| r.mean_auc).collect()
    }

    pub fn aggregate_val(&self) -> Result<Vec<AggregateRow>> {
        aggregate_runs(&self.val_reports)
    }
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub cells: Vec<CellResult>,
    pub seeds: Vec<u64>,
}

/// Run the 2x2 grid across `n_seeds` consecutive seeds. Each run gets its
/// own split assignment and init/training seed (both vary together with the
/// run index). `parallel` fans runs out over threads; results are identical
/// either way.
pub fn run_ablation(
    base_model: &ModelConfig,
    dataset: &Dataset,
    base_train: &TrainConfig,
    n_seeds: usize,
    parallel: bool,
) -> Result<AblationOutcome> {
    if n_seeds == 0 {
        return Err(Error::Usage("ablation: need at least one seed".into()));
    }
    base_train.validate()?;

    // structural identities must hold before any training is worth doing
    let params_of = |cell: &AblationCell| -> Result<(usize, u64)> {
        let cfg = ModelConfig {
            use_fusion: cell.use_fusion,
            use_momentum: cell.use_momentum,
            ..base_model.clone()
        };
        let model = build_model(&cfg, 0)?;
        Ok((model.count_params().total, model.estimate_flops()))
    };
    let (p_base, f_base) = params_of(&ABLATION_CELLS[0])?;
    let (p_fuse, _) = params_of(&ABLATION_CELLS[1])?;
    let (p_mom, f_mom) = params_of(&ABLATION_CELLS[2])?;
    let (p_full, _) = params_of(&ABLATION_CELLS[3])?;
    if p_full - p_fuse != p_mom - p_base {
        return Err(Error::Corruption(format!(
            "ablation: momentum parameter delta differs across fusion rows ({} vs {})",
            p_full - p_fuse,
            p_mom - p_base
        )));
    }
    if f_mom <= f_base {
        return Err(Error::Corruption(
            "ablation: momentum branch must add forward FLOPs".into(),
        ));
    }

    let seeds: Vec<u64> = (0..n_seeds).map(|i| base_train.seed + i as u64).collect();
    let jobs: Vec<(usize, AblationCell, u64)> = ABLATION_CELLS
        .iter()
        .enumerate()
        .flat_map(|(ci, cell)| seeds.iter().map(move |&s| (ci, *cell, s)))
        .collect();

    let run_one = |cell: AblationCell, seed: u64| -> Result<(EvalReport, EvalReport, f64)> {
        let mut ds = dataset.clone();
        ds.assign_splits(crate::data::SplitFractions::default(), seed)?;
        let model_cfg = ModelConfig {
            use_fusion: cell.use_fusion,
            use_momentum: cell.use_momentum,
            ..base_model.clone()
        };
        let mut train_cfg = base_train.clone();
        train_cfg.seed = seed;
        train_cfg.use_fusion = cell.use_fusion;
        train_cfg.use_momentum = cell.use_momentum;
        let mut model = build_model(&model_cfg, seed)?;
        let started = Instant::now();
        train(&mut model, &ds, &train_cfg, None)?;
        let val = evaluate(&mut model, &ds, Split::Val, seed)?;
        let test = evaluate(&mut model, &ds, Split::Test, seed)?;
        Ok((val, test, started.elapsed().as_secs_f64()))
    };

    type JobResult = (usize, u64, Result<(EvalReport, EvalReport, f64)>);
    let mut results: Vec<JobResult> = Vec::new();
    if parallel {
        let workers = std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
            .max(1);
        for wave in jobs.chunks(workers) {
            let wave_results: Vec<JobResult> = std::thread::scope(|scope| {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|&(ci, cell, seed)| {
                        scope.spawn(move || (ci, seed, run_one(cell, seed)))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
            });
            results.extend(wave_results);
        }
    } else {
        for &(ci, cell, seed) in &jobs {
            results.push((ci, seed, run_one(cell, seed)));
        }
    }

    let mut cells: Vec<CellResult> = ABLATION_CELLS
        .iter()
        .enumerate()
        .map(|(i, &cell)| {
            let (params, flops) = match i {
                0 => (p_base, f_base),
                1 => (p_fuse, params_of(&ABLATION_CELLS[1]).map(|x| x.1).unwrap_or(0)),
                2 => (p_mom, f_mom),
                _ => (p_full, params_of(&ABLATION_CELLS[3]).map(|x| x.1).unwrap_or(0)),
            };
            CellResult {
                cell,
                params,
                flops,
                val_reports: Vec::new(),
                test_reports: Vec::new(),
                wall_secs: 0.0,
                failure: None,
            }
        })
        .collect();
    for (ci, seed, result) in results {
        match result {
            Ok((val, test, secs)) => {
                cells[ci].val_reports.push(val);
                cells[ci].test_reports.push(test);
                cells[ci].wall_secs += secs;
            }
            Err(e) => {
                let msg = format!("seed {}: {}", seed, e);
                cells[ci].failure = Some(match cells[ci].failure.take() {
                    Some(prev) => format!("{}; {}", prev, msg),
                    None => msg,
                });
            }
        }
    }
    Ok(AblationOutcome { cells, seeds })
}

impl AblationOutcome {
    /// Summary CSV shaped like the 2x2 ablation table: one row per cell with
    /// mean AUC +/- half-range over seeds, GFLOPs and parameter count.
    pub fn write_table_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(
            w,
            "cell,fusion,momentum,mean_auc,half_spread,std,gflops,params,status"
        )?;
        for cell in &self.cells {
            let (mean, spread, std) = match cell.aggregate_val() {
                Ok(rows) => {
                    let mean_row = rows.last().cloned();
                    match mean_row {
                        Some(r) => (
                            r.mean.map(|v| format!("{:.6}", v)).unwrap_or("NA".into()),
                            r.half_spread
                                .map(|v| format!("{:.6}", v))
                                .unwrap_or("NA".into()),
                            r.std.map(|v| format!("{:.6}", v)).unwrap_or("NA".into()),
                        ),
                        None => ("NA".into(), "NA".into(), "NA".into()),
                    }
                }
                Err(_) => ("NA".into(), "NA".into(), "NA".into()),
            };
            writeln!(
                w,
                "{},{},{},{},{},{},{:.6},{},{}",
                cell.cell.name,
                cell.cell.use_fusion,
                cell.cell.use_momentum,
                mean,
                spread,
                std,
                cell.flops as f64 / 1e9,
                cell.params,
                cell.failure.as_deref().unwrap_or("ok")
            )?;
        }
        Ok(())
    }

    /// Per-run CSV: cell, seed, split, mean AUC, and the per-seed delta of
    /// each cell against the baseline cell on the validation split.
    pub fn write_runs_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "cell,seed,split,mean_auc,delta_vs_baseline")?;
        let baseline: Vec<Option<f64>> = self.cells[0]
            .val_reports
            .iter()
            .map(|r| r.mean_auc)
            .collect();
        for cell in &self.cells {
            for (i, report) in cell.val_reports.iter().enumerate() {
                let delta = match (report.mean_auc, baseline.get(i).copied().flatten()) {
                    (Some(a), Some(b)) => format!("{:.6}", a - b),
                    _ => "NA".into(),
                };
                writeln!(
                    w,
                    "{},{},val,{},{}",
                    cell.cell.name,
                    report.seed,
                    report
                        .mean_auc
                        .map(|v| format!("{:.6}", v))
                        .unwrap_or("NA".into()),
                    delta
                )?;
            }
            for report in &cell.test_reports {
                writeln!(
                    w,
                    "{},{},test,{},NA",
                    cell.cell.name,
                    report.seed,
                    report
                        .mean_auc
                        .map(|v| format!("{:.6}", v))
                        .unwrap_or("NA".into()),
                )?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SplitFractions, SynthConfig};
    use crate::ema::{ema_closed_form, verify_unrolled_approximation};

    fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            input_height: 8,
            input_width: 8,
            backbone_stage_widths: vec![4],
            c_pre: 4,
            c_out: 8,
            fusion_reduction: 2,
            head_hidden: 6,
            num_classes: 4,
            ..ModelConfig::default()
        }
    }

    fn tiny_dataset(seed: u64) -> Dataset {
        let cfg = SynthConfig {
            num_classes: 4,
            num_images: 120,
            head_prevalence: 0.6,
            tail_ratio: 0.8,
            image_size: 8,
            seed,
            ..SynthConfig::default()
        };
        let mut ds = generate_synthetic(&cfg).unwrap();
        ds.assign_splits(SplitFractions::default(), seed).unwrap();
        ds
    }

    fn tiny_train_config(steps1: usize, steps2: usize) -> TrainConfig {
        TrainConfig {
            stage1: StageConfig {
                steps: steps1,
                batch_size: 16,
            },
            stage2: StageConfig {
                steps: steps2,
                batch_size: 24,
            },
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_steps_leaves_model_untouched() {
        let ds = tiny_dataset(1);
        let cfg = tiny_train_config(0, 0);
        let mut model = build_model(&cfg.model_config(&tiny_model_config()), 3).unwrap();
        let fresh = evaluate(&mut model, &ds, Split::Val, 3).unwrap();
        let outcome = train(&mut model, &ds, &cfg, None).unwrap();
        assert_eq!(outcome.optimizer_steps, 0);
        let after = evaluate(&mut model, &ds, Split::Val, 3).unwrap();
        for (a, b) in fresh.per_class.iter().zip(&after.per_class) {
            assert_eq!(a.auc, b.auc);
        }
    }

    #[test]
    fn ema_fires_once_per_optimizer_step() {
        let ds = tiny_dataset(2);
        let cfg = tiny_train_config(5, 4);
        let mut model = build_model(&cfg.model_config(&tiny_model_config()), 3).unwrap();
        let outcome = train(&mut model, &ds, &cfg, None).unwrap();
        assert_eq!(outcome.optimizer_steps, 9);
        assert_eq!(outcome.ema_updates, 9);
    }

    #[test]
    fn no_momentum_means_no_ema_updates() {
        let ds = tiny_dataset(2);
        let mut cfg = tiny_train_config(3, 2);
        cfg.use_momentum = false;
        let mut model = build_model(&cfg.model_config(&tiny_model_config()), 3).unwrap();
        assert!(!model.momentum_enabled());
        assert!(model.ema_pairs().is_none());
        let outcome = train(&mut model, &ds, &cfg, None).unwrap();
        assert_eq!(outcome.ema_updates, 0);
    }

    #[test]
    fn stage1_batches_have_no_all_negative_items() {
        let ds = tiny_dataset(4);
        let cfg = tiny_train_config(6, 3);
        let mut model = build_model(&cfg.model_config(&tiny_model_config()), 5).unwrap();
        let outcome = train(&mut model, &ds, &cfg, None).unwrap();
        assert_eq!(outcome.stage1_all_negative_items, 0);
        // every stage-1 batch is full except possibly the last of an epoch
        let full = cfg.stage1.batch_size;
        let n_stage1 = ds.stage_indices(Split::Train, true).unwrap().len();
        let last_of_epoch = n_stage1 % full;
        for &size in &outcome.stage1_batch_sizes {
            assert!(size == full || (last_of_epoch > 0 && size == last_of_epoch));
        }
    }

    #[test]
    fn ema_matches_closed_form_after_training() {
        let ds = tiny_dataset(5);
        let mut cfg = tiny_train_config(7, 4);
        cfg.record_history = true;
        cfg.momentum = 0.9;
        let mut model = build_model(&cfg.model_config(&tiny_model_config()), 6).unwrap();
        let outcome = train(&mut model, &ds, &cfg, None).unwrap();

        let eps1 = outcome.epsilon1.clone().unwrap();
        let t = outcome.theta_history.len() + 1;
        let closed = ema_closed_form(&outcome.theta_history, &eps1, 0.9, t).unwrap();
        let eps_now: Vec<f64> = model
            .group_state(GroupKind::Momentum)
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect();
        assert_eq!(closed.len(), eps_now.len());
        for (a, b) in eps_now.iter().zip(&closed) {
            let rel = (a - b).abs() / a.abs().max(1e-12);
            assert!(rel < 1e-10, "{} vs {}", a, b);
        }
    }

    #[test]
    fn optimizer_never_touches_momentum_group() {
        let ds = tiny_dataset(6);
        let mut cfg = tiny_train_config(4, 0);
        // EMA with m close to 1 barely moves; optimizer must not move eps at all.
        cfg.momentum = 0.0; // eps copies theta each step
        let mut model = build_model(&cfg.model_config(&tiny_model_config()), 7).unwrap();
        train(&mut model, &ds, &cfg, None).unwrap();
        // with m=0 the momentum state equals the live expansion state exactly
        let theta: Vec<f64> = model
            .group_state(GroupKind::Expansion)
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect();
        let eps: Vec<f64> = model
            .group_state(GroupKind::Momentum)
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect();
        assert_eq!(theta, eps);
    }

    #[test]
    fn training_is_bit_deterministic() {
        let ds = tiny_dataset(7);
        let cfg = tiny_train_config(4, 3);
        let run = || {
            let mut model = build_model(&cfg.model_config(&tiny_model_config()), 9).unwrap();
            train(&mut model, &ds, &cfg, None).unwrap();
            let mut out = Vec::new();
            for kind in GroupKind::ALL {
                for t in model.group_state(kind) {
                    out.extend(t.data().iter().map(|v| v.to_bits()));
                }
            }
            out
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sgd_trace_passes_the_unrolled_verifier() {
        let ds = tiny_dataset(8);
        let mut cfg = tiny_train_config(10, 0);
        cfg.optimizer = OptimizerKind::Sgd;
        cfg.eta = 1e-3;
        let mut model = build_model(&cfg.model_config(&tiny_model_config()), 10).unwrap();
        let trace = record_sgd_trace(&mut model, &ds, &cfg).unwrap();
        let report = verify_unrolled_approximation(&trace, 0.9).unwrap();
        assert_eq!(report.rows.len(), 11);
        // residuals exist and are finite
        assert!(report.final_max_residual().is_finite());
    }

    #[test]
    fn record_trace_requires_sgd() {
        let ds = tiny_dataset(8);
        let cfg = tiny_train_config(2, 0);
        let mut model = build_model(&cfg.model_config(&tiny_model_config()), 10).unwrap();
        assert!(matches!(
            record_sgd_trace(&mut model, &ds, &cfg),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn evaluate_twice_is_identical() {
        let ds = tiny_dataset(9);
        let mut model = build_model(&tiny_model_config(), 11).unwrap();
        let a = evaluate(&mut model, &ds, Split::Test, 0).unwrap();
        let b = evaluate(&mut model, &ds, Split::Test, 0).unwrap();
        for (x, y) in a.per_class.iter().zip(&b.per_class) {
            assert_eq!(x.auc, y.auc);
        }
    }

    #[test]
    fn untrained_model_scores_near_chance_on_balanced_data() {
        let cfg = SynthConfig {
            num_classes: 3,
            num_images: 600,
            head_prevalence: 0.5,
            tail_ratio: 1.0,
            image_size: 8,
            seed: 21,
            ..SynthConfig::default()
        };
        let mut means = Vec::new();
        for seed in 0..3u64 {
            let mut ds = generate_synthetic(&cfg).unwrap();
            ds.assign_splits(SplitFractions::default(), seed).unwrap();
            let model_cfg = ModelConfig {
                num_classes: 3,
                ..tiny_model_config()
            };
            let mut model = build_model(&model_cfg, seed).unwrap();
            let report = evaluate(&mut model, &ds, Split::Val, seed).unwrap();
            means.push(report.mean_auc.unwrap());
        }
        let grand = means.iter().sum::<f64>() / means.len() as f64;
        assert!(
            (0.4..=0.6).contains(&grand),
            "untrained mean AUC {} outside chance band",
            grand
        );
    }

    #[test]
    fn checkpoints_written_at_stage_boundaries() {
        let ds = tiny_dataset(10);
        let cfg = tiny_train_config(2, 2);
        let mut model = build_model(&cfg.model_config(&tiny_model_config()), 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        train(&mut model, &ds, &cfg, Some(dir.path())).unwrap();
        assert!(dir.path().join("stage1.ckpt").is_file());
        assert!(dir.path().join("final.ckpt").is_file());
    }

    #[test]
    fn ablation_structural_identities_and_csv() {
        let ds = tiny_dataset(11);
        let mut cfg = tiny_train_config(2, 1);
        cfg.seed = 0;
        let outcome = run_ablation(&tiny_model_config(), &ds, &cfg, 2, false).unwrap();
        assert_eq!(outcome.cells.len(), 4);
        for cell in &outcome.cells {
            assert!(cell.failure.is_none(), "{:?}", cell.failure);
            assert_eq!(cell.val_reports.len(), 2);
        }
        // param identity across rows
        let p: Vec<usize> = outcome.cells.iter().map(|c| c.params).collect();
        assert_eq!(p[3] - p[1], p[2] - p[0]);
        let f: Vec<u64> = outcome.cells.iter().map(|c| c.flops).collect();
        assert!(f[2] > f[0]);

        let mut table = Vec::new();
        outcome.write_table_csv(&mut table).unwrap();
        let table = String::from_utf8(table).unwrap();
        assert!(table.lines().count() == 5);
        assert!(table.contains("baseline") && table.contains("full"));
        let mut runs = Vec::new();
        outcome.write_runs_csv(&mut runs).unwrap();
        assert!(String::from_utf8(runs).unwrap().contains("delta_vs_baseline"));
    }
}
