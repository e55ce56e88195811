//! Losses and the progressive three-stage training procedure.
//!
//! Stage 1 trains the object head alone on the object loss. Stage 2 trains
//! the state head together with the object-to-state memory unit on the
//! conditioned state loss, treating the object branch as a frozen
//! conditioning source. Stage 3 fine-tunes everything on the summed
//! conditioned visual-product loss. The joint variant runs only the Stage 3
//! optimization from scratch, optionally including the backbone when the
//! model was built trainable.
//!
//! Each stage updates exactly its parameter scope; everything outside the
//! scope stays bit-identical. "Converged" is realized as patience-based
//! early stopping on the stage's validation metric.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::data::{batch_iterator, mix_seed, DataError, Dataset, SpaceMask, Split, SplitManifest};
use crate::eval::{self, EvalError};
use crate::model::{CpcDirection, ModelError, Primitive, ProCCModel};
use crate::params::{OptimState, OptimizerMode, Scope};
use crate::tensor::{KernelError, Tensor2};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("batch has zero {0}-labeled records")]
    NoLabeledRecords(&'static str),
    #[error("batch has no labels at all")]
    NoLabelsAtAll,
    #[error("stage order violation: model has completed stage {done}, cannot run stage {requested}")]
    StageOrder { done: u8, requested: u8 },
    #[error("this mode requires a freshly initialized model")]
    NotFresh,
    #[error("invalid stage configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageId {
    One,
    Two,
    Three,
}

impl StageId {
    pub fn index(self) -> u8 {
        match self {
            StageId::One => 1,
            StageId::Two => 2,
            StageId::Three => 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StageConfig {
    pub stage: StageId,
    pub lr: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub optimizer: OptimizerMode,
}

impl StageConfig {
    pub fn new(stage: StageId) -> Self {
        StageConfig {
            stage,
            lr: 1e-3,
            max_epochs: 200,
            batch_size: 128,
            patience: 10,
            optimizer: OptimizerMode::Adam,
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        if self.lr <= 0.0 {
            return Err(TrainError::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(TrainError::InvalidConfig("patience must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    Patience,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub stage: StageId,
    pub train_loss: Vec<f64>,
    pub val_metric: Vec<f64>,
    /// Cumulative wall seconds at the end of each epoch.
    pub epoch_seconds: Vec<f64>,
    pub epochs_run: usize,
    pub wall_seconds: f64,
    pub stopped: StopReason,
}

/// Everything a training run reads besides the model.
pub struct TrainContext<'a> {
    pub dataset: &'a Dataset,
    pub manifest: &'a SplitManifest,
    pub shuffle_seed: u64,
}

pub fn gather_batch(
    dataset: &Dataset,
    indices: &[usize],
) -> Result<(Tensor2, Vec<Option<usize>>, Vec<Option<usize>>), TrainError> {
    let mut data = Vec::with_capacity(indices.len() * dataset.dim);
    let mut state_labels = Vec::with_capacity(indices.len());
    let mut object_labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let rec = &dataset.records[i];
        data.extend_from_slice(&rec.feature);
        state_labels.push(rec.label.state);
        object_labels.push(rec.label.object);
    }
    let features = Tensor2::from_vec(indices.len(), dataset.dim, data)?;
    Ok((features, state_labels, object_labels))
}

fn labels_mask(labels: &[Option<usize>]) -> (Vec<usize>, Vec<bool>) {
    let mask: Vec<bool> = labels.iter().map(Option::is_some).collect();
    let ids: Vec<usize> = labels.iter().map(|l| l.unwrap_or(0)).collect();
    (ids, mask)
}

/// Cross-entropy of the unconditioned object head against object labels,
/// averaged over the labeled records.
pub fn loss_obj(
    model: &ProCCModel,
    tape: &mut Tape,
    features: &Tensor2,
    object_labels: &[Option<usize>],
) -> Result<Var, TrainError> {
    let (ids, mask) = labels_mask(object_labels);
    if !mask.iter().any(|&m| m) {
        return Err(TrainError::NoLabeledRecords("object"));
    }
    let embed = model.tape_embed(tape, features)?;
    let (logits, _) = model.tape_head(tape, Primitive::Object, embed)?;
    let probs = tape.softmax_rows(logits)?;
    Ok(tape.cross_entropy_mean(probs, ids, mask)?)
}

/// Cross-entropy of the conditioned state distribution against state labels.
/// With `freeze_conditioning` the object branch acts as a pure conditioning
/// signal: no gradient flows into it.
pub fn loss_state_con(
    model: &ProCCModel,
    tape: &mut Tape,
    features: &Tensor2,
    state_labels: &[Option<usize>],
    freeze_conditioning: bool,
) -> Result<Var, TrainError> {
    let (ids, mask) = labels_mask(state_labels);
    if !mask.iter().any(|&m| m) {
        return Err(TrainError::NoLabeledRecords("state"));
    }
    let embed = model.tape_embed(tape, features)?;
    let (_, object_penult) = model.tape_head(tape, Primitive::Object, embed)?;
    let cond = if freeze_conditioning {
        tape.detach(object_penult)
    } else {
        object_penult
    };
    let compat = model.tape_cpm(tape, CpcDirection::ObjectToState, cond)?;
    let (state_logits, _) = model.tape_head(tape, Primitive::State, embed)?;
    let p_state = model.tape_fuse(tape, state_logits, compat)?;
    Ok(tape.cross_entropy_mean(p_state, ids, mask)?)
}

/// Sum of the conditioned state loss and the conditioned object loss, each
/// averaged over its labeled records. Gradient reaches all four parameter
/// groups.
pub fn loss_vp_con(
    model: &ProCCModel,
    tape: &mut Tape,
    features: &Tensor2,
    state_labels: &[Option<usize>],
    object_labels: &[Option<usize>],
) -> Result<Var, TrainError> {
    let (sids, smask) = labels_mask(state_labels);
    let (oids, omask) = labels_mask(object_labels);
    if !smask.iter().any(|&m| m) && !omask.iter().any(|&m| m) {
        return Err(TrainError::NoLabelsAtAll);
    }
    let fwd = model.tape_forward(tape, features, true, false)?;
    let state_term = tape.cross_entropy_mean(fwd.p_state, sids, smask)?;
    let object_term = tape.cross_entropy_mean(fwd.p_object, oids, omask)?;
    Ok(tape.add(state_term, object_term)?)
}

fn stage_scope(stage: StageId, include_backbone: bool) -> Scope {
    let mut prefixes: Vec<&str> = match stage {
        StageId::One => vec!["phi_o"],
        StageId::Two => vec!["phi_s", "cpc_o_to_s"],
        StageId::Three => vec!["phi_o", "phi_s", "cpc_o_to_s", "cpc_s_to_o"],
    };
    if include_backbone {
        prefixes.push("backbone");
    }
    Scope::new(prefixes)
}

fn stage_batch_loss(
    model: &ProCCModel,
    stage: StageId,
    tape: &mut Tape,
    features: &Tensor2,
    state_labels: &[Option<usize>],
    object_labels: &[Option<usize>],
) -> Result<Var, TrainError> {
    match stage {
        StageId::One => loss_obj(model, tape, features, object_labels),
        StageId::Two => loss_state_con(model, tape, features, state_labels, true),
        StageId::Three => loss_vp_con(model, tape, features, state_labels, object_labels),
    }
}

/// Per-epoch validation metric: object accuracy for Stage 1, conditioned
/// state accuracy for Stage 2, closed-world best harmonic mean on the
/// validation unseen set for Stage 3. An empty validation split scores 0.
fn stage_val_metric(
    model: &ProCCModel,
    ctx: &TrainContext,
    stage: StageId,
) -> Result<f64, TrainError> {
    if ctx.dataset.split_indices(Split::Val).is_empty() {
        return Ok(0.0);
    }
    match stage {
        StageId::One => {
            let acc = eval::primitive_accuracy(model, ctx.dataset, Split::Val)?;
            Ok(acc.object_uncond)
        }
        StageId::Two => {
            let acc = eval::primitive_accuracy(model, ctx.dataset, Split::Val)?;
            Ok(acc.state_cond)
        }
        StageId::Three => {
            let mask = SpaceMask::closed_val(ctx.manifest);
            let summary = eval::sweep_metrics(
                model,
                ctx.dataset,
                Split::Val,
                &mask,
                &ctx.manifest.seen_pairs,
                eval::DEFAULT_N_BIASES,
            )?;
            Ok(summary.best_hm)
        }
    }
}

fn run_stage_with_scope(
    model: &mut ProCCModel,
    ctx: &TrainContext,
    cfg: &StageConfig,
    scope: &Scope,
    restore_best: bool,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    let start = Instant::now();
    let n_train = ctx.dataset.split_indices(Split::Train).len();
    if n_train == 0 {
        return Err(DataError::EmptySplit(Split::Train).into());
    }

    // Optimizer state is re-initialized per stage.
    let mut optim = OptimState::new(cfg.optimizer, cfg.lr);
    let mut report = TrainReport {
        stage: cfg.stage,
        train_loss: Vec::new(),
        val_metric: Vec::new(),
        epoch_seconds: Vec::new(),
        epochs_run: 0,
        wall_seconds: 0.0,
        stopped: StopReason::MaxEpochs,
    };
    let mut best_metric = f64::NEG_INFINITY;
    let mut best_snapshot: Option<BTreeMap<String, Tensor2>> = None;
    let mut epochs_since_best = 0usize;
    let stage_seed = mix_seed(ctx.shuffle_seed, cfg.stage.index() as u64);

    for epoch in 0..cfg.max_epochs {
        let batches = batch_iterator(
            ctx.dataset,
            Split::Train,
            cfg.batch_size,
            stage_seed,
            epoch as u64,
        )?;
        let mut loss_sum = 0.0;
        for batch in &batches {
            let (features, state_labels, object_labels) = gather_batch(ctx.dataset, batch)?;
            let mut tape = Tape::new();
            let loss = stage_batch_loss(
                model,
                cfg.stage,
                &mut tape,
                &features,
                &state_labels,
                &object_labels,
            )?;
            loss_sum += tape.value(loss).get(0, 0) * batch.len() as f64;
            tape.backward_into(loss, &mut model.params)?;
            optim.step(&mut model.params, scope)?;
        }
        let metric = stage_val_metric(model, ctx, cfg.stage)?;
        report.train_loss.push(loss_sum / n_train as f64);
        report.val_metric.push(metric);
        report.epoch_seconds.push(start.elapsed().as_secs_f64());
        report.epochs_run = epoch + 1;
        if metric > best_metric {
            best_metric = metric;
            epochs_since_best = 0;
            if restore_best {
                best_snapshot = Some(model.params.snapshot());
            }
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= cfg.patience {
                report.stopped = StopReason::Patience;
                break;
            }
        }
    }

    if let Some(snapshot) = best_snapshot {
        model.params.restore(&snapshot);
    }
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Runs one stage of the progressive schedule. Stages must be run in order;
/// parameters outside the stage's scope stay bit-identical.
pub fn run_stage(
    model: &mut ProCCModel,
    ctx: &TrainContext,
    cfg: &StageConfig,
) -> Result<TrainReport, TrainError> {
    let requested = cfg.stage.index();
    if requested != model.stages_done + 1 {
        return Err(TrainError::StageOrder {
            done: model.stages_done,
            requested,
        });
    }
    let scope = stage_scope(cfg.stage, false);
    let restore_best = cfg.stage == StageId::Three;
    let report = run_stage_with_scope(model, ctx, cfg, &scope, restore_best)?;
    model.stages_done = requested;
    Ok(report)
}

/// Runs stages 1, 2, 3 in order on a fresh model. The final parameters are
/// the Stage 3 best-validation checkpoint.
pub fn run_progressive(
    model: &mut ProCCModel,
    ctx: &TrainContext,
    configs: &[StageConfig; 3],
) -> Result<[TrainReport; 3], TrainError> {
    if model.stages_done != 0 {
        return Err(TrainError::NotFresh);
    }
    let expect = [StageId::One, StageId::Two, StageId::Three];
    for (cfg, want) in configs.iter().zip(expect) {
        if cfg.stage != want {
            return Err(TrainError::InvalidConfig(format!(
                "progressive configs must be stages 1, 2, 3 in order; got stage {}",
                cfg.stage.index()
            )));
        }
    }
    let r1 = run_stage(model, ctx, &configs[0])?;
    let r2 = run_stage(model, ctx, &configs[1])?;
    let r3 = run_stage(model, ctx, &configs[2])?;
    Ok([r1, r2, r3])
}

/// Joint training: a single optimization of the whole network with the
/// Stage 3 loss. Includes the backbone when the model is backbone-trainable.
pub fn run_joint(
    model: &mut ProCCModel,
    ctx: &TrainContext,
    cfg: &StageConfig,
) -> Result<TrainReport, TrainError> {
    if model.stages_done != 0 {
        return Err(TrainError::NotFresh);
    }
    if cfg.stage != StageId::Three {
        return Err(TrainError::InvalidConfig(
            "joint training uses a stage-3 configuration".into(),
        ));
    }
    let scope = stage_scope(StageId::Three, model.cfg.backbone_trainable);
    let report = run_stage_with_scope(model, ctx, cfg, &scope, true)?;
    model.stages_done = 3;
    Ok(report)
}

/// Writes one stage report as `epoch,train_loss,val_metric,seconds`.
pub fn write_stage_report(path: &Path, report: &TrainReport) -> Result<(), TrainError> {
    let mut out = String::from("epoch,train_loss,val_metric,seconds\n");
    for e in 0..report.epochs_run {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            e + 1,
            report.train_loss[e],
            report.val_metric[e],
            report.epoch_seconds[e]
        );
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Progressive,
    Joint,
}

/// Orchestrated run: trains the model and emits the run directory layout
/// (`config.txt`, per-stage report CSVs, checkpoints, `walltime.txt`).
pub fn execute_training_run(
    model: &mut ProCCModel,
    ctx: &TrainContext,
    mode: TrainMode,
    configs: &[StageConfig; 3],
    out_dir: &Path,
    config_dump: &str,
) -> Result<Vec<TrainReport>, TrainError> {
    let start = Instant::now();
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.txt"), config_dump)?;
    model.save(&out_dir.join("checkpoint_init"))?;
    let reports = match mode {
        TrainMode::Progressive => {
            if model.stages_done != 0 {
                return Err(TrainError::NotFresh);
            }
            let mut reports = Vec::with_capacity(3);
            for (i, cfg) in configs.iter().enumerate() {
                let report = run_stage(model, ctx, cfg)?;
                write_stage_report(
                    &out_dir.join(format!("report_stage{}.csv", cfg.stage.index())),
                    &report,
                )?;
                reports.push(report);
                if i < 2 {
                    model.save(&out_dir.join(format!("checkpoint_stage{}", i + 1)))?;
                }
            }
            reports
        }
        TrainMode::Joint => {
            let report = run_joint(model, ctx, &configs[2])?;
            write_stage_report(&out_dir.join("report_stage3.csv"), &report)?;
            vec![report]
        }
    };
    model.save(&out_dir.join("checkpoint_final"))?;
    let total = start.elapsed().as_secs_f64();
    fs::write(out_dir.join("walltime.txt"), format!("{total}\n"))?;
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_world, SyntheticWorldConfig};
    use crate::model::ModelConfig;
    use crate::tensor::cross_entropy;

    fn tiny_world() -> (Dataset, SplitManifest) {
        let cfg = SyntheticWorldConfig {
            n_states: 4,
            n_objects: 3,
            feature_dim: 8,
            feasibility_density: 0.9,
            seen_fraction: 0.6,
            samples_per_seen_pair: 6,
            noise_sigma: 0.1,
            seed: 31,
            ..Default::default()
        };
        let (ds, mf, _) = generate_synthetic_world(&cfg).unwrap();
        (ds, mf)
    }

    fn model_for(ds: &Dataset, mf: &SplitManifest, seed: u64) -> ProCCModel {
        let cfg = ModelConfig {
            raw_dim: ds.dim,
            d: ds.dim,
            n_layers: 2,
            n_states: mf.n_states(),
            n_objects: mf.n_objects(),
            cpm_kernel_len: 3,
            alpha: 1.0,
            backbone_trainable: false,
        };
        ProCCModel::init(cfg, seed).unwrap()
    }

    fn zeroed(mut m: ProCCModel) -> ProCCModel {
        let names: Vec<String> = m.params.names().map(str::to_string).collect();
        for name in names {
            let shape = m.params.value(&name).unwrap().shape();
            m.params
                .set_value(&name, Tensor2::zeros(shape.0, shape.1))
                .unwrap();
        }
        m
    }

    #[test]
    fn zero_model_object_loss_is_log_classes() {
        let (ds, mf) = tiny_world();
        let m = zeroed(model_for(&ds, &mf, 1));
        let idx = ds.split_indices(Split::Train);
        let (features, _, olabels) = gather_batch(&ds, &idx[..4]).unwrap();
        let mut tape = Tape::new();
        let loss = loss_obj(&m, &mut tape, &features, &olabels).unwrap();
        let expect = (mf.n_objects() as f64).ln();
        assert!((tape.value(loss).get(0, 0) - expect).abs() < 1e-12);
    }

    #[test]
    fn zero_model_conditioned_losses_are_uniform() {
        let (ds, mf) = tiny_world();
        let m = zeroed(model_for(&ds, &mf, 1));
        let idx = ds.split_indices(Split::Train);
        let (features, slabels, olabels) = gather_batch(&ds, &idx[..4]).unwrap();
        let mut tape = Tape::new();
        let loss = loss_state_con(&m, &mut tape, &features, &slabels, true).unwrap();
        assert!((tape.value(loss).get(0, 0) - (mf.n_states() as f64).ln()).abs() < 1e-12);
        let mut tape = Tape::new();
        let loss = loss_vp_con(&m, &mut tape, &features, &slabels, &olabels).unwrap();
        let expect = (mf.n_states() as f64).ln() + (mf.n_objects() as f64).ln();
        assert!((tape.value(loss).get(0, 0) - expect).abs() < 1e-12);
    }

    #[test]
    fn vp_loss_is_sum_of_conditioned_terms() {
        let (ds, mf) = tiny_world();
        let m = model_for(&ds, &mf, 5);
        let idx = ds.split_indices(Split::Train);
        let (features, slabels, olabels) = gather_batch(&ds, &idx[..6]).unwrap();

        let mut tape = Tape::new();
        let vp = loss_vp_con(&m, &mut tape, &features, &slabels, &olabels).unwrap();
        let vp_value = tape.value(vp).get(0, 0);

        // State term with unfrozen conditioning plus the symmetric object term.
        let mut tape2 = Tape::new();
        let state = loss_state_con(&m, &mut tape2, &features, &slabels, false).unwrap();
        let state_value = tape2.value(state).get(0, 0);

        let (ids, mask) = labels_mask(&olabels);
        let mut tape3 = Tape::new();
        let fwd = m.tape_forward(&mut tape3, &features, true, false).unwrap();
        let obj = tape3.cross_entropy_mean(fwd.p_object, ids, mask).unwrap();
        let obj_value = tape3.value(obj).get(0, 0);

        assert!((vp_value - (state_value + obj_value)).abs() < 1e-12);
    }

    #[test]
    fn vp_gradient_reaches_all_four_groups() {
        let (ds, mf) = tiny_world();
        let mut m = model_for(&ds, &mf, 5);
        let idx = ds.split_indices(Split::Train);
        let (features, slabels, olabels) = gather_batch(&ds, &idx[..6]).unwrap();
        let mut tape = Tape::new();
        let loss = loss_vp_con(&m, &mut tape, &features, &slabels, &olabels).unwrap();
        tape.backward_into(loss, &mut m.params).unwrap();
        for group in ["phi_o", "phi_s", "cpc_o_to_s", "cpc_s_to_o"] {
            let scope = Scope::new([group]);
            let nonzero = m
                .params
                .iter()
                .filter(|(name, _)| scope.matches(name))
                .any(|(_, e)| e.grad.data().iter().any(|&g| g != 0.0));
            assert!(nonzero, "no gradient reached {group}");
        }
    }

    #[test]
    fn frozen_conditioning_blocks_object_gradient() {
        let (ds, mf) = tiny_world();
        let mut m = model_for(&ds, &mf, 5);
        let idx = ds.split_indices(Split::Train);
        let (features, slabels, _) = gather_batch(&ds, &idx[..6]).unwrap();
        let mut tape = Tape::new();
        let loss = loss_state_con(&m, &mut tape, &features, &slabels, true).unwrap();
        tape.backward_into(loss, &mut m.params).unwrap();
        let scope = Scope::new(["phi_o"]);
        let any_nonzero = m
            .params
            .iter()
            .filter(|(name, _)| scope.matches(name))
            .any(|(_, e)| e.grad.data().iter().any(|&g| g != 0.0));
        assert!(!any_nonzero, "frozen conditioning must not reach phi_o");
    }

    #[test]
    fn partial_labels_average_over_labeled_half_only() {
        let (ds, mf) = tiny_world();
        let m = model_for(&ds, &mf, 2);
        let idx = ds.split_indices(Split::Train);
        let (features, _, olabels) = gather_batch(&ds, &idx[..4]).unwrap();
        let half: Vec<Option<usize>> = olabels
            .iter()
            .enumerate()
            .map(|(i, &l)| if i % 2 == 0 { l } else { None })
            .collect();
        let mut tape = Tape::new();
        let loss = loss_obj(&m, &mut tape, &features, &half).unwrap();
        let got = tape.value(loss).get(0, 0);

        // Reference: the same probabilities, averaged by hand over the
        // labeled rows only.
        let (_, probs) = m.eval_probs(&features, false).unwrap();
        let (ids, mask) = labels_mask(&half);
        let expect = cross_entropy(&probs, &ids, &mask).unwrap();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn empty_label_batches_error() {
        let (ds, mf) = tiny_world();
        let m = model_for(&ds, &mf, 2);
        let idx = ds.split_indices(Split::Train);
        let (features, _, _) = gather_batch(&ds, &idx[..3]).unwrap();
        let none: Vec<Option<usize>> = vec![None; 3];
        let mut tape = Tape::new();
        assert!(matches!(
            loss_obj(&m, &mut tape, &features, &none),
            Err(TrainError::NoLabeledRecords("object"))
        ));
        let mut tape = Tape::new();
        assert!(matches!(
            loss_vp_con(&m, &mut tape, &features, &none, &none),
            Err(TrainError::NoLabelsAtAll)
        ));
    }

    #[test]
    fn stage_order_enforced() {
        let (ds, mf) = tiny_world();
        let mut m = model_for(&ds, &mf, 3);
        let ctx = TrainContext {
            dataset: &ds,
            manifest: &mf,
            shuffle_seed: 1,
        };
        let cfg2 = StageConfig {
            max_epochs: 1,
            ..StageConfig::new(StageId::Two)
        };
        assert!(matches!(
            run_stage(&mut m, &ctx, &cfg2),
            Err(TrainError::StageOrder {
                done: 0,
                requested: 2
            })
        ));
    }

    #[test]
    fn zero_epoch_stages_leave_model_unchanged() {
        let (ds, mf) = tiny_world();
        let mut m = model_for(&ds, &mf, 3);
        let before = m.params.snapshot();
        let ctx = TrainContext {
            dataset: &ds,
            manifest: &mf,
            shuffle_seed: 1,
        };
        let configs = [
            StageConfig {
                max_epochs: 0,
                ..StageConfig::new(StageId::One)
            },
            StageConfig {
                max_epochs: 0,
                ..StageConfig::new(StageId::Two)
            },
            StageConfig {
                max_epochs: 0,
                ..StageConfig::new(StageId::Three)
            },
        ];
        let reports = run_progressive(&mut m, &ctx, &configs).unwrap();
        let all = Scope::new(["phi_o", "phi_s", "cpc_o_to_s", "cpc_s_to_o", "backbone"]);
        assert!(m.params.bits_eq_within(&before, &all));
        assert_eq!(reports[0].epochs_run, 0);
        assert!(reports[0].train_loss.is_empty());
    }

    #[test]
    fn stage_scoping_contract() {
        let (ds, mf) = tiny_world();
        let mut m = model_for(&ds, &mf, 4);
        let ctx = TrainContext {
            dataset: &ds,
            manifest: &mf,
            shuffle_seed: 9,
        };
        let init = m.params.snapshot();
        let mk = |stage, epochs| StageConfig {
            max_epochs: epochs,
            batch_size: 16,
            ..StageConfig::new(stage)
        };

        run_stage(&mut m, &ctx, &mk(StageId::One, 3)).unwrap();
        assert!(m.params.bits_eq_within(
            &init,
            &Scope::new(["phi_s", "cpc_o_to_s", "cpc_s_to_o", "backbone"])
        ));
        assert!(!m.params.bits_eq_within(&init, &Scope::new(["phi_o"])));

        let after_stage1 = m.params.snapshot();
        run_stage(&mut m, &ctx, &mk(StageId::Two, 3)).unwrap();
        assert!(m.params.bits_eq_within(
            &after_stage1,
            &Scope::new(["phi_o", "cpc_s_to_o", "backbone"])
        ));
        assert!(!m.params.bits_eq_within(&after_stage1, &Scope::new(["phi_s"])));
        assert!(!m
            .params
            .bits_eq_within(&after_stage1, &Scope::new(["cpc_o_to_s"])));

        let after_stage2 = m.params.snapshot();
        run_stage(&mut m, &ctx, &mk(StageId::Three, 3)).unwrap();
        assert!(m
            .params
            .bits_eq_within(&after_stage2, &Scope::new(["backbone"])));
        for group in ["phi_o", "phi_s", "cpc_o_to_s", "cpc_s_to_o"] {
            assert!(
                !m.params.bits_eq_within(&after_stage2, &Scope::new([group])),
                "stage 3 should move {group}"
            );
        }
    }

    #[test]
    fn joint_respects_backbone_flag() {
        let (ds, mf) = tiny_world();
        let ctx = TrainContext {
            dataset: &ds,
            manifest: &mf,
            shuffle_seed: 2,
        };
        let cfg = StageConfig {
            max_epochs: 2,
            batch_size: 16,
            ..StageConfig::new(StageId::Three)
        };

        let mut frozen = model_for(&ds, &mf, 6);
        let before = frozen.params.snapshot();
        run_joint(&mut frozen, &ctx, &cfg).unwrap();
        assert!(frozen
            .params
            .bits_eq_within(&before, &Scope::new(["backbone"])));

        let mut up = model_for(&ds, &mf, 6);
        up.cfg.backbone_trainable = true;
        let before = up.params.snapshot();
        run_joint(&mut up, &ctx, &cfg).unwrap();
        assert!(!up.params.bits_eq_within(&before, &Scope::new(["backbone"])));
    }

    #[test]
    fn training_is_deterministic() {
        let (ds, mf) = tiny_world();
        let ctx = TrainContext {
            dataset: &ds,
            manifest: &mf,
            shuffle_seed: 5,
        };
        let mk = |stage| StageConfig {
            max_epochs: 3,
            batch_size: 16,
            ..StageConfig::new(stage)
        };
        let configs = [mk(StageId::One), mk(StageId::Two), mk(StageId::Three)];
        let mut m1 = model_for(&ds, &mf, 7);
        run_progressive(&mut m1, &ctx, &configs).unwrap();
        let mut m2 = model_for(&ds, &mf, 7);
        run_progressive(&mut m2, &ctx, &configs).unwrap();
        for (name, entry) in m1.params.iter() {
            assert!(
                entry.value.bits_eq(m2.params.value(name).unwrap()),
                "{name} not reproducible"
            );
        }
    }

    #[test]
    fn plain_descent_loss_non_increasing_on_separable_world() {
        let cfg = SyntheticWorldConfig {
            n_states: 2,
            n_objects: 2,
            feature_dim: 6,
            feasibility_density: 1.0,
            seen_fraction: 0.75,
            samples_per_seen_pair: 8,
            noise_sigma: 0.01,
            seed: 13,
            ..Default::default()
        };
        let (ds, mf, _) = generate_synthetic_world(&cfg).unwrap();
        let mut m = model_for(&ds, &mf, 11);
        let ctx = TrainContext {
            dataset: &ds,
            manifest: &mf,
            shuffle_seed: 3,
        };
        let stage_cfg = StageConfig {
            lr: 0.01,
            max_epochs: 30,
            batch_size: 1024,
            patience: 30,
            optimizer: OptimizerMode::Sgd,
            stage: StageId::One,
        };
        let report = run_stage(&mut m, &ctx, &stage_cfg).unwrap();
        for w in report.train_loss.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "loss increased: {} -> {}", w[0], w[1]);
        }
    }
}
