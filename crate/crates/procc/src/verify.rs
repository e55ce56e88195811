//! The gradient verification suite behind the `grad-check` command: every
//! loss is checked against central finite differences, parameter tensor by
//! parameter tensor, on a fixed seeded batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tape;
use crate::gradcheck::{finite_diff_check_sampled, GradMode};
use crate::model::{ModelConfig, ProCCModel};
use crate::params::ParamStore;
use crate::tensor::{KernelError, Tensor2};
use crate::train::{loss_obj, loss_state_con, loss_vp_con, TrainError};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_EPSILON: f64 = 1e-5;
const MAX_COORDS_PER_TENSOR: usize = 48;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub component: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub checks: Vec<GradCheck>,
}

impl GradCheckReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

#[derive(Clone, Copy)]
enum LossKind {
    Obj,
    StateCon,
    VpCon,
}

impl LossKind {
    fn name(self) -> &'static str {
        match self {
            LossKind::Obj => "loss_obj",
            LossKind::StateCon => "loss_state_con",
            LossKind::VpCon => "loss_vp_con",
        }
    }
}

fn suite_model() -> ProCCModel {
    let cfg = ModelConfig {
        raw_dim: 8,
        d: 8,
        n_layers: 3,
        n_states: 5,
        n_objects: 4,
        cpm_kernel_len: 3,
        alpha: 1.0,
        backbone_trainable: false,
    };
    let mut model = ProCCModel::init(cfg, 0xC0FFEE).expect("valid suite config");
    // Dampen the init so no class probability collapses toward zero: the
    // relative-error denominator bottoms out at 1e-8, and coordinates whose
    // true gradient sits below the central-difference noise floor would
    // otherwise fail the check spuriously.
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    for name in names {
        let damped = model.params.value(&name).expect("listed").map(|v| 0.5 * v);
        model.params.set_value(&name, damped).expect("same shape");
    }
    model
}

fn suite_batch(raw_dim: usize) -> (Tensor2, Vec<Option<usize>>, Vec<Option<usize>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xBA7C);
    let data: Vec<f64> = (0..4 * raw_dim)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            0.8 * z
        })
        .collect();
    let features = Tensor2::from_vec(4, raw_dim, data).expect("finite batch");
    let state_labels = vec![Some(0), Some(1), Some(2), Some(4)];
    let object_labels = vec![Some(0), Some(1), Some(2), Some(3)];
    (features, state_labels, object_labels)
}

fn eval_loss(
    kind: LossKind,
    cfg: &ModelConfig,
    store: &mut ParamStore,
    features: &Tensor2,
    state_labels: &[Option<usize>],
    object_labels: &[Option<usize>],
    mode: GradMode,
) -> Result<f64, KernelError> {
    let model = ProCCModel {
        cfg: cfg.clone(),
        params: store.clone(),
        stages_done: 0,
    };
    let mut tape = Tape::new();
    let mut run = || -> Result<_, TrainError> {
        match kind {
            LossKind::Obj => loss_obj(&model, &mut tape, features, object_labels),
            LossKind::StateCon => loss_state_con(&model, &mut tape, features, state_labels, true),
            LossKind::VpCon => loss_vp_con(&model, &mut tape, features, state_labels, object_labels),
        }
    };
    let loss = run().map_err(|_| KernelError::NonFinite { op: "suite loss" })?;
    let value = tape.value(loss).get(0, 0);
    if mode == GradMode::WithGrads {
        tape.backward_into(loss, store)?;
    }
    Ok(value)
}

/// Runs the full finite-difference suite. Components cover each MLP layer of
/// both heads, both memory units' conv kernel and projection, and all three
/// losses end to end.
pub fn run_gradcheck_suite() -> GradCheckReport {
    let model = suite_model();
    let (features, state_labels, object_labels) = suite_batch(model.cfg.raw_dim);

    let params_for = |kind: LossKind| -> Vec<String> {
        let head = |prefix: &str| -> Vec<String> {
            (0..model.cfg.n_layers)
                .flat_map(|i| vec![format!("{prefix}.l{i}.w"), format!("{prefix}.l{i}.b")])
                .collect()
        };
        let cpm = |prefix: &str| vec![format!("{prefix}.kernel"), format!("{prefix}.proj")];
        match kind {
            LossKind::Obj => head("phi_o"),
            LossKind::StateCon => [head("phi_s"), cpm("cpc_o_to_s")].concat(),
            LossKind::VpCon => [
                head("phi_o"),
                head("phi_s"),
                cpm("cpc_o_to_s"),
                cpm("cpc_s_to_o"),
            ]
            .concat(),
        }
    };

    let mut checks = Vec::new();
    for kind in [LossKind::Obj, LossKind::StateCon, LossKind::VpCon] {
        for param in params_for(kind) {
            let mut store = model.params.clone();
            let cfg = model.cfg.clone();
            let mut loss_fn = |s: &mut ParamStore, mode: GradMode| {
                eval_loss(kind, &cfg, s, &features, &state_labels, &object_labels, mode)
            };
            let err = finite_diff_check_sampled(
                &mut store,
                &param,
                &mut loss_fn,
                GRADCHECK_EPSILON,
                MAX_COORDS_PER_TENSOR,
                0x5EED,
            )
            .expect("suite parameters exist");
            checks.push(GradCheck {
                component: format!("{}/{}", kind.name(), param),
                max_rel_err: err,
                pass: err < GRADCHECK_TOLERANCE,
            });
        }
    }
    GradCheckReport {
        tolerance: GRADCHECK_TOLERANCE,
        checks,
    }
}
