//! The network: a frozen (or optionally trainable) linear backbone, one MLP
//! classifier head per primitive, and two cross-primitive memory units that
//! turn the opposite branch's penultimate representation into a
//! compatibility distribution over the target primitive's classes.
//!
//! Conditioning is multiplicative in probability space with exponent
//! `alpha`, computed in log space: `softmax(logits + alpha * ln(compat))`.
//! Composition scores follow the visual-product rule: the outer product of
//! the two primitive distributions, with masked pairs pinned to -inf so a
//! calibration bias can never resurrect them.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::data::SpaceMask;
use crate::params::ParamStore;
use crate::tensor::{softmax, Axis, KernelError, Tensor2, PROB_CLAMP};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint line {line}: {msg}")]
    CheckpointParse { line: usize, msg: String },
    #[error("checkpoint parameter `{name}` has shape {got:?}, expected {want:?}")]
    CheckpointShape {
        name: String,
        got: (usize, usize),
        want: (usize, usize),
    },
    #[error("checkpoint is missing parameter `{0}`")]
    CheckpointMissing(String),
    #[error("checkpoint has unexpected parameter `{0}`")]
    CheckpointUnexpected(String),
    #[error("top-k request of {k} exceeds {available} unmasked pairs")]
    KExceedsPairs { k: usize, available: usize },
}

/// Which primitive a classifier head predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    State,
    Object,
}

impl Primitive {
    pub fn head_prefix(self) -> &'static str {
        match self {
            Primitive::State => "phi_s",
            Primitive::Object => "phi_o",
        }
    }
}

/// Conditioning direction of a cross-primitive memory unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CpcDirection {
    /// Object branch conditions the state prediction.
    ObjectToState,
    /// State branch conditions the object prediction.
    StateToObject,
}

impl CpcDirection {
    pub fn prefix(self) -> &'static str {
        match self {
            CpcDirection::ObjectToState => "cpc_o_to_s",
            CpcDirection::StateToObject => "cpc_s_to_o",
        }
    }

    /// The branch whose penultimate representation drives the unit.
    pub fn conditioning_primitive(self) -> Primitive {
        match self {
            CpcDirection::ObjectToState => Primitive::Object,
            CpcDirection::StateToObject => Primitive::State,
        }
    }

    pub fn target_primitive(self) -> Primitive {
        match self {
            CpcDirection::ObjectToState => Primitive::State,
            CpcDirection::StateToObject => Primitive::Object,
        }
    }
}

/// Rounds `fraction * d` to a valid odd kernel length in [1, d].
/// Even results round up to the next odd length, stepping down instead when
/// that would exceed the feature dimension.
pub fn cpm_kernel_len(d: usize, fraction: f64) -> usize {
    let raw = ((fraction * d as f64).round() as usize).clamp(1, d);
    if raw % 2 == 1 {
        raw
    } else if raw + 1 <= d {
        raw + 1
    } else {
        raw - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Width of raw input features.
    pub raw_dim: usize,
    /// Embedding width; also the hidden width of every MLP layer.
    pub d: usize,
    /// Number of affine layers per head (relu between, none after the last).
    pub n_layers: usize,
    pub n_states: usize,
    pub n_objects: usize,
    /// Odd length in [1, d]; see [`cpm_kernel_len`].
    pub cpm_kernel_len: usize,
    /// Compatibility exponent in [0, 1].
    pub alpha: f64,
    pub backbone_trainable: bool,
}

impl ModelConfig {
    pub fn new(raw_dim: usize, d: usize, n_states: usize, n_objects: usize) -> Self {
        ModelConfig {
            raw_dim,
            d,
            n_layers: 3,
            n_states,
            n_objects,
            cpm_kernel_len: cpm_kernel_len(d, 0.5),
            alpha: 1.0,
            backbone_trainable: false,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.raw_dim == 0 || self.d == 0 {
            return Err(ModelError::InvalidConfig("dimensions must be positive".into()));
        }
        if self.n_layers == 0 {
            return Err(ModelError::InvalidConfig("n_layers must be >= 1".into()));
        }
        if self.n_states == 0 || self.n_objects == 0 {
            return Err(ModelError::InvalidConfig("class counts must be positive".into()));
        }
        if self.cpm_kernel_len % 2 == 0
            || self.cpm_kernel_len == 0
            || self.cpm_kernel_len > self.d
        {
            return Err(ModelError::InvalidConfig(format!(
                "cpm_kernel_len must be odd and in [1, {}], got {}",
                self.d, self.cpm_kernel_len
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(ModelError::InvalidConfig(format!(
                "alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    fn head_layer_dims(&self, prim: Primitive) -> Vec<(usize, usize)> {
        let out = match prim {
            Primitive::State => self.n_states,
            Primitive::Object => self.n_objects,
        };
        (0..self.n_layers)
            .map(|i| {
                let fan_in = if i == 0 { self.d } else { self.d };
                let fan_out = if i == self.n_layers - 1 { out } else { self.d };
                (fan_in, fan_out)
            })
            .collect()
    }

    /// Canonical parameter list: name and shape, in initialization order.
    pub fn param_shapes(&self) -> Vec<(String, (usize, usize))> {
        let mut shapes = vec![("backbone.proj".to_string(), (self.raw_dim, self.d))];
        for prim in [Primitive::Object, Primitive::State] {
            let prefix = prim.head_prefix();
            for (i, (fan_in, fan_out)) in self.head_layer_dims(prim).into_iter().enumerate() {
                shapes.push((format!("{prefix}.l{i}.w"), (fan_in, fan_out)));
                shapes.push((format!("{prefix}.l{i}.b"), (1, fan_out)));
            }
        }
        for dir in [CpcDirection::ObjectToState, CpcDirection::StateToObject] {
            let prefix = dir.prefix();
            let n_target = match dir.target_primitive() {
                Primitive::State => self.n_states,
                Primitive::Object => self.n_objects,
            };
            shapes.push((format!("{prefix}.kernel"), (1, self.cpm_kernel_len)));
            shapes.push((format!("{prefix}.proj"), (self.d, n_target)));
        }
        shapes
    }
}

/// The full network: config plus named parameters.
#[derive(Debug, Clone)]
pub struct ProCCModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    /// Highest completed training stage (0 = fresh). Not serialized.
    pub stages_done: u8,
}

impl ProCCModel {
    /// Initializes weights from a zero-mean Gaussian with variance 2/fan_in
    /// and zero biases; the backbone is a variance-1/raw_dim random
    /// projection. Deterministic per seed.
    pub fn init(cfg: ModelConfig, init_seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut params = ParamStore::new();
        for (name, (rows, cols)) in cfg.param_shapes() {
            let tensor = if name.ends_with(".b") {
                Tensor2::zeros(rows, cols)
            } else {
                let scale = if name == "backbone.proj" {
                    (1.0 / rows as f64).sqrt()
                } else if name.ends_with(".kernel") {
                    (2.0 / cols as f64).sqrt()
                } else {
                    (2.0 / rows as f64).sqrt()
                };
                gaussian(&mut rng, rows, cols, scale)
            };
            params.insert(&name, tensor)?;
        }
        Ok(ProCCModel {
            cfg,
            params,
            stages_done: 0,
        })
    }

    /// Embeds one raw feature vector through the backbone projection.
    pub fn backbone_embed(&self, raw: &[f64]) -> Result<Vec<f64>, ModelError> {
        if raw.len() != self.cfg.raw_dim {
            return Err(KernelError::ShapeMismatch {
                op: "backbone_embed",
                left: (1, raw.len()),
                right: (self.cfg.raw_dim, self.cfg.d),
            }
            .into());
        }
        let x = Tensor2::row_vector(raw)?;
        let e = crate::tensor::matmul(&x, self.params.value("backbone.proj")?)?;
        Ok(e.data().to_vec())
    }

    /// Runs one embedding through a primitive head, returning its logits.
    pub fn classify_primitive(&self, prim: Primitive, embedding: &[f64]) -> Result<Vec<f64>, ModelError> {
        let e = Tensor2::row_vector(embedding)?;
        let mut tape = Tape::new();
        let input = tape.constant(e);
        let (logits, _) = self.tape_head(&mut tape, prim, input)?;
        Ok(tape.value(logits).data().to_vec())
    }

    /// Compatibility distribution over the unit's target classes given a
    /// conditioning representation of width d.
    pub fn cpm_compatibility(
        &self,
        dir: CpcDirection,
        conditioning: &[f64],
    ) -> Result<Vec<f64>, ModelError> {
        let c = Tensor2::row_vector(conditioning)?;
        if c.cols() != self.cfg.d {
            return Err(KernelError::ShapeMismatch {
                op: "cpm_compatibility",
                left: (1, c.cols()),
                right: (1, self.cfg.d),
            }
            .into());
        }
        let mut tape = Tape::new();
        let input = tape.constant(c);
        let compat = self.tape_cpm(&mut tape, dir, input)?;
        Ok(tape.value(compat).data().to_vec())
    }

    pub(crate) fn tape_embed(&self, tape: &mut Tape, features: &Tensor2) -> Result<Var, ModelError> {
        if features.cols() != self.cfg.raw_dim {
            return Err(KernelError::ShapeMismatch {
                op: "backbone_embed",
                left: features.shape(),
                right: (self.cfg.raw_dim, self.cfg.d),
            }
            .into());
        }
        let x = tape.constant(features.clone());
        let proj = if self.cfg.backbone_trainable {
            tape.param(&self.params, "backbone.proj")?
        } else {
            tape.constant(self.params.value("backbone.proj")?.clone())
        };
        Ok(tape.matmul(x, proj)?)
    }

    /// Head forward; returns (logits, penultimate activation). The
    /// penultimate activation is the input to the final affine layer.
    pub(crate) fn tape_head(
        &self,
        tape: &mut Tape,
        prim: Primitive,
        input: Var,
    ) -> Result<(Var, Var), ModelError> {
        let prefix = prim.head_prefix();
        let mut h = input;
        for i in 0..self.cfg.n_layers - 1 {
            let w = tape.param(&self.params, &format!("{prefix}.l{i}.w"))?;
            let b = tape.param(&self.params, &format!("{prefix}.l{i}.b"))?;
            let affine = tape.matmul(h, w)?;
            let biased = tape.add_bias(affine, b)?;
            h = tape.relu(biased);
        }
        let penult = h;
        let last = self.cfg.n_layers - 1;
        let w = tape.param(&self.params, &format!("{prefix}.l{last}.w"))?;
        let b = tape.param(&self.params, &format!("{prefix}.l{last}.b"))?;
        let affine = tape.matmul(penult, w)?;
        let logits = tape.add_bias(affine, b)?;
        Ok((logits, penult))
    }

    pub(crate) fn tape_cpm(
        &self,
        tape: &mut Tape,
        dir: CpcDirection,
        conditioning: Var,
    ) -> Result<Var, ModelError> {
        let prefix = dir.prefix();
        let kernel = tape.param(&self.params, &format!("{prefix}.kernel"))?;
        let conv = tape.conv1d_rows(conditioning, kernel)?;
        let proj = tape.param(&self.params, &format!("{prefix}.proj"))?;
        let logits = tape.matmul(conv, proj)?;
        Ok(tape.softmax_rows(logits)?)
    }

    /// Multiplicative fusion in log space:
    /// `softmax(logits + alpha * ln(max(compat, clamp)))`.
    pub(crate) fn tape_fuse(
        &self,
        tape: &mut Tape,
        base_logits: Var,
        compat: Var,
    ) -> Result<Var, ModelError> {
        let log_compat = tape.log_clamp(compat, PROB_CLAMP);
        let scaled = tape.scale(log_compat, self.cfg.alpha);
        let fused = tape.add(base_logits, scaled)?;
        Ok(tape.softmax_rows(fused)?)
    }

    /// Full batched forward pass. With `use_cpc` each primitive's
    /// distribution is conditioned on the other branch's penultimate
    /// representation; `freeze_conditioning` detaches those representations
    /// so no gradient reaches the conditioning branch.
    pub fn tape_forward(
        &self,
        tape: &mut Tape,
        features: &Tensor2,
        use_cpc: bool,
        freeze_conditioning: bool,
    ) -> Result<ForwardVars, ModelError> {
        let embed = self.tape_embed(tape, features)?;
        let (object_logits, object_penult) = self.tape_head(tape, Primitive::Object, embed)?;
        let (state_logits, state_penult) = self.tape_head(tape, Primitive::State, embed)?;
        let (p_state, p_object) = if use_cpc {
            let obj_cond = if freeze_conditioning {
                tape.detach(object_penult)
            } else {
                object_penult
            };
            let state_cond = if freeze_conditioning {
                tape.detach(state_penult)
            } else {
                state_penult
            };
            let compat_state = self.tape_cpm(tape, CpcDirection::ObjectToState, obj_cond)?;
            let compat_object = self.tape_cpm(tape, CpcDirection::StateToObject, state_cond)?;
            (
                self.tape_fuse(tape, state_logits, compat_state)?,
                self.tape_fuse(tape, object_logits, compat_object)?,
            )
        } else {
            (
                tape.softmax_rows(state_logits)?,
                tape.softmax_rows(object_logits)?,
            )
        };
        Ok(ForwardVars {
            embed,
            state_logits,
            object_logits,
            state_penult,
            object_penult,
            p_state,
            p_object,
        })
    }

    /// Forward pass without gradient bookkeeping: per-record state and
    /// object probability tables.
    pub fn eval_probs(
        &self,
        features: &Tensor2,
        use_cpc: bool,
    ) -> Result<(Tensor2, Tensor2), ModelError> {
        let mut tape = Tape::new();
        let fwd = self.tape_forward(&mut tape, features, use_cpc, false)?;
        Ok((
            tape.value(fwd.p_state).clone(),
            tape.value(fwd.p_object).clone(),
        ))
    }

    /// Single-record forward: probability vectors for both primitives plus
    /// the conditioning representations.
    pub fn forward_composition(
        &self,
        embedding_raw: &[f64],
        use_cpc: bool,
    ) -> Result<CompositionOutput, ModelError> {
        let features = Tensor2::row_vector(embedding_raw)?;
        let mut tape = Tape::new();
        let fwd = self.tape_forward(&mut tape, &features, use_cpc, false)?;
        Ok(CompositionOutput {
            p_state: tape.value(fwd.p_state).data().to_vec(),
            p_object: tape.value(fwd.p_object).data().to_vec(),
            state_penult: tape.value(fwd.state_penult).data().to_vec(),
            object_penult: tape.value(fwd.object_penult).data().to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut out = String::new();
        out.push_str("procc v1\n");
        let _ = writeln!(out, "params {}", self.params.len());
        for (name, entry) in self.params.iter() {
            let _ = writeln!(out, "{} {} {}", name, entry.value.rows(), entry.value.cols());
        }
        out.push_str("data\n");
        for (_, entry) in self.params.iter() {
            for r in 0..entry.value.rows() {
                let mut first = true;
                for v in entry.value.row(r) {
                    if !first {
                        out.push(' ');
                    }
                    let _ = write!(out, "{v}");
                    first = false;
                }
                out.push('\n');
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Loads a checkpoint, validating names and shapes against the
    /// constructing config.
    pub fn load(path: &Path, cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        let header = lines.next();
        match header {
            Some((_, "procc v1")) => {}
            other => {
                return Err(ModelError::CheckpointParse {
                    line: 1,
                    msg: format!("expected `procc v1` header, got {other:?}"),
                })
            }
        }
        let (no, counts) = lines.next().ok_or(ModelError::CheckpointParse {
            line: 2,
            msg: "missing `params <n>` line".into(),
        })?;
        let n: usize = counts
            .strip_prefix("params ")
            .and_then(|v| v.parse().ok())
            .ok_or(ModelError::CheckpointParse {
                line: no + 1,
                msg: format!("bad params line `{counts}`"),
            })?;
        let mut manifest: Vec<(String, (usize, usize))> = Vec::with_capacity(n);
        for _ in 0..n {
            let (no, line) = lines.next().ok_or(ModelError::CheckpointParse {
                line: 0,
                msg: "truncated manifest".into(),
            })?;
            let mut it = line.split_whitespace();
            let name = it.next().unwrap_or_default().to_string();
            let rows: Option<usize> = it.next().and_then(|v| v.parse().ok());
            let cols: Option<usize> = it.next().and_then(|v| v.parse().ok());
            match (rows, cols) {
                (Some(r), Some(c)) if !name.is_empty() => manifest.push((name, (r, c))),
                _ => {
                    return Err(ModelError::CheckpointParse {
                        line: no + 1,
                        msg: format!("bad manifest line `{line}`"),
                    })
                }
            }
        }
        match lines.next() {
            Some((_, "data")) => {}
            other => {
                return Err(ModelError::CheckpointParse {
                    line: 0,
                    msg: format!("expected `data` marker, got {other:?}"),
                })
            }
        }

        let expected = cfg.param_shapes();
        for (name, want) in &expected {
            match manifest.iter().find(|(n, _)| n == name) {
                None => return Err(ModelError::CheckpointMissing(name.clone())),
                Some((_, got)) if got != want => {
                    return Err(ModelError::CheckpointShape {
                        name: name.clone(),
                        got: *got,
                        want: *want,
                    })
                }
                Some(_) => {}
            }
        }
        for (name, _) in &manifest {
            if !expected.iter().any(|(n, _)| n == name) {
                return Err(ModelError::CheckpointUnexpected(name.clone()));
            }
        }

        let mut params = ParamStore::new();
        for (name, (rows, cols)) in &manifest {
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..*rows {
                let (no, line) = lines.next().ok_or(ModelError::CheckpointParse {
                    line: 0,
                    msg: format!("truncated values for `{name}`"),
                })?;
                let mut count = 0;
                for tok in line.split_whitespace() {
                    let v: f64 = tok.parse().map_err(|_| ModelError::CheckpointParse {
                        line: no + 1,
                        msg: format!("bad value `{tok}`"),
                    })?;
                    data.push(v);
                    count += 1;
                }
                if count != *cols {
                    return Err(ModelError::CheckpointParse {
                        line: no + 1,
                        msg: format!("expected {cols} values, got {count}"),
                    });
                }
            }
            params.insert(name, Tensor2::from_vec(*rows, *cols, data)?)?;
        }
        Ok(ProCCModel {
            cfg,
            params,
            stages_done: 0,
        })
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor2 {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            scale * z
        })
        .collect();
    Tensor2::from_vec_unchecked(rows, cols, data)
}

/// Variables produced by one batched forward pass.
pub struct ForwardVars {
    pub embed: Var,
    pub state_logits: Var,
    pub object_logits: Var,
    pub state_penult: Var,
    pub object_penult: Var,
    pub p_state: Var,
    pub p_object: Var,
}

/// Single-record forward output.
#[derive(Debug, Clone)]
pub struct CompositionOutput {
    pub p_state: Vec<f64>,
    pub p_object: Vec<f64>,
    pub state_penult: Vec<f64>,
    pub object_penult: Vec<f64>,
}

/// Reweights a base distribution by a compatibility prior with exponent
/// `alpha` and renormalizes; done in log space so extreme values stay stable.
pub fn conditioned_probs(
    base_logits: &[f64],
    compatibility: &[f64],
    alpha: f64,
) -> Result<Vec<f64>, ModelError> {
    if base_logits.len() != compatibility.len() {
        return Err(KernelError::ShapeMismatch {
            op: "conditioned_probs",
            left: (1, base_logits.len()),
            right: (1, compatibility.len()),
        }
        .into());
    }
    let fused: Vec<f64> = base_logits
        .iter()
        .zip(compatibility)
        .map(|(z, c)| z + alpha * c.max(PROB_CLAMP).ln())
        .collect();
    let t = Tensor2::row_vector(&fused)?;
    Ok(softmax(&t, Axis::Row)?.data().to_vec())
}

/// Visual-product composition scores with a -inf sentinel on masked pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    n_states: usize,
    n_objects: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_objects(&self) -> usize {
        self.n_objects
    }

    pub fn get(&self, state: usize, object: usize) -> f64 {
        self.data[state * self.n_objects + object]
    }

    pub fn is_masked(&self, state: usize, object: usize) -> bool {
        self.get(state, object) == f64::NEG_INFINITY
    }

    /// Builds a raw score table directly; masked cells must be -inf.
    /// Intended for tests and metric oracles.
    pub fn from_raw(n_states: usize, n_objects: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n_states * n_objects);
        ScoreMatrix {
            n_states,
            n_objects,
            data,
        }
    }
}

/// `score[s][o] = p_state[s] * p_object[o]` where the mask allows, -inf
/// elsewhere.
pub fn composition_scores(
    p_state: &[f64],
    p_object: &[f64],
    mask: &SpaceMask,
) -> Result<ScoreMatrix, ModelError> {
    if p_state.len() != mask.n_states() || p_object.len() != mask.n_objects() {
        return Err(KernelError::ShapeMismatch {
            op: "composition_scores",
            left: (p_state.len(), p_object.len()),
            right: (mask.n_states(), mask.n_objects()),
        }
        .into());
    }
    let mut data = Vec::with_capacity(p_state.len() * p_object.len());
    for (s, &ps) in p_state.iter().enumerate() {
        for (o, &po) in p_object.iter().enumerate() {
            data.push(if mask.allows(s, o) {
                ps * po
            } else {
                f64::NEG_INFINITY
            });
        }
    }
    Ok(ScoreMatrix {
        n_states: p_state.len(),
        n_objects: p_object.len(),
        data,
    })
}

/// Top-k unmasked pairs after adding `bias` to every pair not in
/// `seen_pairs`. Ties break toward the lower (state, object) index.
pub fn predict_topk(
    scores: &ScoreMatrix,
    seen_pairs: &BTreeSet<(usize, usize)>,
    bias: f64,
    k: usize,
) -> Result<Vec<(usize, usize, f64)>, ModelError> {
    let mut ranked: Vec<(usize, usize, f64)> = Vec::new();
    for s in 0..scores.n_states {
        for o in 0..scores.n_objects {
            let raw = scores.get(s, o);
            if raw == f64::NEG_INFINITY {
                continue;
            }
            let biased = if seen_pairs.contains(&(s, o)) {
                raw
            } else {
                raw + bias
            };
            ranked.push((s, o, biased));
        }
    }
    if k > ranked.len() {
        return Err(ModelError::KExceedsPairs {
            k,
            available: ranked.len(),
        });
    }
    ranked.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .expect("finite scores")
            .then_with(|| (a.0, a.1).cmp(&(b.0, b.1)))
    });
    ranked.truncate(k);
    Ok(ranked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, GradMode};

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            raw_dim: 6,
            d: 6,
            n_layers: 3,
            n_states: 4,
            n_objects: 3,
            cpm_kernel_len: 3,
            alpha: 1.0,
            backbone_trainable: false,
        }
    }

    fn zero_model(cfg: ModelConfig) -> ProCCModel {
        let mut m = ProCCModel::init(cfg, 0).unwrap();
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
    fn kernel_len_rule() {
        assert_eq!(cpm_kernel_len(64, 0.5), 33);
        assert_eq!(cpm_kernel_len(64, 1.0 / 20.0), 3);
        assert_eq!(cpm_kernel_len(64, 1.0), 63);
        assert_eq!(cpm_kernel_len(1, 1.0), 1);
        assert_eq!(cpm_kernel_len(2, 1.0), 1);
        assert_eq!(cpm_kernel_len(5, 0.5), 3);
    }

    #[test]
    fn identity_backbone_embeds_identically() {
        let mut m = zero_model(small_cfg());
        m.params
            .set_value("backbone.proj", Tensor2::identity(6))
            .unwrap();
        let raw = vec![0.5, -1.0, 2.0, 0.0, 3.0, -0.25];
        assert_eq!(m.backbone_embed(&raw).unwrap(), raw);
    }

    #[test]
    fn backbone_width_mismatch() {
        let m = zero_model(small_cfg());
        assert!(m.backbone_embed(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn frozen_backbone_receives_zero_gradient() {
        let m = ProCCModel::init(small_cfg(), 3).unwrap();
        let features = Tensor2::filled(2, 6, 0.3);
        let mut tape = Tape::new();
        let fwd = m.tape_forward(&mut tape, &features, true, false).unwrap();
        let loss = tape
            .cross_entropy_mean(fwd.p_state, vec![0, 1], vec![true, true])
            .unwrap();
        let mut store = m.params.clone();
        tape.backward_into(loss, &mut store).unwrap();
        assert!(store
            .grad("backbone.proj")
            .unwrap()
            .data()
            .iter()
            .all(|&g| g == 0.0));
    }

    #[test]
    fn trainable_backbone_receives_gradient() {
        let mut cfg = small_cfg();
        cfg.backbone_trainable = true;
        let m = ProCCModel::init(cfg, 3).unwrap();
        let features = Tensor2::filled(2, 6, 0.3);
        let mut tape = Tape::new();
        let fwd = m.tape_forward(&mut tape, &features, true, false).unwrap();
        let loss = tape
            .cross_entropy_mean(fwd.p_state, vec![0, 1], vec![true, true])
            .unwrap();
        let mut store = m.params.clone();
        tape.backward_into(loss, &mut store).unwrap();
        assert!(store
            .grad("backbone.proj")
            .unwrap()
            .data()
            .iter()
            .any(|&g| g != 0.0));
    }

    #[test]
    fn zero_head_is_uniform_after_softmax() {
        let m = zero_model(small_cfg());
        let logits = m.classify_primitive(Primitive::State, &[1.0; 6]).unwrap();
        assert!(logits.iter().all(|&z| z == 0.0));
        let probs = conditioned_probs(&logits, &[0.25; 4], 0.0).unwrap();
        assert!(probs.iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn one_layer_identity_head_passes_through() {
        let cfg = ModelConfig {
            raw_dim: 4,
            d: 4,
            n_layers: 1,
            n_states: 4,
            n_objects: 4,
            cpm_kernel_len: 1,
            alpha: 1.0,
            backbone_trainable: false,
        };
        let mut m = zero_model(cfg);
        m.params
            .set_value("backbone.proj", Tensor2::identity(4))
            .unwrap();
        m.params
            .set_value("phi_s.l0.w", Tensor2::identity(4))
            .unwrap();
        let e = m.backbone_embed(&[0.1, -0.2, 0.3, 0.4]).unwrap();
        let logits = m.classify_primitive(Primitive::State, &e).unwrap();
        assert_eq!(logits, vec![0.1, -0.2, 0.3, 0.4]);
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let m = ProCCModel::init(small_cfg(), 11).unwrap();
        let features = gaussian(&mut ChaCha8Rng::seed_from_u64(5), 4, 6, 0.7);
        let mut store = m.params.clone();
        let mut loss_fn = |store: &mut ParamStore, mode: GradMode| {
            let model = ProCCModel {
                cfg: m.cfg.clone(),
                params: store.clone(),
                stages_done: 0,
            };
            let mut tape = Tape::new();
            let fwd = model
                .tape_forward(&mut tape, &features, false, false)
                .map_err(|_| KernelError::NonFinite { op: "forward" })?;
            let loss = tape.cross_entropy_mean(fwd.p_object, vec![0, 1, 2, 0], vec![true; 4])?;
            let value = tape.value(loss).get(0, 0);
            if mode == GradMode::WithGrads {
                tape.backward_into(loss, store)?;
            }
            Ok(value)
        };
        for p in ["phi_o.l0.w", "phi_o.l1.w", "phi_o.l2.w", "phi_o.l1.b"] {
            let err = finite_diff_check(&mut store, p, &mut loss_fn, 1e-5).unwrap();
            assert!(err < 1e-4, "{p}: {err}");
        }
    }

    #[test]
    fn zero_projection_gives_uniform_compatibility() {
        let m = zero_model(small_cfg());
        let compat = m
            .cpm_compatibility(CpcDirection::ObjectToState, &[0.7; 6])
            .unwrap();
        assert_eq!(compat.len(), 4);
        assert!(compat.iter().all(|&c| (c - 0.25).abs() < 1e-15));
    }

    #[test]
    fn delta_kernel_identity_projection_composes() {
        let cfg = ModelConfig {
            raw_dim: 4,
            d: 4,
            n_layers: 1,
            n_states: 4,
            n_objects: 4,
            cpm_kernel_len: 1,
            alpha: 1.0,
            backbone_trainable: false,
        };
        let mut m = zero_model(cfg);
        m.params
            .set_value("cpc_o_to_s.kernel", Tensor2::row_vector(&[1.0]).unwrap())
            .unwrap();
        m.params
            .set_value("cpc_o_to_s.proj", Tensor2::identity(4))
            .unwrap();
        let cond = vec![0.2, -0.4, 1.0, 0.0];
        let compat = m
            .cpm_compatibility(CpcDirection::ObjectToState, &cond)
            .unwrap();
        let direct = softmax(&Tensor2::row_vector(&cond).unwrap(), Axis::Row).unwrap();
        for (a, b) in compat.iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn conditioned_probs_alpha_zero_is_identity() {
        let base = vec![0.3, -0.7, 1.5];
        let compat = vec![0.8, 0.1, 0.1];
        let fused = conditioned_probs(&base, &compat, 0.0).unwrap();
        let plain = softmax(&Tensor2::row_vector(&base).unwrap(), Axis::Row).unwrap();
        for (a, b) in fused.iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conditioned_probs_uniform_compat_cancels() {
        let base = vec![0.3, -0.7, 1.5];
        let compat = vec![1.0 / 3.0; 3];
        let fused = conditioned_probs(&base, &compat, 0.7).unwrap();
        let plain = softmax(&Tensor2::row_vector(&base).unwrap(), Axis::Row).unwrap();
        for (a, b) in fused.iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conditioned_probs_uniform_base_returns_compat() {
        let base = vec![0.0; 3];
        let compat = vec![0.7, 0.2, 0.1];
        let fused = conditioned_probs(&base, &compat, 1.0).unwrap();
        for (a, b) in fused.iter().zip(&compat) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn forward_without_cpc_matches_bare_heads() {
        let m = ProCCModel::init(small_cfg(), 21).unwrap();
        let raw = vec![0.4, -0.1, 0.9, 0.0, -0.6, 0.2];
        let out = m.forward_composition(&raw, false).unwrap();
        let e = m.backbone_embed(&raw).unwrap();
        let zs = m.classify_primitive(Primitive::State, &e).unwrap();
        let ps = softmax(&Tensor2::row_vector(&zs).unwrap(), Axis::Row).unwrap();
        for (a, b) in out.p_state.iter().zip(ps.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_cpm_projection_equals_no_cpc() {
        let mut m = ProCCModel::init(small_cfg(), 22).unwrap();
        for dir in ["cpc_o_to_s", "cpc_s_to_o"] {
            let shape = m.params.value(&format!("{dir}.proj")).unwrap().shape();
            m.params
                .set_value(&format!("{dir}.proj"), Tensor2::zeros(shape.0, shape.1))
                .unwrap();
        }
        let raw = vec![0.4, -0.1, 0.9, 0.0, -0.6, 0.2];
        let with = m.forward_composition(&raw, true).unwrap();
        let without = m.forward_composition(&raw, false).unwrap();
        for (a, b) in with.p_state.iter().zip(&without.p_state) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in with.p_object.iter().zip(&without.p_object) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn probability_outputs_sum_to_one() {
        for seed in 0..50 {
            let m = ProCCModel::init(small_cfg(), seed).unwrap();
            let features = gaussian(&mut ChaCha8Rng::seed_from_u64(seed + 1000), 3, 6, 2.0);
            for use_cpc in [false, true] {
                let (ps, po) = m.eval_probs(&features, use_cpc).unwrap();
                for r in 0..ps.rows() {
                    let s: f64 = ps.row(r).iter().sum();
                    let o: f64 = po.row(r).iter().sum();
                    assert!((s - 1.0).abs() < 1e-9, "state sum {s}");
                    assert!((o - 1.0).abs() < 1e-9, "object sum {o}");
                }
            }
        }
    }

    #[test]
    fn scores_outer_product_and_mask() {
        let mask = SpaceMask::full(2, 2);
        let scores = composition_scores(&[0.6, 0.4], &[0.7, 0.3], &mask).unwrap();
        assert!((scores.get(0, 0) - 0.42).abs() < 1e-12);
        assert!((scores.get(0, 1) - 0.18).abs() < 1e-12);
        assert!((scores.get(1, 0) - 0.28).abs() < 1e-12);
        assert!((scores.get(1, 1) - 0.12).abs() < 1e-12);

        let mut masked = SpaceMask::full(2, 2);
        masked.set(0, 0, false);
        let scores = composition_scores(&[0.6, 0.4], &[0.7, 0.3], &masked).unwrap();
        assert!(scores.is_masked(0, 0));
        let top = predict_topk(&scores, &BTreeSet::new(), 0.0, 1).unwrap();
        assert_eq!((top[0].0, top[0].1), (1, 0));
        assert!((top[0].2 - 0.28).abs() < 1e-12);
    }

    #[test]
    fn topk_bias_dominance_and_ties() {
        let mask = SpaceMask::full(2, 2);
        let scores = composition_scores(&[0.6, 0.4], &[0.7, 0.3], &mask).unwrap();
        let seen: BTreeSet<_> = [(0, 0)].into();
        // bias 0: argmax is the seen cell.
        let top = predict_topk(&scores, &seen, 0.0, 1).unwrap();
        assert_eq!((top[0].0, top[0].1), (0, 0));
        // huge bias: an unseen pair must win.
        let top = predict_topk(&scores, &seen, 1e12, 1).unwrap();
        assert!(!seen.contains(&(top[0].0, top[0].1)));
        // exact four-way tie: lower (state, object) pairs rank first.
        let tied = composition_scores(&[0.5, 0.5], &[0.5, 0.5], &mask).unwrap();
        let top = predict_topk(&tied, &BTreeSet::new(), 0.0, 4).unwrap();
        let order: Vec<(usize, usize)> = top.iter().map(|&(s, o, _)| (s, o)).collect();
        assert_eq!(order, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn topk_k_exceeding_unmasked_errors() {
        let mut mask = SpaceMask::full(2, 2);
        mask.set(1, 1, false);
        let scores = composition_scores(&[0.6, 0.4], &[0.7, 0.3], &mask).unwrap();
        assert!(matches!(
            predict_topk(&scores, &BTreeSet::new(), 0.0, 4),
            Err(ModelError::KExceedsPairs { k: 4, available: 3 })
        ));
    }

    #[test]
    fn masked_cells_never_win_regardless_of_bias() {
        let mut mask = SpaceMask::full(3, 3);
        mask.set(2, 2, false);
        let scores = composition_scores(&[0.1, 0.1, 0.8], &[0.1, 0.1, 0.8], &mask).unwrap();
        for bias in [-1e15, 0.0, 1e15] {
            let top = predict_topk(&scores, &BTreeSet::new(), bias, 1).unwrap();
            assert_ne!((top[0].0, top[0].1), (2, 2));
        }
    }

    #[test]
    fn argmax_invariant_under_positive_scaling() {
        let mask = SpaceMask::full(3, 2);
        let ps = [0.2, 0.5, 0.3];
        let po = [0.6, 0.4];
        let a = composition_scores(&ps, &po, &mask).unwrap();
        let ps2: Vec<f64> = ps.iter().map(|v| v * 3.7).collect();
        let po2: Vec<f64> = po.iter().map(|v| v * 0.01).collect();
        let b = composition_scores(&ps2, &po2, &mask).unwrap();
        let ta = predict_topk(&a, &BTreeSet::new(), 0.0, 1).unwrap();
        let tb = predict_topk(&b, &BTreeSet::new(), 0.0, 1).unwrap();
        assert_eq!((ta[0].0, ta[0].1), (tb[0].0, tb[0].1));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = ProCCModel::init(small_cfg(), 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        m.save(&path).unwrap();
        let loaded = ProCCModel::load(&path, small_cfg()).unwrap();
        for (name, entry) in m.params.iter() {
            assert!(
                entry.value.bits_eq(loaded.params.value(name).unwrap()),
                "{name} differs after round trip"
            );
        }
    }

    #[test]
    fn checkpoint_shape_validation() {
        let m = ProCCModel::init(small_cfg(), 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        m.save(&path).unwrap();
        let mut other = small_cfg();
        other.n_states = 9;
        assert!(matches!(
            ProCCModel::load(&path, other),
            Err(ModelError::CheckpointShape { .. })
        ));
    }
}
