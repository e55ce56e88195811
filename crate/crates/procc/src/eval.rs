//! Open-world evaluation: calibration-bias sweeps over seen/unseen
//! compositions, best seen/unseen accuracy, best harmonic mean, AUC,
//! conditional confusion matrices, and report files.
//!
//! A record's prediction at bias `b` is the argmax of its visual-product
//! score table after adding `b` to every pair outside the seen set. Since
//! the bias shifts all unseen pairs equally, only the best seen cell and the
//! best unseen cell can win, so each record is reduced to those two
//! candidates once and the sweep is linear in the number of grid points.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::data::{DataError, Dataset, SpaceMask, Split};
use crate::model::{composition_scores, CpcDirection, ModelError, Primitive, ProCCModel, ScoreMatrix};
use crate::tensor::{KernelError, Tensor2};
use crate::train::TrainReport;

/// Default number of evenly spaced sweep points (the exact zero bias is
/// always added on top).
pub const DEFAULT_N_BIASES: usize = 101;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("record `{0}` must be fully labeled for composition evaluation")]
    NotFullyLabeled(String),
    #[error("both seen and unseen cohorts are empty")]
    EmptyCohorts,
    #[error("sweep is empty; nothing to export")]
    EmptySweep,
    #[error("harmonic mean arguments must be non-negative, got ({0}, {1})")]
    NegativeInput(f64, f64),
    #[error("invalid evaluation configuration: {0}")]
    InvalidConfig(String),
    #[error("sweep csv line {line}: {msg}")]
    SweepParse { line: usize, msg: String },
}

/// `2su/(s+u)`, with the 0/0 case defined as 0.
pub fn harmonic_mean(s: f64, u: f64) -> Result<f64, EvalError> {
    if s < 0.0 || u < 0.0 {
        return Err(EvalError::NegativeInput(s, u));
    }
    if s + u == 0.0 {
        Ok(0.0)
    } else {
        Ok(2.0 * s * u / (s + u))
    }
}

/// One evaluated record, reduced to its best seen and best unseen candidate.
#[derive(Debug, Clone)]
pub struct ScoredRecord {
    pub true_pair: (usize, usize),
    pub true_seen: bool,
    best_seen: Option<(f64, (usize, usize))>,
    best_unseen: Option<(f64, (usize, usize))>,
}

impl ScoredRecord {
    /// Reduces a full score table. Masked cells never become candidates.
    pub fn from_scores(
        scores: &ScoreMatrix,
        seen_pairs: &BTreeSet<(usize, usize)>,
        true_pair: (usize, usize),
    ) -> Self {
        let mut best_seen: Option<(f64, (usize, usize))> = None;
        let mut best_unseen: Option<(f64, (usize, usize))> = None;
        for s in 0..scores.n_states() {
            for o in 0..scores.n_objects() {
                let v = scores.get(s, o);
                if v == f64::NEG_INFINITY {
                    continue;
                }
                let slot = if seen_pairs.contains(&(s, o)) {
                    &mut best_seen
                } else {
                    &mut best_unseen
                };
                // Strictly greater wins; ties keep the earlier (lower) pair.
                if slot.map_or(true, |(bv, _)| v > bv) {
                    *slot = Some((v, (s, o)));
                }
            }
        }
        ScoredRecord {
            true_pair,
            true_seen: seen_pairs.contains(&true_pair),
            best_seen,
            best_unseen,
        }
    }

    /// Winning pair after adding `bias` to the unseen candidate.
    pub fn predicted_at(&self, bias: f64) -> Option<(usize, usize)> {
        match (self.best_seen, self.best_unseen) {
            (None, None) => None,
            (Some((_, p)), None) => Some(p),
            (None, Some((_, p))) => Some(p),
            (Some((sv, sp)), Some((uv, up))) => {
                let biased = uv + bias;
                if biased > sv {
                    Some(up)
                } else if biased < sv {
                    Some(sp)
                } else {
                    Some(sp.min(up))
                }
            }
        }
    }

    /// Seen-vs-unseen score gap, when both candidates exist.
    pub fn gap(&self) -> Option<f64> {
        match (self.best_seen, self.best_unseen) {
            (Some((sv, _)), Some((uv, _))) => Some(sv - uv),
            _ => None,
        }
    }
}

/// Scores every record of a split with the model's full (CPC) forward pass.
pub fn score_records(
    model: &ProCCModel,
    dataset: &Dataset,
    split: Split,
    mask: &SpaceMask,
    seen_pairs: &BTreeSet<(usize, usize)>,
) -> Result<Vec<ScoredRecord>, EvalError> {
    score_records_with(model, dataset, split, mask, seen_pairs, true)
}

/// Like [`score_records`], with explicit control over conditioning.
pub fn score_records_with(
    model: &ProCCModel,
    dataset: &Dataset,
    split: Split,
    mask: &SpaceMask,
    seen_pairs: &BTreeSet<(usize, usize)>,
    use_cpc: bool,
) -> Result<Vec<ScoredRecord>, EvalError> {
    let indices = dataset.split_indices(split);
    if indices.is_empty() {
        return Err(DataError::EmptySplit(split).into());
    }
    let mut data = Vec::with_capacity(indices.len() * dataset.dim);
    let mut pairs = Vec::with_capacity(indices.len());
    for &i in &indices {
        let rec = &dataset.records[i];
        let pair = rec
            .label
            .pair()
            .ok_or_else(|| EvalError::NotFullyLabeled(rec.id.clone()))?;
        pairs.push(pair);
        data.extend_from_slice(&rec.feature);
    }
    let features = Tensor2::from_vec(indices.len(), dataset.dim, data)?;
    let (p_state, p_object) = model.eval_probs(&features, use_cpc)?;
    let mut scored = Vec::with_capacity(indices.len());
    for (r, &pair) in pairs.iter().enumerate() {
        let scores = composition_scores(p_state.row(r), p_object.row(r), mask)?;
        scored.push(ScoredRecord::from_scores(&scores, seen_pairs, pair));
    }
    Ok(scored)
}

/// Per-cohort accuracy at one bias; an empty cohort reports `None`.
pub fn accuracy_at_bias(
    scored: &[ScoredRecord],
    bias: f64,
) -> Result<(Option<f64>, Option<f64>), EvalError> {
    let mut seen_total = 0usize;
    let mut seen_hit = 0usize;
    let mut unseen_total = 0usize;
    let mut unseen_hit = 0usize;
    for rec in scored {
        let correct = rec.predicted_at(bias) == Some(rec.true_pair);
        if rec.true_seen {
            seen_total += 1;
            seen_hit += usize::from(correct);
        } else {
            unseen_total += 1;
            unseen_hit += usize::from(correct);
        }
    }
    if seen_total == 0 && unseen_total == 0 {
        return Err(EvalError::EmptyCohorts);
    }
    let frac = |hit, total| {
        if total == 0 {
            None
        } else {
            Some(hit as f64 / total as f64)
        }
    };
    Ok((frac(seen_hit, seen_total), frac(unseen_hit, unseen_total)))
}

/// Exact-pair seen/unseen accuracy of the model at one calibration bias.
pub fn evaluate_at_bias(
    model: &ProCCModel,
    dataset: &Dataset,
    split: Split,
    mask: &SpaceMask,
    seen_pairs: &BTreeSet<(usize, usize)>,
    bias: f64,
) -> Result<(Option<f64>, Option<f64>), EvalError> {
    let scored = score_records(model, dataset, split, mask, seen_pairs)?;
    accuracy_at_bias(&scored, bias)
}

/// The sweep grid: `n_biases` points spanning [-gap, +gap] where gap is the
/// largest seen-vs-unseen score gap on the split, plus the exact zero bias.
pub fn bias_grid(scored: &[ScoredRecord], n_biases: usize) -> Result<Vec<f64>, EvalError> {
    if n_biases < 2 {
        return Err(EvalError::InvalidConfig(format!(
            "n_biases must be >= 2, got {n_biases}"
        )));
    }
    let delta = scored
        .iter()
        .filter_map(ScoredRecord::gap)
        .fold(0.0f64, |acc, g| acc.max(g.abs()));
    let mut grid: Vec<f64> = (0..n_biases)
        .map(|i| -delta + 2.0 * delta * i as f64 / (n_biases - 1) as f64)
        .collect();
    grid.push(0.0);
    grid.sort_by(|a, b| a.partial_cmp(b).expect("finite biases"));
    grid.dedup();
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub bias: f64,
    pub seen: Option<f64>,
    pub unseen: Option<f64>,
    pub hm: f64,
}

/// Bias sweep trace; points are strictly increasing in bias.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BiasSweepResult {
    pub points: Vec<SweepPoint>,
}

pub fn sweep_from_scored(
    scored: &[ScoredRecord],
    grid: &[f64],
) -> Result<BiasSweepResult, EvalError> {
    let mut points = Vec::with_capacity(grid.len());
    for &bias in grid {
        let (seen, unseen) = accuracy_at_bias(scored, bias)?;
        let hm = match (seen, unseen) {
            (Some(s), Some(u)) => harmonic_mean(s, u)?,
            _ => 0.0,
        };
        points.push(SweepPoint {
            bias,
            seen,
            unseen,
            hm,
        });
    }
    Ok(BiasSweepResult { points })
}

/// Area under the (unseen, seen) curve: trapezoids after sorting by unseen
/// accuracy, averaging duplicate unseen values.
pub fn auc_from_points(points: &[(f64, f64)]) -> f64 {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite accuracies"));
    let mut grouped: Vec<(f64, f64)> = Vec::new();
    let mut i = 0;
    while i < pts.len() {
        let u = pts[i].0;
        let mut sum = 0.0;
        let mut count = 0usize;
        while i < pts.len() && pts[i].0 == u {
            sum += pts[i].1;
            count += 1;
            i += 1;
        }
        grouped.push((u, sum / count as f64));
    }
    if grouped.len() < 2 {
        return 0.0;
    }
    grouped
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrimitiveAccuracy {
    pub state_cond: f64,
    pub state_uncond: f64,
    pub object_cond: f64,
    pub object_uncond: f64,
}

/// Top-1 accuracy of each primitive independently, with and without
/// conditioning. Records lacking a primitive's label are skipped for that
/// primitive.
pub fn primitive_accuracy(
    model: &ProCCModel,
    dataset: &Dataset,
    split: Split,
) -> Result<PrimitiveAccuracy, EvalError> {
    let indices = dataset.split_indices(split);
    if indices.is_empty() {
        return Err(DataError::EmptySplit(split).into());
    }
    let mut data = Vec::with_capacity(indices.len() * dataset.dim);
    for &i in &indices {
        data.extend_from_slice(&dataset.records[i].feature);
    }
    let features = Tensor2::from_vec(indices.len(), dataset.dim, data)?;
    let (ps_cond, po_cond) = model.eval_probs(&features, true)?;
    let (ps_unc, po_unc) = model.eval_probs(&features, false)?;

    let acc = |probs: &Tensor2, pick: fn(&crate::data::FeatureRecord) -> Option<usize>| {
        let mut hit = 0usize;
        let mut total = 0usize;
        for (r, &i) in indices.iter().enumerate() {
            if let Some(label) = pick(&dataset.records[i]) {
                total += 1;
                hit += usize::from(argmax(probs.row(r)) == label);
            }
        }
        if total == 0 {
            0.0
        } else {
            hit as f64 / total as f64
        }
    };
    Ok(PrimitiveAccuracy {
        state_cond: acc(&ps_cond, |r| r.label.state),
        state_uncond: acc(&ps_unc, |r| r.label.state),
        object_cond: acc(&po_cond, |r| r.label.object),
        object_uncond: acc(&po_unc, |r| r.label.object),
    })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSummary {
    pub best_seen: Option<f64>,
    pub best_unseen: Option<f64>,
    pub best_hm: f64,
    pub auc: f64,
    pub state_acc: f64,
    pub object_acc: f64,
    pub sweep: BiasSweepResult,
}

/// Full sweep evaluation: best seen/unseen/HM maximized independently over
/// the grid, AUC of the traced curve, plus conditioned primitive accuracies.
pub fn sweep_metrics(
    model: &ProCCModel,
    dataset: &Dataset,
    split: Split,
    mask: &SpaceMask,
    seen_pairs: &BTreeSet<(usize, usize)>,
    n_biases: usize,
) -> Result<MetricsSummary, EvalError> {
    let scored = score_records(model, dataset, split, mask, seen_pairs)?;
    let grid = bias_grid(&scored, n_biases)?;
    let sweep = sweep_from_scored(&scored, &grid)?;
    let prim = primitive_accuracy(model, dataset, split)?;
    Ok(summarize(sweep, prim.state_cond, prim.object_cond))
}

/// Collapses a sweep into the summary metrics.
pub fn summarize(sweep: BiasSweepResult, state_acc: f64, object_acc: f64) -> MetricsSummary {
    let best_seen = sweep
        .points
        .iter()
        .filter_map(|p| p.seen)
        .fold(None, fold_max);
    let best_unseen = sweep
        .points
        .iter()
        .filter_map(|p| p.unseen)
        .fold(None, fold_max);
    let best_hm = sweep.points.iter().map(|p| p.hm).fold(0.0, f64::max);
    let curve: Vec<(f64, f64)> = sweep
        .points
        .iter()
        .filter_map(|p| Some((p.unseen?, p.seen?)))
        .collect();
    let auc = auc_from_points(&curve);
    MetricsSummary {
        best_seen,
        best_unseen,
        best_hm,
        auc,
        state_acc,
        object_acc,
        sweep,
    }
}

fn fold_max(acc: Option<f64>, v: f64) -> Option<f64> {
    Some(acc.map_or(v, |a| a.max(v)))
}

/// Mean predicted probability of each target class, grouped by the
/// conditioning primitive's true label. Rows with no records are uniform
/// and flagged.
#[derive(Debug, Clone)]
pub struct ConditionalConfusion {
    pub direction: CpcDirection,
    pub with_cpc: bool,
    pub rows: Tensor2,
    pub flagged: Vec<bool>,
}

pub fn conditional_confusion(
    model: &ProCCModel,
    dataset: &Dataset,
    split: Split,
    direction: CpcDirection,
    use_cpc: bool,
) -> Result<ConditionalConfusion, EvalError> {
    let indices = dataset.split_indices(split);
    if indices.is_empty() {
        return Err(DataError::EmptySplit(split).into());
    }
    let n_cond = match direction.conditioning_primitive() {
        Primitive::State => model.cfg.n_states,
        Primitive::Object => model.cfg.n_objects,
    };
    let n_target = match direction.target_primitive() {
        Primitive::State => model.cfg.n_states,
        Primitive::Object => model.cfg.n_objects,
    };
    let mut data = Vec::with_capacity(indices.len() * dataset.dim);
    for &i in &indices {
        data.extend_from_slice(&dataset.records[i].feature);
    }
    let features = Tensor2::from_vec(indices.len(), dataset.dim, data)?;
    let (p_state, p_object) = model.eval_probs(&features, use_cpc)?;
    let target_probs = match direction.target_primitive() {
        Primitive::State => &p_state,
        Primitive::Object => &p_object,
    };

    let mut rows = Tensor2::zeros(n_cond, n_target);
    let mut counts = vec![0usize; n_cond];
    for (r, &i) in indices.iter().enumerate() {
        let cond_label = match direction.conditioning_primitive() {
            Primitive::State => dataset.records[i].label.state,
            Primitive::Object => dataset.records[i].label.object,
        };
        if let Some(c) = cond_label {
            counts[c] += 1;
            for (dst, src) in rows.row_mut(c).iter_mut().zip(target_probs.row(r)) {
                *dst += src;
            }
        }
    }
    let mut flagged = vec![false; n_cond];
    for c in 0..n_cond {
        if counts[c] == 0 {
            flagged[c] = true;
            let uniform = 1.0 / n_target as f64;
            for v in rows.row_mut(c) {
                *v = uniform;
            }
        } else {
            for v in rows.row_mut(c) {
                *v /= counts[c] as f64;
            }
        }
    }
    Ok(ConditionalConfusion {
        direction,
        with_cpc: use_cpc,
        rows,
        flagged,
    })
}

/// Mean probability mass the target branch assigns to classes that are
/// feasible with each record's conditioning label.
pub fn feasible_probability_mass(
    model: &ProCCModel,
    dataset: &Dataset,
    split: Split,
    feasibility: &SpaceMask,
    direction: CpcDirection,
    use_cpc: bool,
) -> Result<f64, EvalError> {
    let indices = dataset.split_indices(split);
    if indices.is_empty() {
        return Err(DataError::EmptySplit(split).into());
    }
    let mut data = Vec::with_capacity(indices.len() * dataset.dim);
    for &i in &indices {
        data.extend_from_slice(&dataset.records[i].feature);
    }
    let features = Tensor2::from_vec(indices.len(), dataset.dim, data)?;
    let (p_state, p_object) = model.eval_probs(&features, use_cpc)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (r, &i) in indices.iter().enumerate() {
        let rec = &dataset.records[i];
        let mass = match direction {
            CpcDirection::ObjectToState => rec.label.object.map(|o| {
                p_state
                    .row(r)
                    .iter()
                    .enumerate()
                    .filter(|&(s, _)| feasibility.allows(s, o))
                    .map(|(_, &p)| p)
                    .sum::<f64>()
            }),
            CpcDirection::StateToObject => rec.label.state.map(|s| {
                p_object
                    .row(r)
                    .iter()
                    .enumerate()
                    .filter(|&(o, _)| feasibility.allows(s, o))
                    .map(|(_, &p)| p)
                    .sum::<f64>()
            }),
        };
        if let Some(m) = mass {
            total += m;
            count += 1;
        }
    }
    if count == 0 {
        return Err(EvalError::EmptyCohorts);
    }
    Ok(total / count as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

fn parse_opt(tok: &str, line: usize) -> Result<Option<f64>, EvalError> {
    if tok == "NA" {
        Ok(None)
    } else {
        tok.parse()
            .map(Some)
            .map_err(|_| EvalError::SweepParse {
                line,
                msg: format!("bad value `{tok}`"),
            })
    }
}

/// Writes `metrics.csv`, `sweep.csv`, one confusion CSV per matrix,
/// `sweep.svg`, and `summary.md` into `out_dir`. An empty sweep is an error
/// and nothing is written.
pub fn export_report(
    summary: &MetricsSummary,
    confusions: &[ConditionalConfusion],
    train_report: Option<&TrainReport>,
    out_dir: &Path,
) -> Result<(), EvalError> {
    if summary.sweep.points.is_empty() {
        return Err(EvalError::EmptySweep);
    }
    fs::create_dir_all(out_dir)?;

    let mut metrics = String::new();
    let _ = writeln!(metrics, "best_seen,{}", fmt_opt(summary.best_seen));
    let _ = writeln!(metrics, "best_unseen,{}", fmt_opt(summary.best_unseen));
    let _ = writeln!(metrics, "best_hm,{}", summary.best_hm);
    let _ = writeln!(metrics, "auc,{}", summary.auc);
    let _ = writeln!(metrics, "state_acc,{}", summary.state_acc);
    let _ = writeln!(metrics, "object_acc,{}", summary.object_acc);
    fs::write(out_dir.join("metrics.csv"), metrics)?;

    let mut sweep = String::from("bias,seen,unseen,hm\n");
    for p in &summary.sweep.points {
        let _ = writeln!(
            sweep,
            "{},{},{},{}",
            p.bias,
            fmt_opt(p.seen),
            fmt_opt(p.unseen),
            p.hm
        );
    }
    fs::write(out_dir.join("sweep.csv"), sweep)?;

    for confusion in confusions {
        let dir_tag = match confusion.direction {
            CpcDirection::ObjectToState => "o_to_s",
            CpcDirection::StateToObject => "s_to_o",
        };
        let cpc_tag = if confusion.with_cpc { "with" } else { "without" };
        let mut out = String::from("cond,flagged");
        for t in 0..confusion.rows.cols() {
            let _ = write!(out, ",p{t}");
        }
        out.push('\n');
        for c in 0..confusion.rows.rows() {
            let _ = write!(out, "{},{}", c, u8::from(confusion.flagged[c]));
            for v in confusion.rows.row(c) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        fs::write(
            out_dir.join(format!("confusion_{dir_tag}_{cpc_tag}.csv")),
            out,
        )?;
    }

    fs::write(out_dir.join("sweep.svg"), sweep_svg(&summary.sweep))?;
    fs::write(out_dir.join("summary.md"), summary_md(summary, train_report))?;
    Ok(())
}

/// Parses a `sweep.csv` produced by [`export_report`].
pub fn parse_sweep_csv(text: &str) -> Result<BiasSweepResult, EvalError> {
    let mut points = Vec::new();
    for (no, line) in text.lines().enumerate() {
        if no == 0 {
            if line != "bias,seen,unseen,hm" {
                return Err(EvalError::SweepParse {
                    line: 1,
                    msg: format!("unexpected header `{line}`"),
                });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(EvalError::SweepParse {
                line: no + 1,
                msg: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let bias: f64 = fields[0].parse().map_err(|_| EvalError::SweepParse {
            line: no + 1,
            msg: format!("bad bias `{}`", fields[0]),
        })?;
        let seen = parse_opt(fields[1], no + 1)?;
        let unseen = parse_opt(fields[2], no + 1)?;
        let hm: f64 = fields[3].parse().map_err(|_| EvalError::SweepParse {
            line: no + 1,
            msg: format!("bad hm `{}`", fields[3]),
        })?;
        points.push(SweepPoint {
            bias,
            seen,
            unseen,
            hm,
        });
    }
    Ok(BiasSweepResult { points })
}

/// Minimal static polyline chart of the (unseen, seen) curve on [0,1] axes.
fn sweep_svg(sweep: &BiasSweepResult) -> String {
    const SIZE: f64 = 420.0;
    const MARGIN: f64 = 45.0;
    let span = SIZE - 2.0 * MARGIN;
    let x = |u: f64| MARGIN + u * span;
    let y = |s: f64| SIZE - MARGIN - s * span;

    let mut curve: Vec<(f64, f64)> = sweep
        .points
        .iter()
        .filter_map(|p| Some((p.unseen?, p.seen?)))
        .collect();
    curve.sort_by(|a, b| a.partial_cmp(b).expect("finite"));

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {SIZE} {SIZE}\" width=\"{SIZE}\" height=\"{SIZE}\">"
    );
    let _ = writeln!(
        svg,
        "  <rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{span}\" height=\"{span}\" fill=\"none\" stroke=\"#444\"/>"
    );
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = writeln!(
            svg,
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"middle\">{tick}</text>",
            x(tick),
            SIZE - MARGIN + 14.0
        );
        let _ = writeln!(
            svg,
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"end\">{tick}</text>",
            MARGIN - 6.0,
            y(tick) + 3.0
        );
    }
    let _ = writeln!(
        svg,
        "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\">unseen accuracy</text>",
        SIZE / 2.0,
        SIZE - 8.0
    );
    let _ = writeln!(
        svg,
        "  <text x=\"14\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.1})\">seen accuracy</text>",
        SIZE / 2.0,
        SIZE / 2.0
    );
    if !curve.is_empty() {
        let pts: Vec<String> = curve
            .iter()
            .map(|&(u, s)| format!("{:.2},{:.2}", x(u), y(s)))
            .collect();
        let _ = writeln!(
            svg,
            "  <polyline points=\"{}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\"/>",
            pts.join(" ")
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn summary_md(summary: &MetricsSummary, train_report: Option<&TrainReport>) -> String {
    let mut md = String::from("# Evaluation summary\n\n");
    md.push_str("| metric | value |\n|---|---|\n");
    let _ = writeln!(md, "| best seen | {} |", fmt_opt(summary.best_seen));
    let _ = writeln!(md, "| best unseen | {} |", fmt_opt(summary.best_unseen));
    let _ = writeln!(md, "| best HM | {} |", summary.best_hm);
    let _ = writeln!(md, "| AUC | {} |", summary.auc);
    let _ = writeln!(md, "| state accuracy | {} |", summary.state_acc);
    let _ = writeln!(md, "| object accuracy | {} |", summary.object_acc);
    let _ = writeln!(
        md,
        "\nSweep: {} bias points.\n",
        summary.sweep.points.len()
    );
    if let Some(report) = train_report {
        let _ = writeln!(
            md,
            "\n## Training\n\n- stage: {}\n- epochs: {}\n- wall seconds: {:.3}\n- stopped: {:?}\n",
            report.stage.index(),
            report.epochs_run,
            report.wall_seconds,
            report.stopped
        );
    }
    md
}
