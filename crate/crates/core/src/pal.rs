//! Progressive anchor loss: a per-shot classification + regression loss with
//! hard negative mining, and the weighted sum over the two shots.

use crate::anchors::Shot;
use crate::error::{Error, Result};
use crate::geometry::{BBox, BoxCoder, BoxDelta};
use crate::matching::MatchResult;
use crate::tensor::loss::{smooth_l1, smooth_l1_grad, softmax_ce_single};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the regression term.
    pub beta: f64,
    /// Weight of the second shot in the combined loss.
    pub lambda: f64,
    /// Mined negatives per positive.
    pub neg_pos_ratio: f64,
    /// Divide the regression term by `N_conf` as well (single outer normalizer).
    pub eq2_literal_grouping: bool,
    pub coder: BoxCoder,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 1.0,
            lambda: 1.0,
            neg_pos_ratio: 3.0,
            eq2_literal_grouping: false,
            coder: BoxCoder::plain(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.neg_pos_ratio > 0.0 && self.neg_pos_ratio.is_finite()) {
            return Err(Error::invalid(format!(
                "neg_pos_ratio must be positive, got {}",
                self.neg_pos_ratio
            )));
        }
        Ok(())
    }
}

/// Per-anchor outputs of one shot, in flattened anchor order.
#[derive(Clone, Debug, PartialEq)]
pub struct ShotPredictions {
    pub shot: Shot,
    /// `[background, face]` logits.
    pub cls_logits: Vec<[f64; 2]>,
    pub loc_deltas: Vec<BoxDelta>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub conf: f64,
    /// Weighted and normalized regression term.
    pub loc: f64,
    pub total_shot: f64,
    pub n_pos: usize,
    pub n_conf: usize,
    pub pal_total: Option<f64>,
}

/// Gradients of `total_shot` with respect to the predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct ShotGrads {
    pub d_logits: Vec<[f64; 2]>,
    pub d_deltas: Vec<[f64; 4]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShotLoss {
    pub report: LossReport,
    pub grads: ShotGrads,
    /// Mined negative anchor indices, hardest first.
    pub selected_negatives: Vec<usize>,
}

/// Hardest negatives by descending loss; ties go to the lower index.
/// Keeps `min(floor(ratio * n_pos), n_neg)`, or `max(floor(ratio), 1)` when
/// there are no positives.
pub fn mine_negatives(cls_losses: &[f64], labels: &[Option<usize>], ratio: f64) -> Vec<usize> {
    let n_pos = labels.iter().filter(|l| l.is_some()).count();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_none()).collect();
    let quota = if n_pos == 0 {
        (ratio.floor() as usize).max(1)
    } else {
        (ratio * n_pos as f64).floor() as usize
    };
    let keep = quota.min(neg.len());
    neg.sort_by(|&a, &b| cls_losses[b].total_cmp(&cls_losses[a]).then(a.cmp(&b)));
    neg.truncate(keep);
    neg
}

fn check_lengths(preds: &ShotPredictions, m: &MatchResult, anchors: &[BBox]) -> Result<()> {
    let n = anchors.len();
    if n == 0 {
        return Err(Error::invalid("shot loss needs at least one anchor"));
    }
    if preds.cls_logits.len() != n || preds.loc_deltas.len() != n || m.anchor_labels.len() != n {
        return Err(Error::shape(format!(
            "{} shot: {} anchors, {} logits, {} deltas, {} labels",
            preds.shot,
            n,
            preds.cls_logits.len(),
            preds.loc_deltas.len(),
            m.anchor_labels.len()
        )));
    }
    Ok(())
}

fn labels_u8(m: &MatchResult) -> Vec<u8> {
    m.anchor_labels.iter().map(|l| u8::from(l.is_some())).collect()
}

/// Loss of one shot with negatives mined from the current logits.
pub fn shot_loss(
    preds: &ShotPredictions,
    m: &MatchResult,
    anchors: &[BBox],
    faces: &[BBox],
    cfg: &LossConfig,
) -> Result<ShotLoss> {
    check_lengths(preds, m, anchors)?;
    let labels = labels_u8(m);
    let ce: Vec<f64> = preds
        .cls_logits
        .iter()
        .zip(&labels)
        .map(|(&z, &y)| softmax_ce_single(z, y).map(|t| t.loss))
        .collect::<Result<_>>()?;
    let selected = mine_negatives(&ce, &m.anchor_labels, cfg.neg_pos_ratio);
    shot_loss_with_selection(preds, m, anchors, faces, cfg, &selected)
}

/// Loss of one shot with a fixed set of negatives.
pub fn shot_loss_with_selection(
    preds: &ShotPredictions,
    m: &MatchResult,
    anchors: &[BBox],
    faces: &[BBox],
    cfg: &LossConfig,
    negatives: &[usize],
) -> Result<ShotLoss> {
    cfg.validate()?;
    check_lengths(preds, m, anchors)?;
    let n = anchors.len();
    let mut d_logits = vec![[0.0; 2]; n];
    let mut d_deltas = vec![[0.0; 4]; n];

    let positives: Vec<(usize, usize)> = m.positives().collect();
    let n_pos = positives.len();
    let n_conf = n_pos + negatives.len();

    let mut conf = 0.0;
    if n_conf > 0 {
        let inv = 1.0 / n_conf as f64;
        let terms = positives
            .iter()
            .map(|&(a, _)| (a, 1u8))
            .chain(negatives.iter().map(|&a| (a, 0u8)));
        for (a, y) in terms {
            if y == 0 && m.anchor_labels.get(a).is_none_or(Option::is_some) {
                return Err(Error::invalid(format!("selected negative {a} is not a negative anchor")));
            }
            let t = softmax_ce_single(preds.cls_logits[a], y)?;
            conf += t.loss * inv;
            d_logits[a] = [t.grad[0] * inv, t.grad[1] * inv];
        }
    }

    let mut loc = 0.0;
    if n_pos > 0 {
        let mut norm = cfg.beta / n_pos as f64;
        if cfg.eq2_literal_grouping {
            norm /= n_conf as f64;
        }
        for &(a, f) in &positives {
            let face = faces
                .get(f)
                .ok_or_else(|| Error::invalid(format!("anchor {a} matched to missing face {f}")))?;
            let target = cfg.coder.encode(face, &anchors[a]).to_array();
            let pred = preds.loc_deltas[a].to_array();
            loc += norm * smooth_l1(pred, target);
            let g = smooth_l1_grad(pred, target);
            d_deltas[a] = g.map(|v| v * norm);
        }
    }

    let total = conf + loc;
    if !total.is_finite() {
        return Err(Error::NonFinite(format!(
            "{} shot loss: conf {conf}, loc {loc}",
            preds.shot
        )));
    }
    Ok(ShotLoss {
        report: LossReport {
            conf,
            loc,
            total_shot: total,
            n_pos,
            n_conf,
            pal_total: None,
        },
        grads: ShotGrads { d_logits, d_deltas },
        selected_negatives: negatives.to_vec(),
    })
}

/// `first + lambda * second`.
pub fn pal_total(first: &LossReport, second: &LossReport, lambda: f64) -> Result<f64> {
    if !(first.total_shot.is_finite() && second.total_shot.is_finite()) {
        return Err(Error::NonFinite("shot losses must be finite".into()));
    }
    Ok(first.total_shot + lambda * second.total_shot)
}
