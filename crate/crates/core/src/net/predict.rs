use crate::anchors::Shot;
use crate::error::{Error, Result};
use crate::geometry::{nms, round_detection, BBox, BoxCoder, BoxDelta, Detection};
use crate::tensor::loss::face_probability;
use crate::tensor::{Graph, Tensor};

use super::Network;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictConfig {
    /// Scores below this never enter the candidate list.
    pub conf_thresh: f64,
    pub top_pre: usize,
    pub nms_overlap: f64,
    pub top_post: usize,
    pub coder: BoxCoder,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            conf_thresh: 0.01,
            top_pre: 5000,
            nms_overlap: 0.3,
            top_post: 750,
            coder: BoxCoder::plain(),
        }
    }
}

/// Score filter, top-`top_pre`, decode, NMS, top-`top_post`, integer rounding.
/// Equal scores keep anchor order.
pub fn postprocess(scores: &[f64], deltas: &[BoxDelta], anchors: &[BBox], cfg: &PredictConfig) -> Result<Vec<Detection>> {
    if scores.len() != deltas.len() || scores.len() != anchors.len() {
        return Err(Error::shape(format!(
            "{} scores, {} deltas, {} anchors",
            scores.len(),
            deltas.len(),
            anchors.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= cfg.conf_thresh).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.truncate(cfg.top_pre);
    let candidates: Vec<Detection> = order
        .iter()
        .map(|&i| Detection::new(cfg.coder.decode(&deltas[i], &anchors[i]).bbox, scores[i]))
        .filter(|d| d.bbox.is_valid())
        .collect();
    let mut kept = nms(&candidates, cfg.nms_overlap);
    kept.truncate(cfg.top_post);
    Ok(kept
        .into_iter()
        .map(|d| Detection::new(round_detection(&d.bbox), d.score))
        .collect())
}

/// Second-shot detections for one `1 x C x S x S` image.
pub fn predict(net: &Network, image: &Tensor, cfg: &PredictConfig) -> Result<Vec<Detection>> {
    if image.shape().batch != 1 {
        return Err(Error::shape("predict takes one image"));
    }
    let mut g = Graph::new();
    let vars = net.register(&mut g);
    let x = net.input_leaf(&mut g, image)?;
    let out = net.forward_second_graph(&mut g, &vars, x)?;
    let preds = out.predictions(&g, 0);
    let scores: Vec<f64> = preds.cls_logits.iter().map(|&z| face_probability(z)).collect();
    postprocess(&scores, &preds.loc_deltas, net.anchors(Shot::Second), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn caps_and_ordering() {
        // 1000 disjoint anchors on a grid, equal scores
        let anchors: Vec<BBox> = (0..1000)
            .map(|k| BBox::new((k % 40) as f64 * 10.0, (k / 40) as f64 * 10.0, 5.0, 5.0))
            .collect();
        let deltas = vec![BoxDelta::default(); 1000];
        let scores = vec![0.5; 1000];
        let out = postprocess(&scores, &deltas, &anchors, &PredictConfig::default()).unwrap();
        assert_eq!(out.len(), 750);
        assert_eq!(out[0].bbox, anchors[0]);
        assert_eq!(out[749].bbox, anchors[749]);

        let cfg = PredictConfig {
            top_pre: 10,
            ..PredictConfig::default()
        };
        let mut s = vec![0.5; 1000];
        s[999] = 0.9;
        let out = postprocess(&s, &deltas, &anchors, &cfg).unwrap();
        assert_eq!(out.len(), 10);
        assert_eq!(out[0].bbox, anchors[999]);
    }

    #[test]
    fn threshold_and_rounding() {
        let anchors = vec![BBox::new(0.5, 0.5, 10.0, 10.0), BBox::new(50.0, 50.0, 10.0, 10.0)];
        let deltas = vec![BoxDelta::default(); 2];
        let out = postprocess(&[0.6, 0.001], &deltas, &anchors, &PredictConfig::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].bbox, BBox::new(0.0, 0.0, 10.0, 10.0));
        assert!(postprocess(&[0.5], &deltas, &anchors, &PredictConfig::default()).is_err());
    }
}
