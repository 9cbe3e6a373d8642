//! IoU-threshold anchor assignment and the per-face matching statistics.

use std::fmt::Write as _;

use crate::anchors::AnchorGrid;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

/// Default threshold of the improved matching.
pub const IAM_THRESHOLD: f64 = 0.4;
/// Threshold used for the traditional-matching baseline.
pub const TRADITIONAL_THRESHOLD: f64 = 0.35;

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// `Some(face)` for positive anchors, `None` for background.
    pub anchor_labels: Vec<Option<usize>>,
    pub per_face_counts: Vec<usize>,
    pub per_face_scales: Vec<f64>,
}

impl MatchResult {
    pub fn num_positive(&self) -> usize {
        self.anchor_labels.iter().filter(|l| l.is_some()).count()
    }

    pub fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.anchor_labels
            .iter()
            .enumerate()
            .filter_map(|(a, l)| l.map(|f| (a, f)))
    }
}

/// Assigns each anchor to its highest-IoU face when that IoU is at least
/// `threshold`. With `force_best`, every face also claims its best anchor not
/// yet claimed by an earlier face, whatever the IoU.
pub fn match_anchors(anchors: &[BBox], faces: &[BBox], threshold: f64, force_best: bool) -> Result<MatchResult> {
    if anchors.is_empty() {
        return Err(Error::invalid("cannot match against an empty anchor set"));
    }
    check_threshold(threshold)?;
    Ok(assign(anchors.len(), faces, threshold, force_best, |face| {
        let mut out = Vec::new();
        for (a, anchor) in anchors.iter().enumerate() {
            if anchor.x >= face.right()
                || face.x >= anchor.right()
                || anchor.y >= face.bottom()
                || face.y >= anchor.bottom()
            {
                continue;
            }
            let v = iou(anchor, face);
            if v > 0.0 {
                out.push((a, v));
            }
        }
        out
    }))
}

/// Same assignment as [`match_anchors`] on the flattened grids, visiting only
/// the cells whose anchors can overlap each face.
pub fn match_grids(grids: &[AnchorGrid], faces: &[BBox], threshold: f64, force_best: bool) -> Result<MatchResult> {
    let total: usize = grids.iter().map(AnchorGrid::len).sum();
    if total == 0 {
        return Err(Error::invalid("cannot match against an empty anchor set"));
    }
    check_threshold(threshold)?;
    Ok(assign(total, faces, threshold, force_best, |face| {
        let mut out = Vec::new();
        let mut offset = 0;
        for g in grids {
            let spec = &g.level;
            let (aw, ah) = g.anchor_size();
            let s = spec.stride as f64;
            let cols = cell_window(face.cx(), (aw + face.w) / 2.0, s, spec.map_w);
            let rows = cell_window(face.cy(), (ah + face.h) / 2.0, s, spec.map_h);
            for i in rows.clone() {
                for j in cols.clone() {
                    let a = offset + i * spec.map_w + j;
                    let v = iou(&g.boxes[i * spec.map_w + j], face);
                    if v > 0.0 {
                        out.push((a, v));
                    }
                }
            }
            offset += g.len();
        }
        out.sort_unstable_by_key(|&(a, _)| a);
        out
    }))
}

/// Cells whose centre `(k + 0.5) * stride` lies within `reach` of `center`.
fn cell_window(center: f64, reach: f64, stride: f64, len: usize) -> std::ops::Range<usize> {
    let lo = ((center - reach) / stride - 0.5).floor().max(0.0);
    let hi = ((center + reach) / stride - 0.5).ceil() + 1.0;
    let hi = hi.min(len as f64).max(0.0);
    if lo >= hi {
        0..0
    } else {
        lo as usize..hi as usize
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!("IoU threshold {threshold} outside (0, 1)")));
    }
    Ok(())
}

/// Shared assignment given, per face, the anchors with positive IoU in
/// ascending anchor order.
fn assign<F>(num_anchors: usize, faces: &[BBox], threshold: f64, force_best: bool, overlaps: F) -> MatchResult
where
    F: Fn(&BBox) -> Vec<(usize, f64)>,
{
    let mut best_iou = vec![0.0f64; num_anchors];
    let mut labels: Vec<Option<usize>> = vec![None; num_anchors];
    let mut claimed = vec![false; num_anchors];
    let mut forced: Vec<(usize, usize)> = Vec::new();

    for (f, face) in faces.iter().enumerate() {
        let cands = overlaps(face);
        for &(a, v) in &cands {
            // strict: earlier faces win ties
            if v > best_iou[a] {
                best_iou[a] = v;
                labels[a] = (v >= threshold).then_some(f);
            }
        }
        if force_best {
            let mut pick: Option<(usize, f64)> = None;
            for &(a, v) in &cands {
                if claimed[a] {
                    continue;
                }
                if pick.is_none_or(|(_, pv)| v > pv) {
                    pick = Some((a, v));
                }
            }
            let chosen = pick
                .map(|(a, _)| a)
                .or_else(|| (0..num_anchors).find(|&a| !claimed[a]));
            if let Some(a) = chosen {
                claimed[a] = true;
                forced.push((a, f));
            }
        }
    }
    for (a, f) in forced {
        labels[a] = Some(f);
    }

    let mut per_face_counts = vec![0; faces.len()];
    for f in labels.iter().flatten() {
        per_face_counts[*f] += 1;
    }
    MatchResult {
        anchor_labels: labels,
        per_face_counts,
        per_face_scales: faces.iter().map(BBox::scale).collect(),
    }
}

/// Matched-count histogram cap: the last bucket collects `>= HIST_CAP`.
pub const HIST_CAP: usize = 20;

/// Per-face matched anchor counts grouped by face scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleBin {
    pub lo: f64,
    pub hi: f64,
    pub face_count: usize,
    pub matched_sum: usize,
    pub hist: [usize; HIST_CAP + 1],
}

impl ScaleBin {
    fn empty(lo: f64, hi: f64) -> Self {
        ScaleBin {
            lo,
            hi,
            face_count: 0,
            matched_sum: 0,
            hist: [0; HIST_CAP + 1],
        }
    }

    pub fn mean_matched(&self) -> Option<f64> {
        (self.face_count > 0).then(|| self.matched_sum as f64 / self.face_count as f64)
    }

    pub fn label(&self) -> String {
        if self.hi.is_infinite() {
            format!("{}-inf", self.lo)
        } else {
            format!("{}-{}", self.lo, self.hi)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchStats {
    /// `[0,8)`, `[8,16)`, ..., `[256,512)`, `[512,inf)`.
    pub bins: Vec<ScaleBin>,
}

impl Default for MatchStats {
    fn default() -> Self {
        let mut edges = vec![0.0];
        edges.extend((3..=9).map(|p| f64::from(1u32 << p)));
        edges.push(f64::INFINITY);
        MatchStats {
            bins: edges.windows(2).map(|w| ScaleBin::empty(w[0], w[1])).collect(),
        }
    }
}

impl MatchStats {
    pub fn record(&mut self, scale: f64, matched: usize) {
        let bin = self
            .bins
            .iter_mut()
            .find(|b| scale >= b.lo && scale < b.hi)
            .expect("bins cover [0, inf)");
        bin.face_count += 1;
        bin.matched_sum += matched;
        bin.hist[matched.min(HIST_CAP)] += 1;
    }

    pub fn record_match(&mut self, m: &MatchResult) {
        for (&s, &c) in m.per_face_scales.iter().zip(&m.per_face_counts) {
            self.record(s, c);
        }
    }

    /// Order-independent combination of two partial aggregates.
    pub fn merge(&mut self, other: &MatchStats) {
        for (a, b) in self.bins.iter_mut().zip(&other.bins) {
            a.face_count += b.face_count;
            a.matched_sum += b.matched_sum;
            for (x, y) in a.hist.iter_mut().zip(&b.hist) {
                *x += y;
            }
        }
    }

    pub fn total_faces(&self) -> usize {
        self.bins.iter().map(|b| b.face_count).sum()
    }

    /// `None` when no face was recorded.
    pub fn mean_matched(&self) -> Option<f64> {
        let n = self.total_faces();
        let s: usize = self.bins.iter().map(|b| b.matched_sum).sum();
        (n > 0).then(|| s as f64 / n as f64)
    }

    /// Histogram of matched counts over all faces.
    pub fn overall_hist(&self) -> [usize; HIST_CAP + 1] {
        let mut h = [0; HIST_CAP + 1];
        for b in &self.bins {
            for (x, y) in h.iter_mut().zip(&b.hist) {
                *x += y;
            }
        }
        h
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scale_bin,face_count,mean_matched");
        for k in 0..=HIST_CAP {
            let _ = write!(out, ",hist_{k}");
        }
        out.push('\n');
        for b in &self.bins {
            let mean = b.mean_matched().map(|m| format!("{m:.6}")).unwrap_or_default();
            let _ = write!(out, "{},{},{}", b.label(), b.face_count, mean);
            for h in &b.hist {
                let _ = write!(out, ",{h}");
            }
            out.push('\n');
        }
        match self.mean_matched() {
            Some(m) => {
                let _ = writeln!(out, "mean_matched_overall={m:.6}");
            }
            None => out.push_str("mean_matched_overall=undefined\n"),
        }
        out
    }
}

/// Threshold matching without the forced best anchor, aggregated over images.
pub fn matched_count_stats(dataset: &[Vec<BBox>], grids: &[AnchorGrid], threshold: f64) -> Result<MatchStats> {
    let mut stats = MatchStats::default();
    for faces in dataset {
        if faces.is_empty() {
            continue;
        }
        let m = match_grids(grids, faces, threshold, false)?;
        stats.record_match(&m);
    }
    Ok(stats)
}

/// Anchor-scale centres used by [`scale_histogram`].
pub const HISTOGRAM_CENTERS: [f64; 6] = [16.0, 32.0, 64.0, 128.0, 256.0, 512.0];

/// Face counts in geometric bins `[c / sqrt 2, c * sqrt 2)` around each centre.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleHistogram {
    pub centers: Vec<f64>,
    pub counts: Vec<usize>,
    pub below: usize,
    pub above: usize,
}

impl ScaleHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum::<usize>() + self.below + self.above
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scale_center,count\n");
        let _ = writeln!(out, "below,{}", self.below);
        for (c, n) in self.centers.iter().zip(&self.counts) {
            let _ = writeln!(out, "{c},{n}");
        }
        let _ = writeln!(out, "above,{}", self.above);
        out
    }
}

pub fn scale_histogram<'a>(faces: impl IntoIterator<Item = &'a BBox>) -> ScaleHistogram {
    let r = std::f64::consts::SQRT_2;
    let mut h = ScaleHistogram {
        centers: HISTOGRAM_CENTERS.to_vec(),
        counts: vec![0; HISTOGRAM_CENTERS.len()],
        below: 0,
        above: 0,
    };
    for f in faces {
        let s = f.scale();
        if s < HISTOGRAM_CENTERS[0] / r {
            h.below += 1;
        } else if let Some(k) = HISTOGRAM_CENTERS.iter().position(|&c| s < c * r) {
            h.counts[k] += 1;
        } else {
            h.above += 1;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::{build_grids, level_specs, ScaleMode, Shot};
    use proptest::prelude::*;

    /// Anchor-major reference: recompute every anchor/face IoU directly.
    fn brute_force(anchors: &[BBox], faces: &[BBox], threshold: f64, force_best: bool) -> Vec<Option<usize>> {
        let mut labels: Vec<Option<usize>> = anchors
            .iter()
            .map(|a| {
                let mut best: Option<(usize, f64)> = None;
                for (f, face) in faces.iter().enumerate() {
                    let v = iou(a, face);
                    if v > 0.0 && best.is_none_or(|(_, bv)| v > bv) {
                        best = Some((f, v));
                    }
                }
                best.filter(|&(_, v)| v >= threshold).map(|(f, _)| f)
            })
            .collect();
        if force_best {
            let mut claimed = vec![false; anchors.len()];
            for (f, face) in faces.iter().enumerate() {
                let mut pick: Option<(usize, f64)> = None;
                for (a, anchor) in anchors.iter().enumerate() {
                    if claimed[a] {
                        continue;
                    }
                    let v = iou(anchor, face);
                    if pick.is_none_or(|(_, pv)| v > pv) {
                        pick = Some((a, v));
                    }
                }
                if let Some((a, _)) = pick {
                    claimed[a] = true;
                    labels[a] = Some(f);
                }
            }
        }
        labels
    }

    fn arb_box(max: f64) -> impl Strategy<Value = BBox> {
        (0.0..max, 0.0..max, 1.0..max / 2.0, 1.0..max / 2.0).prop_map(|(x, y, w, h)| BBox::new(x, y, w, h))
    }

    #[test]
    fn below_threshold_is_negative() {
        // IoU 0.39 = 39/100: face 10x10, anchor 3.9x10 inside it
        let face = BBox::new(0.0, 0.0, 10.0, 10.0);
        let anchor = BBox::new(0.0, 0.0, 3.9, 10.0);
        assert!((iou(&anchor, &face) - 0.39).abs() < 1e-12);
        let m = match_anchors(&[anchor], &[face], 0.4, false).unwrap();
        assert_eq!(m.anchor_labels, vec![None]);
        let m = match_anchors(&[anchor], &[face], 0.39, false).unwrap();
        assert_eq!(m.anchor_labels, vec![Some(0)]);
    }

    #[test]
    fn identical_box_matches() {
        let b = BBox::new(3.0, 4.0, 10.0, 15.0);
        for t in [0.1, 0.5, 0.99] {
            let m = match_anchors(&[b], &[b], t, false).unwrap();
            assert_eq!(m.per_face_counts, vec![1]);
        }
    }

    #[test]
    fn errors_and_empty_faces() {
        assert!(match_anchors(&[], &[BBox::new(0.0, 0.0, 1.0, 1.0)], 0.4, false).is_err());
        let a = [BBox::new(0.0, 0.0, 1.0, 1.0)];
        assert!(match_anchors(&a, &[], 1.0, false).is_err());
        let m = match_anchors(&a, &[], 0.4, true).unwrap();
        assert_eq!(m.anchor_labels, vec![None]);
        assert!(m.per_face_counts.is_empty());
    }

    #[test]
    fn force_best_claims_low_overlap_anchor() {
        let anchors = [BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(100.0, 0.0, 10.0, 10.0)];
        let face = BBox::new(8.0, 8.0, 10.0, 10.0);
        let off = match_anchors(&anchors, &[face], 0.4, false).unwrap();
        assert_eq!(off.per_face_counts, vec![0]);
        let on = match_anchors(&anchors, &[face], 0.4, true).unwrap();
        assert_eq!(on.anchor_labels, vec![Some(0), None]);
    }

    #[test]
    fn force_best_resolves_conflicts() {
        let anchors = [BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(30.0, 0.0, 10.0, 10.0)];
        let faces = [BBox::new(1.0, 0.0, 10.0, 10.0), BBox::new(2.0, 0.0, 10.0, 10.0)];
        let m = match_anchors(&anchors, &faces, 0.9, true).unwrap();
        assert_eq!(m.per_face_counts, vec![1, 1]);
        assert_eq!(m.anchor_labels[0], Some(0));
    }

    #[test]
    fn congruent_face_counts_at_least_one() {
        let specs = level_specs(640).unwrap();
        let grids = build_grids(&specs, Shot::Second, ScaleMode::Width);
        let face = grids[2].boxes[5 * 40 + 7];
        let s = matched_count_stats(&[vec![face]], &grids, 0.4).unwrap();
        assert!(s.mean_matched().unwrap() >= 1.0);
    }

    #[test]
    fn degenerate_dataset_has_undefined_mean() {
        let grids = build_grids(&level_specs(128).unwrap(), Shot::Second, ScaleMode::Width);
        let s = matched_count_stats(&[vec![], vec![]], &grids, 0.4).unwrap();
        assert_eq!(s.total_faces(), 0);
        assert_eq!(s.mean_matched(), None);
        assert!(s.to_csv().ends_with("mean_matched_overall=undefined\n"));
    }

    #[test]
    fn stats_csv_layout() {
        let mut s = MatchStats::default();
        s.record(10.0, 3);
        s.record(600.0, 25);
        let csv = s.to_csv();
        let header = csv.lines().next().unwrap();
        assert!(header.starts_with("scale_bin,face_count,mean_matched,hist_0,"));
        assert!(header.ends_with(",hist_20"));
        assert_eq!(header.split(',').count(), 3 + 21);
        assert!(csv.contains("\n8-16,1,3.000000,0,0,0,1,"));
        assert!(csv.contains("\n512-inf,1,25.000000,"));
        assert!(csv.ends_with("mean_matched_overall=14.000000\n"));
    }

    #[test]
    fn histogram_examples() {
        let faces = vec![BBox::new(0.0, 0.0, 32.0, 32.0); 5];
        let h = scale_histogram(&faces);
        assert_eq!(h.counts, vec![0, 5, 0, 0, 0, 0]);
        let empty = scale_histogram(&[]);
        assert_eq!(empty.total(), 0);
        let edge = scale_histogram(&[BBox::new(0.0, 0.0, 4.0, 4.0), BBox::new(0.0, 0.0, 900.0, 900.0)]);
        assert_eq!((edge.below, edge.above), (1, 1));
    }

    #[test]
    fn merge_is_order_independent() {
        let mut a = MatchStats::default();
        a.record(20.0, 4);
        let mut b = MatchStats::default();
        b.record(100.0, 7);
        b.record(5.0, 0);
        let mut ab = a.clone();
        ab.merge(&b);
        let mut ba = b.clone();
        ba.merge(&a);
        assert_eq!(ab, ba);
        assert_eq!(ab.total_faces(), 3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn matcher_equals_brute_force(
            anchors in proptest::collection::vec(arb_box(60.0), 1..100),
            faces in proptest::collection::vec(arb_box(60.0), 0..10),
            threshold in 0.05..0.95f64,
            force in any::<bool>(),
        ) {
            let m = match_anchors(&anchors, &faces, threshold, force).unwrap();
            prop_assert_eq!(&m.anchor_labels, &brute_force(&anchors, &faces, threshold, force));
            prop_assert_eq!(m.per_face_counts.iter().sum::<usize>(), m.num_positive());
            if force && anchors.len() >= faces.len() {
                prop_assert!(m.per_face_counts.iter().all(|&c| c >= 1));
            }
        }

        #[test]
        fn grid_matcher_equals_flat_matcher(
            faces in proptest::collection::vec(arb_box(160.0), 0..6),
            threshold in 0.1..0.9f64,
            force in any::<bool>(),
        ) {
            let grids = build_grids(&level_specs(160).unwrap(), Shot::First, ScaleMode::Width);
            let flat = crate::anchors::flatten(&grids);
            let a = match_grids(&grids, &faces, threshold, force).unwrap();
            let b = match_anchors(&flat, &faces, threshold, force).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn permuting_faces_permutes_labels(
            anchors in proptest::collection::vec(arb_box(60.0), 1..60),
            faces in proptest::collection::vec(arb_box(60.0), 1..6),
            rot in 0usize..6,
        ) {
            let n = faces.len();
            let perm: Vec<usize> = (0..n).map(|k| (k + rot) % n).collect();
            let permuted: Vec<BBox> = perm.iter().map(|&k| faces[k]).collect();
            let a = match_anchors(&anchors, &faces, 0.4, false).unwrap();
            let b = match_anchors(&anchors, &permuted, 0.4, false).unwrap();
            for (la, lb) in a.anchor_labels.iter().zip(&b.anchor_labels) {
                prop_assert_eq!(*la, lb.map(|k| perm[k]));
            }
        }

        #[test]
        fn lower_threshold_never_loses_matches(
            anchors in proptest::collection::vec(arb_box(60.0), 1..60),
            faces in proptest::collection::vec(arb_box(60.0), 1..6),
            hi in 0.2..0.9f64,
            drop in 0.0..0.15f64,
        ) {
            let a = match_anchors(&anchors, &faces, hi, false).unwrap();
            let b = match_anchors(&anchors, &faces, hi - drop, false).unwrap();
            for (x, y) in a.per_face_counts.iter().zip(&b.per_face_counts) {
                prop_assert!(y >= x);
            }
        }
    }
}
