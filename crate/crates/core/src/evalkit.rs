//! WIDER-style annotation and detection text files, and average precision.
//!
//! Annotation blocks: a path line, a face count line, then one line per face
//! `x y w h blur expression illumination invalid occlusion pose` (the six
//! attribute fields may be omitted). A zero-count block may be followed by a
//! single all-zero placeholder line, which is skipped.
//!
//! Detection blocks: a path line, a count line, then `x y w h score` lines.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection};

pub const NUM_ATTRIBUTES: usize = 6;
const INVALID_ATTR: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct GtFace {
    pub bbox: BBox,
    /// Excluded from both true and false positive accounting.
    pub ignore: bool,
    /// blur, expression, illumination, invalid, occlusion, pose.
    pub attributes: Option<[i64; NUM_ATTRIBUTES]>,
}

impl GtFace {
    pub fn new(bbox: BBox) -> Self {
        GtFace {
            bbox,
            ignore: !bbox.is_valid(),
            attributes: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageAnnotations {
    pub path: String,
    pub faces: Vec<GtFace>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnnotationSet {
    pub images: Vec<ImageAnnotations>,
}

impl AnnotationSet {
    pub fn num_faces(&self) -> usize {
        self.images.iter().map(|i| i.faces.len()).sum()
    }

    /// Faces that count toward recall.
    pub fn num_positive(&self) -> usize {
        self.images
            .iter()
            .flat_map(|i| &i.faces)
            .filter(|f| !f.ignore)
            .count()
    }
}

struct Lines<'a> {
    inner: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Lines {
            inner: text.lines().enumerate().peekable(),
        }
    }

    /// Next non-blank line with its 1-based number.
    fn next(&mut self) -> Option<(usize, &'a str)> {
        for (i, l) in self.inner.by_ref() {
            if !l.trim().is_empty() {
                return Some((i + 1, l.trim()));
            }
        }
        None
    }

    fn peek_fields(&mut self) -> Option<Vec<&'a str>> {
        while let Some((_, l)) = self.inner.peek() {
            if l.trim().is_empty() {
                self.inner.next();
            } else {
                return Some(l.split_whitespace().collect());
            }
        }
        None
    }

    fn expect(&mut self, what: &str, after: usize) -> Result<(usize, &'a str)> {
        self.next()
            .ok_or_else(|| Error::parse(after + 1, format!("unexpected end of file, expected {what}")))
    }
}

fn parse_num<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::parse(line, format!("non-numeric {what} `{s}`")))
}

fn parse_count(lines: &mut Lines, after: usize) -> Result<(usize, usize)> {
    let (ln, l) = lines.expect("a count line", after)?;
    Ok((ln, parse_num(l, ln, "count")?))
}

pub fn parse_annotations(text: &str) -> Result<AnnotationSet> {
    let mut lines = Lines::new(text);
    let mut images = Vec::new();
    while let Some((pl, path)) = lines.next() {
        let (cl, n) = parse_count(&mut lines, pl)?;
        let mut faces = Vec::with_capacity(n);
        let mut last = cl;
        for k in 0..n {
            let (ln, l) = lines
                .next()
                .ok_or_else(|| Error::parse(last + 1, format!("`{path}` declares {n} faces, found {k}")))?;
            last = ln;
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != 4 && f.len() != 4 + NUM_ATTRIBUTES {
                return Err(Error::parse(ln, format!("expected 4 or 10 fields, found {}", f.len())));
            }
            let v: Vec<f64> = f[..4].iter().map(|s| parse_num(s, ln, "box field")).collect::<Result<_>>()?;
            let bbox = BBox::new(v[0], v[1], v[2], v[3]);
            let attributes = if f.len() > 4 {
                let mut a = [0i64; NUM_ATTRIBUTES];
                for (slot, s) in a.iter_mut().zip(&f[4..]) {
                    *slot = parse_num(s, ln, "attribute")?;
                }
                Some(a)
            } else {
                None
            };
            let invalid = attributes.is_some_and(|a| a[INVALID_ATTR] == 1);
            faces.push(GtFace {
                bbox,
                ignore: !(v[2] > 0.0 && v[3] > 0.0) || invalid,
                attributes,
            });
        }
        if n == 0 {
            if let Some(f) = lines.peek_fields() {
                if f.len() == 4 + NUM_ATTRIBUTES && f.iter().all(|s| s.parse::<f64>() == Ok(0.0)) {
                    lines.next();
                }
            }
        }
        images.push(ImageAnnotations {
            path: path.to_string(),
            faces,
        });
    }
    Ok(AnnotationSet { images })
}

pub fn write_annotations(set: &AnnotationSet) -> String {
    let mut out = String::new();
    for img in &set.images {
        let _ = writeln!(out, "{}\n{}", img.path, img.faces.len());
        for f in &img.faces {
            let b = f.bbox;
            let _ = write!(out, "{} {} {} {}", b.x, b.y, b.w, b.h);
            // attribute-less faces keep the short form unless only the flag can carry `ignore`
            let needs_flag = f.ignore && b.w > 0.0 && b.h > 0.0;
            let attrs = f.attributes.or(needs_flag.then_some([0, 0, 0, 1, 0, 0]));
            if let Some(a) = attrs {
                for v in a {
                    let _ = write!(out, " {v}");
                }
            }
            out.push('\n');
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageDetections {
    pub path: String,
    pub detections: Vec<Detection>,
}

pub fn write_detections(images: &[ImageDetections]) -> String {
    let mut out = String::new();
    for img in images {
        let _ = writeln!(out, "{}\n{}", img.path, img.detections.len());
        for d in &img.detections {
            let b = d.bbox;
            let _ = writeln!(out, "{} {} {} {} {:.6}", b.x, b.y, b.w, b.h, d.score);
        }
    }
    out
}

pub fn parse_detections(text: &str) -> Result<Vec<ImageDetections>> {
    let mut lines = Lines::new(text);
    let mut out = Vec::new();
    while let Some((pl, path)) = lines.next() {
        let (cl, n) = parse_count(&mut lines, pl)?;
        let mut detections = Vec::with_capacity(n);
        let mut last = cl;
        for k in 0..n {
            let (ln, l) = lines
                .next()
                .ok_or_else(|| Error::parse(last + 1, format!("`{path}` declares {n} detections, found {k}")))?;
            last = ln;
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != 5 {
                return Err(Error::parse(ln, format!("expected `x y w h score`, found {} fields", f.len())));
            }
            let v: Vec<f64> = f.iter().map(|s| parse_num(s, ln, "detection field")).collect::<Result<_>>()?;
            detections.push(Detection::new(BBox::new(v[0], v[1], v[2], v[3]), v[4]));
        }
        out.push(ImageDetections {
            path: path.to_string(),
            detections,
        });
    }
    Ok(out)
}

/// Precision-recall points in score order and the area under their envelope.
#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    /// `(recall, precision)` after each counted detection.
    pub points: Vec<(f64, f64)>,
    /// `None` when there is no positive ground truth.
    pub ap: Option<f64>,
    pub num_positive: usize,
    pub true_positives: usize,
    pub false_positives: usize,
}

impl PrCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("recall,precision\n");
        for (r, p) in &self.points {
            let _ = writeln!(out, "{r:.6},{p:.6}");
        }
        out
    }
}

/// Outcome of one detection under greedy matching.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    TruePositive,
    FalsePositive,
    /// Overlaps only ignored ground truth.
    Discarded,
}

/// Greedy one-to-one matching in descending score order (stable for ties).
/// Returns `(score, outcome)` per detection in that order.
pub fn match_detections(
    dets: &[ImageDetections],
    gts: &AnnotationSet,
    iou_thresh: f64,
) -> Result<Vec<(f64, Outcome)>> {
    let index: HashMap<&str, usize> = gts
        .images
        .iter()
        .enumerate()
        .map(|(i, img)| (img.path.as_str(), i))
        .collect();
    let mut flat: Vec<(usize, Detection)> = Vec::new();
    for img in dets {
        let gi = *index
            .get(img.path.as_str())
            .ok_or_else(|| Error::invalid(format!("detections for unknown image `{}`", img.path)))?;
        flat.extend(img.detections.iter().map(|d| (gi, *d)));
    }
    flat.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut taken: Vec<Vec<bool>> = gts.images.iter().map(|i| vec![false; i.faces.len()]).collect();
    let mut out = Vec::with_capacity(flat.len());
    for (gi, d) in flat {
        let faces = &gts.images[gi].faces;
        let mut best: Option<(usize, f64)> = None;
        let mut hits_ignored = false;
        for (k, f) in faces.iter().enumerate() {
            let o = d.bbox.iou(&f.bbox);
            if o < iou_thresh {
                continue;
            }
            if f.ignore {
                hits_ignored = true;
            } else if !taken[gi][k] && best.is_none_or(|(_, b)| o > b) {
                best = Some((k, o));
            }
        }
        let outcome = match best {
            Some((k, _)) => {
                taken[gi][k] = true;
                Outcome::TruePositive
            }
            None if hits_ignored => Outcome::Discarded,
            None => Outcome::FalsePositive,
        };
        out.push((d.score, outcome));
    }
    Ok(out)
}

/// All-points interpolated AP from outcomes already in score order.
pub fn curve_from_outcomes(outcomes: &[Outcome], num_positive: usize) -> PrCurve {
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut points = Vec::new();
    for o in outcomes {
        match o {
            Outcome::TruePositive => tp += 1,
            Outcome::FalsePositive => fp += 1,
            Outcome::Discarded => continue,
        }
        let recall = if num_positive > 0 { tp as f64 / num_positive as f64 } else { 0.0 };
        points.push((recall, tp as f64 / (tp + fp) as f64));
    }
    let ap = (num_positive > 0).then(|| {
        let mut envelope: Vec<f64> = points.iter().map(|p| p.1).collect();
        for i in (0..envelope.len().saturating_sub(1)).rev() {
            envelope[i] = envelope[i].max(envelope[i + 1]);
        }
        let mut area = 0.0;
        let mut prev_r = 0.0;
        for (&(r, _), &p) in points.iter().zip(&envelope) {
            area += (r - prev_r) * p;
            prev_r = r;
        }
        area
    });
    PrCurve {
        points,
        ap,
        num_positive,
        true_positives: tp,
        false_positives: fp,
    }
}

pub fn average_precision(dets: &[ImageDetections], gts: &AnnotationSet, iou_thresh: f64) -> Result<PrCurve> {
    let outcomes: Vec<Outcome> = match_detections(dets, gts, iou_thresh)?
        .into_iter()
        .map(|(_, o)| o)
        .collect();
    Ok(curve_from_outcomes(&outcomes, gts.num_positive()))
}
