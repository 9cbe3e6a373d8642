//! Synthetic face corpus: solid 1:1.5 rectangles on a noise background,
//! scales log-uniform over a configurable range.

use rand::Rng;

use super::{image_rng, Layout, Sample};
use crate::anchors::ANCHOR_RATIO;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::{Shape, Tensor};

const PLACEMENT_TRIES: usize = 20;
/// Salt mixed into the seed so pixel noise never shares a stream with layouts.
const RENDER_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub image_size: usize,
    pub min_faces: usize,
    pub max_faces: usize,
    pub min_scale: f64,
    pub max_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 640,
            min_faces: 1,
            max_faces: 5,
            min_scale: 8.0,
            max_scale: 512.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_faces > self.max_faces {
            return Err(Error::invalid("min_faces exceeds max_faces"));
        }
        if !(self.min_scale > 0.0 && self.min_scale <= self.max_scale) {
            return Err(Error::invalid("scale range must be positive and ordered"));
        }
        let (_, h) = face_size(self.max_scale);
        if h > self.image_size as f64 {
            return Err(Error::invalid(format!(
                "largest face ({h:.1} px tall) does not fit a {} px image",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// Width and height of a face with geometric-mean scale `s` and aspect 1.5.
fn face_size(s: f64) -> (f64, f64) {
    let r = ANCHOR_RATIO.sqrt();
    (s / r, s * r)
}

/// Face layouts for `n` images; image `k` uses its own RNG stream.
pub fn synth_layouts(n: usize, cfg: &SynthConfig) -> Result<Vec<Layout>> {
    if n == 0 {
        return Err(Error::invalid("corpus must contain at least one image"));
    }
    cfg.validate()?;
    let size = cfg.image_size as f64;
    let (lo, hi) = (cfg.min_scale.ln(), cfg.max_scale.ln());
    Ok((0..n)
        .map(|k| {
            let mut rng = image_rng(cfg.seed, k as u64);
            let count = rng.gen_range(cfg.min_faces..=cfg.max_faces);
            let mut faces: Vec<BBox> = Vec::with_capacity(count);
            for _ in 0..count {
                let s = if hi > lo { rng.gen_range(lo..hi).exp() } else { cfg.min_scale };
                let (w, h) = face_size(s);
                let mut candidate = BBox::new(0.0, 0.0, w, h);
                for _ in 0..PLACEMENT_TRIES {
                    candidate.x = rng.gen_range(0.0..=size - w);
                    candidate.y = rng.gen_range(0.0..=size - h);
                    if faces.iter().all(|f| f.intersection(&candidate) == 0.0) {
                        break;
                    }
                }
                faces.push(candidate);
            }
            Layout {
                width: cfg.image_size,
                height: cfg.image_size,
                faces,
            }
        })
        .collect())
}

/// Pixels for one layout: uniform noise in `[0.2, 0.8]` with each face a
/// flat skin-like colour. Deterministic in `(seed, index)`.
pub fn render_layout(layout: &Layout, seed: u64, index: u64) -> Sample {
    let mut rng = image_rng(seed ^ RENDER_SALT, index);
    let mut img = Tensor::zeros(Shape::new(1, 3, layout.height, layout.width));
    for v in img.data_mut() {
        *v = rng.gen_range(0.2..0.8);
    }
    for f in &layout.faces {
        let colour = [
            rng.gen_range(0.75..0.95),
            rng.gen_range(0.55..0.7),
            rng.gen_range(0.4..0.55),
        ];
        let x0 = f.x.round().max(0.0) as usize;
        let y0 = f.y.round().max(0.0) as usize;
        let x1 = (f.right().round() as usize).min(layout.width);
        let y1 = (f.bottom().round() as usize).min(layout.height);
        for (c, &v) in colour.iter().enumerate() {
            for y in y0..y1 {
                for x in x0..x1 {
                    img.set(0, c, y, x, v);
                }
            }
        }
    }
    Sample {
        image: img,
        faces: layout.faces.clone(),
    }
}

pub fn synth_corpus(n: usize, cfg: &SynthConfig) -> Result<Vec<Sample>> {
    Ok(synth_layouts(n, cfg)?
        .iter()
        .enumerate()
        .map(|(k, l)| render_layout(l, cfg.seed, k as u64))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn faces_inside_with_fixed_aspect() {
        let layouts = synth_layouts(100, &SynthConfig::default()).unwrap();
        for l in &layouts {
            assert!((1..=5).contains(&l.faces.len()));
            for f in &l.faces {
                assert!(f.x >= 0.0 && f.y >= 0.0 && f.right() <= 640.0 && f.bottom() <= 640.0);
                assert!((f.h / f.w - 1.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scales_are_log_uniform() {
        let layouts = synth_layouts(2000, &SynthConfig::default()).unwrap();
        let bins = 12;
        let mut counts = vec![0f64; bins];
        let (lo, hi) = (8f64.ln(), 512f64.ln());
        let mut n = 0.0;
        for f in layouts.iter().flat_map(|l| &l.faces) {
            let u = (f.scale().ln() - lo) / (hi - lo);
            counts[((u * bins as f64) as usize).min(bins - 1)] += 1.0;
            n += 1.0;
        }
        let expected = n / bins as f64;
        let stat: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(stat);
        assert!(p > 0.01, "chi2 {stat} p {p}");
    }

    #[test]
    fn corpus_is_reproducible() {
        let cfg = SynthConfig {
            image_size: 64,
            max_scale: 40.0,
            seed: 7,
            ..SynthConfig::default()
        };
        let a = synth_corpus(3, &cfg).unwrap();
        let b = synth_corpus(3, &cfg).unwrap();
        assert_eq!(a, b);
        let c = synth_corpus(3, &SynthConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(synth_layouts(0, &SynthConfig::default()).is_err());
        let big = SynthConfig {
            image_size: 100,
            ..SynthConfig::default()
        };
        assert!(synth_layouts(1, &big).is_err());
    }

    #[test]
    fn faces_are_painted() {
        let cfg = SynthConfig {
            image_size: 64,
            min_scale: 20.0,
            max_scale: 30.0,
            min_faces: 1,
            max_faces: 1,
            seed: 3,
        };
        let s = &synth_corpus(1, &cfg).unwrap()[0];
        let f = s.faces[0];
        let (cx, cy) = (f.cx() as usize, f.cy() as usize);
        assert!(s.image.at(0, 0, cy, cx) >= 0.75);
        assert_eq!(s.image.at(0, 0, cy, cx), s.image.at(0, 0, cy + 1, cx));
    }
}
