//! Overfit experiment: train the toy network on a small synthetic corpus and
//! score it on the same images.

use crate::augment::{synth_corpus, Sample, SynthConfig};
use crate::config::Config;
use crate::error::Result;
use crate::evalkit::{average_precision, AnnotationSet, GtFace, ImageAnnotations, ImageDetections, PrCurve};

use super::{predict, LrSchedule, NetConfig, Network, PredictConfig, StepReport, TrainConfig, Trainer};

pub const TOY_IMAGES: usize = 8;
pub const TOY_LR: f64 = 0.08;
pub const TOY_DATA_SEED: u64 = 7;
pub const TOY_MIN_FACES: usize = 1;
pub const TOY_MAX_FACES: usize = 3;
pub const TOY_MIN_SCALE: f64 = 12.0;
pub const TOY_MAX_SCALE: f64 = 96.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ToySetup {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub images: usize,
    pub data_seed: u64,
}

impl Default for ToySetup {
    fn default() -> Self {
        ToySetup {
            net: NetConfig::default(),
            train: TrainConfig {
                schedule: LrSchedule::Constant(TOY_LR),
                batch_size: TOY_IMAGES,
                ..TrainConfig::default()
            },
            images: TOY_IMAGES,
            data_seed: TOY_DATA_SEED,
        }
    }
}

impl ToySetup {
    /// Missing keys fall back to [`ToySetup::default`].
    pub fn from_config(c: &Config) -> Result<Self> {
        let d = ToySetup::default();
        let mut merged = d.to_config();
        for key in c.keys() {
            merged.set(key, c.get_str(key).unwrap_or_default());
        }
        Ok(ToySetup {
            net: NetConfig::from_config(&merged)?,
            train: TrainConfig::from_config(&merged)?,
            images: merged.get_or("images", d.images)?,
            data_seed: merged.get_or("data_seed", d.data_seed)?,
        })
    }

    pub fn to_config(&self) -> Config {
        let mut c = self.net.to_config();
        let t = self.train.to_config();
        for key in t.keys() {
            c.set(key, t.get_str(key).unwrap_or_default());
        }
        c.set("images", self.images);
        c.set("data_seed", self.data_seed);
        c
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            image_size: self.net.input_size,
            min_faces: TOY_MIN_FACES,
            max_faces: TOY_MAX_FACES,
            min_scale: TOY_MIN_SCALE,
            // keeps the tallest face inside small inputs
            max_scale: TOY_MAX_SCALE.min(0.6 * self.net.input_size as f64),
            seed: self.data_seed,
        }
    }

    pub fn corpus(&self) -> Result<Vec<Sample>> {
        synth_corpus(self.images, &self.synth_config())
    }
}

/// Runs `setup.train.steps` updates over cyclic batches of `corpus`, calling
/// `on_step` with each pre-update report.
pub fn train_toy(setup: &ToySetup, corpus: &[Sample], mut on_step: impl FnMut(&StepReport)) -> Result<Network> {
    let mut trainer = Trainer::new(Network::build(&setup.net)?, setup.train.clone())?;
    let b = setup.train.batch_size.min(corpus.len()).max(1);
    for step in 0..setup.train.steps {
        let start = (step * b) % corpus.len().max(1);
        let batch: Vec<Sample> = (0..b).map(|k| corpus[(start + k) % corpus.len()].clone()).collect();
        let report = trainer.train_step(&batch)?;
        on_step(&report);
    }
    Ok(trainer.into_net())
}

/// Image keys used when a corpus is scored or exported.
pub fn corpus_key(index: usize) -> String {
    format!("images/{index:03}.ppm")
}

pub fn corpus_annotations(corpus: &[Sample]) -> AnnotationSet {
    AnnotationSet {
        images: corpus
            .iter()
            .enumerate()
            .map(|(k, s)| ImageAnnotations {
                path: corpus_key(k),
                faces: s.faces.iter().map(|&b| GtFace::new(b)).collect(),
            })
            .collect(),
    }
}

/// Predicts every image of `corpus` and scores the result against its own faces.
pub fn self_evaluate(net: &Network, corpus: &[Sample], cfg: &PredictConfig) -> Result<(Vec<ImageDetections>, PrCurve)> {
    let dets = corpus
        .iter()
        .enumerate()
        .map(|(k, s)| {
            Ok(ImageDetections {
                path: corpus_key(k),
                detections: predict(net, &s.image, cfg)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let curve = average_precision(&dets, &corpus_annotations(corpus), 0.5)?;
    Ok((dets, curve))
}
