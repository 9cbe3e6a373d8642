use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dualshot::anchors::Shot;
use dualshot::augment::{synth_corpus, SynthConfig};
use dualshot::net::{predict, NetConfig, Network, PredictConfig, TrainConfig, Trainer};

fn tiny(seed: u64) -> NetConfig {
    NetConfig {
        input_size: 64,
        backbone_channels: [3, 6, 6, 6, 6, 6],
        fem_channels: 6,
        seed,
        ..NetConfig::default()
    }
}

fn corpus(size: usize, seed: u64) -> Vec<dualshot::augment::Sample> {
    synth_corpus(
        2,
        &SynthConfig {
            image_size: size,
            min_faces: 1,
            max_faces: 3,
            min_scale: 10.0,
            max_scale: 0.6 * size as f64,
            seed,
        },
    )
    .unwrap()
}

#[test]
fn zero_heads_give_uniform_classification_loss() {
    let mut net = Network::build(&tiny(3)).unwrap();
    net.zero_heads(Shot::First);
    net.zero_heads(Shot::Second);
    let data = corpus(64, 8);
    let t = Trainer::new(net, TrainConfig::default()).unwrap();
    let r = t.evaluate(&data).unwrap();
    let ln2 = std::f64::consts::LN_2;
    for shot in [r.first, r.second] {
        // every mined term is ln 2 and the terms are averaged
        assert!((shot.conf - ln2).abs() < 1e-12, "{shot:?}");
        assert!(shot.n_conf <= 4 * shot.n_pos && shot.n_pos > 0);
    }
}

#[test]
fn first_shot_heads_never_reach_predictions() {
    let net = Network::build(&NetConfig {
        input_size: 96,
        ..tiny(4)
    })
    .unwrap();
    let image = &corpus(96, 2)[0].image;
    let cfg = PredictConfig::default();
    let base = predict(&net, image, &cfg).unwrap();

    let mut zeroed = net.clone();
    zeroed.zero_heads(Shot::First);
    assert_eq!(predict(&zeroed, image, &cfg).unwrap(), base);

    let mut scrambled = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for h in scrambled.heads_mut(Shot::First) {
        h.cls.kernel.data_mut().iter_mut().for_each(|w| *w = rng.gen_range(-5.0..5.0));
        h.loc.bias.iter_mut().for_each(|b| *b = rng.gen_range(-5.0..5.0));
    }
    assert_eq!(predict(&scrambled, image, &cfg).unwrap(), base);

    // the second shot does reach them
    let mut second = net.clone();
    second.zero_heads(Shot::Second);
    assert_ne!(predict(&second, image, &cfg).unwrap(), base);
}

#[test]
fn uniform_scores_respect_postprocessing_limits() {
    let mut net = Network::build(&NetConfig {
        input_size: 160,
        ..tiny(5)
    })
    .unwrap();
    net.zero_heads(Shot::Second);
    let image = &corpus(160, 1)[0].image;
    let dets = predict(&net, image, &PredictConfig::default()).unwrap();
    assert!(!dets.is_empty() && dets.len() <= 750);
    assert!(dets.iter().all(|d| d.score == 0.5));
    for (i, a) in dets.iter().enumerate() {
        assert_eq!((a.bbox.x.fract(), a.bbox.y.fract(), a.bbox.w.fract(), a.bbox.h.fract()), (0.0, 0.0, 0.0, 0.0));
        for b in &dets[i + 1..] {
            assert!(a.bbox.iou(&b.bbox) <= 0.3 + 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn loss_is_finite_at_initialization(seed in any::<u64>(), data_seed in 0u64..1000) {
        let t = Trainer::new(Network::build(&tiny(seed)).unwrap(), TrainConfig::default()).unwrap();
        let r = t.evaluate(&corpus(64, data_seed)).unwrap();
        prop_assert!(r.pal_total.is_finite() && r.pal_total > 0.0);
    }
}
