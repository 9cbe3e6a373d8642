//! Fixed gradient-check scenarios shared by the command line and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchors::{build_grids, flatten, level_specs, ScaleMode, Shot};
use crate::augment::{synth_corpus, SynthConfig};
use crate::error::{Error, Result};
use crate::fem::{fem_forward_graph, ConvVars, FemParams, FemVars, NUM_BRANCHES};
use crate::geometry::{BBox, BoxDelta};
use crate::matching::match_anchors;
use crate::net::{match_batch, pal_loss_graph, stack_images, NetConfig, Network};
use crate::pal::{pal_total, shot_loss, shot_loss_with_selection, LossConfig, ShotPredictions};
use crate::tensor::{finite_diff_check_many, Fault, GradCheckReport, Graph, Shape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradTarget {
    /// One enhancement module with an upper input.
    Fem,
    /// PAL over both shots with respect to logits and deltas.
    Loss,
    /// PAL through the whole 64 px toy network with respect to every weight.
    Net,
}

impl std::str::FromStr for GradTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fem" => Ok(GradTarget::Fem),
            "loss" => Ok(GradTarget::Loss),
            "net" => Ok(GradTarget::Net),
            _ => Err(Error::invalid(format!("unknown gradcheck target `{s}`"))),
        }
    }
}

impl GradTarget {
    pub fn name(self) -> &'static str {
        match self {
            GradTarget::Fem => "fem",
            GradTarget::Loss => "loss",
            GradTarget::Net => "net",
        }
    }

    /// Tolerance each scenario is expected to meet.
    pub fn default_tol(self) -> f64 {
        match self {
            GradTarget::Fem | GradTarget::Loss => 1e-4,
            GradTarget::Net => 1e-3,
        }
    }
}

pub fn gradcheck(target: GradTarget, tol: f64, seed: u64, fault: Fault) -> Result<GradCheckReport> {
    match target {
        GradTarget::Fem => fem_check(tol, seed, fault),
        GradTarget::Loss => loss_check(tol, seed, fault),
        GradTarget::Net => net_check(tol, seed, fault),
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor {
    let data = (0..shape.numel()).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

/// Zero biases leave dead units exactly on the ReLU kink; nudge them off it.
fn jitter_biases<'a>(rng: &mut ChaCha8Rng, biases: impl IntoIterator<Item = &'a mut Vec<f64>>) {
    for b in biases {
        b.iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
    }
}

fn fem_check(tol: f64, seed: u64, fault: Fault) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let channels = 2 * NUM_BRANCHES;
    let mut params = FemParams::init(&mut rng, 4, Some(5), channels, 2)?;
    jitter_biases(&mut rng, params.convs_mut().into_iter().map(|c| &mut c.bias));
    let cur = uniform(&mut rng, Shape::new(1, 4, 7, 7), 0.0, 1.0);
    let up = uniform(&mut rng, Shape::new(1, 5, 4, 4), 0.0, 1.0);
    let weights = uniform(&mut rng, Shape::new(1, channels, 7, 7), -1.0, 1.0);

    let mut points = vec![cur, up];
    for c in params.convs() {
        points.push(c.kernel.clone());
        points.push(c.bias_tensor());
    }
    let geoms: Vec<_> = params.convs().iter().map(|c| c.geometry()).collect();
    let f = |g: &mut Graph, v: &[Var]| -> Result<Var> {
        let mut convs = geoms.iter().zip(v[2..].chunks(2)).map(|(&geom, kb)| ConvVars {
            kernel: kb[0],
            bias: kb[1],
            geom,
        });
        let mut next = || convs.next().expect("one pair per convolution");
        let vars = FemVars {
            norm_cur: next(),
            norm_up: Some(next()),
            branches: std::array::from_fn(|k| (0..=k).map(|_| next()).collect()),
        };
        let out = fem_forward_graph(g, v[0], Some(v[1]), &vars)?;
        let w = g.leaf(weights.clone());
        let prod = g.mul(out, w)?;
        Ok(g.sum(prod))
    };
    finite_diff_check_many(f, &points, tol, seed, fault)
}

fn loss_check(tol: f64, seed: u64, fault: Fault) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = level_specs(64)?;
    let cfg = LossConfig::default();
    let faces = vec![BBox::new(6.0, 9.0, 14.0, 21.0), BBox::new(30.0, 20.0, 26.0, 39.0)];
    let shots = [Shot::First, Shot::Second];
    let anchors: Vec<Vec<BBox>> = shots
        .iter()
        .map(|&s| flatten(&build_grids(&specs, s, ScaleMode::Width)))
        .collect();
    let matches = anchors
        .iter()
        .map(|a| match_anchors(a, &faces, 0.4, true))
        .collect::<Result<Vec<_>>>()?;

    let mut points = Vec::new();
    for a in &anchors {
        points.push(uniform(&mut rng, Shape::new(1, 1, a.len(), 2), -2.0, 2.0));
        points.push(uniform(&mut rng, Shape::new(1, 1, a.len(), 4), -0.6, 0.6));
    }
    let preds = |shot: Shot, logits: &Tensor, deltas: &Tensor| ShotPredictions {
        shot,
        cls_logits: logits.data().chunks(2).map(|c| [c[0], c[1]]).collect(),
        loc_deltas: deltas
            .data()
            .chunks(4)
            .map(|c| BoxDelta::from_array([c[0], c[1], c[2], c[3]]))
            .collect(),
    };
    // selection frozen at the base point, as mining is piecewise constant
    let selection = (0..2)
        .map(|k| {
            shot_loss(&preds(shots[k], &points[2 * k], &points[2 * k + 1]), &matches[k], &anchors[k], &faces, &cfg)
                .map(|l| l.selected_negatives)
        })
        .collect::<Result<Vec<_>>>()?;

    let f = |g: &mut Graph, v: &[Var]| -> Result<Var> {
        let mut reports = Vec::new();
        let mut partials = Vec::new();
        for k in 0..2 {
            let p = preds(shots[k], g.value(v[2 * k]), g.value(v[2 * k + 1]));
            let l = shot_loss_with_selection(&p, &matches[k], &anchors[k], &faces, &cfg, &selection[k])?;
            let w = if k == 0 { 1.0 } else { cfg.lambda };
            partials.push(l.grads.d_logits.iter().flatten().map(|d| d * w).collect());
            partials.push(l.grads.d_deltas.iter().flatten().map(|d| d * w).collect());
            reports.push(l.report);
        }
        let total = pal_total(&reports[0], &reports[1], cfg.lambda)?;
        g.external_scalar(total, v, partials)
    };
    finite_diff_check_many(f, &points, tol, seed, fault)
}

/// The 64 px toy network used by the end-to-end check, with jittered biases.
pub fn gradcheck_toy_network(seed: u64) -> Result<Network> {
    let mut net = Network::build(&NetConfig {
        input_size: 64,
        backbone_channels: [3; 6],
        fem_channels: 3,
        seed,
        ..NetConfig::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    jitter_biases(&mut rng, net.params_mut().into_iter().map(|p| &mut p.bias));
    Ok(net)
}

fn net_check(tol: f64, seed: u64, fault: Fault) -> Result<GradCheckReport> {
    let net = gradcheck_toy_network(seed)?;
    // faces large enough that the deep levels carry signal
    let corpus = synth_corpus(
        2,
        &SynthConfig {
            image_size: 64,
            min_faces: 1,
            max_faces: 2,
            min_scale: 20.0,
            max_scale: 50.0,
            seed,
        },
    )?;
    let images: Vec<&Tensor> = corpus.iter().map(|s| &s.image).collect();
    let images = stack_images(&images)?;
    let faces: Vec<Vec<BBox>> = corpus.iter().map(|s| s.faces.clone()).collect();
    let matches = match_batch(&net, &faces, 0.4)?;
    let cfg = LossConfig::default();
    let loss = |g: &mut Graph, leaves: &[Var], sel| {
        let vars = net.vars_from_leaves(g, leaves)?;
        let x = net.input_leaf(g, &images)?;
        let (a, b) = net.forward_dual_graph(g, &vars, x)?;
        pal_loss_graph(&net, g, [&a, &b], &faces, &matches, &cfg, sel)
    };
    let points = net.param_tensors();
    let mut g = Graph::new();
    let leaves: Vec<Var> = points.iter().map(|t| g.leaf(t.clone())).collect();
    let (_, _, selection) = loss(&mut g, &leaves, None)?;
    finite_diff_check_many(
        |g, leaves| Ok(loss(g, leaves, Some(&selection))?.0),
        &points,
        tol,
        seed,
        fault,
    )
}
