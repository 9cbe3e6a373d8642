use crate::anchors::Shot;
use crate::augment::Sample;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::matching::{match_grids, MatchResult, IAM_THRESHOLD};
use crate::pal::{pal_total, shot_loss, shot_loss_with_selection, LossConfig, LossReport, ShotLoss};
use crate::tensor::{Graph, Tensor, Var};

use super::{stack_images, Network, ShotOutputs, NET_KEYS};

#[derive(Clone, Debug, PartialEq)]
pub enum LrSchedule {
    Constant(f64),
    /// `base * gamma^k` after the `k`-th boundary.
    Steps { base: f64, boundaries: Vec<usize>, gamma: f64 },
}

impl LrSchedule {
    /// 1e-3, dropped tenfold at 40k and again at 50k steps.
    pub fn full_scale() -> Self {
        LrSchedule::Steps {
            base: 1e-3,
            boundaries: vec![40_000, 50_000],
            gamma: 0.1,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        match self {
            LrSchedule::Constant(lr) => *lr,
            LrSchedule::Steps { base, boundaries, gamma } => {
                let k = boundaries.iter().filter(|&&b| step >= b).count();
                base * gamma.powi(k as i32)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub match_threshold: f64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schedule: LrSchedule::Constant(1e-3),
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 8,
            steps: 500,
            match_threshold: IAM_THRESHOLD,
            loss: LossConfig::default(),
        }
    }
}

const TRAIN_KEYS: [&str; 13] = [
    "lr",
    "lr_schedule",
    "momentum",
    "weight_decay",
    "batch_size",
    "steps",
    "match_threshold",
    "beta",
    "lambda",
    "neg_pos_ratio",
    "eq2_literal_grouping",
    "images",
    "data_seed",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lr_ok = match &self.schedule {
            LrSchedule::Constant(lr) => *lr >= 0.0,
            LrSchedule::Steps { base, gamma, .. } => *base >= 0.0 && *gamma > 0.0,
        };
        if !lr_ok || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::invalid("learning rate, momentum or weight decay out of range"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.match_threshold > 0.0 && self.match_threshold < 1.0) {
            return Err(Error::invalid("match threshold must lie in (0, 1)"));
        }
        self.loss.validate()
    }

    /// Training keys only; see [`TrainConfig::from_config`].
    pub fn to_config(&self) -> Config {
        let mut c = Config::default();
        match &self.schedule {
            LrSchedule::Constant(lr) => {
                c.set("lr", lr);
                c.set("lr_schedule", "constant");
            }
            LrSchedule::Steps { base, boundaries, gamma } => {
                c.set("lr", base);
                let b: Vec<String> = boundaries.iter().map(usize::to_string).collect();
                c.set("lr_schedule", format!("steps:{}:{gamma}", b.join("/")));
            }
        }
        c.set("momentum", self.momentum);
        c.set("weight_decay", self.weight_decay);
        c.set("batch_size", self.batch_size);
        c.set("steps", self.steps);
        c.set("match_threshold", self.match_threshold);
        c.set("beta", self.loss.beta);
        c.set("lambda", self.loss.lambda);
        c.set("neg_pos_ratio", self.loss.neg_pos_ratio);
        c.set("eq2_literal_grouping", self.loss.eq2_literal_grouping);
        c
    }

    /// Reads training keys; network and data keys are accepted and ignored.
    pub fn from_config(c: &Config) -> Result<Self> {
        let known: Vec<&str> = NET_KEYS.iter().chain(&TRAIN_KEYS).copied().collect();
        c.ensure_known(&known)?;
        let d = TrainConfig::default();
        let lr = c.get_or("lr", 1e-3)?;
        let schedule = match c.get_str("lr_schedule").unwrap_or("constant") {
            "constant" => LrSchedule::Constant(lr),
            "full_scale" => LrSchedule::full_scale(),
            other => parse_steps(other, lr)?,
        };
        let cfg = TrainConfig {
            schedule,
            momentum: c.get_or("momentum", d.momentum)?,
            weight_decay: c.get_or("weight_decay", d.weight_decay)?,
            batch_size: c.get_or("batch_size", d.batch_size)?,
            steps: c.get_or("steps", d.steps)?,
            match_threshold: c.get_or("match_threshold", d.match_threshold)?,
            loss: LossConfig {
                beta: c.get_or("beta", d.loss.beta)?,
                lambda: c.get_or("lambda", d.loss.lambda)?,
                neg_pos_ratio: c.get_or("neg_pos_ratio", d.loss.neg_pos_ratio)?,
                eq2_literal_grouping: c.get_or("eq2_literal_grouping", d.loss.eq2_literal_grouping)?,
                coder: d.loss.coder,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `steps:B1/B2/...:GAMMA` with `base` as the initial rate.
fn parse_steps(text: &str, base: f64) -> Result<LrSchedule> {
    let bad = || Error::invalid(format!("lr_schedule `{text}` is not constant|full_scale|steps:B1/B2:GAMMA"));
    let mut parts = text.split(':');
    if parts.next() != Some("steps") {
        return Err(bad());
    }
    let boundaries = parts
        .next()
        .ok_or_else(bad)?
        .split('/')
        .map(|b| b.trim().parse().map_err(|_| bad()))
        .collect::<Result<Vec<usize>>>()?;
    let gamma = parts.next().ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
    if parts.next().is_some() || boundaries.windows(2).any(|w| w[1] <= w[0]) {
        return Err(bad());
    }
    Ok(LrSchedule::Steps { base, boundaries, gamma })
}

/// Batch-mean losses of both shots.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    pub first: LossReport,
    pub second: LossReport,
    pub pal_total: f64,
}

/// Mined negatives per image: `[first shot, second shot]`.
pub type Selection = Vec<[Vec<usize>; 2]>;

/// Matches every image against both shots' anchors with the forced best anchor.
pub fn match_batch(net: &Network, faces: &[Vec<BBox>], threshold: f64) -> Result<Vec<[MatchResult; 2]>> {
    faces
        .iter()
        .map(|f| {
            Ok([
                match_grids(net.grids(Shot::First), f, threshold, true)?,
                match_grids(net.grids(Shot::Second), f, threshold, true)?,
            ])
        })
        .collect()
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len() as f64;
    LossReport {
        conf: reports.iter().map(|r| r.conf).sum::<f64>() / n,
        loc: reports.iter().map(|r| r.loc).sum::<f64>() / n,
        total_shot: reports.iter().map(|r| r.total_shot).sum::<f64>() / n,
        n_pos: reports.iter().map(|r| r.n_pos).sum(),
        n_conf: reports.iter().map(|r| r.n_conf).sum(),
        pal_total: None,
    }
}

/// Records the batch-mean combined loss on `g` as a scalar whose partials
/// flow into both shots' head outputs. Negatives are mined unless
/// `selection` fixes them.
#[allow(clippy::too_many_arguments)]
pub fn pal_loss_graph(
    net: &Network,
    g: &mut Graph,
    outputs: [&ShotOutputs; 2],
    faces: &[Vec<BBox>],
    matches: &[[MatchResult; 2]],
    cfg: &LossConfig,
    selection: Option<&Selection>,
) -> Result<(Var, StepReport, Selection)> {
    let batch = faces.len();
    if batch == 0 || matches.len() != batch {
        return Err(Error::invalid("loss needs one match per image and a non-empty batch"));
    }
    let inv = 1.0 / batch as f64;
    let mut partials: Vec<Vec<Vec<f64>>> = outputs
        .iter()
        .map(|o| o.vars().iter().map(|&v| vec![0.0; g.value(v).numel()]).collect())
        .collect();
    let mut reports: [Vec<LossReport>; 2] = [Vec::new(), Vec::new()];
    let mut chosen: Selection = Vec::with_capacity(batch);
    for b in 0..batch {
        let mut picked: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        for (s, out) in outputs.iter().enumerate() {
            let preds = out.predictions(g, b);
            let anchors = net.anchors(out.shot);
            let m = &matches[b][s];
            let loss: ShotLoss = match selection {
                Some(sel) => shot_loss_with_selection(&preds, m, anchors, &faces[b], cfg, &sel[b][s])?,
                None => shot_loss(&preds, m, anchors, &faces[b], cfg)?,
            };
            let weight = inv * if out.shot == Shot::Second { cfg.lambda } else { 1.0 };
            out.scatter_grads(g, b, &loss.grads.d_logits, &loss.grads.d_deltas, weight, &mut partials[s]);
            reports[s].push(loss.report);
            picked[s] = loss.selected_negatives;
        }
        chosen.push(picked);
    }
    let first = mean_report(&reports[0]);
    let second = mean_report(&reports[1]);
    let total = pal_total(&first, &second, cfg.lambda)?;
    let inputs: Vec<Var> = outputs.iter().flat_map(|o| o.vars()).collect();
    let root = g.external_scalar(total, &inputs, partials.into_iter().flatten().collect())?;
    let report = StepReport {
        step: 0,
        lr: 0.0,
        first: LossReport {
            pal_total: Some(total),
            ..first
        },
        second: LossReport {
            pal_total: Some(total),
            ..second
        },
        pal_total: total,
    };
    Ok((root, report, chosen))
}

/// SGD with momentum and weight decay; owns the network exclusively.
#[derive(Clone, Debug)]
pub struct Trainer {
    net: Network,
    cfg: TrainConfig,
    velocity: Vec<(Vec<f64>, Vec<f64>)>,
    step: usize,
}

impl Trainer {
    pub fn new(net: Network, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let velocity = net
            .params()
            .iter()
            .map(|(_, p)| (vec![0.0; p.kernel.numel()], vec![0.0; p.bias.len()]))
            .collect();
        Ok(Trainer {
            net,
            cfg,
            velocity,
            step: 0,
        })
    }

    pub fn net(&self) -> &Network {
        &self.net
    }

    pub fn into_net(self) -> Network {
        self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Loss of the current parameters and its gradient per convolution.
    pub fn loss_and_grads(&self, batch: &[Sample]) -> Result<(StepReport, Vec<(Vec<f64>, Vec<f64>)>)> {
        let (report, g, vars) = self.forward_loss(batch, true)?;
        let grads = vars
            .convs()
            .iter()
            .map(|c| {
                let gk = g.grad(c.kernel).map(<[f64]>::to_vec).unwrap_or_default();
                let gb = g.grad(c.bias).map(<[f64]>::to_vec).unwrap_or_default();
                (gk, gb)
            })
            .collect();
        Ok((report, grads))
    }

    /// Loss of the current parameters without a backward pass.
    pub fn evaluate(&self, batch: &[Sample]) -> Result<StepReport> {
        Ok(self.forward_loss(batch, false)?.0)
    }

    fn forward_loss(&self, batch: &[Sample], backward: bool) -> Result<(StepReport, Graph, super::NetVars)> {
        if batch.is_empty() {
            return Err(Error::invalid("training batch is empty"));
        }
        let images: Vec<&Tensor> = batch.iter().map(|s| &s.image).collect();
        let faces: Vec<Vec<BBox>> = batch.iter().map(|s| s.faces.clone()).collect();
        let matches = match_batch(&self.net, &faces, self.cfg.match_threshold)?;
        let mut g = Graph::new();
        let vars = self.net.register(&mut g);
        let x = self.net.input_leaf(&mut g, &stack_images(&images)?)?;
        let (first, second) = self.net.forward_dual_graph(&mut g, &vars, x)?;
        let (root, mut report, _) =
            pal_loss_graph(&self.net, &mut g, [&first, &second], &faces, &matches, &self.cfg.loss, None)?;
        if !report.pal_total.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at step {}: first {:?}, second {:?}",
                self.step, report.first, report.second
            )));
        }
        if backward {
            g.backward(root)?;
        }
        report.step = self.step;
        report.lr = self.cfg.schedule.lr(self.step);
        Ok((report, g, vars))
    }

    /// One SGD update; returns the loss before the update.
    pub fn train_step(&mut self, batch: &[Sample]) -> Result<StepReport> {
        let (report, grads) = self.loss_and_grads(batch)?;
        self.apply(&grads, report.lr)?;
        self.step += 1;
        Ok(report)
    }

    /// `v <- mu v - lr (g + wd theta)`, `theta <- theta + v`.
    pub fn apply(&mut self, grads: &[(Vec<f64>, Vec<f64>)], lr: f64) -> Result<()> {
        let (mu, wd) = (self.cfg.momentum, self.cfg.weight_decay);
        let params = self.net.params_mut();
        if grads.len() != params.len() {
            return Err(Error::invalid("gradient list does not match parameters"));
        }
        for ((p, (gk, gb)), (vk, vb)) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            let update = |theta: &mut [f64], grad: &[f64], vel: &mut [f64]| {
                for (i, t) in theta.iter_mut().enumerate() {
                    let gi = grad.get(i).copied().unwrap_or(0.0);
                    vel[i] = mu * vel[i] - lr * (gi + wd * *t);
                    *t += vel[i];
                }
            };
            update(p.kernel.data_mut(), gk, vk);
            update(&mut p.bias, gb, vb);
        }
        Ok(())
    }
}
