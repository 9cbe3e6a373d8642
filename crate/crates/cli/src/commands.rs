use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use dualshot::anchors::{anchors_csv, build_grids, level_specs, ScaleMode, Shot};
use dualshot::augment::{
    augment, image_rng, pipeline_match_stats, render_layout, ssd_style_sample, synth_layouts, AugConfig, Layout,
    Pipeline, Sample, SynthConfig,
};
use dualshot::config::Config;
use dualshot::diagnostics::{gradcheck, GradTarget};
use dualshot::evalkit::{
    average_precision, parse_annotations, parse_detections, write_annotations, write_detections, AnnotationSet,
    ImageDetections,
};
use dualshot::geometry::round_detection;
use dualshot::image::{read_pnm, resample_crop, write_pnm};
use dualshot::matching::{scale_histogram, IAM_THRESHOLD, TRADITIONAL_THRESHOLD};
use dualshot::net::{
    corpus_annotations, corpus_key, load_checkpoint, predict, save_checkpoint, train_toy, Network, PredictConfig,
    ToySetup, TrainConfig, Trainer,
};
use dualshot::tensor::{Fault, Tensor};
use dualshot::{BBox, Detection};

use crate::manifest::RunManifest;
use crate::{
    AnchorsArgs, AugmentPreviewArgs, Cli, Command, EvalArgs, GradcheckArgs, MatchStatsArgs, ModeArg, PipelineArgs,
    PredictArgs, ShotArg, SourceArgs, TrainToyArgs,
};

/// Seed of data-producing commands when `--seed` is absent.
pub const DEFAULT_DATA_SEED: u64 = 2019;
/// Network seed of the gradient-check scenarios when `--seed` is absent.
pub const DEFAULT_GRADCHECK_SEED: u64 = 5;
const DEFAULT_PREVIEW_IMAGES: usize = 4;
const DEFAULT_STATS_IMAGES: usize = 500;

#[derive(Debug)]
pub enum CliError {
    Check(String),
    Input(String),
    Numeric(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Check(_) => 1,
            CliError::Input(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Check(m) => write!(f, "check failed: {m}"),
            CliError::Input(m) => write!(f, "{m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<dualshot::Error> for CliError {
    fn from(e: dualshot::Error) -> Self {
        match e {
            dualshot::Error::NonFinite(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))
}

fn read_image(path: &Path) -> CliResult<Tensor> {
    let bytes = fs::read(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    read_pnm(&bytes).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn ppm_bytes(t: &Tensor) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    write_pnm(t, &mut buf)?;
    Ok(buf)
}

/// Loads `--config`, rejecting keys outside `known`.
fn load_config(cli: &Cli, known: &[&str]) -> CliResult<Config> {
    let Some(path) = &cli.config else {
        return Ok(Config::default());
    };
    let c = Config::parse(&read_text(path)?).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    c.ensure_known(known)?;
    Ok(c)
}

pub fn run(cli: &Cli) -> CliResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Input("--threads must be positive".into()));
        }
        // a second initialisation in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Anchors(a) => anchors(cli, a),
        Command::MatchStats(a) => match_stats(cli, a),
        Command::AugmentPreview(a) => augment_preview(cli, a),
        Command::Gradcheck(a) => gradcheck_cmd(cli, a),
        Command::TrainToy(a) => train_toy_cmd(cli, a),
        Command::Predict(a) => predict_cmd(cli, a),
        Command::Eval(a) => eval(cli, a),
    }
}

fn finish(cli: &Cli, m: &RunManifest) -> CliResult {
    let path = m.save(&cli.out_dir)?;
    println!("manifest {}", path.display());
    Ok(())
}

fn anchors(cli: &Cli, a: &AnchorsArgs) -> CliResult {
    load_config(cli, &[])?;
    let specs = level_specs(a.input_size)?;
    let mode = match a.mode {
        ModeArg::Width => ScaleMode::Width,
        ModeArg::Area => ScaleMode::AreaPreserving,
    };
    let shots: &[Shot] = match a.shot {
        ShotArg::First => &[Shot::First],
        ShotArg::Second => &[Shot::Second],
        ShotArg::Both => &[Shot::First, Shot::Second],
    };
    let mut csv = String::new();
    for &shot in shots {
        let grids = build_grids(&specs, shot, mode);
        let part = anchors_csv(&grids);
        // one header for the whole file
        csv.push_str(if csv.is_empty() { &part } else { part.split_once('\n').map_or("", |p| p.1) });
        for g in &grids {
            let (w, h) = g.anchor_size();
            println!(
                "{} level {} map {}x{} anchors {} size {w}x{h}",
                shot, g.level.index, g.level.map_h, g.level.map_w, g.len()
            );
        }
        println!("{} total {}", shot, grids.iter().map(|g| g.len()).sum::<usize>());
    }
    let mut m = RunManifest::new("anchors", cli.seed.unwrap_or(0));
    m.set("input_size", a.input_size);
    m.set("shot", format!("{:?}", a.shot).to_lowercase());
    m.set("mode", format!("{:?}", a.mode).to_lowercase());
    m.write_artifact(&cli.out_dir.join("anchors.csv"), csv.as_bytes())?;
    finish(cli, &m)
}

const AUG_KEYS: [&str; 2] = ["p_anchor_sampling", "restrict_target_scale"];

fn aug_config(cli: &Cli, input_size: usize, seed: u64) -> CliResult<AugConfig> {
    let c = load_config(cli, &AUG_KEYS)?;
    let d = AugConfig::default();
    let cfg = AugConfig {
        input_size,
        p_anchor_sampling: c.get_or("p_anchor_sampling", d.p_anchor_sampling)?,
        restrict_target_scale: c.get_or("restrict_target_scale", d.restrict_target_scale)?,
        seed,
        ..d
    };
    cfg.validate()?;
    Ok(cfg)
}

fn pipeline(p: &PipelineArgs) -> Pipeline {
    if p.traditional {
        Pipeline::Traditional
    } else {
        Pipeline::Iam
    }
}

fn synth_config(seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        ..SynthConfig::default()
    }
}

/// Annotated images with their non-ignored faces.
fn annotated_samples(ann: &Path, dir: &Path) -> CliResult<Vec<Sample>> {
    let set = parse_annotations(&read_text(ann)?).map_err(|e| CliError::Input(format!("{}: {e}", ann.display())))?;
    set.images
        .iter()
        .map(|img| {
            Ok(Sample {
                image: read_image(&dir.join(&img.path))?,
                faces: img.faces.iter().filter(|f| !f.ignore).map(|f| f.bbox).collect(),
            })
        })
        .collect()
}

fn record_source(m: &mut RunManifest, s: &SourceArgs, n: usize) {
    match &s.annotations {
        Some(a) => m.set("annotations", a.display()),
        None => m.set("synthetic", n),
    }
}

fn match_stats(cli: &Cli, a: &MatchStatsArgs) -> CliResult {
    let seed = cli.seed.unwrap_or(DEFAULT_DATA_SEED);
    let cfg = aug_config(cli, a.input_size, seed)?;
    let layouts: Vec<Layout> = match (&a.source.annotations, &a.source.images_dir) {
        (Some(ann), Some(dir)) => annotated_samples(ann, dir)?.iter().map(Sample::layout).collect(),
        _ => synth_layouts(a.source.synthetic.unwrap_or(DEFAULT_STATS_IMAGES), &synth_config(seed))?,
    };
    let pipe = pipeline(&a.pipeline);
    let threshold = a.threshold.unwrap_or(match pipe {
        Pipeline::Iam => IAM_THRESHOLD,
        Pipeline::Traditional => TRADITIONAL_THRESHOLD,
    });
    let (stats, faces) = pipeline_match_stats(&layouts, &cfg, pipe, threshold)?;
    let hist = scale_histogram(faces.iter().flatten());

    let mut m = RunManifest::new("match-stats", seed);
    record_source(&mut m, &a.source, layouts.len());
    m.set("pipeline", format!("{pipe:?}").to_lowercase());
    m.set("threshold", threshold);
    m.set("input_size", cfg.input_size);
    m.set("p_anchor_sampling", cfg.p_anchor_sampling);
    m.set("restrict_target_scale", cfg.restrict_target_scale);
    let csv = stats.to_csv();
    m.write_artifact(&cli.out_dir.join("match_stats.csv"), csv.as_bytes())?;
    m.write_artifact(&cli.out_dir.join("scale_histogram.csv"), hist.to_csv().as_bytes())?;
    print!("{csv}");
    finish(cli, &m)
}

fn augment_preview(cli: &Cli, a: &AugmentPreviewArgs) -> CliResult {
    let seed = cli.seed.unwrap_or(DEFAULT_DATA_SEED);
    let cfg = aug_config(cli, a.input_size, seed)?;
    let samples: Vec<Sample> = match (&a.source.annotations, &a.source.images_dir) {
        (Some(ann), Some(dir)) => annotated_samples(ann, dir)?,
        _ => {
            let sc = synth_config(seed);
            let layouts = synth_layouts(a.source.synthetic.unwrap_or(DEFAULT_PREVIEW_IMAGES), &sc)?;
            layouts
                .iter()
                .enumerate()
                .map(|(k, l)| render_layout(l, seed, k as u64))
                .collect()
        }
    };
    let pipe = pipeline(&a.pipeline);
    let mut m = RunManifest::new("augment-preview", seed);
    record_source(&mut m, &a.source, samples.len());
    m.set("pipeline", format!("{pipe:?}").to_lowercase());
    m.set("input_size", cfg.input_size);
    for (k, s) in samples.iter().enumerate() {
        let mut rng = image_rng(seed, k as u64);
        let out = match pipe {
            Pipeline::Iam => augment(s, &cfg, &mut rng)?,
            Pipeline::Traditional => ssd_style_sample(s, &cfg, &mut rng)?,
        };
        let mut boxes = String::new();
        for b in &out.sample.faces {
            let _ = writeln!(boxes, "{} {} {} {}", b.x, b.y, b.w, b.h);
        }
        let stem = cli.out_dir.join("preview").join(format!("{k:03}"));
        m.write_artifact(&stem.with_extension("ppm"), &ppm_bytes(&out.sample.image)?)?;
        m.write_artifact(&stem.with_extension("txt"), boxes.as_bytes())?;
        println!(
            "{k:03} branch {:?} fallback {} faces {}",
            out.plan.branch,
            out.plan.fallback,
            out.sample.faces.len()
        );
    }
    finish(cli, &m)
}

fn gradcheck_cmd(cli: &Cli, a: &GradcheckArgs) -> CliResult {
    load_config(cli, &[])?;
    let target: GradTarget = a.target.parse()?;
    let tol = a.tol.unwrap_or(target.default_tol());
    if !(tol > 0.0) {
        return Err(CliError::Input("--tol must be positive".into()));
    }
    let seed = cli.seed.unwrap_or(DEFAULT_GRADCHECK_SEED);
    let fault = if a.corrupt_backward {
        Fault::ScaleBackward(1.01)
    } else {
        Fault::None
    };
    let r = gradcheck(target, tol, seed, fault)?;
    let mut text = format!(
        "target={} tol={tol:e} checked={} max_rel_error={:.6e}\n",
        target.name(),
        r.checked,
        r.max_rel_error
    );
    if let Some((t, c, an, nu)) = r.worst {
        let _ = writeln!(text, "worst tensor={t} coord={c} analytic={an:.9e} numeric={nu:.9e}");
    }
    let _ = writeln!(text, "{}", if r.passed { "PASS" } else { "FAIL" });
    print!("{text}");

    let mut m = RunManifest::new("gradcheck", seed);
    m.set("target", target.name());
    m.set("tol", tol);
    m.set("corrupt_backward", a.corrupt_backward);
    m.write_artifact(&cli.out_dir.join(format!("gradcheck_{}.txt", target.name())), text.as_bytes())?;
    finish(cli, &m)?;
    if r.non_finite {
        Err(CliError::Numeric("non-finite loss or gradient".into()))
    } else if !r.passed {
        Err(CliError::Check(format!("max relative error {:.3e} exceeds {tol:e}", r.max_rel_error)))
    } else {
        Ok(())
    }
}

fn train_toy_cmd(cli: &Cli, a: &TrainToyArgs) -> CliResult {
    let mut setup = ToySetup::from_config(&load_config(cli, &ToySetup::default().to_config().keys().collect::<Vec<_>>())?)?;
    if let Some(seed) = cli.seed {
        setup.net.seed = seed;
    }
    if let Some(steps) = a.steps {
        setup.train.steps = steps;
    }
    let corpus = setup.corpus()?;
    let mut m = RunManifest::new("train-toy", setup.net.seed);
    let cfg = setup.to_config();
    for key in cfg.keys() {
        m.set(key, cfg.get_str(key).unwrap_or_default());
    }
    for (k, s) in corpus.iter().enumerate() {
        m.write_artifact(&cli.out_dir.join(corpus_key(k)), &ppm_bytes(&s.image)?)?;
    }
    let annotations = write_annotations(&corpus_annotations(&corpus));
    m.write_artifact(&cli.out_dir.join("annotations.txt"), annotations.as_bytes())?;

    let whole = TrainConfig {
        batch_size: corpus.len().max(1),
        ..setup.train.clone()
    };
    let initial = Trainer::new(Network::build(&setup.net)?, whole.clone())?.evaluate(&corpus)?.pal_total;
    let mut log = String::from("step,lr,pal_total,first_conf,first_loc,second_conf,second_loc\n");
    let net = train_toy(&setup, &corpus, |r| {
        let _ = writeln!(
            log,
            "{},{},{:.9},{:.9},{:.9},{:.9},{:.9}",
            r.step, r.lr, r.pal_total, r.first.conf, r.first.loc, r.second.conf, r.second.loc
        );
    })?;
    let last = Trainer::new(net, whole)?;
    let fin = last.evaluate(&corpus)?.pal_total;
    let summary = format!(
        "initial_pal_total={initial:.9}\nfinal_pal_total={fin:.9}\nratio={:.6}\n",
        fin / initial
    );
    print!("{summary}");
    m.write_artifact(&cli.out_dir.join("train_log.csv"), log.as_bytes())?;
    m.write_artifact(&cli.out_dir.join("train_summary.txt"), summary.as_bytes())?;

    let ckpt = a.out.clone().unwrap_or_else(|| cli.out_dir.join("toy.ckpt"));
    if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let bin = save_checkpoint(last.net(), &ckpt)?;
    m.record_file(&ckpt)?;
    m.record_file(&bin)?;
    finish(cli, &m)
}

const PREDICT_KEYS: [&str; 4] = ["conf_thresh", "top_pre", "nms_overlap", "top_post"];

/// Resizes to the network input when needed and maps boxes back.
fn predict_image(net: &Network, image: &Tensor, cfg: &PredictConfig) -> dualshot::Result<Vec<Detection>> {
    let s = image.shape();
    let size = net.config().input_size;
    if s.width == size && s.height == size {
        return predict(net, image, cfg);
    }
    let full = BBox::new(0.0, 0.0, s.width as f64, s.height as f64);
    let resized = resample_crop(image, &full, size, size, &vec![0.5; s.channels]);
    let (fx, fy) = (s.width as f64 / size as f64, s.height as f64 / size as f64);
    Ok(predict(net, &resized, cfg)?
        .into_iter()
        .map(|d| {
            let b = BBox::new(d.bbox.x * fx, d.bbox.y * fy, d.bbox.w * fx, d.bbox.h * fy);
            Detection::new(round_detection(&b), d.score)
        })
        .collect())
}

fn predict_cmd(cli: &Cli, a: &PredictArgs) -> CliResult {
    let c = load_config(cli, &PREDICT_KEYS)?;
    let d = PredictConfig::default();
    let cfg = PredictConfig {
        conf_thresh: c.get_or("conf_thresh", d.conf_thresh)?,
        top_pre: c.get_or("top_pre", d.top_pre)?,
        nms_overlap: c.get_or("nms_overlap", d.nms_overlap)?,
        top_post: c.get_or("top_post", d.top_post)?,
        coder: d.coder,
    };
    let net = load_checkpoint(&a.ckpt).map_err(|e| CliError::Input(format!("{}: {e}", a.ckpt.display())))?;

    let mut jobs: Vec<(String, PathBuf)> = a.image.iter().map(|p| (p.display().to_string(), p.clone())).collect();
    if let Some(ann) = &a.annotations {
        let set = parse_annotations(&read_text(ann)?)?;
        let dir = ann.parent().unwrap_or(Path::new("."));
        jobs.extend(set.images.into_iter().map(|i| {
            let p = dir.join(&i.path);
            (i.path, p)
        }));
    }
    if jobs.is_empty() {
        return Err(CliError::Input("no images given (use --image or --annotations)".into()));
    }
    let results: Vec<ImageDetections> = jobs
        .par_iter()
        .map(|(key, path)| {
            let img = read_image(path)?;
            let detections = predict_image(&net, &img, &cfg).map_err(|e| match e {
                dualshot::Error::NonFinite(_) => CliError::from(e),
                _ => CliError::Input(format!("{}: {e}", path.display())),
            })?;
            Ok(ImageDetections {
                path: key.clone(),
                detections,
            })
        })
        .collect::<CliResult<_>>()?;

    let out = a.out.clone().unwrap_or_else(|| cli.out_dir.join("detections.txt"));
    let mut m = RunManifest::new("predict", cli.seed.unwrap_or(0));
    m.set("ckpt", a.ckpt.display());
    m.set("conf_thresh", cfg.conf_thresh);
    m.set("top_pre", cfg.top_pre);
    m.set("nms_overlap", cfg.nms_overlap);
    m.set("top_post", cfg.top_post);
    m.write_artifact(&out, write_detections(&results).as_bytes())?;
    for r in &results {
        println!("{} {} detections", r.path, r.detections.len());
    }
    finish(cli, &m)
}

fn eval(cli: &Cli, a: &EvalArgs) -> CliResult {
    load_config(cli, &[])?;
    let gts: AnnotationSet = parse_annotations(&read_text(&a.annotations)?)
        .map_err(|e| CliError::Input(format!("{}: {e}", a.annotations.display())))?;
    let dets = parse_detections(&read_text(&a.detections)?)
        .map_err(|e| CliError::Input(format!("{}: {e}", a.detections.display())))?;
    let curve = average_precision(&dets, &gts, a.iou)?;
    let line = match curve.ap {
        Some(ap) => format!("AP={ap:.6}"),
        None => "AP=undefined (no positive ground truth)".to_string(),
    };
    println!("{line}");
    let mut m = RunManifest::new("eval", cli.seed.unwrap_or(0));
    m.set("annotations", a.annotations.display());
    m.set("detections", a.detections.display());
    m.set("iou", a.iou);
    m.write_artifact(&cli.out_dir.join("pr_curve.csv"), curve.to_csv().as_bytes())?;
    m.write_artifact(&cli.out_dir.join("ap.txt"), format!("{line}\n").as_bytes())?;
    finish(cli, &m)
}
