//! Evaluation and training plumbing behind the command-line tool: source
//! manifests, alignment methods, per-pair records, CSV schemas and CDFs.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{split_train_test, synthetic_scene, AlignmentPair, PairConfig, PairStream, SourceSet};
use crate::error::{Error, Result};
use crate::extract::{
    default_stack_shape, extract, forward_with_tape, ExtractorSpec, init_conv_stack, load_external, Checkpoint, ConvStack, LayerShape,
};
use crate::grid::{load_image, normalize_per_channel, FeatureGrid};
use crate::loss::{corner_distances, corner_error_pct, corner_loss};
use crate::solver::{solve_grids, SolverConfig};
use crate::training::{match_channels, train_from, HistoryRow, IterationMode, TrainOutcome, TrainState};
use crate::warp::{conjugate_by_scale, Homography};

/// Formats like C's `%.9g`.
pub fn fmt_g9(v: f64) -> String {
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !v.is_finite() {
        return if v.is_nan() {
            "nan".into()
        } else if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-4..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{v:.decimals$}"))
    } else {
        let m = trim_zeros(mantissa.to_string());
        format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Synthetic source scene used when a manifest lists no images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    pub height: usize,
    pub width: usize,
    #[serde(default)]
    pub seed: u64,
}

/// Where pairs come from: co-registered images (paths relative to the
/// manifest) or a synthetic scene, a held-out fraction, and how pairs are
/// drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default)]
    pub images: Vec<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSource>,
    pub test_fraction: f64,
    #[serde(default)]
    pub pairs: PairConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn source(&self) -> Result<SourceSet> {
        let frames = match (&self.synthetic, self.images.is_empty()) {
            (Some(s), true) => vec![synthetic_scene(s.height, s.width, s.seed)],
            (None, false) => self
                .images
                .iter()
                .map(|p| load_image(self.base_dir.join(p)))
                .collect::<Result<_>>()?,
            _ => {
                return Err(Error::Config(
                    "manifest needs exactly one of `images` or `[synthetic]`".into(),
                ))
            }
        };
        split_train_test(&SourceSet::new(frames)?, self.test_fraction)
    }

    pub fn stream(&self, seed: u64) -> Result<PairStream> {
        PairStream::new(self.source()?, self.pairs, seed)
    }
}

/// An alignment method under evaluation.
#[derive(Clone, Debug)]
pub enum Method {
    /// Always predicts the identity.
    Noop,
    /// The solver on raw samples.
    IclkRaw,
    /// The solver on per-channel normalized samples.
    IclkNorm,
    /// The solver on features of a trained stack.
    Conv { path: PathBuf, stack: ConvStack },
    /// The solver on features of a freshly initialized default stack.
    ConvInit { seed: u64, stack: ConvStack },
    /// The solver on precomputed features, `pair{id:06}_{template,image}.fgt`.
    External { dir: PathBuf, stride: usize },
}

impl Method {
    pub fn id(&self) -> String {
        match self {
            Method::Noop => "noop".into(),
            Method::IclkRaw => "iclk-raw".into(),
            Method::IclkNorm => "iclk-norm".into(),
            Method::Conv { path, .. } => format!("conv:{}", path.display()),
            Method::ConvInit { seed, .. } => format!("conv-init:{seed}"),
            Method::External { dir, stride } => format!("external:{}:{stride}", dir.display()),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown method `{s}`"));
        Ok(match s {
            "noop" => Method::Noop,
            "iclk-raw" => Method::IclkRaw,
            "iclk-norm" => Method::IclkNorm,
            _ => {
                if let Some(p) = s.strip_prefix("conv:") {
                    let path = PathBuf::from(p);
                    let stack = Checkpoint::load(&path)?.stack;
                    Method::Conv { path, stack }
                } else if let Some(seed) = s.strip_prefix("conv-init:") {
                    let seed = seed.parse().map_err(|_| bad())?;
                    Method::ConvInit {
                        seed,
                        stack: init_conv_stack(&default_stack_shape(), seed)?,
                    }
                } else if let Some(rest) = s.strip_prefix("external:") {
                    let (dir, stride) = rest.rsplit_once(':').ok_or_else(bad)?;
                    Method::External {
                        dir: dir.into(),
                        stride: stride.parse().map_err(|_| bad())?,
                    }
                } else {
                    return Err(bad());
                }
            }
        })
    }
}

pub fn pair_file(dir: &Path, id: u64, side: &str, ext: &str) -> PathBuf {
    dir.join(format!("pair{id:06}_{side}.{ext}"))
}

/// One method on one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub pair_id: u64,
    pub method: String,
    pub corner_error_pct: f64,
    pub converged: bool,
    pub iterations: usize,
    pub wall_time_ms: Option<f64>,
    /// `ok`, or the error that stopped the method early.
    pub status: String,
}

/// Features of both sides of a pair for `method`, plus the stride.
fn method_features(method: &Method, id: u64, pair: &AlignmentPair) -> Result<(FeatureGrid, FeatureGrid, usize)> {
    let conv = |stack: &ConvStack| -> Result<(FeatureGrid, FeatureGrid, usize)> {
        let (t, _) = forward_with_tape(stack, &match_channels(&pair.template, stack.in_channels())?)?;
        let (i, _) = forward_with_tape(stack, &match_channels(&pair.image, stack.in_channels())?)?;
        Ok((t, i, stack.total_stride()))
    };
    match method {
        Method::Noop => unreachable!("noop has no features"),
        Method::IclkRaw => Ok((pair.template.clone(), pair.image.clone(), 1)),
        Method::IclkNorm => Ok((
            normalize_per_channel(&pair.template),
            normalize_per_channel(&pair.image),
            1,
        )),
        Method::Conv { stack, .. } | Method::ConvInit { stack, .. } => conv(stack),
        Method::External { dir, stride } => Ok((
            load_external(&pair_file(dir, id, "template", "fgt"), *stride, &pair.template)?,
            load_external(&pair_file(dir, id, "image", "fgt"), *stride, &pair.image)?,
            *stride,
        )),
    }
}

/// Runs one method on one pair. Failures become a record whose corner
/// error is that of the last warp reached.
pub fn evaluate_pair(method: &Method, id: u64, pair: &AlignmentPair, cfg: &SolverConfig, record_time: bool) -> EvalRecord {
    let start = Instant::now();
    let corners = pair.corners();
    let n = pair.patch_size as f64;
    let (warp, converged, iterations, status) = match method {
        Method::Noop => (Homography::identity(), true, 0, "ok".to_string()),
        _ => match method_features(method, id, pair) {
            Err(e) => (Homography::identity(), false, 0, e.to_string()),
            Ok((t, i, stride)) => match solve_grids(&t, &i, &Homography::identity(), cfg) {
                Ok(r) => (conjugate_by_scale(&r.warp, stride as f64), r.converged, r.iterations_used, "ok".into()),
                Err(f) => (
                    conjugate_by_scale(&f.partial.warp, stride as f64),
                    false,
                    f.partial.iterations_used,
                    f.error.to_string(),
                ),
            },
        },
    };
    let (err, status) = match corner_error_pct(&pair.gt_warp, &warp, &corners, n) {
        Ok(e) => {
            // the metric and the training loss share their corner distances
            debug_assert!(corner_loss(&pair.gt_warp, &warp, &corners).is_ok_and(|l| {
                let d = corner_distances(&pair.gt_warp, &warp, &corners).expect("distances");
                let sq: f64 = d.iter().map(|v| v * v).sum();
                let pct = d.iter().sum::<f64>() / (4.0 * n) * 100.0;
                (l - sq).abs() <= 1e-9 * sq.max(1.0) && (e - pct).abs() <= 1e-9 * pct.max(1.0)
            }));
            (e, status)
        }
        Err(e) => (f64::INFINITY, format!("{status}; {e}")),
    };
    EvalRecord {
        pair_id: id,
        method: method.id(),
        corner_error_pct: err,
        converged,
        iterations,
        wall_time_ms: record_time.then(|| start.elapsed().as_secs_f64() * 1e3),
        status,
    }
}

/// Every method (the no-op first, added if absent) on `n_pairs` evaluation
/// pairs, ordered by pair then method.
pub fn evaluate(
    stream: &PairStream,
    methods: &[Method],
    n_pairs: u64,
    cfg: &SolverConfig,
    record_time: bool,
) -> Result<Vec<EvalRecord>> {
    let mut all: Vec<&Method> = Vec::new();
    let noop = Method::Noop;
    if !methods.iter().any(|m| matches!(m, Method::Noop)) {
        all.push(&noop);
    }
    all.extend(methods.iter());
    let per_pair: Vec<Result<Vec<EvalRecord>>> = (0..n_pairs)
        .into_par_iter()
        .map(|id| {
            let pair = stream.evaluation_pair(id)?;
            Ok(all.iter().map(|m| evaluate_pair(m, id, &pair, cfg, record_time)).collect())
        })
        .collect();
    let mut out = Vec::new();
    for r in per_pair {
        out.extend(r?);
    }
    Ok(out)
}

pub const EVAL_SCHEMA: &str = "# iclk-eval v1";
pub const CDF_SCHEMA: &str = "# iclk-cdf v1";
pub const HISTORY_SCHEMA: &str = "# iclk-history v1";
pub const PAIRS_SCHEMA: &str = "# iclk-pairs v1";
const EVAL_HEADER: [&str; 7] = [
    "pair_id",
    "method",
    "corner_error_pct",
    "converged",
    "iterations",
    "wall_time_ms",
    "status",
];

fn csv_bytes(schema: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    writeln!(buf, "{schema}").expect("in-memory write");
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(buf);
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn eval_csv(records: &[EvalRecord]) -> Result<Vec<u8>> {
    csv_bytes(
        EVAL_SCHEMA,
        &EVAL_HEADER,
        records.iter().map(|r| {
            vec![
                r.pair_id.to_string(),
                r.method.clone(),
                fmt_g9(r.corner_error_pct),
                r.converged.to_string(),
                r.iterations.to_string(),
                r.wall_time_ms.map(fmt_g9).unwrap_or_default(),
                r.status.clone(),
            ]
        }),
    )
}

fn csv_reader(bytes: &[u8]) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(bytes)
}

pub fn read_eval_csv(bytes: &[u8]) -> Result<Vec<EvalRecord>> {
    let mut r = csv_reader(bytes);
    let header = r.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != EVAL_HEADER {
        return Err(Error::Format("evaluation CSV has an unexpected header".into()));
    }
    let bad = |what: &str, line: usize| Error::Format(format!("evaluation CSV row {line}: bad {what}"));
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 1;
        let err: f64 = rec[2].parse().map_err(|_| bad("corner_error_pct", line))?;
        if !(err >= 0.0) {
            return Err(bad("corner_error_pct", line));
        }
        out.push(EvalRecord {
            pair_id: rec[0].parse().map_err(|_| bad("pair_id", line))?,
            method: rec[1].to_string(),
            corner_error_pct: err,
            converged: rec[3].parse().map_err(|_| bad("converged", line))?,
            iterations: rec[4].parse().map_err(|_| bad("iterations", line))?,
            wall_time_ms: if rec[5].is_empty() {
                None
            } else {
                Some(rec[5].parse().map_err(|_| bad("wall_time_ms", line))?)
            },
            status: rec[6].to_string(),
        });
    }
    Ok(out)
}

/// Methods in order of first appearance.
pub fn methods_in(records: &[EvalRecord]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in records {
        if !out.contains(&r.method) {
            out.push(r.method.clone());
        }
    }
    out
}

/// Fraction of `method`'s records with corner error at most `threshold`.
pub fn fraction_within(records: &[EvalRecord], method: &str, threshold: f64) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for r in records.iter().filter(|r| r.method == method) {
        total += 1;
        if r.corner_error_pct <= threshold {
            hit += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

pub const SUMMARY_THRESHOLDS: [f64; 4] = [1.0, 3.0, 5.0, 10.0];

/// Per method, the fraction of pairs under each summary threshold.
pub fn summary(records: &[EvalRecord]) -> Vec<(String, [f64; 4])> {
    methods_in(records)
        .into_iter()
        .map(|m| {
            let f = SUMMARY_THRESHOLDS.map(|t| fraction_within(records, &m, t));
            (m, f)
        })
        .collect()
}

pub fn format_summary(records: &[EvalRecord]) -> String {
    let mut s = String::from("method\t<=1%\t<=3%\t<=5%\t<=10%\n");
    for (m, f) in summary(records) {
        s.push_str(&m);
        for v in f {
            s.push('\t');
            s.push_str(&format!("{v:.3}"));
        }
        s.push('\n');
    }
    s
}

/// Thresholds 0, 0.25, ..., 30 percent.
pub fn cdf_thresholds() -> Vec<f64> {
    (0..=120).map(|i| i as f64 * 0.25).collect()
}

pub fn cdf_csv(records: &[EvalRecord]) -> Result<Vec<u8>> {
    let methods = methods_in(records);
    let mut header = vec!["threshold_pct"];
    header.extend(methods.iter().map(String::as_str));
    csv_bytes(
        CDF_SCHEMA,
        &header,
        cdf_thresholds().into_iter().map(|t| {
            let mut row = vec![fmt_g9(t)];
            row.extend(methods.iter().map(|m| fmt_g9(fraction_within(records, m, t))));
            row
        }),
    )
}

pub fn history_csv(rows: &[HistoryRow]) -> Result<Vec<u8>> {
    let opt = |v: Option<f64>| v.map(fmt_g9).unwrap_or_default();
    csv_bytes(
        HISTORY_SCHEMA,
        &["step", "train_loss", "val_loss", "mean_iters"],
        rows.iter()
            .map(|r| vec![r.step.to_string(), opt(r.train_loss), opt(r.val_loss), opt(r.mean_iters)]),
    )
}

pub fn pairs_csv(pairs: &[(u64, &AlignmentPair)]) -> Result<Vec<u8>> {
    let mut header = vec!["pair_id", "patch_size", "pad"];
    let names = ["h11", "h12", "h13", "h21", "h22", "h23", "h31", "h32", "h33"];
    header.extend(names);
    csv_bytes(
        PAIRS_SCHEMA,
        &header,
        pairs.iter().map(|(id, p)| {
            let mut row = vec![id.to_string(), p.patch_size.to_string(), p.pad.to_string()];
            row.extend(p.gt_warp.to_row_array().iter().map(|v| fmt_g9(*v)));
            row
        }),
    )
}

/// Training run description: optimizer settings and the model to start
/// from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub train: crate::training::TrainConfig,
    pub model: ModelConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub init_seed: u64,
    /// Layer shapes; the default two-layer stack when absent.
    pub layers: Option<Vec<LayerShape>>,
}

impl TrainFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn initial_stack(&self) -> Result<ConvStack> {
        let shapes = self.model.layers.clone().unwrap_or_else(default_stack_shape);
        init_conv_stack(&shapes, self.model.init_seed)
    }
}

pub fn read_history_csv(bytes: &[u8]) -> Result<Vec<HistoryRow>> {
    let mut r = csv_reader(bytes);
    let bad = |line: usize| Error::Format(format!("history CSV row {line} is malformed"));
    let opt = |s: &str, line: usize| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| bad(line))
        }
    };
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != 4 {
            return Err(bad(i + 1));
        }
        out.push(HistoryRow {
            step: rec[0].parse().map_err(|_| bad(i + 1))?,
            train_loss: opt(&rec[1], i + 1)?,
            val_loss: opt(&rec[2], i + 1)?,
            mean_iters: opt(&rec[3], i + 1)?,
        });
    }
    Ok(out)
}

/// Companion paths of a training output `out`: the latest state and the
/// history.
pub fn last_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".last");
    s.into()
}

pub fn history_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".history.csv");
    s.into()
}

fn meta(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn meta_get<'a>(ck: &'a Checkpoint, key: &str) -> Result<&'a str> {
    ck.meta
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Format(format!("checkpoint lacks `{key}`")))
}

fn write_training_files(out: &Path, state: &TrainState, history: &[HistoryRow]) -> Result<()> {
    Checkpoint {
        stack: state.best.clone(),
        meta: meta(&[
            ("step", state.best_step.to_string()),
            ("val_loss", fmt_g9(state.best_val)),
        ]),
    }
    .save(out)?;
    Checkpoint {
        stack: state.stack.clone(),
        meta: meta(&[
            ("step", state.step.to_string()),
            ("best_step", state.best_step.to_string()),
            ("best_val_bits", format!("{:016x}", state.best_val.to_bits())),
        ]),
    }
    .save(last_path(out))?;
    write_file(&history_path(out), &history_csv(history)?)
}

/// Training state and history saved at `out` by an earlier run.
pub fn load_training_files(out: &Path) -> Result<(TrainState, Vec<HistoryRow>)> {
    let last = Checkpoint::load(last_path(out))?;
    let best = Checkpoint::load(out)?;
    let parse_err = |k: &str| Error::Format(format!("checkpoint field `{k}` is malformed"));
    let step: usize = meta_get(&last, "step")?.parse().map_err(|_| parse_err("step"))?;
    let best_step: usize = meta_get(&last, "best_step")?.parse().map_err(|_| parse_err("best_step"))?;
    let bits = u64::from_str_radix(meta_get(&last, "best_val_bits")?, 16).map_err(|_| parse_err("best_val_bits"))?;
    let hp = history_path(out);
    let bytes = fs::read(&hp).map_err(|e| Error::io(&hp, e))?;
    let history = read_history_csv(&bytes)?.into_iter().filter(|r| r.step <= step).collect();
    Ok((
        TrainState {
            stack: last.stack,
            step,
            best: best.stack,
            best_step,
            best_val: f64::from_bits(bits),
        },
        history,
    ))
}

/// Trains on pairs from `manifest`, writing the best checkpoint to `out`
/// plus its `.last` and `.history.csv` companions after every validation.
/// With `resume`, continues from those files.
pub fn run_training(
    file: &TrainFile,
    manifest: &Manifest,
    out: &Path,
    resume: bool,
    single_iteration: bool,
) -> Result<TrainOutcome> {
    let mut cfg = file.train.clone();
    if single_iteration {
        cfg.mode = IterationMode::Single;
    }
    let stream = manifest.stream(cfg.seed)?;
    let (state, mut history) = if resume {
        load_training_files(out)?
    } else {
        (TrainState::fresh(file.initial_stack()?), Vec::new())
    };
    let prior = history.len();
    let mut observer = |s: &TrainState, h: &[HistoryRow]| -> Result<()> {
        let mut all = history[..prior].to_vec();
        all.extend_from_slice(h);
        write_training_files(out, s, &all)
    };
    let outcome = train_from(&cfg, &stream, state, &mut observer)?;
    history.extend(outcome.history.iter().cloned());
    write_training_files(out, &outcome.state, &history)?;
    Ok(TrainOutcome { history, ..outcome })
}

/// Reads a grid from an FGT1 file (by extension) or an ordinary image.
pub fn load_grid(path: &Path) -> Result<FeatureGrid> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("fgt")) {
        Ok(crate::fgt::load_fgt(path)?.into_f32())
    } else {
        load_image(path)
    }
}

/// Outcome of aligning one template to one image, in image coordinates.
#[derive(Clone, Debug)]
pub struct AlignOutcome {
    pub warp: Homography,
    pub converged: bool,
    pub iterations: usize,
    pub final_residual: Option<f64>,
    /// Set when the solver stopped on an error; `warp` is the last one
    /// reached.
    pub error: Option<String>,
}

/// Extracts features from both grids with `spec` and solves from the
/// identity. External features are read from `features` (template, image).
pub fn align(
    template: &FeatureGrid,
    image: &FeatureGrid,
    spec: &ExtractorSpec,
    features: Option<(&Path, &Path)>,
    cfg: &SolverConfig,
) -> Result<AlignOutcome> {
    cfg.validate()?;
    let (t, i, stride) = match spec {
        ExtractorSpec::ExternalFile { stride, .. } => {
            let (tp, ip) = features
                .ok_or_else(|| Error::Config("external features need both feature files".into()))?;
            (load_external(tp, *stride, template)?, load_external(ip, *stride, image)?, *stride)
        }
        ExtractorSpec::ConvStack(stack) => {
            let (t, s) = extract(spec, &match_channels(template, stack.in_channels())?)?;
            let (i, _) = extract(spec, &match_channels(image, stack.in_channels())?)?;
            (t, i, s)
        }
        _ => {
            let (t, s) = extract(spec, template)?;
            let (i, _) = extract(spec, image)?;
            (t, i, s)
        }
    };
    let (result, error) = match solve_grids(&t, &i, &Homography::identity(), cfg) {
        Ok(r) => (r, None),
        Err(f) => (f.partial, Some(f.error.to_string())),
    };
    Ok(AlignOutcome {
        warp: conjugate_by_scale(&result.warp, stride as f64),
        converged: result.converged,
        iterations: result.iterations_used,
        final_residual: result.log.last().map(|l| l.mean_residual),
        error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g9_matches_printf() {
        let cases = [
            (0.0, "0"),
            (1.0, "1"),
            (0.1, "0.1"),
            (1.0 / 3.0, "0.333333333"),
            (123456789.0, "123456789"),
            (1234567891.0, "1.23456789e+09"),
            (0.0001, "0.0001"),
            (0.00001234, "1.234e-05"),
            (-2.5, "-2.5"),
            (99999999.95, "100000000"),
            (999999999.5, "1e+09"),
            (30.0, "30"),
            (2.0f64.sqrt(), "1.41421356"),
        ];
        for (v, s) in cases {
            assert_eq!(fmt_g9(v), s, "{v}");
        }
    }

    fn rec(id: u64, method: &str, e: f64) -> EvalRecord {
        EvalRecord {
            pair_id: id,
            method: method.into(),
            corner_error_pct: e,
            converged: true,
            iterations: 3,
            wall_time_ms: None,
            status: "ok".into(),
        }
    }

    #[test]
    fn eval_csv_round_trip() {
        let recs = vec![rec(0, "noop", 12.5), rec(0, "iclk-raw", 0.125), rec(1, "noop", 3.0)];
        let bytes = eval_csv(&recs).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with("# iclk-eval v1\npair_id,method,"));
        assert_eq!(read_eval_csv(&bytes).unwrap(), recs);
        assert!(read_eval_csv(b"a,b\n1,2\n").is_err());
    }

    #[test]
    fn cdf_single_record_steps_at_its_value() {
        let bytes = cdf_csv(&[rec(0, "m", 5.0)]).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        let rows: Vec<&str> = text.lines().skip(2).collect();
        assert_eq!(rows.len(), 121);
        assert_eq!(rows[19], "4.75,0");
        assert_eq!(rows[20], "5,1");
        assert_eq!(rows[120], "30,1");
    }

    #[test]
    fn summary_fractions() {
        let recs = vec![rec(0, "a", 0.5), rec(1, "a", 4.0), rec(2, "a", 20.0), rec(0, "b", 2.0)];
        let s = summary(&recs);
        assert_eq!(s[0].0, "a");
        assert_eq!(s[0].1, [1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0]);
        assert_eq!(s[1].1, [0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn summary_is_recomputable_from_the_csv() {
        let recs: Vec<EvalRecord> = (0..40)
            .map(|i| rec(i / 2, if i % 2 == 0 { "noop" } else { "x" }, (i as f64 * 0.77) % 12.0))
            .collect();
        let back = read_eval_csv(&eval_csv(&recs).unwrap()).unwrap();
        assert_eq!(summary(&back), summary(&recs));
        assert_eq!(cdf_csv(&back).unwrap(), cdf_csv(&recs).unwrap());
    }

    #[test]
    fn history_csv_round_trip() {
        let rows = vec![
            HistoryRow { step: 0, train_loss: None, val_loss: Some(2.5), mean_iters: None },
            HistoryRow { step: 1, train_loss: Some(1.25), val_loss: None, mean_iters: Some(3.0) },
        ];
        assert_eq!(read_history_csv(&history_csv(&rows).unwrap()).unwrap(), rows);
    }

    #[test]
    fn train_file_parses() {
        let f: TrainFile = toml::from_str(
            "[train]\nlearning_rate = 1e-5\nloss = { kind = \"conditional_huber\", delta = 1.0 }\nmode = \"single\"\n\
             [model]\ninit_seed = 3\n",
        )
        .unwrap();
        assert_eq!(f.train.loss, crate::loss::LossKind::ConditionalHuber { delta: 1.0 });
        assert_eq!(f.train.mode, IterationMode::Single);
        assert_eq!(f.train.batch_size, 5);
        assert_eq!(f.initial_stack().unwrap().shapes(), default_stack_shape());
        assert!(toml::from_str::<TrainFile>("[train]\nlearning_rat = 1.0\n").is_err());
    }

    #[test]
    fn method_parsing() {
        assert!(matches!("noop".parse::<Method>().unwrap(), Method::Noop));
        assert_eq!("conv-init:4".parse::<Method>().unwrap().id(), "conv-init:4");
        match "external:/tmp/feat:4".parse::<Method>().unwrap() {
            Method::External { dir, stride } => {
                assert_eq!(dir, PathBuf::from("/tmp/feat"));
                assert_eq!(stride, 4);
            }
            _ => panic!(),
        }
        assert!("bogus".parse::<Method>().is_err());
    }
}
