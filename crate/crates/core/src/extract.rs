//! Feature extractors: the stage that maps a raw image grid to the feature
//! grid the solver aligns.
//!
//! The same extractor (and the same weights) is always applied to both the
//! template and the image; nothing in this module has per-side parameters.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fgt::{self, AnyGrid};
use crate::grid::{normalize_per_channel, FeatureGrid, Grid, Sample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    None,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub activation: Activation,
}

impl LayerShape {
    /// Output side for input side `n`: `floor((n - k) / stride) + 1`, no padding.
    pub fn output_side(&self, n: usize) -> Option<usize> {
        (n >= self.kernel).then(|| (n - self.kernel) / self.stride + 1)
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }
}

/// Two 3x3 layers, 1 -> 8 -> 8 channels, strides 1 and 2, rectifier between.
pub fn default_stack_shape() -> Vec<LayerShape> {
    vec![
        LayerShape {
            in_channels: 1,
            out_channels: 8,
            kernel: 3,
            stride: 1,
            activation: Activation::Relu,
        },
        LayerShape {
            in_channels: 8,
            out_channels: 8,
            kernel: 3,
            stride: 2,
            activation: Activation::None,
        },
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub shape: LayerShape,
    /// `out x in x k x k`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// A small stack of valid (unpadded) strided convolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStack {
    layers: Vec<ConvLayer>,
}

impl ConvStack {
    pub fn new(layers: Vec<ConvLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("a conv stack needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            let s = &l.shape;
            if s.in_channels == 0 || s.out_channels == 0 || s.kernel == 0 || s.stride == 0 {
                return Err(Error::Config(format!("layer {i} has a zero dimension")));
            }
            if l.weights.len() != s.weight_len() || l.bias.len() != s.out_channels {
                return Err(Error::Config(format!("layer {i} parameter count mismatch")));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("layer {i} has non-finite parameters")));
            }
            if i > 0 && layers[i - 1].shape.out_channels != s.in_channels {
                return Err(Error::Config(format!(
                    "layer {i} expects {} input channels, previous layer gives {}",
                    s.in_channels,
                    layers[i - 1].shape.out_channels
                )));
            }
        }
        Ok(ConvStack { layers })
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn shapes(&self) -> Vec<LayerShape> {
        self.layers.iter().map(|l| l.shape).collect()
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].shape.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().unwrap().shape.out_channels
    }

    pub fn total_stride(&self) -> usize {
        self.layers.iter().map(|l| l.shape.stride).product()
    }

    /// Input coordinate of the receptive-field center of output sample 0.
    pub fn offset(&self) -> f64 {
        let mut offset = 0.0;
        let mut scale = 1.0;
        for l in &self.layers {
            offset += scale * (l.shape.kernel as f64 - 1.0) / 2.0;
            scale *= l.shape.stride as f64;
        }
        offset
    }

    pub fn output_size(&self, height: usize, width: usize) -> Option<(usize, usize)> {
        self.layers.iter().try_fold((height, width), |(h, w), l| {
            Some((l.shape.output_side(h)?, l.shape.output_side(w)?))
        })
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// All parameters flattened: per layer, weights then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params());
        let mut i = 0;
        for l in &mut self.layers {
            let n = l.weights.len();
            l.weights.copy_from_slice(&flat[i..i + n]);
            i += n;
            let n = l.bias.len();
            l.bias.copy_from_slice(&flat[i..i + n]);
            i += n;
        }
    }

    /// Runs the stack in double precision, recording every intermediate
    /// needed to differentiate the output with respect to the parameters.
    pub fn forward<T: Sample>(&self, image: &Grid<T>) -> Result<ConvTape> {
        if image.channels() != self.in_channels() {
            return Err(Error::ShapeMismatch(format!(
                "stack expects {} input channels, image has {}",
                self.in_channels(),
                image.channels()
            )));
        }
        let (oh, ow) = self
            .output_size(image.height(), image.width())
            .ok_or_else(|| {
                Error::InputTooSmall(format!(
                    "{}x{} input is smaller than the stack's receptive field",
                    image.height(),
                    image.width()
                ))
            })?;
        let mut records = Vec::with_capacity(self.layers.len());
        let mut act = Plane {
            channels: image.channels(),
            height: image.height(),
            width: image.width(),
            data: image.to_f64_vec(),
        };
        for l in &self.layers {
            let pre = conv_forward(l, &act);
            let out = match l.shape.activation {
                Activation::None => pre.clone(),
                Activation::Relu => Plane {
                    data: pre.data.iter().map(|v| if *v > 0.0 { *v } else { 0.0 }).collect(),
                    ..pre.clone()
                },
            };
            records.push(LayerRecord { input: act, pre });
            act = out;
        }
        debug_assert_eq!((act.height, act.width), (oh, ow));
        if !act.data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidGrid("extractor produced non-finite activations".into()));
        }
        let origin = image.origin();
        let s = self.total_stride() as f64;
        let off = self.offset();
        Ok(ConvTape {
            records,
            output: act,
            origin: [(origin[0] + off) / s, (origin[1] + off) / s],
        })
    }

    /// Gradients of a scalar with respect to every parameter, given the
    /// scalar's gradient with respect to the stack output.
    pub fn backward(&self, tape: &ConvTape, grad_output: &[f64]) -> Result<ConvGrads> {
        if tape.records.len() != self.layers.len() {
            return Err(Error::IncompleteTape("conv tape does not match the stack"));
        }
        if grad_output.len() != tape.output.data.len() {
            return Err(Error::IncompleteTape("output gradient has the wrong length"));
        }
        let mut grads: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(self.layers.len());
        let mut g = grad_output.to_vec();
        for (li, (l, rec)) in self.layers.iter().zip(&tape.records).enumerate().rev() {
            if l.shape.activation == Activation::Relu {
                for (gv, p) in g.iter_mut().zip(&rec.pre.data) {
                    if *p <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            let need_input = li > 0;
            let (gw, gb, gin) = conv_backward(l, &rec.input, &rec.pre, &g, need_input);
            grads.push((gw, gb));
            g = gin;
        }
        grads.reverse();
        Ok(ConvGrads { layers: grads })
    }
}

/// A dense `C x H x W` double-precision activation block.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug)]
struct LayerRecord {
    input: Plane,
    pre: Plane,
}

/// Recorded forward pass of a [`ConvStack`].
#[derive(Clone, Debug)]
pub struct ConvTape {
    records: Vec<LayerRecord>,
    output: Plane,
    origin: [f64; 2],
}

impl ConvTape {
    pub fn output(&self) -> &Plane {
        &self.output
    }

    /// Output as a double-precision grid registered to the feature frame.
    pub fn output_grid(&self) -> Grid<f64> {
        let o = &self.output;
        Grid::new(o.channels, o.height, o.width, o.data.clone())
            .expect("finite activations")
            .with_origin(self.origin)
    }

    /// For a rectified layer, which units were active (pre-activation > 0).
    pub fn active_units(&self, layer: usize) -> Vec<bool> {
        self.records[layer].pre.data.iter().map(|v| *v > 0.0).collect()
    }
}

/// Per-layer `(weight, bias)` gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl ConvGrads {
    pub fn zeros_like(stack: &ConvStack) -> Self {
        ConvGrads {
            layers: stack
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
                .collect(),
        }
    }

    /// Flattened in the same order as [`ConvStack::params`].
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b).copied())
            .collect()
    }

    pub fn add_assign(&mut self, other: &ConvGrads) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.iter_mut().zip(ow).for_each(|(a, v)| *a += v);
            b.iter_mut().zip(ob).for_each(|(a, v)| *a += v);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (w, b) in &mut self.layers {
            w.iter_mut().chain(b.iter_mut()).for_each(|v| *v *= s);
        }
    }
}

fn conv_forward(l: &ConvLayer, input: &Plane) -> Plane {
    let s = &l.shape;
    let (k, st) = (s.kernel, s.stride);
    let oh = (input.height - k) / st + 1;
    let ow = (input.width - k) / st + 1;
    let mut out = vec![0.0; s.out_channels * oh * ow];
    for co in 0..s.out_channels {
        let dst = &mut out[co * oh * ow..(co + 1) * oh * ow];
        dst.iter_mut().for_each(|v| *v = l.bias[co]);
        for ci in 0..s.in_channels {
            let src = &input.data[ci * input.height * input.width..];
            for ky in 0..k {
                for kx in 0..k {
                    let w = l.weights[((co * s.in_channels + ci) * k + ky) * k + kx];
                    for y in 0..oh {
                        let row = &src[(st * y + ky) * input.width + kx..];
                        let drow = &mut dst[y * ow..(y + 1) * ow];
                        if st == 1 {
                            for (d, v) in drow.iter_mut().zip(&row[..ow]) {
                                *d += w * v;
                            }
                        } else {
                            for (x, d) in drow.iter_mut().enumerate() {
                                *d += w * row[st * x];
                            }
                        }
                    }
                }
            }
        }
    }
    Plane {
        channels: s.out_channels,
        height: oh,
        width: ow,
        data: out,
    }
}

fn conv_backward(
    l: &ConvLayer,
    input: &Plane,
    pre: &Plane,
    grad_pre: &[f64],
    need_input: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let s = &l.shape;
    let (k, st) = (s.kernel, s.stride);
    let (oh, ow) = (pre.height, pre.width);
    let mut gw = vec![0.0; l.weights.len()];
    let mut gb = vec![0.0; s.out_channels];
    let mut gin = if need_input {
        vec![0.0; input.data.len()]
    } else {
        Vec::new()
    };
    let plane_in = input.height * input.width;
    for co in 0..s.out_channels {
        let g = &grad_pre[co * oh * ow..(co + 1) * oh * ow];
        gb[co] = g.iter().sum();
        for ci in 0..s.in_channels {
            let src = &input.data[ci * plane_in..(ci + 1) * plane_in];
            for ky in 0..k {
                for kx in 0..k {
                    let wi = ((co * s.in_channels + ci) * k + ky) * k + kx;
                    let mut acc = 0.0;
                    for y in 0..oh {
                        let row = (st * y + ky) * input.width + kx;
                        let grow = &g[y * ow..(y + 1) * ow];
                        for (x, gv) in grow.iter().enumerate() {
                            acc += gv * src[row + st * x];
                        }
                    }
                    gw[wi] = acc;
                    if need_input {
                        let w = l.weights[wi];
                        let dst = &mut gin[ci * plane_in..(ci + 1) * plane_in];
                        for y in 0..oh {
                            let row = (st * y + ky) * input.width + kx;
                            let grow = &g[y * ow..(y + 1) * ow];
                            for (x, gv) in grow.iter().enumerate() {
                                dst[row + st * x] += w * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    (gw, gb, gin)
}

/// Deterministic uniform init in `[-b, b]` with `b = 1 / sqrt(in_channels * k^2)`,
/// for weights and biases alike.
pub fn init_conv_stack(shapes: &[LayerShape], seed: u64) -> Result<ConvStack> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = shapes
        .iter()
        .map(|s| {
            let bound = init_bound(s);
            let mut draw = |n: usize| -> Vec<f64> {
                (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
            };
            let weights = draw(s.weight_len());
            let bias = draw(s.out_channels);
            ConvLayer {
                shape: *s,
                weights,
                bias,
            }
        })
        .collect();
    ConvStack::new(layers)
}

pub fn init_bound(s: &LayerShape) -> f64 {
    1.0 / ((s.in_channels * s.kernel * s.kernel) as f64).sqrt()
}

/// Which extractor to run.
#[derive(Clone, Debug, PartialEq)]
pub enum ExtractorSpec {
    /// Raw samples.
    Identity,
    /// Per-channel zero-mean, unit-variance samples.
    Normalize,
    /// A trainable convolution stack.
    ConvStack(ConvStack),
    /// A precomputed feature map on disk, produced at the declared stride.
    ExternalFile { path: PathBuf, stride: usize },
}

/// Extracted features plus the stride between feature and image samples.
///
/// Feature-frame coordinates are image-frame coordinates divided by the
/// stride, so a warp solved on features maps back to the image through
/// [`crate::warp::conjugate_by_scale`].
pub fn extract(spec: &ExtractorSpec, image: &FeatureGrid) -> Result<(FeatureGrid, usize)> {
    match spec {
        ExtractorSpec::Identity => Ok((image.clone(), 1)),
        ExtractorSpec::Normalize => Ok((normalize_per_channel(image), 1)),
        ExtractorSpec::ConvStack(stack) => {
            let (features, _) = forward_with_tape(stack, image)?;
            Ok((features, stack.total_stride()))
        }
        ExtractorSpec::ExternalFile { path, stride } => {
            let features = load_external(path, *stride, image)?;
            Ok((features, *stride))
        }
    }
}

/// Same output as [`extract`] for a conv stack, plus the recorded tape.
pub fn forward_with_tape<T: Sample>(stack: &ConvStack, image: &Grid<T>) -> Result<(FeatureGrid, ConvTape)> {
    let tape = stack.forward(image)?;
    let features = tape.output_grid().cast::<f32>();
    Ok((features, tape))
}

/// Loads an externally produced feature map for `image`, checking that its
/// spatial size agrees with the declared stride.
pub fn load_external(path: &Path, stride: usize, image: &FeatureGrid) -> Result<FeatureGrid> {
    if stride == 0 {
        return Err(Error::Config("external feature stride must be positive".into()));
    }
    let features = fgt::load_fgt(path)?.into_f32();
    let ok = |n: usize, m: usize| m == n / stride || m == n.div_ceil(stride);
    if !ok(image.height(), features.height()) || !ok(image.width(), features.width()) {
        return Err(Error::ShapeMismatch(format!(
            "{}: {}x{} features do not match a {}x{} image at stride {stride}",
            path.display(),
            features.height(),
            features.width(),
            image.height(),
            image.width()
        )));
    }
    let s = stride as f64;
    let off = (s - 1.0) / 2.0;
    let o = image.origin();
    Ok(features.with_origin([(o[0] + off) / s, (o[1] + off) / s]))
}

const CHECKPOINT_MAGIC: &str = "iclk-checkpoint 1";
const HEADER_END: &str = "end_header";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    layers: Vec<LayerShape>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

/// A conv stack plus free-form metadata (training step, losses, ...).
///
/// File layout: the line `iclk-checkpoint 1`, a TOML header listing the
/// layer shapes and a `[meta]` table of string key-values, the line
/// `end_header`, then per layer two float64 FGT1 payloads: weights as
/// `(out*in) x k x k` and biases as `out x 1 x 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stack: ConvStack,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = CheckpointHeader {
            layers: self.stack.shapes(),
            meta: self.meta.clone(),
        };
        let text = toml::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
        let io = |e| Error::Format(format!("writing checkpoint: {e}"));
        writeln!(w, "{CHECKPOINT_MAGIC}").map_err(io)?;
        w.write_all(text.as_bytes()).map_err(io)?;
        writeln!(w, "{HEADER_END}").map_err(io)?;
        for l in self.stack.layers() {
            let s = &l.shape;
            let weights = Grid::<f64>::new(
                s.out_channels * s.in_channels,
                s.kernel,
                s.kernel,
                l.weights.clone(),
            )?;
            let bias = Grid::<f64>::new(s.out_channels, 1, 1, l.bias.clone())?;
            fgt::write_fgt(&mut w, &weights).map_err(io)?;
            fgt::write_fgt(&mut w, &bias).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self> {
        let mut line = String::new();
        let io = |e| Error::Format(format!("reading checkpoint: {e}"));
        r.read_line(&mut line).map_err(io)?;
        if line.trim_end() != CHECKPOINT_MAGIC {
            return Err(Error::Format("not an iclk checkpoint".into()));
        }
        let mut text = String::new();
        loop {
            line.clear();
            if r.read_line(&mut line).map_err(io)? == 0 {
                return Err(Error::Format("checkpoint header is not terminated".into()));
            }
            if line.trim_end() == HEADER_END {
                break;
            }
            text.push_str(&line);
        }
        let header: CheckpointHeader =
            toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        let mut layers = Vec::with_capacity(header.layers.len());
        for s in header.layers {
            let weights = read_f64_payload(&mut r)?;
            let bias = read_f64_payload(&mut r)?;
            if weights.shape() != (s.out_channels * s.in_channels, s.kernel, s.kernel)
                || bias.shape() != (s.out_channels, 1, 1)
            {
                return Err(Error::Format("checkpoint payload does not match its header".into()));
            }
            layers.push(ConvLayer {
                shape: s,
                weights: weights.into_f64().into_data(),
                bias: bias.into_f64().into_data(),
            });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(io)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint payloads".into()));
        }
        Ok(Checkpoint {
            stack: ConvStack::new(layers)?,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file))
    }
}

fn read_f64_payload<R: Read>(r: R) -> Result<AnyGrid> {
    match fgt::read_fgt(r)? {
        g @ AnyGrid::F64(_) => Ok(g),
        AnyGrid::F32(_) => Err(Error::Format("checkpoint payloads must be float64".into())),
    }
}
