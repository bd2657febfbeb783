//! VGG-family convolutional backbone with named taps.
//!
//! Layers are named `conv{block}_{i}`, `relu{block}_{i}` and `pool{block}`.
//! Taps read post-activation outputs. Channel widths can be divided by
//! `width_divisor` to get a small seeded backbone for tests and fixtures.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{ImageTensor, Level};
use crate::error::{Error, Result};
use crate::nn::{self, Conv3x3};
use crate::transforms;

/// Environment variable naming the directory relative weight paths resolve against.
pub const WEIGHTS_DIR_ENV: &str = "STYLEFENCE_WEIGHTS_DIR";

const BASE_CHANNELS: [usize; 5] = [64, 128, 256, 512, 512];
const WEIGHTS_MAGIC: &[u8; 4] = b"SFWB";
const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightsSource {
    /// He-normal weights drawn from a seeded generator.
    Random { seed: u64 },
    /// Standalone weights file written by [`Backbone::save_weights`].
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TapLayers {
    pub low: String,
    pub mid: String,
    pub high: String,
}

impl Default for TapLayers {
    fn default() -> Self {
        Self {
            low: "relu2_2".into(),
            mid: "relu4_4".into(),
            high: "relu5_4".into(),
        }
    }
}

impl TapLayers {
    pub fn get(&self, level: Level) -> &str {
        match level {
            Level::Low => &self.low,
            Level::Mid => &self.mid,
            Level::High => &self.high,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub architecture: String,
    #[serde(default = "one")]
    pub width_divisor: usize,
    #[serde(default)]
    pub tap_layers: TapLayers,
    pub weights_source: WeightsSource,
    pub input_size: usize,
    #[serde(default)]
    pub normalization: Normalization,
}

fn one() -> usize {
    1
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            architecture: "vgg19".into(),
            width_divisor: 1,
            tap_layers: TapLayers::default(),
            weights_source: WeightsSource::Random { seed: 0 },
            input_size: 224,
            normalization: Normalization::default(),
        }
    }
}

impl BackboneSpec {
    /// Narrow VGG-19 (channels / 8) on 64x64 inputs with seeded weights.
    pub fn small(seed: u64) -> Self {
        Self {
            width_divisor: 8,
            input_size: 64,
            weights_source: WeightsSource::Random { seed },
            ..Self::default()
        }
    }

    pub fn block_layout(&self) -> Result<Vec<usize>> {
        match self.architecture.as_str() {
            "vgg19" => Ok(vec![2, 2, 4, 4, 4]),
            "vgg16" => Ok(vec![2, 2, 3, 3, 3]),
            "vgg11" => Ok(vec![1, 1, 2, 2, 2]),
            other => Err(Error::Config(format!("unsupported backbone architecture `{other}`"))),
        }
    }

    pub fn channels(&self, block: usize) -> usize {
        (BASE_CHANNELS[block - 1] / self.width_divisor.max(1)).max(1)
    }

    /// Short identifier recorded in fingerprints and checkpoints.
    pub fn tag(&self) -> String {
        format!(
            "{}-w{}-{}px-{}.{}.{}-postact",
            self.architecture,
            self.width_divisor,
            self.input_size,
            self.tap_layers.low,
            self.tap_layers.mid,
            self.tap_layers.high
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OpKind {
    Conv { block: usize, index: usize },
    Relu,
    Pool,
}

#[derive(Debug, Clone)]
struct Op {
    kind: OpKind,
    name: String,
    block: usize,
}

fn build_ops(layout: &[usize]) -> Vec<Op> {
    let mut ops = Vec::new();
    for (b, &n) in layout.iter().enumerate() {
        let block = b + 1;
        for i in 0..n {
            ops.push(Op {
                kind: OpKind::Conv { block, index: i },
                name: format!("conv{block}_{}", i + 1),
                block,
            });
            ops.push(Op {
                kind: OpKind::Relu,
                name: format!("relu{block}_{}", i + 1),
                block,
            });
        }
        ops.push(Op {
            kind: OpKind::Pool,
            name: format!("pool{block}"),
            block,
        });
    }
    ops
}

/// Backbone activations computed once for the frozen layers.
#[derive(Debug, Clone)]
pub struct PrefixCache {
    /// Input to the first trainable layer (or last computed activation).
    pub activation: Array3<f64>,
    /// Taps that lie inside the frozen prefix.
    pub taps: [Option<Array3<f64>>; 3],
}

#[derive(Debug)]
enum TapeEntry {
    Conv { cols: ndarray::Array2<f64> },
    Relu { out: Array3<f64> },
    Pool { input_dim: (usize, usize, usize), arg: Vec<usize> },
}

/// Recorded activations of the trainable suffix, consumed by the backward pass.
#[derive(Debug)]
pub struct SuffixTape {
    entries: Vec<TapeEntry>,
}

/// Gradients for the trainable conv layers, keyed like [`Backbone::convs`].
#[derive(Debug, Clone)]
pub struct BackboneGrads {
    pub convs: Vec<Vec<Conv3x3>>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    spec: BackboneSpec,
    /// `convs[block - 1][i]`.
    convs: Vec<Vec<Conv3x3>>,
    ops: Vec<Op>,
    /// Op indices of the low/mid/high taps.
    taps: [usize; 3],
}

impl Backbone {
    /// Builds the backbone and loads or draws its weights.
    pub fn build(spec: &BackboneSpec) -> Result<Self> {
        let mut bb = Self::skeleton(spec)?;
        match &spec.weights_source {
            WeightsSource::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let layout = spec.block_layout()?;
                let mut in_ch = 3;
                bb.convs = layout
                    .iter()
                    .enumerate()
                    .map(|(b, &n)| {
                        let out = spec.channels(b + 1);
                        (0..n)
                            .map(|_| {
                                let conv = Conv3x3::init(out, in_ch, &mut rng);
                                in_ch = out;
                                conv
                            })
                            .collect()
                    })
                    .collect();
            }
            WeightsSource::File { path } => {
                let path = resolve_weights_path(path);
                bb.convs = read_weights(&path, spec)?;
            }
        }
        Ok(bb)
    }

    fn skeleton(spec: &BackboneSpec) -> Result<Self> {
        if spec.input_size < 32 {
            return Err(Error::Config(format!(
                "input_size {} is too small for five pooling stages",
                spec.input_size
            )));
        }
        if spec.normalization.std.iter().any(|s| *s <= 0.0) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        let layout = spec.block_layout()?;
        let ops = build_ops(&layout);
        let mut taps = [0; 3];
        for (slot, level) in Level::ALL.into_iter().enumerate() {
            let name = spec.tap_layers.get(level);
            taps[slot] = ops.iter().position(|o| o.name == name).ok_or_else(|| {
                Error::Config(format!(
                    "tap layer `{name}` ({}) does not exist in {}",
                    level.as_str(),
                    spec.architecture
                ))
            })?;
            if matches!(ops[taps[slot]].kind, OpKind::Conv { .. }) {
                return Err(Error::Config(format!(
                    "tap layer `{name}` must be an activation or pooling output"
                )));
            }
        }
        if !(taps[0] < taps[1] && taps[1] < taps[2]) {
            return Err(Error::Config(format!(
                "tap layers must be strictly ordered by depth (low < mid < high), got {:?}",
                spec.tap_layers
            )));
        }
        Ok(Self {
            spec: spec.clone(),
            convs: Vec::new(),
            ops,
            taps,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn convs(&self) -> &[Vec<Conv3x3>] {
        &self.convs
    }

    pub fn convs_mut(&mut self) -> &mut [Vec<Conv3x3>] {
        &mut self.convs
    }

    /// Zeroed gradients for blocks `>= from_block`; frozen blocks get empty lists.
    pub fn zero_grads(&self, from_block: Option<usize>) -> BackboneGrads {
        BackboneGrads {
            convs: self
                .convs
                .iter()
                .enumerate()
                .map(|(b, layers)| match from_block {
                    Some(from) if b + 1 >= from => layers.iter().map(Conv3x3::zeros_like).collect(),
                    _ => Vec::new(),
                })
                .collect(),
        }
    }

    /// Channel count of each tap.
    pub fn tap_channels(&self) -> [usize; 3] {
        self.taps.map(|t| self.spec.channels(self.ops[t].block))
    }

    /// Block number containing each tap.
    pub fn tap_blocks(&self) -> [usize; 3] {
        self.taps.map(|t| self.ops[t].block)
    }

    pub fn tap_names(&self) -> [String; 3] {
        self.taps.map(|t| self.ops[t].name.clone())
    }

    /// Resizes, center-crops and normalizes into a `(3, S, S)` tensor.
    pub fn preprocess(&self, image: &ImageTensor) -> Array3<f64> {
        let s = self.spec.input_size;
        let img = transforms::resize_center_crop(image, s);
        let norm = &self.spec.normalization;
        Array3::from_shape_fn((3, s, s), |(c, y, x)| {
            (f64::from(img.get(y, x, c)) - norm.mean[c]) / norm.std[c]
        })
    }

    /// Op index where the trainable suffix begins for blocks `>= from_block`.
    pub fn split_index(&self, from_block: Option<usize>) -> usize {
        let end = self.taps[2] + 1;
        match from_block {
            None => end,
            Some(block) => self
                .ops
                .iter()
                .position(|o| o.block >= block)
                .unwrap_or(end)
                .min(end),
        }
    }

    fn apply(&self, op: &Op, x: &Array3<f64>) -> (Array3<f64>, TapeEntry) {
        match op.kind {
            OpKind::Conv { block, index } => {
                let (out, cols) = self.convs[block - 1][index].forward(x);
                (out, TapeEntry::Conv { cols })
            }
            OpKind::Relu => {
                let out = nn::relu(x);
                (out.clone(), TapeEntry::Relu { out })
            }
            OpKind::Pool => {
                let (out, arg) = nn::maxpool2(x);
                (out, TapeEntry::Pool { input_dim: x.dim(), arg })
            }
        }
    }

    fn apply_inference(&self, op: &Op, x: Array3<f64>) -> Array3<f64> {
        match op.kind {
            OpKind::Conv { block, index } => self.convs[block - 1][index].forward(&x).0,
            OpKind::Relu => x.mapv_into(|v| v.max(0.0)),
            OpKind::Pool => nn::maxpool2(&x).0,
        }
    }

    /// Runs ops `[0, split)` on a preprocessed input.
    pub fn run_prefix(&self, input: Array3<f64>, split: usize) -> PrefixCache {
        let mut taps: [Option<Array3<f64>>; 3] = [None, None, None];
        let mut x = input;
        for (i, op) in self.ops[..split].iter().enumerate() {
            x = self.apply_inference(op, x);
            if let Some(slot) = self.taps.iter().position(|&t| t == i) {
                taps[slot] = Some(x.clone());
            }
        }
        PrefixCache { activation: x, taps }
    }

    /// Runs ops `[split, high tap]` and records what the backward pass needs.
    pub fn run_suffix(&self, cache: &PrefixCache, split: usize) -> ([Array3<f64>; 3], SuffixTape) {
        let mut taps = cache.taps.clone();
        let mut entries = Vec::new();
        let mut x = cache.activation.clone();
        for i in split..=self.taps[2] {
            let (out, entry) = self.apply(&self.ops[i], &x);
            entries.push(entry);
            x = out;
            if let Some(slot) = self.taps.iter().position(|&t| t == i) {
                taps[slot] = Some(x.clone());
            }
        }
        let taps = taps.map(|t| t.expect("every tap is computed by prefix or suffix"));
        (taps, SuffixTape { entries })
    }

    /// Inference forward returning the three tap maps.
    pub fn forward_taps(&self, input: Array3<f64>) -> [Array3<f64>; 3] {
        let end = self.taps[2] + 1;
        let cache = self.run_prefix(input, end);
        cache.taps.map(|t| t.expect("all taps lie before the end"))
    }

    /// Backpropagates tap gradients through the trainable suffix.
    pub fn backward_suffix(
        &self,
        tape: &SuffixTape,
        split: usize,
        mut tap_grads: [Option<Array3<f64>>; 3],
        grads: &mut BackboneGrads,
    ) {
        let last = self.taps[2];
        let mut g: Option<Array3<f64>> = None;
        for i in (split..=last).rev() {
            if let Some(slot) = self.taps.iter().position(|&t| t == i) {
                if let Some(tg) = tap_grads[slot].take() {
                    g = Some(match g {
                        Some(acc) => acc + tg,
                        None => tg,
                    });
                }
            }
            let Some(gout) = g.take() else { continue };
            let need_input = i > split;
            g = match (&self.ops[i].kind, &tape.entries[i - split]) {
                (OpKind::Conv { block, index }, TapeEntry::Conv { cols }) => self.convs[block - 1]
                    [*index]
                    .backward(cols, &gout, &mut grads.convs[block - 1][*index], need_input),
                (OpKind::Relu, TapeEntry::Relu { out }) => Some(nn::relu_backward(out, &gout)),
                (OpKind::Pool, TapeEntry::Pool { input_dim, arg }) => {
                    Some(nn::maxpool2_backward(*input_dim, arg, &gout))
                }
                _ => unreachable!("tape entries mirror the op list"),
            };
        }
    }

    /// Writes every conv layer to a standalone little-endian weights file.
    pub fn save_weights(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        buf.extend_from_slice(WEIGHTS_MAGIC);
        buf.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        let layers: Vec<&Conv3x3> = self.convs.iter().flatten().collect();
        buf.extend_from_slice(&(layers.len() as u32).to_le_bytes());
        for conv in layers {
            buf.extend_from_slice(&(conv.out_channels() as u32).to_le_bytes());
            buf.extend_from_slice(&(conv.in_channels() as u32).to_le_bytes());
            for v in conv.weight.iter().chain(conv.bias.iter()) {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }
}

/// Relative paths are taken from the weights directory variable when it is set.
pub fn resolve_weights_path(path: &Path) -> PathBuf {
    if path.is_relative() {
        if let Some(dir) = std::env::var_os(WEIGHTS_DIR_ENV) {
            return PathBuf::from(dir).join(path);
        }
    }
    path.to_path_buf()
}

fn read_weights(path: &Path, spec: &BackboneSpec) -> Result<Vec<Vec<Conv3x3>>> {
    let fail = |message: String| Error::WeightsLoad {
        path: path.to_path_buf(),
        message,
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| fail(e.to_string()))?;
    let mut cursor = bytes.as_slice();
    let mut take = |n: usize| -> Result<&[u8]> {
        if cursor.len() < n {
            return Err(fail("file is truncated".into()));
        }
        let (head, rest) = cursor.split_at(n);
        cursor = rest;
        Ok(head)
    };
    if take(4)? != WEIGHTS_MAGIC {
        return Err(fail("not a backbone weights file (bad magic)".into()));
    }
    let read_u32 = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
    let version = read_u32(take(4)?);
    if version != WEIGHTS_VERSION {
        return Err(fail(format!("unsupported weights version {version}")));
    }
    let layout = spec.block_layout()?;
    let count = read_u32(take(4)?) as usize;
    let expected: usize = layout.iter().sum();
    if count != expected {
        return Err(fail(format!("file holds {count} conv layers, architecture needs {expected}")));
    }
    let mut in_ch = 3;
    let mut convs = Vec::new();
    for (b, &n) in layout.iter().enumerate() {
        let out_ch = spec.channels(b + 1);
        let mut block = Vec::new();
        for i in 0..n {
            let o = read_u32(take(4)?) as usize;
            let c = read_u32(take(4)?) as usize;
            if o != out_ch || c != in_ch {
                return Err(fail(format!(
                    "layer conv{}_{} has shape {o}x{c}, expected {out_ch}x{in_ch}",
                    b + 1,
                    i + 1
                )));
            }
            let n_vals = o * c * 9 + o;
            let raw = take(n_vals * 4)?;
            let vals: Vec<f64> = raw
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
                .collect();
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(fail("weights contain non-finite values".into()));
            }
            let weight = ndarray::Array2::from_shape_vec((o, c * 9), vals[..o * c * 9].to_vec())
                .expect("shape checked");
            let bias = ndarray::Array1::from_vec(vals[o * c * 9..].to_vec());
            block.push(Conv3x3 { weight, bias });
            in_ch = o;
        }
        convs.push(block);
    }
    if !cursor.is_empty() {
        return Err(fail("trailing bytes after the last layer".into()));
    }
    Ok(convs)
}
