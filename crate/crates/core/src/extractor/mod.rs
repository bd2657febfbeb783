//! Multi-layer attention style extractor.
//!
//! An image passes through the backbone; three taps (low, mid, high) are
//! each reduced by global average and max pooling, concatenated, and run
//! through a per-level 1x1 convolution to give the level encodings. The
//! encodings are projected to `embed_dim`, scored by a small perceptron,
//! softmax-weighted and summed into the style fingerprint.

pub mod backbone;
pub mod head;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use backbone::{
    resolve_weights_path, Backbone, BackboneSpec, Normalization, PrefixCache, TapLayers, WeightsSource, WEIGHTS_DIR_ENV,
};
pub use head::{attention_fuse_with, fuse, pool_encode, AttentionMlp, AttentionScorer, FusionHead, HeadTrace, LevelHead};

use crate::datamodel::{ImageTensor, Level, LevelEncoding, StyleFingerprint};
use crate::error::{Error, Result};
use crate::nn::Conv3x3;
use crate::optim::ParamSlot;

pub const EXTRACTOR_FORMAT: u32 = 1;

/// Which parameter groups receive gradient updates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainableMask {
    /// Backbone blocks with number `>=` this are fine-tuned; `None` freezes the backbone.
    pub backbone_from_block: Option<usize>,
    pub level_convs: bool,
    pub projections: bool,
    pub attention: bool,
}

impl TrainableMask {
    /// Heads trainable, backbone blocks deeper than the mid tap trainable.
    pub fn default_for(backbone: &Backbone) -> Self {
        let [_, mid, high] = backbone.tap_blocks();
        Self {
            backbone_from_block: (mid < high).then_some(mid + 1),
            level_convs: true,
            projections: true,
            attention: true,
        }
    }

    pub fn frozen_backbone() -> Self {
        Self {
            backbone_from_block: None,
            level_convs: true,
            projections: true,
            attention: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorConfig {
    pub backbone: BackboneSpec,
    pub embed_dim: usize,
    pub attention_hidden: usize,
    /// Seed for the head's initial weights.
    pub seed: u64,
    /// Defaults to [`TrainableMask::default_for`] when absent.
    #[serde(default)]
    pub trainable: Option<TrainableMask>,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneSpec::default(),
            embed_dim: 512,
            attention_hidden: head::ATTENTION_HIDDEN,
            seed: 0,
            trainable: None,
        }
    }
}

/// A backbone tap output.
#[derive(Debug, Clone, PartialEq)]
pub struct TapFeature {
    pub level: Level,
    pub layer: String,
    pub map: Array3<f64>,
}

/// Backbone plus fusion head, ready for inference or training.
#[derive(Debug, Clone)]
pub struct ExtractorParams {
    config: ExtractorConfig,
    backbone: Backbone,
    pub head: FusionHead,
    mask: TrainableMask,
}

/// Serializable form: configuration, head weights, and only the backbone
/// layers that were fine-tuned (frozen layers are re-derived from the
/// weights source).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorState {
    pub format: u32,
    pub version: String,
    pub config: ExtractorConfig,
    pub mask: TrainableMask,
    pub head: FusionHead,
    pub tuned_layers: Vec<TunedLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TunedLayer {
    pub block: usize,
    pub index: usize,
    pub conv: Conv3x3,
}

/// Gradients mirroring [`ExtractorParams`].
#[derive(Debug, Clone)]
pub struct ExtractorGrads {
    pub backbone: backbone::BackboneGrads,
    pub head: FusionHead,
}

/// Per-sample forward record used by the training loop.
#[derive(Debug)]
pub struct TrainForward {
    pub trace: HeadTrace,
    tape: backbone::SuffixTape,
}

impl ExtractorParams {
    pub fn new(config: ExtractorConfig) -> Result<Self> {
        if config.embed_dim == 0 || config.attention_hidden == 0 {
            return Err(Error::Config("embed_dim and attention_hidden must be positive".into()));
        }
        let backbone = Backbone::build(&config.backbone)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let head = FusionHead::init(
            &backbone.tap_channels(),
            config.embed_dim,
            config.attention_hidden,
            &mut rng,
        );
        let mask = config
            .trainable
            .clone()
            .unwrap_or_else(|| TrainableMask::default_for(&backbone));
        Ok(Self {
            config,
            backbone,
            head,
            mask,
        })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn mask(&self) -> &TrainableMask {
        &self.mask
    }

    pub fn embed_dim(&self) -> usize {
        self.head.embed_dim()
    }

    pub fn version(&self) -> String {
        format!(
            "stylefence-extractor/{EXTRACTOR_FORMAT} {} d{}",
            self.backbone.spec().tag(),
            self.embed_dim()
        )
    }

    /// Raw tap maps for `image`, tagged low/mid/high.
    pub fn tap_features(&self, image: &ImageTensor) -> Vec<TapFeature> {
        let taps = self.backbone.forward_taps(self.backbone.preprocess(image));
        let names = self.backbone.tap_names();
        taps.into_iter()
            .zip(names)
            .zip(Level::ALL)
            .map(|((map, layer), level)| TapFeature { level, layer, map })
            .collect()
    }

    pub fn level_encodings(&self, image: &ImageTensor) -> Result<Vec<LevelEncoding>> {
        self.tap_features(image)
            .iter()
            .zip(&self.head.levels)
            .map(|(t, h)| pool_encode(t.level, &t.layer, &t.map, &h.conv))
            .collect()
    }

    /// Fuses three level encodings with the learned attention perceptron.
    pub fn attention_fuse(&self, image_id: &str, encodings: &[LevelEncoding]) -> Result<StyleFingerprint> {
        let (alpha, v, _) = attention_fuse_with(encodings, &self.head.levels, &self.head.attention)?;
        StyleFingerprint::new(image_id, self.version(), v.to_vec(), alpha)
    }

    pub fn extract_fingerprint(&self, image_id: &str, image: &ImageTensor) -> Result<StyleFingerprint> {
        let encodings = self.level_encodings(image)?;
        self.attention_fuse(image_id, &encodings)
    }

    /// Extracts a batch in parallel; results are in input order.
    pub fn extract_batch(&self, images: &[(String, ImageTensor)]) -> Result<Vec<StyleFingerprint>> {
        images
            .par_iter()
            .map(|(id, img)| self.extract_fingerprint(id, img))
            .collect()
    }

    /// Op index where the trainable backbone suffix begins.
    pub fn split_index(&self) -> usize {
        self.backbone.split_index(self.mask.backbone_from_block)
    }

    /// Frozen-prefix activations; valid for the lifetime of a training run.
    pub fn prefix(&self, image: &ImageTensor) -> PrefixCache {
        self.backbone
            .run_prefix(self.backbone.preprocess(image), self.split_index())
    }

    pub fn forward_train(&self, cache: &PrefixCache) -> Result<TrainForward> {
        let (taps, tape) = self.backbone.run_suffix(cache, self.split_index());
        let maps: Vec<&Array3<f64>> = taps.iter().collect();
        let trace = self.head.forward(&maps)?;
        Ok(TrainForward { trace, tape })
    }

    pub fn zero_grads(&self) -> ExtractorGrads {
        ExtractorGrads {
            backbone: self.backbone.zero_grads(self.mask.backbone_from_block),
            head: self.head.zeros_like(),
        }
    }

    /// Accumulates gradients for `dL/dv = gv`.
    pub fn backward_train(&self, fwd: &TrainForward, gv: &ndarray::Array1<f64>, grads: &mut ExtractorGrads) {
        let split = self.split_index();
        let tap_blocks = self.backbone.tap_blocks();
        let tuned = |block: usize| self.mask.backbone_from_block.is_some_and(|b| block >= b);
        let map_grad: Vec<bool> = tap_blocks.iter().map(|&b| tuned(b)).collect();
        let tap_grads = self.head.backward(&fwd.trace, gv, &mut grads.head, &map_grad);
        if map_grad.iter().any(|&g| g) {
            let tg: [Option<Array3<f64>>; 3] = [
                tap_grads[0].clone(),
                tap_grads[1].clone(),
                tap_grads[2].clone(),
            ];
            self.backbone
                .backward_suffix(&fwd.tape, split, tg, &mut grads.backbone);
        }
    }

    /// Trainable tensors in a fixed order.
    pub fn param_slots(&mut self) -> Vec<ParamSlot<'_>> {
        let mask = self.mask.clone();
        collect_slots(&mut self.head, self.backbone.convs_mut(), &mask)
    }

    pub fn to_state(&self) -> ExtractorState {
        let tuned_layers = match self.mask.backbone_from_block {
            None => Vec::new(),
            Some(from) => self
                .backbone
                .convs()
                .iter()
                .enumerate()
                .filter(|(b, _)| b + 1 >= from)
                .flat_map(|(b, layers)| {
                    layers.iter().enumerate().map(move |(i, conv)| TunedLayer {
                        block: b + 1,
                        index: i,
                        conv: conv.clone(),
                    })
                })
                .collect(),
        };
        ExtractorState {
            format: EXTRACTOR_FORMAT,
            version: self.version(),
            config: self.config.clone(),
            mask: self.mask.clone(),
            head: self.head.clone(),
            tuned_layers,
        }
    }

    pub fn from_state(state: ExtractorState) -> Result<Self> {
        if state.format != EXTRACTOR_FORMAT {
            return Err(Error::Config(format!(
                "extractor state format {} is not supported",
                state.format
            )));
        }
        let mut params = Self::new(state.config)?;
        if state.head.levels.len() != 3 {
            return Err(Error::dim("head levels", 3, state.head.levels.len()));
        }
        state.head.validate()?;
        for (level, (&c, lh)) in params
            .backbone
            .tap_channels()
            .iter()
            .zip(&state.head.levels)
            .enumerate()
        {
            if lh.conv.in_dim() != 2 * c {
                return Err(Error::dim(format!("level {level} conv input"), 2 * c, lh.conv.in_dim()));
            }
        }
        params.head = state.head;
        params.mask = state.mask;
        for t in state.tuned_layers {
            let slot = params
                .backbone
                .convs_mut()
                .get_mut(t.block.wrapping_sub(1))
                .and_then(|b| b.get_mut(t.index))
                .ok_or_else(|| Error::Config(format!("no backbone layer conv{}_{}", t.block, t.index + 1)))?;
            if slot.weight.dim() != t.conv.weight.dim() || slot.bias.len() != t.conv.bias.len() {
                return Err(Error::Config(format!(
                    "fine-tuned layer conv{}_{} has the wrong shape",
                    t.block,
                    t.index + 1
                )));
            }
            *slot = t.conv;
        }
        if params.version() != state.version {
            return Err(Error::Config(format!(
                "extractor version mismatch: stored `{}`, rebuilt `{}`",
                state.version,
                params.version()
            )));
        }
        Ok(params)
    }
}

impl ExtractorGrads {
    pub fn slots<'a>(&'a mut self, mask: &TrainableMask) -> Vec<ParamSlot<'a>> {
        collect_slots(&mut self.head, &mut self.backbone.convs, mask)
    }

    pub fn add(&mut self, other: &ExtractorGrads) {
        fn add_linear(a: &mut crate::nn::Linear, b: &crate::nn::Linear) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
        for (a, b) in self.head.levels.iter_mut().zip(&other.head.levels) {
            add_linear(&mut a.conv, &b.conv);
            add_linear(&mut a.projection, &b.projection);
        }
        add_linear(&mut self.head.attention.hidden, &other.head.attention.hidden);
        add_linear(&mut self.head.attention.out, &other.head.attention.out);
        for (ba, bb) in self.backbone.convs.iter_mut().zip(&other.backbone.convs) {
            for (a, b) in ba.iter_mut().zip(bb) {
                a.weight += &b.weight;
                a.bias += &b.bias;
            }
        }
    }
}

fn collect_slots<'a>(
    head: &'a mut FusionHead,
    convs: &'a mut [Vec<Conv3x3>],
    mask: &TrainableMask,
) -> Vec<ParamSlot<'a>> {
    fn push<'a>(out: &mut Vec<ParamSlot<'a>>, w: &'a mut ndarray::Array2<f64>, b: &'a mut ndarray::Array1<f64>) {
        out.push(ParamSlot::new(w.as_slice_mut().expect("standard layout"), true));
        out.push(ParamSlot::new(b.as_slice_mut().expect("standard layout"), false));
    }
    let mut out = Vec::new();
    for level in &mut head.levels {
        if mask.level_convs {
            push(&mut out, &mut level.conv.weight, &mut level.conv.bias);
        }
        if mask.projections {
            push(&mut out, &mut level.projection.weight, &mut level.projection.bias);
        }
    }
    if mask.attention {
        let att = &mut head.attention;
        push(&mut out, &mut att.hidden.weight, &mut att.hidden.bias);
        push(&mut out, &mut att.out.weight, &mut att.out.bias);
    }
    if let Some(from) = mask.backbone_from_block {
        for (b, block) in convs.iter_mut().enumerate() {
            if b + 1 < from {
                continue;
            }
            for conv in block {
                push(&mut out, &mut conv.weight, &mut conv.bias);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ExtractorConfig {
        ExtractorConfig {
            backbone: BackboneSpec {
                width_divisor: 16,
                input_size: 32,
                ..BackboneSpec::small(13)
            },
            embed_dim: 8,
            attention_hidden: 6,
            seed: 2,
            trainable: None,
        }
    }

    fn image(seed: u32) -> ImageTensor {
        ImageTensor::from_fn(40, 36, |y, x| {
            let t = (y * 7 + x * 3 + seed as usize) as f32;
            [(t * 0.013).sin() * 0.5 + 0.5, (t * 0.021).cos() * 0.5 + 0.5, 0.4]
        })
        .unwrap()
    }

    #[test]
    fn extraction_is_deterministic_and_versioned() {
        let ex = ExtractorParams::new(tiny_config()).unwrap();
        let a = ex.extract_fingerprint("a", &image(1)).unwrap();
        let b = ex.extract_fingerprint("a", &image(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.vector.len(), 8);
        assert_eq!(a.attention.len(), 3);
        assert!(a.extractor_version.contains("postact"));
    }

    #[test]
    fn batch_matches_single() {
        let ex = ExtractorParams::new(tiny_config()).unwrap();
        let batch: Vec<(String, ImageTensor)> = (0..4).map(|i| (format!("i{i}"), image(i))).collect();
        let fps = ex.extract_batch(&batch).unwrap();
        for ((id, img), fp) in batch.iter().zip(&fps) {
            let single = ex.extract_fingerprint(id, img).unwrap();
            for (x, y) in single.vector.iter().zip(&fp.vector) {
                assert!((x - y).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn training_forward_matches_inference() {
        let ex = ExtractorParams::new(tiny_config()).unwrap();
        let img = image(3);
        let fwd = ex.forward_train(&ex.prefix(&img)).unwrap();
        let fp = ex.extract_fingerprint("x", &img).unwrap();
        assert_eq!(fwd.trace.v.to_vec(), fp.vector);
    }

    #[test]
    fn default_mask_tunes_block_five() {
        let ex = ExtractorParams::new(tiny_config()).unwrap();
        assert_eq!(ex.mask().backbone_from_block, Some(5));
        let state = ex.to_state();
        assert_eq!(state.tuned_layers.len(), 4);
        let back = ExtractorParams::from_state(state.clone()).unwrap();
        assert_eq!(back.to_state(), state);
    }

    #[test]
    fn state_with_foreign_head_is_rejected() {
        let ex = ExtractorParams::new(tiny_config()).unwrap();
        let mut state = ex.to_state();
        state.head.levels.pop();
        assert!(ExtractorParams::from_state(state).is_err());
    }
}
