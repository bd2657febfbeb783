//! Joint minibatch training of the feature model, projection and center.

use ndarray::{Array1, Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{self, LossWeights};
use super::sampler::BalancedSampler;
use crate::datamodel::{Label, VerifierParams};
use crate::error::{Error, Result};
use crate::extractor::{ExtractorGrads, ExtractorParams, PrefixCache, TrainForward};
use crate::nn::{outer_add, t_dot};
use crate::optim::{AdamW, AdamWConfig, ParamSlot};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollapseGuard {
    pub enabled: bool,
    /// Absolute floor on the epoch's mean positive distance.
    pub min_positive_distance: f64,
    /// Collapse is also declared when the mean distances of both classes,
    /// averaged over the last `window` epochs, fall below this fraction of
    /// their peak so far: negatives are being drawn in with the positives.
    pub contraction_ratio: f64,
    pub window: usize,
}

impl Default for CollapseGuard {
    fn default() -> Self {
        Self {
            enabled: true,
            min_positive_distance: 1e-6,
            contraction_ratio: 0.5,
            window: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_pos: f64,
    pub lambda_neg: f64,
    pub beta: f64,
    pub margin: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub weighted_sampling: bool,
    /// Output size of the projection.
    pub projection_dim: usize,
    /// Learning-rate multiplier for the center.
    pub center_lr_scale: f64,
    pub collapse_guard: CollapseGuard,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            optimizer: AdamWConfig::default(),
            epochs: 50,
            batch_size: 32,
            lambda_pos: 1.0,
            lambda_neg: 1.0,
            beta: 0.3,
            margin: 1.0,
            epsilon: 1e-6,
            seed: 0,
            weighted_sampling: true,
            projection_dim: super::PROJECTION_DIM,
            center_lr_scale: 1.0,
            collapse_guard: CollapseGuard::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.learning_rate,
            self.lambda_pos,
            self.lambda_neg,
            self.beta,
            self.margin,
            self.epsilon,
            self.center_lr_scale,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("training hyperparameters must be finite".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.beta <= 0.0 || self.epsilon <= 0.0 {
            return Err(Error::Config("beta and epsilon must be > 0".into()));
        }
        if self.lambda_pos < 0.0 || self.lambda_neg < 0.0 || self.margin < 0.0 {
            return Err(Error::Config("loss weights and margin must be >= 0".into()));
        }
        if self.batch_size == 0 || self.projection_dim == 0 {
            return Err(Error::Config("batch_size and projection_dim must be > 0".into()));
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_pos: self.lambda_pos,
            lambda_neg: self.lambda_neg,
            margin: self.margin,
            beta: self.beta,
            epsilon: self.epsilon,
        }
    }
}

/// Per-epoch means over all minibatches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochStats {
    pub epoch: usize,
    pub total_loss: f64,
    pub pos_loss: f64,
    pub neg_loss: f64,
    pub mean_pos_distance: f64,
    pub mean_neg_distance: f64,
}

/// Class mean distances right after center initialization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceDistances {
    pub mean_pos: f64,
    pub mean_neg: f64,
}

/// Everything that persists across epochs besides the feature model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOutcome {
    pub verifier: VerifierParams,
    pub optimizer: AdamW,
    pub history: Vec<EpochStats>,
    pub reference: Option<ReferenceDistances>,
}

impl TrainOutcome {
    pub fn new(verifier: VerifierParams, config: &TrainConfig) -> Self {
        Self {
            verifier,
            optimizer: AdamW::new(config.optimizer.clone()),
            history: Vec::new(),
            reference: None,
        }
    }

    pub fn epochs_completed(&self) -> usize {
        self.history.len()
    }
}

/// Source of fingerprints `v` with optional trainable parameters behind them.
pub trait FeatureModel: Sync {
    type Tape: Send;
    type Grads: Send;

    fn len(&self) -> usize;
    fn forward(&self, index: usize) -> Result<(Array1<f64>, Self::Tape)>;
    fn zero_grads(&self) -> Self::Grads;
    fn backward(&self, tape: &Self::Tape, gv: &Array1<f64>, grads: &mut Self::Grads);
    fn accumulate(total: &mut Self::Grads, part: &Self::Grads);
    /// Parameter slots and matching gradient slices, in a fixed order.
    fn slots<'a>(&'a mut self, grads: &'a mut Self::Grads) -> (Vec<ParamSlot<'a>>, Vec<&'a [f64]>);
}

/// Precomputed fingerprints; only the projection and center train.
#[derive(Debug, Clone)]
pub struct FixedFeatures(pub Vec<Array1<f64>>);

impl FeatureModel for FixedFeatures {
    type Tape = ();
    type Grads = ();

    fn len(&self) -> usize {
        self.0.len()
    }

    fn forward(&self, index: usize) -> Result<(Array1<f64>, ())> {
        Ok((self.0[index].clone(), ()))
    }

    fn zero_grads(&self) {}

    fn backward(&self, _: &(), _: &Array1<f64>, _: &mut ()) {}

    fn accumulate(_: &mut (), _: &()) {}

    fn slots<'a>(&'a mut self, _: &'a mut ()) -> (Vec<ParamSlot<'a>>, Vec<&'a [f64]>) {
        (Vec::new(), Vec::new())
    }
}

/// Extracts fingerprints online through the trainable part of the extractor.
/// Frozen backbone activations are computed once up front.
#[derive(Debug)]
pub struct OnlineExtractor {
    pub params: ExtractorParams,
    caches: Vec<PrefixCache>,
}

impl OnlineExtractor {
    pub fn new(params: ExtractorParams, images: &[crate::datamodel::ImageTensor]) -> Self {
        let caches = images.par_iter().map(|img| params.prefix(img)).collect();
        Self { params, caches }
    }

    pub fn into_params(self) -> ExtractorParams {
        self.params
    }
}

impl FeatureModel for OnlineExtractor {
    type Tape = TrainForward;
    type Grads = ExtractorGrads;

    fn len(&self) -> usize {
        self.caches.len()
    }

    fn forward(&self, index: usize) -> Result<(Array1<f64>, TrainForward)> {
        let fwd = self.params.forward_train(&self.caches[index])?;
        Ok((fwd.trace.v.clone(), fwd))
    }

    fn zero_grads(&self) -> ExtractorGrads {
        self.params.zero_grads()
    }

    fn backward(&self, tape: &TrainForward, gv: &Array1<f64>, grads: &mut ExtractorGrads) {
        self.params.backward_train(tape, gv, grads);
    }

    fn accumulate(total: &mut ExtractorGrads, part: &ExtractorGrads) {
        total.add(part);
    }

    fn slots<'a>(&'a mut self, grads: &'a mut ExtractorGrads) -> (Vec<ParamSlot<'a>>, Vec<&'a [f64]>) {
        let mask = self.params.mask().clone();
        let g = grads.slots(&mask).into_iter().map(|s| &*s.data).collect();
        (self.params.param_slots(), g)
    }
}

/// Distance-space quantities for one sample.
struct Projected {
    z_minus_o: Array1<f64>,
    d: f64,
    s: f64,
}

fn project(v: &Array1<f64>, verifier: &VerifierParams) -> Projected {
    let mut z = verifier.projection.weight.dot(v);
    z -= &ArrayView1::from(&verifier.center[..]);
    let d2 = z.dot(&z);
    Projected {
        d: d2.sqrt(),
        s: (d2 + 1.0).sqrt(),
        z_minus_o: z,
    }
}

/// Sets the center to the mean projected positive fingerprint and returns
/// the resulting class mean distances.
pub fn init_center<M: FeatureModel>(
    model: &M,
    labels: &[Label],
    verifier: &mut VerifierParams,
) -> Result<ReferenceDistances> {
    let vs: Vec<Array1<f64>> = (0..model.len())
        .into_par_iter()
        .map(|i| model.forward(i).map(|(v, _)| v))
        .collect::<Result<_>>()?;
    let dim = verifier.projection.weight.nrows();
    let mut center = Array1::zeros(dim);
    let mut n_pos = 0usize;
    for (v, l) in vs.iter().zip(labels) {
        if *l == Label::Positive {
            center += &verifier.projection.weight.dot(v);
            n_pos += 1;
        }
    }
    if n_pos == 0 {
        return Err(Error::Precondition("center initialization needs positives".into()));
    }
    center /= n_pos as f64;
    verifier.center = center.to_vec();
    let (mut sp, mut sn, mut nn) = (0.0, 0.0, 0usize);
    for (v, l) in vs.iter().zip(labels) {
        let d = project(v, verifier).d;
        match l {
            Label::Positive => sp += d,
            Label::Negative => {
                sn += d;
                nn += 1;
            }
        }
    }
    Ok(ReferenceDistances {
        mean_pos: sp / n_pos as f64,
        mean_neg: if nn > 0 { sn / nn as f64 } else { 0.0 },
    })
}

/// Samples per gradient-accumulation group. Fixed so that the summation
/// order, and hence the result, does not depend on the thread count.
const GROUP: usize = 8;

struct GroupResult<G> {
    /// `(label, distance, weighted loss term)` per sample, in batch order.
    samples: Vec<(Label, f64, f64)>,
    g_proj: Array2<f64>,
    g_center: Array1<f64>,
    g_model: G,
}

/// Runs epochs until `config.epochs` have completed in total, continuing
/// from `state.history.len()`. Calls `on_epoch` after each epoch.
pub fn train<M: FeatureModel>(
    model: &mut M,
    labels: &[Label],
    state: &mut TrainOutcome,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<()> {
    let start = state.history.len();
    if config.epochs <= start {
        return Ok(());
    }
    config.validate()?;
    if labels.len() != model.len() {
        return Err(Error::dim("training labels", model.len(), labels.len()));
    }
    let w = config.loss_weights();
    state.verifier.margin = w.margin;
    state.verifier.beta = w.beta;
    state.verifier.epsilon = w.epsilon;
    state.verifier.lambda_pos = w.lambda_pos;
    state.verifier.lambda_neg = w.lambda_neg;
    state.verifier.radius = None;
    state.verifier.validate()?;
    let sampler = BalancedSampler::new(
        labels.to_vec(),
        config.batch_size,
        config.seed,
        config.weighted_sampling,
    )?;

    if start == 0 {
        state.reference = Some(init_center(model, labels, &mut state.verifier)?);
    }

    for epoch in start..config.epochs {
        let batches = sampler.epoch(epoch);
        let (mut sum_total, mut sum_pos, mut sum_neg) = (0.0, 0.0, 0.0);
        let (mut n_pos_batches, mut n_neg_batches) = (0usize, 0usize);
        let (mut dist_pos, mut dist_neg, mut cnt_pos, mut cnt_neg) = (0.0, 0.0, 0usize, 0usize);

        for (b, batch) in batches.iter().enumerate() {
            let np = batch.iter().filter(|&&i| labels[i] == Label::Positive).count();
            let nn = batch.len() - np;
            let mut g_proj = Array2::<f64>::zeros((0, 0));
            let mut g_center = Array1::<f64>::zeros(0);
            let mut g_model = model.zero_grads();
            let (mut lp, mut ln) = (0.0, 0.0);

            let verifier = &state.verifier;
            let model_ref = &*model;
            let groups: Vec<GroupResult<M::Grads>> = batch
                .par_chunks(GROUP)
                .map(|part| {
                    let mut out = GroupResult {
                        samples: Vec::with_capacity(part.len()),
                        g_proj: Array2::zeros(verifier.projection.weight.raw_dim()),
                        g_center: Array1::zeros(verifier.center.len()),
                        g_model: model_ref.zero_grads(),
                    };
                    for &i in part {
                        let (v, tape) = model_ref.forward(i)?;
                        let p = project(&v, verifier);
                        let label = labels[i];
                        let (term, dterm_ds) = match label {
                            Label::Positive => (
                                w.lambda_pos * loss::pos_term(p.s, w.margin) / np as f64,
                                w.lambda_pos / np as f64,
                            ),
                            Label::Negative => (
                                w.lambda_neg * loss::neg_term(p.s, w.margin, w.beta, w.epsilon) / nn as f64,
                                w.lambda_neg * loss::neg_term_ds(p.s, w.margin, w.beta, w.epsilon)
                                    / nn as f64,
                            ),
                        };
                        // ds/dz = (z - o) / s
                        let gz = &p.z_minus_o * (dterm_ds / p.s);
                        let gv = t_dot(&verifier.projection.weight, gz.view());
                        model_ref.backward(&tape, &gv, &mut out.g_model);
                        outer_add(&mut out.g_proj, gz.view(), v.view());
                        out.g_center -= &gz;
                        out.samples.push((label, p.d, term));
                    }
                    Ok(out)
                })
                .collect::<Result<_>>()?;
            for (k, group) in groups.into_iter().enumerate() {
                for (label, d, term) in group.samples {
                    match label {
                        Label::Positive => {
                            lp += term;
                            dist_pos += d;
                            cnt_pos += 1;
                        }
                        Label::Negative => {
                            ln += term;
                            dist_neg += d;
                            cnt_neg += 1;
                        }
                    }
                }
                if k == 0 {
                    g_proj = group.g_proj;
                    g_center = group.g_center;
                    g_model = group.g_model;
                } else {
                    g_proj += &group.g_proj;
                    g_center += &group.g_center;
                    M::accumulate(&mut g_model, &group.g_model);
                }
            }

            if !lp.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b, term: "pos" });
            }
            if !ln.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b, term: "neg" });
            }
            // lp/ln already carry the lambda weights
            sum_total += lp + ln;
            if np > 0 {
                sum_pos += if w.lambda_pos > 0.0 { lp / w.lambda_pos } else { 0.0 };
                n_pos_batches += 1;
            }
            if nn > 0 {
                sum_neg += if w.lambda_neg > 0.0 { ln / w.lambda_neg } else { 0.0 };
                n_neg_batches += 1;
            }

            let (mut slots, mut grads) = model.slots(&mut g_model);
            slots.push(ParamSlot::new(
                state.verifier.projection.weight.as_slice_mut().expect("standard layout"),
                true,
            ));
            grads.push(g_proj.as_slice().expect("standard layout"));
            slots.push(ParamSlot {
                data: &mut state.verifier.center,
                decay: false,
                lr_scale: config.center_lr_scale,
            });
            grads.push(g_center.as_slice().expect("standard layout"));
            state.optimizer.step(config.learning_rate, slots, &grads);
        }

        let nb = batches.len().max(1) as f64;
        let stats = EpochStats {
            epoch,
            total_loss: sum_total / nb,
            pos_loss: sum_pos / n_pos_batches.max(1) as f64,
            neg_loss: sum_neg / n_neg_batches.max(1) as f64,
            mean_pos_distance: dist_pos / cnt_pos.max(1) as f64,
            mean_neg_distance: dist_neg / cnt_neg.max(1) as f64,
        };
        state.history.push(stats.clone());
        on_epoch(&stats);
        check_collapse(&state.history, state.reference, &config.collapse_guard)?;
    }
    Ok(())
}

fn check_collapse(history: &[EpochStats], reference: Option<ReferenceDistances>, guard: &CollapseGuard) -> Result<()> {
    let Some(last) = history.last() else {
        return Ok(());
    };
    if !guard.enabled {
        return Ok(());
    }
    let collapsed_abs = last.mean_pos_distance < guard.min_positive_distance;
    let recent = &history[history.len().saturating_sub(guard.window.max(1))..];
    let mean = |f: fn(&EpochStats) -> f64| recent.iter().map(f).sum::<f64>() / recent.len() as f64;
    let peak = |f: fn(&EpochStats) -> f64, init: f64| history.iter().map(f).fold(init, f64::max);
    let (init_pos, init_neg) = reference.map_or((0.0, 0.0), |r| (r.mean_pos, r.mean_neg));
    let contracted = mean(|s| s.mean_pos_distance) < guard.contraction_ratio * peak(|s| s.mean_pos_distance, init_pos)
        && mean(|s| s.mean_neg_distance) < guard.contraction_ratio * peak(|s| s.mean_neg_distance, init_neg);
    if collapsed_abs || contracted {
        return Err(Error::Collapse {
            epoch: last.epoch,
            mean_pos: last.mean_pos_distance,
            mean_neg: last.mean_neg_distance,
        });
    }
    Ok(())
}
