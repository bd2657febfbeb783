//! Hypersphere verifier: projection, losses, training, radius calibration
//! and single-image verification.

pub mod calibrate;
pub mod loss;
pub mod sampler;
pub mod train;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use calibrate::{calibrate_radius, CalibrationResult, Criterion, GridSpec, TieBreak};
pub use loss::{loss_neg, loss_pos, total_loss, LossWeights};
pub use sampler::BalancedSampler;
pub use train::{train, CollapseGuard, EpochStats, FeatureModel, FixedFeatures, OnlineExtractor, TrainConfig, TrainOutcome};

use crate::datamodel::{ImageTensor, ProjectionSpec, StyleFingerprint, Verdict, VerifierParams};
use crate::error::{Error, Result};
use crate::extractor::ExtractorParams;
use crate::nn;

pub const VERIFIER_VERSION: &str = "stylefence-verifier/1";

/// Default projection output size.
pub const PROJECTION_DIM: usize = 256;

impl VerifierParams {
    /// Random bias-free projection `input_dim -> output_dim`, zero center,
    /// no radius.
    pub fn init(input_dim: usize, output_dim: usize, seed: u64, weights: &LossWeights) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weight = nn::random_normal((output_dim, input_dim), 1.0 / (input_dim as f64).sqrt(), &mut rng);
        Self::with_projection(weight, weights)
    }

    pub fn identity(dim: usize, weights: &LossWeights) -> Self {
        Self::with_projection(Array2::eye(dim), weights)
    }

    fn with_projection(weight: Array2<f64>, w: &LossWeights) -> Self {
        let out = weight.nrows();
        Self {
            projection: ProjectionSpec { weight },
            center: vec![0.0; out],
            margin: w.margin,
            beta: w.beta,
            epsilon: w.epsilon,
            lambda_pos: w.lambda_pos,
            lambda_neg: w.lambda_neg,
            radius: None,
            version: VERIFIER_VERSION.into(),
        }
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

/// `z = phi(v)`.
pub fn project_embed(fingerprint: &StyleFingerprint, params: &VerifierParams) -> Result<Array1<f64>> {
    project_vector(&fingerprint.vector, params)
}

pub fn project_vector(v: &[f64], params: &VerifierParams) -> Result<Array1<f64>> {
    let w = &params.projection.weight;
    if v.len() != w.ncols() {
        return Err(Error::dim("projection input", w.ncols(), v.len()));
    }
    Ok(w.dot(&ndarray::ArrayView1::from(v)))
}

/// Euclidean distance `||z - o||`.
pub fn distance(z: &[f64], center: &[f64]) -> f64 {
    debug_assert_eq!(z.len(), center.len());
    z.iter()
        .zip(center)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Distance of a fingerprint to the center in projected space.
pub fn fingerprint_distance(fingerprint: &StyleFingerprint, params: &VerifierParams) -> Result<f64> {
    let z = project_embed(fingerprint, params)?;
    if z.len() != params.center.len() {
        return Err(Error::dim("center", z.len(), params.center.len()));
    }
    Ok(distance(z.as_slice().expect("fresh array"), &params.center))
}

pub fn verify_fingerprint(fingerprint: &StyleFingerprint, params: &VerifierParams) -> Result<Verdict> {
    let radius = params.radius.ok_or(Error::Uncalibrated)?;
    let d = fingerprint_distance(fingerprint, params)?;
    Ok(Verdict::new(fingerprint.image_id.clone(), d, radius))
}

/// Extracts the fingerprint of `image` and tests it against the sphere.
pub fn verify(
    image_id: &str,
    image: &ImageTensor,
    extractor: &ExtractorParams,
    params: &VerifierParams,
) -> Result<Verdict> {
    if params.radius.is_none() {
        return Err(Error::Uncalibrated);
    }
    let fp = extractor.extract_fingerprint(image_id, image)?;
    verify_fingerprint(&fp, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fp(v: Vec<f64>) -> StyleFingerprint {
        StyleFingerprint::new("x", "t", v, vec![1.0]).unwrap()
    }

    #[test]
    fn identity_and_zero_projection() {
        let w = LossWeights::default();
        let p = VerifierParams::identity(3, &w);
        assert_eq!(project_embed(&fp(vec![1.0, -2.0, 0.5]), &p).unwrap().to_vec(), vec![1.0, -2.0, 0.5]);
        let mut z = p.clone();
        z.projection.weight.fill(0.0);
        assert!(project_embed(&fp(vec![1.0, -2.0, 0.5]), &z).unwrap().iter().all(|&x| x == 0.0));
        assert!(matches!(project_embed(&fp(vec![1.0]), &p), Err(Error::Dimension { .. })));
    }

    #[test]
    fn seeded_projection_is_reproducible() {
        let w = LossWeights::default();
        let a = VerifierParams::init(6, 4, 3, &w);
        let b = VerifierParams::init(6, 4, 3, &w);
        let f = fp(vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        assert_eq!(project_embed(&f, &a).unwrap(), project_embed(&f, &b).unwrap());
    }

    #[test]
    fn distances() {
        assert_eq!(distance(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(distance(&[3.0, 4.0], &[0.0, 0.0]), 5.0);
    }

    #[test]
    fn verdicts_need_a_radius_and_use_closed_ball() {
        let w = LossWeights::default();
        let mut p = VerifierParams::identity(2, &w);
        p.center = vec![3.0, 0.0];
        assert!(matches!(verify_fingerprint(&fp(vec![0.0, 4.0]), &p), Err(Error::Uncalibrated)));
        p.radius = Some(5.0);
        let v = verify_fingerprint(&fp(vec![0.0, 4.0]), &p).unwrap();
        assert!(v.inside);
        assert_eq!(v.distance, 5.0);
        p.radius = Some(0.0);
        assert!(verify_fingerprint(&fp(vec![3.0, 0.0]), &p).unwrap().inside);
    }
}
