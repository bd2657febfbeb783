//! Per-level pooling encoders and the attentional fusion head.

use ndarray::{concatenate, Array1, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Level, LevelEncoding};
use crate::error::{Error, Result};
use crate::nn::{self, Linear};

/// Scores each projected level vector; softmax of the scores gives the
/// attention weights.
pub trait AttentionScorer {
    fn scores(&self, projected: &[Array1<f64>]) -> Vec<f64>;
}

/// One level's final convolution (1x1 over the pooled `[avg; max]` vector,
/// halving channels) and its projection into the common embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelHead {
    pub conv: Linear,
    pub projection: Linear,
}

/// Two-layer perceptron `tanh(W1 P + b1) -> W2 . + b2` over the flattened
/// stack of projected vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl AttentionMlp {
    fn hidden_activation(&self, flat: &Array1<f64>) -> Array1<f64> {
        self.hidden.forward(flat.view()).mapv(f64::tanh)
    }
}

impl AttentionScorer for AttentionMlp {
    fn scores(&self, projected: &[Array1<f64>]) -> Vec<f64> {
        let flat = flatten(projected);
        self.out.forward(self.hidden_activation(&flat).view()).to_vec()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionHead {
    pub levels: Vec<LevelHead>,
    pub attention: AttentionMlp,
}

pub const ATTENTION_HIDDEN: usize = 256;

impl FusionHead {
    /// Random head for levels with the given tap channel counts.
    pub fn init<R: Rng + ?Sized>(channels: &[usize], embed_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let levels = channels
            .iter()
            .map(|&c| LevelHead {
                conv: Linear::init((c / 2).max(1), 2 * c, 1.0, rng),
                projection: Linear::init(embed_dim, (c / 2).max(1), 1.0, rng),
            })
            .collect();
        let n = channels.len();
        Self {
            levels,
            attention: AttentionMlp {
                hidden: Linear::init(hidden, n * embed_dim, 1.0, rng),
                out: Linear::init(n, hidden, 1.0, rng),
            },
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.attention.hidden.in_dim() / self.levels.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            levels: self
                .levels
                .iter()
                .map(|l| LevelHead {
                    conv: l.conv.zeros_like(),
                    projection: l.projection.zeros_like(),
                })
                .collect(),
            attention: AttentionMlp {
                hidden: self.attention.hidden.zeros_like(),
                out: self.attention.out.zeros_like(),
            },
        }
    }

    /// Checks that projections agree on the embedding size and the MLP
    /// emits one score per level.
    pub fn validate(&self) -> Result<()> {
        let n = self.levels.len();
        if n == 0 {
            return Err(Error::Config("fusion head needs at least one level".into()));
        }
        let d = self.levels[0].projection.out_dim();
        for l in &self.levels {
            if l.projection.out_dim() != d {
                return Err(Error::dim("projection output", d, l.projection.out_dim()));
            }
            if l.projection.in_dim() != l.conv.out_dim() {
                return Err(Error::dim("projection input", l.conv.out_dim(), l.projection.in_dim()));
            }
        }
        if self.attention.hidden.in_dim() != n * d {
            return Err(Error::dim("attention input", n * d, self.attention.hidden.in_dim()));
        }
        if self.attention.out.out_dim() != n {
            return Err(Error::dim("attention output", n, self.attention.out.out_dim()));
        }
        Ok(())
    }

    /// Full forward over tap maps, keeping everything the backward pass needs.
    pub fn forward(&self, maps: &[&Array3<f64>]) -> Result<HeadTrace> {
        if maps.len() != self.levels.len() {
            return Err(Error::dim("tap maps", self.levels.len(), maps.len()));
        }
        let mut pooled = Vec::with_capacity(maps.len());
        let mut encodings = Vec::with_capacity(maps.len());
        for (i, (map, head)) in maps.iter().zip(&self.levels).enumerate() {
            let (p, arg) = global_pool(map, level_name(i))?;
            if p.len() != head.conv.in_dim() {
                return Err(Error::dim("level conv input", head.conv.in_dim(), p.len()));
            }
            encodings.push(head.conv.forward(p.view()));
            pooled.push((p, arg, map.dim()));
        }
        let projected: Vec<Array1<f64>> = encodings
            .iter()
            .zip(&self.levels)
            .map(|(c, h)| h.projection.forward(c.view()))
            .collect();
        let flat = flatten(&projected);
        let hidden = self.attention.hidden_activation(&flat);
        let scores = self.attention.out.forward(hidden.view()).to_vec();
        let (alpha, v) = fuse(&projected, &scores);
        Ok(HeadTrace {
            pooled,
            encodings,
            projected,
            flat,
            hidden,
            alpha,
            v,
        })
    }

    /// Accumulates parameter gradients of `dL/dv = gv` into `grads` and
    /// returns tap-map gradients for the levels flagged in `map_grad`.
    pub fn backward(
        &self,
        trace: &HeadTrace,
        gv: &Array1<f64>,
        grads: &mut FusionHead,
        map_grad: &[bool],
    ) -> Vec<Option<Array3<f64>>> {
        let n = self.levels.len();
        let d = gv.len();
        // v = sum_i alpha_i p_i
        let g_alpha: Vec<f64> = trace.projected.iter().map(|p| p.dot(gv)).collect();
        let mean: f64 = trace.alpha.iter().zip(&g_alpha).map(|(a, g)| a * g).sum();
        let g_scores: Array1<f64> = trace
            .alpha
            .iter()
            .zip(&g_alpha)
            .map(|(a, g)| a * (g - mean))
            .collect();
        let g_hidden = self.attention.out.backward(
            trace.hidden.view(),
            g_scores.view(),
            &mut grads.attention.out,
        );
        let g_pre = g_hidden * trace.hidden.mapv(|h| 1.0 - h * h);
        let g_flat = self.attention.hidden.backward(
            trace.flat.view(),
            g_pre.view(),
            &mut grads.attention.hidden,
        );

        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut g_p = g_flat.slice(ndarray::s![i * d..(i + 1) * d]).to_owned();
            g_p.scaled_add(trace.alpha[i], gv);
            let head = &self.levels[i];
            let g_c = head.projection.backward(
                trace.encodings[i].view(),
                g_p.view(),
                &mut grads.levels[i].projection,
            );
            let (pooled, arg, dim) = &trace.pooled[i];
            let g_pool = head.conv.backward(pooled.view(), g_c.view(), &mut grads.levels[i].conv);
            out.push(
                map_grad
                    .get(i)
                    .copied()
                    .unwrap_or(false)
                    .then(|| global_pool_backward(&g_pool, arg, *dim)),
            );
        }
        out
    }
}

/// Intermediate values of one head forward pass.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    pooled: Vec<(Array1<f64>, Vec<usize>, (usize, usize, usize))>,
    /// Level encodings `c_i`.
    pub encodings: Vec<Array1<f64>>,
    /// Projected vectors `p_i`.
    pub projected: Vec<Array1<f64>>,
    flat: Array1<f64>,
    hidden: Array1<f64>,
    pub alpha: Vec<f64>,
    pub v: Array1<f64>,
}

fn level_name(i: usize) -> String {
    Level::ALL
        .get(i)
        .map_or_else(|| format!("level{i}"), |l| l.as_str().to_owned())
}

fn flatten(projected: &[Array1<f64>]) -> Array1<f64> {
    let views: Vec<_> = projected.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).expect("projected vectors are 1-D")
}

/// Global average and max pooling, concatenated as `[avg; max]`.
/// Also returns the flat index of each channel's maximum.
pub fn global_pool(map: &Array3<f64>, level: impl Into<String>) -> Result<(Array1<f64>, Vec<usize>)> {
    let (c, h, w) = map.dim();
    let hw = h * w;
    let mut out = Array1::zeros(2 * c);
    let mut arg = Vec::with_capacity(c);
    for (ch, plane) in map.outer_iter().enumerate() {
        let mut sum = 0.0;
        let mut best = f64::NEG_INFINITY;
        let mut best_i = 0;
        for (i, &v) in plane.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite { level: level.into() });
            }
            sum += v;
            if v > best {
                best = v;
                best_i = i;
            }
        }
        out[ch] = sum / hw as f64;
        out[c + ch] = best;
        arg.push(ch * hw + best_i);
    }
    Ok((out, arg))
}

fn global_pool_backward(g: &Array1<f64>, arg: &[usize], dim: (usize, usize, usize)) -> Array3<f64> {
    let (c, h, w) = dim;
    let hw = (h * w) as f64;
    let mut out = Array3::zeros(dim);
    for ch in 0..c {
        out.slice_mut(ndarray::s![ch, .., ..]).fill(g[ch] / hw);
    }
    let flat = out.as_slice_mut().expect("contiguous");
    for (ch, &i) in arg.iter().enumerate() {
        flat[i] += g[c + ch];
    }
    out
}

/// Pools a tap map and applies the level's final convolution.
pub fn pool_encode(
    level: Level,
    source_layer: &str,
    map: &Array3<f64>,
    conv: &Linear,
) -> Result<LevelEncoding> {
    let (pooled, _) = global_pool(map, level.as_str())?;
    if pooled.len() != conv.in_dim() {
        return Err(Error::dim("level conv input", conv.in_dim(), pooled.len()));
    }
    let vector = conv.forward(pooled.view());
    if vector.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            level: level.as_str().to_owned(),
        });
    }
    Ok(LevelEncoding {
        level,
        vector: vector.to_vec(),
        source_layer: source_layer.to_owned(),
    })
}

/// Softmax-normalizes `scores` and returns `(alpha, sum_i alpha_i p_i)`.
pub fn fuse(projected: &[Array1<f64>], scores: &[f64]) -> (Vec<f64>, Array1<f64>) {
    let alpha = nn::softmax(scores);
    let mut v = Array1::zeros(projected[0].len());
    for (a, p) in alpha.iter().zip(projected) {
        v.scaled_add(*a, p);
    }
    (alpha, v)
}

/// Projects encodings into the common space and fuses them with `scorer`.
/// Returns `(alpha, v, projected)`.
pub fn attention_fuse_with(
    encodings: &[LevelEncoding],
    levels: &[LevelHead],
    scorer: &dyn AttentionScorer,
) -> Result<(Vec<f64>, Array1<f64>, Vec<Array1<f64>>)> {
    if encodings.len() != levels.len() || encodings.is_empty() {
        return Err(Error::dim("level encodings", levels.len(), encodings.len()));
    }
    let mut projected = Vec::with_capacity(encodings.len());
    for (enc, head) in encodings.iter().zip(levels) {
        if enc.vector.len() != head.projection.in_dim() {
            return Err(Error::dim(
                format!("{} encoding", enc.level.as_str()),
                head.projection.in_dim(),
                enc.vector.len(),
            ));
        }
        projected.push(head.projection.forward(Array1::from_vec(enc.vector.clone()).view()));
    }
    let scores = scorer.scores(&projected);
    if scores.len() != projected.len() {
        return Err(Error::dim("attention scores", projected.len(), scores.len()));
    }
    let (alpha, v) = fuse(&projected, &scores);
    Ok((alpha, v, projected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixed(Vec<f64>);

    impl AttentionScorer for Fixed {
        fn scores(&self, _: &[Array1<f64>]) -> Vec<f64> {
            self.0.clone()
        }
    }

    fn identity(n: usize) -> Linear {
        Linear {
            weight: ndarray::Array2::eye(n),
            bias: Array1::zeros(n),
        }
    }

    fn enc(level: Level, v: Vec<f64>) -> LevelEncoding {
        LevelEncoding {
            level,
            vector: v,
            source_layer: "x".into(),
        }
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let map = Array3::from_elem((3, 4, 5), 5.0);
        let (p, _) = global_pool(&map, "low").unwrap();
        assert!(p.iter().all(|&v| v == 5.0));
    }

    #[test]
    fn spike_map_pools_by_hand() {
        // 2 channels, 2x2; one spike per channel
        let map = Array3::from_shape_vec((2, 2, 2), vec![0.0, 8.0, 0.0, 0.0, 0.0, 0.0, 4.0, 0.0]).unwrap();
        let (p, _) = global_pool(&map, "low").unwrap();
        assert_eq!(p.to_vec(), vec![2.0, 1.0, 8.0, 4.0]);
    }

    #[test]
    fn zero_map_and_zero_bias_conv_gives_zero_encoding() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Linear::init(3, 6, 1.0, &mut rng);
        let e = pool_encode(Level::Mid, "relu4_4", &Array3::zeros((3, 2, 2)), &conv).unwrap();
        assert!(e.vector.iter().all(|&v| v == 0.0));
        assert_eq!(e.source_layer, "relu4_4");
    }

    #[test]
    fn non_finite_map_names_level() {
        let mut map = Array3::zeros((1, 2, 2));
        map[[0, 1, 1]] = f64::NAN;
        let conv = Linear::zeros(1, 2);
        match pool_encode(Level::High, "relu5_4", &map, &conv) {
            Err(Error::NonFinite { level }) => assert_eq!(level, "high"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn singleton_level_gets_full_weight() {
        let levels = vec![LevelHead {
            conv: identity(2),
            projection: identity(2),
        }];
        let (alpha, v, p) =
            attention_fuse_with(&[enc(Level::Low, vec![1.5, -2.0])], &levels, &Fixed(vec![0.3])).unwrap();
        assert_eq!(alpha, vec![1.0]);
        assert_eq!(v, p[0]);
    }

    #[test]
    fn equal_scores_average_levels() {
        let levels: Vec<LevelHead> = (0..3)
            .map(|_| LevelHead {
                conv: identity(2),
                projection: identity(2),
            })
            .collect();
        let encs = [
            enc(Level::Low, vec![3.0, 0.0]),
            enc(Level::Mid, vec![0.0, 3.0]),
            enc(Level::High, vec![3.0, 3.0]),
        ];
        let (alpha, v, _) = attention_fuse_with(&encs, &levels, &Fixed(vec![0.7; 3])).unwrap();
        for a in &alpha {
            assert!((a - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((v[0] - 2.0).abs() < 1e-12 && (v[1] - 2.0).abs() < 1e-12);

        let scores = vec![1f64.ln(), 2f64.ln(), 3f64.ln()];
        let (alpha, v, _) = attention_fuse_with(&encs, &levels, &Fixed(scores)).unwrap();
        let expect = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (a, e) in alpha.iter().zip(expect) {
            assert!((a - e).abs() < 1e-9);
        }
        assert!((v[0] - (3.0 / 6.0 + 9.0 / 6.0)).abs() < 1e-9);
        assert!((v[1] - (6.0 / 6.0 + 9.0 / 6.0)).abs() < 1e-9);

        assert!(attention_fuse_with(&encs[..2], &levels, &Fixed(vec![0.0; 2])).is_err());
        let wrong = [enc(Level::Low, vec![1.0]), encs[1].clone(), encs[2].clone()];
        assert!(matches!(
            attention_fuse_with(&wrong, &levels, &Fixed(vec![0.0; 3])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn head_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut head = FusionHead::init(&[4, 8, 8], 6, 5, &mut rng);
        assert!(head.validate().is_ok());
        assert_eq!(head.embed_dim(), 6);
        head.attention.out = Linear::zeros(2, 5);
        assert!(head.validate().is_err());
    }
}
