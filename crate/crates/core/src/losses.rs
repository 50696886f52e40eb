//! Training objective: `alpha * style + beta * content + gamma * (1 - SSIM)`.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Eager, Graph};
use crate::ops::gaussian_taps;
use crate::tensor::{Real, Tensor};
use crate::vgg::{LossNetwork, TapId};

pub const CONTENT_TAP: TapId = TapId::Relu2_2;
pub const STYLE_TAPS: [TapId; 4] = TapId::ALL;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Dynamic range of pixel values.
pub const SSIM_RANGE: f64 = 1.0;

pub fn ssim_c1() -> f64 {
    (SSIM_K1 * SSIM_RANGE).powi(2)
}

pub fn ssim_c2() -> f64 {
    (SSIM_K2 * SSIM_RANGE).powi(2)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Style weight.
    pub alpha: f64,
    /// Content weight.
    pub beta: f64,
    /// SSIM weight.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.8,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let w = LossWeights { alpha, beta, gamma };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Scalar summary of one loss evaluation. `ssim` holds the SSIM loss term
/// `1 - SSIM(O, C)`, so `total = alpha*style + beta*content + gamma*ssim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub style: f64,
    pub content: f64,
    pub ssim: f64,
    pub per_tap: BTreeMap<TapId, f64>,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.total, self.style, self.content, self.ssim].iter().all(|v| v.is_finite())
    }

    /// One training-log line: `{step, total, style, content, ssim, per_tap}`.
    pub fn to_log_line(&self, step: usize) -> String {
        #[derive(Serialize)]
        struct Line<'a> {
            step: usize,
            total: f64,
            style: f64,
            content: f64,
            ssim: f64,
            per_tap: &'a BTreeMap<TapId, f64>,
        }
        serde_json::to_string(&Line {
            step,
            total: self.total,
            style: self.style,
            content: self.content,
            ssim: self.ssim,
            per_tap: &self.per_tap,
        })
        .expect("report serializes")
    }
}

/// Graph values of every loss term.
pub struct LossTerms<V> {
    pub total: V,
    pub style: V,
    pub content: V,
    pub ssim_loss: V,
    pub per_tap: Vec<(TapId, V)>,
}

impl<V> LossTerms<V> {
    pub fn report<T: Real, G: Graph<T, Value = V>>(&self, g: &G) -> LossReport {
        let val = |v: &V| g.tensor(v).item().to_f64();
        LossReport {
            total: val(&self.total),
            style: val(&self.style),
            content: val(&self.content),
            ssim: val(&self.ssim_loss),
            per_tap: self.per_tap.iter().map(|(t, v)| (*t, val(v))).collect(),
        }
    }
}

/// Per-sample Gram matrices, shape (n, 1, c, c); unnormalised.
pub fn gram<T: Real, G: Graph<T>>(g: &mut G, feature: &G::Value) -> G::Value {
    g.gram(feature)
}

/// `||a - b||^2 / (C * H * W)` of `dims_of`'s feature, averaged over the batch.
fn normalized_sq_dist<T: Real, G: Graph<T>>(g: &mut G, a: &G::Value, b: &G::Value, feature_of: &G::Value) -> Result<G::Value> {
    let s = g.shape(feature_of);
    let d = g.sub(a, b)?;
    let sq = g.mul(&d, &d)?;
    let total = g.sum(&sq);
    Ok(g.scale(&total, 1.0 / (s.c * s.h * s.w * s.n) as f64))
}

/// Content loss at relu2_2.
pub fn content_loss<T: Real, G: Graph<T>>(g: &mut G, phi: &LossNetwork<T>, output: &G::Value, content: &G::Value) -> Result<G::Value> {
    let (so, sc) = (g.shape(output), g.shape(content));
    if so != sc {
        return Err(Error::ShapeMismatch {
            op: "content_loss",
            lhs: so,
            rhs: sc,
        });
    }
    let fo = phi.extract(g, output, &[CONTENT_TAP])?.remove(&CONTENT_TAP).expect("tap");
    let fc = phi.extract(g, content, &[CONTENT_TAP])?.remove(&CONTENT_TAP).expect("tap");
    normalized_sq_dist(g, &fo, &fc, &fo)
}

/// Gram style loss summed over the four taps; also returns each tap's term.
pub fn style_loss<T: Real, G: Graph<T>>(
    g: &mut G,
    phi: &LossNetwork<T>,
    output: &G::Value,
    style: &G::Value,
) -> Result<(G::Value, Vec<(TapId, G::Value)>)> {
    let fs = phi.extract(g, style, &STYLE_TAPS)?;
    let grams: Vec<G::Value> = STYLE_TAPS.iter().map(|t| g.gram(&fs[t])).collect();
    let fo = phi.extract(g, output, &STYLE_TAPS)?;
    style_from_grams(g, &fo, &grams)
}

fn style_from_grams<T: Real, G: Graph<T>>(
    g: &mut G,
    output_feats: &BTreeMap<TapId, G::Value>,
    style_grams: &[G::Value],
) -> Result<(G::Value, Vec<(TapId, G::Value)>)> {
    let mut per_tap = Vec::with_capacity(STYLE_TAPS.len());
    let mut total: Option<G::Value> = None;
    for (tap, sg) in STYLE_TAPS.iter().zip(style_grams) {
        let f = &output_feats[tap];
        let og = g.gram(f);
        let term = normalized_sq_dist(g, &og, sg, f)?;
        total = Some(match total {
            Some(t) => g.add(&t, &term)?,
            None => term.clone(),
        });
        per_tap.push((*tap, term));
    }
    Ok((total.expect("four taps"), per_tap))
}

/// Mean local SSIM (11x11 Gaussian window, sigma 1.5, valid region only),
/// averaged over channels.
pub fn ssim<T: Real, G: Graph<T>>(g: &mut G, x: &G::Value, y: &G::Value) -> Result<G::Value> {
    let (sx, sy) = (g.shape(x), g.shape(y));
    if sx != sy {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            lhs: sx,
            rhs: sy,
        });
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let (c1, c2) = (ssim_c1(), ssim_c2());

    let mu_x = g.blur_valid(x, &taps)?;
    let mu_y = g.blur_valid(y, &taps)?;
    let xx = g.mul(x, x)?;
    let yy = g.mul(y, y)?;
    let xy = g.mul(x, y)?;
    let e_xx = g.blur_valid(&xx, &taps)?;
    let e_yy = g.blur_valid(&yy, &taps)?;
    let e_xy = g.blur_valid(&xy, &taps)?;
    let mu_xx = g.mul(&mu_x, &mu_x)?;
    let mu_yy = g.mul(&mu_y, &mu_y)?;
    let mu_xy = g.mul(&mu_x, &mu_y)?;
    let var_x = g.sub(&e_xx, &mu_xx)?;
    let var_y = g.sub(&e_yy, &mu_yy)?;
    let cov = g.sub(&e_xy, &mu_xy)?;

    let lum_num = g.affine_scalar(&mu_xy, 2.0, c1);
    let cs_num = g.affine_scalar(&cov, 2.0, c2);
    let lum_den = g.add(&mu_xx, &mu_yy)?;
    let lum_den = g.affine_scalar(&lum_den, 1.0, c1);
    let cs_den = g.add(&var_x, &var_y)?;
    let cs_den = g.affine_scalar(&cs_den, 1.0, c2);

    let num = g.mul(&lum_num, &cs_num)?;
    let den = g.mul(&lum_den, &cs_den)?;
    let map = g.div(&num, &den)?;
    Ok(g.mean(&map))
}

/// Content features and style Grams, which depend only on the data and
/// can be computed once per image.
pub struct LossTargets<T: Real = f32> {
    pub content_feature: Arc<Tensor<T>>,
    pub style_grams: Vec<Arc<Tensor<T>>>,
}

impl<T: Real> LossTargets<T> {
    pub fn compute(phi: &LossNetwork<T>, content: &Tensor<T>, style: &Tensor<T>) -> Result<Self> {
        Ok(LossTargets {
            content_feature: Self::content_feature(phi, content)?,
            style_grams: Self::style_grams(phi, style)?,
        })
    }

    pub fn content_feature(phi: &LossNetwork<T>, content: &Tensor<T>) -> Result<Arc<Tensor<T>>> {
        let mut g = Eager::new();
        let c = g.constant(content.clone());
        Ok(phi.extract(&mut g, &c, &[CONTENT_TAP])?.remove(&CONTENT_TAP).expect("tap"))
    }

    pub fn style_grams(phi: &LossNetwork<T>, style: &Tensor<T>) -> Result<Vec<Arc<Tensor<T>>>> {
        let mut g = Eager::new();
        let s = g.constant(style.clone());
        let feats = phi.extract(&mut g, &s, &STYLE_TAPS)?;
        Ok(STYLE_TAPS.iter().map(|t| Graph::<T>::gram(&mut g, &feats[t])).collect())
    }
}

fn combine<T: Real, G: Graph<T>>(
    g: &mut G,
    weights: LossWeights,
    content: G::Value,
    style: G::Value,
    per_tap: Vec<(TapId, G::Value)>,
    ssim_index: G::Value,
) -> Result<LossTerms<G::Value>> {
    let ssim_loss = g.affine_scalar(&ssim_index, -1.0, 1.0);
    let ws = g.scale(&style, weights.alpha);
    let wc = g.scale(&content, weights.beta);
    let wssim = g.scale(&ssim_loss, weights.gamma);
    let partial = g.add(&ws, &wc)?;
    let total = g.add(&partial, &wssim)?;
    Ok(LossTerms {
        total,
        style,
        content,
        ssim_loss,
        per_tap,
    })
}

/// Full objective with content and style features computed in-graph.
pub fn total_loss<T: Real, G: Graph<T>>(
    g: &mut G,
    phi: &LossNetwork<T>,
    output: &G::Value,
    content: &G::Value,
    style: &G::Value,
    weights: LossWeights,
) -> Result<LossTerms<G::Value>> {
    let content_term = content_loss(g, phi, output, content)?;
    let (style_term, per_tap) = style_loss(g, phi, output, style)?;
    let s = ssim(g, output, content)?;
    combine(g, weights, content_term, style_term, per_tap, s)
}

/// Same objective against precomputed [`LossTargets`]; the output image is
/// passed through the loss network once.
pub fn total_loss_with_targets<T: Real, G: Graph<T>>(
    g: &mut G,
    phi: &LossNetwork<T>,
    output: &G::Value,
    content: &G::Value,
    targets: &LossTargets<T>,
    weights: LossWeights,
) -> Result<LossTerms<G::Value>> {
    let (so, sc) = (g.shape(output), g.shape(content));
    if so != sc {
        return Err(Error::ShapeMismatch {
            op: "total_loss",
            lhs: so,
            rhs: sc,
        });
    }
    let feats = phi.extract(g, output, &STYLE_TAPS)?;
    let fc = g.leaf(Arc::clone(&targets.content_feature));
    let fo = &feats[&CONTENT_TAP];
    let content_term = normalized_sq_dist(g, fo, &fc, fo)?;
    let grams: Vec<G::Value> = targets.style_grams.iter().map(|t| g.leaf(Arc::clone(t))).collect();
    let (style_term, per_tap) = style_from_grams(g, &feats, &grams)?;
    let s = ssim(g, output, content)?;
    combine(g, weights, content_term, style_term, per_tap, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Eager;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img(seed: u64, s: usize) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform([1, 3, s, s], 0.0, 1.0, &mut rng)
    }

    #[test]
    fn weights_validation() {
        assert_eq!(LossWeights::default(), LossWeights::new(0.8, 1.0, 1.0).unwrap());
        assert!(LossWeights::new(-0.1, 1.0, 1.0).is_err());
        assert!(LossWeights::new(0.1, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn constant_images_match_closed_form() {
        let mut g = Eager::new();
        let a = g.constant(Tensor::full([1, 3, 16, 16], 0.2f32));
        let b = g.constant(Tensor::full([1, 3, 16, 16], 0.6f32));
        let s = ssim(&mut g, &a, &b).unwrap().item() as f64;
        let (a, b, c1) = (0.2f32 as f64, 0.6f32 as f64, ssim_c1());
        let expected = (2.0 * a * b + c1) / (a * a + b * b + c1);
        assert!((s - expected).abs() < 1e-6, "{s} vs {expected}");
        assert!((expected - 0.6001).abs() < 1e-4);
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let mut g = Eager::new();
        let x = g.constant(img(1, 24));
        let y = g.constant(img(2, 24));
        assert_eq!(ssim(&mut g, &x, &x).unwrap().item(), 1.0);
        let xy = ssim(&mut g, &x, &y).unwrap().item();
        let yx = ssim(&mut g, &y, &x).unwrap().item();
        assert_eq!(xy, yx);
    }

    #[test]
    fn ssim_of_inverted_checker_is_low() {
        let checker = Tensor::<f32>::from_fn([1, 1, 16, 16], |_, _, y, x| ((x + y) % 2) as f32);
        let inverted = checker.map(|v| 1.0 - v);
        let mut g = Eager::new();
        let (a, b) = (g.constant(checker), g.constant(inverted));
        let s = ssim(&mut g, &a, &b).unwrap().item();
        assert!(s < 0.1, "{s}");
    }

    #[test]
    fn ssim_shape_mismatch() {
        let mut g = Eager::new();
        let a = g.constant(Tensor::<f32>::zeros([1, 3, 16, 16]));
        let b = g.constant(Tensor::<f32>::zeros([1, 3, 16, 24]));
        assert!(ssim(&mut g, &a, &b).is_err());
    }

    #[test]
    fn targets_path_matches_in_graph_path() {
        let phi = LossNetwork::<f32>::seeded(5);
        let (o, c, s) = (img(1, 32), img(2, 32), img(3, 32));
        let w = LossWeights::default();
        let mut g = Eager::new();
        let (ov, cv, sv) = (g.constant(o.clone()), g.constant(c.clone()), g.constant(s.clone()));
        let a = total_loss(&mut g, &phi, &ov, &cv, &sv, w).unwrap().report(&g);
        let targets = LossTargets::compute(&phi, &c, &s).unwrap();
        let b = total_loss_with_targets(&mut g, &phi, &ov, &cv, &targets, w).unwrap().report(&g);
        assert_eq!(a, b);
    }

    #[test]
    fn style_term_single_tap_hand_case() {
        // features 1x2x1x2: O = [[1,2],[3,4]], S = [[0,1],[1,0]]
        let mut g = Eager::new();
        let fo = g.constant(Tensor::new([1, 2, 1, 2], vec![1.0f64, 2., 3., 4.]).unwrap());
        let fs = g.constant(Tensor::new([1, 2, 1, 2], vec![0.0f64, 1., 1., 0.]).unwrap());
        let go = g.gram(&fo);
        let gs = g.gram(&fs);
        let term = normalized_sq_dist(&mut g, &go, &gs, &fo).unwrap().item();
        // G(O) = [[5,11],[11,25]], G(S) = [[1,0],[0,1]]
        let expected = (4.0f64.powi(2) + 11.0f64.powi(2) * 2.0 + 24.0f64.powi(2)) / (2.0 * 1.0 * 2.0);
        assert_eq!(term, expected);
    }

    #[test]
    fn log_line_schema() {
        let r = LossReport {
            total: 1.0,
            style: 0.5,
            content: 0.25,
            ssim: 0.35,
            per_tap: TapId::ALL.iter().map(|t| (*t, 0.125)).collect(),
        };
        let v: serde_json::Value = serde_json::from_str(&r.to_log_line(7)).unwrap();
        assert_eq!(v["step"], 7);
        assert_eq!(v["per_tap"]["relu3_3"], 0.125);
        for k in ["total", "style", "content", "ssim"] {
            assert!(v[k].is_number());
        }
    }
}
