//! The UMFA network: a dense-block U-Net whose skip connections pass
//! through a transfer module (feature aggregation followed by AdaIN).
//!
//! Layout for base width `w` (level `k` has `w * 2^k` channels):
//!
//! ```text
//! image ─ stem ─ f0 ─ ddb1 ─ f1 ─ ddb2 ─ f2 ─ ddb3 ─ f3 ─ ddb4 ─ f4
//!                 │           │           │           │           │
//!              transfer    transfer    transfer    transfer    transfer
//!                 │           │           │           │           │
//! out ─ conv ─── ucb0 ────── ucb1 ────── ucb2 ────── ucb3 ─────── ┘
//! ```

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::{Real, Shape, Tensor};

pub const LEVELS: usize = 5;
pub const DEFAULT_WIDTH: usize = 32;
pub const ADAIN_EPS: f64 = 1e-5;

/// How encoder levels are fused before stylization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationStrategy {
    /// Skip features go to AdaIN untouched.
    None,
    /// All shallower levels are pooled into the deepest one.
    Bfa,
    /// Each level is fused with the pooled aggregate of the level above it.
    #[default]
    Mfa,
}

impl AggregationStrategy {
    pub const ALL: [AggregationStrategy; 3] = [Self::None, Self::Bfa, Self::Mfa];

    pub fn token(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Bfa => "bfa",
            Self::Mfa => "mfa",
        }
    }
}

impl fmt::Display for AggregationStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for AggregationStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.token() == s)
            .ok_or_else(|| Error::Config(format!("unknown aggregation strategy {s:?}; expected one of mfa, bfa, none")))
    }
}

/// Five encoder levels, shallow to deep.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<V> {
    pub levels: [V; LEVELS],
}

impl<V> FeaturePyramid<V> {
    pub fn shapes<T: Real, G: Graph<T, Value = V>>(&self, g: &G) -> [Shape; LEVELS] {
        std::array::from_fn(|k| g.shape(&self.levels[k]))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl ConvSpec {
    fn new(name: impl Into<String>, c_in: usize, c_out: usize, k: usize) -> Self {
        ConvSpec {
            name: name.into(),
            c_in,
            c_out,
            k,
        }
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.c_out, self.c_in, self.k, self.k)
    }

    pub fn bias_shape(&self) -> Shape {
        Shape::new(self.c_out, 1, 1, 1)
    }
}

pub fn level_width(width: usize, level: usize) -> usize {
    width << level
}

/// Every convolution of the network, in parameter order.
pub fn conv_layout(width: usize) -> Vec<ConvSpec> {
    let l = |k| level_width(width, k);
    let mut specs = vec![ConvSpec::new("stem", 3, l(0), 3)];
    for k in 1..LEVELS {
        let c = l(k - 1);
        specs.push(ConvSpec::new(format!("ddb{k}.dense.conv1"), c, c, 3));
        specs.push(ConvSpec::new(format!("ddb{k}.dense.conv2"), 2 * c, c, 3));
        specs.push(ConvSpec::new(format!("ddb{k}.dense.conv3"), 3 * c, c, 3));
        specs.push(ConvSpec::new(format!("ddb{k}.reduce1"), 4 * c, 2 * c, 1));
        specs.push(ConvSpec::new(format!("ddb{k}.reduce2"), 2 * c, 2 * c, 1));
    }
    for k in 1..LEVELS {
        specs.push(ConvSpec::new(format!("mfa.fuse{k}"), l(k - 1) + l(k), l(k), 1));
    }
    specs.push(ConvSpec::new("bfa.fuse", (0..LEVELS).map(l).sum(), l(LEVELS - 1), 1));
    for k in 0..LEVELS - 1 {
        specs.push(ConvSpec::new(format!("ucb{k}.up"), l(k + 1), l(k), 3));
        specs.push(ConvSpec::new(format!("ucb{k}.fuse"), 2 * l(k), l(k), 1));
        specs.push(ConvSpec::new(format!("ucb{k}.refine"), l(k), l(k), 3));
    }
    specs.push(ConvSpec::new("out", l(0), 3, 3));
    specs
}

/// Named parameter tensors (`<conv>.weight`, `<conv>.bias`) in layout order.
#[derive(Clone, Debug)]
pub struct ModelParams<T: Real = f32> {
    width: usize,
    names: Vec<String>,
    tensors: Vec<Arc<Tensor<T>>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ModelParams<T> {
    /// Declared (name, shape) pairs for a given base width.
    pub fn declared(width: usize) -> Vec<(String, Shape)> {
        conv_layout(width)
            .into_iter()
            .flat_map(|c| [(format!("{}.weight", c.name), c.weight_shape()), (format!("{}.bias", c.name), c.bias_shape())])
            .collect()
    }

    /// He-uniform weights (`bound = sqrt(6 / fan_in)`), zero biases.
    pub fn init(width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut named = Vec::new();
        for spec in conv_layout(width) {
            let bound = (6.0 / (spec.c_in * spec.k * spec.k) as f64).sqrt();
            let mut w = Tensor::zeros(spec.weight_shape());
            for v in w.data_mut() {
                *v = T::from_f64(rng.gen_range(-bound..bound));
            }
            named.push((format!("{}.weight", spec.name), w));
            named.push((format!("{}.bias", spec.name), Tensor::zeros(spec.bias_shape())));
        }
        Self::from_named(width, named).expect("layout is self-consistent")
    }

    /// Assemble from named tensors, which must match the declared set exactly.
    pub fn from_named(width: usize, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut by_name: HashMap<String, Tensor<T>> = HashMap::new();
        for (name, t) in named {
            if by_name.insert(name.clone(), t).is_some() {
                return Err(Error::Config(format!("duplicate parameter {name}")));
            }
        }
        let declared = Self::declared(width);
        let mut names = Vec::with_capacity(declared.len());
        let mut tensors = Vec::with_capacity(declared.len());
        for (name, shape) in declared {
            let t = by_name.remove(&name).ok_or_else(|| Error::MissingParam(name.clone()))?;
            if t.shape() != shape {
                return Err(Error::LayerShape {
                    layer: name,
                    expected: shape,
                    found: t.shape(),
                });
            }
            names.push(name);
            tensors.push(Arc::new(t.with_requires_grad(true)));
        }
        if let Some(extra) = by_name.into_keys().min() {
            return Err(Error::UnexpectedParam(extra));
        }
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(ModelParams {
            width,
            names,
            tensors,
            index,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter().map(|t| &**t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &*self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = *self.index.get(name)?;
        Some(Arc::make_mut(&mut self.tensors[i]))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.iter_mut().map(Arc::make_mut)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in self.tensors_mut() {
            t.grad = Some(vec![T::ZERO; t.numel()]);
        }
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            width: self.width,
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Arc::new(t.cast())).collect(),
            index: self.index.clone(),
        }
    }

    /// Register every parameter as a leaf of `g`.
    pub fn bind<G: Graph<T>>(&self, g: &mut G) -> Bound<'_, T, G::Value> {
        Bound {
            params: self,
            values: self.tensors.iter().map(|t| g.leaf(Arc::clone(t))).collect(),
        }
    }

    /// Accumulate tape gradients into the parameters' grad slots.
    pub fn absorb_grads(&mut self, bound: &[Var], grads: &Gradients<T>) {
        for (t, &v) in self.tensors.iter_mut().zip(bound) {
            grads.accumulate_into(v, Arc::make_mut(t));
        }
    }
}

/// Parameters registered on a particular graph.
pub struct Bound<'p, T: Real, V> {
    params: &'p ModelParams<T>,
    values: Vec<V>,
}

impl<T: Real, V: Clone> Bound<'_, T, V> {
    pub fn values(&self) -> &[V] {
        &self.values
    }

    pub fn width(&self) -> usize {
        self.params.width
    }

    fn conv(&self, name: &str) -> (&V, &V) {
        let w = self.params.index[&format!("{name}.weight")];
        let b = self.params.index[&format!("{name}.bias")];
        (&self.values[w], &self.values[b])
    }
}

fn conv<T: Real, G: Graph<T>>(g: &mut G, p: &Bound<T, G::Value>, name: &str, x: &G::Value, relu: bool) -> Result<G::Value> {
    let (w, b) = p.conv(name);
    let pad = g.shape(w).h / 2;
    let y = g.conv2d(x, w, b, 1, pad)?;
    Ok(if relu { g.relu(&y) } else { y })
}

/// Three densely connected 3x3 convs; `c` channels in, `4c` out.
pub fn dense_block<T: Real, G: Graph<T>>(g: &mut G, p: &Bound<T, G::Value>, prefix: &str, x: &G::Value) -> Result<G::Value> {
    let o1 = conv(g, p, &format!("{prefix}.conv1"), x, true)?;
    let cat1 = g.concat_channels(x, &o1)?;
    let o2 = conv(g, p, &format!("{prefix}.conv2"), &cat1, true)?;
    let cat2 = g.concat_channels(&cat1, &o2)?;
    let o3 = conv(g, p, &format!("{prefix}.conv3"), &cat2, true)?;
    g.concat_channels(&cat2, &o3)
}

/// Downsampling dense block `k` (1-based): halves the spatial size and
/// doubles the channel count.
pub fn ddb<T: Real, G: Graph<T>>(g: &mut G, p: &Bound<T, G::Value>, k: usize, x: &G::Value) -> Result<G::Value> {
    let pooled = g.maxpool2d(x)?;
    let dense = dense_block(g, p, &format!("ddb{k}.dense"), &pooled)?;
    let r1 = conv(g, p, &format!("ddb{k}.reduce1"), &dense, true)?;
    conv(g, p, &format!("ddb{k}.reduce2"), &r1, true)
}

pub(crate) fn require_divisible(s: Shape, multiple: usize) -> Result<()> {
    for side in [s.h, s.w] {
        if side % multiple != 0 || side == 0 {
            let down = side / multiple * multiple;
            let up = down + multiple;
            let suggested = if down == 0 || side - down >= up - side { up } else { down };
            return Err(Error::Indivisible {
                size: side,
                multiple,
                suggested,
            });
        }
    }
    Ok(())
}

/// Square image sizes must be multiples of 16 (four 2x poolings).
pub fn validate_image_size(size: usize) -> Result<()> {
    require_divisible(Shape::new(1, 3, size, size), 16)
}

pub fn encode<T: Real, G: Graph<T>>(g: &mut G, p: &Bound<T, G::Value>, image: &G::Value) -> Result<FeaturePyramid<G::Value>> {
    let s = g.shape(image);
    if s.c != 3 {
        return Err(Error::InvalidShape(format!("encoder expects 3 channels, got {s}")));
    }
    require_divisible(s, 16)?;
    let f0 = conv(g, p, "stem", image, true)?;
    let f1 = ddb(g, p, 1, &f0)?;
    let f2 = ddb(g, p, 2, &f1)?;
    let f3 = ddb(g, p, 3, &f2)?;
    let f4 = ddb(g, p, 4, &f3)?;
    Ok(FeaturePyramid {
        levels: [f0, f1, f2, f3, f4],
    })
}

pub fn mfa_aggregate<T: Real, G: Graph<T>>(
    g: &mut G,
    p: &Bound<T, G::Value>,
    pyr: &FeaturePyramid<G::Value>,
    strategy: AggregationStrategy,
) -> Result<FeaturePyramid<G::Value>> {
    match strategy {
        AggregationStrategy::None => Ok(pyr.clone()),
        AggregationStrategy::Mfa => {
            let mut levels = pyr.levels.clone();
            for k in 1..LEVELS {
                let prev = g.maxpool2d(&levels[k - 1])?;
                let cat = g.concat_channels(&prev, &pyr.levels[k])?;
                levels[k] = conv(g, p, &format!("mfa.fuse{k}"), &cat, true)?;
            }
            Ok(FeaturePyramid { levels })
        }
        AggregationStrategy::Bfa => {
            let mut acc: Option<G::Value> = None;
            for k in 0..LEVELS {
                let mut x = pyr.levels[k].clone();
                for _ in k..LEVELS - 1 {
                    x = g.maxpool2d(&x)?;
                }
                acc = Some(match acc {
                    Some(a) => g.concat_channels(&a, &x)?,
                    None => x,
                });
            }
            let mut levels = pyr.levels.clone();
            levels[LEVELS - 1] = conv(g, p, "bfa.fuse", &acc.expect("five levels"), true)?;
            Ok(FeaturePyramid { levels })
        }
    }
}

/// Shift per-channel content statistics onto the style's:
/// `std(s) * (c - mean(c)) / std(c) + mean(s)`.
pub fn adain<T: Real, G: Graph<T>>(g: &mut G, content: &G::Value, style: &G::Value, eps: f64) -> Result<G::Value> {
    let (sc, ss) = (g.shape(content), g.shape(style));
    if sc.c != ss.c || sc.n != ss.n {
        return Err(Error::ShapeMismatch {
            op: "adain",
            lhs: sc,
            rhs: ss,
        });
    }
    let (mc, sdc) = g.channel_moments(content, eps);
    let (ms, sds) = g.channel_moments(style, eps);
    let centered = g.sub(content, &mc)?;
    let normed = g.div(&centered, &sdc)?;
    let scaled = g.mul(&normed, &sds)?;
    g.add(&scaled, &ms)
}

pub fn transfer<T: Real, G: Graph<T>>(
    g: &mut G,
    p: &Bound<T, G::Value>,
    content: &FeaturePyramid<G::Value>,
    style: &FeaturePyramid<G::Value>,
    strategy: AggregationStrategy,
) -> Result<FeaturePyramid<G::Value>> {
    let ac = mfa_aggregate(g, p, content, strategy)?;
    let as_ = mfa_aggregate(g, p, style, strategy)?;
    let mut levels = Vec::with_capacity(LEVELS);
    for k in 0..LEVELS {
        levels.push(adain(g, &ac.levels[k], &as_.levels[k], ADAIN_EPS)?);
    }
    Ok(FeaturePyramid {
        levels: levels.try_into().ok().expect("five levels"),
    })
}

/// Upsampling block that restores the skip level's width.
pub fn ucb<T: Real, G: Graph<T>>(g: &mut G, p: &Bound<T, G::Value>, k: usize, up_input: &G::Value, skip: &G::Value) -> Result<G::Value> {
    let x = g.upsample_nearest(up_input);
    let (sx, ss) = (g.shape(&x), g.shape(skip));
    if (sx.n, sx.h, sx.w) != (ss.n, ss.h, ss.w) {
        return Err(Error::ShapeMismatch {
            op: "ucb (upsampled input vs skip)",
            lhs: sx,
            rhs: ss,
        });
    }
    let x = conv(g, p, &format!("ucb{k}.up"), &x, true)?;
    let x = g.concat_channels(&x, skip)?;
    let x = conv(g, p, &format!("ucb{k}.fuse"), &x, true)?;
    conv(g, p, &format!("ucb{k}.refine"), &x, true)
}

pub fn decode<T: Real, G: Graph<T>>(g: &mut G, p: &Bound<T, G::Value>, pyr: &FeaturePyramid<G::Value>) -> Result<G::Value> {
    let mut x = pyr.levels[LEVELS - 1].clone();
    for k in (0..LEVELS - 1).rev() {
        x = ucb(g, p, k, &x, &pyr.levels[k])?;
    }
    let y = conv(g, p, "out", &x, false)?;
    Ok(g.sigmoid(&y))
}

/// End-to-end: the output has the content's resolution.
pub fn stylize<T: Real, G: Graph<T>>(
    g: &mut G,
    p: &Bound<T, G::Value>,
    content: &G::Value,
    style: &G::Value,
    strategy: AggregationStrategy,
) -> Result<G::Value> {
    let cp = encode(g, p, content)?;
    let sp = encode(g, p, style)?;
    let stylized = transfer(g, p, &cp, &sp, strategy)?;
    decode(g, p, &stylized)
}

/// Inference convenience without a tape.
pub fn stylize_image(params: &ModelParams<f32>, content: &Tensor<f32>, style: &Tensor<f32>, strategy: AggregationStrategy) -> Result<Tensor<f32>> {
    let mut g = crate::graph::Eager::new();
    let bound = params.bind(&mut g);
    let c = g.constant(content.clone());
    let s = g.constant(style.clone());
    let out = stylize(&mut g, &bound, &c, &s, strategy)?;
    drop(bound);
    Ok(Arc::try_unwrap(out).unwrap_or_else(|a| (*a).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Eager;

    fn image(s: usize, seed: u64) -> Arc<Tensor<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Arc::new(Tensor::rand_uniform([1, 3, s, s], 0.0, 1.0, &mut rng))
    }

    #[test]
    fn strategy_tokens_round_trip() {
        for s in AggregationStrategy::ALL {
            assert_eq!(s.token().parse::<AggregationStrategy>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.token()));
        }
        assert!("bottom".parse::<AggregationStrategy>().unwrap_err().to_string().contains("mfa, bfa, none"));
    }

    #[test]
    fn declared_names_unique_and_kernels_odd() {
        let declared = ModelParams::<f32>::declared(32);
        let mut names: Vec<_> = declared.iter().map(|(n, _)| n.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), declared.len());
        for spec in conv_layout(32) {
            assert!(spec.k == 1 || spec.k == 3);
        }
        // stem + 4*5 ddb + 5 fuse + 4*3 ucb + out
        assert_eq!(conv_layout(32).len(), 1 + 20 + 5 + 12 + 1);
    }

    #[test]
    fn dense_block_width_and_zero_passthrough() {
        let mut params = ModelParams::<f32>::init(8, 3);
        for n in ["ddb1.dense.conv1", "ddb1.dense.conv2", "ddb1.dense.conv3"] {
            params.get_mut(&format!("{n}.weight")).unwrap().data_mut().fill(0.0);
        }
        let mut g = Eager::new();
        let p = params.bind(&mut g);
        let x = g.leaf(Arc::new(Tensor::from_fn([1, 8, 16, 16], |_, c, y, x| (c + y * x) as f32 * 0.01)));
        let y = dense_block(&mut g, &p, "ddb1.dense", &x).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 32, 16, 16));
        assert_eq!(y.channels(0, 8).unwrap().data(), x.data());
        assert!(y.channels(8, 32).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ddb_doubles_channels_halves_space() {
        let params = ModelParams::<f32>::init(32, 0);
        let mut g = Eager::new();
        let p = params.bind(&mut g);
        let x = g.leaf(Arc::new(Tensor::full([1, 256, 32, 32], 0.1f32)));
        assert_eq!(ddb(&mut g, &p, 4, &x).unwrap().shape(), Shape::new(1, 512, 16, 16));
        let odd = g.leaf(Arc::new(Tensor::full([1, 256, 31, 32], 0.1f32)));
        assert!(ddb(&mut g, &p, 4, &odd).is_err());
    }

    #[test]
    fn encode_rejects_indivisible_with_suggestion() {
        let params = ModelParams::<f32>::init(4, 0);
        let mut g = Eager::new();
        let p = params.bind(&mut g);
        let x = g.leaf(Arc::new(Tensor::full([1, 3, 70, 70], 0.5f32)));
        match encode(&mut g, &p, &x) {
            Err(Error::Indivisible { size: 70, suggested: 64, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn encode_shapes_at_64() {
        let params = ModelParams::<f32>::init(32, 0);
        let mut g = Eager::new();
        let p = params.bind(&mut g);
        let x = g.leaf(image(64, 1));
        let pyr = encode(&mut g, &p, &x).unwrap();
        let want = [(32, 64), (64, 32), (128, 16), (256, 8), (512, 4)];
        for (s, (c, hw)) in pyr.shapes(&g).iter().zip(want) {
            assert_eq!(*s, Shape::new(1, c, hw, hw));
        }
    }

    #[test]
    fn adain_hand_case_collapses_to_style_mean() {
        let mut g = Eager::new();
        let c = g.leaf(Arc::new(Tensor::new([1, 1, 2, 2], vec![1.0f64, 2., 3., 4.]).unwrap()));
        let s = g.leaf(Arc::new(Tensor::full([1, 1, 2, 2], 10.0f64)));
        let out = adain(&mut g, &c, &s, 0.0).unwrap();
        assert!(out.data().iter().all(|&v| (v - 10.0).abs() < 1e-12));
        let bad = g.leaf(Arc::new(Tensor::full([1, 2, 2, 2], 1.0f64)));
        assert!(adain(&mut g, &c, &bad, 0.0).is_err());
    }

    #[test]
    fn adain_constant_style_stays_finite() {
        let mut g = Eager::new();
        let c = g.leaf(Arc::new(Tensor::full([1, 2, 4, 4], 3.0f32)));
        let s = g.leaf(Arc::new(Tensor::full([1, 2, 2, 2], -1.0f32)));
        let out = adain(&mut g, &c, &s, ADAIN_EPS).unwrap();
        assert!(out.all_finite());
    }

    #[test]
    fn ucb_channel_bookkeeping_and_mismatch() {
        let params = ModelParams::<f32>::init(4, 0);
        let mut g = Eager::new();
        let p = params.bind(&mut g);
        let up = g.leaf(Arc::new(Tensor::full([1, 64, 2, 2], 0.3f32)));
        let skip = g.leaf(Arc::new(Tensor::full([1, 32, 4, 4], 0.3f32)));
        assert_eq!(ucb(&mut g, &p, 3, &up, &skip).unwrap().shape(), Shape::new(1, 32, 4, 4));
        let wrong = g.leaf(Arc::new(Tensor::full([1, 32, 8, 8], 0.3f32)));
        assert!(ucb(&mut g, &p, 3, &up, &wrong).is_err());
    }

    #[test]
    fn stylize_keeps_content_resolution() {
        let params = ModelParams::<f32>::init(4, 9);
        let out = stylize_image(&params, &image(32, 1), &image(64, 2), AggregationStrategy::Mfa).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 3, 32, 32));
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let again = stylize_image(&params, &image(32, 1), &image(64, 2), AggregationStrategy::Mfa).unwrap();
        assert_eq!(out, again);
    }
}
