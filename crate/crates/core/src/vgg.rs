//! Frozen VGG16-topology feature extractor (blocks 1-4) used by the losses.
//!
//! Weights come either from a deterministic seeded init or from an external
//! manifest + blob pair. The manifest is line oriented:
//!
//! ```text
//! # comments and blank lines are ignored
//! preprocess mean=0.485,0.456,0.406 std=0.229,0.224,0.225
//! block1_conv1.weight 64x3x3x3 vgg16.bin 0
//! block1_conv1.bias 64 vgg16.bin 6912
//! ```
//!
//! Each tensor line is `name shape blob_file byte_offset`; shapes with fewer
//! than four dims are padded with trailing ones. Blob paths are relative to
//! the manifest's directory.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::net::require_divisible;
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TapId {
    #[serde(rename = "relu1_2")]
    Relu1_2,
    #[serde(rename = "relu2_2")]
    Relu2_2,
    #[serde(rename = "relu3_3")]
    Relu3_3,
    #[serde(rename = "relu4_3")]
    Relu4_3,
}

impl TapId {
    pub const ALL: [TapId; 4] = [TapId::Relu1_2, TapId::Relu2_2, TapId::Relu3_3, TapId::Relu4_3];

    pub fn name(self) -> &'static str {
        match self {
            TapId::Relu1_2 => "relu1_2",
            TapId::Relu2_2 => "relu2_2",
            TapId::Relu3_3 => "relu3_3",
            TapId::Relu4_3 => "relu4_3",
        }
    }

    /// 1-based VGG block holding the tap.
    pub fn block(self) -> usize {
        self as usize + 1
    }
}

impl fmt::Display for TapId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// (block, convs in block, output width)
const BLOCKS: [(usize, usize, usize); 4] = [(1, 2, 64), (2, 2, 128), (3, 3, 256), (4, 3, 512)];

/// Conv layer names and weight shapes in forward order.
pub fn vgg_layout() -> Vec<(String, Shape)> {
    let mut c_in = 3;
    let mut out = Vec::new();
    for (block, convs, width) in BLOCKS {
        for j in 1..=convs {
            out.push((format!("block{block}_conv{j}"), Shape::new(width, c_in, 3, 3)));
            c_in = width;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossNetSource {
    SeededRandom { seed: u64 },
    ExternalWeights { manifest: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

struct ConvLayer<T: Real> {
    name: String,
    weight: Arc<Tensor<T>>,
    bias: Arc<Tensor<T>>,
}

pub struct LossNetwork<T: Real = f32> {
    layers: Vec<ConvLayer<T>>,
    source: LossNetSource,
    preprocess: Option<Preprocess>,
    /// Parameter hash taken at construction.
    recorded_hash: String,
}

impl<T: Real> LossNetwork<T> {
    fn assemble(layers: Vec<ConvLayer<T>>, source: LossNetSource, preprocess: Option<Preprocess>) -> Self {
        let mut net = LossNetwork {
            layers,
            source,
            preprocess,
            recorded_hash: String::new(),
        };
        net.recorded_hash = net.content_hash();
        net
    }

    /// He-uniform init from `seed`, zero biases, no preprocessing.
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let layers = vgg_layout()
            .into_iter()
            .map(|(name, shape)| {
                let bound = (6.0 / (shape.c * 9) as f64).sqrt();
                let mut w = Tensor::<T>::zeros(shape);
                for v in w.data_mut() {
                    *v = T::from_f64(rng.gen_range(-bound..bound));
                }
                ConvLayer {
                    name,
                    weight: Arc::new(w),
                    bias: Arc::new(Tensor::zeros([shape.n, 1, 1, 1])),
                }
            })
            .collect();
        Self::assemble(layers, LossNetSource::SeededRandom { seed }, None)
    }

    pub fn source(&self) -> &LossNetSource {
        &self.source
    }

    pub fn preprocess(&self) -> Option<Preprocess> {
        self.preprocess
    }

    pub fn recorded_hash(&self) -> &str {
        &self.recorded_hash
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().map(|l| l.name.as_str())
    }

    /// SHA-256 over every parameter as little-endian `f32`, in layer order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.layers {
            for t in [&l.weight, &l.bias] {
                for v in t.data() {
                    h.update((v.to_f64() as f32).to_le_bytes());
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn cast<U: Real>(&self) -> LossNetwork<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| ConvLayer {
                name: l.name.clone(),
                weight: Arc::new(l.weight.cast()),
                bias: Arc::new(l.bias.cast()),
            })
            .collect();
        LossNetwork::assemble(layers, self.source.clone(), self.preprocess)
    }

    /// Run blocks 1-4 up to the deepest requested tap. Gradients flow to the
    /// image through the activations; the weights enter as constants.
    pub fn extract<G: Graph<T>>(&self, g: &mut G, image: &G::Value, taps: &[TapId]) -> Result<BTreeMap<TapId, G::Value>> {
        let s = g.shape(image);
        if s.c != 3 {
            return Err(Error::InvalidShape(format!("loss network expects 3 channels, got {s}")));
        }
        require_divisible(s, 8)?;
        let Some(deepest) = taps.iter().max().copied() else {
            return Ok(BTreeMap::new());
        };

        let mut x = image.clone();
        if let Some(pre) = self.preprocess {
            let mean = Tensor::from_fn([s.n, 3, 1, 1], |_, c, _, _| T::from_f64(pre.mean[c]));
            let std = Tensor::from_fn([s.n, 3, 1, 1], |_, c, _, _| T::from_f64(pre.std[c]));
            let (mean, std) = (g.constant(mean), g.constant(std));
            x = g.sub(&x, &mean)?;
            x = g.div(&x, &std)?;
        }

        let mut out = BTreeMap::new();
        let mut layers = self.layers.iter();
        for (tap, (_, convs, _)) in TapId::ALL.into_iter().zip(BLOCKS) {
            if tap != TapId::Relu1_2 {
                x = g.maxpool2d(&x)?;
            }
            for layer in layers.by_ref().take(convs) {
                let w = g.leaf(Arc::clone(&layer.weight));
                let b = g.leaf(Arc::clone(&layer.bias));
                let y = g.conv2d(&x, &w, &b, 1, 1)?;
                x = g.relu(&y);
            }
            if taps.contains(&tap) {
                out.insert(tap, x.clone());
            }
            if tap == deepest {
                break;
            }
        }
        Ok(out)
    }
}

impl LossNetwork<f32> {
    /// Load weights from a manifest; every layer of the fixed topology must
    /// be present with its exact shape.
    pub fn load_weights(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let mut preprocess = None;
        let mut entries: HashMap<String, (Shape, PathBuf, usize, usize)> = HashMap::new();

        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = |msg: String| Error::Manifest { line: line_no, msg };
            if fields[0] == "preprocess" {
                preprocess = Some(parse_preprocess(&fields[1..]).map_err(bad)?);
                continue;
            }
            if fields.len() != 4 {
                return Err(bad(format!("expected `name shape blob offset`, got {line:?}")));
            }
            let shape = parse_shape(fields[1]).map_err(bad)?;
            let offset: usize = fields[3].parse().map_err(|_| bad(format!("bad byte offset {:?}", fields[3])))?;
            entries.insert(fields[0].to_string(), (shape, dir.join(fields[2]), offset, line_no));
        }

        let mut blobs: HashMap<PathBuf, Vec<u8>> = HashMap::new();
        let mut read_tensor = |name: &str, expected: Shape| -> Result<Tensor<f32>> {
            let (shape, path, offset, _) = entries.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
            if *shape != expected {
                return Err(Error::LayerShape {
                    layer: name.to_string(),
                    expected,
                    found: *shape,
                });
            }
            if !blobs.contains_key(path) {
                let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
                blobs.insert(path.clone(), bytes);
            }
            let bytes = &blobs[path];
            let needed = offset + shape.numel() * 4;
            if bytes.len() < needed {
                return Err(Error::TruncatedBlob {
                    path: path.clone(),
                    needed,
                    len: bytes.len(),
                });
            }
            Tensor::from_le_bytes(*shape, &bytes[*offset..needed])
        };

        let mut layers = Vec::new();
        for (name, shape) in vgg_layout() {
            let weight = read_tensor(&format!("{name}.weight"), shape)?;
            let bias = read_tensor(&format!("{name}.bias"), Shape::new(shape.n, 1, 1, 1))?;
            layers.push(ConvLayer {
                name,
                weight: Arc::new(weight),
                bias: Arc::new(bias),
            });
        }
        Ok(Self::assemble(
            layers,
            LossNetSource::ExternalWeights {
                manifest: manifest_path.to_path_buf(),
            },
            preprocess,
        ))
    }

    /// Write the weights as a manifest plus a single blob next to it.
    pub fn save_weights(&self, manifest_path: impl AsRef<Path>) -> Result<()> {
        let manifest_path = manifest_path.as_ref();
        let blob_name = format!(
            "{}.bin",
            manifest_path.file_name().and_then(|n| n.to_str()).unwrap_or("weights")
        );
        let blob_path = manifest_path.with_file_name(&blob_name);
        let mut manifest = String::from("# loss network weights, little-endian f32\n");
        if let Some(p) = self.preprocess {
            let join = |v: [f64; 3]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
            manifest.push_str(&format!("preprocess mean={} std={}\n", join(p.mean), join(p.std)));
        }
        let mut blob = Vec::new();
        for l in &self.layers {
            for (suffix, t) in [("weight", &l.weight), ("bias", &l.bias)] {
                let s = t.shape();
                manifest.push_str(&format!(
                    "{}.{suffix} {}x{}x{}x{} {blob_name} {}\n",
                    l.name,
                    s.n,
                    s.c,
                    s.h,
                    s.w,
                    blob.len()
                ));
                blob.extend_from_slice(&t.to_le_bytes());
            }
        }
        fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
        fs::write(manifest_path, manifest).map_err(|e| Error::io(manifest_path, e))
    }
}

fn parse_shape(s: &str) -> std::result::Result<Shape, String> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|d| d.parse::<usize>().map_err(|_| format!("bad shape {s:?}")))
        .collect::<std::result::Result<_, _>>()?;
    if dims.is_empty() || dims.len() > 4 || dims.contains(&0) {
        return Err(format!("bad shape {s:?}"));
    }
    let mut full = [1usize; 4];
    full[..dims.len()].copy_from_slice(&dims);
    Ok(Shape::from(full))
}

fn parse_preprocess(fields: &[&str]) -> std::result::Result<Preprocess, String> {
    let mut mean = None;
    let mut std = None;
    for f in fields {
        let (key, vals) = f.split_once('=').ok_or_else(|| format!("bad preprocess field {f:?}"))?;
        let v: Vec<f64> = vals
            .split(',')
            .map(|x| x.parse::<f64>().map_err(|_| format!("bad number in {f:?}")))
            .collect::<std::result::Result<_, _>>()?;
        let arr: [f64; 3] = v.try_into().map_err(|_| format!("{key} needs 3 values"))?;
        match key {
            "mean" => mean = Some(arr),
            "std" => {
                if arr.iter().any(|&s| s <= 0.0) {
                    return Err("std must be positive".into());
                }
                std = Some(arr)
            }
            _ => return Err(format!("unknown preprocess key {key:?}")),
        }
    }
    Ok(Preprocess {
        mean: mean.ok_or("preprocess needs mean=")?,
        std: std.ok_or("preprocess needs std=")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Eager;

    #[test]
    fn topology_has_ten_convs() {
        let layout = vgg_layout();
        assert_eq!(layout.len(), 10);
        assert_eq!(layout[4].0, "block3_conv1");
        assert_eq!(layout[4].1, Shape::new(256, 128, 3, 3));
    }

    #[test]
    fn tap_order_and_names() {
        assert!(TapId::Relu1_2 < TapId::Relu4_3);
        assert_eq!(TapId::Relu3_3.to_string(), "relu3_3");
        assert_eq!(serde_json::to_string(&TapId::Relu2_2).unwrap(), "\"relu2_2\"");
    }

    #[test]
    fn tap_shapes_at_64() {
        let net = LossNetwork::<f32>::seeded(1);
        let mut g = Eager::new();
        let img = g.constant(Tensor::full([1, 3, 64, 64], 0.5f32));
        let taps = net.extract(&mut g, &img, &TapId::ALL).unwrap();
        let want = [(64, 64), (128, 32), (256, 16), (512, 8)];
        for (tap, (c, hw)) in TapId::ALL.into_iter().zip(want) {
            assert_eq!(taps[&tap].shape(), Shape::new(1, c, hw, hw));
        }
    }

    #[test]
    fn extract_stops_at_deepest_requested_tap() {
        let net = LossNetwork::<f32>::seeded(1);
        let mut g = Eager::new();
        let img = g.constant(Tensor::full([1, 3, 16, 16], 0.5f32));
        let taps = net.extract(&mut g, &img, &[TapId::Relu2_2]).unwrap();
        assert_eq!(taps.len(), 1);
        assert_eq!(Graph::<f32>::conv_count(&g), 4);
    }

    #[test]
    fn rejects_indivisible_input() {
        let net = LossNetwork::<f32>::seeded(1);
        let mut g = Eager::new();
        let img = g.constant(Tensor::full([1, 3, 12, 16], 0.5f32));
        assert!(matches!(net.extract(&mut g, &img, &TapId::ALL), Err(Error::Indivisible { .. })));
    }

    #[test]
    fn parse_helpers() {
        assert_eq!(parse_shape("64").unwrap(), Shape::new(64, 1, 1, 1));
        assert_eq!(parse_shape("64x3x3x3").unwrap(), Shape::new(64, 3, 3, 3));
        assert!(parse_shape("64x0").is_err());
        let p = parse_preprocess(&["mean=0.1,0.2,0.3", "std=1,2,3"]).unwrap();
        assert_eq!(p.std, [1.0, 2.0, 3.0]);
        assert!(parse_preprocess(&["mean=0.1,0.2"]).is_err());
    }
}
