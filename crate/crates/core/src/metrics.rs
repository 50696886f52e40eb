//! Evaluation criteria (SSIM against the content, Gram loss against the
//! style) and the stylization runtime benchmark.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Eager, Graph};
use crate::image_io::load_image;
use crate::losses::{ssim, style_loss};
use crate::net::{validate_image_size, stylize_image, AggregationStrategy, ModelParams};
use crate::tensor::Tensor;
use crate::vgg::LossNetwork;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ssim: f64,
    pub gram_loss: f64,
}

/// `ssim = SSIM(output, content)`, `gram_loss = style_loss(output, style)`.
pub fn evaluate(content: &Tensor<f32>, style: &Tensor<f32>, output: &Tensor<f32>, phi: &LossNetwork<f32>) -> Result<EvalReport> {
    if output.shape() != content.shape() {
        return Err(Error::ShapeMismatch {
            op: "evaluate",
            lhs: output.shape(),
            rhs: content.shape(),
        });
    }
    let mut g = Eager::new();
    let o = g.constant(output.clone());
    let c = g.constant(content.clone());
    let s = g.constant(style.clone());
    let ssim_v = ssim(&mut g, &o, &c)?.item() as f64;
    let (gram, _) = style_loss(&mut g, phi, &o, &s)?;
    Ok(EvalReport {
        ssim: ssim_v,
        gram_loss: gram.item() as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirReport {
    pub mean: EvalReport,
    pub triples: BTreeMap<String, EvalReport>,
}

/// Evaluate every `<name>_content`, `<name>_style`, `<name>_output` triple
/// in `dir` and average the results.
pub fn evaluate_dir(dir: impl AsRef<Path>, phi: &LossNetwork<f32>) -> Result<DirReport> {
    let dir = dir.as_ref();
    let mut groups: BTreeMap<String, [Option<PathBuf>; 3]> = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        for (slot, suffix) in ["_content", "_style", "_output"].iter().enumerate() {
            if let Some(name) = stem.strip_suffix(suffix) {
                groups.entry(name.to_string()).or_default()[slot] = Some(path.clone());
            }
        }
    }
    let mut triples = BTreeMap::new();
    for (name, members) in groups {
        let [Some(c), Some(s), Some(o)] = members else {
            warn!("incomplete triple {name}, skipped");
            continue;
        };
        let report = evaluate(&load_image(c)?, &load_image(s)?, &load_image(o)?, phi)?;
        triples.insert(name, report);
    }
    if triples.is_empty() {
        return Err(Error::Config(format!("no complete triples in {}", dir.display())));
    }
    let n = triples.len() as f64;
    let mean = EvalReport {
        ssim: triples.values().map(|r| r.ssim).sum::<f64>() / n,
        gram_loss: triples.values().map(|r| r.gram_loss).sum::<f64>() / n,
    };
    Ok(DirReport { mean, triples })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub size: usize,
    pub median_s: f64,
    pub runs: usize,
    pub thread_count: usize,
}

/// The engine runs every kernel on the calling thread.
pub const BENCH_THREADS: usize = 1;

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// One warm-up call, then the median wall-clock time of `runs` stylize
/// calls per size on seeded random images. Only the forward pass is timed.
pub fn bench(params: &ModelParams<f32>, sizes: &[usize], runs: usize, strategy: AggregationStrategy) -> Result<Vec<BenchRow>> {
    if runs == 0 {
        return Err(Error::Config("runs must be >= 1".into()));
    }
    for &s in sizes {
        validate_image_size(s)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let content = Tensor::rand_uniform([1, 3, size, size], 0.0, 1.0, &mut rng);
        let style = Tensor::rand_uniform([1, 3, size, size], 0.0, 1.0, &mut rng);
        stylize_image(params, &content, &style, strategy)?;
        let mut times = Vec::with_capacity(runs);
        for _ in 0..runs {
            let t0 = Instant::now();
            let out = stylize_image(params, &content, &style, strategy)?;
            times.push(t0.elapsed().as_secs_f64());
            drop(out);
        }
        rows.push(BenchRow {
            size,
            median_s: median(times),
            runs,
            thread_count: BENCH_THREADS,
        });
    }
    Ok(rows)
}

pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut out = String::from("size    median_s   runs  threads\n");
    for r in rows {
        let _ = writeln!(out, "{:<7} {:<10.4} {:<5} {}", r.size, r.median_s, r.runs, r.thread_count);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn table_has_a_row_per_size() {
        let rows = vec![
            BenchRow {
                size: 256,
                median_s: 0.5,
                runs: 5,
                thread_count: 1,
            },
            BenchRow {
                size: 512,
                median_s: 2.0,
                runs: 5,
                thread_count: 1,
            },
        ];
        assert_eq!(bench_table(&rows).lines().count(), 3);
    }

    #[test]
    fn size_mismatch_rejected() {
        let phi = LossNetwork::seeded(0);
        let a = Tensor::full([1, 3, 16, 16], 0.5f32);
        let b = Tensor::full([1, 3, 32, 32], 0.5f32);
        assert!(matches!(evaluate(&a, &a, &b, &phi), Err(Error::ShapeMismatch { .. })));
    }
}
