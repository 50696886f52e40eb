//! Central finite-difference verification of the backward passes, run in
//! `f64` on the same generic code paths used for training.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::graph::{Graph, Tape, Var};
use crate::losses::{self, LossTargets, LossWeights};
use crate::net::{self, level_width, AggregationStrategy, ModelParams, ADAIN_EPS};
use crate::ops::{gaussian_taps, BinaryOp};
use crate::tensor::{Shape, Tensor};
use crate::vgg::{LossNetwork, TapId};

pub const DELTA: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;
/// Below this magnitude gradients are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub checked: usize,
    /// Elements whose +/- step crossed a ReLU or max-pool switch. These are
    /// differenced with the switches held at the unperturbed pass.
    pub kinks: usize,
    pub max_error: f64,
    /// (input, element, analytic, numeric) at the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub seconds: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_error < TOLERANCE
    }
}

/// Relative error, or absolute error when both values are below [`ABS_FLOOR`].
pub fn grad_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if analytic.abs() < ABS_FLOOR && numeric.abs() < ABS_FLOOR {
        diff
    } else {
        diff / scale
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Sample {
    Every,
    /// The largest-magnitude analytic element of each input.
    LargestPerInput,
}

/// Check `f` with respect to every input. `f` registers the inputs on the
/// tape itself and returns (scalar loss, input handles).
pub fn check<F>(name: &str, inputs: &[Tensor<f64>], sample: Sample, f: F) -> Result<CheckResult>
where
    F: Fn(&mut Tape<f64>, &[Arc<Tensor<f64>>]) -> Result<(Var, Vec<Var>)>,
{
    let start = Instant::now();
    let arcs: Vec<Arc<Tensor<f64>>> = inputs.iter().map(|t| Arc::new(t.clone().with_requires_grad(true))).collect();
    let mut tape = Tape::new();
    let (loss, vars) = f(&mut tape, &arcs)?;
    let grads = tape.backward(loss)?;
    let switches = tape.switches();
    drop(tape);

    let eval = |ins: &[Arc<Tensor<f64>>]| -> Result<(f64, bool)> {
        let mut tape = Tape::new();
        let (loss, _) = f(&mut tape, ins)?;
        Ok((tape.value(loss).item(), tape.switches() == switches))
    };
    let eval_frozen = |ins: &[Arc<Tensor<f64>>]| -> Result<f64> {
        let mut tape = Tape::with_switches(switches.clone());
        let (loss, _) = f(&mut tape, ins)?;
        Ok(tape.value(loss).item())
    };

    let mut result = CheckResult {
        name: name.to_string(),
        checked: 0,
        kinks: 0,
        max_error: 0.0,
        worst: None,
        seconds: 0.0,
    };
    for (i, v) in vars.iter().enumerate() {
        let zeros = vec![0.0; arcs[i].numel()];
        let analytic = grads.get(*v).unwrap_or(&zeros).to_vec();
        let elements: Vec<usize> = match sample {
            Sample::Every => (0..analytic.len()).collect(),
            Sample::LargestPerInput => (0..analytic.len())
                .max_by(|&a, &b| analytic[a].abs().total_cmp(&analytic[b].abs()))
                .into_iter()
                .collect(),
        };
        for j in elements {
            let mut probe = arcs.clone();
            let base = arcs[i].data()[j];
            Arc::make_mut(&mut probe[i]).data_mut()[j] = base + DELTA;
            let (mut plus, same_plus) = eval(&probe)?;
            let minus_probe = {
                Arc::make_mut(&mut probe[i]).data_mut()[j] = base - DELTA;
                probe.clone()
            };
            let (mut minus, same_minus) = eval(&minus_probe)?;
            if !(same_plus && same_minus) {
                result.kinks += 1;
                minus = eval_frozen(&minus_probe)?;
                Arc::make_mut(&mut probe[i]).data_mut()[j] = base + DELTA;
                plus = eval_frozen(&probe)?;
            }
            let numeric = (plus - minus) / (2.0 * DELTA);
            let err = grad_error(analytic[j], numeric);
            result.checked += 1;
            if err >= result.max_error {
                result.max_error = err;
                result.worst = Some((i, j, analytic[j], numeric));
            }
        }
    }
    result.seconds = start.elapsed().as_secs_f64();
    Ok(result)
}

fn leaves(g: &mut Tape<f64>, ins: &[Arc<Tensor<f64>>]) -> Vec<Var> {
    ins.iter().map(|t| g.leaf(Arc::clone(t))).collect()
}

/// `sum(y * r)` for a fixed pseudo-random `r`, so every output element
/// carries a distinct weight.
fn project(g: &mut Tape<f64>, y: &Var) -> Result<Var> {
    let s = g.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(s.numel() as u64);
    let r = g.constant(Tensor::rand_uniform(s, -1.0, 1.0, &mut rng));
    let p = g.mul(y, &r)?;
    Ok(g.sum(&p))
}

fn uniform(shape: impl Into<Shape>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::rand_uniform(shape, lo, hi, rng)
}

/// Values at least `gap` apart in magnitude from zero, with random sign, so
/// ReLU kinks and max-pool ties are never within a finite-difference step.
fn separated(shape: impl Into<Shape>, gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let shape = shape.into();
    let n = shape.numel();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let data = order
        .into_iter()
        .map(|k| {
            let v = (k as f64 + 1.0) * gap;
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).expect("length matches")
}

type Case = (String, Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Arc<Tensor<f64>>]) -> Result<(Var, Vec<Var>)>>);

fn unary(name: &str, x: Tensor<f64>, op: impl Fn(&mut Tape<f64>, &Var) -> Result<Var> + 'static) -> Case {
    (
        name.to_string(),
        vec![x],
        Box::new(move |g, ins| {
            let v = leaves(g, ins);
            let y = op(g, &v[0])?;
            Ok((project(g, &y)?, v))
        }),
    )
}

fn binary_case(name: &str, a: Tensor<f64>, b: Tensor<f64>, op: BinaryOp) -> Case {
    (
        name.to_string(),
        vec![a, b],
        Box::new(move |g, ins| {
            let v = leaves(g, ins);
            let y = g.binary(op, &v[0], &v[1])?;
            Ok((project(g, &y)?, v))
        }),
    )
}

/// Every primitive op on small random inputs (1x2x4x4 unless the op needs
/// more room).
pub fn primitive_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = [1, 2, 4, 4];
    let mut cases: Vec<Case> = Vec::new();

    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1)] {
        let inputs = vec![
            uniform(x, -1.0, 1.0, &mut rng),
            uniform([3, 2, k, k], -1.0, 1.0, &mut rng),
            uniform([3, 1, 1, 1], -1.0, 1.0, &mut rng),
        ];
        cases.push((
            format!("conv2d k{k} stride{stride} pad{pad}"),
            inputs,
            Box::new(move |g, ins| {
                let v = leaves(g, ins);
                let y = g.conv2d(&v[0], &v[1], &v[2], stride, pad)?;
                Ok((project(g, &y)?, v))
            }),
        ));
    }
    cases.push(unary("relu", separated(x, 0.05, &mut rng), |g, v| Ok(g.relu(v))));
    cases.push(unary("sigmoid", uniform(x, -3.0, 3.0, &mut rng), |g, v| Ok(g.sigmoid(v))));
    cases.push(unary("maxpool2d", separated(x, 0.05, &mut rng), |g, v| g.maxpool2d(v)));
    cases.push(unary("upsample_nearest", uniform(x, -1.0, 1.0, &mut rng), |g, v| Ok(g.upsample_nearest(v))));
    cases.push((
        "concat_channels".into(),
        vec![uniform(x, -1.0, 1.0, &mut rng), uniform([1, 3, 4, 4], -1.0, 1.0, &mut rng)],
        Box::new(|g, ins| {
            let v = leaves(g, ins);
            let y = g.concat_channels(&v[0], &v[1])?;
            Ok((project(g, &y)?, v))
        }),
    ));
    cases.push(unary("channel_mean", uniform(x, -1.0, 1.0, &mut rng), |g, v| Ok(g.channel_mean(v))));
    cases.push(unary("channel_std", uniform(x, -1.0, 1.0, &mut rng), |g, v| Ok(g.channel_std(v, ADAIN_EPS))));
    for (name, op) in [("add", BinaryOp::Add), ("sub", BinaryOp::Sub), ("mul", BinaryOp::Mul), ("div", BinaryOp::Div)] {
        let b = |rng: &mut ChaCha8Rng, s: [usize; 4]| {
            let mut t = uniform(s, 0.5, 1.5, rng);
            if rng.gen_bool(0.5) {
                t = t.map(|v| -v);
            }
            t
        };
        let a = uniform(x, -1.0, 1.0, &mut rng);
        let full = b(&mut rng, x);
        cases.push(binary_case(&format!("{name} elementwise"), a.clone(), full, op));
        let bc = b(&mut rng, [1, 2, 1, 1]);
        cases.push(binary_case(&format!("{name} per-channel broadcast"), a, bc, op));
    }
    cases.push(unary("affine_scalar", uniform(x, -1.0, 1.0, &mut rng), |g, v| Ok(g.affine_scalar(v, -1.5, 0.25))));
    cases.push(unary("sum", uniform(x, -1.0, 1.0, &mut rng), |g, v| Ok(g.sum(v))));
    cases.push(unary("mean", uniform(x, -1.0, 1.0, &mut rng), |g, v| Ok(g.mean(v))));
    cases.push(unary("gram", uniform(x, -1.0, 1.0, &mut rng), |g, v| Ok(g.gram(v))));
    cases.push(unary("reshape", uniform(x, -1.0, 1.0, &mut rng), |g, v| g.reshape(v, Shape::new(1, 4, 2, 4))));
    let taps = gaussian_taps(losses::SSIM_WINDOW, losses::SSIM_SIGMA);
    cases.push(unary("blur_valid", uniform([1, 2, 13, 12], -1.0, 1.0, &mut rng), move |g, v| {
        g.blur_valid(v, &taps)
    }));

    cases
        .into_iter()
        .map(|(name, inputs, f)| check(&name, &inputs, Sample::Every, f))
        .collect()
}

/// Network blocks, the loss terms and the full objective with respect to
/// every parameter tensor of a width-4 model on 32x32 images.
pub fn composite_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = 4;
    let params: Arc<ModelParams<f64>> = Arc::new(ModelParams::<f32>::init(width, seed).cast());
    let phi: Arc<LossNetwork<f64>> = Arc::new(LossNetwork::<f32>::seeded(seed).cast());
    let mut out = Vec::new();

    out.push(check(
        "adain",
        &[uniform([1, 2, 4, 4], -1.0, 1.0, &mut rng), uniform([1, 2, 4, 4], -1.0, 1.0, &mut rng)],
        Sample::Every,
        |g, ins| {
            let v = leaves(g, ins);
            let y = net::adain(g, &v[0], &v[1], ADAIN_EPS)?;
            Ok((project(g, &y)?, v))
        },
    )?);

    let p = Arc::clone(&params);
    out.push(check(
        "dense block",
        &[uniform([1, level_width(width, 0), 4, 4], -1.0, 1.0, &mut rng)],
        Sample::Every,
        move |g, ins| {
            let bound = p.bind(g);
            let v = leaves(g, ins);
            let y = net::dense_block(g, &bound, "ddb1.dense", &v[0])?;
            Ok((project(g, &y)?, v))
        },
    )?);

    let p = Arc::clone(&params);
    out.push(check(
        "upsampling block",
        &[
            uniform([1, level_width(width, 1), 2, 2], -1.0, 1.0, &mut rng),
            uniform([1, level_width(width, 0), 4, 4], -1.0, 1.0, &mut rng),
        ],
        Sample::Every,
        move |g, ins| {
            let bound = p.bind(g);
            let v = leaves(g, ins);
            let y = net::ucb(g, &bound, 0, &v[0], &v[1])?;
            Ok((project(g, &y)?, v))
        },
    )?);

    let ph = Arc::clone(&phi);
    out.push(check(
        "loss network relu2_2",
        &[uniform([1, 3, 8, 8], 0.0, 1.0, &mut rng)],
        Sample::Every,
        move |g, ins| {
            let v = leaves(g, ins);
            let feats = ph.extract(g, &v[0], &[TapId::Relu2_2])?;
            Ok((project(g, &feats[&TapId::Relu2_2])?, v))
        },
    )?);

    let a = uniform([1, 3, 16, 16], 0.0, 1.0, &mut rng);
    let b = uniform([1, 3, 16, 16], 0.0, 1.0, &mut rng);
    out.push(check("ssim", &[a, b.clone()], Sample::Every, |g, ins| {
        let v = leaves(g, ins);
        Ok((losses::ssim(g, &v[0], &v[1])?, v))
    })?);

    let content = uniform([1, 3, 32, 32], 0.0, 1.0, &mut rng);
    let style = uniform([1, 3, 32, 32], 0.0, 1.0, &mut rng);
    let output = uniform([1, 3, 32, 32], 0.05, 0.95, &mut rng);
    let targets = Arc::new(LossTargets::compute(&phi, &content, &style)?);

    let (ph, tg, c) = (Arc::clone(&phi), Arc::clone(&targets), content.clone());
    out.push(check("total loss wrt output", &[output], Sample::LargestPerInput, move |g, ins| {
        let v = leaves(g, ins);
        let cv = g.constant(c.clone());
        let terms = losses::total_loss_with_targets(g, &ph, &v[0], &cv, &tg, LossWeights::default())?;
        Ok((terms.total, v))
    })?);

    let names: Vec<String> = params.names().to_vec();
    let tensors: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let (ph, tg) = (Arc::clone(&phi), Arc::clone(&targets));
    out.push(check("total loss wrt every parameter", &tensors, Sample::LargestPerInput, move |g, ins| {
        let named = names.iter().cloned().zip(ins.iter().map(|t| (**t).clone())).collect();
        let model = ModelParams::from_named(width, named)?;
        let bound = model.bind(g);
        let c = g.constant(content.clone());
        let s = g.constant(style.clone());
        let y = net::stylize(g, &bound, &c, &s, AggregationStrategy::Mfa)?;
        let terms = losses::total_loss_with_targets(g, &ph, &y, &c, &tg, LossWeights::default())?;
        Ok((terms.total, bound.values().to_vec()))
    })?);

    Ok(out)
}

pub fn full_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut all = primitive_suite(seed)?;
    all.extend(composite_suite(seed)?);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_measure() {
        assert_eq!(grad_error(2.0, 2.0), 0.0);
        assert!((grad_error(1.0, 1.001) - 0.001 / 1.001).abs() < 1e-15);
        assert!((grad_error(1e-8, 3e-8) - 2e-8).abs() < 1e-20);
    }

    #[test]
    fn kink_straddles_use_frozen_switches() {
        let x = Tensor::new([1, 1, 1, 2], vec![0.0, 0.5]).unwrap();
        let r = check("relu at kink", &[x], Sample::Every, |g, ins| {
            let v = leaves(g, ins);
            let y = g.relu(&v[0]);
            Ok((g.sum(&y), v))
        })
        .unwrap();
        assert_eq!((r.checked, r.kinks), (2, 1));
        assert!(r.passed());
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // The checked input only feeds a detached copy, so its tape gradient is zero.
        let x = Tensor::new([1, 1, 1, 2], vec![0.3, 0.5]).unwrap();
        let r = check("detached", &[x], Sample::Every, |g, ins| {
            let v = leaves(g, ins);
            let doubled = g.scale(&v[0], 2.0);
            let y = g.sum(&doubled);
            let shadow = g.constant((*ins[0]).clone());
            let fake = g.sum(&shadow);
            let loss = g.add(&y, &fake)?;
            Ok((loss, vec![shadow]))
        })
        .unwrap();
        assert!(!r.passed());
    }
}
