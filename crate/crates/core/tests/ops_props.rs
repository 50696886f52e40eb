mod common;

use common::{channel_stats, rng, symmetric_eigenvalues};
use proptest::prelude::*;
use umfa::graph::{Eager, Graph};
use umfa::net::{adain, ADAIN_EPS};
use umfa::ops::{concat_channels, conv2d, gram, maxpool2d, upsample_nearest};
use umfa::{Shape, Tensor};

fn tensor(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform([n, c, h, w], -1.0, 1.0, &mut rng(seed))
}

/// Direct nested-loop convolution.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let oh = (xs.h + 2 * pad - ws.h) / stride + 1;
    let ow = (xs.w + 2 * pad - ws.w) / stride + 1;
    Tensor::from_fn([xs.n, ws.n, oh, ow], |n, co, oy, ox| {
        let mut acc = b.data()[co];
        for ci in 0..xs.c {
            for ky in 0..ws.h {
                for kx in 0..ws.w {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if iy < 0 || ix < 0 || iy >= xs.h as isize || ix >= xs.w as isize {
                        continue;
                    }
                    acc += w.at(co, ci, ky, kx) * x.at(n, ci, iy as usize, ix as usize);
                }
            }
        }
        acc
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn maxpool_undoes_upsample(n in 1usize..3, c in 1usize..5, h in 1usize..7, w in 1usize..7, seed in any::<u64>()) {
        let x = tensor(n, c, h, w, seed);
        let (y, _) = maxpool2d(&upsample_nearest(&x)).unwrap();
        prop_assert_eq!(y, x);
    }

    #[test]
    fn concat_slices_back(c1 in 1usize..5, c2 in 1usize..5, h in 1usize..6, seed in any::<u64>()) {
        let a = tensor(2, c1, h, h + 1, seed);
        let b = tensor(2, c2, h, h + 1, seed ^ 1);
        let ab = concat_channels(&a, &b).unwrap();
        prop_assert_eq!(ab.shape(), Shape::new(2, c1 + c2, h, h + 1));
        prop_assert_eq!(ab.channels(0, c1).unwrap(), a);
        prop_assert_eq!(ab.channels(c1, c1 + c2).unwrap(), b);
    }

    #[test]
    fn conv_matches_nested_loops(
        ci in 1usize..6, co in 1usize..11, k in prop::sample::select(vec![1usize, 3]),
        h in 3usize..10, w in 3usize..10, stride in 1usize..3, seed in any::<u64>(),
    ) {
        let pad = k / 2;
        let x = tensor(2, ci, h, w, seed);
        let wt = tensor(co, ci, k, k, seed ^ 2);
        let b = tensor(co, 1, 1, 1, seed ^ 3);
        let got = conv2d(&x, &wt, &b, stride, pad).unwrap();
        let want = conv_oracle(&x, &wt, &b, stride, pad);
        prop_assert_eq!(got.shape(), want.shape());
        // Same summation order, so the results agree bit for bit.
        prop_assert_eq!(got, want);
    }

    #[test]
    fn adain_moves_moments_to_style(c in 1usize..5, seed in any::<u64>(), scale in 0.2f64..3.0, shift in -2.0f64..2.0) {
        let content = tensor(1, c, 6, 6, seed).map(|v| v * scale);
        let style = tensor(1, c, 4, 5, seed ^ 5).map(|v| v * 2.0 + shift);
        let mut g = Eager::new();
        let (cv, sv) = (g.constant(content.clone()), g.constant(style.clone()));
        let out = adain(&mut g, &cv, &sv, 0.0).unwrap();
        let out = g.tensor(&out).cast::<f32>();
        prop_assert_eq!(out.shape(), content.shape());
        for (o, s) in channel_stats(&out).iter().zip(channel_stats(&style.cast())) {
            prop_assert!((o.0 - s.0).abs() < 1e-5 && (o.1 - s.1).abs() < 1e-5, "{:?} vs {:?}", o, s);
        }
        let same = adain(&mut g, &cv, &cv, ADAIN_EPS).unwrap();
        prop_assert!(g.tensor(&same).max_abs_diff(&content) < 1e-5);
    }

    #[test]
    fn gram_is_symmetric_psd(c in 1usize..5, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let x = tensor(1, c, h, w, seed);
        let gm = gram(&x);
        let m: Vec<Vec<f64>> = gm.data().chunks(c).map(|r| r.to_vec()).collect();
        for i in 0..c {
            for j in 0..c {
                prop_assert_eq!(m[i][j], m[j][i]);
            }
        }
        let trace: f64 = (0..c).map(|i| m[i][i]).sum();
        for e in symmetric_eigenvalues(m) {
            prop_assert!(e >= -1e-10 * trace.max(1.0), "eigenvalue {}", e);
        }
    }
}
