mod common;

use std::fs;
use std::path::Path;

use common::random_image;
use umfa::checkpoint::{blob_path, Checkpoint, LossNetEntry};
use umfa::image_io::{decode_image, load_image, resize_center, save_image};
use umfa::vgg::LossNetSource;
use umfa::{Adam, Error, LossNetwork, ModelParams, Tensor, TrainConfig};

fn checkpoint() -> Checkpoint {
    let params = ModelParams::init(4, 3);
    let mut adam = Adam::new(1e-3);
    let mut stepped = params.clone();
    for t in stepped.tensors_mut() {
        let g: Vec<f32> = (0..t.numel()).map(|i| (i as f32 * 0.37).sin()).collect();
        t.accumulate_grad(&g);
    }
    adam.step(stepped.tensors_mut()).unwrap();
    Checkpoint {
        params: stepped,
        config: TrainConfig {
            width: 4,
            ..TrainConfig::default()
        },
        step: 1,
        optimizer: Some(adam),
        loss_network: LossNetEntry {
            source: LossNetSource::SeededRandom { seed: 0 },
            hash: LossNetwork::<f32>::seeded(0).content_hash(),
        },
    }
}

fn manifest_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    let ck = checkpoint();
    ck.save(&a).unwrap();
    let loaded = Checkpoint::load(&a).unwrap();
    assert_eq!(loaded.step, 1);
    assert_eq!(loaded.config, ck.config);
    assert_eq!(loaded.loss_network, ck.loss_network);
    assert_eq!(loaded.optimizer.as_ref().map(|a| a.t), Some(1));
    for ((n1, t1), (n2, t2)) in ck.params.iter().zip(loaded.params.iter()) {
        assert_eq!(n1, n2);
        assert_eq!(t1.data(), t2.data());
    }
    loaded.save(&b).unwrap();
    assert_eq!(fs::read(blob_path(&a)).unwrap(), fs::read(blob_path(&b)).unwrap());
    let (mut ma, mut mb) = (manifest_json(&a), manifest_json(&b));
    ma["blob"] = "".into();
    mb["blob"] = "".into();
    assert_eq!(ma, mb);
}

#[test]
fn truncated_blob_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    checkpoint().save(&path).unwrap();
    let blob = blob_path(&path);
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
    let err = Checkpoint::load(&path).unwrap_err();
    assert!(matches!(err, Error::TruncatedBlob { .. }));
    assert!(err.to_string().contains("truncated blob"), "{err}");
}

#[test]
fn missing_parameter_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    checkpoint().save(&path).unwrap();
    let mut m = manifest_json(&path);
    let params = m["params"].as_array_mut().unwrap();
    let removed = params.remove(3)["name"].as_str().unwrap().to_string();
    fs::write(&path, m.to_string()).unwrap();
    match Checkpoint::load(&path) {
        Err(Error::MissingParam(name)) => assert_eq!(name, removed),
        other => panic!("expected a missing parameter, got {other:?}"),
    }
}

#[test]
fn wrong_layer_shape_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    checkpoint().save(&path).unwrap();
    let mut m = manifest_json(&path);
    m["params"][0]["shape"] = serde_json::json!([1, 1, 1, 1]);
    fs::write(&path, m.to_string()).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::LayerShape { .. })));
}

#[test]
fn version_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    checkpoint().save(&path).unwrap();
    let mut m = manifest_json(&path);
    m["version"] = 99.into();
    fs::write(&path, m.to_string()).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::VersionMismatch { found: 99, .. })));
}

#[test]
fn loss_network_weights_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vgg.txt");
    let phi = LossNetwork::<f32>::seeded(11);
    phi.save_weights(&path).unwrap();
    let loaded = LossNetwork::<f32>::load_weights(&path).unwrap();
    assert_eq!(loaded.content_hash(), phi.content_hash());
    assert_eq!(loaded.layer_names().collect::<Vec<_>>(), phi.layer_names().collect::<Vec<_>>());
}

#[test]
fn png_and_ppm_decode_identically() {
    let dir = tempfile::tempdir().unwrap();
    let t = random_image(19, 4);
    let (png, ppm) = (dir.path().join("x.png"), dir.path().join("x.ppm"));
    save_image(&t, &png).unwrap();
    save_image(&t, &ppm).unwrap();
    let (a, b) = (load_image(&png).unwrap(), load_image(&ppm).unwrap());
    assert_eq!(a, b);
    assert!(a.max_abs_diff(&t) <= 0.5 / 255.0 + 1e-7);
    assert_eq!(decode_image(&fs::read(&ppm).unwrap()).unwrap(), b);
}

/// Textbook bilinear sample at continuous source coordinates with
/// half-pixel centres and edge clamping.
fn bilinear(src: &Tensor<f32>, c: usize, sy: f64, sx: f64) -> f64 {
    let s = src.shape();
    let clamp = |v: f64, n: usize| v.max(0.0).min((n - 1) as f64);
    let (sy, sx) = (clamp(sy, s.h), clamp(sx, s.w));
    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(s.h - 1), (x0 + 1).min(s.w - 1));
    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
    let p = |y, x| src.at(0, c, y, x) as f64;
    p(y0, x0) * (1.0 - fy) * (1.0 - fx) + p(y0, x1) * (1.0 - fy) * fx + p(y1, x0) * fy * (1.0 - fx) + p(y1, x1) * fy * fx
}

#[test]
fn resize_matches_bilinear_reference() {
    // 512 wide by 256 tall: the short side maps to 256, so there is no
    // vertical scaling and the crop keeps the middle 256 columns.
    let src = Tensor::<f32>::from_fn([1, 3, 256, 512], |_, c, y, x| ((x * 7 + y * 3 + c * 11) % 97) as f32 / 96.0);
    let out = resize_center(&src, 256).unwrap();
    assert_eq!(out.shape(), umfa::Shape::new(1, 3, 256, 256));
    for c in 0..3 {
        for y in 0..256 {
            for x in 0..256 {
                assert_eq!(out.at(0, c, y, x), src.at(0, c, y, x + 128));
            }
        }
    }

    let out = resize_center(&src, 64).unwrap();
    let ratio = 4.0;
    let mut worst = 0.0f64;
    for c in 0..3 {
        for y in 0..64 {
            for x in 0..64 {
                let sy = (y as f64 + 0.5) * ratio - 0.5;
                let sx = ((x + 32) as f64 + 0.5) * ratio - 0.5;
                worst = worst.max((out.at(0, c, y, x) as f64 - bilinear(&src, c, sy, sx)).abs());
            }
        }
    }
    assert!(worst < 1e-6, "max deviation {worst}");
}
