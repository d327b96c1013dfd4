//! Finite-difference checks of the model's composite pieces.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skge_core::backbone::{shifted_window_mask, BackboneConfig, SwinBlock, WindowAttention};
use skge_core::nn::{check_param_grads, CoordPlan, ParamStore, Session};
use skge_core::skge::{bilinear_resize, SkgeEncoder};
use skge_core::tensor::{Tensor, Var};
use skge_core::training::seg_loss;
use skge_core::Result;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

/// `Σ w ⊙ y` for a fixed random `w` of `y`'s shape.
fn project(s: &mut Session<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut r, s.shape(y), -1.0, 1.0);
    let w = s.constant(w);
    let p = s.mul(y, w)?;
    s.sum(p)
}

#[test]
fn masked_window_attention() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f64>::new();
    let attn = WindowAttention::new(&mut store, "attn", 8, 2, 2, &mut r);
    // 4x4 image, window 2, shift 1: four windows of four tokens
    let x = store.add("x", random(&mut r, &[4, 4, 8], -1.0, 1.0));
    let mask = shifted_window_mask(4, 4, 4, 4, 2, 1);
    let rep = check_param_grads(
        &mut store,
        |s| {
            let xv = s.param(x);
            let y = attn.forward(s, xv, Some(&mask))?.out;
            project(s, y, 2)
        },
        H,
        CoordPlan::All,
    )
    .unwrap();
    println!("window attention {rep:?}");
    assert!(rep.max_rel_err < TOL, "{rep:?}");
}

#[test]
fn shifted_block_with_padding() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    // 6x6 grid, window 4: padded to 8x8 and shifted by 2
    let block = SwinBlock::new(&mut store, "blk", 8, 2, 6, 4, 2, 2.0, &mut r);
    let x = store.add("x", random(&mut r, &[1, 6, 6, 8], -1.0, 1.0));
    let rep = check_param_grads(
        &mut store,
        |s| {
            let xv = s.param(x);
            let y = block.forward(s, xv)?;
            project(s, y, 5)
        },
        H,
        CoordPlan::PerTensor { random: 24, seed: 6 },
    )
    .unwrap();
    println!("shifted block {rep:?}");
    assert!(rep.max_rel_err < TOL, "{rep:?}");
}

#[test]
fn bilinear_resize_both_directions() {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    for (hs, ws, ho, wo) in [(2, 3, 5, 4), (5, 4, 2, 3), (1, 1, 3, 2), (4, 4, 1, 1)] {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", random(&mut r, &[2, hs, ws, 3], -1.0, 1.0));
        let rep = check_param_grads(
            &mut store,
            |s| {
                let xv = s.param(x);
                let y = bilinear_resize(s, xv, ho, wo)?;
                project(s, y, 8)
            },
            H,
            CoordPlan::All,
        )
        .unwrap();
        assert!(rep.max_rel_err < TOL, "{hs}x{ws}->{ho}x{wo}: {rep:?}");
    }
}

#[test]
fn segmentation_loss() {
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::<f64>::new();
    let logits = store.add("logits", random(&mut r, &[1, 3, 4, 4], -3.0, 3.0));
    let gt = Tensor::from_fn(&[1, 3, 4, 4], |i| ((i % 16) % 3 == i / 16) as u8 as f64);
    let rep = check_param_grads(
        &mut store,
        |s| {
            let l = s.param(logits);
            let p = s.sigmoid(l)?;
            seg_loss(s, p, &gt)
        },
        H,
        CoordPlan::All,
    )
    .unwrap();
    assert!(rep.max_rel_err < TOL, "{rep:?}");
}

#[test]
fn encoder_at_32() {
    let cfg = BackboneConfig {
        input_size: 32,
        ..BackboneConfig::desk()
    };
    let mut r = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::<f64>::new();
    let enc = SkgeEncoder::new(&mut store, "enc", &cfg, 3, "1->4".parse().unwrap(), &mut r).unwrap();
    let img = random(&mut r, &[1, 3, 32, 32], 0.0, 1.0);
    let objective = |s: &mut Session<'_, f64>| {
        let x = s.constant(img.clone());
        let e = enc.forward(s, x)?;
        project(s, e.fused, 11)
    };

    let grads = {
        let mut s = Session::new(&store);
        let loss = objective(&mut s).unwrap();
        s.backward(loss).unwrap()
    };
    // stage 4 is a single token here, so its attention ignores the bias
    for id in store.ids().filter(|&id| !store.name(id).starts_with("enc.stage4.block0.attn.rel_bias")) {
        assert!(grads.norm_of(&[id]) > 0.0, "{} has no gradient", store.name(id));
    }

    let t = Instant::now();
    let rep = check_param_grads(&mut store, objective, H, CoordPlan::PerTensor { random: 2, seed: 12 }).unwrap();
    println!("encoder 32x32: {rep:?} in {:?}", t.elapsed());
    assert!(rep.max_rel_err < TOL, "{rep:?}");
}
