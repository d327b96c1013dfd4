//! Perception heads: segmentation decoder, semantic depth cloud, LiDAR
//! histogram and the feature bottleneck feeding the controller.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::backbone::StageFeatures;
use crate::nn::{Linear, ParamId, ParamStore, Session};
use crate::skge::{bilinear_map, bilinear_resize};
use crate::tensor::{SparseMap, Tensor, Var};
use crate::{Error, Real, Result};

pub const NUM_CLASSES: usize = 23;

/// Progressive 2× upsampling decoder. It starts from the (fused) feature
/// of the encoder's output stage, adds the matching encoder stage at each
/// shallower level and ends in 23-channel logits at input resolution.
#[derive(Clone, Debug)]
pub struct SegDecoder {
    /// `lateral[k]` maps stage `start - k` channels to stage `start - k - 1` channels.
    pub lateral: Vec<Linear>,
    pub head: Linear,
    pub start: usize,
    pub out_size: usize,
}

impl SegDecoder {
    /// `channels[s - 1]` is the channel count of stage `s`.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: [usize; 4],
        start: usize,
        out_size: usize,
        rng: &mut R,
    ) -> Self {
        let lateral = (1..start)
            .rev()
            .map(|s| Linear::new(store, &format!("{name}.up{}", s + 1), channels[s], channels[s - 1], true, rng))
            .collect();
        SegDecoder {
            lateral,
            head: Linear::new(store, &format!("{name}.head"), channels[0], NUM_CLASSES, true, rng),
            start,
            out_size,
        }
    }

    /// `top` replaces stage `start` (normally the fused feature).
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, feats: &StageFeatures, top: Var) -> Result<Var> {
        let mut x = top;
        for (k, lin) in self.lateral.iter().enumerate() {
            let stage = self.start - 1 - k;
            let (h, w, _) = feats.dims(stage);
            x = lin.forward(s, x)?;
            x = bilinear_resize(s, x, h, w)?;
            let skip = feats.get(stage)?;
            x = s.add(x, skip)?;
        }
        let x = self.head.forward(s, x)?;
        let sh = s.shape(x).to_vec();
        let (b, h, w, c) = (sh[0], sh[1], sh[2], sh[3]);
        let (oh, ow) = (self.out_size, self.out_size);
        let x = if (h, w) == (oh, ow) {
            x
        } else {
            let m = bilinear_map::<T>(b, h, w, c, oh, ow)?;
            s.map(x, Arc::new(m), &[b, oh, ow, c])?
        };
        // channels-last to [B, 23, H, W]
        let mut idx = Vec::with_capacity(b * c * oh * ow);
        for bi in 0..b {
            for ch in 0..c {
                for p in 0..oh * ow {
                    idx.push(Some((bi * oh * ow + p) * c + ch));
                }
            }
        }
        s.map(x, Arc::new(SparseMap::gather(b * oh * ow * c, idx)), &[b, c, oh, ow])
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.lateral.iter().flat_map(Linear::param_ids).collect();
        v.extend(self.head.param_ids());
        v
    }
}

/// Per-pixel class of `[B, K, H, W]` logits; ties go to the lowest index.
pub fn argmax_classes<T: Real>(logits: &Tensor<T>) -> Result<Vec<u8>> {
    let sh = logits.shape();
    if sh.len() != 4 {
        return Err(Error::shape("argmax", sh, &[0, NUM_CLASSES, 0, 0]));
    }
    let (b, k, hw) = (sh[0], sh[1], sh[2] * sh[3]);
    let d = logits.data();
    let mut out = vec![0u8; b * hw];
    for bi in 0..b {
        for p in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if d[(bi * k + c) * hw + p] > d[(bi * k + best) * hw + p] {
                    best = c;
                }
            }
            out[bi * hw + p] = best as u8;
        }
    }
    Ok(out)
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Camera {
    /// Focal length `H/2` with the principal point at the image centre.
    pub fn for_image(h: usize, w: usize) -> Self {
        Camera {
            focal: h as f64 / 2.0,
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
        }
    }
}

/// Metric bird's-eye grid with the ego vehicle at the bottom centre,
/// rows running forward and columns running right.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BevSpec {
    pub size: usize,
    pub resolution_m: f64,
}

impl Default for BevSpec {
    fn default() -> Self {
        BevSpec {
            size: 64,
            resolution_m: 0.25,
        }
    }
}

impl BevSpec {
    /// Cell for a point `forward` metres ahead and `lateral` metres right.
    pub fn cell(&self, forward: f64, lateral: f64) -> Option<(usize, usize)> {
        if !forward.is_finite() || !lateral.is_finite() {
            return None;
        }
        let n = self.size as i64;
        let fr = num_traits::Float::floor(forward / self.resolution_m) as i64;
        let lc = num_traits::Float::floor(lateral / self.resolution_m) as i64;
        let row = n - 1 - fr;
        let col = lc + n / 2;
        ((0..n).contains(&row) && (0..n).contains(&col) && fr >= 0).then_some((row as usize, col as usize))
    }
}

/// Back-projects every pixel of a class map with metric depth onto the BEV
/// grid. A cell takes the highest class index among the pixels landing in
/// it; untouched cells stay all-zero. Output `[B, 23, Hb, Wb]`, one-hot.
pub fn build_sdc<T: Real>(
    classes: &[u8],
    depth_m: &[f32],
    b: usize,
    h: usize,
    w: usize,
    cam: &Camera,
    bev: &BevSpec,
) -> Result<Tensor<T>> {
    if !(cam.focal > 0.0) {
        return Err(Error::Config(format!("focal length must be positive, got {}", cam.focal)));
    }
    if bev.size == 0 || !(bev.resolution_m > 0.0) {
        return Err(Error::Config("BEV grid needs positive size and resolution".into()));
    }
    if classes.len() != b * h * w || depth_m.len() != b * h * w {
        return Err(Error::Data(format!(
            "class map ({}) and depth ({}) must both hold {b}x{h}x{w} pixels",
            classes.len(),
            depth_m.len()
        )));
    }
    let n = bev.size;
    let mut best = vec![0u8; b * n * n];
    for bi in 0..b {
        for v in 0..h {
            for u in 0..w {
                let p = (bi * h + v) * w + u;
                let d = depth_m[p] as f64;
                if !(d > 0.0) {
                    return Err(Error::Data(format!("nonpositive depth {d} at pixel ({v}, {u})")));
                }
                let k = classes[p];
                if k as usize >= NUM_CLASSES {
                    return Err(Error::Data(format!("class {k} out of range")));
                }
                let lateral = (u as f64 - cam.cx) * d / cam.focal;
                if let Some((r, c)) = bev.cell(d, lateral) {
                    let slot = &mut best[(bi * n + r) * n + c];
                    *slot = (*slot).max(k + 1);
                }
            }
        }
    }
    let mut out = Tensor::zeros(&[b, NUM_CLASSES, n, n]);
    let data = out.data_mut();
    for bi in 0..b {
        for cell in 0..n * n {
            let k = best[bi * n * n + cell];
            if k > 0 {
                data[(bi * NUM_CLASSES + (k - 1) as usize) * n * n + cell] = T::one();
            }
        }
    }
    Ok(out)
}

/// Two-bin height histogram of `[4, N]` points (x forward, y right, z up,
/// intensity): bin 0 counts `z > 0`, bin 1 counts the rest.
pub fn lidar_bev<T: Real>(points: &Tensor<T>, bev: &BevSpec) -> Result<Tensor<T>> {
    let sh = points.shape();
    if sh.len() != 2 || sh[0] != 4 {
        return Err(Error::shape("lidar_bev", sh, &[4, 0]));
    }
    let np = sh[1];
    let n = bev.size;
    let mut out = Tensor::zeros(&[2, n, n]);
    let d = points.data();
    for i in 0..np {
        let (x, y, z) = (d[i].f64(), d[np + i].f64(), d[2 * np + i].f64());
        if let Some((r, c)) = bev.cell(x, y) {
            let bin = if z > 0.0 { 0 } else { 1 };
            out.data_mut()[(bin * n + r) * n + c] += T::one();
        }
    }
    Ok(out)
}

/// Spatial mean `[B, H, W, C] -> [B, C]`.
pub fn global_pool<T: Real>(s: &mut Session<'_, T>, x: Var) -> Result<Var> {
    let sh = s.shape(x).to_vec();
    if sh.len() != 4 {
        return Err(Error::shape("global_pool", &sh, &[0, 0, 0, 0]));
    }
    let (b, hw, c) = (sh[0], sh[1] * sh[2], sh[3]);
    let wgt = T::c(1.0 / hw as f64);
    let rows = (0..b * c).map(|r| {
        let (bi, ch) = (r / c, r % c);
        (0..hw).map(move |p| ((bi * hw + p) * c + ch, wgt))
    });
    s.map(x, Arc::new(SparseMap::weighted(b * hw * c, rows)), &[b, c])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Backbone, BackboneConfig};
    use crate::nn::{check_param_grads, CoordPlan};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
    }

    #[test]
    fn desk_decoder_shape() {
        let cfg = BackboneConfig::desk();
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bb = Backbone::new(&mut store, "a", &cfg, 3, &mut rng).unwrap();
        let chans = core::array::from_fn(|i| cfg.stage_dims(i + 1).1);
        let dec = SegDecoder::new(&mut store, "d", chans, 4, 64, &mut rng);
        let mut s = Session::new(&store);
        let img = s.constant(random(&[2, 3, 64, 64], 2).cast());
        let f = bb.forward_stages(&mut s, img).unwrap();
        let top = f.get(4).unwrap();
        let y = dec.forward(&mut s, &f, top).unwrap();
        assert_eq!(s.shape(y), &[2, 23, 64, 64]);
    }

    #[test]
    fn decoder_gradients() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let chans = [2, 4, 8, 16];
        let dec = SegDecoder::new(&mut store, "d", chans, 3, 8, &mut rng);
        let dims = [(4, 4, 2), (2, 2, 4), (1, 1, 8), (1, 1, 16)];
        let inputs: Vec<Tensor<f64>> =
            (0..3).map(|k| random(&[1, dims[k].0, dims[k].1, dims[k].2], 10 + k as u64)).collect();
        let r = check_param_grads(
            &mut store,
            |s| {
                let mut f = StageFeatures::new(1, dims);
                for (k, t) in inputs.iter().enumerate() {
                    let v = s.constant(t.clone());
                    f.set(k + 1, v);
                }
                let top = f.get(3)?;
                let y = dec.forward(s, &f, top)?;
                let y = s.tanh(y)?;
                let y = s.mul(y, y)?;
                s.sum(y)
            },
            1e-5,
            CoordPlan::All,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn argmax_tie_breaks_low() {
        let t = Tensor::<f32>::zeros(&[1, 23, 2, 2]);
        assert_eq!(argmax_classes(&t).unwrap(), vec![0; 4]);
        let mut t = Tensor::<f32>::zeros(&[1, 23, 1, 1]);
        t.data_mut()[5] = 1.0;
        t.data_mut()[9] = 1.0;
        assert_eq!(argmax_classes(&t).unwrap(), vec![5]);
    }

    #[test]
    fn principal_ray_lands_straight_ahead() {
        let (h, w) = (8, 8);
        let cam = Camera::for_image(h, w);
        let bev = BevSpec { size: 16, resolution_m: 0.5 };
        let mut depth = vec![1000.0f32; h * w];
        let mut cls = vec![0u8; h * w];
        let centre = 4 * w + 4;
        depth[centre] = 3.2;
        cls[centre] = 14;
        let g = build_sdc::<f32>(&cls, &depth, 1, h, w, &cam, &bev).unwrap();
        // forward 3.2 m at 0.5 m/cell -> 6 cells ahead of the bottom row
        let (row, col) = (16 - 1 - 6, 8);
        assert_eq!(g.data()[(14 * 16 + row) * 16 + col], 1.0);
        assert_eq!(g.data().iter().filter(|&&v| v == 1.0).count(), 1);
    }

    #[test]
    fn empty_scene_only_uses_unlabeled_channel() {
        let (h, w) = (8, 8);
        let depth: Vec<f32> = (0..h * w).map(|p| 0.5 + (p / w) as f32).collect();
        let g = build_sdc::<f32>(&vec![0u8; h * w], &depth, 1, h, w, &Camera::for_image(h, w), &BevSpec { size: 16, resolution_m: 0.5 }).unwrap();
        assert!(g.data()[..256].iter().any(|&v| v == 1.0));
        assert!(g.data()[256..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn three_pixel_scene_by_hand() {
        // 4x4 image: f = 2, cx = 2. Grid 8 cells of 1 m.
        let (h, w) = (4, 4);
        let cam = Camera::for_image(h, w);
        let bev = BevSpec { size: 8, resolution_m: 1.0 };
        let mut depth = vec![500.0f32; 16];
        let mut cls = vec![0u8; 16];
        // u=0, d=2: lateral = (0-2)*2/2 = -2 -> col 2, fwd row 8-1-2 = 5
        depth[4] = 2.0;
        cls[4] = 7;
        // u=3, d=4.5: lateral = 1*4.5/2 = 2.25 -> col 6, row 8-1-4 = 3
        depth[3] = 4.5;
        cls[3] = 4;
        // u=2, d=2.9 with a lower class into row 5, col 4 and another higher class on top of it
        depth[10] = 2.9;
        cls[10] = 3;
        depth[14] = 2.1;
        cls[14] = 19;
        let g = build_sdc::<f64>(&cls, &depth, 1, h, w, &cam, &bev).unwrap();
        let at = |k: usize, r: usize, c: usize| g.data()[(k * 8 + r) * 8 + c];
        assert_eq!(at(7, 5, 2), 1.0);
        assert_eq!(at(4, 3, 6), 1.0);
        assert_eq!(at(19, 5, 4), 1.0);
        assert_eq!(at(3, 5, 4), 0.0);
        assert_eq!(g.data().iter().sum::<f64>(), 3.0);
    }

    #[test]
    fn sdc_rejects_bad_geometry() {
        let cam = Camera { focal: 0.0, cx: 1.0, cy: 1.0 };
        assert!(matches!(build_sdc::<f32>(&[0], &[1.0], 1, 1, 1, &cam, &BevSpec::default()), Err(Error::Config(_))));
        let cam = Camera::for_image(1, 1);
        assert!(matches!(build_sdc::<f32>(&[0], &[0.0], 1, 1, 1, &cam, &BevSpec::default()), Err(Error::Data(_))));
    }

    #[test]
    fn lidar_counts() {
        let bev = BevSpec { size: 8, resolution_m: 1.0 };
        let none = lidar_bev(&Tensor::<f32>::zeros(&[4, 1]).reshape(&[4, 1]).unwrap(), &bev).unwrap();
        // the single point at the origin is in the bottom-centre cell, below-or-on ground
        assert_eq!(none.data().iter().sum::<f32>(), 1.0);
        assert_eq!(none.data()[64 + 7 * 8 + 4], 1.0);

        let p = Tensor::from_f64(&[4, 1], &[2.5, -0.5, 1.0, 0.3]).unwrap();
        let g = lidar_bev::<f64>(&p, &bev).unwrap();
        assert_eq!(g.data()[(8 - 1 - 2) * 8 + 3], 1.0);
        assert!(g.data()[64..].iter().all(|&v| v == 0.0));

        let mut r = ChaCha8Rng::seed_from_u64(5);
        let n = 100;
        let pts: Vec<[f64; 3]> = (0..n).map(|_| [r.gen_range(-4.0..12.0), r.gen_range(-6.0..6.0), r.gen_range(-2.0..2.0)]).collect();
        let mut flat = vec![0.0; 4 * n];
        for (i, q) in pts.iter().enumerate() {
            flat[i] = q[0];
            flat[n + i] = q[1];
            flat[2 * n + i] = q[2];
        }
        let g = lidar_bev::<f64>(&Tensor::from_f64(&[4, n], &flat).unwrap(), &bev).unwrap();
        let inside = pts.iter().filter(|q| (0.0..8.0).contains(&q[0]) && (-4.0..4.0).contains(&q[1])).count();
        assert_eq!(g.data().iter().sum::<f64>() as usize, inside);
    }

    #[test]
    fn pool_averages() {
        let store = ParamStore::<f64>::new();
        let mut s = Session::new(&store);
        let x = s.constant(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64));
        let y = global_pool(&mut s, x).unwrap();
        assert_eq!(s.data(y), &[3.0, 4.0]);
    }
}
