//! Samples, the 23-class table, depth decoding, cropping, batch collation
//! and a procedural scene generator.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::controller::{global_to_local, local_to_global, EgoState, RolloutInputs, NUM_WAYPOINTS};
use crate::heads::{lidar_bev, BevSpec, NUM_CLASSES};
use crate::model::Batch;
use crate::tensor::Tensor;
use crate::{Error, Real, Result};

pub const CLASS_TABLE_VERSION: &str = "carla-23-v1";

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "Unlabeled",
    "Building",
    "Fence",
    "Other",
    "Pedestrian",
    "Pole",
    "Road lane",
    "Road",
    "Sidewalk",
    "Vegetation",
    "Other vehicles",
    "Wall",
    "Traffic sign",
    "Sky",
    "Ground",
    "Bridge",
    "Rail track",
    "Guard Trail",
    "Traffic light",
    "Static Object",
    "Dynamic Object",
    "Water",
    "Terrain",
];

pub mod class {
    pub const UNLABELED: u8 = 0;
    pub const BUILDING: u8 = 1;
    pub const PEDESTRIAN: u8 = 4;
    pub const ROAD_LANE: u8 = 6;
    pub const ROAD: u8 = 7;
    pub const SIDEWALK: u8 = 8;
    pub const VEGETATION: u8 = 9;
    pub const VEHICLE: u8 = 10;
    pub const TRAFFIC_SIGN: u8 = 12;
    pub const SKY: u8 = 13;
    pub const TRAFFIC_LIGHT: u8 = 18;
    pub const TERRAIN: u8 = 22;
}

pub fn class_name(index: usize) -> Option<&'static str> {
    CLASS_NAMES.get(index).copied()
}

pub fn class_index(name: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|n| *n == name)
}

/// Metres from an 8-bit encoded depth pixel.
pub fn decode_depth(r: u32, g: u32, b: u32) -> Result<f64> {
    if r > 255 || g > 255 || b > 255 {
        return Err(Error::Data(format!("depth pixel ({r}, {g}, {b}) outside 0..255")));
    }
    Ok((r + 256 * g + 65536 * b) as f64 / 16_777_215.0 * 1000.0)
}

/// Nearest 24-bit encoding of `meters` (clamped to the 0..1000 m range).
pub fn encode_depth(meters: f64) -> [u8; 3] {
    let code = (meters.clamp(0.0, 1000.0) / 1000.0 * 16_777_215.0).round() as u32;
    [(code & 255) as u8, ((code >> 8) & 255) as u8, (code >> 16) as u8]
}

/// Centered `out × out` crop of a `[C, H, W]` buffer; odd margins round the
/// offset down.
pub fn center_crop<T: Copy>(img: &[T], c: usize, h: usize, w: usize, out: usize) -> Result<(Vec<T>, (usize, usize))> {
    if img.len() != c * h * w {
        return Err(Error::Data(format!("buffer of {} values is not {c}x{h}x{w}", img.len())));
    }
    if h < out || w < out {
        return Err(Error::Data(format!("cannot crop {h}x{w} to {out}x{out}")));
    }
    let (oy, ox) = ((h - out) / 2, (w - out) / 2);
    let mut v = Vec::with_capacity(c * out * out);
    for ch in 0..c {
        for y in 0..out {
            let row = (ch * h + oy + y) * w + ox;
            v.extend_from_slice(&img[row..row + out]);
        }
    }
    Ok((v, (oy, ox)))
}

/// One frame of expert driving.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub size: usize,
    /// `[3, H, W]`, 0..255
    pub rgb: Vec<u8>,
    /// `[3, H, W]` encoded depth
    pub depth_rgb: Vec<u8>,
    /// `[H, W]` class indices
    pub seg: Vec<u8>,
    pub ego: EgoState,
    /// local metres
    pub waypoints: [[f64; 2]; NUM_WAYPOINTS],
    /// steering, throttle, brake
    pub controls: [f64; 3],
    pub traffic_light: bool,
    pub stop_sign: bool,
    /// `(x, y, z, intensity)` points, x forward and y right
    pub lidar: Option<Vec<[f32; 4]>>,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        let px = self.size * self.size;
        let bad = |m: String| Err(Error::Data(m));
        if self.size == 0 || self.rgb.len() != 3 * px || self.depth_rgb.len() != 3 * px || self.seg.len() != px {
            return bad(format!("sample buffers do not match size {}", self.size));
        }
        if let Some(k) = self.seg.iter().find(|&&k| k as usize >= NUM_CLASSES) {
            return bad(format!("segmentation class {k} out of range"));
        }
        self.ego.validate()?;
        let [st, th, br] = self.controls;
        if !((-1.0..=1.0).contains(&st) && (0.0..=0.75).contains(&th) && (0.0..=1.0).contains(&br)) {
            return bad(format!("controls {:?} outside their ranges", self.controls));
        }
        let finite = self.waypoints.iter().flatten().all(|v| v.is_finite())
            && [self.ego.x, self.ego.y, self.ego.heading, self.ego.route.0, self.ego.route.1]
                .iter()
                .all(|v| v.is_finite());
        if !finite {
            return bad("non-finite pose or waypoint".into());
        }
        if let Some(p) = &self.lidar {
            if p.iter().flatten().any(|v| !v.is_finite()) {
                return bad("non-finite lidar point".into());
            }
        }
        Ok(())
    }

    /// Decoded depth in metres, `[H, W]`.
    pub fn depth_m(&self) -> Vec<f32> {
        let px = self.size * self.size;
        (0..px)
            .map(|p| {
                let (r, g, b) = (self.depth_rgb[p], self.depth_rgb[px + p], self.depth_rgb[2 * px + p]);
                decode_depth(r as u32, g as u32, b as u32).expect("u8 channels") as f32
            })
            .collect()
    }

    /// `[23, H, W]` one-hot segmentation.
    pub fn seg_onehot<T: Real>(&self) -> Tensor<T> {
        let px = self.seg.len();
        let mut t = Tensor::zeros(&[NUM_CLASSES, self.size, self.size]);
        for (p, &k) in self.seg.iter().enumerate() {
            t.data_mut()[k as usize * px + p] = T::one();
        }
        t
    }

    /// Tensor records in a fixed order (the on-disk sample layout).
    pub fn to_records(&self) -> Vec<(String, Tensor<f32>)> {
        let n = self.size;
        let u8s = |v: &[u8], shape: &[usize]| Tensor::new(shape, v.iter().map(|&x| x as f32).collect()).expect("shape");
        let mut r = vec![
            ("rgb".into(), u8s(&self.rgb, &[3, n, n])),
            ("depth_rgb".into(), u8s(&self.depth_rgb, &[3, n, n])),
            ("seg".into(), u8s(&self.seg, &[n, n])),
            (
                "ego".into(),
                Tensor::from_f64(&[6], &[self.ego.speed, self.ego.x, self.ego.y, self.ego.heading, self.ego.route.0, self.ego.route.1])
                    .expect("shape"),
            ),
            (
                "waypoints".into(),
                Tensor::from_f64(&[NUM_WAYPOINTS, 2], &self.waypoints.concat()).expect("shape"),
            ),
            ("controls".into(), Tensor::from_f64(&[3], &self.controls).expect("shape")),
            (
                "flags".into(),
                Tensor::from_f64(&[2], &[self.traffic_light as u8 as f64, self.stop_sign as u8 as f64]).expect("shape"),
            ),
        ];
        if let Some(p) = &self.lidar {
            let np = p.len();
            let mut flat = vec![0.0f32; 4 * np.max(1)];
            for (i, q) in p.iter().enumerate() {
                for k in 0..4 {
                    flat[k * np + i] = q[k];
                }
            }
            // a zero-point cloud is stored as a single empty marker column
            let t = if np == 0 { Tensor::new(&[1], vec![0.0]) } else { Tensor::new(&[4, np], flat) }.expect("shape");
            r.push(("lidar".into(), t));
        }
        r
    }

    pub fn from_records(records: &[(String, Tensor<f32>)]) -> Result<Self> {
        let get = |name: &str| -> Result<&Tensor<f32>> {
            records
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Corrupt(format!("sample record {name:?} missing")))
        };
        let corrupt = |m: String| Error::Corrupt(m);
        let rgb_t = get("rgb")?;
        let sh = rgb_t.shape();
        if sh.len() != 3 || sh[0] != 3 || sh[1] != sh[2] {
            return Err(corrupt(format!("rgb record has shape {sh:?}")));
        }
        let n = sh[1];
        let bytes = |t: &Tensor<f32>, name: &str, shape: &[usize]| -> Result<Vec<u8>> {
            if t.shape() != shape {
                return Err(corrupt(format!("{name} record has shape {:?}, expected {shape:?}", t.shape())));
            }
            t.data()
                .iter()
                .map(|&v| {
                    if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                        Ok(v as u8)
                    } else {
                        Err(corrupt(format!("{name} value {v} is not a byte")))
                    }
                })
                .collect()
        };
        let fixed = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let t = get(name)?;
            if t.shape() != shape {
                return Err(corrupt(format!("{name} record has shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(t.data().iter().map(|&v| v as f64).collect())
        };
        let ego = fixed("ego", &[6])?;
        let wp = fixed("waypoints", &[NUM_WAYPOINTS, 2])?;
        let controls = fixed("controls", &[3])?;
        let flags = fixed("flags", &[2])?;
        let flag = |v: f64| -> Result<bool> {
            match v {
                0.0 => Ok(false),
                1.0 => Ok(true),
                _ => Err(corrupt(format!("flag value {v} is not 0 or 1"))),
            }
        };
        let lidar = match records.iter().find(|(k, _)| k == "lidar") {
            None => None,
            Some((_, t)) if t.shape() == [1] => Some(Vec::new()),
            Some((_, t)) => {
                let s = t.shape();
                if s.len() != 2 || s[0] != 4 {
                    return Err(corrupt(format!("lidar record has shape {s:?}")));
                }
                let np = s[1];
                Some((0..np).map(|i| core::array::from_fn(|k| t.data()[k * np + i])).collect())
            }
        };
        let sample = Sample {
            size: n,
            rgb: bytes(rgb_t, "rgb", &[3, n, n])?,
            depth_rgb: bytes(get("depth_rgb")?, "depth_rgb", &[3, n, n])?,
            seg: bytes(get("seg")?, "seg", &[n, n])?,
            ego: EgoState {
                speed: ego[0],
                x: ego[1],
                y: ego[2],
                heading: ego[3],
                route: (ego[4], ego[5]),
            },
            waypoints: [[wp[0], wp[1]], [wp[2], wp[3]], [wp[4], wp[5]]],
            controls: [controls[0], controls[1], controls[2]],
            traffic_light: flag(flags[0])?,
            stop_sign: flag(flags[1])?,
            lidar,
        };
        sample.validate().map_err(|e| corrupt(format!("{e}")))?;
        Ok(sample)
    }
}

/// Stacks samples into a model batch. RGB is scaled to `[0, 1]`.
pub fn collate<T: Real>(samples: &[&Sample], bev: &BevSpec, lidar: bool) -> Result<Batch<T>> {
    let first = samples.first().ok_or_else(|| Error::Contract("cannot collate an empty batch".into()))?;
    let n = first.size;
    let b = samples.len();
    let px = n * n;
    let mut rgb = Vec::with_capacity(b * 3 * px);
    let mut depth = Vec::with_capacity(b * px);
    let mut seg = Vec::with_capacity(b * NUM_CLASSES * px);
    let mut classes = Vec::with_capacity(b * px);
    let mut wps = Vec::with_capacity(b * 6);
    let mut ctl = Vec::with_capacity(b * 3);
    let mut tl = Vec::with_capacity(b);
    let mut ss = Vec::with_capacity(b);
    let mut hist = Vec::new();
    let mut egos = Vec::with_capacity(b);
    for s in samples {
        if s.size != n {
            return Err(Error::Data(format!("mixed sample sizes {} and {n} in one batch", s.size)));
        }
        rgb.extend(s.rgb.iter().map(|&v| T::c(v as f64 / 255.0)));
        depth.extend(s.depth_m());
        seg.extend_from_slice(s.seg_onehot::<T>().data());
        classes.extend_from_slice(&s.seg);
        wps.extend(s.waypoints.iter().flatten().map(|&v| T::c(v)));
        ctl.extend(s.controls.iter().map(|&v| T::c(v)));
        tl.push(T::c(s.traffic_light as u8 as f64));
        ss.push(T::c(s.stop_sign as u8 as f64));
        egos.push(s.ego);
        if lidar {
            let pts = s
                .lidar
                .as_ref()
                .ok_or_else(|| Error::Data("lidar enabled but a sample has no point cloud".into()))?;
            let np = pts.len();
            let mut flat = vec![T::zero(); 4 * np];
            for (i, q) in pts.iter().enumerate() {
                for k in 0..4 {
                    flat[k * np + i] = T::c(q[k] as f64);
                }
            }
            let g = if np == 0 {
                Tensor::zeros(&[2, bev.size, bev.size])
            } else {
                lidar_bev(&Tensor::new(&[4, np], flat)?, bev)?
            };
            hist.extend_from_slice(g.data());
        }
    }
    Ok(Batch {
        rgb: Tensor::new(&[b, 3, n, n], rgb)?,
        depth_m: depth,
        seg_gt: Tensor::new(&[b, NUM_CLASSES, n, n], seg)?,
        seg_classes: classes,
        rollout: RolloutInputs::new(&egos)?,
        waypoints: Tensor::new(&[b, NUM_WAYPOINTS, 2], wps)?,
        controls: Tensor::new(&[b, 3], ctl)?,
        tl: Tensor::new(&[b, 1], tl)?,
        ss: Tensor::new(&[b, 1], ss)?,
        lidar: if lidar { Some(Tensor::new(&[b, 2, bev.size, bev.size], hist)?) } else { None },
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub size: usize,
    /// Every pixel Unlabeled, black image.
    pub empty: bool,
    pub lidar: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            size: 64,
            empty: false,
            lidar: false,
        }
    }
}

/// Camera height above the ground plane, metres.
const CAM_HEIGHT: f64 = 1.6;
const HALF_ROAD: f64 = 3.5;
const CRUISE: f64 = 6.0;
const WHEELBASE: f64 = 2.9;
const MAX_STEER_RAD: f64 = 0.7;

fn palette(k: u8) -> [f64; 3] {
    const P: [[u8; 3]; NUM_CLASSES] = [
        [0, 0, 0],
        [70, 70, 70],
        [100, 40, 40],
        [55, 90, 80],
        [220, 20, 60],
        [153, 153, 153],
        [157, 234, 50],
        [128, 64, 128],
        [244, 35, 232],
        [107, 142, 35],
        [0, 0, 142],
        [102, 102, 156],
        [220, 220, 0],
        [70, 130, 180],
        [81, 0, 81],
        [150, 100, 100],
        [230, 150, 140],
        [180, 165, 180],
        [250, 170, 30],
        [110, 190, 160],
        [170, 120, 50],
        [45, 60, 150],
        [145, 170, 100],
    ];
    let c = P[k as usize];
    [c[0] as f64, c[1] as f64, c[2] as f64]
}

/// Classes placed as free-standing objects.
const OBJECT_CLASSES: [u8; 12] = [1, 2, 3, 4, 5, 10, 11, 12, 18, 19, 20, 15];

struct Object {
    class: u8,
    depth: f64,
    lateral: f64,
    width: f64,
    height: f64,
}

/// A deterministic synthetic frame for `seed`.
pub fn synth_scene(seed: u64, cfg: &SceneConfig) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.size;
    let f = n as f64 / 2.0;
    let (cx, cy) = (n as f64 / 2.0, n as f64 / 2.0);
    let horizon = cy + rng.gen_range(-0.08..0.08) * n as f64;
    let kappa: f64 = if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(-0.08..0.08) };
    let lane_shift: f64 = rng.gen_range(-0.8..0.8);
    let side_class = [class::TERRAIN, class::VEGETATION, class::BUILDING][rng.gen_range(0..3)];

    let n_obj = rng.gen_range(1..=4);
    let objects: Vec<Object> = (0..n_obj)
        .map(|_| {
            let class = OBJECT_CLASSES[rng.gen_range(0..OBJECT_CLASSES.len())];
            let depth = rng.gen_range(4.0..14.0);
            let on_road = matches!(class, 4 | 10 | 20);
            let lateral = if on_road {
                rng.gen_range(-2.5..2.5)
            } else {
                let side = if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
                side * rng.gen_range(4.0..7.0)
            };
            let (width, height) = match class {
                4 => (0.7, 1.8),
                5 | 18 | 12 => (0.4, 3.2),
                10 => (1.9, 1.6),
                1 | 11 => (4.0, 6.0),
                _ => (rng.gen_range(0.6..2.0), rng.gen_range(0.6..2.5)),
            };
            Object {
                class,
                depth,
                lateral: lateral + kappa * depth * depth / 2.0,
                width,
                height,
            }
        })
        .collect();

    let px = n * n;
    let mut seg = vec![0u8; px];
    let mut depth = vec![1000.0f64; px];
    for v in 0..n {
        let vc = v as f64 + 0.5;
        for u in 0..n {
            let p = v * n + u;
            if vc <= horizon + 0.5 {
                seg[p] = class::SKY;
                continue;
            }
            let d = (CAM_HEIGHT * f / (vc - horizon)).min(999.0);
            depth[p] = d;
            let lat = (u as f64 - cx) * d / f;
            let centre = kappa * d * d / 2.0 + lane_shift;
            let off = lat - centre;
            seg[p] = if off.abs() < 0.15 {
                class::ROAD_LANE
            } else if off.abs() < HALF_ROAD {
                class::ROAD
            } else if off.abs() < HALF_ROAD + 2.0 {
                class::SIDEWALK
            } else {
                side_class
            };
        }
    }
    // far objects first so nearer ones occlude them
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by(|&a, &b| objects[b].depth.partial_cmp(&objects[a].depth).expect("finite"));
    for &k in &order {
        let o = &objects[k];
        let u0 = cx + (o.lateral - o.width / 2.0) * f / o.depth;
        let u1 = cx + (o.lateral + o.width / 2.0) * f / o.depth;
        let vb = horizon + CAM_HEIGHT * f / o.depth;
        let vt = vb - o.height * f / o.depth;
        for v in 0..n {
            let vc = v as f64 + 0.5;
            if vc < vt || vc > vb {
                continue;
            }
            for u in 0..n {
                let uc = u as f64 + 0.5;
                if uc >= u0 && uc <= u1 {
                    seg[v * n + u] = o.class;
                    depth[v * n + u] = o.depth;
                }
            }
        }
    }

    let traffic_light = seg.contains(&class::TRAFFIC_LIGHT);
    let stop_sign = seg.contains(&class::TRAFFIC_SIGN);

    let mut rgb = vec![0u8; 3 * px];
    for p in 0..px {
        let base = palette(seg[p]);
        let shade = 1.0 - (depth[p].min(60.0) / 60.0) * 0.3;
        for ch in 0..3 {
            let noise: f64 = rng.gen_range(-12.0..12.0);
            rgb[ch * px + p] = (base[ch] * shade + noise).clamp(0.0, 255.0).round() as u8;
        }
    }

    let mut depth_rgb = vec![0u8; 3 * px];
    for p in 0..px {
        let e = encode_depth(depth[p]);
        for ch in 0..3 {
            depth_rgb[ch * px + p] = e[ch];
        }
    }

    // expert along the road arc
    let speed: f64 = rng.gen_range(0.0..8.0);
    let stop = traffic_light || stop_sign || objects.iter().any(|o| matches!(o.class, 4 | 10 | 20) && o.depth < 8.0 && (o.lateral - kappa * o.depth * o.depth / 2.0).abs() < 2.0);
    let target = if stop { 0.0 } else { CRUISE };
    let heading: f64 = rng.gen_range(-180.0..180.0);
    let ego_pos = (rng.gen_range(-200.0..200.0), rng.gen_range(-200.0..200.0));
    let arc = |s: f64| -> (f64, f64) {
        if kappa.abs() < 1e-9 {
            (0.0, s)
        } else {
            ((1.0 - (kappa * s).cos()) / kappa, (kappa * s).sin() / kappa)
        }
    };
    let mut ego = EgoState {
        speed,
        x: ego_pos.0,
        y: ego_pos.1,
        heading,
        route: (0.0, 0.0),
    };
    ego.route = local_to_global(arc(rng.gen_range(8.0..12.0)), &ego);
    let step = 0.5 * target;
    let mut waypoints = [[0.0; 2]; NUM_WAYPOINTS];
    for (i, w) in waypoints.iter_mut().enumerate() {
        let g = local_to_global(arc(step * (i + 1) as f64), &ego);
        let l = global_to_local(g, &ego);
        *w = [l.0, l.1];
    }
    let aim = arc(4.0);
    let ld2 = aim.0 * aim.0 + aim.1 * aim.1;
    let steer = ((2.0 * WHEELBASE * aim.0 / ld2).atan() / MAX_STEER_RAD).clamp(-1.0, 1.0);
    let (throttle, brake) = if stop {
        (0.0, if speed > 0.1 { 1.0 } else { 0.5 })
    } else {
        ((0.25 * (target - speed)).clamp(0.0, 0.75), if speed > target + 1.0 { 0.3 } else { 0.0 })
    };

    let lidar = cfg.lidar.then(|| {
        let mut pts = Vec::new();
        for v in (0..n).step_by(2) {
            for u in (0..n).step_by(2) {
                let p = v * n + u;
                if seg[p] == class::SKY {
                    continue;
                }
                let d = depth[p];
                let lat = (u as f64 - cx) * d / f;
                let ground = matches!(seg[p], 6 | 7 | 8 | 9 | 14 | 22);
                let z = if ground {
                    0.0
                } else {
                    ((horizon + CAM_HEIGHT * f / d - (v as f64 + 0.5)) * d / f).max(0.05)
                };
                pts.push([d as f32, lat as f32, z as f32, rng.gen_range(0.0..1.0f32)]);
            }
        }
        pts
    });

    // values are stored as f32 on disk
    let q = |v: f64| v as f32 as f64;
    let ego = EgoState {
        speed: q(ego.speed),
        x: q(ego.x),
        y: q(ego.y),
        heading: q(ego.heading),
        route: (q(ego.route.0), q(ego.route.1)),
    };
    let waypoints = waypoints.map(|w| w.map(q));
    let mut s = Sample {
        size: n,
        rgb,
        depth_rgb,
        seg,
        ego,
        waypoints,
        controls: [q(steer), q(throttle), q(brake)],
        traffic_light,
        stop_sign,
        lidar,
    };
    if cfg.empty {
        s.seg.iter_mut().for_each(|k| *k = class::UNLABELED);
        s.rgb.iter_mut().for_each(|v| *v = 0);
        s.traffic_light = false;
        s.stop_sign = false;
    }
    s
}
