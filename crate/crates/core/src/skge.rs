//! Skip-stage connections between encoder stages.
//!
//! A [`SkipRoute`] names source stages whose outputs are bilinearly resampled
//! onto a target stage's grid, projected to its channel count and added to
//! its output. Routes are written `1,2->4`; a bare stage such as `3` taps
//! that stage without fusion, and `none` is the plain stage-4 output.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;

use crate::backbone::{Backbone, BackboneConfig, StageFeatures};
use crate::nn::{Linear, ParamId, ParamStore, Session};
use crate::tensor::{SparseMap, Var};
use crate::{Error, Real, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SkipRoute {
    sources: Vec<usize>,
    target: usize,
}

impl SkipRoute {
    pub fn new(sources: &[usize], target: usize) -> Result<Self> {
        let bad = |m: String| Err(Error::Config(m));
        if !(1..=4).contains(&target) {
            return bad(format!("route target {target} outside 1..4"));
        }
        let mut s = sources.to_vec();
        s.sort_unstable();
        for w in s.windows(2) {
            if w[0] == w[1] {
                return bad(format!("route source {} listed twice", w[0]));
            }
        }
        for &x in &s {
            if !(1..=4).contains(&x) {
                return bad(format!("route source {x} outside 1..4"));
            }
            if x == target {
                return bad(format!("route target {target} is also a source"));
            }
        }
        Ok(SkipRoute { sources: s, target })
    }

    /// Feature tap on `target` with no fusion.
    pub fn tap(target: usize) -> Result<Self> {
        Self::new(&[], target)
    }

    pub fn sources(&self) -> &[usize] {
        &self.sources
    }

    pub fn target(&self) -> usize {
        self.target
    }

    /// Deepest stage the route reads.
    pub fn deepest(&self) -> usize {
        self.sources.iter().copied().chain([self.target]).max().unwrap_or(self.target)
    }
}

impl fmt::Display for SkipRoute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.sources.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{s}")?;
        }
        if !self.sources.is_empty() {
            f.write_str("->")?;
        }
        write!(f, "{}", self.target)
    }
}

impl FromStr for SkipRoute {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let stage = |t: &str| -> Result<usize> {
            if t.len() == 1 && matches!(t.as_bytes()[0], b'1'..=b'4') {
                Ok((t.as_bytes()[0] - b'0') as usize)
            } else {
                Err(Error::Config(format!("bad stage {t:?} in route {text:?}")))
            }
        };
        let body = text.trim();
        if body == "none" {
            return Self::tap(4);
        }
        match body.split_once("->") {
            None => Self::tap(stage(body)?),
            Some((src, tgt)) => {
                let sources = src.split(',').map(stage).collect::<Result<Vec<_>>>()?;
                Self::new(&sources, stage(tgt)?)
            }
        }
    }
}

/// Corner-aligned sample rows for one axis: `(i0, i1, frac)` per output index.
fn axis_samples(src: usize, out: usize) -> Vec<(usize, usize, f64)> {
    (0..out)
        .map(|o| {
            let pos = if out == 1 {
                (src - 1) as f64 / 2.0
            } else {
                o as f64 * (src - 1) as f64 / (out - 1) as f64
            };
            let i0 = (num_traits::Float::floor(pos) as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Linear map for a corner-aligned bilinear resize of `[B, Hs, Ws, C]` to
/// `[B, out_h, out_w, C]`. Each output pixel is the four-neighbour weighted
/// average of the source cell containing its sample point; a single output
/// row or column samples the source centre.
pub fn bilinear_map<T: Real>(b: usize, hs: usize, ws: usize, c: usize, out_h: usize, out_w: usize) -> Result<SparseMap<T>> {
    if out_h == 0 || out_w == 0 || hs == 0 || ws == 0 {
        return Err(Error::Contract(format!("bilinear resize {hs}x{ws} -> {out_h}x{out_w} has a zero extent")));
    }
    let ys = axis_samples(hs, out_h);
    let xs = axis_samples(ws, out_w);
    let mut rows = Vec::with_capacity(b * out_h * out_w * c);
    for bi in 0..b {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let taps = [
                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                    (y0, x1, (1.0 - fy) * fx),
                    (y1, x0, fy * (1.0 - fx)),
                    (y1, x1, fy * fx),
                ];
                for ch in 0..c {
                    let mut row: Vec<(usize, T)> = Vec::with_capacity(4);
                    for &(y, x, w) in &taps {
                        if w == 0.0 {
                            continue;
                        }
                        let col = ((bi * hs + y) * ws + x) * c + ch;
                        match row.iter_mut().find(|(k, _)| *k == col) {
                            Some(e) => e.1 += T::c(w),
                            None => row.push((col, T::c(w))),
                        }
                    }
                    rows.push(row);
                }
            }
        }
    }
    Ok(SparseMap::weighted(b * hs * ws * c, rows))
}

pub fn bilinear_resize<T: Real>(s: &mut Session<'_, T>, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
    let sh = s.shape(x).to_vec();
    if sh.len() != 4 {
        return Err(Error::shape("bilinear_resize", &sh, &[0, 0, 0, 0]));
    }
    let (b, hs, ws, c) = (sh[0], sh[1], sh[2], sh[3]);
    if out_h == hs && out_w == ws {
        return Ok(x);
    }
    let map = bilinear_map(b, hs, ws, c, out_h, out_w)?;
    s.map(x, Arc::new(map), &[b, out_h, out_w, c])
}

/// Per-pixel channel projection; `None` when channels already agree.
#[derive(Clone, Debug)]
pub struct ChannelAdapt {
    pub proj: Option<Linear>,
}

impl ChannelAdapt {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cs: usize, ct: usize, rng: &mut R) -> Self {
        ChannelAdapt {
            proj: (cs != ct).then(|| Linear::new(store, name, cs, ct, false, rng)),
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        match &self.proj {
            None => Ok(x),
            Some(l) => l.forward(s, x),
        }
    }

    pub fn zero_init<T: Real>(&self, store: &mut ParamStore<T>) {
        if let Some(l) = &self.proj {
            l.zero_init(store);
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.proj.as_ref().map(Linear::param_ids).unwrap_or_default()
    }
}

/// Target stage output plus the resampled, adapted output of every source.
pub fn fuse<T: Real>(
    s: &mut Session<'_, T>,
    feats: &StageFeatures,
    route: &SkipRoute,
    adapters: &[ChannelAdapt],
) -> Result<Var> {
    if adapters.len() != route.sources().len() {
        return Err(Error::Config(format!(
            "route {route} has {} sources but {} adapters",
            route.sources().len(),
            adapters.len()
        )));
    }
    let (th, tw, _) = feats.dims(route.target());
    let mut out = feats.get(route.target())?;
    for (&src, ad) in route.sources().iter().zip(adapters) {
        let f = feats.get(src)?;
        let r = bilinear_resize(s, f, th, tw)?;
        let a = ad.forward(s, r)?;
        out = s.add(out, a)?;
    }
    Ok(out)
}

/// An encoder with a skip-stage route applied to its stage outputs.
#[derive(Clone, Debug)]
pub struct SkgeEncoder {
    pub backbone: Backbone,
    pub route: SkipRoute,
    pub adapters: Vec<ChannelAdapt>,
}

/// Stage features (up to the deepest stage the route or a caller needs)
/// and the fused target feature.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub stages: StageFeatures,
    pub fused: Var,
}

impl SkgeEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &BackboneConfig,
        in_channels: usize,
        route: SkipRoute,
        rng: &mut R,
    ) -> Result<Self> {
        let backbone = Backbone::new(store, name, cfg, in_channels, rng)?;
        let (_, ct) = cfg.stage_dims(route.target());
        let adapters = route
            .sources()
            .iter()
            .map(|&src| {
                let (_, cs) = cfg.stage_dims(src);
                ChannelAdapt::new(store, &format!("{name}.adapt{src}to{}", route.target()), cs, ct, rng)
            })
            .collect();
        Ok(SkgeEncoder { backbone, route, adapters })
    }

    pub fn zero_adapters<T: Real>(&self, store: &mut ParamStore<T>) {
        for a in &self.adapters {
            a.zero_init(store);
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, img: Var) -> Result<Encoded> {
        let stages = self.backbone.forward_upto(s, img, self.route.deepest())?;
        let fused = fuse(s, &stages, &self.route, &self.adapters)?;
        Ok(Encoded { stages, fused })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.backbone.param_ids_upto(self.route.deepest());
        for a in &self.adapters {
            v.extend(a.param_ids());
        }
        v
    }
}
