//! Hierarchical shifted-window attention encoder.
//!
//! Layout is channels-last throughout: a stage feature is `[B, H, W, C]`.
//! Every data-movement step (patch gathering, padding, cyclic shift, window
//! partitioning, head splitting, 2×2 merging) is an index map applied with
//! [`Tape::map`](crate::tensor::Tape::map).

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use crate::nn::{trunc_normal, LayerNorm, Linear, ParamId, ParamStore, Session};
use crate::tensor::{SparseMap, Var};
use crate::{Error, Real, Result};

/// Index map entry: `Some(flat input index)` or `None` for a zero.
pub type Index = Vec<Option<usize>>;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub input_size: usize,
    pub patch_size: usize,
    pub window_size: usize,
    pub embed_dim: usize,
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub mlp_ratio: f64,
    pub variant: String,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl BackboneConfig {
    /// 64×64 input, patch 4, window 4, C=24, depths (1,1,2,1).
    pub fn desk() -> Self {
        BackboneConfig {
            input_size: 64,
            patch_size: 4,
            window_size: 4,
            embed_dim: 24,
            depths: [1, 1, 2, 1],
            heads: [2, 4, 8, 16],
            mlp_ratio: 4.0,
            variant: "desk".into(),
        }
    }

    pub fn tiny() -> Self {
        BackboneConfig {
            input_size: 224,
            patch_size: 4,
            window_size: 7,
            embed_dim: 96,
            depths: [2, 2, 6, 2],
            heads: [3, 6, 12, 24],
            mlp_ratio: 4.0,
            variant: "tiny".into(),
        }
    }

    pub fn base() -> Self {
        BackboneConfig {
            input_size: 224,
            patch_size: 4,
            window_size: 7,
            embed_dim: 128,
            depths: [2, 2, 18, 2],
            heads: [4, 8, 16, 32],
            mlp_ratio: 4.0,
            variant: "base".into(),
        }
    }

    pub fn variant(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            "base" => Ok(Self::base()),
            other => Err(Error::Config(format!("unknown backbone variant {other}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.window_size == 0 || self.embed_dim == 0 {
            return fail("patch, window and embed_dim must be positive".into());
        }
        if self.input_size % self.patch_size != 0 {
            return fail(format!(
                "input size {} not divisible by patch size {}",
                self.input_size, self.patch_size
            ));
        }
        let grid = self.input_size / self.patch_size;
        if grid % 8 != 0 {
            return fail(format!(
                "patch grid {grid} must be divisible by 8 for three 2x2 merges"
            ));
        }
        for s in 0..4 {
            let c = self.embed_dim << s;
            if self.depths[s] == 0 {
                return fail(format!("stage {} has zero depth", s + 1));
            }
            if self.heads[s] == 0 || c % self.heads[s] != 0 {
                return fail(format!(
                    "stage {}: {} heads do not divide {} channels",
                    s + 1,
                    self.heads[s],
                    c
                ));
            }
        }
        if !(self.mlp_ratio > 0.0) {
            return fail("mlp_ratio must be positive".into());
        }
        Ok(())
    }

    /// Spatial extent and channels of 1-based `stage`.
    pub fn stage_dims(&self, stage: usize) -> (usize, usize) {
        let res = self.input_size / self.patch_size >> (stage - 1);
        (res, self.embed_dim << (stage - 1))
    }

    /// Effective window and shift used by blocks at `stage`. A stage no
    /// larger than the window attends over its whole grid, unshifted.
    pub fn stage_window(&self, stage: usize) -> (usize, usize) {
        let (res, _) = self.stage_dims(stage);
        if res <= self.window_size {
            (res, 0)
        } else {
            (self.window_size, self.window_size / 2)
        }
    }
}

/// Per-stage outputs, 1-indexed. Stages beyond the last one computed are absent.
#[derive(Clone, Debug)]
pub struct StageFeatures {
    pub batch: usize,
    feats: [Option<Var>; 4],
    dims: [(usize, usize, usize); 4],
}

impl StageFeatures {
    pub fn new(batch: usize, dims: [(usize, usize, usize); 4]) -> Self {
        StageFeatures {
            batch,
            feats: [None; 4],
            dims,
        }
    }

    pub fn get(&self, stage: usize) -> Result<Var> {
        if !(1..=4).contains(&stage) {
            return Err(Error::Config(format!("stage {stage} out of range 1..4")));
        }
        self.feats[stage - 1].ok_or_else(|| Error::Config(format!("stage {stage} was not computed")))
    }

    pub fn set(&mut self, stage: usize, v: Var) {
        self.feats[stage - 1] = Some(v);
    }

    /// `(height, width, channels)` of `stage`.
    pub fn dims(&self, stage: usize) -> (usize, usize, usize) {
        self.dims[stage - 1]
    }
}

fn gather_map<T: Real>(in_len: usize, idx: Index) -> Arc<SparseMap<T>> {
    Arc::new(SparseMap::gather(in_len, idx))
}

/// `[B, Cin, H, W] -> [B, H/p, W/p, Cin·p·p]`, patch channels ordered (c, py, px).
pub fn patch_index(b: usize, cin: usize, h: usize, w: usize, p: usize) -> Index {
    let (hp, wp) = (h / p, w / p);
    let mut idx = Vec::with_capacity(b * cin * h * w);
    for bi in 0..b {
        for i in 0..hp {
            for j in 0..wp {
                for c in 0..cin {
                    for py in 0..p {
                        for px in 0..p {
                            idx.push(Some(((bi * cin + c) * h + i * p + py) * w + j * p + px));
                        }
                    }
                }
            }
        }
    }
    idx
}

/// `[B, H, W, C] -> [B·nW, w·w, C]`; windows in row-major order per image.
pub fn window_partition_index(b: usize, h: usize, w: usize, c: usize, ws: usize) -> Index {
    let (nh, nw) = (h / ws, w / ws);
    let mut idx = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for wi in 0..nh {
            for wj in 0..nw {
                for r in 0..ws {
                    for s in 0..ws {
                        let base = ((bi * h + wi * ws + r) * w + wj * ws + s) * c;
                        idx.extend((0..c).map(|ch| Some(base + ch)));
                    }
                }
            }
        }
    }
    idx
}

/// Inverse of [`window_partition_index`].
pub fn window_reverse_index(b: usize, h: usize, w: usize, c: usize, ws: usize) -> Index {
    let fwd = window_partition_index(b, h, w, c, ws);
    invert(&fwd)
}

fn invert(perm: &[Option<usize>]) -> Index {
    let mut inv = vec![None; perm.len()];
    for (o, i) in perm.iter().enumerate() {
        if let Some(i) = i {
            inv[*i] = Some(o);
        }
    }
    inv
}

/// `out[i, j] = in[(i + sh) mod H, (j + sw) mod W]`, i.e. a roll by `(-sh, -sw)`.
pub fn cyclic_shift_index(b: usize, h: usize, w: usize, c: usize, sh: isize, sw: isize) -> Index {
    let mut idx = Vec::with_capacity(b * h * w * c);
    let wrap = |v: isize, n: usize| v.rem_euclid(n as isize) as usize;
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let si = wrap(i as isize + sh, h);
                let sj = wrap(j as isize + sw, w);
                let base = ((bi * h + si) * w + sj) * c;
                idx.extend((0..c).map(|ch| Some(base + ch)));
            }
        }
    }
    idx
}

/// Zero-pads `[B, H, W, C]` at the bottom/right to `[B, Hp, Wp, C]`.
pub fn pad_index(b: usize, h: usize, w: usize, c: usize, hp: usize, wp: usize) -> Index {
    let mut idx = Vec::with_capacity(b * hp * wp * c);
    for bi in 0..b {
        for i in 0..hp {
            for j in 0..wp {
                for ch in 0..c {
                    idx.push((i < h && j < w).then(|| ((bi * h + i) * w + j) * c + ch));
                }
            }
        }
    }
    idx
}

/// Crops `[B, Hp, Wp, C]` back to `[B, H, W, C]`.
pub fn crop_index(b: usize, hp: usize, wp: usize, c: usize, h: usize, w: usize) -> Index {
    let mut idx = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let base = ((bi * hp + i) * wp + j) * c;
                idx.extend((0..c).map(|ch| Some(base + ch)));
            }
        }
    }
    idx
}

/// `out[i] = inner[outer[i]]`: applying `inner` first, then `outer`.
pub fn compose(outer: &[Option<usize>], inner: &[Option<usize>]) -> Index {
    outer.iter().map(|o| o.and_then(|k| inner[k])).collect()
}

/// 2×2 neighbour gather `[B, H, W, C] -> [B, H/2, W/2, 4C]`, neighbours
/// ordered (0,0), (1,0), (0,1), (1,1) as (row, col) offsets.
pub fn merge_index(b: usize, h: usize, w: usize, c: usize) -> Index {
    let mut idx = Vec::with_capacity(b * h * w * c);
    for bi in 0..b {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                for (dr, dc) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let base = ((bi * h + 2 * i + dr) * w + 2 * j + dc) * c;
                    idx.extend((0..c).map(|ch| Some(base + ch)));
                }
            }
        }
    }
    idx
}

/// Allowed attention pairs for the windows of one image: `[nW, n, n]`.
///
/// Positions are labeled on the (padded, shifted) grid by the 3×3 region
/// scheme of shifted windows; a pair is allowed when both tokens share a
/// region label and are both real or both padding.
pub fn shifted_window_mask(h: usize, w: usize, hp: usize, wp: usize, ws: usize, shift: usize) -> Vec<bool> {
    let region = |i: usize, extent: usize| -> usize {
        if shift == 0 {
            0
        } else if i < extent - ws {
            0
        } else if i < extent - shift {
            1
        } else {
            2
        }
    };
    let is_pad = |i: usize, j: usize| -> bool {
        let oi = (i + shift) % hp;
        let oj = (j + shift) % wp;
        oi >= h || oj >= w
    };
    let (nh, nw) = (hp / ws, wp / ws);
    let n = ws * ws;
    let mut mask = Vec::with_capacity(nh * nw * n * n);
    for wi in 0..nh {
        for wj in 0..nw {
            let tok: Vec<(usize, bool)> = (0..n)
                .map(|t| {
                    let (i, j) = (wi * ws + t / ws, wj * ws + t % ws);
                    (region(i, hp) * 3 + region(j, wp), is_pad(i, j))
                })
                .collect();
            for a in &tok {
                for b in &tok {
                    mask.push(a == b);
                }
            }
        }
    }
    mask
}

/// Relative-position lookup `[heads, n, n] <- table[(2w-1)², heads]`.
fn rel_bias_index(ws: usize, heads: usize) -> Index {
    let n = ws * ws;
    let span = 2 * ws - 1;
    let mut idx = Vec::with_capacity(heads * n * n);
    for h in 0..heads {
        for a in 0..n {
            for b in 0..n {
                let dr = (a / ws) as isize - (b / ws) as isize + ws as isize - 1;
                let dc = (a % ws) as isize - (b % ws) as isize + ws as isize - 1;
                let cell = dr as usize * span + dc as usize;
                idx.push(Some(cell * heads + h));
            }
        }
    }
    idx
}

/// Non-overlapping p×p patches, linearly projected and layer-normed.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub norm: LayerNorm,
    pub patch: usize,
    pub in_channels: usize,
}

impl PatchEmbed {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        patch: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        PatchEmbed {
            proj: Linear::new(store, &format!("{name}.proj"), in_channels * patch * patch, dim, true, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            patch,
            in_channels,
        }
    }

    /// `[B, Cin, H, W] -> [B, H/p, W/p, C]`
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, img: Var) -> Result<Var> {
        let shape = s.shape(img).to_vec();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::shape("patch_embed", &shape, &[0, self.in_channels, 0, 0]));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let p = self.patch;
        if h % p != 0 || w % p != 0 {
            return Err(Error::Config(format!("image {h}x{w} not divisible by patch {p}")));
        }
        let map = gather_map(b * c * h * w, patch_index(b, c, h, w, p));
        let patches = s.map(img, map, &[b, h / p, w / p, c * p * p])?;
        let x = self.proj.forward(s, patches)?;
        self.norm.forward(s, x)
    }
}

/// Applies a gather to a `[B, H, W, C]`-style value.
pub fn apply_index<T: Real>(s: &mut Session<'_, T>, x: Var, idx: Index, shape: &[usize]) -> Result<Var> {
    let n = s.value(x).numel();
    s.map(x, gather_map(n, idx), shape)
}

pub fn window_partition<T: Real>(s: &mut Session<'_, T>, x: Var, ws: usize) -> Result<Var> {
    let sh = s.shape(x).to_vec();
    let [b, h, w, c] = four(&sh, "window_partition")?;
    if h % ws != 0 || w % ws != 0 {
        return Err(Error::Config(format!("grid {h}x{w} not divisible by window {ws}")));
    }
    let nw = (h / ws) * (w / ws);
    apply_index(s, x, window_partition_index(b, h, w, c, ws), &[b * nw, ws * ws, c])
}

pub fn window_reverse<T: Real>(s: &mut Session<'_, T>, x: Var, ws: usize, b: usize, h: usize, w: usize) -> Result<Var> {
    let sh = s.shape(x).to_vec();
    if sh.len() != 3 || h % ws != 0 || w % ws != 0 || sh[0] != b * (h / ws) * (w / ws) || sh[1] != ws * ws {
        return Err(Error::Config(format!("cannot reverse windows {sh:?} into {b}x{h}x{w}")));
    }
    let c = sh[2];
    apply_index(s, x, window_reverse_index(b, h, w, c, ws), &[b, h, w, c])
}

pub fn cyclic_shift<T: Real>(s: &mut Session<'_, T>, x: Var, shift: isize) -> Result<Var> {
    let sh = s.shape(x).to_vec();
    let [b, h, w, c] = four(&sh, "cyclic_shift")?;
    apply_index(s, x, cyclic_shift_index(b, h, w, c, shift, shift), &sh)
}

fn four(sh: &[usize], op: &'static str) -> Result<[usize; 4]> {
    <[usize; 4]>::try_from(sh).map_err(|_| Error::shape(op, sh, &[0, 0, 0, 0]))
}

/// Output of [`WindowAttention::forward`]: the attended tokens and the
/// post-softmax weights `[Bw, heads, n, n]`.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub out: Var,
    pub weights: Var,
}

/// Multi-head scaled dot-product attention inside each window, with a
/// learned relative-position bias on the logits.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub rel_table: ParamId,
    pub heads: usize,
    pub dim: usize,
    pub window: usize,
}

impl WindowAttention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        rng: &mut R,
    ) -> Self {
        let span = 2 * window - 1;
        WindowAttention {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, true, rng),
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, true, rng),
            rel_table: store.add(
                format!("{name}.rel_bias"),
                trunc_normal(rng, 0.02, &[span * span, heads]),
            ),
            heads,
            dim,
            window,
        }
    }

    /// `x: [Bw, n, C]` with `n = window²`. `mask`, when given, lists
    /// allowed pairs as `[nW, n, n]` for one image; it repeats over the
    /// batch and over heads.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var, mask: Option<&[bool]>) -> Result<Attended> {
        let sh = s.shape(x).to_vec();
        let n = self.window * self.window;
        if sh.len() != 3 || sh[1] != n || sh[2] != self.dim {
            return Err(Error::shape("window_attention", &sh, &[0, n, self.dim]));
        }
        let (bw, c, nh) = (sh[0], self.dim, self.heads);
        let d = c / nh;

        let qkv = self.qkv.forward(s, x)?;
        let split = |part: usize| -> Index {
            let mut idx = Vec::with_capacity(bw * n * c);
            for b in 0..bw {
                for h in 0..nh {
                    for t in 0..n {
                        let base = (b * n + t) * 3 * c + part * c + h * d;
                        idx.extend((0..d).map(|e| Some(base + e)));
                    }
                }
            }
            idx
        };
        let qkv_len = bw * n * 3 * c;
        let q = s.map(qkv, gather_map(qkv_len, split(0)), &[bw, nh, n, d])?;
        let k = s.map(qkv, gather_map(qkv_len, split(1)), &[bw, nh, n, d])?;
        let v = s.map(qkv, gather_map(qkv_len, split(2)), &[bw, nh, n, d])?;

        let logits = s.bmm(q, k, true)?;
        let logits = s.scale(logits, T::c(1.0 / (d as f64).sqrt()))?;
        let table = s.param(self.rel_table);
        let table_len = s.value(table).numel();
        let bias = s.map(table, gather_map(table_len, rel_bias_index(self.window, nh)), &[nh, n, n])?;
        let logits = s.add(logits, bias)?;

        let weights = match mask {
            None => s.softmax_lastdim(logits)?,
            Some(m) => {
                if m.is_empty() || m.len() % (n * n) != 0 || bw % (m.len() / (n * n)) != 0 {
                    return Err(Error::Contract(format!(
                        "attention mask of length {} does not fit {bw} windows of {n} tokens",
                        m.len()
                    )));
                }
                let nw = m.len() / (n * n);
                let mut full = Vec::with_capacity(bw * nh * n * n);
                for b in 0..bw {
                    let wm = &m[(b % nw) * n * n..(b % nw + 1) * n * n];
                    for _ in 0..nh {
                        full.extend_from_slice(wm);
                    }
                }
                s.masked_softmax_lastdim(logits, &full)?
            }
        };

        let o = s.bmm(weights, v, false)?;
        let mut merge = Vec::with_capacity(bw * n * c);
        for b in 0..bw {
            for t in 0..n {
                for h in 0..nh {
                    let base = ((b * nh + h) * n + t) * d;
                    merge.extend((0..d).map(|e| Some(base + e)));
                }
            }
        }
        let o = s.map(o, gather_map(bw * n * c, merge), &[bw, n, c])?;
        let out = self.proj.forward(s, o)?;
        Ok(Attended { out, weights })
    }
}

/// One attention block of a stage: (shifted) window attention and an MLP,
/// each pre-normed with a residual connection.
#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub shift: usize,
    pub res: usize,
}

impl SwinBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        res: usize,
        window: usize,
        shift: usize,
        mlp_ratio: f64,
        rng: &mut R,
    ) -> Self {
        let hidden = ((dim as f64) * mlp_ratio).round().max(1.0) as usize;
        SwinBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: WindowAttention::new(store, &format!("{name}.attn"), dim, heads, window, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true, rng),
            shift,
            res,
        }
    }

    pub fn window(&self) -> usize {
        self.attn.window
    }

    /// Gather that takes normalized `[B, H, W, C]` tokens to shifted
    /// windows, its inverse, the padded extent, and the attention mask.
    fn plan(&self, b: usize, h: usize, w: usize, c: usize) -> (Index, Index, Option<Vec<bool>>) {
        let ws = self.window();
        let hp = h.div_ceil(ws) * ws;
        let wp = w.div_ceil(ws) * ws;
        let sh = self.shift as isize;
        let pad = pad_index(b, h, w, c, hp, wp);
        let shift = cyclic_shift_index(b, hp, wp, c, sh, sh);
        let part = window_partition_index(b, hp, wp, c, ws);
        let fwd = compose(&part, &compose(&shift, &pad));

        let unpart = window_reverse_index(b, hp, wp, c, ws);
        let unshift = cyclic_shift_index(b, hp, wp, c, -sh, -sh);
        let crop = crop_index(b, hp, wp, c, h, w);
        let back = compose(&crop, &compose(&unshift, &unpart));

        let mask = (self.shift > 0 || hp != h || wp != w)
            .then(|| shifted_window_mask(h, w, hp, wp, ws, self.shift));
        (fwd, back, mask)
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(s, x)?.0)
    }

    /// Block output together with the attention weights of its windows.
    pub fn forward_with_weights<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<(Var, Var)> {
        let sh = s.shape(x).to_vec();
        let [b, h, w, c] = four(&sh, "shifted_block")?;
        let ws = self.window();
        let (fwd, back, mask) = self.plan(b, h, w, c);
        let hp = h.div_ceil(ws) * ws;
        let wp = w.div_ceil(ws) * ws;
        let nw = (hp / ws) * (wp / ws);

        let hn = self.norm1.forward(s, x)?;
        let win = s.map(hn, gather_map(b * h * w * c, fwd), &[b * nw, ws * ws, c])?;
        let att = self.attn.forward(s, win, mask.as_deref())?;
        let back = s.map(att.out, gather_map(b * nw * ws * ws * c, back), &[b, h, w, c])?;
        let x = s.add(x, back)?;

        let m = self.norm2.forward(s, x)?;
        let m = self.fc1.forward(s, m)?;
        let m = s.gelu(m)?;
        let m = self.fc2.forward(s, m)?;
        Ok((s.add(x, m)?, att.weights))
    }
}

/// 2×2 neighbour concatenation, layer norm, then a linear map 4C → 2C.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub reduction: Linear,
}

impl PatchMerge {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut R) -> Self {
        PatchMerge {
            norm: LayerNorm::new(store, &format!("{name}.norm"), 4 * dim),
            reduction: Linear::new(store, &format!("{name}.reduction"), 4 * dim, 2 * dim, false, rng),
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let sh = s.shape(x).to_vec();
        let [b, h, w, c] = four(&sh, "patch_merge")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!("patch merge needs even dims, got {h}x{w}")));
        }
        let g = apply_index(s, x, merge_index(b, h, w, c), &[b, h / 2, w / 2, 4 * c])?;
        let g = self.norm.forward(s, g)?;
        self.reduction.forward(s, g)
    }
}

/// Encoder: patch embedding, four stages of attention blocks, and patch
/// merging between consecutive stages.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub in_channels: usize,
    pub embed: PatchEmbed,
    pub stages: [Vec<SwinBlock>; 4],
    pub merges: [PatchMerge; 3],
}

impl Backbone {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &BackboneConfig,
        in_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let embed = PatchEmbed::new(store, &format!("{name}.patch_embed"), in_channels, cfg.patch_size, cfg.embed_dim, rng);
        let mut stages: [Vec<SwinBlock>; 4] = Default::default();
        let mut merges = Vec::new();
        for st in 1..=4 {
            let (res, dim) = cfg.stage_dims(st);
            let (ws, half) = cfg.stage_window(st);
            for k in 0..cfg.depths[st - 1] {
                let shift = if k % 2 == 1 { half } else { 0 };
                stages[st - 1].push(SwinBlock::new(
                    store,
                    &format!("{name}.stage{st}.block{k}"),
                    dim,
                    cfg.heads[st - 1],
                    res,
                    ws,
                    shift,
                    cfg.mlp_ratio,
                    rng,
                ));
            }
            if st < 4 {
                merges.push(PatchMerge::new(store, &format!("{name}.merge{st}"), dim, rng));
            }
        }
        let merges: [PatchMerge; 3] = merges.try_into().expect("three merges");
        Ok(Backbone {
            cfg: cfg.clone(),
            in_channels,
            embed,
            stages,
            merges,
        })
    }

    pub fn dims(&self) -> [(usize, usize, usize); 4] {
        core::array::from_fn(|i| {
            let (r, c) = self.cfg.stage_dims(i + 1);
            (r, r, c)
        })
    }

    pub fn run_stage<T: Real>(&self, s: &mut Session<'_, T>, stage: usize, mut x: Var) -> Result<Var> {
        for blk in &self.stages[stage - 1] {
            x = blk.forward(s, x)?;
        }
        Ok(x)
    }

    /// All stage outputs up to and including `last` (1-based).
    pub fn forward_upto<T: Real>(&self, s: &mut Session<'_, T>, img: Var, last: usize) -> Result<StageFeatures> {
        let shape = s.shape(img).to_vec();
        if shape.len() != 4 || shape[2] != self.cfg.input_size || shape[3] != self.cfg.input_size {
            return Err(Error::Config(format!(
                "encoder expects {}x{} input, got {:?}",
                self.cfg.input_size, self.cfg.input_size, shape
            )));
        }
        let mut feats = StageFeatures::new(shape[0], self.dims());
        let mut x = self.embed.forward(s, img)?;
        for st in 1..=last.min(4) {
            if st > 1 {
                x = self.merges[st - 2].forward(s, x)?;
            }
            x = self.run_stage(s, st, x)?;
            feats.set(st, x);
        }
        Ok(feats)
    }

    pub fn forward_stages<T: Real>(&self, s: &mut Session<'_, T>, img: Var) -> Result<StageFeatures> {
        self.forward_upto(s, img, 4)
    }

    /// Parameters that feed stage `stage` or earlier.
    pub fn param_ids_upto(&self, stage: usize) -> Vec<ParamId> {
        let mut v = self.embed.proj.param_ids();
        v.extend([self.embed.norm.gamma, self.embed.norm.beta]);
        for st in 1..=stage {
            if st > 1 {
                let m = &self.merges[st - 2];
                v.extend([m.norm.gamma, m.norm.beta, m.reduction.w]);
            }
            for b in &self.stages[st - 1] {
                v.extend([b.norm1.gamma, b.norm1.beta, b.norm2.gamma, b.norm2.beta, b.attn.rel_table]);
                v.extend(b.attn.qkv.param_ids());
                v.extend(b.attn.proj.param_ids());
                v.extend(b.fc1.param_ids());
                v.extend(b.fc2.param_ids());
            }
        }
        v
    }
}
