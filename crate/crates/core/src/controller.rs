//! Waypoint rollout and control head.
//!
//! Local frame: `x` points right of the ego vehicle, `y` points forward.
//! Global frame: metres with the compass pointing north, headings in degrees.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use crate::nn::{Linear, ParamId, ParamStore, Session};
use crate::tensor::{Tensor, Var};
use crate::{Error, Real, Result};

pub const NUM_WAYPOINTS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct EgoState {
    /// m/s
    pub speed: f64,
    pub x: f64,
    pub y: f64,
    /// degrees
    pub heading: f64,
    /// next route point, global metres
    pub route: (f64, f64),
}

impl EgoState {
    pub fn validate(&self) -> Result<()> {
        if !(self.speed.is_finite() && self.speed >= 0.0) {
            return Err(Error::Data(format!("speed must be finite and nonnegative, got {}", self.speed)));
        }
        Ok(())
    }
}

/// `[[cos, -sin], [sin, cos]]` for `90 + heading` degrees.
pub fn rotation(heading_deg: f64) -> [[f64; 2]; 2] {
    let a = (90.0 + heading_deg).to_radians();
    let (s, c) = (Float::sin(a), Float::cos(a));
    [[c, -s], [s, c]]
}

/// Global point to the ego frame: `Rᵀ (p - ego)`.
pub fn global_to_local(p: (f64, f64), ego: &EgoState) -> (f64, f64) {
    let r = rotation(ego.heading);
    let (dx, dy) = (p.0 - ego.x, p.1 - ego.y);
    (r[0][0] * dx + r[1][0] * dy, r[0][1] * dx + r[1][1] * dy)
}

/// Inverse of [`global_to_local`]: `R l + ego`.
pub fn local_to_global(l: (f64, f64), ego: &EgoState) -> (f64, f64) {
    let r = rotation(ego.heading);
    (r[0][0] * l.0 + r[0][1] * l.1 + ego.x, r[1][0] * l.0 + r[1][1] * l.1 + ego.y)
}

/// PyTorch-layout GRU cell.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub ir: Linear,
    pub iz: Linear,
    pub in_: Linear,
    pub hr: Linear,
    pub hz: Linear,
    pub hn: Linear,
}

impl GruCell {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut l = |tag: &str, i: usize| Linear::new(store, &format!("{name}.{tag}"), i, hidden, true, rng);
        GruCell {
            ir: l("ir", input),
            iz: l("iz", input),
            in_: l("in", input),
            hr: l("hr", hidden),
            hz: l("hz", hidden),
            hn: l("hn", hidden),
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var, h: Var) -> Result<Var> {
        let a = self.ir.forward(s, x)?;
        let b = self.hr.forward(s, h)?;
        let r = s.add(a, b)?;
        let r = s.sigmoid(r)?;
        let a = self.iz.forward(s, x)?;
        let b = self.hz.forward(s, h)?;
        let z = s.add(a, b)?;
        let z = s.sigmoid(z)?;
        let a = self.in_.forward(s, x)?;
        let b = self.hn.forward(s, h)?;
        let b = s.mul(r, b)?;
        let n = s.add(a, b)?;
        let n = s.tanh(n)?;
        // (1 - z) n + z h
        let d = s.sub(h, n)?;
        let d = s.mul(z, d)?;
        s.add(n, d)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [&self.ir, &self.iz, &self.in_, &self.hr, &self.hz, &self.hn]
            .iter()
            .flat_map(|l| l.param_ids())
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TlSs {
    /// `[B, 1]` probabilities
    pub tl: Var,
    pub ss: Var,
    /// `[B, hidden]` bias encodings
    pub tl_enc: Var,
    pub ss_enc: Var,
}

#[derive(Clone, Debug)]
pub struct Rollout {
    /// `[B, 3, 2]` local metres
    pub waypoints: Var,
    /// Un-biased hidden state after each step.
    pub hidden: Vec<Var>,
    pub deltas: Vec<Var>,
    /// Biased final hidden state.
    pub latent: Var,
}

#[derive(Clone, Debug)]
pub struct ControllerOutput {
    pub rollout: Rollout,
    pub flags: TlSs,
    /// `[B, 3]` steering, throttle, brake after denormalization
    pub controls: Var,
}

#[derive(Clone, Debug)]
pub struct Controller {
    pub init: Linear,
    pub gru: GruCell,
    pub delta: Linear,
    pub tl: Linear,
    pub ss: Linear,
    pub tl_enc: Linear,
    pub ss_enc: Linear,
    pub control: Linear,
    pub hidden: usize,
}

/// Per-sample rollout inputs: local route point and speed, `[B, 2]` and `[B, 1]`.
#[derive(Clone, Debug)]
pub struct RolloutInputs<T> {
    pub route_local: Tensor<T>,
    pub speed: Tensor<T>,
}

impl<T: Real> RolloutInputs<T> {
    pub fn new(egos: &[EgoState]) -> Result<Self> {
        let b = egos.len();
        let mut route = Vec::with_capacity(2 * b);
        let mut speed = Vec::with_capacity(b);
        for e in egos {
            e.validate()?;
            let (lx, ly) = global_to_local(e.route, e);
            route.extend([T::c(lx), T::c(ly)]);
            speed.push(T::c(e.speed));
        }
        Ok(RolloutInputs {
            route_local: Tensor::new(&[b, 2], route)?,
            speed: Tensor::new(&[b, 1], speed)?,
        })
    }
}

impl Controller {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, feat: usize, hidden: usize, rng: &mut R) -> Self {
        let init = Linear::new(store, &format!("{name}.init"), feat, hidden, true, rng);
        let gru = GruCell::new(store, &format!("{name}.gru"), 5, hidden, rng);
        Controller {
            init,
            gru,
            delta: Linear::new(store, &format!("{name}.delta"), hidden, 2, true, rng),
            tl: Linear::new(store, &format!("{name}.tl"), feat, 1, true, rng),
            ss: Linear::new(store, &format!("{name}.ss"), feat, 1, true, rng),
            tl_enc: Linear::new(store, &format!("{name}.tl_enc"), 1, hidden, true, rng),
            ss_enc: Linear::new(store, &format!("{name}.ss_enc"), 1, hidden, true, rng),
            control: Linear::new(store, &format!("{name}.control"), hidden, 3, true, rng),
            hidden,
        }
    }

    /// Traffic-light and stop-sign probabilities from the pooled feature `[B, Cf]`.
    pub fn tl_ss_head<T: Real>(&self, s: &mut Session<'_, T>, feat: Var) -> Result<TlSs> {
        let tl = self.tl.forward(s, feat)?;
        let tl = s.sigmoid(tl)?;
        let ss = self.ss.forward(s, feat)?;
        let ss = s.sigmoid(ss)?;
        let tl_enc = self.tl_enc.forward(s, tl)?;
        let ss_enc = self.ss_enc.forward(s, ss)?;
        Ok(TlSs { tl, ss, tl_enc, ss_enc })
    }

    /// Three GRU steps from the pooled feature. Each step's biased state
    /// predicts a waypoint increment; the recurrence carries the un-biased state.
    pub fn rollout<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        feat: Var,
        inputs: &RolloutInputs<T>,
        tl_enc: Var,
        ss_enc: Var,
    ) -> Result<Rollout> {
        let b = s.shape(feat)[0];
        if inputs.route_local.shape() != [b, 2] || inputs.speed.shape() != [b, 1] {
            return Err(Error::shape("rollout", inputs.route_local.shape(), &[b, 2]));
        }
        let route = s.constant(inputs.route_local.clone());
        let speed = s.constant(inputs.speed.clone());
        let mut h = self.init.forward(s, feat)?;
        let mut wp = s.constant(Tensor::zeros(&[b, 2]));
        let mut hidden = Vec::with_capacity(NUM_WAYPOINTS);
        let mut deltas = Vec::with_capacity(NUM_WAYPOINTS);
        let mut points = Vec::with_capacity(NUM_WAYPOINTS);
        let mut latent = h;
        for _ in 0..NUM_WAYPOINTS {
            let x = s.concat(&[wp, route, speed])?;
            h = self.gru.forward(s, x, h)?;
            let biased = s.add(h, tl_enc)?;
            let biased = s.add(biased, ss_enc)?;
            let d = self.delta.forward(s, biased)?;
            wp = s.add(wp, d)?;
            hidden.push(h);
            deltas.push(d);
            points.push(wp);
            latent = biased;
        }
        let waypoints = s.concat(&points)?;
        let waypoints = s.reshape(waypoints, &[b, NUM_WAYPOINTS, 2])?;
        Ok(Rollout {
            waypoints,
            hidden,
            deltas,
            latent,
        })
    }

    /// Steering in [-1, 1], throttle in [0, 0.75], brake in [0, 1].
    pub fn control_head<T: Real>(&self, s: &mut Session<'_, T>, latent: Var) -> Result<Var> {
        let z = self.control.forward(s, latent)?;
        let p = s.sigmoid(z)?;
        denormalize_controls(s, p)
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, feat: Var, inputs: &RolloutInputs<T>) -> Result<ControllerOutput> {
        let flags = self.tl_ss_head(s, feat)?;
        let rollout = self.rollout(s, feat, inputs, flags.tl_enc, flags.ss_enc)?;
        let controls = self.control_head(s, rollout.latent)?;
        Ok(ControllerOutput { rollout, flags, controls })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = self.init.param_ids();
        v.extend(self.gru.param_ids());
        for l in [&self.delta, &self.tl, &self.ss, &self.tl_enc, &self.ss_enc, &self.control] {
            v.extend(l.param_ids());
        }
        v
    }
}

/// Maps sigmoid outputs `[B, 3]` affinely onto the control ranges.
pub fn denormalize_controls<T: Real>(s: &mut Session<'_, T>, p: Var) -> Result<Var> {
    let scale = s.constant(Tensor::from_f64(&[3], &[2.0, 0.75, 1.0])?);
    let offset = s.constant(Tensor::from_f64(&[3], &[-1.0, 0.0, 0.0])?);
    let y = s.mul(p, scale)?;
    s.add(y, offset)
}

/// Host-side inverse of [`denormalize_controls`].
pub fn normalize_controls(steer: f64, throttle: f64, brake: f64) -> [f64; 3] {
    [(steer + 1.0) / 2.0, throttle / 0.75, brake]
}
