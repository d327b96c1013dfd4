//! Named parameters, per-pass binding onto a tape, and the two layers every
//! other module is made of.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Deref, DerefMut};

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{GradCheckReport, Tape, Tensor, Var};
use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered set of named learnable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    /// Panics on a duplicate name; parameter names are fixed at model build time.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        let name = name.into();
        let id = self.tensors.len();
        let prev = self.by_name.insert(name.clone(), id);
        assert!(prev.is_none(), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(t.with_requires_grad(true));
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn fill(&mut self, id: ParamId, v: T) {
        self.tensors[id.0].data_mut().iter_mut().for_each(|x| *x = v);
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn accumulate(&mut self, grads: &ParamGrads<T>) {
        for (i, g) in grads.0.iter().enumerate() {
            if let Some(g) = g {
                self.tensors[i].accumulate_grad(g);
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Parameters as 32-bit named records, in store order.
    pub fn to_records(&self) -> Vec<(String, Tensor<f32>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| (n.clone(), t.cast::<f32>().strip_grad().with_requires_grad(false)))
            .collect()
    }

    /// Overwrites every parameter from named records. Names and shapes must
    /// match this store exactly.
    pub fn load_records(&mut self, records: &[(String, Tensor<f32>)]) -> Result<()> {
        if records.len() != self.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model expects {}",
                records.len(),
                self.len()
            )));
        }
        for (name, t) in records {
            let id = self
                .find(name)
                .ok_or_else(|| Error::Config(format!("unexpected tensor {name} in checkpoint")))?;
            let dst = &mut self.tensors[id.0];
            if dst.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            for (d, s) in dst.data_mut().iter_mut().zip(t.data()) {
                *d = T::c(*s as f64);
            }
        }
        Ok(())
    }
}

/// Per-parameter gradients produced by one [`Session::backward`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads<T>(Vec<Option<Vec<T>>>);

impl<T: Real> ParamGrads<T> {
    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.0[id.0].as_deref()
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v.f64() * v.f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Norm restricted to a subset of parameters.
    pub fn norm_of(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .filter_map(|&id| self.get(id))
            .flat_map(|g| g.iter())
            .map(|v| v.f64() * v.f64())
            .sum::<f64>()
            .sqrt()
    }
}

/// One forward pass: a fresh tape plus lazily-bound parameter leaves.
pub struct Session<'p, T> {
    tape: Tape<T>,
    params: &'p ParamStore<T>,
    bound: Vec<Option<Var>>,
}

impl<'p, T: Real> Session<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Session {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.params.get(id).clone().strip_grad());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn backward(&mut self, loss: Var) -> Result<ParamGrads<T>> {
        self.tape.backward(loss)?;
        let grads = self
            .bound
            .iter()
            .map(|b| b.and_then(|v| self.tape.grad(v).map(<[T]>::to_vec)))
            .collect();
        Ok(ParamGrads(grads))
    }
}

impl<T> Deref for Session<'_, T> {
    type Target = Tape<T>;
    fn deref(&self) -> &Tape<T> {
        &self.tape
    }
}

impl<T> DerefMut for Session<'_, T> {
    fn deref_mut(&mut self) -> &mut Tape<T> {
        &mut self.tape
    }
}

pub(crate) fn xavier_uniform<T: Real, R: Rng + ?Sized>(
    rng: &mut R,
    fan_in: usize,
    fan_out: usize,
    shape: &[usize],
) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::c(rng.gen_range(-a..a)))
}

/// Normal(0, std) truncated to ±2 std by rejection.
pub(crate) fn trunc_normal<T: Real, R: Rng + ?Sized>(rng: &mut R, std: f64, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * core::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            break T::c(z * std);
        }
    })
}

/// Affine map over the last dim: `x[.., in] · W[in, out] + b[out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            xavier_uniform(rng, in_dim, out_dim, &[in_dim, out_dim]),
        );
        let bound = 1.0 / (in_dim as f64).sqrt();
        let b = bias.then(|| {
            let t = Tensor::from_fn(&[out_dim], |_| T::c(rng.gen_range(-bound..bound)));
            store.add(format!("{name}.bias"), t)
        });
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let w = s.param(self.w);
        let y = s.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = s.param(b);
                s.add(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn zero_init<T: Real>(&self, store: &mut ParamStore<T>) {
        store.fill(self.w, T::zero());
        if let Some(b) = self.b {
            store.fill(b, T::zero());
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.w];
        v.extend(self.b);
        v
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        s.layer_norm(x, g, b)
    }
}

/// Which parameter coordinates a parameter-level gradient check visits.
#[derive(Clone, Copy, Debug)]
pub enum CoordPlan {
    All,
    /// For each tensor: the coordinate with the largest analytic gradient
    /// magnitude plus `random` uniformly drawn coordinates.
    PerTensor { random: usize, seed: u64 },
}

/// Finite-difference check of every parameter tensor of `store` against
/// the reverse-mode gradient of the scalar produced by `f`.
pub fn check_param_grads<F>(
    store: &mut ParamStore<f64>,
    f: F,
    h: f64,
    plan: CoordPlan,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Session<'_, f64>) -> Result<Var>,
{
    let grads = {
        let mut s = Session::new(store);
        let loss = f(&mut s)?;
        s.backward(loss)?
    };
    let mut coords: Vec<(ParamId, usize)> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(match plan {
        CoordPlan::PerTensor { seed, .. } => seed,
        CoordPlan::All => 0,
    });
    for id in store.ids() {
        let n = store.get(id).numel();
        match plan {
            CoordPlan::All => coords.extend((0..n).map(|c| (id, c))),
            CoordPlan::PerTensor { random, .. } => {
                let g = grads.get(id);
                let best = g.map_or(0, |g| {
                    let mut bi = 0;
                    for (i, v) in g.iter().enumerate() {
                        if v.abs() > g[bi].abs() {
                            bi = i;
                        }
                    }
                    bi
                });
                coords.push((id, best));
                for _ in 0..random {
                    coords.push((id, rng.gen_range(0..n)));
                }
            }
        }
    }

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut s = Session::new(store);
        let loss = f(&mut s)?;
        let v = s.value(loss).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        checked: 0,
    };
    for (k, &(id, c)) in coords.iter().enumerate() {
        let orig = store.get(id).data()[c];
        store.get_mut(id).data_mut()[c] = orig + h;
        let fp = eval(store);
        store.get_mut(id).data_mut()[c] = orig - h;
        let fm = eval(store);
        store.get_mut(id).data_mut()[c] = orig;
        let numeric = (fp? - fm?) / (2.0 * h);
        let analytic = grads.get(id).map_or(0.0, |g| g[c]);
        let e = crate::tensor::rel_err(analytic, numeric);
        if report.checked == 0 || e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst_index = k;
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn session_binds_each_param_once() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let mut s = Session::new(&store);
        let a = s.param(id);
        let b = s.param(id);
        assert_eq!(a, b);
        let p = s.mul(a, b).unwrap();
        let l = s.sum(p).unwrap();
        let g = s.backward(l).unwrap();
        assert_eq!(g.get(id).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn records_roundtrip_and_validate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        Linear::new(&mut store, "fc", 3, 2, true, &mut rng);
        let recs = store.to_records();
        let mut other = ParamStore::<f32>::new();
        Linear::new(&mut other, "fc", 3, 2, true, &mut ChaCha8Rng::seed_from_u64(9));
        other.load_records(&recs).unwrap();
        assert_eq!(other.get(ParamId(0)).data(), store.get(ParamId(0)).data());

        let mut wrong = ParamStore::<f32>::new();
        Linear::new(&mut wrong, "fc", 4, 2, true, &mut rng);
        assert!(matches!(wrong.load_records(&recs), Err(Error::Config(_))));
    }

    #[test]
    fn linear_layer_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let fc = Linear::new(&mut store, "fc", 4, 3, true, &mut rng);
        store.fill(fc.b.unwrap(), 0.1);
        let x = Tensor::<f64>::from_fn(&[2, 4], |i| (i as f64 * 0.7).sin());
        let r = check_param_grads(
            &mut store,
            |s| {
                let xv = s.constant(x.clone());
                let y = fc.forward(s, xv)?;
                let y = s.tanh(y)?;
                s.sum(y)
            },
            1e-5,
            CoordPlan::All,
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
        assert_eq!(r.checked, 15);
    }
}
