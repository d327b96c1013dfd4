//! Task metrics over model outputs and leaderboard metrics over drive logs.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::heads::NUM_CLASSES;
use crate::tensor::Tensor;
use crate::{Error, Real, Result};

/// Intersection over union of two binary masks; two empty masks score 1.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape("iou", &[pred.len()], &[gt.len()]));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Per-class IoU of two class-index maps.
pub fn class_iou(pred: &[u8], gt: &[u8], classes: usize) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::shape("class_iou", &[pred.len()], &[gt.len()]));
    }
    if let Some(&c) = pred.iter().chain(gt).find(|&&c| c as usize >= classes) {
        return Err(Error::Contract(format!("class index {c} outside 0..{classes}")));
    }
    let mut inter = alloc::vec![0usize; classes];
    let mut union = alloc::vec![0usize; classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if p == g {
            inter[p as usize] += 1;
            union[p as usize] += 1;
        } else {
            union[p as usize] += 1;
            union[g as usize] += 1;
        }
    }
    Ok(inter
        .iter()
        .zip(&union)
        .map(|(&i, &u)| if u == 0 { 1.0 } else { i as f64 / u as f64 })
        .collect())
}

pub fn mean_iou(pred: &[u8], gt: &[u8], classes: usize) -> Result<f64> {
    let per = class_iou(pred, gt, classes)?;
    Ok(per.iter().sum::<f64>() / per.len().max(1) as f64)
}

/// Fraction of matching booleans, `(TP + TN) / (TP + TN + FP + FN)`.
pub fn accuracy(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape("accuracy", &[pred.len()], &[gt.len()]));
    }
    if pred.is_empty() {
        return Err(Error::Contract("accuracy of an empty set".into()));
    }
    let hits = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Probability → decision at the 0.5 threshold.
pub fn decide(p: f64) -> bool {
    p >= 0.5
}

/// Mean absolute error, computed exactly as the L1 training loss.
pub fn mae<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<T> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("mae", pred.shape(), gt.shape()));
    }
    let s = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&a, &b)| (a - b).abs())
        .sum::<T>()
        / T::c(pred.numel() as f64);
    if !s.is_finite() {
        return Err(Error::NonFinite("mae".into()));
    }
    Ok(s)
}

/// Everything the task metrics need for `N` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    /// `[N, H, W]` class indices
    pub seg: Vec<u8>,
    /// `[N, 3, 2]` local metres
    pub waypoints: Tensor<f32>,
    /// `[N, 3]` steering, throttle, brake
    pub controls: Tensor<f32>,
    /// red-light probabilities (or 0/1 labels)
    pub tl: Vec<f64>,
    pub ss: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskMetrics {
    pub ss_metric: f64,
    pub wp_metric: f64,
    pub str_metric: f64,
    pub thr_metric: f64,
    pub brk_metric: f64,
    pub redl_metric: f64,
    pub stops_metric: f64,
}

impl TaskMetrics {
    pub const NAMES: [&'static str; 7] = [
        "ss_metric",
        "wp_metric",
        "str_metric",
        "thr_metric",
        "brk_metric",
        "redl_metric",
        "stops_metric",
    ];

    pub fn values(&self) -> [f64; 7] {
        [
            self.ss_metric,
            self.wp_metric,
            self.str_metric,
            self.thr_metric,
            self.brk_metric,
            self.redl_metric,
            self.stops_metric,
        ]
    }

    pub fn compute(pred: &Predictions, gt: &Predictions) -> Result<Self> {
        let col = |t: &Tensor<f32>, k: usize| -> Result<Tensor<f32>> {
            let (n, c) = (t.shape()[0], t.shape()[1]);
            Tensor::new(&[n, 1], (0..n).map(|i| t.data()[i * c + k]).collect())
        };
        if pred.controls.rank() != 2 || pred.controls.shape() != gt.controls.shape() {
            return Err(Error::shape("task_metrics", pred.controls.shape(), gt.controls.shape()));
        }
        let flags = |p: &[f64]| p.iter().map(|&v| decide(v)).collect::<Vec<_>>();
        Ok(TaskMetrics {
            ss_metric: mean_iou(&pred.seg, &gt.seg, NUM_CLASSES)?,
            wp_metric: mae(&pred.waypoints, &gt.waypoints)? as f64,
            str_metric: mae(&col(&pred.controls, 0)?, &col(&gt.controls, 0)?)? as f64,
            thr_metric: mae(&col(&pred.controls, 1)?, &col(&gt.controls, 1)?)? as f64,
            brk_metric: mae(&col(&pred.controls, 2)?, &col(&gt.controls, 2)?)? as f64,
            redl_metric: accuracy(&flags(&pred.tl), &flags(&gt.tl))?,
            stops_metric: accuracy(&flags(&pred.ss), &flags(&gt.ss))?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Infraction {
    Pedestrian,
    Vehicle,
    Static,
    RedLight,
    StopSign,
}

impl Infraction {
    pub const ALL: [Infraction; 5] = [
        Infraction::Pedestrian,
        Infraction::Vehicle,
        Infraction::Static,
        Infraction::RedLight,
        Infraction::StopSign,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Infraction::Pedestrian => "ped",
            Infraction::Vehicle => "veh",
            Infraction::Static => "static",
            Infraction::RedLight => "red_light",
            Infraction::StopSign => "stop_sign",
        }
    }
}

impl core::str::FromStr for Infraction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Infraction::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Data(format!("unknown infraction type {s:?}")))
    }
}

/// Multiplicative penalty per infraction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PenaltyTable {
    pub pedestrian: f64,
    pub vehicle: f64,
    pub static_object: f64,
    pub red_light: f64,
    pub stop_sign: f64,
}

impl Default for PenaltyTable {
    fn default() -> Self {
        PenaltyTable {
            pedestrian: 0.50,
            vehicle: 0.60,
            static_object: 0.65,
            red_light: 0.70,
            stop_sign: 0.80,
        }
    }
}

impl PenaltyTable {
    pub fn get(&self, k: Infraction) -> f64 {
        match k {
            Infraction::Pedestrian => self.pedestrian,
            Infraction::Vehicle => self.vehicle,
            Infraction::Static => self.static_object,
            Infraction::RedLight => self.red_light,
            Infraction::StopSign => self.stop_sign,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for k in Infraction::ALL {
            let p = self.get(k);
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Config(format!("penalty for {} must be in (0, 1], got {p}", k.as_str())));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Step {
    pub x: f64,
    pub y: f64,
    pub on_road: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriveLog {
    pub route_id: String,
    /// metres
    pub route_length: f64,
    pub steps: Vec<Step>,
    pub infractions: Vec<Infraction>,
}

impl DriveLog {
    pub fn new(route_id: impl Into<String>, route_length: f64) -> Self {
        DriveLog {
            route_id: route_id.into(),
            route_length,
            steps: Vec::new(),
            infractions: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.route_length > 0.0 && self.route_length.is_finite()) {
            return Err(Error::Contract(format!(
                "route {}: total length must be positive, got {}",
                self.route_id, self.route_length
            )));
        }
        if let Some(i) = self.steps.iter().position(|s| !(s.x.is_finite() && s.y.is_finite())) {
            return Err(Error::Contract(format!("route {}: step {i} has a non-finite position", self.route_id)));
        }
        Ok(())
    }

    pub fn count(&self, k: Infraction) -> usize {
        self.infractions.iter().filter(|&&i| i == k).count()
    }
}

/// Percentage of the route covered on-road; a segment counts when the step
/// it starts from is on the road. Capped at 100.
pub fn route_completion(log: &DriveLog) -> Result<f64> {
    log.validate()?;
    let done: f64 = log
        .steps
        .windows(2)
        .filter(|w| w[0].on_road)
        .map(|w| num_traits::Float::hypot(w[1].x - w[0].x, w[1].y - w[0].y))
        .sum();
    Ok((done / log.route_length * 100.0).min(100.0))
}

/// `Π_j p_j^{n_j}` over the log's infractions.
pub fn infraction_penalty(log: &DriveLog, table: &PenaltyTable) -> f64 {
    log.infractions.iter().fold(1.0, |acc, &k| acc * table.get(k))
}

/// Mean of `RC_i · IP_i` over routes.
pub fn driving_score(routes: &[(f64, f64)]) -> Result<f64> {
    if routes.is_empty() {
        return Err(Error::Contract("driving score needs at least one route".into()));
    }
    Ok(routes.iter().map(|(rc, ip)| rc * ip).sum::<f64>() / routes.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouteScore {
    pub route_id: String,
    pub rc: f64,
    pub ip: f64,
    pub ds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSummary {
    pub routes: Vec<RouteScore>,
    pub mean_rc: f64,
    pub mean_ip: f64,
    pub ds: f64,
}

pub fn score_routes(logs: &[DriveLog], table: &PenaltyTable) -> Result<ScoreSummary> {
    table.validate()?;
    let routes = logs
        .iter()
        .map(|log| {
            let rc = route_completion(log)?;
            let ip = infraction_penalty(log, table);
            Ok(RouteScore {
                route_id: log.route_id.clone(),
                rc,
                ip,
                ds: rc * ip,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(f64, f64)> = routes.iter().map(|r| (r.rc, r.ip)).collect();
    let ds = driving_score(&pairs)?;
    let n = routes.len() as f64;
    Ok(ScoreSummary {
        mean_rc: routes.iter().map(|r| r.rc).sum::<f64>() / n,
        mean_ip: routes.iter().map(|r| r.ip).sum::<f64>() / n,
        ds,
        routes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn step(x: f64, y: f64, on_road: bool) -> Step {
        Step { x, y, on_road }
    }

    #[test]
    fn iou_examples() {
        let a = [true, true, false, false];
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&[true, false], &[false, true]).unwrap(), 0.0);
        assert_eq!(iou(&[true, true, false, false], &[true, false, true, false]).unwrap(), 1.0 / 3.0);
        assert_eq!(iou(&[false; 3], &[false; 3]).unwrap(), 1.0);
        assert!(iou(&[true], &[true, false]).is_err());
    }

    #[test]
    fn class_iou_counts_each_class() {
        let gt = [0u8, 0, 1, 1];
        let pred = [0u8, 1, 1, 1];
        let per = class_iou(&pred, &gt, 3).unwrap();
        assert_eq!(per, vec![0.5, 2.0 / 3.0, 1.0]);
        assert!(class_iou(&[5], &[0], 3).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[true, false], &[true, false]).unwrap(), 1.0);
        let pred = [true, false, true, false];
        let gt = [true, false, false, true];
        assert_eq!(accuracy(&pred, &gt).unwrap(), 0.5);
        assert_eq!(accuracy(&[true, true], &[false, false]).unwrap(), 0.0);
        assert!(matches!(accuracy(&[], &[]), Err(Error::Contract(_))));
        assert!(decide(0.5) && !decide(0.4999));
    }

    #[test]
    fn mae_examples() {
        let a = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64 * 0.7 - 1.0);
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        let b = Tensor::from_fn(&[2, 3], |i| a.data()[i] + 0.25);
        assert!((mae(&a, &b).unwrap() - 0.25).abs() < 1e-12);
        assert!(mae(&a, &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn route_completion_examples() {
        let mut log = DriveLog::new("r", 100.0);
        log.steps = vec![step(0.0, 0.0, true); 5];
        assert_eq!(route_completion(&log).unwrap(), 0.0);

        log.steps = (0..=10).map(|i| step(i as f64 * 10.0, 0.0, true)).collect();
        assert_eq!(route_completion(&log).unwrap(), 100.0);

        // 60 m driven, the 10 m segment starting at x = 20 is off-road
        log.steps = (0..=6).map(|i| step(i as f64 * 10.0, 0.0, i != 2)).collect();
        assert!((route_completion(&log).unwrap() - 50.0).abs() < 1e-12);

        log.steps = (0..=30).map(|i| step(i as f64 * 10.0, 0.0, true)).collect();
        assert_eq!(route_completion(&log).unwrap(), 100.0);

        assert!(matches!(route_completion(&DriveLog::new("z", 0.0)), Err(Error::Contract(_))));
        let mut bad = DriveLog::new("n", 10.0);
        bad.steps.push(step(f64::NAN, 0.0, true));
        assert!(route_completion(&bad).is_err());
    }

    #[test]
    fn penalty_examples() {
        let t = PenaltyTable::default();
        assert_eq!(
            Infraction::ALL.map(|k| t.get(k)),
            [0.50, 0.60, 0.65, 0.70, 0.80]
        );
        let mut log = DriveLog::new("r", 1.0);
        assert_eq!(infraction_penalty(&log, &t), 1.0);
        log.infractions.push(Infraction::Pedestrian);
        assert_eq!(infraction_penalty(&log, &t), 0.5);
        log.infractions = vec![Infraction::Vehicle; 2];
        assert!((infraction_penalty(&log, &t) - 0.36).abs() < 1e-15);
        for k in Infraction::ALL {
            assert_eq!(k.as_str().parse::<Infraction>().unwrap(), k);
        }
        assert!("bike".parse::<Infraction>().is_err());
        assert!(PenaltyTable { stop_sign: 0.0, ..t }.validate().is_err());
    }

    #[test]
    fn driving_score_examples() {
        let ds = driving_score(&[(86.8683, 0.3421)]).unwrap();
        assert!((ds - 29.7100).abs() < 0.01, "{ds}");
        let ds = driving_score(&[(82.8075, 0.4491)]).unwrap();
        assert!((ds - 37.19).abs() < 0.005, "{ds}");
        assert_eq!(driving_score(&[(100.0, 1.0)]).unwrap(), 100.0);
        assert!(matches!(driving_score(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn three_route_summary() {
        let t = PenaltyTable::default();
        let mut a = DriveLog::new("a", 50.0);
        a.steps = vec![step(0.0, 0.0, true), step(30.0, 40.0, true)];
        let mut b = DriveLog::new("b", 20.0);
        b.steps = vec![step(0.0, 0.0, true), step(10.0, 0.0, true)];
        b.infractions = vec![Infraction::RedLight, Infraction::StopSign];
        let mut c = DriveLog::new("c", 10.0);
        c.steps = vec![step(0.0, 0.0, false), step(10.0, 0.0, true)];
        let s = score_routes(&[a, b, c], &t).unwrap();
        let want = [(100.0, 1.0), (50.0, 0.7 * 0.8), (0.0, 1.0)];
        for (r, (rc, ip)) in s.routes.iter().zip(want) {
            assert!((r.rc - rc).abs() < 1e-12 && (r.ip - ip).abs() < 1e-12, "{r:?}");
        }
        assert!((s.ds - (100.0 + 28.0) / 3.0).abs() < 1e-12);
        assert!((s.mean_rc - 50.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_score_perfectly() {
        let p = Predictions {
            seg: vec![0, 7, 7, 13],
            waypoints: Tensor::from_fn(&[2, 3, 2], |i| i as f32),
            controls: Tensor::from_fn(&[2, 3], |i| i as f32 * 0.1),
            tl: vec![1.0, 0.0],
            ss: vec![0.0, 0.0],
        };
        let m = TaskMetrics::compute(&p, &p).unwrap();
        assert_eq!(m.values(), [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
    }
}
