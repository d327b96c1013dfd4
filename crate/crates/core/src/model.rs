//! The full driving model: Encoder A and the segmentation decoder over RGB,
//! a semantic depth cloud built from segmentation and depth, Encoder B
//! over that bird's-eye grid, and the controller.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::backbone::BackboneConfig;
use crate::controller::{Controller, ControllerOutput, RolloutInputs};
use crate::heads::{argmax_classes, build_sdc, global_pool, BevSpec, Camera, SegDecoder, NUM_CLASSES};
use crate::nn::{ParamStore, Session};
use crate::skge::{SkgeEncoder, SkipRoute};
use crate::tensor::{Tensor, Var};
use crate::{Error, Real, Result};

/// Which segmentation feeds the bird's-eye grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SdcSource {
    /// Ground-truth classes (teacher forcing).
    #[default]
    GroundTruth,
    /// Argmax of the model's own segmentation.
    Predicted,
}

impl core::str::FromStr for SdcSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt" => Ok(SdcSource::GroundTruth),
            "pred" => Ok(SdcSource::Predicted),
            _ => Err(Error::Config(format!("unknown sdc source {s:?} (expected gt or pred)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub route_a: SkipRoute,
    pub route_b: SkipRoute,
    pub bev: BevSpec,
    pub lidar: bool,
    pub hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let route = SkipRoute::new(&[1], 4).expect("static route");
        ModelConfig {
            backbone: BackboneConfig::desk(),
            route_a: route.clone(),
            route_b: route,
            bev: BevSpec::default(),
            lidar: false,
            hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn bev_channels(&self) -> usize {
        NUM_CLASSES + if self.lidar { 2 } else { 0 }
    }

    pub fn encoder_b_config(&self) -> BackboneConfig {
        BackboneConfig {
            input_size: self.bev.size,
            ..self.backbone.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.encoder_b_config().validate()?;
        if self.hidden == 0 {
            return Err(Error::Config("controller hidden size must be positive".into()));
        }
        Ok(())
    }
}

/// A collated mini-batch. Images are `[B, 3, H, W]` scaled to `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub rgb: Tensor<T>,
    /// `[B, H, W]` metres
    pub depth_m: Vec<f32>,
    /// `[B, 23, H, W]` one-hot
    pub seg_gt: Tensor<T>,
    /// `[B, H, W]` class indices of `seg_gt`
    pub seg_classes: Vec<u8>,
    pub rollout: RolloutInputs<T>,
    /// `[B, 3, 2]`
    pub waypoints: Tensor<T>,
    /// `[B, 3]` steering, throttle, brake
    pub controls: Tensor<T>,
    /// `[B, 1]`
    pub tl: Tensor<T>,
    pub ss: Tensor<T>,
    /// `[B, 2, Hb, Wb]` height histograms
    pub lidar: Option<Tensor<T>>,
}

impl<T: Real> Batch<T> {
    pub fn len(&self) -> usize {
        self.rgb.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.rgb.shape()[2], self.rgb.shape()[3])
    }

    pub fn cast<U: Real>(&self) -> Batch<U> {
        Batch {
            rgb: self.rgb.cast(),
            depth_m: self.depth_m.clone(),
            seg_gt: self.seg_gt.cast(),
            seg_classes: self.seg_classes.clone(),
            rollout: RolloutInputs {
                route_local: self.rollout.route_local.cast(),
                speed: self.rollout.speed.cast(),
            },
            waypoints: self.waypoints.cast(),
            controls: self.controls.cast(),
            tl: self.tl.cast(),
            ss: self.ss.cast(),
            lidar: self.lidar.as_ref().map(Tensor::cast),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `[B, 23, H, W]`
    pub seg_logits: Var,
    pub control: ControllerOutput,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub enc_a: SkgeEncoder,
    pub decoder: SegDecoder,
    pub enc_b: SkgeEncoder,
    pub controller: Controller,
}

impl Model {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let bb = &cfg.backbone;
        let enc_a = SkgeEncoder::new(store, "enc_a", bb, 3, cfg.route_a.clone(), rng)?;
        let chans = core::array::from_fn(|i| bb.stage_dims(i + 1).1);
        let decoder = SegDecoder::new(store, "seg", chans, cfg.route_a.target(), bb.input_size, rng);
        let enc_b = SkgeEncoder::new(store, "enc_b", &cfg.encoder_b_config(), cfg.bev_channels(), cfg.route_b.clone(), rng)?;
        let (_, cf) = bb.stage_dims(cfg.route_b.target());
        let controller = Controller::new(store, "ctrl", cf, cfg.hidden, rng);
        Ok(Model {
            cfg: cfg.clone(),
            enc_a,
            decoder,
            enc_b,
            controller,
        })
    }

    /// Segmentation logits `[B, 23, H, W]` for `[B, 3, H, W]` images.
    pub fn perceive<T: Real>(&self, s: &mut Session<'_, T>, rgb: Var) -> Result<Var> {
        let e = self.enc_a.forward(s, rgb)?;
        self.decoder.forward(s, &e.stages, e.fused)
    }

    /// Bird's-eye input for Encoder B: the semantic depth cloud, plus the
    /// LiDAR histogram when enabled.
    pub fn bev_input<T: Real>(&self, batch: &Batch<T>, classes: &[u8]) -> Result<Tensor<T>> {
        let b = batch.len();
        let (h, w) = batch.image_size();
        let n = self.cfg.bev.size;
        let sdc: Tensor<T> = build_sdc(classes, &batch.depth_m, b, h, w, &Camera::for_image(h, w), &self.cfg.bev)?;
        if !self.cfg.lidar {
            return Ok(sdc);
        }
        let lidar = batch
            .lidar
            .as_ref()
            .ok_or_else(|| Error::Config("model expects lidar but the batch has none".into()))?;
        if lidar.shape() != [b, 2, n, n] {
            return Err(Error::shape("bev_input", lidar.shape(), &[b, 2, n, n]));
        }
        let mut out = Vec::with_capacity(b * (NUM_CLASSES + 2) * n * n);
        for bi in 0..b {
            out.extend_from_slice(&sdc.data()[bi * NUM_CLASSES * n * n..(bi + 1) * NUM_CLASSES * n * n]);
            out.extend_from_slice(&lidar.data()[bi * 2 * n * n..(bi + 1) * 2 * n * n]);
        }
        Tensor::new(&[b, NUM_CLASSES + 2, n, n], out)
    }

    pub fn drive<T: Real>(&self, s: &mut Session<'_, T>, bev: Var, inputs: &RolloutInputs<T>) -> Result<ControllerOutput> {
        let e = self.enc_b.forward(s, bev)?;
        let feat = global_pool(s, e.fused)?;
        self.controller.forward(s, feat, inputs)
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, batch: &Batch<T>, source: SdcSource) -> Result<ModelOutput> {
        let rgb = s.constant(batch.rgb.clone());
        let seg_logits = self.perceive(s, rgb)?;
        let bev = match source {
            SdcSource::GroundTruth => self.bev_input(batch, &batch.seg_classes)?,
            SdcSource::Predicted => {
                let classes = argmax_classes(s.value(seg_logits))?;
                self.bev_input(batch, &classes)?
            }
        };
        let bev = s.constant(bev);
        let control = self.drive(s, bev, &batch.rollout)?;
        Ok(ModelOutput { seg_logits, control })
    }
}
