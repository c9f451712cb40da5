//! The stereo network: feature extraction, fusion, group-wise correlation,
//! aggregation and soft-argmin regression wired into one forward pass.

pub mod aggregate;
pub mod fe_mamba;
pub mod fusion;
pub mod layers;
pub mod plain_cnn;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::regress;
use crate::tensor::Tensor;

pub use aggregate::AggregateConfig;
pub use fe_mamba::{BackboneConfig, FeaturePyramid, Side};
pub use fusion::FusedFeature;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    FeMamba,
    PlainCnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub channels: BackboneConfig,
    /// When disabled, `f1` alone feeds the cost volume.
    pub mff_enabled: bool,
    pub fused_channels: usize,
    pub groups: usize,
    pub d_max: usize,
    pub aggregate: AggregateConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::FeMamba,
            channels: BackboneConfig::default(),
            mff_enabled: true,
            fused_channels: 48,
            groups: 8,
            d_max: 64,
            aggregate: AggregateConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Channels of the feature map that enters the cost volume.
    pub fn volume_feature_channels(&self) -> usize {
        if self.mff_enabled {
            self.fused_channels + self.channels.c4
        } else {
            self.channels.c1
        }
    }

    pub fn quarter_levels(&self) -> usize {
        self.d_max / 4
    }

    pub fn validate(&self) -> Result<()> {
        self.channels.validate()?;
        if self.d_max == 0 || self.d_max % 4 != 0 {
            return Err(Error::invalid(format!("d_max {} must be a positive multiple of 4", self.d_max)));
        }
        let cg = self.volume_feature_channels();
        if self.groups == 0 || cg % self.groups != 0 {
            return Err(Error::invalid(format!(
                "{cg} volume feature channels are not divisible into {} groups",
                self.groups
            )));
        }
        if self.aggregate.channels == 0 || self.fused_channels == 0 {
            return Err(Error::invalid("aggregation and fusion channel counts must be positive"));
        }
        Ok(())
    }
}

/// Intermediate and final nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutputs {
    pub left: FeaturePyramid,
    pub right: FeaturePyramid,
    pub fused_left: Var,
    pub fused_right: Var,
    pub volume: Var,
    pub raw: [Var; 4],
    /// Disparity maps `d̂_0..d̂_3`, each `[H, W]`.
    pub disparities: [Var; 4],
}

#[derive(Clone, Debug)]
pub struct StereoModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl StereoModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(seed);
        match config.backbone {
            BackboneKind::FeMamba => fe_mamba::init(&mut params, &config.channels),
            BackboneKind::PlainCnn => plain_cnn::init(&mut params, &config.channels),
        }
        if config.mff_enabled {
            fusion::init(&mut params, &config.channels, config.fused_channels);
        }
        aggregate::init(&mut params, &config.aggregate, config.groups);
        Ok(Self { config, params })
    }

    pub fn extract(&self, g: &mut Graph, left: Var, right: Var) -> Result<(FeaturePyramid, FeaturePyramid)> {
        match self.config.backbone {
            BackboneKind::FeMamba => fe_mamba::extract(g, &self.params, &self.config.channels, left, right),
            BackboneKind::PlainCnn => plain_cnn::extract(g, &self.params, left, right),
        }
    }

    fn volume_features(&self, g: &mut Graph, p: &FeaturePyramid) -> Result<Var> {
        if self.config.mff_enabled {
            Ok(fusion::mff_fuse(g, &self.params, p)?.fg)
        } else {
            Ok(p.f1)
        }
    }

    /// Records the forward pass of a normalized `[3, H, W]` pair. With
    /// `training` unset only the final output head is evaluated and its map
    /// fills all four slots.
    pub fn forward(&self, g: &mut Graph, left: Var, right: Var, training: bool) -> Result<ModelOutputs> {
        let (h, w) = fe_mamba::check_image(g.shape(left))?;
        if g.shape(left) != g.shape(right) {
            return Err(Error::shape("stereo pair", g.shape(left), g.shape(right)));
        }
        let (pl, pr) = self.extract(g, left, right)?;
        let fused_left = self.volume_features(g, &pl)?;
        let fused_right = self.volume_features(g, &pr)?;
        let volume = g.gwc_volume(fused_left, fused_right, self.config.quarter_levels(), self.config.groups)?;
        let raw = aggregate::aggregate(g, &self.params, &self.config.aggregate, volume, !training)?;
        let mut disparities = Vec::with_capacity(4);
        let mut seen: Vec<(Var, Var)> = Vec::new();
        for r in raw {
            // Duplicated heads share one regression.
            if let Some(&(_, d)) = seen.iter().find(|(src, _)| *src == r) {
                disparities.push(d);
                continue;
            }
            let prob = regress::upsample_to_probability(g, r, self.config.d_max, h, w)?;
            let d = regress::disparity_regression(g, prob)?;
            seen.push((r, d));
            disparities.push(d);
        }
        Ok(ModelOutputs {
            left: pl,
            right: pr,
            fused_left,
            fused_right,
            volume,
            raw,
            disparities: [disparities[0], disparities[1], disparities[2], disparities[3]],
        })
    }

    /// Inference: the final disparity map `[H, W]`, values in `[0, D_max - 1]`.
    pub fn predict(&self, left: &Tensor, right: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let l = g.constant(left.clone());
        let r = g.constant(right.clone());
        let out = self.forward(&mut g, l, r, false)?;
        Ok(g.value(out.disparities[3]).clone())
    }
}
