//! The classification network: stem, four downsampling stages, optional FEA
//! modules on the three deepest stages, optional SPPF, a cross-stage partial
//! attention head, global pooling and a linear classifier.

use aggrnet_tensor::{Element, Tensor, TensorError, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{CHANNEL_REDUCTION, SPATIAL_KERNEL};
use crate::blocks::{C2pca, C2psa, C3k2, ConvBlock, Sppf};
use crate::error::{Error, Result};
use crate::fea::{FeaState, DEFAULT_KAPPA};
use crate::params::{Ctx, Init, ParamId, ParamKind, ParamSpec, ParamStore, Registry};

pub const NUM_STAGES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Toy,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionBlock {
    #[serde(rename = "C2PCA", alias = "c2pca")]
    C2pca,
    #[serde(rename = "C2PSA", alias = "c2psa")]
    C2psa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: Preset,
    pub input_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Stem width followed by the four stage widths.
    pub stage_widths: Vec<usize>,
    /// Bottlenecks per stage.
    pub stage_depths: Vec<usize>,
    /// Subset of {1,2,3}; position 1 follows the deepest stage.
    pub fea_positions: Vec<usize>,
    pub attention_block: AttentionBlock,
    pub use_sppf: bool,
    pub mask_temperature: f64,
    pub channel_reduction: usize,
    pub spatial_kernel: usize,
}

impl ModelConfig {
    pub fn preset(preset: Preset) -> Self {
        let (input_size, stage_widths, stage_depths) = match preset {
            Preset::Toy => (32, vec![16, 32, 64, 128, 256], vec![1; NUM_STAGES]),
            Preset::Full => (224, vec![64, 128, 256, 512, 1024], vec![2, 2, 2, 3]),
        };
        Self {
            preset,
            input_size,
            in_channels: 3,
            num_classes: 4,
            stage_widths,
            stage_depths,
            fea_positions: vec![1, 2, 3],
            attention_block: AttentionBlock::C2pca,
            use_sppf: true,
            mask_temperature: DEFAULT_KAPPA,
            channel_reduction: CHANNEL_REDUCTION,
            spatial_kernel: SPATIAL_KERNEL,
        }
    }

    pub fn toy() -> Self {
        Self::preset(Preset::Toy)
    }

    pub fn full() -> Self {
        Self::preset(Preset::Full)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.stage_widths.len() != NUM_STAGES + 1 || self.stage_widths.contains(&0) {
            return bad(format!(
                "stage_widths must be {} positive values, got {:?}",
                NUM_STAGES + 1,
                self.stage_widths
            ));
        }
        if let Some(w) = self.stage_widths[1..].iter().find(|&&w| w % 2 != 0) {
            return bad(format!("stage widths after the stem must be even, got {w}"));
        }
        if self.stage_depths.len() != NUM_STAGES {
            return bad(format!("stage_depths must have {NUM_STAGES} entries, got {:?}", self.stage_depths));
        }
        let mut seen = [false; 4];
        for &p in &self.fea_positions {
            if !(1..=3).contains(&p) || std::mem::replace(&mut seen[p], true) {
                return bad(format!(
                    "fea_positions must be distinct values from {{1,2,3}}, got {:?}",
                    self.fea_positions
                ));
            }
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.input_size == 0 || self.in_channels == 0 {
            return bad("input_size and in_channels must be positive".into());
        }
        if !(self.mask_temperature > 0.0 && self.mask_temperature.is_finite()) {
            return bad(format!("mask_temperature must be positive, got {}", self.mask_temperature));
        }
        if self.channel_reduction == 0 {
            return bad("channel_reduction must be positive".into());
        }
        if self.spatial_kernel % 2 == 0 {
            return bad(format!("spatial_kernel must be odd, got {}", self.spatial_kernel));
        }
        Ok(())
    }

    /// Stage index an FEA position attaches to.
    pub fn fea_stage(position: usize) -> usize {
        NUM_STAGES - position
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub down: ConvBlock,
    pub c3k2: C3k2,
}

#[derive(Debug, Clone)]
pub enum Head {
    C2pca(C2pca),
    C2psa(C2psa),
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub stem: ConvBlock,
    pub stages: Vec<Stage>,
    /// Indexed by stage.
    pub fea: Vec<Option<FeaState>>,
    pub sppf: Option<Sppf>,
    pub head: Head,
    pub fc_weight: ParamId,
    pub fc_bias: ParamId,
    registry: Registry,
}

/// One row of the parameter manifest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
    pub kind: ParamKind,
}

impl Model {
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let cfg = config.clone();
        let w = &cfg.stage_widths;
        let mut reg = Registry::new();
        let stem = ConvBlock::register(&mut reg, "stem", cfg.in_channels, w[0], 3, 2);
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut fea = vec![None; NUM_STAGES];
        for i in 0..NUM_STAGES {
            let p = format!("stage{}", i + 1);
            let down = ConvBlock::register(&mut reg, &format!("{p}.down"), w[i], w[i + 1], 3, 2);
            let c3k2 = C3k2::register(&mut reg, &format!("{p}.c3k2"), w[i + 1], w[i + 1], cfg.stage_depths[i])?;
            stages.push(Stage { down, c3k2 });
            if let Some(&pos) = cfg.fea_positions.iter().find(|&&pos| ModelConfig::fea_stage(pos) == i) {
                fea[i] = Some(FeaState::register(
                    &mut reg,
                    &format!("fea{pos}"),
                    w[i + 1],
                    cfg.mask_temperature,
                    cfg.spatial_kernel,
                    cfg.channel_reduction,
                )?);
            }
        }
        let c = w[NUM_STAGES];
        let sppf = if cfg.use_sppf { Some(Sppf::register(&mut reg, "sppf", c, c)?) } else { None };
        let head = match cfg.attention_block {
            AttentionBlock::C2pca => Head::C2pca(C2pca::register(&mut reg, "c2pca", c, cfg.channel_reduction)),
            AttentionBlock::C2psa => Head::C2psa(C2psa::register(&mut reg, "c2psa", c)),
        };
        let fc_weight = reg.learnable("fc.weight", &[cfg.num_classes, 2 * c], Init::KaimingUniform { fan_in: 2 * c });
        let fc_bias = reg.learnable("fc.bias", &[cfg.num_classes], Init::Const(0.0));
        Ok(Self { config: cfg, stem, stages, fea, sppf, head, fc_weight, fc_bias, registry: reg })
    }

    pub fn specs(&self) -> &[ParamSpec] {
        self.registry.specs()
    }

    pub fn init_params<F: Element, R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore<F> {
        self.registry.clone().materialize(rng)
    }

    /// Every registered tensor, in registration order.
    pub fn manifest(&self) -> Vec<ManifestEntry> {
        self.specs()
            .iter()
            .map(|s| ManifestEntry { name: s.name.clone(), shape: s.shape.clone(), count: s.numel(), kind: s.kind })
            .collect()
    }

    /// Number of learnable scalars.
    pub fn param_count(&self) -> usize {
        self.registry.learnable_count()
    }

    pub fn tau_ids(&self) -> Vec<ParamId> {
        self.fea.iter().flatten().map(|f| f.tau).collect()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        if shape.len() != 4 || shape[1] != c.in_channels || shape[2] != c.input_size || shape[3] != c.input_size {
            return Err(TensorError::Shape(format!(
                "model expects [N,{},{},{}] input, got {:?}",
                c.in_channels, c.input_size, c.input_size, shape
            ))
            .into());
        }
        Ok(())
    }

    /// Logits `[N, num_classes]`.
    pub fn forward<F: Element>(&self, ctx: &mut Ctx<'_, F>, x: Var) -> Result<Var> {
        self.check_input(ctx.tape.shape(x))?;
        let mut h = self.stem.forward(ctx, x)?;
        for (stage, fea) in self.stages.iter().zip(&self.fea) {
            h = stage.down.forward(ctx, h)?;
            h = stage.c3k2.forward(ctx, h)?;
            if let Some(fea) = fea {
                h = fea.forward(ctx, h)?;
            }
        }
        if let Some(sppf) = &self.sppf {
            h = sppf.forward(ctx, h)?;
        }
        h = match &self.head {
            Head::C2pca(b) => b.forward(ctx, h)?,
            Head::C2psa(b) => b.forward(ctx, h)?,
        };
        let pooled = ctx.tape.global_avg_pool(h)?;
        let n = ctx.tape.shape(pooled)[0];
        let feats = ctx.tape.reshape(pooled, &[n, 2 * self.config.stage_widths[NUM_STAGES]])?;
        let w = ctx.param(self.fc_weight);
        let b = ctx.param(self.fc_bias);
        let wt = ctx.tape.transpose_last(w)?;
        let logits = ctx.tape.matmul(feats, wt)?;
        Ok(ctx.tape.add(logits, b)?)
    }

    /// Eval-mode logits without keeping anything around.
    pub fn predict<F: Element>(&self, params: &ParamStore<F>, images: &Tensor<F>) -> Result<Tensor<F>> {
        let mut tape = aggrnet_tensor::Tape::new();
        let mut ctx = Ctx::new(&mut tape, params, crate::params::Mode::eval());
        let x = ctx.tape.constant(images.clone());
        let logits = self.forward(&mut ctx, x)?;
        Ok(tape.value(logits).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::toy().validate().unwrap();
        ModelConfig::full().validate().unwrap();
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = ModelConfig::toy();
        c.fea_positions = vec![1, 4];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::toy();
        c.fea_positions = vec![2, 2];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.stage_widths[2] = 33;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.num_classes = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn fea_names_follow_positions() {
        let m = Model::build(&ModelConfig::toy()).unwrap();
        let names: Vec<_> = m.specs().iter().map(|s| s.name.as_str()).filter(|n| n.ends_with(".tau")).collect();
        assert_eq!(names, ["fea3.tau", "fea2.tau", "fea1.tau"]);
        assert!(m.fea[3].is_some() && m.fea[0].is_none());
    }
}
