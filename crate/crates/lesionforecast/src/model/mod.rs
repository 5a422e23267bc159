//! Treatment-conditioned diffusion UNet (x-prediction) and the control
//! adapter that injects image conditioning through zero-initialized
//! projections.

mod adapter;
mod unet;

pub use adapter::ControlAdapter;
pub use unet::DiffusionUNet;

use crate::numerics::{NumericsError, Real, Tensor};

/// Trial arm, plus the dedicated `Null` row used for conditioning
/// dropout and the unconditional branch of guided sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TreatmentArm {
    Placebo,
    Ne,
    Le,
    Mie,
    Moe,
    He,
    Null,
}

impl TreatmentArm {
    /// The six real arms, in efficacy order.
    pub const ARMS: [TreatmentArm; 6] = [
        TreatmentArm::Placebo,
        TreatmentArm::Ne,
        TreatmentArm::Le,
        TreatmentArm::Mie,
        TreatmentArm::Moe,
        TreatmentArm::He,
    ];

    /// Row index into the embedding table; `Null` is the final row.
    pub fn index(self) -> usize {
        match self {
            TreatmentArm::Placebo => 0,
            TreatmentArm::Ne => 1,
            TreatmentArm::Le => 2,
            TreatmentArm::Mie => 3,
            TreatmentArm::Moe => 4,
            TreatmentArm::He => 5,
            TreatmentArm::Null => 6,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            TreatmentArm::Placebo => "Placebo",
            TreatmentArm::Ne => "NE",
            TreatmentArm::Le => "LE",
            TreatmentArm::Mie => "MiE",
            TreatmentArm::Moe => "MoE",
            TreatmentArm::He => "HE",
            TreatmentArm::Null => "Null",
        }
    }
}

impl std::fmt::Display for TreatmentArm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.code())
    }
}

impl std::str::FromStr for TreatmentArm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Placebo" | "placebo" => Ok(TreatmentArm::Placebo),
            "NE" | "ne" => Ok(TreatmentArm::Ne),
            "LE" | "le" => Ok(TreatmentArm::Le),
            "MiE" | "mie" => Ok(TreatmentArm::Mie),
            "MoE" | "moe" => Ok(TreatmentArm::Moe),
            "HE" | "he" => Ok(TreatmentArm::He),
            "Null" | "null" => Ok(TreatmentArm::Null),
            other => Err(format!("unknown treatment arm {other:?}")),
        }
    }
}

/// Conditioning inputs for one generation: the treatment embedding row
/// and, when present, the folded conditioning images.
#[derive(Debug, Clone)]
pub struct ConditioningBundle {
    pub arm: TreatmentArm,
    pub images: Option<Tensor>,
}

impl ConditioningBundle {
    pub fn new(arm: TreatmentArm, images: Option<Tensor>) -> Self {
        ConditioningBundle { arm, images }
    }

    /// The unconditional branch: Null arm, no images.
    pub fn unconditional() -> Self {
        ConditioningBundle { arm: TreatmentArm::Null, images: None }
    }
}

/// Architecture hyperparameters shared by the UNet and its adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    /// Folded data channels the model denoises.
    pub in_channels: usize,
    /// Folded channels of the conditioning image stack.
    pub cond_channels: usize,
    /// Square spatial extent of the input.
    pub input_size: usize,
    pub base_width: usize,
    pub channel_mults: Vec<usize>,
    /// Residual blocks per stage.
    pub res_blocks: usize,
    /// Spatial sizes at which self-attention runs.
    pub attn_resolutions: Vec<usize>,
    pub embed_dim: usize,
    pub num_arms: usize,
    pub num_heads: usize,
    pub norm_groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 10,
            cond_channels: 10,
            input_size: 32,
            base_width: 32,
            channel_mults: vec![1, 2, 4],
            res_blocks: 1,
            attn_resolutions: vec![8],
            embed_dim: 128,
            num_arms: 6,
            num_heads: 4,
            norm_groups: 8,
        }
    }
}

impl UNetConfig {
    pub fn stages(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn stage_width(&self, stage: usize) -> usize {
        self.base_width * self.channel_mults[stage]
    }

    /// Spatial size at a stage: halved once per downsampling.
    pub fn stage_resolution(&self, stage: usize) -> usize {
        self.input_size >> stage
    }

    pub fn has_attention(&self, stage: usize) -> bool {
        self.attn_resolutions.contains(&self.stage_resolution(stage))
    }

    pub fn validate(&self) -> Result<(), NumericsError> {
        let fail = |reason: String| NumericsError::Config { op: "unet_config", reason };
        if self.stages() < 2 {
            return Err(fail(format!("at least 2 stages required, got {}", self.stages())));
        }
        if self.input_size % (1 << (self.stages() - 1)) != 0 {
            return Err(fail(format!(
                "input size {} not divisible across {} stages",
                self.input_size,
                self.stages()
            )));
        }
        let produced: Vec<usize> = (0..self.stages()).map(|s| self.stage_resolution(s)).collect();
        for r in &self.attn_resolutions {
            if !produced.contains(r) {
                return Err(fail(format!(
                    "attention resolution {r} not among produced resolutions {produced:?}"
                )));
            }
        }
        for s in 0..self.stages() {
            if self.has_attention(s) && self.stage_width(s) % self.num_heads != 0 {
                return Err(fail(format!(
                    "stage {s} width {} not divisible by {} heads",
                    self.stage_width(s),
                    self.num_heads
                )));
            }
            if self.stage_width(s) % self.groups_for(self.stage_width(s)) != 0 {
                return Err(fail(format!("stage {s} width {} breaks group norm", self.stage_width(s))));
            }
        }
        Ok(())
    }

    /// Group-norm group count: the configured number, or the channel
    /// count when narrower.
    pub fn groups_for(&self, channels: usize) -> usize {
        self.norm_groups.min(channels)
    }
}

/// Sinusoidal time embedding rows for a batch of diffusion times.
pub fn time_embedding(ts: &[Real], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let scaled = t * 1000.0;
        for i in 0..half {
            let freq = (10_000.0 as Real).powf(-(i as Real) / half as Real);
            data.push((scaled * freq).sin());
        }
        for i in 0..half {
            let freq = (10_000.0 as Real).powf(-(i as Real) / half as Real);
            data.push((scaled * freq).cos());
        }
    }
    Tensor::from_vec(&[ts.len(), dim], data).expect("time embedding shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arm_indices_are_stable_and_null_is_last() {
        assert_eq!(TreatmentArm::Placebo.index(), 0);
        assert_eq!(TreatmentArm::He.index(), 5);
        assert_eq!(TreatmentArm::Null.index(), 6);
        for arm in TreatmentArm::ARMS {
            let round: TreatmentArm = arm.code().parse().unwrap();
            assert_eq!(round, arm);
        }
    }

    #[test]
    fn config_validation_catches_bad_setups() {
        let mut cfg = UNetConfig::default();
        assert!(cfg.validate().is_ok());

        cfg.channel_mults = vec![1];
        assert!(cfg.validate().is_err());

        let mut cfg = UNetConfig::default();
        cfg.attn_resolutions = vec![7];
        assert!(cfg.validate().is_err());

        let mut cfg = UNetConfig::default();
        cfg.num_heads = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn time_embedding_separates_endpoints() {
        // the t=0 and t=1 rows must differ in at least half the
        // dimensions for conditioning to be informative
        let dim = 64;
        let e = time_embedding(&[0.0, 1.0], dim);
        let row0 = &e.data()[..dim];
        let row1 = &e.data()[dim..];
        let differing = row0
            .iter()
            .zip(row1)
            .filter(|(a, b)| (**a - **b).abs() > 1e-6)
            .count();
        assert!(differing >= dim / 2, "only {differing} of {dim} dims differ");
    }

    #[test]
    fn time_embedding_is_pure() {
        let a = time_embedding(&[0.37], 32);
        let b = time_embedding(&[0.37], 32);
        assert_eq!(a.data(), b.data());
    }
}
