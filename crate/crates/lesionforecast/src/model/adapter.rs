use crate::numerics::{Graph, NodeId, NumericsError, ParamSet, Real, Tensor};
use crate::rng;

use super::unet::{Conv, DiffusionUNet, EmbedArch, EncoderArch};
use super::{TreatmentArm, UNetConfig};

/// Trainable copy of the base encoder plus an image-hint block and one
/// zero-initialized 1x1 projection per resolution level. At
/// initialization every projection is all zeros, so the controlled
/// forward pass reproduces the base model exactly.
pub struct ControlAdapter {
    pub cfg: UNetConfig,
    pub params: ParamSet,
    embed: EmbedArch,
    encoder: EncoderArch,
    hint_in: Conv,
    hint_out: Conv,
    zero_projs: Vec<Conv>,
}

impl ControlAdapter {
    /// Duplicates the base encoder (and its condition-embedding
    /// pathway) as trainable parameters; hint and projection layers
    /// start at zero. The base model itself is left untouched and stays
    /// outside the optimizer.
    pub fn init_from(base: &DiffusionUNet) -> Result<Self, NumericsError> {
        let cfg = base.cfg.clone();
        // Structure replicated with the same seed stream, then weights
        // overwritten below with the base values, so any future init
        // drift cannot desynchronize the copy.
        let mut seed_rng = rng::stream(0, "adapter-structure", 0);
        let mut params = ParamSet::new();
        let embed = EmbedArch::build(&mut params, &cfg, &mut seed_rng);
        let encoder = EncoderArch::build(&mut params, &cfg, &mut seed_rng);
        for i in 0..params.len() {
            let name = params.name(i).to_string();
            let src = base
                .params
                .find(&name)
                .ok_or_else(|| NumericsError::Config {
                    op: "init_adapter_from",
                    reason: format!("base model lacks parameter {name}"),
                })?;
            *params.tensor_mut(i) = base.params.tensor(src).clone().with_grad();
        }
        let hint_in = Conv {
            w: {
                let mut r = rng::stream(0, "adapter-hint", 0);
                let std = (2.0 / (cfg.cond_channels * 9) as Real).sqrt();
                params.add("hint.c1.w", Tensor::randn(&[cfg.base_width, cfg.cond_channels, 3, 3], &mut r).map(|v| v * std))
            },
            b: params.add("hint.c1.b", Tensor::zeros(&[cfg.base_width])),
            stride: 1,
            padding: 1,
        };
        // final hint conv zeroed: the copied encoder starts from the
        // exact base behaviour even when a hint is attached
        let hint_out = Conv {
            w: params.add("hint.c2.w", Tensor::zeros(&[cfg.base_width, cfg.base_width, 3, 3])),
            b: params.add("hint.c2.b", Tensor::zeros(&[cfg.base_width])),
            stride: 1,
            padding: 1,
        };
        let zero_projs = (0..cfg.stages())
            .map(|s| {
                let width = cfg.stage_width(s);
                Conv {
                    w: params.add(format!("zero{s}.w"), Tensor::zeros(&[width, width, 1, 1])),
                    b: params.add(format!("zero{s}.b"), Tensor::zeros(&[width])),
                    stride: 1,
                    padding: 0,
                }
            })
            .collect();
        Ok(ControlAdapter { cfg, params, embed, encoder, hint_in, hint_out, zero_projs })
    }

    pub fn bind(&self, g: &mut Graph) -> Vec<NodeId> {
        self.params.bind(g)
    }

    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<NodeId> {
        self.params.bind_frozen(g)
    }

    /// Verifies that every zero projection still holds exact zeros.
    pub fn projections_are_zero(&self) -> bool {
        self.zero_projs.iter().all(|c| {
            self.params.tensor(c.w).data().iter().all(|&v| v == 0.0)
                && self.params.tensor(c.b).data().iter().all(|&v| v == 0.0)
        })
    }

    /// x̂ = f(z_t, c_e, c_f; t): the frozen base encoder/decoder with
    /// zero-projected adapter features added to each decoder skip. The
    /// adapter encoder sees z_t plus the hint built from `c_f`; an
    /// absent `c_f` contributes nothing.
    #[allow(clippy::too_many_arguments)]
    pub fn controlled_forward(
        &self,
        g: &mut Graph,
        adapter_bound: &[NodeId],
        base: &DiffusionUNet,
        base_bound: &[NodeId],
        z: NodeId,
        ts: &[Real],
        arms: &[TreatmentArm],
        cond_images: Option<NodeId>,
    ) -> Result<NodeId, NumericsError> {
        if base.cfg != self.cfg {
            return Err(NumericsError::Config {
                op: "controlled_forward",
                reason: "adapter and base model configurations differ".into(),
            });
        }
        base.check_input(g, z, ts, arms)?;
        if let Some(c) = cond_images {
            let shape = g.value(c).shape();
            let expect = [ts.len(), self.cfg.cond_channels, self.cfg.input_size, self.cfg.input_size];
            if shape != expect {
                return Err(NumericsError::Config {
                    op: "controlled_forward",
                    reason: format!("conditioning shape {shape:?} does not match {expect:?}"),
                });
            }
        }

        let base_emb = base.embed_condition(g, base_bound, ts, arms)?;
        let base_skips = base.encoder.forward(g, base_bound, z, base_emb, None)?;

        let hint = match cond_images {
            Some(c) => {
                let h = g.conv2d(c, adapter_bound[self.hint_in.w], adapter_bound[self.hint_in.b], 1, 1)?;
                let h = g.silu(h);
                Some(g.conv2d(h, adapter_bound[self.hint_out.w], adapter_bound[self.hint_out.b], 1, 1)?)
            }
            None => None,
        };
        let adapter_emb = self.embed.forward(g, adapter_bound, ts, arms, self.cfg.embed_dim)?;
        let adapter_skips = self.encoder.forward(g, adapter_bound, z, adapter_emb, hint)?;

        let mut merged = Vec::with_capacity(base_skips.len());
        for (level, (&b_skip, &a_skip)) in base_skips.iter().zip(&adapter_skips).enumerate() {
            let proj = &self.zero_projs[level];
            let injected = g.conv2d(a_skip, adapter_bound[proj.w], adapter_bound[proj.b], 1, 0)?;
            merged.push(g.add(b_skip, injected)?);
        }
        base.decode_from_skips(g, base_bound, &merged, base_emb)
    }
}
