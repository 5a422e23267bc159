use rand::Rng;

use crate::numerics::{Graph, NodeId, NumericsError, ParamId, ParamSet, Real, Tensor};
use crate::rng;

use super::{time_embedding, TreatmentArm, UNetConfig};

pub(crate) struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub padding: usize,
}

pub(crate) struct Lin {
    pub w: ParamId,
    pub b: ParamId,
}

pub(crate) struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

pub(crate) struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    emb_proj: Lin,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

pub(crate) struct AttnBlock {
    norm: Norm,
    w_qkv: ParamId,
    w_out: ParamId,
    heads: usize,
    resolution: usize,
}

pub(crate) struct Stage {
    blocks: Vec<(ResBlock, Option<AttnBlock>)>,
    pub down: Option<Conv>,
}

/// Stem plus downsampling stages; shared between the base UNet and the
/// trainable adapter copy.
pub(crate) struct EncoderArch {
    pub stem: Conv,
    pub stages: Vec<Stage>,
}

pub(crate) struct MidArch {
    res1: ResBlock,
    attn: Option<AttnBlock>,
    res2: ResBlock,
}

pub(crate) struct DecStage {
    blocks: Vec<(ResBlock, Option<AttnBlock>)>,
    up: Option<Conv>,
}

pub(crate) struct DecoderArch {
    /// Deepest stage first.
    stages: Vec<DecStage>,
    head_norm: Norm,
    head: Conv,
}

/// Time-embedding MLP and the treatment embedding table.
pub(crate) struct EmbedArch {
    lin1: Lin,
    lin2: Lin,
    arm_table: ParamId,
}

fn he_conv<R: Rng>(params: &mut ParamSet, name: &str, c_out: usize, c_in: usize, k: usize, rng: &mut R) -> ParamId {
    let std = (2.0 / (c_in * k * k) as Real).sqrt();
    let t = Tensor::randn(&[c_out, c_in, k, k], rng).map(|v| v * std);
    params.add(name, t)
}

fn zero_conv(params: &mut ParamSet, name: &str, c_out: usize, c_in: usize, k: usize) -> ParamId {
    params.add(name, Tensor::zeros(&[c_out, c_in, k, k]))
}

fn conv3<R: Rng>(params: &mut ParamSet, prefix: &str, c_in: usize, c_out: usize, stride: usize, rng: &mut R) -> Conv {
    Conv {
        w: he_conv(params, &format!("{prefix}.w"), c_out, c_in, 3, rng),
        b: params.add(format!("{prefix}.b"), Tensor::zeros(&[c_out])),
        stride,
        padding: 1,
    }
}

fn linear<R: Rng>(params: &mut ParamSet, prefix: &str, d_in: usize, d_out: usize, rng: &mut R) -> Lin {
    let std = (1.0 / d_in as Real).sqrt();
    Lin {
        w: params.add(format!("{prefix}.w"), Tensor::randn(&[d_out, d_in], rng).map(|v| v * std)),
        b: params.add(format!("{prefix}.b"), Tensor::zeros(&[d_out])),
    }
}

fn norm(params: &mut ParamSet, prefix: &str, channels: usize, groups: usize) -> Norm {
    Norm {
        gamma: params.add(format!("{prefix}.g"), Tensor::filled(&[channels], 1.0)),
        beta: params.add(format!("{prefix}.b"), Tensor::zeros(&[channels])),
        groups,
    }
}

fn res_block<R: Rng>(
    params: &mut ParamSet,
    prefix: &str,
    cfg: &UNetConfig,
    c_in: usize,
    c_out: usize,
    rng: &mut R,
) -> ResBlock {
    ResBlock {
        norm1: norm(params, &format!("{prefix}.n1"), c_in, cfg.groups_for(c_in)),
        conv1: conv3(params, &format!("{prefix}.c1"), c_in, c_out, 1, rng),
        emb_proj: linear(params, &format!("{prefix}.emb"), cfg.embed_dim, c_out, rng),
        norm2: norm(params, &format!("{prefix}.n2"), c_out, cfg.groups_for(c_out)),
        conv2: conv3(params, &format!("{prefix}.c2"), c_out, c_out, 1, rng),
        skip: if c_in == c_out {
            None
        } else {
            Some(Conv {
                w: he_conv(params, &format!("{prefix}.skip.w"), c_out, c_in, 1, rng),
                b: params.add(format!("{prefix}.skip.b"), Tensor::zeros(&[c_out])),
                stride: 1,
                padding: 0,
            })
        },
    }
}

fn attn_block<R: Rng>(
    params: &mut ParamSet,
    prefix: &str,
    cfg: &UNetConfig,
    channels: usize,
    resolution: usize,
    rng: &mut R,
) -> AttnBlock {
    let std = (1.0 / channels as Real).sqrt();
    AttnBlock {
        norm: norm(params, &format!("{prefix}.n"), channels, cfg.groups_for(channels)),
        w_qkv: params.add(
            format!("{prefix}.qkv"),
            Tensor::randn(&[3 * channels, channels], rng).map(|v| v * std),
        ),
        w_out: params.add(
            format!("{prefix}.out"),
            Tensor::randn(&[channels, channels], rng).map(|v| v * std),
        ),
        heads: cfg.num_heads,
        resolution,
    }
}

impl EmbedArch {
    pub(crate) fn build<R: Rng>(params: &mut ParamSet, cfg: &UNetConfig, rng: &mut R) -> Self {
        EmbedArch {
            lin1: linear(params, "time.l1", cfg.embed_dim, cfg.embed_dim, rng),
            lin2: linear(params, "time.l2", cfg.embed_dim, cfg.embed_dim, rng),
            arm_table: params.add(
                "arm.table",
                Tensor::randn(&[cfg.num_arms + 1, cfg.embed_dim], rng).map(|v| v * 0.02),
            ),
        }
    }

    /// Sinusoidal time embedding through the two-layer projection,
    /// summed with the arm rows.
    pub(crate) fn forward(
        &self,
        g: &mut Graph,
        bound: &[NodeId],
        ts: &[Real],
        arms: &[TreatmentArm],
        dim: usize,
    ) -> Result<NodeId, NumericsError> {
        let sin = g.leaf(time_embedding(ts, dim));
        let h = g.linear(sin, bound[self.lin1.w], bound[self.lin1.b])?;
        let h = g.silu(h);
        let h = g.linear(h, bound[self.lin2.w], bound[self.lin2.b])?;
        let rows: Vec<usize> = arms.iter().map(|a| a.index()).collect();
        let arm = g.embed_lookup(bound[self.arm_table], &rows)?;
        g.add(h, arm)
    }
}

impl ResBlock {
    fn forward(
        &self,
        g: &mut Graph,
        bound: &[NodeId],
        x: NodeId,
        emb: NodeId,
    ) -> Result<NodeId, NumericsError> {
        let h = g.group_norm(x, bound[self.norm1.gamma], bound[self.norm1.beta], self.norm1.groups, 1e-5)?;
        let h = g.silu(h);
        let h = g.conv2d(h, bound[self.conv1.w], bound[self.conv1.b], 1, 1)?;
        let e = g.silu(emb);
        let e = g.linear(e, bound[self.emb_proj.w], bound[self.emb_proj.b])?;
        let h = g.channel_bias(h, e)?;
        let h = g.group_norm(h, bound[self.norm2.gamma], bound[self.norm2.beta], self.norm2.groups, 1e-5)?;
        let h = g.silu(h);
        let h = g.conv2d(h, bound[self.conv2.w], bound[self.conv2.b], 1, 1)?;
        let shortcut = match &self.skip {
            Some(conv) => g.conv2d(x, bound[conv.w], bound[conv.b], 1, 0)?,
            None => x,
        };
        g.add(h, shortcut)
    }
}

impl AttnBlock {
    fn forward(&self, g: &mut Graph, bound: &[NodeId], x: NodeId) -> Result<NodeId, NumericsError> {
        let n = g.group_norm(x, bound[self.norm.gamma], bound[self.norm.beta], self.norm.groups, 1e-5)?;
        let tok = g.nchw_to_tokens(n)?;
        let at = g.self_attention(tok, bound[self.w_qkv], bound[self.w_out], self.heads)?;
        let back = g.tokens_to_nchw(at, self.resolution, self.resolution)?;
        g.add(x, back)
    }
}

impl EncoderArch {
    pub fn build<R: Rng>(params: &mut ParamSet, cfg: &UNetConfig, rng: &mut R) -> Self {
        let stem = conv3(params, "stem", cfg.in_channels, cfg.base_width, 1, rng);
        let mut stages = Vec::new();
        let mut width = cfg.base_width;
        for s in 0..cfg.stages() {
            let out = cfg.stage_width(s);
            let res = cfg.stage_resolution(s);
            let mut blocks = Vec::new();
            for b in 0..cfg.res_blocks {
                let c_in = if b == 0 { width } else { out };
                let rb = res_block(params, &format!("enc{s}.r{b}"), cfg, c_in, out, rng);
                let attn = cfg
                    .has_attention(s)
                    .then(|| attn_block(params, &format!("enc{s}.a{b}"), cfg, out, res, rng));
                blocks.push((rb, attn));
            }
            let down = (s + 1 < cfg.stages()).then(|| conv3(params, &format!("enc{s}.down"), out, out, 2, rng));
            stages.push(Stage { blocks, down });
            width = out;
        }
        EncoderArch { stem, stages }
    }

    /// Runs stem and stages; returns the per-stage feature maps that feed
    /// the decoder skips. `stem_extra` is added to the stem output when
    /// present (the adapter's hint pathway).
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &[NodeId],
        z: NodeId,
        emb: NodeId,
        stem_extra: Option<NodeId>,
    ) -> Result<Vec<NodeId>, NumericsError> {
        let mut h = g.conv2d(z, bound[self.stem.w], bound[self.stem.b], 1, 1)?;
        if let Some(extra) = stem_extra {
            h = g.add(h, extra)?;
        }
        let mut skips = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            for (rb, attn) in &stage.blocks {
                h = rb.forward(g, bound, h, emb)?;
                if let Some(a) = attn {
                    h = a.forward(g, bound, h)?;
                }
            }
            skips.push(h);
            if let Some(down) = &stage.down {
                h = g.conv2d(h, bound[down.w], bound[down.b], down.stride, down.padding)?;
            }
        }
        Ok(skips)
    }
}

impl MidArch {
    fn build<R: Rng>(params: &mut ParamSet, cfg: &UNetConfig, rng: &mut R) -> Self {
        let s = cfg.stages() - 1;
        let width = cfg.stage_width(s);
        let res = cfg.stage_resolution(s);
        MidArch {
            res1: res_block(params, "mid.r1", cfg, width, width, rng),
            attn: cfg.has_attention(s).then(|| attn_block(params, "mid.a", cfg, width, res, rng)),
            res2: res_block(params, "mid.r2", cfg, width, width, rng),
        }
    }

    fn forward(&self, g: &mut Graph, bound: &[NodeId], x: NodeId, emb: NodeId) -> Result<NodeId, NumericsError> {
        let mut h = self.res1.forward(g, bound, x, emb)?;
        if let Some(a) = &self.attn {
            h = a.forward(g, bound, h)?;
        }
        self.res2.forward(g, bound, h, emb)
    }
}

impl DecoderArch {
    fn build<R: Rng>(params: &mut ParamSet, cfg: &UNetConfig, rng: &mut R) -> Self {
        let mut stages = Vec::new();
        for s in (0..cfg.stages()).rev() {
            let width = cfg.stage_width(s);
            let res = cfg.stage_resolution(s);
            let mut blocks = Vec::new();
            for b in 0..cfg.res_blocks {
                // first block consumes the concatenated skip
                let c_in = if b == 0 { 2 * width } else { width };
                let rb = res_block(params, &format!("dec{s}.r{b}"), cfg, c_in, width, rng);
                let attn = cfg
                    .has_attention(s)
                    .then(|| attn_block(params, &format!("dec{s}.a{b}"), cfg, width, res, rng));
                blocks.push((rb, attn));
            }
            let up = (s > 0).then(|| conv3(params, &format!("dec{s}.up"), width, cfg.stage_width(s - 1), 1, rng));
            stages.push(DecStage { blocks, up });
        }
        let head_norm = norm(params, "head.n", cfg.base_width, cfg.groups_for(cfg.base_width));
        // zero-initialized final projection: a fresh model predicts zero
        let head = Conv {
            w: zero_conv(params, "head.w", cfg.in_channels, cfg.base_width, 3),
            b: params.add("head.b", Tensor::zeros(&[cfg.in_channels])),
            stride: 1,
            padding: 1,
        };
        DecoderArch { stages, head_norm, head }
    }

    /// Consumes skips (deepest last) produced by the encoder; the mid
    /// output enters at the deepest resolution.
    fn forward(
        &self,
        g: &mut Graph,
        bound: &[NodeId],
        mid: NodeId,
        skips: &[NodeId],
        emb: NodeId,
    ) -> Result<NodeId, NumericsError> {
        let mut h = mid;
        for (i, stage) in self.stages.iter().enumerate() {
            let skip = skips[skips.len() - 1 - i];
            h = g.concat_channels(h, skip)?;
            for (rb, attn) in &stage.blocks {
                h = rb.forward(g, bound, h, emb)?;
                if let Some(a) = attn {
                    h = a.forward(g, bound, h)?;
                }
            }
            if let Some(up) = &stage.up {
                h = g.upsample2x(h)?;
                h = g.conv2d(h, bound[up.w], bound[up.b], 1, 1)?;
            }
        }
        let h = g.group_norm(h, bound[self.head_norm.gamma], bound[self.head_norm.beta], self.head_norm.groups, 1e-5)?;
        let h = g.silu(h);
        g.conv2d(h, bound[self.head.w], bound[self.head.b], 1, 1)
    }
}

/// The base diffusion model: encoder, middle blocks, skip-connected
/// decoder, and the condition embedding pathway. Predicts the clean
/// data x̂ from (z_t, t, arm).
pub struct DiffusionUNet {
    pub cfg: UNetConfig,
    pub params: ParamSet,
    pub(crate) embed: EmbedArch,
    pub(crate) encoder: EncoderArch,
    mid: MidArch,
    decoder: DecoderArch,
}

impl DiffusionUNet {
    pub fn new(cfg: UNetConfig, seed: u64) -> Result<Self, NumericsError> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, "model-init", 0);
        let mut params = ParamSet::new();
        let embed = EmbedArch::build(&mut params, &cfg, &mut rng);
        let encoder = EncoderArch::build(&mut params, &cfg, &mut rng);
        let mid = MidArch::build(&mut params, &cfg, &mut rng);
        let decoder = DecoderArch::build(&mut params, &cfg, &mut rng);
        Ok(DiffusionUNet { cfg, params, embed, encoder, mid, decoder })
    }

    pub fn bind(&self, g: &mut Graph) -> Vec<NodeId> {
        self.params.bind(g)
    }

    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<NodeId> {
        self.params.bind_frozen(g)
    }

    /// Condition embedding for a batch of (t, arm) pairs.
    pub fn embed_condition(
        &self,
        g: &mut Graph,
        bound: &[NodeId],
        ts: &[Real],
        arms: &[TreatmentArm],
    ) -> Result<NodeId, NumericsError> {
        self.embed.forward(g, bound, ts, arms, self.cfg.embed_dim)
    }

    /// x̂ = f(z_t, t, arm). Output shape equals the input shape.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &[NodeId],
        z: NodeId,
        ts: &[Real],
        arms: &[TreatmentArm],
    ) -> Result<NodeId, NumericsError> {
        self.check_input(g, z, ts, arms)?;
        let emb = self.embed_condition(g, bound, ts, arms)?;
        let skips = self.encoder.forward(g, bound, z, emb, None)?;
        self.decode_from_skips(g, bound, &skips, emb)
    }

    /// Middle blocks plus decoder over a (possibly adapter-augmented)
    /// skip stack.
    pub(crate) fn decode_from_skips(
        &self,
        g: &mut Graph,
        bound: &[NodeId],
        skips: &[NodeId],
        emb: NodeId,
    ) -> Result<NodeId, NumericsError> {
        let deepest = *skips.last().expect("at least one stage");
        let mid = self.mid.forward(g, bound, deepest, emb)?;
        self.decoder.forward(g, bound, mid, skips, emb)
    }

    pub(crate) fn check_input(
        &self,
        g: &Graph,
        z: NodeId,
        ts: &[Real],
        arms: &[TreatmentArm],
    ) -> Result<(), NumericsError> {
        let shape = g.value(z).shape();
        let expect = [ts.len(), self.cfg.in_channels, self.cfg.input_size, self.cfg.input_size];
        if shape != expect {
            return Err(NumericsError::Config {
                op: "unet_forward",
                reason: format!("input shape {shape:?} does not match config {expect:?}"),
            });
        }
        if ts.len() != arms.len() {
            return Err(NumericsError::Dimension {
                op: "unet_forward",
                axis: 0,
                expected: ts.len(),
                got: arms.len(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config() -> UNetConfig {
        UNetConfig {
            in_channels: 4,
            cond_channels: 4,
            input_size: 8,
            base_width: 8,
            channel_mults: vec![1, 2],
            res_blocks: 1,
            attn_resolutions: vec![4],
            embed_dim: 16,
            num_arms: 6,
            num_heads: 2,
            norm_groups: 4,
        }
    }

    #[test]
    fn untrained_output_is_zero_and_shape_preserved() {
        let model = DiffusionUNet::new(tiny_config(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let bound = model.bind_frozen(&mut g);
        let z = g.leaf(Tensor::randn(&[2, 4, 8, 8], &mut rng));
        let out = model
            .forward(&mut g, &bound, z, &[0.3, 0.8], &[TreatmentArm::Placebo, TreatmentArm::He])
            .unwrap();
        assert_eq!(g.value(out).shape(), &[2, 4, 8, 8]);
        assert!(g.value(out).data().iter().all(|&v| v == 0.0), "zero head init");
    }

    #[test]
    fn embedding_is_pure_and_arms_differ() {
        let model = DiffusionUNet::new(tiny_config(), 7).unwrap();
        let mut g = Graph::new();
        let bound = model.bind_frozen(&mut g);
        let a = model.embed_condition(&mut g, &bound, &[0.5], &[TreatmentArm::Null]).unwrap();
        let b = model.embed_condition(&mut g, &bound, &[0.5], &[TreatmentArm::Null]).unwrap();
        assert_eq!(g.value(a).data(), g.value(b).data());
        let c = model.embed_condition(&mut g, &bound, &[0.5], &[TreatmentArm::Placebo]).unwrap();
        assert_ne!(g.value(a).data(), g.value(c).data(), "Null row differs from Placebo");
    }

    #[test]
    fn forward_rejects_wrong_spatial_shape() {
        let model = DiffusionUNet::new(tiny_config(), 7).unwrap();
        let mut g = Graph::new();
        let bound = model.bind_frozen(&mut g);
        let z = g.leaf(Tensor::zeros(&[1, 4, 16, 16]));
        assert!(model.forward(&mut g, &bound, z, &[0.1], &[TreatmentArm::Ne]).is_err());
    }

    #[test]
    fn gradients_flow_to_every_parameter() {
        // one training-style backward touches all weights except the
        // unused Null-free arm rows
        let model = DiffusionUNet::new(tiny_config(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let z = g.leaf(Tensor::randn(&[1, 4, 8, 8], &mut rng));
        let target = g.leaf(Tensor::randn(&[1, 4, 8, 8], &mut rng));
        let out = model.forward(&mut g, &bound, z, &[0.4], &[TreatmentArm::Le]).unwrap();
        let diff = g.sub(out, target).unwrap();
        let sq = g.mul(diff, diff).unwrap();
        let loss = g.mean(sq);
        g.backward(loss).unwrap();
        let missing: Vec<&str> = bound
            .iter()
            .enumerate()
            .filter(|(_, &n)| g.grad(n).is_none())
            .map(|(i, _)| model.params.name(i))
            .collect();
        assert!(missing.is_empty(), "params without gradient: {missing:?}");
    }
}
