//! Pseudo-2D slab restructuring: 3D volumes [b,c,s,h,w] are folded into
//! [b, c·s, h, w] so a 2D UNet can process them, and unfolded back.
//! Folded channel order is channel-major, slice-minor:
//! `folded = c_idx * slices + s_idx`. Because tensors are row-major this
//! is a pure relabeling of the same buffer.

use crate::numerics::{NumericsError, Real, Tensor};

/// Channel/slice layout of a folded slab.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlabLayout {
    pub channels: usize,
    pub slices: usize,
    pub height: usize,
    pub width: usize,
}

impl SlabLayout {
    pub fn new(channels: usize, slices: usize, height: usize, width: usize) -> Self {
        SlabLayout { channels, slices, height, width }
    }

    pub fn folded_channels(&self) -> usize {
        self.channels * self.slices
    }
}

/// [b,c,s,h,w] -> [b, c·s, h, w].
pub fn fold(volume: Tensor) -> Result<Tensor, NumericsError> {
    let shape = volume.shape().to_vec();
    if shape.len() != 5 {
        return Err(NumericsError::Rank { op: "fold", expected: 5, got: shape });
    }
    let (b, c, s, h, w) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    volume.reshaped(&[b, c * s, h, w])
}

/// [b, c·s, h, w] -> [b,c,s,h,w] under the given layout.
pub fn unfold(slab: Tensor, layout: SlabLayout) -> Result<Tensor, NumericsError> {
    let shape = slab.shape().to_vec();
    if shape.len() != 4 {
        return Err(NumericsError::Rank { op: "unfold", expected: 4, got: shape });
    }
    let (b, cs, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if cs != layout.folded_channels() {
        return Err(NumericsError::Config {
            op: "unfold",
            reason: format!(
                "{cs} folded channels do not split into {} channels x {} slices",
                layout.channels, layout.slices
            ),
        });
    }
    if h != layout.height || w != layout.width {
        return Err(NumericsError::Dimension {
            op: "unfold",
            axis: 2,
            expected: layout.height,
            got: h,
        });
    }
    slab.reshaped(&[b, layout.channels, layout.slices, h, w])
}

/// Centered crop of a [c,s,h,w] volume to `target` (slices, height,
/// width); odd remainders floor toward the low side.
pub fn crop_center(volume: &Tensor, target: (usize, usize, usize)) -> Result<Tensor, NumericsError> {
    let shape = volume.shape().to_vec();
    if shape.len() != 4 {
        return Err(NumericsError::Rank { op: "crop_center", expected: 4, got: shape });
    }
    let (c, s, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (ts, th, tw) = target;
    for (axis, (src, tgt)) in [(s, ts), (h, th), (w, tw)].into_iter().enumerate() {
        if tgt > src {
            return Err(NumericsError::Dimension {
                op: "crop_center",
                axis: axis + 1,
                expected: src,
                got: tgt,
            });
        }
    }
    let (s0, h0, w0) = ((s - ts) / 2, (h - th) / 2, (w - tw) / 2);
    let src = volume.data();
    let mut out = Vec::with_capacity(c * ts * th * tw);
    for ci in 0..c {
        for si in 0..ts {
            for hi in 0..th {
                let base = ((ci * s + s0 + si) * h + h0 + hi) * w + w0;
                out.extend_from_slice(&src[base..base + tw]);
            }
        }
    }
    Tensor::from_vec(&[c, ts, th, tw], out)
}
