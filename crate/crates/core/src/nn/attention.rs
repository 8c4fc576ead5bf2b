//! Position (spatial) self-attention on a half-resolution copy of the input.
//!
//! ```text
//! d    = conv3x3/2(x)                       [B, C, H/2, W/2]
//! q, k = conv1x1(d)                         [B, C/8, N],  N = H/2 * W/2
//!                                           (k has no bias: it would cancel in the softmax)
//! v    = conv1x1(d)                         [B, C, N]
//! A    = softmax_j(q_i . k_j)               [B, N, N]
//! pre  = scale * (v A^T) + d
//! out  = convT2x2/2(pre) + x
//! ```
//!
//! `scale` is a learned scalar initialised to zero, so a fresh block is its
//! convolutional skeleton `up(down(x)) + x`.

use rand::Rng;

use super::{conv_weight, Forward, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{ConvGeom, NdTensor, Scalar, Var};

#[derive(Debug, Clone)]
pub struct SpatialAttention {
    pub channels: usize,
    pub key_channels: usize,
    /// Largest number of attended positions (`H/2 * W/2`) accepted.
    pub max_positions: usize,
    down: (ParamId, ParamId),
    query: (ParamId, ParamId),
    key: ParamId,
    value: (ParamId, ParamId),
    pub scale: ParamId,
    up: (ParamId, ParamId),
}

pub struct AttentionOutput {
    pub output: Var,
    /// Row-stochastic attention weights `[B, N, N]` (query rows, key columns).
    pub attention: Var,
    /// Extents of the attended grid.
    pub grid: (usize, usize),
}

impl SpatialAttention {
    pub const DEFAULT_MAX_POSITIONS: usize = 4096;

    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        max_positions: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("attention needs at least one channel".into()));
        }
        let key_channels = (channels / 8).max(1);
        let mut pair = |suffix: &str, w: NdTensor<T>, cout: usize| -> Result<(ParamId, ParamId)> {
            Ok((
                store.add(format!("{name}.{suffix}.w"), w)?,
                store.add(format!("{name}.{suffix}.b"), NdTensor::zeros(vec![cout]))?,
            ))
        };
        let down = pair("down", conv_weight(channels, channels, 3, 3, rng), channels)?;
        let query = pair("query", conv_weight(key_channels, channels, 1, 1, rng), key_channels)?;
        let key_w = conv_weight(key_channels, channels, 1, 1, rng);
        let value = pair("value", conv_weight(channels, channels, 1, 1, rng), channels)?;
        // transposed conv weight is [cin, cout, kh, kw]; fan-in per output is cin
        let up_w = super::he_uniform(&[channels, channels, 2, 2], channels, rng);
        let up = pair("up", up_w, channels)?;
        let key = store.add(format!("{name}.key.w"), key_w)?;
        let scale = store.add(format!("{name}.scale"), NdTensor::zeros(vec![1]))?;
        Ok(SpatialAttention {
            channels,
            key_channels,
            max_positions,
            down,
            query,
            key,
            value,
            scale,
            up,
        })
    }

    pub fn forward<T: Scalar>(&self, f: &Forward<'_, T>, x: Var) -> Result<AttentionOutput> {
        let t = f.tape;
        let shape = t.shape(x);
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::shape("spatial_attention", format!("expected [B, {}, H, W], got {shape:?}", self.channels)));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!("spatial attention needs even extents, got {h}x{w}")));
        }
        let (gh, gw) = (h / 2, w / 2);
        let n = gh * gw;
        if n > self.max_positions {
            return Err(Error::Config(format!(
                "spatial attention over {n} positions exceeds the limit of {}",
                self.max_positions
            )));
        }
        let conv = |input: Var, (wid, bid): (ParamId, ParamId), geom: ConvGeom| -> Result<Var> {
            t.conv2d(input, f.p(wid)?, Some(f.p(bid)?), geom)
        };
        let d = conv(x, self.down, ConvGeom::new(2, 1, 1))?;
        let pointwise = ConvGeom::new(1, 0, 1);
        let q = t.reshape(conv(d, self.query, pointwise)?, vec![b, self.key_channels, n])?;
        let k = t.reshape(t.conv2d(d, f.p(self.key)?, None, pointwise)?, vec![b, self.key_channels, n])?;
        let v = t.reshape(conv(d, self.value, pointwise)?, vec![b, c, n])?;
        let energy = t.bmm(q, k, true, false)?;
        let attention = t.softmax(energy, 2)?;
        let attended = t.bmm(v, attention, false, true)?;
        let attended = t.reshape(attended, vec![b, c, gh, gw])?;
        let scaled = t.mul(attended, f.p(self.scale)?)?;
        let pre = t.add(scaled, d)?;
        let up = t.conv_transpose2d(pre, f.p(self.up.0)?, Some(f.p(self.up.1)?), ConvGeom::new(2, 0, 1))?;
        let output = t.add(up, x)?;
        Ok(AttentionOutput {
            output,
            attention,
            grid: (gh, gw),
        })
    }

    /// The convolutional skeleton `up(down(x)) + x`, i.e. the block with the
    /// attention branch removed.
    pub fn skeleton<T: Scalar>(&self, f: &Forward<'_, T>, x: Var) -> Result<Var> {
        let t = f.tape;
        let d = t.conv2d(x, f.p(self.down.0)?, Some(f.p(self.down.1)?), ConvGeom::new(2, 1, 1))?;
        let up = t.conv_transpose2d(d, f.p(self.up.0)?, Some(f.p(self.up.1)?), ConvGeom::new(2, 0, 1))?;
        t.add(up, x)
    }

    pub fn key_weight(&self) -> ParamId {
        self.key
    }
}
