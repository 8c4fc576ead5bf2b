//! The max-fusion U-Net: one encoder per modality, element-wise max fusion at
//! every encoder level, a bottleneck over the concatenated deepest features, a
//! decoder fed by skip connections, spatial attention on the last decoder
//! level, and separate softmax heads for anatomy and pathology.

pub mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    conv_weight, Activation, Backbone, BlockConfig, DilatedBottleneck, Forward, Normalization, ParamId, ParamStore,
    ResidualBlock, SpatialAttention,
};
use crate::tensor::{ConvGeom, NdTensor, Scalar, Tape, Var};

/// Index of each modality in per-modality arrays.
pub const MODALITIES: [&str; 3] = ["lge", "t2", "bssfp"];

/// Initial probability of each foreground class at the heads. The foreground
/// biases start at `ln(p / (1 - p))` so that background is the default label.
pub const HEAD_FOREGROUND_PRIOR: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub backbone: Backbone,
    pub image_size: usize,
    pub n_anatomy: usize,
    pub n_pathology: usize,
    pub attention_enabled: bool,
    pub max_fusion_enabled: bool,
    pub normalization: Normalization,
    pub activation: Activation,
    pub attention_max_positions: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            levels: 4,
            base_channels: 16,
            backbone: Backbone::Residual,
            image_size: 288,
            n_anatomy: 3,
            n_pathology: 2,
            attention_enabled: true,
            max_fusion_enabled: true,
            normalization: Normalization::Instance,
            activation: Activation::Relu,
            attention_max_positions: SpatialAttention::DEFAULT_MAX_POSITIONS,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// levels = 2, base = 4 on 32x32 inputs; used for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            levels: 2,
            base_channels: 4,
            image_size: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_channels == 0 {
            return Err(Error::Config("levels and base_channels must be positive".into()));
        }
        if self.image_size == 0 || self.image_size % (1 << self.levels) != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by 2^levels = {}",
                self.image_size,
                1usize << self.levels
            )));
        }
        if self.n_anatomy != 3 || self.n_pathology != 2 {
            return Err(Error::Config(format!(
                "the heads are fixed to 3 anatomy and 2 pathology classes, got {} and {}",
                self.n_anatomy, self.n_pathology
            )));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    fn block(&self, cin: usize, cout: usize, stride: usize) -> BlockConfig {
        BlockConfig {
            stride,
            normalization: self.normalization,
            activation: self.activation,
            ..BlockConfig::new(self.backbone, cin, cout)
        }
    }

    /// Number of tensors concatenated from one encoder level into the decoder.
    pub fn skip_width(&self) -> usize {
        if self.max_fusion_enabled {
            4
        } else {
            3
        }
    }
}

/// Backbone block used in the encoders, bottleneck and decoder.
#[derive(Debug, Clone)]
pub enum Block {
    Residual(ResidualBlock),
    Dilated(DilatedBottleneck),
}

impl Block {
    pub fn forward<T: Scalar>(&self, f: &Forward<'_, T>, x: Var) -> Result<Var> {
        match self {
            Block::Residual(b) => b.forward(f, x),
            Block::Dilated(b) => b.forward(f, x),
        }
    }
}

/// Features of one encoder level.
#[derive(Debug, Clone, Copy)]
pub struct LevelFeatures {
    /// Per-modality features in [`MODALITIES`] order.
    pub modality: [Var; 3],
    /// Element-wise max of the three, when fusion is enabled.
    pub fused: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct FeatureBundle {
    pub levels: Vec<LevelFeatures>,
    /// Channel concatenation of the three deepest modality features.
    pub bottleneck_input: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct SegOutput {
    /// `[B, n_anatomy + 1, H, W]`: background, myocardium, LV, RV.
    pub anatomy: Var,
    /// `[B, n_pathology + 1, H, W]`: background, infarct, edema.
    pub pathology: Var,
    /// `[B, N, N]` attention of the last decoder level.
    pub attention: Option<Var>,
    pub attention_grid: Option<(usize, usize)>,
}

/// Element-wise maximum of three equally shaped tensors, evaluated as
/// `max(max(a, b), c)` so gradient ties resolve toward the earlier argument.
pub fn max_fuse<T: Scalar>(tape: &Tape<T>, a: Var, b: Var, c: Var) -> Result<Var> {
    let (sa, sb, sc) = (tape.shape(a), tape.shape(b), tape.shape(c));
    if sa != sb || sa != sc {
        return Err(Error::shape("max_fuse", format!("{sa:?}, {sb:?}, {sc:?}")));
    }
    let ab = tape.max(a, b)?;
    tape.max(ab, c)
}

#[derive(Debug, Clone)]
struct DecoderStage {
    up: Option<(ParamId, ParamId)>,
    block: Block,
}

#[derive(Debug, Clone)]
pub struct MfuNet<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    encoders: [Vec<Block>; 3],
    bottleneck: Vec<Block>,
    decoder: Vec<DecoderStage>,
    attention: Option<SpatialAttention>,
    anatomy_head: (ParamId, ParamId),
    pathology_head: (ParamId, ParamId),
}

/// Host-side result of an inference pass.
#[derive(Debug, Clone)]
pub struct Prediction<T> {
    pub anatomy: NdTensor<T>,
    pub pathology: NdTensor<T>,
    /// Mean attention each position receives, `[B, H/2, W/2]`.
    pub attention_received: Option<NdTensor<T>>,
}

impl<T: Scalar> MfuNet<T> {
    /// Builds the network with weights drawn from `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let levels = config.levels;

        let residual = |store: &mut ParamStore<T>, name: &str, cfg: BlockConfig, rng: &mut ChaCha8Rng| {
            ResidualBlock::new(store, name, cfg, rng).map(Block::Residual)
        };

        let mut encoders: [Vec<Block>; 3] = Default::default();
        for (m, enc) in MODALITIES.iter().zip(encoders.iter_mut()) {
            for k in 0..levels {
                let cin = if k == 0 { 1 } else { config.channels(k - 1) };
                let stride = if k == 0 { 1 } else { 2 };
                let cfg = config.block(cin, config.channels(k), stride);
                enc.push(residual(&mut store, &format!("enc.{m}.{k}"), cfg, rng)?);
            }
        }

        let deep = config.channels(levels - 1);
        let mut bottleneck = Vec::with_capacity(2);
        for (i, cin) in [3 * deep, deep].into_iter().enumerate() {
            let cfg = config.block(cin, deep, 1);
            let name = format!("bottleneck.{i}");
            bottleneck.push(match config.backbone {
                Backbone::Dilation => Block::Dilated(DilatedBottleneck::new(&mut store, &name, cfg, rng)?),
                _ => residual(&mut store, &name, cfg, rng)?,
            });
        }

        let mut decoder = Vec::with_capacity(levels);
        for k in (0..levels).rev() {
            let ck = config.channels(k);
            let up = if k + 1 < levels {
                let cprev = config.channels(k + 1);
                let w = crate::nn::he_uniform(&[cprev, ck, 2, 2], cprev, rng);
                Some((
                    store.add(format!("dec.{k}.up.w"), w)?,
                    store.add(format!("dec.{k}.up.b"), NdTensor::zeros(vec![ck]))?,
                ))
            } else {
                None
            };
            let cin = ck + config.skip_width() * ck;
            let block = residual(&mut store, &format!("dec.{k}.block"), config.block(cin, ck, 1), rng)?;
            decoder.push(DecoderStage { up, block });
        }

        let c0 = config.channels(0);
        let attention = if config.attention_enabled {
            Some(SpatialAttention::new(&mut store, "attention", c0, config.attention_max_positions, rng)?)
        } else {
            None
        };
        let head = |store: &mut ParamStore<T>, name: &str, classes: usize, rng: &mut ChaCha8Rng| -> Result<(ParamId, ParamId)> {
            Ok((
                store.add(format!("{name}.w"), conv_weight(classes, c0, 1, 1, rng))?,
                store.add(format!("{name}.b"), head_bias(classes))?,
            ))
        };
        let anatomy_head = head(&mut store, "head.anatomy", config.n_anatomy + 1, rng)?;
        let pathology_head = head(&mut store, "head.pathology", config.n_pathology + 1, rng)?;

        Ok(MfuNet {
            config,
            params: store,
            encoders,
            bottleneck,
            decoder,
            attention,
            anatomy_head,
            pathology_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn attention_block(&self) -> Option<&SpatialAttention> {
        self.attention.as_ref()
    }

    pub fn anatomy_head(&self) -> (ParamId, ParamId) {
        self.anatomy_head
    }

    pub fn pathology_head(&self) -> (ParamId, ParamId) {
        self.pathology_head
    }

    /// Same architecture at another precision.
    pub fn cast<U: Scalar>(&self) -> MfuNet<U> {
        MfuNet {
            config: self.config.clone(),
            params: self.params.cast(),
            encoders: self.encoders.clone(),
            bottleneck: self.bottleneck.clone(),
            decoder: self.decoder.clone(),
            attention: self.attention.clone(),
            anatomy_head: self.anatomy_head,
            pathology_head: self.pathology_head,
        }
    }

    /// Runs the three encoders and fuses each level.
    pub fn encode(&self, f: &Forward<'_, T>, inputs: [Var; 3]) -> Result<FeatureBundle> {
        let t = f.tape;
        let s0 = t.shape(inputs[0]);
        for (m, &x) in MODALITIES.iter().zip(&inputs) {
            let s = t.shape(x);
            if s.len() != 4 || s[1] != 1 {
                return Err(Error::shape("encode", format!("{m} input must be [B, 1, H, W], got {s:?}")));
            }
            if s != s0 {
                return Err(Error::Alignment(format!("{m} has shape {s:?}, lge has {s0:?}")));
            }
        }
        let div = 1usize << self.config.levels;
        if s0[2] % div != 0 || s0[3] % div != 0 {
            return Err(Error::Config(format!(
                "input {}x{} is not divisible by 2^levels = {div}",
                s0[2], s0[3]
            )));
        }
        let mut current = inputs;
        let mut levels = Vec::with_capacity(self.config.levels);
        for k in 0..self.config.levels {
            let mut feats = current;
            for (m, feat) in feats.iter_mut().enumerate() {
                *feat = self.encoders[m][k].forward(f, current[m])?;
            }
            let fused = if self.config.max_fusion_enabled {
                Some(max_fuse(t, feats[0], feats[1], feats[2])?)
            } else {
                None
            };
            levels.push(LevelFeatures { modality: feats, fused });
            current = feats;
        }
        let bottleneck_input = t.concat(&current, 1)?;
        Ok(FeatureBundle {
            levels,
            bottleneck_input,
        })
    }

    pub fn decode(&self, f: &Forward<'_, T>, bundle: &FeatureBundle) -> Result<SegOutput> {
        let t = f.tape;
        if bundle.levels.len() != self.config.levels {
            return Err(Error::Config(format!(
                "feature bundle has {} levels, model has {}",
                bundle.levels.len(),
                self.config.levels
            )));
        }
        let mut h = bundle.bottleneck_input;
        for block in &self.bottleneck {
            h = block.forward(f, h)?;
        }
        for (stage, k) in self.decoder.iter().zip((0..self.config.levels).rev()) {
            if let Some((w, b)) = stage.up {
                h = t.conv_transpose2d(h, f.p(w)?, Some(f.p(b)?), ConvGeom::new(2, 0, 1))?;
            }
            let lvl = &bundle.levels[k];
            let mut parts = vec![h];
            parts.extend_from_slice(&lvl.modality);
            parts.extend(lvl.fused);
            let x = t.concat(&parts, 1)?;
            h = stage.block.forward(f, x)?;
        }
        let (attention, grid) = match &self.attention {
            Some(att) => {
                let out = att.forward(f, h)?;
                h = out.output;
                (Some(out.attention), Some(out.grid))
            }
            None => (None, None),
        };
        let head = |(w, b): (ParamId, ParamId)| -> Result<Var> {
            let logits = t.conv2d(h, f.p(w)?, Some(f.p(b)?), ConvGeom::new(1, 0, 1))?;
            t.softmax(logits, 1)
        };
        Ok(SegOutput {
            anatomy: head(self.anatomy_head)?,
            pathology: head(self.pathology_head)?,
            attention,
            attention_grid: grid,
        })
    }

    pub fn forward(&self, f: &Forward<'_, T>, inputs: [Var; 3]) -> Result<SegOutput> {
        let bundle = self.encode(f, inputs)?;
        self.decode(f, &bundle)
    }

    /// Records the three `[B, 1, H, W]` inputs as constants and runs the network.
    pub fn forward_tensors(&self, f: &Forward<'_, T>, inputs: [&NdTensor<T>; 3]) -> Result<SegOutput> {
        let vars = [
            f.tape.leaf(inputs[0])?,
            f.tape.leaf(inputs[1])?,
            f.tape.leaf(inputs[2])?,
        ];
        self.forward(f, vars)
    }

    /// Inference without gradient tracking.
    pub fn predict(&self, inputs: [&NdTensor<T>; 3]) -> Result<Prediction<T>> {
        let tape = Tape::new();
        let f = Forward::new(&tape, &self.params, false);
        let out = self.forward_tensors(&f, inputs)?;
        let attention_received = match (out.attention, out.attention_grid) {
            (Some(a), Some((gh, gw))) => {
                let shape = tape.shape(a);
                let (b, n) = (shape[0], shape[1]);
                let data = tape.data(a);
                let mut received = vec![T::zero(); b * n];
                let inv = T::one() / T::of(n as f64);
                for bi in 0..b {
                    for row in data[bi * n * n..(bi + 1) * n * n].chunks(n) {
                        for (acc, &v) in received[bi * n..(bi + 1) * n].iter_mut().zip(row) {
                            *acc += v * inv;
                        }
                    }
                }
                Some(NdTensor::new(vec![b, gh, gw], received)?)
            }
            _ => None,
        };
        Ok(Prediction {
            anatomy: tape.value(out.anatomy),
            pathology: tape.value(out.pathology),
            attention_received,
        })
    }
}

fn head_bias<T: Scalar>(classes: usize) -> NdTensor<T> {
    let p = HEAD_FOREGROUND_PRIOR;
    let logit = T::of((p / (1.0 - p)).ln());
    NdTensor::from_fn(vec![classes], |c| if c == 0 { T::zero() } else { logit })
}

/// Per-pixel argmax over the channel axis of `[B, C, H, W]` probabilities.
pub fn argmax_channels<T: Scalar>(probs: &NdTensor<T>) -> Vec<u8> {
    let s = probs.shape();
    let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
    let data = probs.data();
    let mut out = vec![0u8; b * plane];
    for bi in 0..b {
        for p in 0..plane {
            let mut best = 0;
            for ch in 1..c {
                if data[(bi * c + ch) * plane + p] > data[(bi * c + best) * plane + p] {
                    best = ch;
                }
            }
            out[bi * plane + p] = best as u8;
        }
    }
    out
}
