//! Convolutional blocks for the three backbones.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{conv_weight, Forward, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{ConvGeom, NdTensor, Scalar, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Residual,
    Dilation,
    #[serde(alias = "side_conv")]
    SideConv,
}

impl std::str::FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "residual" => Ok(Backbone::Residual),
            "dilation" => Ok(Backbone::Dilation),
            "sideconv" | "side_conv" => Ok(Backbone::SideConv),
            other => Err(Error::Config(format!("unknown backbone {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    Instance,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
}

impl Activation {
    pub const LEAKY_SLOPE: f64 = 0.2;

    pub fn apply<T: Scalar>(self, f: &Forward<'_, T>, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => f.tape.relu(x),
            Activation::LeakyRelu => f.tape.leaky_relu(x, T::of(Self::LEAKY_SLOPE)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub backbone: Backbone,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub dilation: usize,
    pub normalization: Normalization,
    pub activation: Activation,
    pub bottleneck: bool,
}

impl BlockConfig {
    pub fn new(backbone: Backbone, in_channels: usize, out_channels: usize) -> Self {
        BlockConfig {
            backbone,
            in_channels,
            out_channels,
            stride: 1,
            dilation: 1,
            normalization: Normalization::Instance,
            activation: Activation::Relu,
            bottleneck: false,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("block channel counts must be positive".into()));
        }
        if self.stride == 0 || self.dilation == 0 {
            return Err(Error::Config("block stride and dilation must be >= 1".into()));
        }
        if self.dilation > 1 && !(self.backbone == Backbone::Dilation && self.bottleneck) {
            return Err(Error::Config(
                "dilation > 1 is only allowed in bottleneck blocks of the dilation backbone".into(),
            ));
        }
        Ok(())
    }
}

/// A 3x3 convolution, or for the side-convolution backbone the sum of
/// parallel 3x3, 3x1 and 1x3 convolutions with matching output extents.
#[derive(Debug, Clone)]
pub struct ConvUnit {
    pub main: ParamId,
    pub side: Option<(ParamId, ParamId)>,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub dilation: usize,
}

impl ConvUnit {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        dilation: usize,
        side: bool,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let main = store.add(format!("{name}.w"), conv_weight(cout, cin, 3, 3, rng))?;
        let side = if side {
            let tall = store.add(format!("{name}.w3x1"), conv_weight(cout, cin, 3, 1, rng))?;
            let wide = store.add(format!("{name}.w1x3"), conv_weight(cout, cin, 1, 3, rng))?;
            Some((tall, wide))
        } else {
            None
        };
        let bias = if bias {
            Some(store.add(format!("{name}.b"), NdTensor::zeros(vec![cout]))?)
        } else {
            None
        };
        Ok(ConvUnit {
            main,
            side,
            bias,
            stride,
            dilation,
        })
    }

    pub fn forward<T: Scalar>(&self, f: &Forward<'_, T>, x: Var) -> Result<Var> {
        let t = f.tape;
        let bias = self.bias.map(|b| f.p(b)).transpose()?;
        let d = self.dilation;
        let mut y = t.conv2d(x, f.p(self.main)?, bias, ConvGeom::new(self.stride, d, d))?;
        if let Some((tall, wide)) = self.side {
            let a = t.conv2d(x, f.p(tall)?, None, ConvGeom::with_padding(self.stride, 1, 0, 1))?;
            let b = t.conv2d(x, f.p(wide)?, None, ConvGeom::with_padding(self.stride, 0, 1, 1))?;
            y = t.add(y, a)?;
            y = t.add(y, b)?;
        }
        Ok(y)
    }
}

/// Instance normalization with a per-channel affine map, or nothing.
#[derive(Debug, Clone)]
pub struct Norm {
    affine: Option<(ParamId, ParamId)>,
}

impl Norm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, kind: Normalization) -> Result<Self> {
        let affine = match kind {
            Normalization::Instance => Some((
                store.add(format!("{name}.gamma"), NdTensor::full(vec![channels], T::one()))?,
                store.add(format!("{name}.beta"), NdTensor::zeros(vec![channels]))?,
            )),
            Normalization::None => None,
        };
        Ok(Norm { affine })
    }

    pub fn forward<T: Scalar>(&self, f: &Forward<'_, T>, x: Var) -> Result<Var> {
        match self.affine {
            Some((g, b)) => f.tape.instance_norm(x, f.p(g)?, f.p(b)?, T::of(Self::EPS)),
            None => Ok(x),
        }
    }
}

/// Two conv units with normalization and a shortcut:
/// `act(norm(conv(act(norm(conv(x))))) + shortcut(x))`.
///
/// The shortcut is the identity when channels and resolution are preserved and
/// a strided 1x1 projection otherwise.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub config: BlockConfig,
    pub conv1: ConvUnit,
    pub norm1: Norm,
    pub conv2: ConvUnit,
    pub norm2: Norm,
    pub shortcut: Option<(ParamId, ParamId)>,
}

impl ResidualBlock {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, config: BlockConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let side = config.backbone == Backbone::SideConv;
        let conv_bias = config.normalization == Normalization::None;
        let (cin, cout) = (config.in_channels, config.out_channels);
        let conv1 = ConvUnit::new(store, &format!("{name}.conv1"), cin, cout, config.stride, 1, side, conv_bias, rng)?;
        let norm1 = Norm::new(store, &format!("{name}.norm1"), cout, config.normalization)?;
        let conv2 = ConvUnit::new(store, &format!("{name}.conv2"), cout, cout, 1, 1, side, conv_bias, rng)?;
        let norm2 = Norm::new(store, &format!("{name}.norm2"), cout, config.normalization)?;
        let shortcut = if cin != cout || config.stride != 1 {
            Some((
                store.add(format!("{name}.proj.w"), conv_weight(cout, cin, 1, 1, rng))?,
                store.add(format!("{name}.proj.b"), NdTensor::zeros(vec![cout]))?,
            ))
        } else {
            None
        };
        Ok(ResidualBlock {
            config,
            conv1,
            norm1,
            conv2,
            norm2,
            shortcut,
        })
    }

    pub fn forward<T: Scalar>(&self, f: &Forward<'_, T>, x: Var) -> Result<Var> {
        let act = self.config.activation;
        let h = self.conv1.forward(f, x)?;
        let h = self.norm1.forward(f, h)?;
        let h = act.apply(f, h)?;
        let h = self.conv2.forward(f, h)?;
        let h = self.norm2.forward(f, h)?;
        let skip = match self.shortcut {
            Some((w, b)) => f
                .tape
                .conv2d(x, f.p(w)?, Some(f.p(b)?), ConvGeom::new(self.config.stride, 0, 1))?,
            None => x,
        };
        let s = f.tape.add(h, skip)?;
        act.apply(f, s)
    }
}

/// Cascade of 3x3 convolutions with dilations 1, 2 and 4 whose three outputs
/// are summed. Spatial extent is preserved.
#[derive(Debug, Clone)]
pub struct DilatedBottleneck {
    pub config: BlockConfig,
    pub stages: Vec<(ConvUnit, Norm)>,
}

impl DilatedBottleneck {
    pub const DILATIONS: [usize; 3] = [1, 2, 4];

    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, config: BlockConfig, rng: &mut R) -> Result<Self> {
        let mut config = config;
        config.bottleneck = true;
        config.validate()?;
        if config.stride != 1 {
            return Err(Error::Config("the dilated bottleneck does not downsample".into()));
        }
        let conv_bias = config.normalization == Normalization::None;
        let mut stages = Vec::with_capacity(3);
        let mut cin = config.in_channels;
        for (i, &d) in Self::DILATIONS.iter().enumerate() {
            let conv = ConvUnit::new(store, &format!("{name}.dil{d}"), cin, config.out_channels, 1, d, false, conv_bias, rng)?;
            let norm = Norm::new(store, &format!("{name}.norm{i}"), config.out_channels, config.normalization)?;
            stages.push((conv, norm));
            cin = config.out_channels;
        }
        Ok(DilatedBottleneck { config, stages })
    }

    pub fn forward<T: Scalar>(&self, f: &Forward<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        let mut total: Option<Var> = None;
        for (conv, norm) in &self.stages {
            h = conv.forward(f, h)?;
            h = norm.forward(f, h)?;
            h = self.config.activation.apply(f, h)?;
            total = Some(match total {
                Some(acc) => f.tape.add(acc, h)?,
                None => h,
            });
        }
        Ok(total.expect("three stages"))
    }
}
