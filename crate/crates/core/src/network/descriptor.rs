//! Architecture descriptor strings.
//!
//! ```text
//! descriptor := family ':' [ C 'x' H 'x' W ':' ] features '|' hidden '|' classes
//! family     := 'vgg-s' | 'resnet-s' | 'mlp'
//! features   := vgg-s:    ('c' N | 'p') joined by '-'   ('p' follows a conv)
//!               resnet-s: 's' N ('-' 'b' N ['s'])+
//!               mlp:      empty
//! hidden     := empty | 'fc' N ('-' 'fc' N)*
//! ```
//!
//! The input shape defaults to `1x28x28` (vgg-s, mlp) or `3x32x32`
//! (resnet-s) when omitted; [`ArchDescriptor`]'s `Display` always writes it.
//!
//! * `cN`: 3×3 conv (padding 1) to N channels; with a following `p` the block
//!   is conv → 2×2 max-pool → batch norm → spike, otherwise conv → batch norm → spike.
//! * `sN`: 3×3 stem conv. `bN`: residual block batch norm → spike → 3×3 conv
//!   to N channels with an additive shortcut around it; `bNs` uses stride 2.
//!   The shortcut gets a 1×1 projection when width or stride change.
//! * `fcN`: linear → spike → dropout. The head is a final linear layer to
//!   `classes` outputs. resnet-s adds batch norm → spike before flattening.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::hoyer::ExtremumMode;
use crate::network::layer::{BatchNorm, Conv, Layer, Linear, Shortcut};
use crate::network::model::NetworkModel;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::spike::{HoyerSpikeState, SpikeKind, DEFAULT_EMA_MOMENTUM, DEFAULT_SURROGATE_SCALE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    VggS,
    ResnetS,
    Mlp,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::VggS => "vgg-s",
            Family::ResnetS => "resnet-s",
            Family::Mlp => "mlp",
        }
    }

    pub fn default_input(self) -> [usize; 3] {
        match self {
            Family::VggS | Family::Mlp => [1, 28, 28],
            Family::ResnetS => [3, 32, 32],
        }
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vgg-s" => Ok(Family::VggS),
            "resnet-s" => Ok(Family::ResnetS),
            "mlp" => Ok(Family::Mlp),
            other => Err(Error::Descriptor(format!("unknown family `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FeatureToken {
    Conv(usize),
    Pool,
    Stem(usize),
    Block { width: usize, downsample: bool },
}

impl fmt::Display for FeatureToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureToken::Conv(n) => write!(f, "c{n}"),
            FeatureToken::Pool => f.write_str("p"),
            FeatureToken::Stem(n) => write!(f, "s{n}"),
            FeatureToken::Block { width, downsample } => {
                write!(f, "b{width}{}", if *downsample { "s" } else { "" })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ArchDescriptor {
    pub family: Family,
    pub input: [usize; 3],
    pub features: Vec<FeatureToken>,
    pub hidden: Vec<usize>,
    pub classes: usize,
}

/// Spike-layer and dropout settings applied by the builders.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelOptions {
    pub mode: ExtremumMode,
    pub kind: SpikeKind,
    pub ema_momentum: f64,
    pub surrogate_scale: f64,
    pub dropout: f64,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            mode: ExtremumMode::default(),
            kind: SpikeKind::default(),
            ema_momentum: DEFAULT_EMA_MOMENTUM,
            surrogate_scale: DEFAULT_SURROGATE_SCALE,
            dropout: 0.1,
        }
    }
}

impl ModelOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::Config(format!(
                "ema momentum must be in [0, 1], got {}",
                self.ema_momentum
            )));
        }
        if !(self.surrogate_scale > 0.0 && self.surrogate_scale.is_finite()) {
            return Err(Error::Config(format!(
                "surrogate scale must be > 0, got {}",
                self.surrogate_scale
            )));
        }
        Ok(())
    }

    pub(crate) fn spike_state<T: Scalar>(&self) -> HoyerSpikeState<T> {
        let mut s = HoyerSpikeState::new(self.mode);
        s.kind = self.kind;
        s.ema_momentum = T::lit(self.ema_momentum);
        s.surrogate_scale = T::lit(self.surrogate_scale);
        s
    }
}

fn number(tok: &str, what: &str) -> Result<usize> {
    let n: usize = tok
        .parse()
        .map_err(|_| Error::Descriptor(format!("expected a number for {what}, got `{tok}`")))?;
    if n == 0 {
        return Err(Error::Descriptor(format!("{what} must be >= 1")));
    }
    Ok(n)
}

fn parse_feature(tok: &str) -> Result<FeatureToken> {
    if tok == "p" {
        return Ok(FeatureToken::Pool);
    }
    if let Some(rest) = tok.strip_prefix('c') {
        return Ok(FeatureToken::Conv(number(rest, "conv width")?));
    }
    if let Some(rest) = tok.strip_prefix('s') {
        return Ok(FeatureToken::Stem(number(rest, "stem width")?));
    }
    if let Some(rest) = tok.strip_prefix('b') {
        let (digits, downsample) = match rest.strip_suffix('s') {
            Some(d) => (d, true),
            None => (rest, false),
        };
        return Ok(FeatureToken::Block {
            width: number(digits, "block width")?,
            downsample,
        });
    }
    Err(Error::Descriptor(format!("unknown feature token `{tok}`")))
}

fn split_list(s: &str) -> impl Iterator<Item = &str> {
    s.split('-').filter(|t| !t.is_empty())
}

impl FromStr for ArchDescriptor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let (family, input, body) = match parts.as_slice() {
            [fam, body] => {
                let family: Family = fam.parse()?;
                (family, family.default_input(), *body)
            }
            [fam, input, body] => {
                let family: Family = fam.parse()?;
                let dims: Vec<&str> = input.split('x').collect();
                let [c, h, w] = dims.as_slice() else {
                    return Err(Error::Descriptor(format!("input shape must be CxHxW, got `{input}`")));
                };
                (
                    family,
                    [number(c, "input channels")?, number(h, "input height")?, number(w, "input width")?],
                    *body,
                )
            }
            _ => return Err(Error::Descriptor(format!("malformed descriptor `{s}`"))),
        };
        let sections: Vec<&str> = body.split('|').collect();
        let [features, hidden, classes] = sections.as_slice() else {
            return Err(Error::Descriptor(format!(
                "expected `features|hidden|classes`, got `{body}`"
            )));
        };
        let features = split_list(features).map(parse_feature).collect::<Result<Vec<_>>>()?;
        let hidden = split_list(hidden)
            .map(|t| {
                t.strip_prefix("fc")
                    .ok_or_else(|| Error::Descriptor(format!("hidden layers are `fcN`, got `{t}`")))
                    .and_then(|n| number(n, "hidden width"))
            })
            .collect::<Result<Vec<_>>>()?;
        let desc = ArchDescriptor {
            family,
            input,
            features,
            hidden,
            classes: number(classes, "class count")?,
        };
        desc.validate()?;
        Ok(desc)
    }
}

impl fmt::Display for ArchDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [c, h, w] = self.input;
        write!(f, "{}:{c}x{h}x{w}:", self.family.name())?;
        let feats: Vec<String> = self.features.iter().map(|t| t.to_string()).collect();
        let hidden: Vec<String> = self.hidden.iter().map(|n| format!("fc{n}")).collect();
        write!(f, "{}|{}|{}", feats.join("-"), hidden.join("-"), self.classes)
    }
}

impl ArchDescriptor {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Descriptor(format!("{}: {m}", self.family.name())));
        match self.family {
            Family::VggS => {
                if !matches!(self.features.first(), Some(FeatureToken::Conv(_))) {
                    return bad("features must start with a conv");
                }
                for pair in self.features.windows(2) {
                    if pair[1] == FeatureToken::Pool && pair[0] == FeatureToken::Pool {
                        return bad("a pool must follow a conv");
                    }
                }
                if self
                    .features
                    .iter()
                    .any(|t| !matches!(t, FeatureToken::Conv(_) | FeatureToken::Pool))
                {
                    return bad("only `cN` and `p` tokens are allowed");
                }
            }
            Family::ResnetS => {
                let mut it = self.features.iter();
                if !matches!(it.next(), Some(FeatureToken::Stem(_))) {
                    return bad("features must start with a stem `sN`");
                }
                let blocks: Vec<_> = it.collect();
                if blocks.is_empty() || blocks.iter().any(|t| !matches!(t, FeatureToken::Block { .. })) {
                    return bad("the stem must be followed by one or more `bN` blocks");
                }
            }
            Family::Mlp => {
                if !self.features.is_empty() {
                    return bad("takes no feature tokens");
                }
            }
        }
        Ok(())
    }

    /// Modified VGG: `c8-p-c16-p-c32-c32 | fc128-fc64`, widths scaled by `width_multiplier`.
    pub fn vgg_s(input: [usize; 3], classes: usize, width_multiplier: usize) -> Result<Self> {
        if width_multiplier < 1 {
            return Err(Error::invalid("width multiplier must be >= 1"));
        }
        let m = width_multiplier;
        let desc = ArchDescriptor {
            family: Family::VggS,
            input,
            features: vec![
                FeatureToken::Conv(8 * m),
                FeatureToken::Pool,
                FeatureToken::Conv(16 * m),
                FeatureToken::Pool,
                FeatureToken::Conv(32 * m),
                FeatureToken::Conv(32 * m),
            ],
            hidden: vec![128 * m, 64 * m],
            classes,
        };
        desc.validate()?;
        Ok(desc)
    }

    /// Pre-activation ResNet: stem of width 8, one full-resolution block, then
    /// `blocks − 1` stride-2 blocks doubling the width.
    pub fn resnet_s(input: [usize; 3], classes: usize, blocks: usize) -> Result<Self> {
        if blocks < 1 {
            return Err(Error::invalid("resnet-s needs at least one block"));
        }
        let mut features = vec![FeatureToken::Stem(8), FeatureToken::Block { width: 8, downsample: false }];
        for k in 1..blocks {
            features.push(FeatureToken::Block {
                width: 8 << k,
                downsample: true,
            });
        }
        let desc = ArchDescriptor {
            family: Family::ResnetS,
            input,
            features,
            hidden: vec![64, 32],
            classes,
        };
        desc.validate()?;
        Ok(desc)
    }

    pub fn build<T: Scalar>(&self, opts: &ModelOptions, rng: &mut Rng) -> Result<NetworkModel<T>> {
        self.validate()?;
        opts.validate()?;
        let mut layers: Vec<Layer<T>> = Vec::new();
        let mut shortcuts: Vec<Shortcut<T>> = Vec::new();
        let spike = || Layer::Spike(opts.spike_state::<T>());
        let [mut ch, _, _] = self.input;
        match self.family {
            Family::VggS => {
                let mut i = 0;
                while i < self.features.len() {
                    let FeatureToken::Conv(width) = self.features[i] else {
                        unreachable!("validated");
                    };
                    layers.push(Layer::Conv(Conv::new(ch, width, 3, 1, 1, rng)?));
                    if self.features.get(i + 1) == Some(&FeatureToken::Pool) {
                        layers.push(Layer::MaxPool { kernel: 2, stride: 2 });
                        i += 1;
                    }
                    layers.push(Layer::BatchNorm(BatchNorm::new(width)));
                    layers.push(spike());
                    ch = width;
                    i += 1;
                }
            }
            Family::ResnetS => {
                for tok in &self.features {
                    match *tok {
                        FeatureToken::Stem(width) => {
                            layers.push(Layer::Conv(Conv::new(ch, width, 3, 1, 1, rng)?));
                            ch = width;
                        }
                        FeatureToken::Block { width, downsample } => {
                            let from = layers.len() - 1;
                            let stride = if downsample { 2 } else { 1 };
                            layers.push(Layer::BatchNorm(BatchNorm::new(ch)));
                            layers.push(spike());
                            layers.push(Layer::Conv(Conv::new(ch, width, 3, stride, 1, rng)?));
                            let projection = if width != ch || downsample {
                                Some(Conv::new(ch, width, 1, stride, 0, rng)?)
                            } else {
                                None
                            };
                            shortcuts.push(Shortcut {
                                from,
                                to: layers.len() - 1,
                                projection,
                            });
                            ch = width;
                        }
                        _ => unreachable!("validated"),
                    }
                }
                layers.push(Layer::BatchNorm(BatchNorm::new(ch)));
                layers.push(spike());
            }
            Family::Mlp => {}
        }
        layers.push(Layer::Flatten);
        // Flattened width comes from shape inference over the feature stack.
        let mut fan_in = NetworkModel::<T>::infer_shapes_of(&layers, &shortcuts, &self.input)?
            .last()
            .map(|s| s.iter().product())
            .unwrap_or_else(|| self.input.iter().product());
        for &width in &self.hidden {
            layers.push(Layer::Linear(Linear::new(fan_in, width, rng)?));
            layers.push(spike());
            layers.push(Layer::Dropout { rate: T::lit(opts.dropout) });
            fan_in = width;
        }
        layers.push(Layer::Linear(Linear::new(fan_in, self.classes, rng)?));
        NetworkModel::new(self.input, layers, shortcuts, self.to_string())
    }
}

/// Parses `vgg-s`, `resnet-s`, `mlp` (default shapes) or a full descriptor.
pub fn resolve_arch(arch: &str, input: [usize; 3], classes: usize) -> Result<ArchDescriptor> {
    match arch {
        "vgg-s" => ArchDescriptor::vgg_s(input, classes, 1),
        "resnet-s" => ArchDescriptor::resnet_s(input, classes, 3),
        "mlp" => Ok(ArchDescriptor {
            family: Family::Mlp,
            input,
            features: Vec::new(),
            hidden: vec![256, 128],
            classes,
        }),
        other => other.parse(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        for s in [
            "vgg-s:1x28x28:c16-p-c32-p-c64-c64|fc256-fc128|10",
            "resnet-s:3x32x32:s8-b8-b16s-b32s|fc64-fc32|10",
            "mlp:1x1x10:|fc10|20",
            "vgg-s:1x6x6:c2||10",
        ] {
            let d: ArchDescriptor = s.parse().unwrap();
            assert_eq!(d.to_string(), s);
        }
    }

    #[test]
    fn short_form_uses_default_input() {
        let d: ArchDescriptor = "vgg-s:c16-p-c32-p-c64-c64|fc256-fc128|10".parse().unwrap();
        assert_eq!(d.input, [1, 28, 28]);
        assert_eq!(d, ArchDescriptor::vgg_s([1, 28, 28], 10, 2).unwrap());
    }

    #[test]
    fn rejects_malformed() {
        for s in [
            "",
            "vgg:c8||10",
            "vgg-s:p-c8||10",
            "vgg-s:c8-p-p||10",
            "vgg-s:c0||10",
            "vgg-s:c8|fc|10",
            "vgg-s:c8|x12|10",
            "vgg-s:c8||0",
            "vgg-s:c8|10",
            "resnet-s:b8||10",
            "resnet-s:s8||10",
            "mlp:c8||10",
            "vgg-s:1x28:c8||10",
        ] {
            assert!(s.parse::<ArchDescriptor>().is_err(), "{s}");
        }
    }

    #[test]
    fn builder_descriptors() {
        assert_eq!(
            ArchDescriptor::vgg_s([1, 28, 28], 10, 1).unwrap().to_string(),
            "vgg-s:1x28x28:c8-p-c16-p-c32-c32|fc128-fc64|10"
        );
        assert_eq!(
            ArchDescriptor::resnet_s([3, 32, 32], 10, 3).unwrap().to_string(),
            "resnet-s:3x32x32:s8-b8-b16s-b32s|fc64-fc32|10"
        );
        assert!(ArchDescriptor::vgg_s([1, 28, 28], 10, 0).is_err());
        assert!(ArchDescriptor::resnet_s([3, 32, 32], 10, 0).is_err());
    }
}
