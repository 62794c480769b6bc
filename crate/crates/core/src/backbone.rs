//! Registry of the supported pretrained backbones.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BackboneName {
    AlexNet,
    GoogLeNet,
    Vgg19,
    Inceptionv3,
    ResNet50,
    SqueezeNet,
}

impl BackboneName {
    pub const ALL: [BackboneName; 6] = [
        BackboneName::AlexNet,
        BackboneName::GoogLeNet,
        BackboneName::Vgg19,
        BackboneName::Inceptionv3,
        BackboneName::ResNet50,
        BackboneName::SqueezeNet,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackboneName::AlexNet => "AlexNet",
            BackboneName::GoogLeNet => "GoogLeNet",
            BackboneName::Vgg19 => "Vgg19",
            BackboneName::Inceptionv3 => "Inceptionv3",
            BackboneName::ResNet50 => "ResNet50",
            BackboneName::SqueezeNet => "SqueezeNet",
        }
    }

    pub fn spec(self) -> BackboneSpec {
        BackboneSpec::for_name(self)
    }
}

impl fmt::Display for BackboneName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BackboneName::ALL
            .into_iter()
            .find(|b| b.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::UnknownBackbone {
                name: s.to_string(),
                options: BackboneName::ALL.map(|b| b.as_str()).join(", "),
            })
    }
}

/// Network input geometry, width x height x depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub width: u32,
    pub height: u32,
    pub depth: u32,
}

impl fmt::Display for InputShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.width, self.height, self.depth)
    }
}

/// Per-channel input statistics the pretrained checkpoint expects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    pub const IMAGENET: Normalization = Normalization {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: BackboneName,
    pub year: u16,
    /// Number of layers from input to the classification output.
    pub depth: u32,
    pub input: InputShape,
    pub params_millions: f64,
    /// Key under which a weights provider looks up the pretrained checkpoint.
    pub provider_key: String,
    pub normalization: Normalization,
}

impl BackboneSpec {
    pub fn for_name(name: BackboneName) -> Self {
        let (year, depth, side, params) = match name {
            BackboneName::AlexNet => (2012, 8, 227, 61.0),
            BackboneName::GoogLeNet => (2014, 22, 224, 7.0),
            BackboneName::Vgg19 => (2014, 19, 224, 144.0),
            BackboneName::Inceptionv3 => (2015, 48, 299, 23.9),
            BackboneName::ResNet50 => (2015, 50, 224, 25.6),
            BackboneName::SqueezeNet => (2016, 18, 227, 1.24),
        };
        BackboneSpec {
            name,
            year,
            depth,
            input: InputShape { width: side, height: side, depth: 3 },
            params_millions: params,
            provider_key: format!("{}-imagenet", name.as_str().to_ascii_lowercase()),
            normalization: Normalization::IMAGENET,
        }
    }

    pub fn registry() -> Vec<BackboneSpec> {
        BackboneName::ALL.into_iter().map(BackboneSpec::for_name).collect()
    }

    pub fn lookup(name: &str) -> Result<BackboneSpec> {
        Ok(BackboneSpec::for_name(name.parse()?))
    }

    /// The registry entry with the fewest parameters.
    pub fn smallest() -> BackboneSpec {
        BackboneSpec::registry()
            .into_iter()
            .min_by(|a, b| a.params_millions.total_cmp(&b.params_millions))
            .expect("registry is non-empty")
    }
}
