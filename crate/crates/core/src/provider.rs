//! Pretrained-weights providers.
//!
//! A provider turns a backbone's `provider_key` into a [`Checkpoint`]: the
//! transferable feature-extraction tensors plus the original 1000-way
//! classifier, which fine-tuning discards.
//!
//! Checkpoint files use a small binary layout: the magic `TSCK`, a
//! little-endian `u32` version, a `u32` header length, a JSON header
//! (`provider_key`, `arch`, tensor names and shapes) and the tensor data as
//! little-endian `f32`.

use std::fs;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneSpec;
use crate::nn::{Architecture, Param, ParamGroup};
use crate::rng;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"TSCK";
const VERSION: u32 = 1;
/// Output width of the classifier shipped with a pretrained checkpoint.
pub const PRETRAINED_CLASSES: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub provider_key: String,
    pub arch: Architecture,
    /// Transferable tensors in [`Architecture::body_shapes`] order.
    pub body: Vec<Param>,
    /// The original classifier weight and bias.
    pub classifier: [Param; 2],
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    provider_key: String,
    arch: Architecture,
    tensors: Vec<TensorHeader>,
}

impl Checkpoint {
    fn tensors(&self) -> impl Iterator<Item = &Param> {
        self.body.iter().chain(self.classifier.iter())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            provider_key: self.provider_key.clone(),
            arch: self.arch,
            tensors: self
                .tensors()
                .map(|p| TensorHeader { name: p.name.clone(), shape: p.shape.clone() })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for p in self.tensors() {
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?)?;
        let mut offset = 12 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for (i, t) in header.tensors.into_iter().enumerate() {
            let n: usize = t.shape.iter().product();
            let raw = bytes.get(offset..offset + 4 * n).ok_or_else(|| bad("truncated tensor data"))?;
            offset += 4 * n;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let group = if i < 6 { ParamGroup::Transferred } else { ParamGroup::Head };
            tensors.push(Param::new(t.name, t.shape, data, group));
        }
        if offset != bytes.len() || tensors.len() != 8 {
            return Err(bad("unexpected checkpoint layout"));
        }
        let bias = tensors.pop().unwrap();
        let weight = tensors.pop().unwrap();
        let ckpt = Checkpoint {
            provider_key: header.provider_key,
            arch: header.arch,
            body: tensors,
            classifier: [weight, bias],
        };
        ckpt.check_shapes()?;
        Ok(ckpt)
    }

    fn check_shapes(&self) -> Result<()> {
        for (p, (name, shape)) in self.body.iter().zip(self.arch.body_shapes()) {
            if p.name != name || p.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match architecture ({name} {shape:?})",
                    p.name, p.shape
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub trait PretrainedProvider: Send + Sync {
    fn name(&self) -> &str;

    fn load(&self, backbone: &BackboneSpec) -> Result<Checkpoint>;

    /// Whether forward/backward passes on this provider's checkpoints are
    /// bit-reproducible for fixed inputs.
    fn deterministic(&self) -> bool {
        true
    }
}

/// Built-in reference checkpoints generated deterministically from the
/// provider key. Useful offline and in tests; the weights carry no
/// ImageNet knowledge.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReferenceProvider;

impl ReferenceProvider {
    pub fn checkpoint(backbone: &BackboneSpec) -> Checkpoint {
        let arch = Architecture::for_backbone(backbone);
        let mut r = rng::seeded(rng::hash_str(&backbone.provider_key));
        let mut normal = |n: usize, std: f64| -> Vec<f32> {
            let d = Normal::new(0.0, std).expect("valid std");
            (0..n).map(|_| d.sample(&mut r) as f32).collect()
        };
        let body = arch
            .body_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name == "conv1.weight" {
                    edge_and_colour_filters(arch.conv1)
                } else if name == "conv1.bias" {
                    vec![0.0; n]
                } else if name.ends_with(".bias") {
                    normal(n, 0.05)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    normal(n, (2.0 / fan_in as f64).sqrt())
                };
                Param::new(name, shape, data, ParamGroup::Transferred)
            })
            .collect();
        let classifier = [
            Param::new(
                "classifier.weight",
                vec![PRETRAINED_CLASSES, arch.hidden],
                normal(PRETRAINED_CLASSES * arch.hidden, 0.01),
                ParamGroup::Head,
            ),
            Param::new("classifier.bias", vec![PRETRAINED_CLASSES], vec![0.0; PRETRAINED_CLASSES], ParamGroup::Head),
        ];
        Checkpoint { provider_key: backbone.provider_key.clone(), arch, body, classifier }
    }
}

/// First-layer filters `[out, 3, 3, 3]`: signed luminance edge detectors
/// in four orientations, then per-channel colour averages.
fn edge_and_colour_filters(out: usize) -> Vec<f32> {
    const SOBEL_X: [f32; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
    const SOBEL_Y: [f32; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
    let mut w = vec![0.0; out * 27];
    for o in 0..out {
        let f = &mut w[o * 27..(o + 1) * 27];
        match o % 8 {
            k @ 0..4 => {
                let (kernel, sign) = match k {
                    0 => (SOBEL_X, 1.0),
                    1 => (SOBEL_X, -1.0),
                    2 => (SOBEL_Y, 1.0),
                    _ => (SOBEL_Y, -1.0),
                };
                for c in 0..3 {
                    for (i, v) in kernel.iter().enumerate() {
                        f[c * 9 + i] = sign * v / 12.0;
                    }
                }
            }
            k => {
                let c = (k - 4) % 3;
                let sign = if k == 7 { -1.0 } else { 1.0 };
                for i in 0..9 {
                    f[c * 9 + i] = sign / 36.0;
                }
            }
        }
    }
    w
}

impl PretrainedProvider for ReferenceProvider {
    fn name(&self) -> &str {
        "reference"
    }

    fn load(&self, backbone: &BackboneSpec) -> Result<Checkpoint> {
        Ok(Self::checkpoint(backbone))
    }
}

/// Loads `<dir>/<provider_key>.ckpt`.
#[derive(Debug, Clone)]
pub struct DirectoryProvider {
    pub dir: PathBuf,
}

impl DirectoryProvider {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path_for(&self, backbone: &BackboneSpec) -> PathBuf {
        self.dir.join(format!("{}.ckpt", backbone.provider_key))
    }
}

impl PretrainedProvider for DirectoryProvider {
    fn name(&self) -> &str {
        "directory"
    }

    fn load(&self, backbone: &BackboneSpec) -> Result<Checkpoint> {
        let path = self.path_for(backbone);
        if !path.exists() {
            return Err(Error::MissingWeights {
                key: backbone.provider_key.clone(),
                instructions: format!(
                    "expected {}; export a checkpoint there (e.g. `tonguescreen weights export --backbone {} --out {}`)",
                    path.display(),
                    backbone.name,
                    self.dir.display()
                ),
            });
        }
        let ckpt = Checkpoint::load(&path)?;
        if ckpt.provider_key != backbone.provider_key {
            return Err(Error::Checkpoint(format!(
                "{} holds '{}', expected '{}'",
                path.display(),
                ckpt.provider_key,
                backbone.provider_key
            )));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneName;

    #[test]
    fn reference_weights_are_stable_per_key() {
        let a = ReferenceProvider.load(&BackboneName::Vgg19.spec()).unwrap();
        let b = ReferenceProvider.load(&BackboneName::Vgg19.spec()).unwrap();
        let c = ReferenceProvider.load(&BackboneName::ResNet50.spec()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.body[2].data, c.body[2].data);
        assert_eq!(a.body[0].data, c.body[0].data);
        assert_eq!(a.classifier[0].shape, vec![PRETRAINED_CLASSES, a.arch.hidden]);
    }

    #[test]
    fn first_layer_ignores_flat_colour_on_edge_channels() {
        let w = edge_and_colour_filters(8);
        for o in 0..4 {
            let sum: f32 = w[o * 27..(o + 1) * 27].iter().sum();
            assert!(sum.abs() < 1e-6, "filter {o} responds to flat input");
        }
        assert!(w[4 * 27..5 * 27].iter().sum::<f32>() > 0.0);
    }

    #[test]
    fn checkpoint_bytes_round_trip_bit_exact() {
        let ckpt = ReferenceProvider::checkpoint(&BackboneName::SqueezeNet.spec());
        let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ckpt);
        let mut bytes = ckpt.to_bytes().unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    #[test]
    fn directory_provider_reports_fetch_instructions() {
        let dir = tempfile::tempdir().unwrap();
        let p = DirectoryProvider::new(dir.path());
        let spec = BackboneName::Vgg19.spec();
        let err = p.load(&spec).unwrap_err().to_string();
        assert!(err.contains("vgg19-imagenet") && err.contains("weights export"), "{err}");
        ReferenceProvider::checkpoint(&spec).save(&p.path_for(&spec)).unwrap();
        assert_eq!(p.load(&spec).unwrap(), ReferenceProvider::checkpoint(&spec));
    }
}
