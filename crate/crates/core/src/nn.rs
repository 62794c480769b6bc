//! Convolutional network used behind every backbone entry: a fixed
//! downsampling stem, two 3x3 convolution blocks, global average pooling,
//! a fully connected feature layer and the task-specific classification
//! head. Forward and backward passes are written out by hand.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneSpec, InputShape, Normalization};

/// CHW float tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor3 {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![0.0; c * h * w] }
    }

    #[inline]
    fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.h + y) * self.w + x
    }

    /// Normalized network input from an 8-bit RGB image.
    pub fn from_rgb(image: &RgbImage, norm: &Normalization) -> Self {
        let (w, h) = (image.width() as usize, image.height() as usize);
        let mut t = Tensor3::zeros(3, h, w);
        for (x, y, px) in image.enumerate_pixels() {
            for c in 0..3 {
                let v = px.0[c] as f32 / 255.0;
                let i = t.idx(c, y as usize, x as usize);
                t.data[i] = (v - norm.mean[c]) / norm.std[c];
            }
        }
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: InputShape,
    /// Average-pooling factor applied to the raw input.
    pub stem: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub hidden: usize,
}

impl Architecture {
    const TARGET_SIDE: u32 = 28;

    pub fn for_backbone(spec: &BackboneSpec) -> Self {
        Self {
            input: spec.input,
            stem: (spec.input.width / Self::TARGET_SIDE).max(1) as usize,
            conv1: 8,
            conv2: 16,
            hidden: 512,
        }
    }

    fn stem_dims(&self) -> (usize, usize) {
        (self.input.height as usize / self.stem, self.input.width as usize / self.stem)
    }

    /// Shapes of the transferable (pretrained) tensors, in checkpoint order.
    pub fn body_shapes(&self) -> [(&'static str, Vec<usize>); 6] {
        [
            ("conv1.weight", vec![self.conv1, 3, 3, 3]),
            ("conv1.bias", vec![self.conv1]),
            ("conv2.weight", vec![self.conv2, self.conv1, 3, 3]),
            ("conv2.bias", vec![self.conv2]),
            ("fc.weight", vec![self.hidden, self.conv2]),
            ("fc.bias", vec![self.hidden]),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Weights carried over from the pretrained checkpoint.
    Transferred,
    /// The replaced classification layer.
    Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub group: ParamGroup,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>, group: ParamGroup) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { name: name.into(), shape, data, group }
    }
}

const CONV1_W: usize = 0;
const CONV1_B: usize = 1;
const CONV2_W: usize = 2;
const CONV2_B: usize = 3;
const FC_W: usize = 4;
const FC_B: usize = 5;
const HEAD_W: usize = 6;
const HEAD_B: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub arch: Architecture,
    pub classes: usize,
    /// conv1.{weight,bias}, conv2.{weight,bias}, fc.{weight,bias}, head.{weight,bias}.
    pub params: Vec<Param>,
}

/// Per-tensor gradients, aligned with [`Network::params`].
pub type Gradients = Vec<Vec<f32>>;

pub struct ForwardCache {
    stem: Tensor3,
    relu1: Tensor3,
    pool1: Tensor3,
    relu2: Tensor3,
    pooled: Vec<f32>,
    hidden: Vec<f32>,
}

impl Network {
    pub fn new(arch: Architecture, classes: usize, params: Vec<Param>) -> Self {
        assert_eq!(params.len(), 8, "network expects 8 parameter tensors");
        Self { arch, classes, params }
    }

    pub fn zero_grads(&self) -> Gradients {
        self.params.iter().map(|p| vec![0.0; p.data.len()]).collect()
    }

    pub fn logits(&self, x: &Tensor3) -> Vec<f32> {
        self.forward(x).0
    }

    pub fn forward(&self, x: &Tensor3) -> (Vec<f32>, ForwardCache) {
        let a = &self.arch;
        let stem = avg_pool(x, a.stem);
        let relu1 = relu(conv3x3(&stem, &self.params[CONV1_W].data, &self.params[CONV1_B].data, a.conv1));
        let pool1 = avg_pool(&relu1, 2);
        let relu2 = relu(conv3x3(&pool1, &self.params[CONV2_W].data, &self.params[CONV2_B].data, a.conv2));
        let pooled = global_avg(&relu2);
        let mut hidden = dense(&pooled, &self.params[FC_W].data, &self.params[FC_B].data, a.hidden);
        hidden.iter_mut().for_each(|v| *v = v.max(0.0));
        let logits = dense(&hidden, &self.params[HEAD_W].data, &self.params[HEAD_B].data, self.classes);
        (logits, ForwardCache { stem, relu1, pool1, relu2, pooled, hidden })
    }

    /// Backpropagates `dlogits` through the network, accumulating into `grads`.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &[f32], grads: &mut Gradients) {
        let dhidden = dense_backward(
            &cache.hidden,
            dlogits,
            &self.params[HEAD_W].data,
            grads,
            HEAD_W,
            HEAD_B,
        );
        let dz: Vec<f32> = dhidden
            .iter()
            .zip(&cache.hidden)
            .map(|(g, h)| if *h > 0.0 { *g } else { 0.0 })
            .collect();
        let dpooled = dense_backward(&cache.pooled, &dz, &self.params[FC_W].data, grads, FC_W, FC_B);

        let r2 = &cache.relu2;
        let area = (r2.h * r2.w) as f32;
        let mut dconv2 = Tensor3::zeros(r2.c, r2.h, r2.w);
        for c in 0..r2.c {
            let g = dpooled[c] / area;
            let base = c * r2.h * r2.w;
            for i in base..base + r2.h * r2.w {
                if r2.data[i] > 0.0 {
                    dconv2.data[i] = g;
                }
            }
        }
        let dpool1 = conv3x3_backward(&cache.pool1, &dconv2, &self.params[CONV2_W].data, grads, CONV2_W, CONV2_B, true)
            .expect("input gradient requested");

        let r1 = &cache.relu1;
        let mut dconv1 = Tensor3::zeros(r1.c, r1.h, r1.w);
        for c in 0..r1.c {
            for y in 0..dpool1.h {
                for x in 0..dpool1.w {
                    let g = dpool1.data[dpool1.idx(c, y, x)] / 4.0;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = r1.idx(c, 2 * y + dy, 2 * x + dx);
                        if r1.data[i] > 0.0 {
                            dconv1.data[i] = g;
                        }
                    }
                }
            }
        }
        conv3x3_backward(&cache.stem, &dconv1, &self.params[CONV1_W].data, grads, CONV1_W, CONV1_B, false);
    }

    pub fn stem_dims(&self) -> (usize, usize) {
        self.arch.stem_dims()
    }
}

const NET_MAGIC: &[u8; 4] = b"TSNW";
const NET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NetHeader {
    arch: Architecture,
    classes: usize,
    tensors: Vec<(String, Vec<usize>, ParamGroup)>,
}

impl Network {
    /// Weights blob: `TSNW`, `u32` version, `u32` header length, JSON
    /// header, little-endian `f32` tensor data.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = NetHeader {
            arch: self.arch,
            classes: self.classes,
            tensors: self.params.iter().map(|p| (p.name.clone(), p.shape.clone(), p.group)).collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + header.len() + 4 * self.params.iter().map(|p| p.data.len()).sum::<usize>());
        out.extend_from_slice(NET_MAGIC);
        out.extend_from_slice(&NET_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for p in &self.params {
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> crate::Result<Self> {
        let bad = |m: &str| crate::Error::Checkpoint(format!("weights blob: {m}"));
        if bytes.len() < 12 || &bytes[..4] != NET_MAGIC {
            return Err(bad("bad magic"));
        }
        if u32::from_le_bytes(bytes[4..8].try_into().unwrap()) != NET_VERSION {
            return Err(bad("unsupported version"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header: NetHeader = serde_json::from_slice(bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?)?;
        let mut offset = 12 + hlen;
        let mut params = Vec::new();
        for (name, shape, group) in header.tensors {
            let n: usize = shape.iter().product();
            let raw = bytes.get(offset..offset + 4 * n).ok_or_else(|| bad("truncated data"))?;
            offset += 4 * n;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            params.push(Param::new(name, shape, data, group));
        }
        if offset != bytes.len() || params.len() != 8 {
            return Err(bad("unexpected layout"));
        }
        Ok(Network::new(header.arch, header.classes, params))
    }
}

/// Softmax in f64 for a well-normalized probability vector.
pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&l| (l as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy loss and its gradient with respect to the logits.
pub fn cross_entropy(logits: &[f32], target: usize) -> (f64, Vec<f32>) {
    let probs = softmax(logits);
    let loss = -probs[target].max(f64::MIN_POSITIVE).ln();
    let grad = probs
        .iter()
        .enumerate()
        .map(|(i, p)| (*p - if i == target { 1.0 } else { 0.0 }) as f32)
        .collect();
    (loss, grad)
}

fn avg_pool(x: &Tensor3, k: usize) -> Tensor3 {
    let (h, w) = (x.h / k, x.w / k);
    let mut out = Tensor3::zeros(x.c, h, w);
    let scale = 1.0 / (k * k) as f32;
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for dy in 0..k {
                    let row = x.idx(c, y * k + dy, xx * k);
                    acc += x.data[row..row + k].iter().sum::<f32>();
                }
                let i = out.idx(c, y, xx);
                out.data[i] = acc * scale;
            }
        }
    }
    out
}

fn relu(mut t: Tensor3) -> Tensor3 {
    t.data.iter_mut().for_each(|v| *v = v.max(0.0));
    t
}

fn global_avg(x: &Tensor3) -> Vec<f32> {
    let area = (x.h * x.w) as f32;
    x.data.chunks(x.h * x.w).map(|ch| ch.iter().sum::<f32>() / area).collect()
}

fn dense(x: &[f32], w: &[f32], b: &[f32], out: usize) -> Vec<f32> {
    let n = x.len();
    (0..out)
        .map(|o| b[o] + w[o * n..(o + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum::<f32>())
        .collect()
}

fn dense_backward(x: &[f32], dy: &[f32], w: &[f32], grads: &mut Gradients, wi: usize, bi: usize) -> Vec<f32> {
    let n = x.len();
    let mut dx = vec![0.0; n];
    for (o, &g) in dy.iter().enumerate() {
        grads[bi][o] += g;
        let row = &w[o * n..(o + 1) * n];
        let grow = &mut grads[wi][o * n..(o + 1) * n];
        for j in 0..n {
            grow[j] += g * x[j];
            dx[j] += g * row[j];
        }
    }
    dx
}

/// 3x3 convolution, stride 1, zero padding 1. Weights are `[out][in][3][3]`.
fn conv3x3(x: &Tensor3, w: &[f32], b: &[f32], out_c: usize) -> Tensor3 {
    let mut out = Tensor3::zeros(out_c, x.h, x.w);
    let (h, wd) = (x.h as isize, x.w as isize);
    for o in 0..out_c {
        for y in 0..x.h {
            for xx in 0..x.w {
                let mut acc = b[o];
                for i in 0..x.c {
                    let wbase = (o * x.c + i) * 9;
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= wd {
                                continue;
                            }
                            acc += w[wbase + ky * 3 + kx] * x.data[x.idx(i, sy as usize, sx as usize)];
                        }
                    }
                }
                let idx = out.idx(o, y, xx);
                out.data[idx] = acc;
            }
        }
    }
    out
}

fn conv3x3_backward(
    x: &Tensor3,
    dy: &Tensor3,
    w: &[f32],
    grads: &mut Gradients,
    wi: usize,
    bi: usize,
    want_dx: bool,
) -> Option<Tensor3> {
    let mut dx = want_dx.then(|| Tensor3::zeros(x.c, x.h, x.w));
    let (h, wd) = (x.h as isize, x.w as isize);
    for o in 0..dy.c {
        for y in 0..dy.h {
            for xx in 0..dy.w {
                let g = dy.data[dy.idx(o, y, xx)];
                if g == 0.0 {
                    continue;
                }
                grads[bi][o] += g;
                for i in 0..x.c {
                    let wbase = (o * x.c + i) * 9;
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= wd {
                                continue;
                            }
                            let xi = x.idx(i, sy as usize, sx as usize);
                            grads[wi][wbase + ky * 3 + kx] += g * x.data[xi];
                            if let Some(dx) = dx.as_mut() {
                                dx.data[xi] += g * w[wbase + ky * 3 + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}
