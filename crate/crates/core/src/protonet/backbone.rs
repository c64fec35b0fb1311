//! Embedding backbones: the four-block conv net trained from scratch and the
//! ResNet18 trunk (classifier removed, globally pooled).

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    BasicBlock, BatchNorm2d, Conv2d, GlobalAvgPool, Layer, MaxPool2d, Param, Relu, Slot, Tensor,
};
use super::ProtoError;
use crate::dataset::{GlyphImage, CHANNELS, IMAGE_LEN, IMAGE_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BackboneKind {
    /// 4 x [conv3x3-64, BN, ReLU, maxpool-2], D = 64.
    #[serde(rename = "conv4", alias = "conv4-scratch")]
    Conv4,
    /// ResNet18 without its classifier, D = 512.
    #[serde(
        rename = "resnet18",
        alias = "resnet18-trunk",
        alias = "pretrained-resnet18-trunk"
    )]
    ResNet18,
}

impl BackboneKind {
    pub fn embed_dim(self) -> usize {
        match self {
            BackboneKind::Conv4 => 64,
            BackboneKind::ResNet18 => 512,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BackboneKind::Conv4 => "conv4",
            BackboneKind::ResNet18 => "resnet18",
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneKind {
    type Err = ProtoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "conv4" | "conv4-scratch" => Ok(BackboneKind::Conv4),
            "resnet18" | "resnet18-trunk" | "pretrained-resnet18-trunk" => {
                Ok(BackboneKind::ResNet18)
            }
            other => Err(ProtoError::UnknownBackbone(other.to_string())),
        }
    }
}

/// Anything that maps images to embedding rows.
pub trait Embedder {
    fn embed_dim(&self) -> usize;

    /// One row per image, in order.
    fn embed(&self, images: &[&GlyphImage]) -> Result<Array2<f64>, ProtoError>;
}

/// Stacks images into a `[n, 3, 32, 32]` batch.
pub fn batch_tensor(images: &[&GlyphImage]) -> Result<Tensor, ProtoError> {
    let mut data = Vec::with_capacity(images.len() * IMAGE_LEN);
    for img in images {
        if img.pixels.len() != IMAGE_LEN {
            return Err(ProtoError::Shape(format!(
                "image {} has {} values, expected {IMAGE_LEN}",
                img.source,
                img.pixels.len()
            )));
        }
        data.extend_from_slice(&img.pixels);
    }
    Ok(Tensor::from_vec(
        [images.len(), CHANNELS, IMAGE_SIZE, IMAGE_SIZE],
        data,
    ))
}

/// A sequential backbone with training-mode forward/backward and pure
/// inference.
#[derive(Debug, Clone)]
pub struct Network {
    kind: BackboneKind,
    layers: Vec<(String, Layer)>,
}

const INFER_CHUNK: usize = 64;

impl Network {
    pub fn new(kind: BackboneKind, seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = match kind {
            BackboneKind::Conv4 => {
                let mut layers = Vec::new();
                let mut cin = CHANNELS;
                for i in 0..4 {
                    layers.push((
                        format!("block{i}.conv"),
                        Layer::Conv(Conv2d::new(cin, 64, 3, 1, 1, &mut rng)),
                    ));
                    layers.push((
                        format!("block{i}.bn"),
                        Layer::BatchNorm(BatchNorm2d::new(64)),
                    ));
                    layers.push((format!("block{i}.relu"), Layer::Relu(Relu::default())));
                    layers.push((
                        format!("block{i}.pool"),
                        Layer::MaxPool(MaxPool2d::new(2, 2, 0)),
                    ));
                    cin = 64;
                }
                layers.push((
                    "avgpool".into(),
                    Layer::GlobalAvgPool(GlobalAvgPool::default()),
                ));
                layers
            }
            BackboneKind::ResNet18 => {
                let mut layers = vec![
                    (
                        "conv1".to_string(),
                        Layer::Conv(Conv2d::new(CHANNELS, 64, 7, 2, 3, &mut rng)),
                    ),
                    ("bn1".to_string(), Layer::BatchNorm(BatchNorm2d::new(64))),
                    ("relu".to_string(), Layer::Relu(Relu::default())),
                    (
                        "maxpool".to_string(),
                        Layer::MaxPool(MaxPool2d::new(3, 2, 1)),
                    ),
                ];
                let mut cin = 64;
                for (stage, cout) in [64, 128, 256, 512].into_iter().enumerate() {
                    let stride = if stage == 0 { 1 } else { 2 };
                    layers.push((
                        format!("layer{}.0", stage + 1),
                        Layer::Block(Box::new(BasicBlock::new(cin, cout, stride, &mut rng))),
                    ));
                    layers.push((
                        format!("layer{}.1", stage + 1),
                        Layer::Block(Box::new(BasicBlock::new(cout, cout, 1, &mut rng))),
                    ));
                    cin = cout;
                }
                layers.push((
                    "avgpool".into(),
                    Layer::GlobalAvgPool(GlobalAvgPool::default()),
                ));
                layers
            }
        };
        Network { kind, layers }
    }

    pub fn kind(&self) -> BackboneKind {
        self.kind
    }

    pub fn embed_dim(&self) -> usize {
        self.kind.embed_dim()
    }

    fn check_input(&self, x: &Tensor) -> Result<(), ProtoError> {
        let [_, c, h, w] = x.shape;
        if (c, h, w) != (CHANNELS, IMAGE_SIZE, IMAGE_SIZE) {
            return Err(ProtoError::Shape(format!(
                "expected [n, {CHANNELS}, {IMAGE_SIZE}, {IMAGE_SIZE}] input, got {:?}",
                x.shape
            )));
        }
        Ok(())
    }

    fn to_matrix(&self, out: Tensor) -> Array2<f32> {
        let n = out.batch();
        Array2::from_shape_vec((n, self.embed_dim()), out.data).expect("pooled output is n x D")
    }

    /// Training-mode forward; call [`backward`](Self::backward) next.
    pub fn forward_train(&mut self, x: Tensor) -> Result<Array2<f32>, ProtoError> {
        self.check_input(&x)?;
        if x.batch() == 0 {
            return Ok(Array2::zeros((0, self.embed_dim())));
        }
        let mut h = x;
        for (_, layer) in &mut self.layers {
            h = layer.forward(h);
        }
        Ok(self.to_matrix(h))
    }

    /// Accumulates parameter gradients given dLoss/d(embeddings).
    pub fn backward(&mut self, grad: ArrayView2<f32>) {
        let n = grad.nrows();
        let mut g = Tensor::from_vec([n, self.embed_dim(), 1, 1], grad.iter().copied().collect());
        for (_, layer) in self.layers.iter_mut().rev() {
            g = layer.backward(g);
        }
    }

    /// Inference-mode embeddings (batch-norm running statistics). Pure.
    pub fn embed_tensor(&self, x: &Tensor) -> Result<Array2<f32>, ProtoError> {
        self.check_input(x)?;
        let n = x.batch();
        let mut out = Array2::<f32>::zeros((n, self.embed_dim()));
        for start in (0..n).step_by(INFER_CHUNK) {
            let end = (start + INFER_CHUNK).min(n);
            let mut h = x.slice_batch(start, end);
            for (_, layer) in &self.layers {
                h = layer.infer(&h);
            }
            out.slice_mut(ndarray::s![start..end, ..])
                .assign(&self.to_matrix(h));
        }
        Ok(out)
    }

    /// Visits every parameter and buffer in a fixed order.
    pub fn visit(&mut self, f: &mut dyn FnMut(String, Slot<'_>)) {
        for (name, layer) in &mut self.layers {
            layer.visit(name, f);
        }
    }

    pub fn for_each_param(&mut self, mut f: impl FnMut(&mut Param)) {
        self.visit(&mut |_, slot| {
            if let Slot::Param(p) = slot {
                f(p)
            }
        });
    }

    pub fn zero_grad(&mut self) {
        self.for_each_param(Param::zero_grad);
    }

    pub fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.for_each_param(|p| n += p.value.len());
        n
    }

    /// `(name, shape, values, is_param)` for every stored tensor.
    pub fn state(&mut self) -> Vec<(String, Vec<usize>, Vec<f32>, bool)> {
        let mut out = Vec::new();
        self.visit(&mut |name, slot| match slot {
            Slot::Param(p) => out.push((name, p.shape.clone(), p.value.clone(), true)),
            Slot::Buffer(b) => out.push((name, vec![b.len()], b.clone(), false)),
        });
        out
    }

    /// Hash of every parameter and buffer bit pattern.
    pub fn param_digest(&mut self) -> u64 {
        let mut h = DefaultHasher::new();
        self.visit(&mut |name, slot| {
            name.hash(&mut h);
            let values: &[f32] = match &slot {
                Slot::Param(p) => &p.value,
                Slot::Buffer(b) => b,
            };
            for v in values {
                v.to_bits().hash(&mut h);
            }
        });
        h.finish()
    }

    /// Overwrites tensors by name. Every tensor of the network must be
    /// supplied with a matching element count; extra entries are ignored.
    pub fn load_named<F>(&mut self, mut lookup: F) -> Result<(), ProtoError>
    where
        F: FnMut(&str) -> Option<Result<Vec<f32>, ProtoError>>,
    {
        let mut error = None;
        self.visit(&mut |name, slot| {
            if error.is_some() {
                return;
            }
            let target: &mut Vec<f32> = match slot {
                Slot::Param(p) => &mut p.value,
                Slot::Buffer(b) => b,
            };
            match lookup(&name) {
                None => error = Some(ProtoError::Weights(format!("missing tensor {name}"))),
                Some(Err(e)) => error = Some(e),
                Some(Ok(values)) if values.len() != target.len() => {
                    error = Some(ProtoError::Weights(format!(
                        "tensor {name} has {} values, expected {}",
                        values.len(),
                        target.len()
                    )))
                }
                Some(Ok(values)) => *target = values,
            }
        });
        error.map_or(Ok(()), Err)
    }

    /// Loads torchvision-named ResNet18 weights from a safetensors file
    /// (`fc.*` and `num_batches_tracked` are ignored).
    pub fn load_safetensors(&mut self, path: &Path) -> Result<(), ProtoError> {
        let bytes = std::fs::read(path)
            .map_err(|e| ProtoError::Weights(format!("{}: {e}", path.display())))?;
        let tensors = safetensors::SafeTensors::deserialize(&bytes)
            .map_err(|e| ProtoError::Weights(format!("{}: {e}", path.display())))?;
        self.load_named(|name| {
            let view = tensors.tensor(name).ok()?;
            let data = view.data();
            Some(match view.dtype() {
                safetensors::Dtype::F32 => Ok(data
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect()),
                safetensors::Dtype::F64 => Ok(data
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")) as f32)
                    .collect()),
                other => Err(ProtoError::Weights(format!(
                    "tensor {name}: unsupported dtype {other:?}"
                ))),
            })
        })
    }
}

impl Embedder for Network {
    fn embed_dim(&self) -> usize {
        Network::embed_dim(self)
    }

    fn embed(&self, images: &[&GlyphImage]) -> Result<Array2<f64>, ProtoError> {
        let x = batch_tensor(images)?;
        Ok(self.embed_tensor(&x)?.mapv(f64::from))
    }
}
