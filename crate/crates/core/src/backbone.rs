//! The frozen convolutional trunk: named-layer codes and pixel gradients.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::{Array3, ArrayView3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use sha2::{Digest, Sha256};

use crate::code::Code;
use crate::error::{Error, Result};
use crate::image::{ImageBuffer, IMAGENET_MEAN_RGB};
use crate::layer::{LayerId, LayerKind, VGG19_BLOCK_DEPTHS, VGG19_BLOCK_WIDTHS};
use crate::nn::{self, Conv3x3};

/// Total number of convolutional filters in the VGG-19 trunk.
pub const VGG19_FILTER_COUNT: usize = 5504;

#[derive(Debug, Clone, PartialEq)]
enum Stage {
    Conv(Conv3x3),
    Relu,
    Pool,
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    id: LayerId,
    stage: Stage,
}

/// Immutable after construction; share it freely across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    name: String,
    layers: Vec<Layer>,
    mean: [f64; 3],
    checksum: Option<String>,
}

/// Channel plan `(layer, in, out)` for every VGG-19 conv, in forward order.
fn vgg19_conv_plan() -> Vec<(LayerId, usize, usize)> {
    let mut plan = Vec::with_capacity(16);
    let mut in_ch = 3;
    for (b, (&depth, &width)) in VGG19_BLOCK_DEPTHS.iter().zip(&VGG19_BLOCK_WIDTHS).enumerate() {
        for i in 1..=depth {
            plan.push((LayerId::conv(b + 1, i).unwrap(), in_ch, width));
            in_ch = width;
        }
    }
    plan
}

/// Key prefix of layer `index` in a torchvision-style `features.N` state dict.
fn feature_key(index: usize) -> String {
    format!("features.{index}")
}

fn he_conv(rng: &mut ChaCha8Rng, out_ch: usize, in_ch: usize, bias: f64) -> Conv3x3 {
    let std = (2.0 / (in_ch * 9) as f64).sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    let w = (0..out_ch * in_ch * 9).map(|_| normal.sample(rng)).collect();
    Conv3x3::new(out_ch, in_ch, w, vec![bias; out_ch])
}

/// 3×3 conv whose centre taps form a random orthogonal matrix and whose
/// remaining taps are `N(0, off²)`: a well-conditioned map of its input.
fn near_isometric_conv(rng: &mut ChaCha8Rng, n: usize, off: f64, bias: f64) -> Conv3x3 {
    let unit = Normal::new(0.0, 1.0).unwrap();
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
    while q.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| unit.sample(rng)).collect();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            q.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    let small = Normal::new(0.0, off).unwrap();
    let mut w = Vec::with_capacity(n * n * 9);
    for row in &q {
        for &centre in row {
            for tap in 0..9 {
                w.push(if tap == 4 { centre } else { small.sample(rng) });
            }
        }
    }
    Conv3x3::new(n, n, w, vec![bias; n])
}

fn tensor_to_f64(name: &str, view: &TensorView<'_>) -> Result<Vec<f64>> {
    let data = view.data();
    match view.dtype() {
        Dtype::F32 => Ok(data
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect()),
        Dtype::F64 => Ok(data
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect()),
        other => Err(Error::UnsupportedDtype {
            name: name.to_string(),
            dtype: format!("{other:?}"),
        }),
    }
}

/// Hex SHA-256 of a file.
pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(sha256_hex(&bytes))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Fails unless the file's SHA-256 equals `expected` (case-insensitive hex).
pub fn verify_checksum(path: impl AsRef<Path>, expected: &str) -> Result<String> {
    let actual = sha256_file(path)?;
    if !actual.eq_ignore_ascii_case(expected.trim()) {
        return Err(Error::ChecksumMismatch {
            expected: expected.trim().to_lowercase(),
            actual,
        });
    }
    Ok(actual)
}

impl Backbone {
    fn from_convs(name: &str, convs: Vec<(LayerId, Conv3x3)>, pools_after: &[LayerId]) -> Self {
        let mut layers = Vec::new();
        for (id, conv) in convs {
            let relu = LayerId::relu(id.block(), id.index()).unwrap();
            layers.push(Layer {
                id,
                stage: Stage::Conv(conv),
            });
            layers.push(Layer {
                id: relu,
                stage: Stage::Relu,
            });
            if pools_after.contains(&relu) {
                layers.push(Layer {
                    id: LayerId::pool(id.block()).unwrap(),
                    stage: Stage::Pool,
                });
            }
        }
        Self {
            name: name.to_string(),
            layers,
            mean: IMAGENET_MEAN_RGB,
            checksum: None,
        }
    }

    fn vgg19_from_convs(convs: Vec<(LayerId, Conv3x3)>) -> Self {
        let pools: Vec<LayerId> = VGG19_BLOCK_DEPTHS
            .iter()
            .enumerate()
            .map(|(b, &d)| LayerId::relu(b + 1, d).unwrap())
            .collect();
        Self::from_convs("vgg19", convs, &pools)
    }

    /// Loads the VGG-19 trunk from a safetensors file laid out like the
    /// torchvision state dict (`features.N.weight` / `features.N.bias`).
    ///
    /// Classifier tensors, if present, are ignored. Weights are expected to
    /// take RGB input on a 0..255 scale with the ImageNet mean removed.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.is_file() {
            return Err(Error::MissingWeights(path.to_path_buf()));
        }
        let bytes = fs::read(path)?;
        let tensors = SafeTensors::deserialize(&bytes)?;
        let all = LayerId::vgg19_all();
        let mut convs = Vec::with_capacity(16);
        for (id, in_ch, out_ch) in vgg19_conv_plan() {
            let index = all.iter().position(|l| *l == id).unwrap();
            let fetch = |suffix: &str, expected: Vec<usize>| -> Result<Vec<f64>> {
                let key = format!("{}.{}", feature_key(index), suffix);
                let view = tensors.tensor(&key).map_err(|_| Error::MissingTensor(key.clone()))?;
                if view.shape() != expected.as_slice() {
                    return Err(Error::ShapeMismatch {
                        what: format!("{key} ({id})"),
                        expected,
                        actual: view.shape().to_vec(),
                    });
                }
                tensor_to_f64(&key, &view)
            };
            let w = fetch("weight", vec![out_ch, in_ch, 3, 3])?;
            let b = fetch("bias", vec![out_ch])?;
            convs.push((id, Conv3x3::new(out_ch, in_ch, w, b)));
        }
        let mut backbone = Self::vgg19_from_convs(convs);
        backbone.checksum = Some(sha256_hex(&bytes));
        Ok(backbone)
    }

    /// A VGG-19 trunk with He-initialised weights derived from `seed`.
    ///
    /// Same architecture and interface as the pretrained network; useful
    /// where only structure matters or no weights are available.
    pub fn vgg19_synthetic(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = vgg19_conv_plan()
            .into_iter()
            .map(|(id, i, o)| (id, he_conv(&mut rng, o, i, 0.0)))
            .collect();
        Self::vgg19_from_convs(convs)
    }

    /// Writes the conv parameters in the layout [`Backbone::load`] reads.
    pub fn save_safetensors(&self, path: impl AsRef<Path>) -> Result<()> {
        let all = LayerId::vgg19_all();
        let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for layer in &self.layers {
            if let Stage::Conv(conv) = &layer.stage {
                let index = all.iter().position(|l| *l == layer.id).unwrap();
                let to_bytes = |v: &mut dyn Iterator<Item = &f64>| -> Vec<u8> {
                    v.flat_map(|x| (*x as f32).to_le_bytes()).collect()
                };
                buffers.push((
                    format!("{}.weight", feature_key(index)),
                    vec![conv.out_channels(), conv.in_channels(), 3, 3],
                    to_bytes(&mut conv.weight().iter()),
                ));
                buffers.push((
                    format!("{}.bias", feature_key(index)),
                    vec![conv.out_channels()],
                    to_bytes(&mut conv.bias().iter()),
                ));
            }
        }
        let views = buffers
            .iter()
            .map(|(k, shape, data)| Ok((k.clone(), TensorView::new(Dtype::F32, shape.clone(), data)?)))
            .collect::<Result<Vec<_>>>()?;
        safetensors::serialize_to_file(views, None, path.as_ref())?;
        Ok(())
    }

    /// Small conv+relu network with one pool, for exhaustive numeric checks.
    ///
    /// Layers: `conv1_1` (3→3), `relu1_1`, `pool1`, `conv2_1` (3→6),
    /// `relu2_1`, `conv3_1` (6→1), `relu3_1`. The last layer has a single
    /// channel. `conv1_1` is square, well conditioned (orthogonal centre
    /// taps, small neighbours) and strongly biased, so for unit-scale images
    /// `relu1_1` is an invertible map of the pixels, any positive `relu1_1`
    /// code is reachable, and descent towards it rarely drives units dead.
    pub fn toy(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = vec![
            (LayerId::conv(1, 1).unwrap(), near_isometric_conv(&mut rng, 3, 0.1, 4.0)),
            (LayerId::conv(2, 1).unwrap(), he_conv(&mut rng, 6, 3, 0.05)),
            (LayerId::conv(3, 1).unwrap(), he_conv(&mut rng, 1, 6, 0.2)),
        ];
        Self::from_convs("toy", convs, &[LayerId::relu(1, 1).unwrap()])
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// SHA-256 of the weights file, when loaded from disk.
    pub fn checksum(&self) -> Option<&str> {
        self.checksum.as_deref()
    }

    pub fn preprocess_mean(&self) -> [f64; 3] {
        self.mean
    }

    pub fn layer_ids(&self) -> Vec<LayerId> {
        self.layers.iter().map(|l| l.id).collect()
    }

    pub fn relu_layers(&self) -> Vec<LayerId> {
        self.layers.iter().filter(|l| l.id.is_relu()).map(|l| l.id).collect()
    }

    pub fn count(&self, kind: LayerKind) -> usize {
        self.layers.iter().filter(|l| l.id.kind() == kind).count()
    }

    pub fn filter_count(&self) -> usize {
        self.convs().map(|c| c.out_channels()).sum()
    }

    pub fn kernel_sizes(&self) -> Vec<(usize, usize)> {
        self.convs().map(|c| c.kernel_size()).collect()
    }

    fn convs(&self) -> impl Iterator<Item = &Conv3x3> {
        self.layers.iter().filter_map(|l| match &l.stage {
            Stage::Conv(c) => Some(c),
            _ => None,
        })
    }

    fn position(&self, layer: LayerId) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.id == layer)
            .ok_or_else(|| Error::LayerNotInBackbone {
                layer: layer.to_string(),
            })
    }

    pub fn contains(&self, layer: LayerId) -> bool {
        self.position(layer).is_ok()
    }

    /// Channel count of a layer's output.
    pub fn channels(&self, layer: LayerId) -> Result<usize> {
        let pos = self.position(layer)?;
        Ok(self.layers[..=pos]
            .iter()
            .rev()
            .find_map(|l| match &l.stage {
                Stage::Conv(c) => Some(c.out_channels()),
                _ => None,
            })
            .unwrap_or(3))
    }

    fn pools_through(&self, pos: usize) -> usize {
        self.layers[..=pos].iter().filter(|l| l.stage == Stage::Pool).count()
    }

    /// Smallest input side that every pooling stage up to `layer` can halve
    /// without running out of pixels.
    pub fn min_input_side(&self, layer: LayerId) -> Result<usize> {
        Ok(1 << self.pools_through(self.position(layer)?))
    }

    /// `(C, M, N)` of a layer's code for an `height × width` input.
    pub fn output_shape(&self, layer: LayerId, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        let pos = self.position(layer)?;
        let mut h = height;
        let mut w = width;
        for _ in 0..self.pools_through(pos) {
            h = nn::pooled_extent(h);
            w = nn::pooled_extent(w);
        }
        Ok((self.channels(layer)?, h, w))
    }

    fn check_request(&self, layers: &[LayerId], height: usize, width: usize) -> Result<usize> {
        if layers.is_empty() {
            return Err(Error::EmptyRequest);
        }
        let mut deepest = 0;
        for &layer in layers {
            let pos = self.position(layer)?;
            let min = self.min_input_side(layer)?;
            if height < min || width < min {
                return Err(Error::ImageTooSmall {
                    layer: layer.to_string(),
                    height,
                    width,
                    min,
                });
            }
            deepest = deepest.max(pos);
        }
        Ok(deepest)
    }

    fn check_input(&self, x: &ArrayView3<f64>) -> Result<()> {
        let (c, h, w) = x.dim();
        if c != 3 {
            return Err(Error::ShapeMismatch {
                what: "input image".into(),
                expected: vec![3, h, w],
                actual: vec![c, h, w],
            });
        }
        Ok(())
    }

    /// Runs stages `0..=last`, keeping every output.
    fn forward_all(&self, x: ArrayView3<f64>, last: usize) -> Vec<Array3<f64>> {
        let mut outs: Vec<Array3<f64>> = Vec::with_capacity(last + 1);
        for (i, layer) in self.layers[..=last].iter().enumerate() {
            let input = if i == 0 { x.view() } else { outs[i - 1].view() };
            let out = match &layer.stage {
                Stage::Conv(c) => c.forward(input),
                Stage::Relu => nn::relu(input),
                Stage::Pool => nn::max_pool(input),
            };
            outs.push(out);
        }
        outs
    }

    /// Codes for every requested layer from a single forward pass.
    pub fn extract_codes(&self, img: &ImageBuffer, layers: &[LayerId]) -> Result<BTreeMap<LayerId, Code>> {
        self.extract_codes_tagged(img, layers, "image")
    }

    pub fn extract_codes_tagged(
        &self,
        img: &ImageBuffer,
        layers: &[LayerId],
        source: &str,
    ) -> Result<BTreeMap<LayerId, Code>> {
        let x = img.pixels().view();
        self.check_input(&x)?;
        let deepest = self.check_request(layers, img.height(), img.width())?;
        let mut outs = self.forward_all(x, deepest);
        let mut codes = BTreeMap::new();
        for layer in layers.iter().copied().collect::<BTreeSet<_>>() {
            let pos = self.position(layer)?;
            codes.insert(layer, Code::new(layer, std::mem::take(&mut outs[pos]), source));
        }
        Ok(codes)
    }

    /// Loss and pixel gradient for a scalar function of layer codes.
    ///
    /// `f` receives the codes of `layers` and returns the loss together with
    /// its gradient with respect to each of those codes. Network weights are
    /// frozen; only the gradient with respect to `x` is produced.
    pub fn value_and_grad<F>(&self, x: ArrayView3<f64>, layers: &[LayerId], f: F) -> Result<(f64, Array3<f64>)>
    where
        F: FnOnce(&BTreeMap<LayerId, ArrayView3<f64>>) -> Result<(f64, BTreeMap<LayerId, Array3<f64>>)>,
    {
        self.check_input(&x)?;
        let (_, h, w) = x.dim();
        let deepest = self.check_request(layers, h, w)?;
        let outs = self.forward_all(x.view(), deepest);
        let mut views = BTreeMap::new();
        for &layer in layers {
            views.insert(layer, outs[self.position(layer)?].view());
        }
        let (loss, mut grads) = f(&views)?;
        drop(views);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss);
        }

        let mut grad: Option<Array3<f64>> = None;
        for pos in (0..=deepest).rev() {
            let layer = &self.layers[pos];
            if let Some(g) = grads.remove(&layer.id) {
                if g.dim() != outs[pos].dim() {
                    return Err(Error::ShapeMismatch {
                        what: format!("gradient at {}", layer.id),
                        expected: outs[pos].shape().to_vec(),
                        actual: g.shape().to_vec(),
                    });
                }
                grad = Some(match grad {
                    Some(acc) => acc + g,
                    None => g,
                });
            }
            let Some(g) = grad.take() else { continue };
            let input = if pos == 0 { x.view() } else { outs[pos - 1].view() };
            grad = Some(match &layer.stage {
                Stage::Conv(c) => c.backward_input(g.view()),
                Stage::Relu => nn::relu_backward(outs[pos].view(), g.view()),
                Stage::Pool => nn::max_pool_backward(input, g.view()),
            });
        }
        let grad = grad.unwrap_or_else(|| Array3::zeros(x.dim()));
        Ok((loss, grad))
    }
}
