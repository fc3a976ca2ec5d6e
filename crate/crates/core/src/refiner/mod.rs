//! Inference for the spatial-basis refinement U-Net.
//!
//! Per level: `[conv3x3 -> batch norm -> ReLU] x 2`, then 2x2 max pooling
//! on the way down. On the way up a 2x2 stride-2 transposed convolution is
//! concatenated after the skip tensor and followed by the same double
//! convolution. A 1x1 convolution maps back to the input channel count.
//! Dropout is the identity at inference.

pub mod arch;
pub mod layers;

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array3, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::subspace::PreparedBasis;
use crate::tensor_io::{DType, Tensor, TensorArchive, TensorIoError};

pub use arch::{ArchSpec, LayerKind, LayerSpec, ParamCount, ParamRole, ParamSpec, ARCH_ENTRY};
pub use layers::{Activation, BN_EPS};

/// Parameter count of the reference network, for comparison with
/// [`ArchSpec::parameter_count`].
pub const REFERENCE_PARAMETER_COUNT: usize = 31_036_800;

#[derive(Debug, Error)]
pub enum RefinerError {
    #[error(transparent)]
    Io(#[from] TensorIoError),
    #[error("weight archive has no `{ARCH_ENTRY}` descriptor")]
    MissingDescriptor,
    #[error("unsupported architecture: {0}")]
    UnknownArchitecture(String),
    #[error("layer `{layer}`: missing tensor `{name}`")]
    MissingTensor { layer: String, name: String },
    #[error("layer `{layer}`: tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        layer: String,
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("layer `{layer}`: tensor `{name}` must be real")]
    NotReal { layer: String, name: String },
    #[error("layer `{layer}`: running variance + eps is not positive in channel {channel}")]
    InvalidBatchNorm { layer: String, channel: usize },
    #[error("input {found:?} does not fit the network ({reason})")]
    InputMismatch { found: (usize, usize, usize), reason: String },
    #[error("basis has {basis} channels but the weights expect {weights}")]
    ChannelMismatch { basis: usize, weights: usize },
}

fn layer_of(name: &str) -> String {
    name.rsplit_once('.').map_or(name, |(l, _)| l).to_string()
}

/// Validated network weights.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights {
    arch: ArchSpec,
    tensors: HashMap<String, Tensor>,
}

impl NetworkWeights {
    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    /// Trainable parameters and buffers actually stored.
    pub fn parameter_count(&self) -> ParamCount {
        let mut c = ParamCount { trainable: 0, buffers: 0 };
        for p in self.arch.params() {
            let n = self.tensors[&p.name].len();
            match p.role {
                ParamRole::Trainable => c.trainable += n,
                ParamRole::Buffer => c.buffers += n,
            }
        }
        c
    }

    pub fn from_archive(archive: &TensorArchive) -> Result<Self, RefinerError> {
        let desc = archive.get(ARCH_ENTRY).ok_or(RefinerError::MissingDescriptor)?;
        let desc: Vec<f64> = desc
            .to_real()
            .map_err(|_| RefinerError::UnknownArchitecture("descriptor must be real".into()))?
            .iter()
            .copied()
            .collect();
        let arch = ArchSpec::from_descriptor(&desc).map_err(RefinerError::UnknownArchitecture)?;
        let specs = arch.params();
        let mut tensors = HashMap::with_capacity(specs.len());
        for p in &specs {
            let layer = layer_of(&p.name);
            let t = archive.get(&p.name).ok_or_else(|| RefinerError::MissingTensor {
                layer: layer.clone(),
                name: p.name.clone(),
            })?;
            if t.dtype() != DType::Real32 {
                return Err(RefinerError::NotReal { layer, name: p.name.clone() });
            }
            if t.dims() != p.shape.as_slice() {
                return Err(RefinerError::ShapeMismatch {
                    layer,
                    name: p.name.clone(),
                    expected: p.shape.clone(),
                    found: t.dims().to_vec(),
                });
            }
            tensors.insert(p.name.clone(), t.clone());
        }
        for t in archive.entries() {
            if t.name() != ARCH_ENTRY && !tensors.contains_key(t.name()) {
                log::warn!("ignoring unexpected weight tensor `{}`", t.name());
            }
        }
        let w = Self { arch, tensors };
        for (j, block) in w.conv_blocks() {
            let layer = format!("{block}.bn{j}");
            let var = w.get(&format!("{layer}.running_var"));
            if let Some(channel) = var.iter().position(|&v| !(v + BN_EPS > 0.0)) {
                return Err(RefinerError::InvalidBatchNorm { layer, channel });
            }
        }
        log::info!("loaded U-Net weights: {}", w.parameter_count());
        Ok(w)
    }

    /// Build from `(name, values)` pairs; shapes come from the architecture.
    pub fn from_values(arch: ArchSpec, mut values: impl FnMut(&ParamSpec) -> Vec<f64>) -> Self {
        let tensors = arch
            .params()
            .into_iter()
            .map(|p| {
                let v = values(&p);
                assert_eq!(v.len(), p.len(), "{}", p.name);
                let data = v.iter().map(|&x| x as f32).collect();
                let t = Tensor::new(p.name.clone(), p.shape.clone(), DType::Real32, data).expect("shape");
                (p.name, t)
            })
            .collect();
        Self { arch, tensors }
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut entries = vec![Tensor::from_vec(ARCH_ENTRY, &self.arch.descriptor())];
        for p in self.arch.params() {
            entries.push(self.tensors[&p.name].clone());
        }
        TensorArchive::from_entries(entries).expect("names unique by construction")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RefinerError> {
        Ok(self.to_archive().write(path)?)
    }

    fn get(&self, name: &str) -> Vec<f64> {
        self.tensors[name].raw().iter().map(|&v| v as f64).collect()
    }

    fn conv_blocks(&self) -> Vec<(usize, String)> {
        let mut v = Vec::new();
        for b in self.block_order() {
            v.push((1, b.clone()));
            v.push((2, b));
        }
        v
    }

    fn block_order(&self) -> Vec<String> {
        let l = self.arch.levels;
        (0..l)
            .map(|i| format!("enc{i}"))
            .chain(std::iter::once("bottleneck".to_string()))
            .chain((0..l).rev().map(|i| format!("dec{i}")))
            .collect()
    }

    /// All-zero network.
    pub fn zeros(arch: ArchSpec) -> Self {
        Self::from_values(arch, |p| {
            if p.name.ends_with("running_var") {
                vec![1.0; p.len()]
            } else {
                vec![0.0; p.len()]
            }
        })
    }

    /// Random weights with fan-in scaling, for tests and benchmarks.
    pub fn random(arch: ArchSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::from_values(arch, |p| {
            let n = p.len();
            let field = p.name.rsplit('.').next().unwrap_or("");
            let fan_in = match p.shape.as_slice() {
                [_, ci, kh, kw] if !p.name.contains(".up.") => ci * kh * kw,
                [ci, _, kh, kw] => ci * kh * kw,
                _ => 1,
            };
            let scale = (2.0 / fan_in as f64).sqrt();
            (0..n)
                .map(|_| {
                    let u: f64 = rng.random::<f64>() - 0.5;
                    if p.shape.len() == 4 {
                        u * 2.0 * scale * 3f64.sqrt()
                    } else {
                        match field {
                            "weight" => 1.0 + 0.5 * u,
                            "running_var" => 1.0 + 0.5 * u,
                            _ => 0.2 * u,
                        }
                    }
                })
                .collect()
        })
    }

    /// Weights for which `forward(x) == x` up to rounding.
    ///
    /// The first level carries `ReLU(x)` and `ReLU(-x)` in paired channels
    /// through the skip connection; the output layer takes their
    /// difference. Deeper levels are zero. Needs `base >= 2 * in` and
    /// `in == out`.
    pub fn identity(arch: ArchSpec) -> Self {
        assert_eq!(arch.in_channels, arch.out_channels, "identity needs in == out");
        assert!(arch.base >= 2 * arch.in_channels, "identity needs base >= 2 * in");
        let n = arch.in_channels;
        let base = arch.base;
        Self::from_values(arch, |p| {
            let mut v = vec![0.0; p.len()];
            let field = p.name.rsplit('.').next().unwrap_or("");
            let level0 = p.name.starts_with("enc0.") || p.name.starts_with("dec0.");
            match (p.name.as_str(), field) {
                (_, "running_var") => v.fill(1.0 - BN_EPS),
                (name, "weight") if level0 && name.contains(".bn") => v.fill(1.0),
                (name, "weight") if level0 && name.contains(".conv") => {
                    let cin = p.shape[1];
                    let center = |o: usize, i: usize| (o * cin + i) * 9 + 4;
                    if name == "enc0.conv1.weight" {
                        for j in 0..n {
                            v[center(2 * j, j)] = 1.0;
                            v[center(2 * j + 1, j)] = -1.0;
                        }
                    } else {
                        // identity on the paired channels; dec0.conv1 reads the skip half
                        for c in 0..2 * n {
                            v[center(c, c)] = 1.0;
                        }
                    }
                }
                ("out.weight", _) => {
                    for j in 0..n {
                        v[j * base + 2 * j] = 1.0;
                        v[j * base + 2 * j + 1] = -1.0;
                    }
                }
                _ => {}
            }
            v
        })
    }
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<NetworkWeights, RefinerError> {
    NetworkWeights::from_archive(&TensorArchive::read(path)?)
}

fn check_input(x: &ArrayView3<f64>, arch: &ArchSpec) -> Result<(), RefinerError> {
    let (c, h, w) = x.dim();
    let err = |reason: String| Err(RefinerError::InputMismatch { found: (c, h, w), reason });
    if c != arch.in_channels {
        return err(format!("expected {} channels", arch.in_channels));
    }
    let d = arch.divisor();
    if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
        return err(format!("extents must be positive multiples of {d}"));
    }
    Ok(())
}

fn double_conv(x: &ArrayView3<f64>, w: &NetworkWeights, block: &str, c: usize) -> Result<Activation, RefinerError> {
    let mut y = x.to_owned();
    for j in 1..=2 {
        y = layers::conv2d(&y.view(), &w.get(&format!("{block}.conv{j}.weight")), c, 3, None);
        let bn = format!("{block}.bn{j}");
        let g = |f: &str| w.get(&format!("{bn}.{f}"));
        layers::batchnorm(&mut y, &g("weight"), &g("bias"), &g("running_mean"), &g("running_var"), BN_EPS)
            .map_err(|channel| RefinerError::InvalidBatchNorm { layer: bn.clone(), channel })?;
        layers::relu(&mut y);
    }
    Ok(y)
}

/// Full forward pass, also returning the output of every block:
/// `enc0..`, `bottleneck`, `dec{levels-1}..dec0`, `output`.
pub fn forward_traced(x: &ArrayView3<f64>, w: &NetworkWeights) -> Result<Vec<(String, Activation)>, RefinerError> {
    let arch = *w.arch();
    check_input(x, &arch)?;
    let (_, h0, w0) = x.dim();
    let mut trace = Vec::new();
    let mut skips = Vec::with_capacity(arch.levels);
    let mut cur = x.to_owned();
    for i in 0..arch.levels {
        let y = double_conv(&cur.view(), w, &format!("enc{i}"), arch.channels(i))?;
        debug_assert_eq!(y.dim(), (arch.channels(i), h0 >> i, w0 >> i));
        cur = layers::maxpool2(&y.view());
        trace.push((format!("enc{i}"), y.clone()));
        skips.push(y);
    }
    cur = double_conv(&cur.view(), w, "bottleneck", arch.bottleneck_channels())?;
    trace.push(("bottleneck".into(), cur.clone()));
    for i in (0..arch.levels).rev() {
        let c = arch.channels(i);
        let up = layers::conv_transpose2(
            &cur.view(),
            &w.get(&format!("dec{i}.up.weight")),
            c,
            &w.get(&format!("dec{i}.up.bias")),
        );
        let skip = skips.pop().expect("one skip per level");
        debug_assert_eq!(up.dim(), skip.dim());
        let cat = layers::concat(&skip.view(), &up.view());
        cur = double_conv(&cat.view(), w, &format!("dec{i}"), c)?;
        trace.push((format!("dec{i}"), cur.clone()));
    }
    let out = layers::conv2d(&cur.view(), &w.get("out.weight"), arch.out_channels, 1, Some(&w.get("out.bias")));
    trace.push(("output".into(), out));
    Ok(trace)
}

pub fn forward(x: &ArrayView3<f64>, w: &NetworkWeights) -> Result<Activation, RefinerError> {
    Ok(forward_traced(x, w)?.pop().expect("output stage").1)
}

/// Replace the channel tensor of `p` by the network output.
pub fn refine_basis(p: &PreparedBasis, w: &NetworkWeights) -> Result<PreparedBasis, RefinerError> {
    let arch = w.arch();
    if p.channels() != arch.in_channels || arch.in_channels != arch.out_channels {
        return Err(RefinerError::ChannelMismatch {
            basis: p.channels(),
            weights: arch.in_channels,
        });
    }
    let y: Array3<f64> = forward(&p.data.view(), w)?;
    Ok(p.with_data(y).expect("output shape equals input shape"))
}
