//! U-Net layout, tensor naming and parameter arithmetic.
//!
//! Naming grammar of the weight archive:
//!
//! ```text
//! arch                                   [version, levels, base, in, out, dropout]
//! {block}.conv{1,2}.weight               (cout, cin, 3, 3)
//! {block}.bn{1,2}.{weight,bias,running_mean,running_var}   (c)
//! dec{i}.up.weight                       (cin, cout, 2, 2)
//! dec{i}.up.bias                         (cout)
//! out.weight                             (out, base, 1, 1)
//! out.bias                               (out)
//! ```
//!
//! `block` is `enc{i}` (i = 0 is the full-resolution level), `bottleneck`,
//! or `dec{i}`. Level `i` has `base * 2^i` channels and the bottleneck
//! `base * 2^levels`. Decoder convolutions see `[skip, upsampled]`.

use std::fmt;

pub const ARCH_VERSION: u32 = 1;
pub const ARCH_ENTRY: &str = "arch";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchSpec {
    pub levels: usize,
    pub base: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Recorded for the trainer; identity at inference.
    pub dropout: f64,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            levels: 4,
            base: 64,
            in_channels: 6,
            out_channels: 6,
            dropout: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv3x3,
    BatchNorm,
    Relu,
    MaxPool2,
    TransposeConv2,
    Conv1x1,
    ConcatSkip,
    Dropout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub cin: usize,
    pub cout: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Trainable,
    /// Batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub trainable: usize,
    pub buffers: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.trainable + self.buffers
    }
}

impl fmt::Display for ParamCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} trainable + {} batch-norm buffers", self.trainable, self.buffers)
    }
}

impl ArchSpec {
    /// Network for a rank-`l` basis: `2l` real channels in and out.
    pub fn for_rank(l: usize) -> Self {
        Self {
            in_channels: 2 * l,
            out_channels: 2 * l,
            ..Self::default()
        }
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base << level
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.base << self.levels
    }

    /// Spatial extents must survive `levels` halvings.
    pub fn divisor(&self) -> usize {
        1 << self.levels
    }

    pub fn descriptor(&self) -> Vec<f64> {
        vec![
            ARCH_VERSION as f64,
            self.levels as f64,
            self.base as f64,
            self.in_channels as f64,
            self.out_channels as f64,
            self.dropout,
        ]
    }

    pub fn from_descriptor(d: &[f64]) -> Result<Self, String> {
        if d.len() != 6 {
            return Err(format!("descriptor has {} values, expected 6", d.len()));
        }
        if d[0] != ARCH_VERSION as f64 {
            return Err(format!("architecture version {} (supported: {ARCH_VERSION})", d[0]));
        }
        let count = |v: f64, what: &str| {
            if v >= 1.0 && v.fract() == 0.0 && v < 1e6 {
                Ok(v as usize)
            } else {
                Err(format!("{what} = {v} is not a positive integer"))
            }
        };
        let spec = Self {
            levels: count(d[1], "levels")?,
            base: count(d[2], "base")?,
            in_channels: count(d[3], "in")?,
            out_channels: count(d[4], "out")?,
            dropout: d[5],
        };
        if spec.levels > 12 || spec.base.checked_shl(spec.levels as u32).is_none() {
            return Err(format!("{} levels is too deep", spec.levels));
        }
        if !(0.0..1.0).contains(&spec.dropout) {
            return Err(format!("dropout {} not in [0, 1)", spec.dropout));
        }
        Ok(spec)
    }

    fn block_names(&self) -> Vec<(String, usize, usize, bool)> {
        let mut v = Vec::new();
        let mut cin = self.in_channels;
        for i in 0..self.levels {
            v.push((format!("enc{i}"), cin, self.channels(i), false));
            cin = self.channels(i);
        }
        v.push(("bottleneck".into(), cin, self.bottleneck_channels(), false));
        for i in (0..self.levels).rev() {
            v.push((format!("dec{i}"), 2 * self.channels(i), self.channels(i), true));
        }
        v
    }

    /// All named tensors, in archive order.
    pub fn params(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, role| out.push(ParamSpec { name, shape, role });
        for (block, cin, c, decoder) in self.block_names() {
            if decoder {
                let up_in = 2 * c;
                push(format!("{block}.up.weight"), vec![up_in, c, 2, 2], ParamRole::Trainable);
                push(format!("{block}.up.bias"), vec![c], ParamRole::Trainable);
            }
            for (j, ci) in [(1, cin), (2, c)] {
                push(format!("{block}.conv{j}.weight"), vec![c, ci, 3, 3], ParamRole::Trainable);
                push(format!("{block}.bn{j}.weight"), vec![c], ParamRole::Trainable);
                push(format!("{block}.bn{j}.bias"), vec![c], ParamRole::Trainable);
                push(format!("{block}.bn{j}.running_mean"), vec![c], ParamRole::Buffer);
                push(format!("{block}.bn{j}.running_var"), vec![c], ParamRole::Buffer);
            }
        }
        push("out.weight".into(), vec![self.out_channels, self.base, 1, 1], ParamRole::Trainable);
        push("out.bias".into(), vec![self.out_channels], ParamRole::Trainable);
        out
    }

    pub fn parameter_count(&self) -> ParamCount {
        let mut c = ParamCount { trainable: 0, buffers: 0 };
        for p in self.params() {
            match p.role {
                ParamRole::Trainable => c.trainable += p.len(),
                ParamRole::Buffer => c.buffers += p.len(),
            }
        }
        c
    }

    /// The layer graph in execution order.
    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut v = Vec::new();
        let mut add = |name: String, kind, cin, cout| v.push(LayerSpec { name, kind, cin, cout });
        for (block, cin, c, decoder) in self.block_names() {
            if decoder {
                add(format!("{block}.up"), LayerKind::TransposeConv2, 2 * c, c);
                add(format!("{block}.concat"), LayerKind::ConcatSkip, c, 2 * c);
            }
            add(format!("{block}.conv1"), LayerKind::Conv3x3, cin, c);
            add(format!("{block}.bn1"), LayerKind::BatchNorm, c, c);
            add(format!("{block}.relu1"), LayerKind::Relu, c, c);
            add(format!("{block}.conv2"), LayerKind::Conv3x3, c, c);
            add(format!("{block}.bn2"), LayerKind::BatchNorm, c, c);
            add(format!("{block}.relu2"), LayerKind::Relu, c, c);
            if block == "bottleneck" {
                add("bottleneck.dropout".into(), LayerKind::Dropout, c, c);
            } else if !decoder {
                add(format!("{block}.pool"), LayerKind::MaxPool2, c, c);
            }
        }
        add("out".into(), LayerKind::Conv1x1, self.base, self.out_channels);
        v
    }

    /// Parameter count implied by the layer graph alone.
    pub fn layer_parameter_count(&self) -> ParamCount {
        let mut c = ParamCount { trainable: 0, buffers: 0 };
        for l in self.layers() {
            match l.kind {
                LayerKind::Conv3x3 => c.trainable += l.cin * l.cout * 9,
                LayerKind::BatchNorm => {
                    c.trainable += 2 * l.cout;
                    c.buffers += 2 * l.cout;
                }
                LayerKind::TransposeConv2 => c.trainable += l.cin * l.cout * 4 + l.cout,
                LayerKind::Conv1x1 => c.trainable += l.cin * l.cout + l.cout,
                _ => {}
            }
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_counts() {
        let a = ArchSpec::default();
        let c = a.parameter_count();
        assert_eq!(c.trainable, 31_039_686);
        assert_eq!(c.buffers, 11_776);
        assert_eq!(a.layer_parameter_count(), c);
    }

    #[test]
    fn descriptor_round_trip() {
        let a = ArchSpec { levels: 3, base: 8, in_channels: 4, out_channels: 4, dropout: 0.5 };
        assert_eq!(ArchSpec::from_descriptor(&a.descriptor()), Ok(a));
        let mut d = a.descriptor();
        d[0] = 2.0;
        assert!(ArchSpec::from_descriptor(&d).unwrap_err().contains("version"));
    }

    #[test]
    fn names_are_unique() {
        let p = ArchSpec::default().params();
        let mut names: Vec<_> = p.iter().map(|x| x.name.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), p.len());
        assert!(names.iter().any(|n| n == "enc0.conv1.weight"));
        assert!(names.iter().any(|n| n == "dec0.up.bias"));
    }
}
