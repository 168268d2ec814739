//! Learnable parameter containers and the binder that registers them on a
//! tape for one forward pass.

use crate::config::ArchConfig;
use crate::diff::{BnStats, BnUse, Gradients, Scalar, Tape, TensorId};
use crate::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone)]
pub struct ParamTensor<T> {
    pub data: Vec<T>,
    pub shape: Vec<usize>,
}

impl<T: Scalar> ParamTensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        ParamTensor {
            data: vec![T::zero(); shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        ParamTensor {
            data: vec![v; shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    /// He-style fan-in scaled uniform init.
    pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha12Rng) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        ParamTensor {
            data: (0..shape.iter().product())
                .map(|_| T::of(rng.random_range(-bound..bound)))
                .collect(),
            shape: shape.to_vec(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamTensor<U> {
        ParamTensor {
            data: self.data.iter().map(|&v| U::of(v.to64())).collect(),
            shape: self.shape.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer<T> {
    pub weight: ParamTensor<T>,
    pub bias: ParamTensor<T>,
}

impl<T: Scalar> ConvLayer<T> {
    fn init(kh: usize, kw: usize, cin: usize, cout: usize, rng: &mut ChaCha12Rng) -> Self {
        ConvLayer {
            weight: ParamTensor::he_uniform(&[kh, kw, cin, cout], kh * kw * cin, rng),
            bias: ParamTensor::zeros(&[cout]),
        }
    }

    fn cast<U: Scalar>(&self) -> ConvLayer<U> {
        ConvLayer {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BnLayer<T> {
    pub gamma: ParamTensor<T>,
    pub beta: ParamTensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BnLayer<T> {
    fn init(c: usize) -> Self {
        BnLayer {
            gamma: ParamTensor::full(&[c], T::one()),
            beta: ParamTensor::zeros(&[c]),
            running_mean: vec![T::zero(); c],
            running_var: vec![T::one(); c],
        }
    }

    fn cast<U: Scalar>(&self) -> BnLayer<U> {
        BnLayer {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.iter().map(|&v| U::of(v.to64())).collect(),
            running_var: self.running_var.iter().map(|&v| U::of(v.to64())).collect(),
        }
    }
}

/// One backbone block: 5x5 conv, BN, leaky ReLU, 5x5 conv. Blocks after the
/// first add their input back (the first changes channel count, so it has no
/// skip).
#[derive(Debug, Clone)]
pub struct ResidualBlock<T> {
    pub conv1: ConvLayer<T>,
    pub bn: BnLayer<T>,
    pub conv2: ConvLayer<T>,
}

#[derive(Debug, Clone)]
pub struct DetectorParams<T> {
    pub blocks: Vec<ResidualBlock<T>>,
    pub score_filters: Vec<ConvLayer<T>>,
    pub orientation: ConvLayer<T>,
}

#[derive(Debug, Clone)]
pub struct DescriptorParams<T> {
    pub convs: Vec<(ConvLayer<T>, BnLayer<T>)>,
    pub fc1: ParamTensor<T>,
    pub fc1_bias: ParamTensor<T>,
    pub fc1_bn: BnLayer<T>,
    pub fc2: ParamTensor<T>,
    pub fc2_bias: ParamTensor<T>,
}

#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub detector: DetectorParams<T>,
    pub descriptor: DescriptorParams<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn init(arch: &ArchConfig, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let c = arch.backbone_channels;
        let blocks = (0..3)
            .map(|i| {
                let cin = if i == 0 { 1 } else { c };
                ResidualBlock {
                    conv1: ConvLayer::init(5, 5, cin, c, &mut rng),
                    bn: BnLayer::init(c),
                    conv2: ConvLayer::init(5, 5, c, c, &mut rng),
                }
            })
            .collect();
        let score_filters = (0..arch.scale_levels)
            .map(|_| ConvLayer::init(5, 5, c, 1, &mut rng))
            .collect();
        let mut orientation = ConvLayer::init(5, 5, c, 2, &mut rng);
        // Bias the cosine channel to 1 so initial orientations sit at zero
        // with a well-conditioned atan2 gradient.
        orientation.bias.data[1] = T::one();

        let [c1, c2, c3] = arch.descriptor_channels;
        let convs = vec![
            (ConvLayer::init(3, 3, 1, c1, &mut rng), BnLayer::init(c1)),
            (ConvLayer::init(3, 3, c1, c2, &mut rng), BnLayer::init(c2)),
            (ConvLayer::init(3, 3, c2, c3, &mut rng), BnLayer::init(c3)),
        ];
        let spatial = arch.patch_size / 8; // three stride-2 convolutions
        let flat = spatial * spatial * c3;
        let descriptor = DescriptorParams {
            convs,
            fc1: ParamTensor::he_uniform(&[flat, arch.descriptor_fc], flat, &mut rng),
            fc1_bias: ParamTensor::zeros(&[arch.descriptor_fc]),
            fc1_bn: BnLayer::init(arch.descriptor_fc),
            fc2: ParamTensor::he_uniform(
                &[arch.descriptor_fc, arch.descriptor_dim],
                arch.descriptor_fc,
                &mut rng,
            ),
            fc2_bias: ParamTensor::zeros(&[arch.descriptor_dim]),
        };
        ModelParams {
            detector: DetectorParams {
                blocks,
                score_filters,
                orientation,
            },
            descriptor,
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            detector: DetectorParams {
                blocks: self
                    .detector
                    .blocks
                    .iter()
                    .map(|b| ResidualBlock {
                        conv1: b.conv1.cast(),
                        bn: b.bn.cast(),
                        conv2: b.conv2.cast(),
                    })
                    .collect(),
                score_filters: self.detector.score_filters.iter().map(|f| f.cast()).collect(),
                orientation: self.detector.orientation.cast(),
            },
            descriptor: DescriptorParams {
                convs: self
                    .descriptor
                    .convs
                    .iter()
                    .map(|(c, b)| (c.cast(), b.cast()))
                    .collect(),
                fc1: self.descriptor.fc1.cast(),
                fc1_bias: self.descriptor.fc1_bias.cast(),
                fc1_bn: self.descriptor.fc1_bn.cast(),
                fc2: self.descriptor.fc2.cast(),
                fc2_bias: self.descriptor.fc2_bias.cast(),
            },
        }
    }

    /// Visit every learnable parameter in a fixed, deterministic order.
    pub fn visit(&self, mut f: impl FnMut(&str, &ParamTensor<T>)) {
        for (i, b) in self.detector.blocks.iter().enumerate() {
            f(&format!("detector.block{i}.conv1.weight"), &b.conv1.weight);
            f(&format!("detector.block{i}.conv1.bias"), &b.conv1.bias);
            f(&format!("detector.block{i}.bn.gamma"), &b.bn.gamma);
            f(&format!("detector.block{i}.bn.beta"), &b.bn.beta);
            f(&format!("detector.block{i}.conv2.weight"), &b.conv2.weight);
            f(&format!("detector.block{i}.conv2.bias"), &b.conv2.bias);
        }
        for (i, s) in self.detector.score_filters.iter().enumerate() {
            f(&format!("detector.score{i}.weight"), &s.weight);
            f(&format!("detector.score{i}.bias"), &s.bias);
        }
        f("detector.orientation.weight", &self.detector.orientation.weight);
        f("detector.orientation.bias", &self.detector.orientation.bias);
        for (i, (c, b)) in self.descriptor.convs.iter().enumerate() {
            f(&format!("descriptor.conv{i}.weight"), &c.weight);
            f(&format!("descriptor.conv{i}.bias"), &c.bias);
            f(&format!("descriptor.conv{i}.bn.gamma"), &b.gamma);
            f(&format!("descriptor.conv{i}.bn.beta"), &b.beta);
        }
        f("descriptor.fc1.weight", &self.descriptor.fc1);
        f("descriptor.fc1.bias", &self.descriptor.fc1_bias);
        f("descriptor.fc1.bn.gamma", &self.descriptor.fc1_bn.gamma);
        f("descriptor.fc1.bn.beta", &self.descriptor.fc1_bn.beta);
        f("descriptor.fc2.weight", &self.descriptor.fc2);
        f("descriptor.fc2.bias", &self.descriptor.fc2_bias);
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut ParamTensor<T>)) {
        for (i, b) in self.detector.blocks.iter_mut().enumerate() {
            f(&format!("detector.block{i}.conv1.weight"), &mut b.conv1.weight);
            f(&format!("detector.block{i}.conv1.bias"), &mut b.conv1.bias);
            f(&format!("detector.block{i}.bn.gamma"), &mut b.bn.gamma);
            f(&format!("detector.block{i}.bn.beta"), &mut b.bn.beta);
            f(&format!("detector.block{i}.conv2.weight"), &mut b.conv2.weight);
            f(&format!("detector.block{i}.conv2.bias"), &mut b.conv2.bias);
        }
        for (i, s) in self.detector.score_filters.iter_mut().enumerate() {
            f(&format!("detector.score{i}.weight"), &mut s.weight);
            f(&format!("detector.score{i}.bias"), &mut s.bias);
        }
        f("detector.orientation.weight", &mut self.detector.orientation.weight);
        f("detector.orientation.bias", &mut self.detector.orientation.bias);
        for (i, (c, b)) in self.descriptor.convs.iter_mut().enumerate() {
            f(&format!("descriptor.conv{i}.weight"), &mut c.weight);
            f(&format!("descriptor.conv{i}.bias"), &mut c.bias);
            f(&format!("descriptor.conv{i}.bn.gamma"), &mut b.gamma);
            f(&format!("descriptor.conv{i}.bn.beta"), &mut b.beta);
        }
        f("descriptor.fc1.weight", &mut self.descriptor.fc1);
        f("descriptor.fc1.bias", &mut self.descriptor.fc1_bias);
        f("descriptor.fc1.bn.gamma", &mut self.descriptor.fc1_bn.gamma);
        f("descriptor.fc1.bn.beta", &mut self.descriptor.fc1_bn.beta);
        f("descriptor.fc2.weight", &mut self.descriptor.fc2);
        f("descriptor.fc2.bias", &mut self.descriptor.fc2_bias);
    }

    /// Visit BN running statistics (not learnable, but checkpointed).
    pub fn visit_state(&self, mut f: impl FnMut(&str, &[T])) {
        for (i, b) in self.detector.blocks.iter().enumerate() {
            f(&format!("detector.block{i}.bn.running_mean"), &b.bn.running_mean);
            f(&format!("detector.block{i}.bn.running_var"), &b.bn.running_var);
        }
        for (i, (_, b)) in self.descriptor.convs.iter().enumerate() {
            f(&format!("descriptor.conv{i}.bn.running_mean"), &b.running_mean);
            f(&format!("descriptor.conv{i}.bn.running_var"), &b.running_var);
        }
        f("descriptor.fc1.bn.running_mean", &self.descriptor.fc1_bn.running_mean);
        f("descriptor.fc1.bn.running_var", &self.descriptor.fc1_bn.running_var);
    }

    pub fn visit_state_mut(&mut self, mut f: impl FnMut(&str, &mut Vec<T>)) {
        for (i, b) in self.detector.blocks.iter_mut().enumerate() {
            f(&format!("detector.block{i}.bn.running_mean"), &mut b.bn.running_mean);
            f(&format!("detector.block{i}.bn.running_var"), &mut b.bn.running_var);
        }
        for (i, (_, b)) in self.descriptor.convs.iter_mut().enumerate() {
            f(&format!("descriptor.conv{i}.bn.running_mean"), &mut b.running_mean);
            f(&format!("descriptor.conv{i}.bn.running_var"), &mut b.running_var);
        }
        f("descriptor.fc1.bn.running_mean", &mut self.descriptor.fc1_bn.running_mean);
        f("descriptor.fc1.bn.running_var", &mut self.descriptor.fc1_bn.running_var);
    }
}

/// Whether a forward pass uses batch or running BN statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; observations are collected for running-stat updates.
    Train,
    /// Running statistics (inference).
    Eval,
}

/// Ties a [`Tape`] to the parameters registered on it during one forward
/// pass, so gradients can be read back by parameter name afterwards.
pub struct Binder<T: Scalar> {
    pub tape: Tape<T>,
    bn_mode: BnMode,
    trainable: bool,
    bound: Vec<(String, TensorId)>,
    bn_observed: Vec<(String, BnStats<T>)>,
    bn_eps: T,
}

impl<T: Scalar> Binder<T> {
    pub fn new(bn_mode: BnMode, trainable: bool, bn_eps: f64) -> Self {
        Binder {
            tape: Tape::new(),
            bn_mode,
            trainable,
            bound: Vec::new(),
            bn_observed: Vec::new(),
            bn_eps: T::of(bn_eps),
        }
    }

    pub fn bn_mode(&self) -> BnMode {
        self.bn_mode
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn param(&mut self, name: &str, p: &ParamTensor<T>) -> Result<TensorId> {
        let id = self.tape.leaf(p.data.clone(), &p.shape, self.trainable)?;
        self.bound.push((name.to_string(), id));
        Ok(id)
    }

    /// Convolution with this binder's registered weights.
    pub fn conv(
        &mut self,
        name: &str,
        layer: &ConvLayer<T>,
        x: TensorId,
        stride: usize,
    ) -> Result<TensorId> {
        let w = self.param(&format!("{name}.weight"), &layer.weight)?;
        let b = self.param(&format!("{name}.bias"), &layer.bias)?;
        self.tape.conv2d(x, w, b, stride, true)
    }

    /// Batch normalization honoring this binder's mode; batch-mode
    /// observations are recorded under the layer name.
    pub fn bn(&mut self, name: &str, layer: &BnLayer<T>, x: TensorId) -> Result<TensorId> {
        let gamma = self.param(&format!("{name}.gamma"), &layer.gamma)?;
        let beta = self.param(&format!("{name}.beta"), &layer.beta)?;
        let usage = match self.bn_mode {
            BnMode::Train => BnUse::Batch,
            BnMode::Eval => BnUse::Running {
                mean: &layer.running_mean,
                var: &layer.running_var,
            },
        };
        let (y, stats) = self.tape.batch_norm(x, gamma, beta, usage, self.bn_eps)?;
        if let Some(stats) = stats {
            self.bn_observed.push((name.to_string(), stats));
        }
        Ok(y)
    }

    /// Gradient per parameter name from a finished backward pass.
    pub fn named_grads(&self, grads: &Gradients<T>) -> Vec<(String, Vec<T>)> {
        self.bound
            .iter()
            .filter_map(|(name, id)| grads.get(*id).map(|g| (name.clone(), g.to_vec())))
            .collect()
    }

    /// `(name, requires_grad)` for every bound parameter.
    pub fn bound_flags(&self) -> Vec<(String, bool)> {
        self.bound
            .iter()
            .map(|(name, id)| (name.clone(), self.tape.requires_grad(*id)))
            .collect()
    }

    pub fn take_bn_observations(&mut self) -> Vec<(String, BnStats<T>)> {
        std::mem::take(&mut self.bn_observed)
    }
}
