use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Layer, Model, ModelError, NamedTensor, Result, WeightSlot};
use crate::pruning::PrunableParam;
use crate::tensor::{BatchNormStats, Real, Tensor};

const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// `flatten -> 300 -> 100 -> classes` with ReLU.
    Mlp3,
    /// Six 3×3 conv + batch-norm + ReLU stages, global pooling, linear head.
    ConvBn6,
    /// Conv stem, two 16-channel residual blocks, a strided transition and a
    /// 32-channel residual block.
    ResNetLite,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Mlp3 => "mlp3",
            ModelKind::ConvBn6 => "convbn6",
            ModelKind::ResNetLite => "resnet-lite",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp3" => Ok(Self::Mlp3),
            "convbn6" => Ok(Self::ConvBn6),
            "resnet-lite" => Ok(Self::ResNetLite),
            other => Err(ModelError::UnknownModel(other.to_string())),
        }
    }
}

struct Builder<'a, F: Real> {
    rng: ChaCha8Rng,
    exempt: &'a [String],
    prunable: Vec<PrunableParam<F>>,
    dense: Vec<NamedTensor<F>>,
}

impl<F: Real> Builder<'_, F> {
    /// He-uniform: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    fn he_uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor<F> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| F::of(rng.random_range(-bound..bound)))
    }

    fn weight(&mut self, layer: &str, w: Tensor<F>) -> WeightSlot {
        let name = format!("{layer}.weight");
        if self.exempt.iter().any(|e| e == layer) {
            self.dense.push(NamedTensor { name, value: w });
            WeightSlot::Dense(self.dense.len() - 1)
        } else {
            // temperature is replaced when pruning starts
            let p = PrunableParam::new(name, w, 0.0, 1.0).expect("positive temperature");
            self.prunable.push(p);
            WeightSlot::Prunable(self.prunable.len() - 1)
        }
    }

    fn dense(&mut self, name: String, value: Tensor<F>) -> usize {
        self.dense.push(NamedTensor { name, value });
        self.dense.len() - 1
    }

    fn linear(&mut self, name: &str, inputs: usize, outputs: usize) -> Layer<F> {
        let w = self.he_uniform(&[outputs, inputs], inputs);
        let weight = self.weight(name, w);
        let bias = self.dense(format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Layer::Linear {
            name: name.to_string(),
            weight,
            bias,
        }
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> Layer<F> {
        let w = self.he_uniform(&[cout, cin, 3, 3], cin * 9);
        let weight = self.weight(name, w);
        Layer::Conv2d {
            name: name.to_string(),
            weight,
            stride,
            pad: 1,
        }
    }

    fn bn(&mut self, name: &str, channels: usize) -> Layer<F> {
        let gamma = self.dense(format!("{name}.gamma"), Tensor::full(&[channels], F::one()));
        let beta = self.dense(format!("{name}.beta"), Tensor::zeros(&[channels]));
        Layer::BatchNorm2d {
            name: name.to_string(),
            gamma,
            beta,
            stats: BatchNormStats::new(channels, BN_MOMENTUM, BN_EPS),
        }
    }

    fn conv_bn_relu(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> Vec<Layer<F>> {
        vec![
            self.conv(&format!("{name}.conv"), cin, cout, stride),
            self.bn(&format!("{name}.bn"), cout),
            Layer::Relu,
        ]
    }

    fn residual(&mut self, name: &str, channels: usize) -> Layer<F> {
        let body = vec![
            self.conv(&format!("{name}.conv1"), channels, channels, 1),
            self.bn(&format!("{name}.bn1"), channels),
            Layer::Relu,
            self.conv(&format!("{name}.conv2"), channels, channels, 1),
            self.bn(&format!("{name}.bn2"), channels),
        ];
        Layer::Residual {
            name: name.to_string(),
            body,
        }
    }
}

fn image_input(kind: ModelKind, shape: &[usize], min_side: usize) -> Result<(usize, usize)> {
    let unsupported = |reason: &str| ModelError::UnsupportedInput {
        model: kind.to_string(),
        shape: shape.to_vec(),
        reason: reason.to_string(),
    };
    if shape.len() != 3 {
        return Err(unsupported("expected [channels, height, width]"));
    }
    if shape[1] != shape[2] || shape[1] < min_side || !shape[1].is_multiple_of(4) {
        return Err(unsupported(
            "height and width must be equal and a multiple of 4",
        ));
    }
    Ok((shape[0], shape[1]))
}

/// Builds a freshly initialized model.
///
/// `exempt` lists conv/linear layer names (e.g. `fc3`, `stem.conv`) whose
/// weights are kept out of the prunable registry.
pub fn build<F: Real>(
    name: &str,
    input_shape: &[usize],
    classes: usize,
    seed: u64,
    exempt: &[String],
) -> Result<Model<F>> {
    let kind: ModelKind = name.parse()?;
    if classes < 2 {
        return Err(ModelError::UnsupportedInput {
            model: name.to_string(),
            shape: input_shape.to_vec(),
            reason: format!("need at least 2 classes, got {classes}"),
        });
    }
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        exempt,
        prunable: Vec::new(),
        dense: Vec::new(),
    };
    let layers = match kind {
        ModelKind::Mlp3 => {
            let d: usize = input_shape.iter().product();
            if d == 0 {
                return Err(ModelError::UnsupportedInput {
                    model: name.to_string(),
                    shape: input_shape.to_vec(),
                    reason: "empty input".into(),
                });
            }
            vec![
                Layer::Flatten,
                b.linear("fc1", d, 300),
                Layer::Relu,
                b.linear("fc2", 300, 100),
                Layer::Relu,
                b.linear("fc3", 100, classes),
            ]
        }
        ModelKind::ConvBn6 => {
            let (c, _) = image_input(kind, input_shape, 4)?;
            let mut layers = Vec::new();
            for (i, (cin, cout, stride)) in [
                (c, 16, 1),
                (16, 16, 1),
                (16, 32, 2),
                (32, 32, 1),
                (32, 64, 2),
                (64, 64, 1),
            ]
            .into_iter()
            .enumerate()
            {
                layers.extend(b.conv_bn_relu(&format!("conv{}", i + 1), cin, cout, stride));
            }
            layers.push(Layer::AvgPool { k: None });
            layers.push(Layer::Flatten);
            layers.push(b.linear("fc", 64, classes));
            layers
        }
        ModelKind::ResNetLite => {
            let (c, _) = image_input(kind, input_shape, 4)?;
            let mut layers = b.conv_bn_relu("stem", c, 16, 1);
            layers.push(b.residual("block1", 16));
            layers.push(b.residual("block2", 16));
            layers.extend(b.conv_bn_relu("down", 16, 32, 2));
            layers.push(b.residual("block3", 32));
            layers.push(Layer::AvgPool { k: None });
            layers.push(Layer::Flatten);
            layers.push(b.linear("fc", 32, classes));
            layers
        }
    };
    if let Some(missing) = exempt.iter().find(|e| {
        !b.prunable.iter().any(|p| p.name == format!("{e}.weight"))
            && !b.dense.iter().any(|d| d.name == format!("{e}.weight"))
    }) {
        return Err(ModelError::UnknownExemption(missing.clone()));
    }
    Ok(Model {
        name: kind.as_str().to_string(),
        input_shape: input_shape.to_vec(),
        classes,
        layers,
        prunable: b.prunable,
        dense: b.dense,
        exempt: exempt.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerKind;

    #[test]
    fn mlp3_parameter_count() {
        let m: Model = build("mlp3", &[1, 28, 28], 10, 0, &[]).unwrap();
        assert_eq!(m.parameter_count(), 784 * 300 + 300 + 300 * 100 + 100 + 100 * 10 + 10);
        assert_eq!(m.parameter_count(), 266_610);
        assert_eq!(m.prunable_count(), 784 * 300 + 300 * 100 + 100 * 10);
    }

    #[test]
    fn convbn6_has_batchnorm_after_every_conv() {
        let m: Model = build("convbn6", &[1, 8, 8], 10, 0, &[]).unwrap();
        let kinds: Vec<LayerKind> = m.layers.iter().map(|l| l.kind()).collect();
        let convs = kinds.iter().filter(|&&k| k == LayerKind::Conv2d).count();
        assert_eq!(convs, 6);
        for (i, k) in kinds.iter().enumerate() {
            if *k == LayerKind::Conv2d {
                assert_eq!(kinds[i + 1], LayerKind::BatchNorm2d);
            }
        }
        assert!(m.parameter_count() < 300_000);
    }

    #[test]
    fn resnet_lite_has_identity_residual_blocks() {
        let m: Model = build("resnet-lite", &[1, 8, 8], 10, 0, &[]).unwrap();
        let blocks = m
            .layers
            .iter()
            .filter(|l| l.kind() == LayerKind::ResidualBlock)
            .count();
        assert!(blocks >= 2);
        assert!(m.parameter_count() < 300_000);
    }

    #[test]
    fn registry_holds_every_conv_and_linear_weight_once() {
        for name in ["mlp3", "convbn6", "resnet-lite"] {
            let m: Model = build(name, &[1, 8, 8], 4, 3, &[]).unwrap();
            let mut names: Vec<&str> = m.prunable.iter().map(|p| p.name.as_str()).collect();
            let n = names.len();
            names.sort_unstable();
            names.dedup();
            assert_eq!(names.len(), n);
            assert!(m.dense.iter().all(|d| !d.name.ends_with(".weight")));
        }
    }

    #[test]
    fn exemption_moves_weight_out_of_registry() {
        let exempt = vec!["fc3".to_string()];
        let m: Model = build("mlp3", &[16], 4, 0, &exempt).unwrap();
        assert!(m.prunable.iter().all(|p| p.name != "fc3.weight"));
        assert!(m.dense.iter().any(|d| d.name == "fc3.weight"));
        assert!(matches!(
            build::<f64>("mlp3", &[16], 4, 0, &["nope".to_string()]),
            Err(ModelError::UnknownExemption(_))
        ));
    }

    #[test]
    fn unknown_model_is_rejected() {
        assert!(matches!(
            build::<f64>("vgg", &[16], 4, 0, &[]),
            Err(ModelError::UnknownModel(_))
        ));
        assert!(build::<f64>("convbn6", &[16], 4, 0, &[]).is_err());
    }

    #[test]
    fn same_seed_same_weights() {
        let a: Model = build("resnet-lite", &[1, 8, 8], 3, 11, &[]).unwrap();
        let b: Model = build("resnet-lite", &[1, 8, 8], 3, 11, &[]).unwrap();
        let c: Model = build("resnet-lite", &[1, 8, 8], 3, 12, &[]).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
