//! Architecture strings such as `64C3-AP2-128C3-AP2-128C3-AP2-512FC-10FC`
//! and the parameter sets they imply.
//!
//! Grammar: `token ("-" token)*` with `token ∈ { <n>C3, AP2, <n>FC }`.
//! `<n>C3` is a 3×3 stride-1 convolution with zero padding 1, `AP2` a 2×2
//! stride-2 average pool, `<n>FC` a fully connected layer. A spiking
//! activation follows every convolution and every fully connected layer,
//! and a flatten is inserted before the first fully connected layer.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::SurrogateParams;
use crate::error::{Error, Result};
use crate::spiking::{LIFParams, NoiseSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv3 { in_channels: usize, out_channels: usize },
    AvgPool2,
    Flatten,
    Fc { in_features: usize, units: usize },
    Spike,
}

impl LayerSpec {
    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerSpec::Conv3 { .. } | LayerSpec::Fc { .. })
    }
}

/// What the network reports as its per-step output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    /// Binary spikes of the final layer.
    #[default]
    Spikes,
    /// The final layer's pre-activation `H`.
    Potentials,
}

impl FromStr for Readout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spikes" | "spiking" => Ok(Readout::Spikes),
            "potentials" => Ok(Readout::Potentials),
            other => Err(Error::Config(format!("unknown readout '{other}'"))),
        }
    }
}

impl fmt::Display for Readout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Readout::Spikes => "spikes",
            Readout::Potentials => "potentials",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    /// Per-sample input shape: `[c, h, w]` or `[features]`.
    pub input_shape: Vec<usize>,
    pub lif: LIFParams,
    pub noise: NoiseSpec,
    pub surrogate: SurrogateParams,
    pub bias: bool,
    pub readout: Readout,
}

enum Token {
    Conv(usize),
    Pool,
    Fc(usize),
}

fn tokenize(text: &str) -> Result<Vec<Token>> {
    if text.trim().is_empty() {
        return Err(Error::Parse {
            offset: 0,
            message: "empty architecture string".into(),
        });
    }
    let mut tokens = Vec::new();
    let mut offset = 0;
    for raw in text.split('-') {
        let lead = raw.len() - raw.trim_start().len();
        let tok = raw.trim();
        let at = offset + lead;
        let bad = |message: String| Error::Parse { offset: at, message };
        let parse_width = |digits: &str| -> Result<usize> {
            match digits.parse::<usize>() {
                Ok(n) if n > 0 && digits.bytes().all(|b| b.is_ascii_digit()) => Ok(n),
                _ => Err(bad(format!("expected a positive width before the suffix in '{tok}'"))),
            }
        };
        let token = if tok == "AP2" {
            Token::Pool
        } else if let Some(n) = tok.strip_suffix("C3") {
            Token::Conv(parse_width(n)?)
        } else if let Some(n) = tok.strip_suffix("FC") {
            Token::Fc(parse_width(n)?)
        } else {
            return Err(bad(format!("unknown token '{tok}' (expected <n>C3, AP2 or <n>FC)")));
        };
        tokens.push(token);
        offset += raw.len() + 1;
    }
    Ok(tokens)
}

/// Parses an architecture string for inputs of shape `input_shape`
/// (without the batch axis). Hyperparameters take their defaults.
pub fn parse_arch(text: &str, input_shape: &[usize]) -> Result<NetworkSpec> {
    let tokens = tokenize(text)?;
    if input_shape.is_empty() || input_shape.contains(&0) {
        return Err(Error::Validation(format!("invalid input shape {input_shape:?}")));
    }
    let mut layers = Vec::new();
    let mut shape = input_shape.to_vec();
    for tok in tokens {
        match tok {
            Token::Conv(n) => {
                if shape.len() != 3 {
                    return Err(Error::Validation(format!(
                        "convolution needs a [c, h, w] input, got {shape:?}"
                    )));
                }
                layers.push(LayerSpec::Conv3 {
                    in_channels: shape[0],
                    out_channels: n,
                });
                layers.push(LayerSpec::Spike);
                shape[0] = n;
            }
            Token::Pool => {
                if shape.len() != 3 || shape[1] < 2 || shape[2] < 2 {
                    return Err(Error::Validation(format!(
                        "average pooling needs a [c, h, w] input of at least 2x2, got {shape:?}"
                    )));
                }
                layers.push(LayerSpec::AvgPool2);
                shape = vec![shape[0], shape[1] / 2, shape[2] / 2];
            }
            Token::Fc(n) => {
                if shape.len() != 1 {
                    layers.push(LayerSpec::Flatten);
                    shape = vec![shape.iter().product()];
                }
                layers.push(LayerSpec::Fc {
                    in_features: shape[0],
                    units: n,
                });
                layers.push(LayerSpec::Spike);
                shape = vec![n];
            }
        }
    }
    let spec = NetworkSpec {
        layers,
        input_shape: input_shape.to_vec(),
        lif: LIFParams::default(),
        noise: NoiseSpec::default(),
        surrogate: SurrogateParams::default(),
        bias: true,
        readout: Readout::Spikes,
    };
    spec.validate()?;
    Ok(spec)
}

impl NetworkSpec {
    /// Renders the layer list back to the architecture grammar.
    pub fn arch_string(&self) -> String {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv3 { out_channels, .. } => Some(format!("{out_channels}C3")),
                LayerSpec::AvgPool2 => Some("AP2".to_string()),
                LayerSpec::Fc { units, .. } => Some(format!("{units}FC")),
                LayerSpec::Flatten | LayerSpec::Spike => None,
            })
            .collect::<Vec<_>>()
            .join("-")
    }

    /// Per-sample output shape after each layer.
    pub fn shape_chain(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let err = |msg: String| Error::Validation(format!("layer {i} ({layer:?}): {msg}"));
            shape = match *layer {
                LayerSpec::Conv3 {
                    in_channels,
                    out_channels,
                } => {
                    if shape.len() != 3 || shape[0] != in_channels {
                        return Err(err(format!("input shape {shape:?} does not match")));
                    }
                    vec![out_channels, shape[1], shape[2]]
                }
                LayerSpec::AvgPool2 => {
                    if shape.len() != 3 || shape[1] < 2 || shape[2] < 2 {
                        return Err(err(format!("cannot pool {shape:?}")));
                    }
                    vec![shape[0], shape[1] / 2, shape[2] / 2]
                }
                LayerSpec::Flatten => vec![shape.iter().product()],
                LayerSpec::Fc { in_features, units } => {
                    if shape.len() != 1 || shape[0] != in_features {
                        return Err(err(format!(
                            "expects {in_features} input features but receives {shape:?}"
                        )));
                    }
                    vec![units]
                }
                LayerSpec::Spike => shape,
            };
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.lif.validate()?;
        self.noise.validate()?;
        if self.surrogate.v_th != self.lif.v_th {
            return Err(Error::Validation(format!(
                "surrogate centre {} differs from firing threshold {}",
                self.surrogate.v_th, self.lif.v_th
            )));
        }
        self.shape_chain()?;
        let last_weighted = self.layers.iter().rposition(|l| l.is_weighted());
        match last_weighted.map(|i| self.layers[i]) {
            Some(LayerSpec::Fc { .. }) => {}
            _ => return Err(Error::Validation("network must end in a fully connected layer".into())),
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.is_weighted() && self.layers.get(i + 1) != Some(&LayerSpec::Spike) {
                return Err(Error::Validation(format!(
                    "layer {i} ({l:?}) must be followed by a spiking activation"
                )));
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                LayerSpec::Fc { units, .. } => Some(*units),
                _ => None,
            })
            .unwrap_or(0)
    }

    /// Number of spiking layers, i.e. layers that receive noise.
    pub fn spiking_layers(&self) -> usize {
        self.layers.iter().filter(|l| **l == LayerSpec::Spike).count()
    }

    /// Shapes of every parameter tensor in declared order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            match *l {
                LayerSpec::Conv3 {
                    in_channels,
                    out_channels,
                } => {
                    out.push((format!("layer{i}.conv.weight"), vec![out_channels, in_channels, 3, 3]));
                    if self.bias {
                        out.push((format!("layer{i}.conv.bias"), vec![out_channels]));
                    }
                }
                LayerSpec::Fc { in_features, units } => {
                    out.push((format!("layer{i}.fc.weight"), vec![in_features, units]));
                    if self.bias {
                        out.push((format!("layer{i}.fc.bias"), vec![units]));
                    }
                }
                _ => {}
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Trainable tensors in the order given by [`NetworkSpec::param_shapes`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let (names, tensors) = spec
            .param_shapes()
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(&s)))
            .unzip();
        Self { names, tensors }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Checks that tensor shapes match what `spec` declares.
    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        let want = spec.param_shapes();
        if want.len() != self.tensors.len() {
            return Err(Error::Validation(format!(
                "expected {} parameter tensors, found {}",
                want.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), t) in want.iter().zip(&self.tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Validation(format!(
                    "{name}: expected shape {shape:?}, found {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Weights uniform in `±√(6 / fan_in)`, biases zero.
pub fn init_params<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> ParamSet {
    let mut set = ParamSet::zeros(spec);
    for t in set.tensors.iter_mut() {
        let shape = t.shape().to_vec();
        let fan_in = match shape.len() {
            4 => shape[1] * 9,
            2 => shape[0],
            _ => continue,
        };
        let bound = (6.0 / fan_in as f64).sqrt() as f32;
        for v in t.data_mut() {
            *v = rng.random_range(-bound..=bound);
        }
    }
    set
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const TABLE_NET: &str = "64C3-AP2-128C3-AP2-128C3-AP2-512FC-10FC";

    #[test]
    fn table_net_shape_chain() {
        let spec = parse_arch(TABLE_NET, &[1, 28, 28]).unwrap();
        let chain: Vec<Vec<usize>> = spec
            .shape_chain()
            .unwrap()
            .into_iter()
            .zip(&spec.layers)
            .filter(|(_, l)| **l != LayerSpec::Spike)
            .map(|(s, _)| s)
            .collect();
        let want: Vec<Vec<usize>> = vec![
            vec![64, 28, 28],
            vec![64, 14, 14],
            vec![128, 14, 14],
            vec![128, 7, 7],
            vec![128, 7, 7],
            vec![128, 3, 3],
            vec![1152],
            vec![512],
            vec![10],
        ];
        assert_eq!(chain, want);
        assert_eq!(spec.spiking_layers(), 5);
        assert_eq!(spec.classes(), 10);
    }

    #[test]
    fn table_net_parameter_count() {
        let spec = parse_arch(TABLE_NET, &[1, 28, 28]).unwrap();
        // 640 + 73_856 + 147_584 + 590_336 + 5_130
        assert_eq!(spec.parameter_count(), 817_546);
    }

    #[test]
    fn single_readout_on_flat_input() {
        let spec = parse_arch("10FC", &[784]).unwrap();
        assert_eq!(
            spec.layers,
            vec![
                LayerSpec::Fc {
                    in_features: 784,
                    units: 10
                },
                LayerSpec::Spike
            ]
        );
    }

    #[test]
    fn unknown_token_reports_offset() {
        match parse_arch("7Q9", &[1, 28, 28]) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
        match parse_arch("64C3-AP3-10FC", &[1, 28, 28]) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_arch("0FC", &[4]), Err(Error::Parse { .. })));
        assert!(matches!(parse_arch("", &[4]), Err(Error::Parse { .. })));
    }

    #[test]
    fn structural_errors_are_validation_errors() {
        assert!(matches!(parse_arch("10FC-8C3", &[1, 4, 4]), Err(Error::Validation(_))));
        assert!(matches!(parse_arch("8C3", &[1, 4, 4]), Err(Error::Validation(_))));
        assert!(matches!(parse_arch("AP2-AP2-AP2-10FC", &[1, 4, 4]), Err(Error::Validation(_))));
    }

    #[test]
    fn flatten_width_mismatch_rejected() {
        let mut spec = parse_arch("4C3-AP2-10FC", &[1, 6, 6]).unwrap();
        let fc = spec
            .layers
            .iter_mut()
            .find(|l| matches!(l, LayerSpec::Fc { .. }))
            .unwrap();
        *fc = LayerSpec::Fc {
            in_features: 35,
            units: 10,
        };
        assert!(matches!(spec.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn renders_back_to_input() {
        for s in [TABLE_NET, "10FC", "8C3-8C3-AP2-32FC-10FC"] {
            let shape: &[usize] = if s == "10FC" { &[784] } else { &[1, 28, 28] };
            assert_eq!(parse_arch(s, shape).unwrap().arch_string(), s);
        }
    }

    #[test]
    fn init_bounds_and_determinism() {
        let spec = parse_arch("3FC-2FC", &[6]).unwrap();
        let a = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(1));
        let b = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        // fan_in 6 → bound 1
        assert!(a.tensors[0].data().iter().all(|v| v.abs() <= 1.0));
        assert!(a.tensors[1].data().iter().all(|&v| v == 0.0));
        a.check(&spec).unwrap();
    }

    #[test]
    fn init_weight_mean_near_zero() {
        let spec = parse_arch("400FC", &[250]).unwrap();
        let p = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(8));
        assert_eq!(p.tensors[0].len(), 100_000);
        assert!(p.tensors[0].mean().abs() < 0.01);
    }

    #[test]
    fn bias_flag_drops_bias_tensors() {
        let mut spec = parse_arch(TABLE_NET, &[1, 28, 28]).unwrap();
        spec.bias = false;
        assert_eq!(spec.param_shapes().len(), 5);
    }
}
