use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Sequential};
use crate::tensor::{Eager, Graph, Padding, Tensor};

/// Seed offset for critic initialisation, so the main network draws the
/// same weights whatever the number of critics.
const CRITIC_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

/// Named network families.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Preset {
    /// `mlp-a-b-...-k`: dense layers of the given widths, ReLU between
    /// them, the last width being the class count.
    Mlp(Vec<usize>),
    /// Two conv/relu/pool blocks and two dense layers.
    TinyCnn,
    /// Stacked LSTM layers with a per-step dense output layer.
    LstmStack { layers: usize, units: usize },
}

impl Preset {
    pub fn parse(name: &str, lstm_layers: usize, lstm_units: usize) -> Result<Self> {
        if name == "tiny-cnn" {
            return Ok(Preset::TinyCnn);
        }
        if name == "lstm-stack" {
            if lstm_layers == 0 || lstm_units == 0 {
                return Err(Error::config("model.lstm_layers", "an LSTM stack needs at least one layer of positive width"));
            }
            return Ok(Preset::LstmStack {
                layers: lstm_layers,
                units: lstm_units,
            });
        }
        if let Some(rest) = name.strip_prefix("mlp-") {
            let widths: Option<Vec<usize>> = rest.split('-').map(|w| w.parse().ok().filter(|&v| v > 0)).collect();
            if let Some(widths) = widths {
                return Ok(Preset::Mlp(widths));
            }
        }
        Err(Error::config(
            "model.preset",
            format!("unknown preset `{name}` (expected mlp-<w1>-...-<classes>, tiny-cnn or lstm-stack)"),
        ))
    }

    /// The network as units: one parametric layer plus the non-parametric
    /// layers that follow it (a leading flatten joins the first unit).
    pub fn units(&self, input_shape: &[usize], classes: usize) -> Result<Vec<Vec<LayerSpec>>> {
        match self {
            Preset::Mlp(widths) => {
                if *widths.last().expect("non-empty") != classes {
                    return Err(Error::config(
                        "model.preset",
                        format!("last width {} differs from the {classes} classes of the data", widths.last().unwrap()),
                    ));
                }
                let mut inputs: usize = input_shape.iter().product();
                let mut units = Vec::new();
                for (k, &w) in widths.iter().enumerate() {
                    let mut unit = Vec::new();
                    if k == 0 && input_shape.len() != 1 {
                        unit.push(LayerSpec::Flatten);
                    }
                    unit.push(LayerSpec::Dense { inputs, units: w });
                    if k + 1 < widths.len() {
                        unit.push(LayerSpec::Relu);
                    }
                    units.push(unit);
                    inputs = w;
                }
                Ok(units)
            }
            Preset::TinyCnn => {
                if input_shape.len() != 3 {
                    return Err(Error::config("model.preset", format!("tiny-cnn needs C×H×W input, got {input_shape:?}")));
                }
                let conv = |c, f| LayerSpec::Conv2d {
                    in_channels: c,
                    filters: f,
                    kernel: 3,
                    stride: 1,
                    padding: Padding::Same,
                };
                let flat = 16 * (input_shape[1] / 4) * (input_shape[2] / 4);
                Ok(vec![
                    vec![conv(input_shape[0], 8), LayerSpec::Relu, LayerSpec::MaxPool2d { size: 2 }],
                    vec![conv(8, 16), LayerSpec::Relu, LayerSpec::MaxPool2d { size: 2 }],
                    vec![LayerSpec::Flatten, LayerSpec::Dense { inputs: flat, units: 256 }, LayerSpec::Relu],
                    vec![LayerSpec::Dense { inputs: 256, units: classes }],
                ])
            }
            Preset::LstmStack { layers, units } => {
                if input_shape.len() != 1 {
                    return Err(Error::config("model.preset", format!("lstm-stack needs vector input, got {input_shape:?}")));
                }
                let mut out = Vec::new();
                let mut inputs = input_shape[0];
                for k in 0..*layers {
                    let mut unit = vec![LayerSpec::Lstm { inputs, units: *units }];
                    if k + 1 == *layers {
                        unit.push(LayerSpec::Dense { inputs: *units, units: classes });
                    }
                    out.push(unit);
                    inputs = *units;
                }
                Ok(out)
            }
        }
    }
}

/// Critic head for a per-example feature shape: a dense layer for
/// vectors, or conv/relu/global-average-pool/dense for feature maps.
pub fn critic_for(feature_shape: &[usize], classes: usize) -> Result<Vec<LayerSpec>> {
    match feature_shape {
        [d] => Ok(vec![LayerSpec::Dense { inputs: *d, units: classes }]),
        [c, _, _] => Ok(vec![
            LayerSpec::Conv2d {
                in_channels: *c,
                filters: *c,
                kernel: 3,
                stride: 1,
                padding: Padding::Same,
            },
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Dense { inputs: *c, units: classes },
        ]),
        other => Err(Error::dim("critic", format!("no critic for feature shape {other:?}"))),
    }
}

/// Sizes of `n + 1` contiguous groups over `units` units, as even as
/// possible with the later groups taking the remainder.
pub fn split_sizes(units: usize, n_critics: usize) -> Result<Vec<usize>> {
    if n_critics >= units {
        return Err(Error::config(
            "model.n_critics",
            format!("{n_critics} critics need more than {n_critics} layers, the network has {units}"),
        ));
    }
    let groups = n_critics + 1;
    let (base, rem) = (units / groups, units % groups);
    Ok((0..groups).map(|g| base + usize::from(g >= groups - rem)).collect())
}

/// Layer layout of a partitioned network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub preset: String,
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub groups: Vec<Vec<LayerSpec>>,
    pub critics: Vec<Vec<LayerSpec>>,
    /// Unroll length for recurrent networks.
    pub bptt: Option<usize>,
}

impl Architecture {
    pub fn build(preset_name: &str, preset: &Preset, n_critics: usize, input_shape: &[usize], classes: usize, bptt: Option<usize>) -> Result<Self> {
        let units = preset.units(input_shape, classes)?;
        let sizes = split_sizes(units.len(), n_critics)?;
        let mut groups = Vec::with_capacity(sizes.len());
        let mut it = units.into_iter();
        for size in sizes {
            groups.push(it.by_ref().take(size).flatten().collect::<Vec<_>>());
        }
        let recurrent = groups.iter().flatten().any(LayerSpec::is_recurrent);
        if recurrent != bptt.is_some() {
            return Err(Error::config("data.bptt", "a BPTT length is required for recurrent presets and only for them"));
        }
        let mut critics = Vec::with_capacity(n_critics);
        let mut shape = input_shape.to_vec();
        for group in &groups[..n_critics] {
            for l in group {
                shape = l.output_shape(&shape)?;
            }
            critics.push(critic_for(&shape, classes)?);
        }
        let arch = Architecture {
            preset: preset_name.to_string(),
            input_shape: input_shape.to_vec(),
            classes,
            groups,
            critics,
            bptt,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_critics(&self) -> usize {
        self.critics.len()
    }

    pub fn is_recurrent(&self) -> bool {
        self.bptt.is_some()
    }

    /// Per-example input shape of each group, plus the output shape of the last.
    pub fn boundary_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for g in &self.groups {
            let mut s = shapes.last().unwrap().clone();
            for l in g {
                s = l.output_shape(&s)?;
            }
            shapes.push(s);
        }
        Ok(shapes)
    }

    /// Checks group chaining, critic inputs and the shared class dimension.
    pub fn validate(&self) -> Result<()> {
        if self.critics.len() + 1 != self.groups.len() {
            return Err(Error::contract(format!(
                "{} groups need {} critics, found {}",
                self.groups.len(),
                self.groups.len().saturating_sub(1),
                self.critics.len()
            )));
        }
        let shapes = self.boundary_shapes()?;
        if shapes.last().unwrap() != &[self.classes] {
            return Err(Error::dim(
                "architecture",
                format!("main output {:?} is not the {} classes", shapes.last().unwrap(), self.classes),
            ));
        }
        for (i, c) in self.critics.iter().enumerate() {
            let mut s = shapes[i + 1].clone();
            for l in c {
                s = l.output_shape(&s)?;
            }
            if s != [self.classes] {
                return Err(Error::dim("architecture", format!("critic {} outputs {s:?}", i + 1)));
            }
        }
        Ok(())
    }
}

/// Layer groups and critics with their parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionedModel {
    pub arch: Architecture,
    pub groups: Vec<Sequential>,
    pub critics: Vec<Sequential>,
}

impl PartitionedModel {
    /// Draws main-network weights from `seed` in layer order, then critic
    /// weights from a derived seed.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups = arch.groups.iter().map(|g| Sequential::from_specs(g, &mut rng)).collect();
        let mut crng = ChaCha8Rng::seed_from_u64(seed ^ CRITIC_SEED_SALT);
        let critics = arch.critics.iter().map(|c| Sequential::from_specs(c, &mut crng)).collect();
        PartitionedModel { arch, groups, critics }
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    /// Group `i` (0-based) applied eagerly to a sequence, from zero state.
    pub fn group_forward(&self, i: usize, h_prev: Vec<Tensor>) -> Result<Vec<Tensor>> {
        let group = self.groups.get(i).ok_or_else(|| Error::contract(format!("no group {i}")))?;
        run_eager(group, h_prev)
    }

    /// Per-example cross-entropy of critic `i` on `h` (summed over steps)
    /// and its batch mean.
    pub fn critic_loss(&self, i: usize, h: Vec<Tensor>, targets: &[Vec<usize>]) -> Result<(Tensor, f64)> {
        let critic = self.critics.get(i).ok_or_else(|| Error::contract(format!("no critic {i}")))?;
        let logits = run_eager(critic, h)?;
        let mut g = Eager::new();
        let per = crate::nn::loss::sequence_cross_entropy(&mut g, &logits, targets)?;
        let mean = g.mean(&per)?.item()?;
        Ok((per, mean))
    }

    /// Main-network logits per step.
    pub fn forward(&self, xs: Vec<Tensor>) -> Result<Vec<Tensor>> {
        let mut h = xs;
        for g in &self.groups {
            h = run_eager(g, h)?;
        }
        Ok(h)
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.groups.iter().chain(&self.critics).flat_map(Sequential::params)
    }
}

/// Eager forward of one stack from zero recurrent state.
pub fn run_eager(net: &Sequential, xs: Vec<Tensor>) -> Result<Vec<Tensor>> {
    let mut g = Eager::new();
    let bound = net.bind(&mut g);
    let mut states = vec![None; net.layers.len()];
    net.forward(&mut g, &bound, xs, &mut states)
}

/// Dense one-hot rows for byte ids.
pub fn one_hot(ids: &[usize], width: usize) -> Result<Tensor> {
    let mut data = vec![0.0; ids.len() * width];
    for (r, &id) in ids.iter().enumerate() {
        if id >= width {
            return Err(Error::contract(format!("id {id} out of range for width {width}")));
        }
        data[r * width + id] = 1.0;
    }
    Tensor::new(vec![ids.len(), width], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp(n: usize) -> Architecture {
        let p = Preset::parse("mlp-300-150-10", 0, 0).unwrap();
        Architecture::build("mlp-300-150-10", &p, n, &[1, 28, 28], 10, None).unwrap()
    }

    #[test]
    fn split_puts_remainder_last() {
        assert_eq!(split_sizes(3, 1).unwrap(), vec![1, 2]);
        assert_eq!(split_sizes(5, 3).unwrap(), vec![1, 1, 1, 2]);
        assert_eq!(split_sizes(4, 3).unwrap(), vec![1, 1, 1, 1]);
        assert_eq!(split_sizes(3, 0).unwrap(), vec![3]);
        assert!(matches!(split_sizes(3, 3), Err(Error::Config { .. })));
    }

    #[test]
    fn mlp_groups() {
        let a = mlp(1);
        assert_eq!(a.groups.len(), 2);
        assert!(matches!(a.groups[0][..], [LayerSpec::Flatten, LayerSpec::Dense { units: 300, .. }, LayerSpec::Relu]));
        assert!(matches!(
            a.groups[1][..],
            [LayerSpec::Dense { units: 150, .. }, LayerSpec::Relu, LayerSpec::Dense { units: 10, .. }]
        ));
        assert_eq!(a.critics, vec![vec![LayerSpec::Dense { inputs: 300, units: 10 }]]);
        assert!(mlp(0).critics.is_empty());
    }

    #[test]
    fn lstm_one_layer_per_group() {
        let p = Preset::parse("lstm-stack", 4, 16).unwrap();
        let a = Architecture::build("lstm-stack", &p, 3, &[30], 30, Some(5)).unwrap();
        assert_eq!(a.groups.len(), 4);
        for g in &a.groups {
            assert_eq!(g.iter().filter(|l| l.is_recurrent()).count(), 1);
        }
        assert!(Architecture::build("lstm-stack", &p, 3, &[30], 30, None).is_err());
    }

    #[test]
    fn unknown_preset_and_class_mismatch() {
        assert!(Preset::parse("resnet", 0, 0).is_err());
        assert!(Preset::parse("mlp-3-x", 0, 0).is_err());
        let p = Preset::parse("mlp-300-150-10", 0, 0).unwrap();
        assert!(Architecture::build("m", &p, 0, &[2], 3, None).is_err());
    }

    #[test]
    fn init_independent_of_critics() {
        let a = PartitionedModel::init(mlp(0), 5);
        let b = PartitionedModel::init(mlp(1), 5);
        let pa: Vec<_> = a.groups.iter().flat_map(|g| g.params()).collect();
        let pb: Vec<_> = b.groups.iter().flat_map(|g| g.params()).collect();
        assert_eq!(pa, pb);
    }
}
