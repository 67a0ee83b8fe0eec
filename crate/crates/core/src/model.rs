//! Desk-scale classifiers with exact per-example gradients.
//!
//! Each trainable layer is one parameter group. A group's flat parameter
//! vector is the row-major weight matrix followed by the bias.

use std::fmt;
use std::str::FromStr;

use crate::data::Dataset;
use crate::error::{param, structural, Error, Result};
use crate::numerics::{DenseMatrix, RandomStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    /// Multinomial logistic regression, one group.
    LogReg,
    /// One tanh hidden layer, two groups.
    Mlp1,
}

impl Architecture {
    pub fn num_groups(self) -> usize {
        match self {
            Architecture::LogReg => 1,
            Architecture::Mlp1 => 2,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::LogReg => "logreg",
            Architecture::Mlp1 => "mlp1",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logreg" => Ok(Architecture::LogReg),
            "mlp1" => Ok(Architecture::Mlp1),
            other => Err(param(format!("unknown architecture {other:?} (expected logreg or mlp1)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGroup {
    pub group_id: usize,
    /// `out × in`.
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub stage_tag: String,
}

impl ParameterGroup {
    pub fn param_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.param_count());
        v.extend_from_slice(self.weight.as_slice());
        v.extend_from_slice(&self.bias);
        v
    }

    /// Applies `f(param, delta)` elementwise over the flat layout.
    pub fn update_with(&mut self, delta: &[f64], f: impl Fn(f64, f64) -> f64) -> Result<()> {
        if delta.len() != self.param_count() {
            return Err(structural(format!(
                "group {} has {} parameters, update has {}",
                self.group_id,
                self.param_count(),
                delta.len()
            )));
        }
        let nw = self.weight.rows() * self.weight.cols();
        for (p, &d) in self.weight.as_mut_slice().iter_mut().zip(&delta[..nw]) {
            *p = f(*p, d);
        }
        for (p, &d) in self.bias.iter_mut().zip(&delta[nw..]) {
            *p = f(*p, d);
        }
        Ok(())
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        self.update_with(flat, |_, x| x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub groups: Vec<ParameterGroup>,
    pub architecture: Architecture,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
}

/// Gradient of one example's loss with respect to one group.
#[derive(Debug, Clone, PartialEq)]
pub struct PerExampleGradient {
    pub group_id: usize,
    pub flat: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

fn broadcast(name: &str, values: &[f64], groups: usize) -> Result<Vec<f64>> {
    let out = match values.len() {
        1 => vec![values[0]; groups],
        n if n == groups => values.to_vec(),
        n => {
            return Err(param(format!(
                "{name}: expected 1 or {groups} values, got {n}"
            )))
        }
    };
    if let Some(bad) = out.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(param(format!("{name} must be positive and finite, got {bad}")));
    }
    Ok(out)
}

fn init_layer(
    rng: &mut crate::numerics::StreamRng,
    out: usize,
    inp: usize,
) -> DenseMatrix {
    let scale = 1.0 / (inp as f64).sqrt();
    let data = (0..out * inp).map(|_| scale * rng.standard_normal()).collect();
    DenseMatrix::new(out, inp, data).expect("finite init")
}

/// Weights are `N(0, 1/fan_in)`, biases zero. `clip_norms` and
/// `noise_multipliers` hold one value per group or a single shared value.
pub fn init_model(
    stream: RandomStream,
    architecture: Architecture,
    input_dim: usize,
    hidden_dim: usize,
    num_classes: usize,
    clip_norms: &[f64],
    noise_multipliers: &[f64],
) -> Result<ModelState> {
    if input_dim == 0 {
        return Err(param("input dimension must be positive"));
    }
    if num_classes < 2 {
        return Err(param(format!("need at least 2 classes, got {num_classes}")));
    }
    let g = architecture.num_groups();
    let clips = broadcast("clip_norms", clip_norms, g)?;
    let sigmas = broadcast("noise_multipliers", noise_multipliers, g)?;
    let mut rng = stream.generator();

    let shapes: Vec<(usize, usize, &str)> = match architecture {
        Architecture::LogReg => vec![(num_classes, input_dim, "output")],
        Architecture::Mlp1 => {
            if hidden_dim == 0 {
                return Err(param("mlp1 needs a positive hidden dimension"));
            }
            vec![
                (hidden_dim, input_dim, "hidden"),
                (num_classes, hidden_dim, "output"),
            ]
        }
    };
    let groups = shapes
        .into_iter()
        .enumerate()
        .map(|(id, (out, inp, tag))| ParameterGroup {
            group_id: id,
            weight: init_layer(&mut rng, out, inp),
            bias: vec![0.0; out],
            clip_norm: clips[id],
            noise_multiplier: sigmas[id],
            stage_tag: tag.to_owned(),
        })
        .collect();
    Ok(ModelState {
        groups,
        architecture,
        input_dim,
        hidden_dim: if architecture == Architecture::Mlp1 { hidden_dim } else { 0 },
        num_classes,
    })
}

fn affine(w: &DenseMatrix, b: &[f64], x: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|r| b[r] + w.row(r).iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
        .collect()
}

/// Softmax probabilities and `-log p[label]`, via log-sum-exp.
fn softmax_xent(logits: &[f64], label: usize) -> (Vec<f64>, f64) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probs = exps.iter().map(|e| e / sum).collect();
    let loss = sum.ln() + max - logits[label];
    (probs, loss)
}

struct Forward {
    hidden: Option<Vec<f64>>,
    logits: Vec<f64>,
}

impl ModelState {
    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group(&self, id: usize) -> Result<&ParameterGroup> {
        self.groups
            .get(id)
            .ok_or_else(|| structural(format!("no parameter group {id}")))
    }

    pub fn group_mut(&mut self, id: usize) -> Result<&mut ParameterGroup> {
        self.groups
            .get_mut(id)
            .ok_or_else(|| structural(format!("no parameter group {id}")))
    }

    fn check_example(&self, x: &[f64], label: usize) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(structural(format!(
                "example has {} features, model expects {}",
                x.len(),
                self.input_dim
            )));
        }
        if label >= self.num_classes {
            return Err(structural(format!(
                "label {label} outside [0, {})",
                self.num_classes
            )));
        }
        Ok(())
    }

    fn forward(&self, x: &[f64]) -> Forward {
        match self.architecture {
            Architecture::LogReg => {
                let g = &self.groups[0];
                Forward {
                    hidden: None,
                    logits: affine(&g.weight, &g.bias, x),
                }
            }
            Architecture::Mlp1 => {
                let (g1, g2) = (&self.groups[0], &self.groups[1]);
                let h: Vec<f64> = affine(&g1.weight, &g1.bias, x)
                    .into_iter()
                    .map(f64::tanh)
                    .collect();
                let logits = affine(&g2.weight, &g2.bias, &h);
                Forward {
                    hidden: Some(h),
                    logits,
                }
            }
        }
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(structural("feature length mismatch"));
        }
        Ok(self.forward(x).logits)
    }

    /// Cross-entropy of one example.
    pub fn loss(&self, x: &[f64], label: usize) -> Result<f64> {
        self.check_example(x, label)?;
        Ok(softmax_xent(&self.forward(x).logits, label).1)
    }

    /// Highest logit, lowest index on ties.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let logits = self.logits(x)?;
        let mut best = 0;
        for (k, &z) in logits.iter().enumerate().skip(1) {
            if z > logits[best] {
                best = k;
            }
        }
        Ok(best)
    }
}

/// Exact per-group gradients of the softmax cross-entropy for one example.
pub fn per_example_grads(
    model: &ModelState,
    features: &[f64],
    label: usize,
) -> Result<Vec<PerExampleGradient>> {
    per_example_grads_indexed(model, features, label, 0)
}

pub(crate) fn per_example_grads_indexed(
    model: &ModelState,
    x: &[f64],
    label: usize,
    example: usize,
) -> Result<Vec<PerExampleGradient>> {
    model.check_example(x, label)?;
    let fwd = model.forward(x);
    if fwd.logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numerical {
            example,
            message: "non-finite logits".into(),
        });
    }
    let (mut dz, _) = softmax_xent(&fwd.logits, label);
    dz[label] -= 1.0;

    let outer = |delta: &[f64], input: &[f64]| -> Vec<f64> {
        let mut v = Vec::with_capacity(delta.len() * (input.len() + 1));
        for &d in delta {
            v.extend(input.iter().map(|&a| d * a));
        }
        v.extend_from_slice(delta);
        v
    };

    let grads = match model.architecture {
        Architecture::LogReg => vec![PerExampleGradient {
            group_id: 0,
            flat: outer(&dz, x),
        }],
        Architecture::Mlp1 => {
            let h = fwd.hidden.as_deref().expect("mlp1 hidden activations");
            let w2 = &model.groups[1].weight;
            let dpre: Vec<f64> = (0..h.len())
                .map(|j| {
                    let dh: f64 = (0..w2.rows()).map(|k| w2.get(k, j) * dz[k]).sum();
                    dh * (1.0 - h[j] * h[j])
                })
                .collect();
            vec![
                PerExampleGradient {
                    group_id: 0,
                    flat: outer(&dpre, x),
                },
                PerExampleGradient {
                    group_id: 1,
                    flat: outer(&dz, h),
                },
            ]
        }
    };
    if grads.iter().any(|g| g.flat.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numerical {
            example,
            message: "non-finite gradient".into(),
        });
    }
    Ok(grads)
}

/// Mean cross-entropy and top-1 accuracy over `data`.
pub fn evaluate(model: &ModelState, data: &Dataset) -> Result<Evaluation> {
    if data.dim() != model.input_dim {
        return Err(structural(format!(
            "dataset has {} features, model expects {}",
            data.dim(),
            model.input_dim
        )));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for i in 0..data.len() {
        let x = data.features(i);
        let y = data.label(i);
        model.check_example(x, y)?;
        let logits = model.forward(x).logits;
        loss += softmax_xent(&logits, y).1;
        let mut best = 0;
        for (k, &z) in logits.iter().enumerate().skip(1) {
            if z > logits[best] {
                best = k;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        loss: loss / n,
        accuracy: correct as f64 / n,
    })
}
