//! The four-part continual model (encoder, linear classifier, classifier
//! projection, projection head) and its stochastically updated EMA mirror.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::real::Real;
use crate::snapshot::{config_hash, Container};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Hidden widths of the encoder; the last entry is the feature width.
    pub encoder_widths: Vec<usize>,
    pub num_classes: usize,
    /// Widths of the projection head layers; the last entry is the
    /// contrastive embedding width.
    #[serde(default = "default_projection")]
    pub projection_widths: Vec<usize>,
    /// Widths of the classifier projection layers, applied to the logits.
    #[serde(default = "default_classifier_projection")]
    pub classifier_projection_widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

fn default_projection() -> Vec<usize> {
    vec![64, 64, 128]
}

fn default_classifier_projection() -> Vec<usize> {
    vec![32, 32]
}

impl ModelConfig {
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            encoder_widths: vec![64, 32],
            num_classes,
            projection_widths: default_projection(),
            classifier_projection_widths: default_classifier_projection(),
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let groups = [
            ("encoder_widths", &self.encoder_widths),
            ("projection_widths", &self.projection_widths),
            ("classifier_projection_widths", &self.classifier_projection_widths),
        ];
        for (name, widths) in groups {
            if widths.is_empty() || widths.contains(&0) {
                return Err(contract(format!("{name} must be non-empty and positive")));
            }
        }
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(contract("input_dim and num_classes must be positive"));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.encoder_widths.last().unwrap()
    }

    pub fn projection_dim(&self) -> usize {
        *self.projection_widths.last().unwrap()
    }

    pub fn classifier_projection_dim(&self) -> usize {
        *self.classifier_projection_widths.last().unwrap()
    }

    /// `(name, fan_in, fan_out)` for every affine layer, in parameter order.
    fn layers(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let mut chain = |prefix: &str, input: usize, widths: &[usize]| {
            let mut fan_in = input;
            for (i, &w) in widths.iter().enumerate() {
                out.push((format!("{prefix}.{i}"), fan_in, w));
                fan_in = w;
            }
        };
        chain("f", self.input_dim, &self.encoder_widths);
        chain("g_lin", self.feature_dim(), &[self.num_classes]);
        chain("g_mlp", self.num_classes, &self.classifier_projection_widths);
        chain("h", self.feature_dim(), &self.projection_widths);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().iter().map(|(_, i, o)| i * o + o).sum()
    }

    pub fn hash(&self) -> u64 {
        config_hash(self)
    }
}

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T: Real = f64> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> ParamSet<T> {
    pub fn new(entries: Vec<(String, Tensor<T>)>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn numel(&self) -> usize {
        self.tensors().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.tensors()
            .zip(other.tensors())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> Vec<Var> {
        self.tensors().map(|t| tape.leaf(t.clone(), trainable)).collect()
    }

    pub fn write_into(&self, container: &mut Container, prefix: &str) {
        for (name, t) in &self.entries {
            container.put(format!("{prefix}/{name}"), t.cast());
        }
    }

    /// Reads back tensors laid out like `self` from `container`.
    pub fn read_like(&self, container: &Container, prefix: &str) -> Result<Self> {
        let entries = self
            .entries
            .iter()
            .map(|(name, t)| {
                let stored = container.get(&format!("{prefix}/{name}"))?;
                if stored.shape() != t.shape() {
                    return Err(Error::Shape {
                        op: "snapshot",
                        left: stored.shape().to_vec(),
                        right: t.shape().to_vec(),
                    });
                }
                Ok((name.clone(), stored.cast()))
            })
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }
}

/// Handles to model outputs recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct Outputs {
    /// Encoder activations `F`.
    pub features: Var,
    /// Raw classifier logits.
    pub logits: Var,
    /// Unit-norm projection head embedding.
    pub z: Var,
    /// Unit-norm classifier projection embedding.
    pub c: Var,
}

fn affine<T: Real>(tape: &Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let rows = tape.shape(x)[0];
    let xw = tape.matmul(x, w)?;
    // bias broadcast over rows as ones(rows,1) * b
    let ones = tape.constant(Tensor::ones(rows, 1));
    let bias = tape.matmul(ones, b)?;
    tape.add(xw, bias)
}

fn mlp<T: Real>(tape: &Tape<T>, mut x: Var, params: &[Var], relu_last: bool) -> Result<Var> {
    let n = params.len() / 2;
    for i in 0..n {
        x = affine(tape, x, params[2 * i], params[2 * i + 1])?;
        if i + 1 < n || relu_last {
            x = tape.relu(x)?;
        }
    }
    Ok(x)
}

struct Split<'a> {
    encoder: &'a [Var],
    classifier: &'a [Var],
    classifier_projection: &'a [Var],
    projection: &'a [Var],
}

fn split<'a>(config: &ModelConfig, params: &'a [Var]) -> Result<Split<'a>> {
    let e = 2 * config.encoder_widths.len();
    let g = e + 2;
    let m = g + 2 * config.classifier_projection_widths.len();
    let h = m + 2 * config.projection_widths.len();
    if params.len() != h {
        return Err(contract(format!(
            "model expects {h} parameter tensors, got {}",
            params.len()
        )));
    }
    Ok(Split {
        encoder: &params[..e],
        classifier: &params[e..g],
        classifier_projection: &params[g..m],
        projection: &params[m..h],
    })
}

fn check_input<T: Real>(tape: &Tape<T>, config: &ModelConfig, x: Var) -> Result<()> {
    let shape = tape.shape(x);
    if shape.len() != 2 || shape[1] != config.input_dim {
        return Err(Error::Shape {
            op: "forward",
            left: shape,
            right: vec![0, config.input_dim],
        });
    }
    Ok(())
}

/// Full forward pass: `F = f(X)`, logits `g_lin(F)`, `Z = norm(h(F))`, and
/// `C = norm(g_mlp(logits))`.
pub fn forward_all<T: Real>(
    tape: &Tape<T>,
    config: &ModelConfig,
    params: &[Var],
    x: Var,
) -> Result<Outputs> {
    check_input(tape, config, x)?;
    let p = split(config, params)?;
    let features = mlp(tape, x, p.encoder, true)?;
    let logits = mlp(tape, features, p.classifier, false)?;
    let z = mlp(tape, features, p.projection, false)?;
    let z = tape.l2_normalize_rows(z)?;
    let c = mlp(tape, logits, p.classifier_projection, false)?;
    let c = tape.l2_normalize_rows(c)?;
    Ok(Outputs {
        features,
        logits,
        z,
        c,
    })
}

/// Logits only, skipping both projection networks.
pub fn forward_logits<T: Real>(
    tape: &Tape<T>,
    config: &ModelConfig,
    params: &[Var],
    x: Var,
) -> Result<Var> {
    check_input(tape, config, x)?;
    let p = split(config, params)?;
    let features = mlp(tape, x, p.encoder, true)?;
    mlp(tape, features, p.classifier, false)
}

/// Parameter-group membership of a parameter index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Encoder,
    Classifier,
    ClassifierProjection,
    ProjectionHead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinualModel<T: Real = f64> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

impl<T: Real> ContinualModel<T> {
    /// Symmetric uniform fan-in initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut entries = Vec::new();
        for (name, fan_in, fan_out) in config.layers() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut draw = |n: usize| -> Vec<T> {
                (0..n)
                    .map(|_| T::lit(rng.random_range(-bound..bound)))
                    .collect()
            };
            let w = Tensor::matrix(fan_in, fan_out, draw(fan_in * fan_out))?;
            let b = Tensor::matrix(1, fan_out, draw(fan_out))?;
            entries.push((format!("{name}.weight"), w));
            entries.push((format!("{name}.bias"), b));
        }
        Ok(Self {
            config,
            params: ParamSet::new(entries),
        })
    }

    pub fn component_of(&self, index: usize) -> Component {
        let name = self.params.names().nth(index).unwrap_or_default();
        match name.split('.').next() {
            Some("f") => Component::Encoder,
            Some("g_lin") => Component::Classifier,
            Some("g_mlp") => Component::ClassifierProjection,
            _ => Component::ProjectionHead,
        }
    }

    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> Vec<Var> {
        self.params.bind(tape, trainable)
    }

    /// Evaluates all outputs for `x` on a private tape.
    pub fn forward_values(&self, x: &Tensor<T>) -> Result<[Tensor<T>; 4]> {
        outputs_on_private_tape(&self.config, &self.params, x)
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let vars = self.params.bind(&tape, false);
        let xv = tape.constant(x.clone());
        let y = forward_logits(&tape, &self.config, &vars, xv)?;
        Ok(tape.value(y))
    }

    /// Applies `theta <- theta - lr * grad` to every parameter.
    pub fn sgd_step(&mut self, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(contract("one gradient per parameter tensor is required"));
        }
        let lr = T::lit(lr);
        for (p, g) in self.params.tensors_mut().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "sgd_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            for (v, d) in p.data_mut().iter_mut().zip(g.data()) {
                *v = *v - lr * *d;
            }
        }
        Ok(())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(self.config.hash(), T::PRECISION);
        self.params.write_into(&mut c, "param");
        c
    }

    pub fn from_container(config: ModelConfig, container: &Container) -> Result<Self> {
        if container.config_hash != config.hash() {
            return Err(Error::Snapshot(format!(
                "snapshot was written for config {:016x}, expected {:016x}",
                container.config_hash,
                config.hash()
            )));
        }
        let template = Self::new(config, &mut crate::rng::stream(0, crate::rng::Stream::Init))?;
        let params = template.params.read_like(container, "param")?;
        Ok(Self {
            config: template.config,
            params,
        })
    }
}

fn outputs_on_private_tape<T: Real>(
    config: &ModelConfig,
    params: &ParamSet<T>,
    x: &Tensor<T>,
) -> Result<[Tensor<T>; 4]> {
    let tape = Tape::new();
    let vars = params.bind(&tape, false);
    let xv = tape.constant(x.clone());
    let o = forward_all(&tape, config, &vars, xv)?;
    Ok([
        tape.value(o.features),
        tape.value(o.logits),
        tape.value(o.z),
        tape.value(o.c),
    ])
}

/// Exponential moving average of the model parameters, updated with
/// probability `rate` per call.
#[derive(Debug, Clone)]
pub struct EmaState<T: Real = f64> {
    pub params: ParamSet<T>,
    pub decay: f64,
    pub rate: f64,
    rng: ChaCha8Rng,
}

impl<T: Real> EmaState<T> {
    pub fn new(source: &ParamSet<T>, decay: f64, rate: f64, rng: ChaCha8Rng) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) || !(0.0..=1.0).contains(&rate) {
            return Err(contract(format!(
                "EMA decay and rate must lie in [0, 1], got {decay} and {rate}"
            )));
        }
        Ok(Self {
            params: source.clone(),
            decay,
            rate,
            rng,
        })
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn set_rng(&mut self, rng: ChaCha8Rng) {
        self.rng = rng;
    }

    /// Draws `u` uniformly from `(0, 1]`; when `rate >= u`, moves the mirror
    /// toward `current` by `mirror = decay * mirror + (1 - decay) * current`.
    pub fn update(&mut self, current: &ParamSet<T>) -> Result<bool> {
        if !self.params.same_layout(current) {
            return Err(contract("EMA and model parameter layouts differ"));
        }
        let u = 1.0 - self.rng.random::<f64>();
        if self.rate < u {
            return Ok(false);
        }
        let keep = T::lit(self.decay);
        let take = T::lit(1.0 - self.decay);
        for (e, p) in self.params.tensors_mut().zip(current.tensors()) {
            for (ev, &pv) in e.data_mut().iter_mut().zip(p.data()) {
                *ev = keep * *ev + take * pv;
            }
        }
        Ok(true)
    }

    /// Forward pass through the mirror; its parameters enter the tape as
    /// constants so nothing upstream of the outputs receives gradient.
    pub fn forward(&self, tape: &Tape<T>, config: &ModelConfig, x: Var) -> Result<Outputs> {
        let vars = self.params.bind(tape, false);
        forward_all(tape, config, &vars, x)
    }

    pub fn forward_values(&self, config: &ModelConfig, x: &Tensor<T>) -> Result<[Tensor<T>; 4]> {
        outputs_on_private_tape(config, &self.params, x)
    }
}
