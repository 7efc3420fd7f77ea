//! Affine layers, the staged encoder, projection heads, and their tape
//! bindings.
//!
//! Weights are stored input-major (`in × out`), so a layer computes
//! `x · W + b` on row batches.

use crate::numerics::{add_row_bias_kernel, l2_normalize, matmul_kernel, relu_kernel, Gradients, NumericsError, Rng, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// He-normal weights, zero bias.
    pub fn init(input: usize, output: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / input as f64).sqrt();
        let w = (0..input * output).map(|_| std * rng.normal()).collect();
        Self { weight: Tensor::from_vec(vec![input, output], w).expect("positive dims"), bias: Tensor::zeros(&[output]) }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Tensor::zeros(&[input, output]), bias: Tensor::zeros(&[output]) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NumericsError> {
        if x.shape().len() != 2 || x.shape()[1] != self.input_dim() {
            return Err(NumericsError::dims("linear", x.shape(), self.weight.shape()));
        }
        let (b, i, o) = (x.shape()[0], self.input_dim(), self.output_dim());
        let h = matmul_kernel(x.data(), self.weight.data(), b, i, o);
        Tensor::from_vec(vec![b, o], add_row_bias_kernel(&h, self.bias.data()))
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> LinearVars {
        if trainable {
            LinearVars { w: tape.param(&self.weight), b: tape.param(&self.bias) }
        } else {
            LinearVars { w: tape.constant(self.weight.clone()), b: tape.constant(self.bias.clone()) }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

impl LinearVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, NumericsError> {
        let h = tape.matmul(x, self.w)?;
        tape.add_row_bias(h, self.b)
    }
}

fn relu(t: Tensor) -> Tensor {
    let shape = t.shape().to_vec();
    Tensor::from_vec(shape, relu_kernel(t.data())).expect("same shape")
}

/// Stack of affine + ReLU stages.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub stages: Vec<Linear>,
}

impl Encoder {
    pub fn init(input_dim: usize, widths: &[usize], rng: &mut Rng) -> Self {
        let mut stages = Vec::with_capacity(widths.len());
        let mut prev = input_dim;
        for &w in widths {
            stages.push(Linear::init(prev, w, rng));
            prev = w;
        }
        Self { stages }
    }

    pub fn input_dim(&self) -> usize {
        self.stages[0].input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.stages.last().map_or(0, Linear::output_dim)
    }

    /// Activation after every stage; the last one is the feature `v`.
    pub fn forward_stages(&self, x: &Tensor) -> Result<Vec<Tensor>, NumericsError> {
        let mut acts = Vec::with_capacity(self.stages.len());
        let mut h = x.clone();
        for stage in &self.stages {
            h = relu(stage.forward(&h)?);
            acts.push(h.clone());
        }
        Ok(acts)
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor, NumericsError> {
        let mut h = x.clone();
        for stage in &self.stages {
            h = relu(stage.forward(&h)?);
        }
        Ok(h)
    }
}

/// Two-layer MLP with ReLU between layers and L2-normalized output.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub hidden: Linear,
    pub output: Linear,
}

impl ProjectionHead {
    pub fn init(input: usize, hidden: usize, embed: usize, rng: &mut Rng) -> Self {
        Self { hidden: Linear::init(input, hidden, rng), output: Linear::init(hidden, embed, rng) }
    }

    pub fn embed_dim(&self) -> usize {
        self.output.output_dim()
    }

    pub fn forward(&self, features: &Tensor) -> Result<Tensor, NumericsError> {
        let h = relu(self.hidden.forward(features)?);
        Ok(l2_normalize(&self.output.forward(&h)?))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub hidden: LinearVars,
    pub output: LinearVars,
}

impl HeadVars {
    pub fn forward(&self, tape: &mut Tape, features: Var) -> Result<Var, NumericsError> {
        let h = self.hidden.forward(tape, features)?;
        let h = tape.relu(h);
        let z = self.output.forward(tape, h)?;
        Ok(tape.l2_normalize(z))
    }
}

/// Shared encoder plus whichever heads the objective uses.
///
/// Parameter names: `encoder.{i}.weight|bias`, `classifier.weight|bias`,
/// `selfsup_head.{hidden|output}.weight|bias`,
/// `supcon_head.{hidden|output}.weight|bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub encoder: Encoder,
    pub classifier: Option<Linear>,
    pub selfsup_head: Option<ProjectionHead>,
    pub supcon_head: Option<ProjectionHead>,
}

#[derive(Debug, Clone)]
pub struct NetworkVars {
    pub encoder: Vec<LinearVars>,
    pub classifier: Option<LinearVars>,
    pub selfsup_head: Option<HeadVars>,
    pub supcon_head: Option<HeadVars>,
}

impl NetworkVars {
    pub fn forward_stages(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>, NumericsError> {
        let mut acts = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for stage in &self.encoder {
            let z = stage.forward(tape, h)?;
            h = tape.relu(z);
            acts.push(h);
        }
        Ok(acts)
    }

    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Var, NumericsError> {
        Ok(*self.forward_stages(tape, x)?.last().expect("non-empty encoder"))
    }

    /// Tape variables in the same order and with the same names as
    /// [`Network::named_params`].
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for (i, s) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), s.w));
            out.push((format!("encoder.{i}.bias"), s.b));
        }
        if let Some(c) = &self.classifier {
            out.push(("classifier.weight".into(), c.w));
            out.push(("classifier.bias".into(), c.b));
        }
        for (prefix, head) in [("selfsup_head", &self.selfsup_head), ("supcon_head", &self.supcon_head)] {
            if let Some(h) = head {
                out.push((format!("{prefix}.hidden.weight"), h.hidden.w));
                out.push((format!("{prefix}.hidden.bias"), h.hidden.b));
                out.push((format!("{prefix}.output.weight"), h.output.w));
                out.push((format!("{prefix}.output.bias"), h.output.b));
            }
        }
        out
    }
}

fn push_linear<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, l: &'a Linear) {
    out.push((format!("{prefix}.weight"), &l.weight));
    out.push((format!("{prefix}.bias"), &l.bias));
}

fn push_linear_mut<'a>(out: &mut Vec<(String, &'a mut Tensor)>, prefix: &str, l: &'a mut Linear) {
    out.push((format!("{prefix}.weight"), &mut l.weight));
    out.push((format!("{prefix}.bias"), &mut l.bias));
}

impl Network {
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, s) in self.encoder.stages.iter().enumerate() {
            push_linear(&mut out, &format!("encoder.{i}"), s);
        }
        if let Some(c) = &self.classifier {
            push_linear(&mut out, "classifier", c);
        }
        for (prefix, head) in [("selfsup_head", &self.selfsup_head), ("supcon_head", &self.supcon_head)] {
            if let Some(h) = head {
                push_linear(&mut out, &format!("{prefix}.hidden"), &h.hidden);
                push_linear(&mut out, &format!("{prefix}.output"), &h.output);
            }
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, s) in self.encoder.stages.iter_mut().enumerate() {
            push_linear_mut(&mut out, &format!("encoder.{i}"), s);
        }
        if let Some(c) = &mut self.classifier {
            push_linear_mut(&mut out, "classifier", c);
        }
        for (prefix, head) in [("selfsup_head", &mut self.selfsup_head), ("supcon_head", &mut self.supcon_head)] {
            if let Some(h) = head {
                push_linear_mut(&mut out, &format!("{prefix}.hidden"), &mut h.hidden);
                push_linear_mut(&mut out, &format!("{prefix}.output"), &mut h.output);
            }
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> NetworkVars {
        let bind_head = |h: &ProjectionHead, tape: &mut Tape| HeadVars {
            hidden: h.hidden.bind(tape, trainable),
            output: h.output.bind(tape, trainable),
        };
        NetworkVars {
            encoder: self.encoder.stages.iter().map(|s| s.bind(tape, trainable)).collect(),
            classifier: self.classifier.as_ref().map(|c| c.bind(tape, trainable)),
            selfsup_head: self.selfsup_head.as_ref().map(|h| bind_head(h, tape)),
            supcon_head: self.supcon_head.as_ref().map(|h| bind_head(h, tape)),
        }
    }

    /// Copies tape gradients into each parameter's `grad` slot
    /// (zero for parameters the loss did not reach).
    pub fn store_grads(&mut self, vars: &NetworkVars, grads: &Gradients) {
        let named = vars.named_vars();
        for ((name, p), (vname, v)) in self.named_params_mut().into_iter().zip(named) {
            debug_assert_eq!(name, vname);
            p.grad = Some(grads.wrt(v));
        }
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }

    pub fn logits(&self, x: &Tensor) -> Result<Option<Tensor>, NumericsError> {
        match &self.classifier {
            Some(c) => Ok(Some(c.forward(&self.encoder.features(x)?)?)),
            None => Ok(None),
        }
    }

    /// Encoder plus projection heads, without the classifier.
    pub fn key_copy(&self) -> Network {
        Network {
            encoder: self.encoder.clone(),
            classifier: None,
            selfsup_head: self.selfsup_head.clone(),
            supcon_head: self.supcon_head.clone(),
        }
    }
}
