//! Fully-connected networks with hand-written reverse mode.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Identity => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// How the raw output of the last layer is interpreted by the caller.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputHead {
    Plain,
    /// Outputs are log-variances: `max(exp(y), floor)`.
    LogVariance,
    /// First half means, second half log-variances.
    MeanLogVariance,
}

impl OutputHead {
    pub(crate) fn code(self) -> u8 {
        match self {
            OutputHead::Plain => 0,
            OutputHead::LogVariance => 1,
            OutputHead::MeanLogVariance => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(OutputHead::Plain),
            1 => Some(OutputHead::LogVariance),
            2 => Some(OutputHead::MeanLogVariance),
            _ => None,
        }
    }
}

/// Affine layer `y = W x + b`, `W` stored row-major as `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let mut layer = Self::zeros(inputs, outputs);
        for w in &mut layer.weights {
            *w = rng.random_range(-limit..limit);
        }
        layer
    }

    pub fn weight(&self, out: usize, inp: usize) -> f64 {
        self.weights[out * self.inputs + inp]
    }

    fn forward_into(&self, x: &[f64], y: &mut Vec<f64>) {
        y.clear();
        y.extend(self.biases.iter().enumerate().map(|(o, b)| {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>()
        }));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    pub layers: Vec<Dense>,
    pub hidden_activation: Activation,
    pub head: OutputHead,
}

/// Per-layer outputs kept for the backward pass. `values[0]` is the input,
/// `values[i]` the (activated) output of layer `i - 1`; the last entry is the
/// raw output.
#[derive(Debug, Clone)]
pub struct Trace {
    values: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.values.last().expect("trace has at least the input")
    }
}

impl DenseNet {
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        hidden_activation: Activation,
        head: OutputHead,
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2, "a network needs at least one layer");
        Self {
            layers: dims.windows(2).map(|d| Dense::glorot(d[0], d[1], rng)).collect(),
            hidden_activation,
            head,
        }
    }

    pub fn zeros(dims: &[usize], hidden_activation: Activation, head: OutputHead) -> Self {
        assert!(dims.len() >= 2, "a network needs at least one layer");
        Self {
            layers: dims.windows(2).map(|d| Dense::zeros(d[0], d[1])).collect(),
            hidden_activation,
            head,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.dims(), self.hidden_activation, self.head)
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.outputs));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.outputs).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// Parameter blocks in storage order: per layer, weights then biases.
    pub fn param_blocks(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.biases.as_slice()])
            .collect()
    }

    pub fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.biases.as_mut_slice()])
            .collect()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        Ok(())
    }

    /// Raw output of the last layer (the head is applied by the caller).
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.forward_into(&cur, &mut next);
            if i < last {
                for v in &mut next {
                    *v = self.hidden_activation.apply(*v);
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = Vec::with_capacity(layer.outputs);
            layer.forward_into(values.last().unwrap(), &mut y);
            if i < last {
                for v in &mut y {
                    *v = self.hidden_activation.apply(*v);
                }
            }
            values.push(y);
        }
        Ok(Trace { values })
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to the input. `d_out` is the gradient w.r.t. the raw
    /// output.
    pub fn backward(&self, trace: &Trace, d_out: &[f64], grad: &mut DenseNet) -> Vec<f64> {
        debug_assert_eq!(d_out.len(), self.output_dim());
        let mut delta = d_out.to_vec();
        let last = self.layers.len() - 1;
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let g = &mut grad.layers[i];
            let input = &trace.values[i];
            if i < last {
                for (d, y) in delta.iter_mut().zip(&trace.values[i + 1]) {
                    *d *= self.hidden_activation.derivative_from_output(*y);
                }
            }
            let mut d_in = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                g.biases[o] += d;
                if d == 0.0 {
                    continue;
                }
                let row = o * layer.inputs;
                for (j, &x) in input.iter().enumerate() {
                    g.weights[row + j] += d * x;
                    d_in[j] += d * layer.weights[row + j];
                }
            }
            delta = d_in;
        }
        delta
    }
}

/// `max(exp(y), floor)` and its derivative w.r.t. `y`.
pub fn variance_head(y: f64, floor: f64) -> (f64, f64) {
    let e = y.exp();
    if e > floor {
        (e, e)
    } else {
        (floor, 0.0)
    }
}
