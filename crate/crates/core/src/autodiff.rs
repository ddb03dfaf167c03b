//! Reverse-mode differentiation for multilayer perceptrons.
//!
//! A forward pass records every primitive (affine map, nonlinearity, dropout)
//! on a [`GradTape`] together with the intermediates its adjoint needs. The
//! backward pass walks the tape in reverse and accumulates parameter
//! gradients into a flat buffer laid out exactly like [`ParamVector`].

use std::sync::Arc;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

/// Shape of a fully connected network: `depth` hidden layers of `width` units.
/// `depth == 0` is a linear model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub depth: usize,
    pub width: usize,
    pub output_dim: usize,
    pub activation: Activation,
    pub dropout_rate: f64,
}

impl MlpSpec {
    pub fn new(input_dim: usize, depth: usize, width: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            depth,
            width,
            output_dim,
            activation: Activation::Relu,
            dropout_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidConfig(
                "input_dim and output_dim must be positive".into(),
            ));
        }
        if self.depth > 0 && self.width == 0 {
            return Err(Error::InvalidConfig("hidden width must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer, input first.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.depth + 1);
        let mut fan_in = self.input_dim;
        for _ in 0..self.depth {
            dims.push((fan_in, self.width));
            fan_in = self.width;
        }
        dims.push((fan_in, self.output_dim));
        dims
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::from_layer_dims(&self.layer_dims())
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Weight,
    Bias,
}

/// One contiguous tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub layer: usize,
    pub kind: BlockKind,
    pub shape: (usize, usize),
    pub offset: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.0 * self.shape.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Maps flat parameter indices to layers. Weights are stored row-major as
/// `(fan_in, fan_out)` so that a layer computes `x · W + b`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    blocks: Vec<ParamBlock>,
    total: usize,
}

impl ParamLayout {
    fn from_layer_dims(dims: &[(usize, usize)]) -> Self {
        let mut blocks = Vec::with_capacity(dims.len() * 2);
        let mut offset = 0;
        for (layer, &(fan_in, fan_out)) in dims.iter().enumerate() {
            blocks.push(ParamBlock {
                layer,
                kind: BlockKind::Weight,
                shape: (fan_in, fan_out),
                offset,
            });
            offset += fan_in * fan_out;
            blocks.push(ParamBlock {
                layer,
                kind: BlockKind::Bias,
                shape: (1, fan_out),
                offset,
            });
            offset += fan_out;
        }
        Self {
            blocks,
            total: offset,
        }
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len() / 2
    }

    fn weight(&self, layer: usize) -> &ParamBlock {
        &self.blocks[2 * layer]
    }

    fn bias(&self, layer: usize) -> &ParamBlock {
        &self.blocks[2 * layer + 1]
    }
}

/// Flat vector of trainable parameters plus its immutable layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Arc<ParamLayout>,
}

impl ParamVector {
    pub fn from_values(layout: Arc<ParamLayout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::LayoutMismatch {
                expected: layout.len(),
                actual: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteUpdate { param: i });
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(spec: &MlpSpec) -> Self {
        let layout = Arc::new(spec.layout());
        Self {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    /// Glorot-uniform weights, `U(-s, s)` with `s = init_scale * sqrt(6 / (fan_in + fan_out))`,
    /// and zero biases.
    pub fn init<R: Rng + ?Sized>(spec: &MlpSpec, init_scale: f64, rng: &mut R) -> Self {
        let mut params = Self::zeros(spec);
        for block in params.layout.clone().blocks() {
            if block.kind == BlockKind::Weight {
                let (fan_in, fan_out) = block.shape;
                let s = init_scale * (6.0 / (fan_in + fan_out) as f64).sqrt();
                for v in &mut params.values[block.range()] {
                    *v = if s > 0.0 {
                        rng.random_range(-s..s)
                    } else {
                        0.0
                    };
                }
            }
        }
        params
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access for optimizers. The length cannot change.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn weight(&self, layer: usize) -> ArrayView2<'_, f64> {
        let block = self.layout.weight(layer);
        ArrayView2::from_shape(block.shape, &self.values[block.range()])
            .expect("layout shape matches block length")
    }

    pub fn bias(&self, layer: usize) -> ArrayView1<'_, f64> {
        let block = self.layout.bias(layer);
        ArrayView1::from(&self.values[block.range()])
    }

    fn matches(&self, spec: &MlpSpec) -> Result<()> {
        let expected = spec.layout();
        if *self.layout != expected {
            return Err(Error::LayoutMismatch {
                expected: expected.len(),
                actual: self.len(),
            });
        }
        Ok(())
    }
}

/// Forward-pass mode. Training passes draw dropout masks from the supplied generator.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut dyn RngCore),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

enum TapeOp {
    Affine { layer: usize, input: Array2<f64> },
    Relu { layer: usize, output: Array2<f64> },
    Tanh { layer: usize, output: Array2<f64> },
    Dropout { scale: Array2<f64> },
}

/// Record of one forward pass. Consumed by [`mlp_backward`].
pub struct GradTape<'p> {
    ops: Vec<TapeOp>,
    params: &'p ParamVector,
    rows: usize,
    output_dim: usize,
}

impl GradTape<'_> {
    pub fn rows(&self) -> usize {
        self.rows
    }
}

fn check_finite(a: &Array2<f64>, layer: usize) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteIntermediate { layer })
    }
}

pub fn mlp_forward<'p>(
    spec: &MlpSpec,
    params: &'p ParamVector,
    batch: ArrayView2<'_, f64>,
    mut mode: Mode<'_>,
) -> Result<(Array2<f64>, GradTape<'p>)> {
    spec.validate()?;
    params.matches(spec)?;
    if batch.ncols() != spec.input_dim {
        return Err(Error::DimensionMismatch {
            layer: 0,
            expected: spec.input_dim,
            actual: batch.ncols(),
        });
    }
    for ((row, col), v) in batch.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::NonFiniteInput { row, col });
        }
    }

    let layers = spec.depth + 1;
    let mut ops = Vec::with_capacity(layers * 3);
    let mut h = batch.to_owned();
    for layer in 0..layers {
        let mut z = h.dot(&params.weight(layer));
        z += &params.bias(layer);
        check_finite(&z, layer)?;
        ops.push(TapeOp::Affine { layer, input: h });
        if layer + 1 == layers {
            h = z;
            break;
        }
        match spec.activation {
            Activation::Relu => {
                z.mapv_inplace(|v| v.max(0.0));
                ops.push(TapeOp::Relu {
                    layer,
                    output: z.clone(),
                });
            }
            Activation::Tanh => {
                z.mapv_inplace(f64::tanh);
                ops.push(TapeOp::Tanh {
                    layer,
                    output: z.clone(),
                });
            }
        }
        if let Mode::Train(rng) = &mut mode {
            if spec.dropout_rate > 0.0 {
                let keep = 1.0 - spec.dropout_rate;
                let scale = Array2::from_shape_simple_fn(z.raw_dim(), || {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                z *= &scale;
                ops.push(TapeOp::Dropout { scale });
            }
        }
        h = z;
    }

    let tape = GradTape {
        ops,
        params,
        rows: batch.nrows(),
        output_dim: spec.output_dim,
    };
    Ok((h, tape))
}

/// Backpropagates `loss_grad` (dLoss/dLogits) through the tape.
pub fn mlp_backward(tape: GradTape<'_>, loss_grad: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; tape.params.len()];
    mlp_backward_into(tape, loss_grad, &mut grad)?;
    Ok(grad)
}

/// Like [`mlp_backward`] but writes into a caller-provided buffer, which is overwritten.
pub fn mlp_backward_into(
    tape: GradTape<'_>,
    loss_grad: ArrayView2<'_, f64>,
    out: &mut [f64],
) -> Result<()> {
    let GradTape {
        ops,
        params,
        rows,
        output_dim,
    } = tape;
    let last_layer = params.layout.num_layers() - 1;
    if loss_grad.dim() != (rows, output_dim) {
        return Err(Error::DimensionMismatch {
            layer: last_layer,
            expected: output_dim,
            actual: loss_grad.ncols(),
        });
    }
    if out.len() != params.len() {
        return Err(Error::LengthMismatch {
            what: "gradient buffer",
            expected: params.len(),
            actual: out.len(),
        });
    }

    let mut upstream = loss_grad.to_owned();
    for op in ops.into_iter().rev() {
        match op {
            TapeOp::Dropout { scale } => upstream *= &scale,
            TapeOp::Relu { layer, output } => {
                Zip::from(&mut upstream).and(&output).for_each(|g, &y| {
                    if y <= 0.0 {
                        *g = 0.0;
                    }
                });
                check_finite(&upstream, layer)?;
            }
            TapeOp::Tanh { layer, output } => {
                Zip::from(&mut upstream)
                    .and(&output)
                    .for_each(|g, &y| *g *= 1.0 - y * y);
                check_finite(&upstream, layer)?;
            }
            TapeOp::Affine { layer, input } => {
                let wblock = params.layout.weight(layer);
                let bblock = params.layout.bias(layer);
                let dw = input.t().dot(&upstream);
                let db = upstream.sum_axis(Axis(0));
                for (dst, src) in out[wblock.range()].iter_mut().zip(dw.iter()) {
                    *dst = *src;
                }
                for (dst, src) in out[bblock.range()].iter_mut().zip(db.iter()) {
                    *dst = *src;
                }
                if out[wblock.offset..bblock.range().end]
                    .iter()
                    .any(|v| !v.is_finite())
                {
                    return Err(Error::NonFiniteIntermediate { layer });
                }
                if layer > 0 {
                    upstream = upstream.dot(&params.weight(layer).t());
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Reduction {
    Mean,
    Sum,
}

/// Softmax cross-entropy with log-sum-exp stabilisation. Returns the loss and dLoss/dLogits.
pub fn softmax_cross_entropy(
    logits: ArrayView2<'_, f64>,
    labels: &[usize],
    reduction: Reduction,
) -> Result<(f64, Array2<f64>)> {
    let (rows, classes) = logits.dim();
    if labels.len() != rows {
        return Err(Error::LengthMismatch {
            what: "labels",
            expected: rows,
            actual: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidConfig(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let scale = match reduction {
        Reduction::Mean => 1.0 / rows.max(1) as f64,
        Reduction::Sum => 1.0,
    };
    let mut grad = Array2::zeros((rows, classes));
    let mut loss = 0.0;
    for (i, (row, &y)) in logits.outer_iter().zip(labels).enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum_exp: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        loss += log_z - row[y];
        for (j, &v) in row.iter().enumerate() {
            grad[[i, j]] = (v - log_z).exp() * scale;
        }
        grad[[i, y]] -= scale;
    }
    Ok((loss * scale, grad))
}

/// Fraction of rows whose arg-max logit equals the label.
pub fn accuracy(logits: ArrayView2<'_, f64>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = logits
        .outer_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(row.view()) == y)
        .count();
    correct as f64 / labels.len() as f64
}

fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Eval-mode logits, no tape kept.
pub fn predict(
    spec: &MlpSpec,
    params: &ParamVector,
    batch: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    mlp_forward(spec, params, batch, Mode::Eval).map(|(logits, _)| logits)
}

#[derive(Debug, Clone)]
pub struct FdGradient {
    pub gradient: Vec<f64>,
    /// Set when `h` is below the resolution of at least one parameter, so
    /// `theta + h == theta` and that coordinate's difference is meaningless.
    pub underflow: bool,
}

/// Central-difference gradient of `loss_fn(logits)` with respect to every parameter, in eval mode.
pub fn finite_difference_gradient<F>(
    spec: &MlpSpec,
    params: &ParamVector,
    batch: ArrayView2<'_, f64>,
    loss_fn: F,
    h: f64,
) -> Result<FdGradient>
where
    F: Fn(ArrayView2<'_, f64>) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "step size {h} must be positive"
        )));
    }
    let mut probe = params.clone();
    let mut gradient = vec![0.0; params.len()];
    let mut underflow = false;
    for i in 0..params.len() {
        let theta = params.values[i];
        if theta + h == theta || theta - h == theta {
            underflow = true;
        }
        probe.values[i] = theta + h;
        let plus = loss_fn(predict(spec, &probe, batch)?.view());
        probe.values[i] = theta - h;
        let minus = loss_fn(predict(spec, &probe, batch)?.view());
        probe.values[i] = theta;
        gradient[i] = (plus - minus) / (2.0 * h);
    }
    Ok(FdGradient {
        gradient,
        underflow,
    })
}
