//! Token-wise multilayer perceptrons: ReLU on hidden layers, identity on
//! the output layer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{matmul, Matrix};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    widths: Vec<usize>,
}

impl MlpSpec {
    /// `widths` lists the input width first and the output width last.
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Contract(format!(
                "an MLP needs at least two widths, got {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(Error::Contract(format!("zero width in {widths:?}")));
        }
        Ok(Self { widths })
    }

    /// `hidden` layers of `units` each between `input` and `output`.
    pub fn uniform(input: usize, hidden: usize, units: usize, output: usize) -> Result<Self> {
        let mut widths = vec![input];
        widths.extend(std::iter::repeat_n(units, hidden));
        widths.push(output);
        Self::new(widths)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    pub fn layer_count(&self) -> usize {
        self.widths.len() - 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `fan_in × fan_out`, applied as `x · weight`.
    pub weight: Matrix,
    /// `1 × fan_out`.
    pub bias: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
}

impl MlpParams {
    pub fn matrices(&self) -> impl Iterator<Item = &Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn matrices_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn parameter_count(&self) -> usize {
        self.matrices().map(|m| m.data().len()).sum()
    }
}

/// An [`MlpSpec`] together with its weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: MlpParams,
}

/// Parameter handles of an [`Mlp`] registered on a tape, in layer order
/// `(weight, bias)`.
#[derive(Clone, Debug)]
pub struct MlpVars {
    pub layers: Vec<(Var, Var)>,
}

impl MlpVars {
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

impl Mlp {
    /// Weights and biases uniform in `[-sqrt(1/fan_in), sqrt(1/fan_in)]`.
    pub fn init(spec: MlpSpec, rng: &mut impl Rng) -> Self {
        let layers = spec
            .widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (1.0 / fan_in as f64).sqrt();
                let mut draw = |_, _| rng.random_range(-bound..=bound);
                let weight = Matrix::from_fn(fan_in, fan_out, &mut draw);
                let bias = Matrix::from_fn(1, fan_out, &mut draw);
                Dense { weight, bias }
            })
            .collect();
        Self {
            spec,
            params: MlpParams { layers },
        }
    }

    pub fn zeros(spec: MlpSpec) -> Self {
        let layers = spec
            .widths
            .windows(2)
            .map(|w| Dense {
                weight: Matrix::zeros(w[0], w[1]),
                bias: Matrix::zeros(1, w[1]),
            })
            .collect();
        Self {
            spec,
            params: MlpParams { layers },
        }
    }

    /// A single affine layer `x · weight + bias`.
    pub fn affine(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(shape_err(
                "Mlp::affine",
                format!("bias of {} for {} outputs", bias.len(), weight.cols()),
            ));
        }
        let spec = MlpSpec::new(vec![weight.rows(), weight.cols()])?;
        let bias = Matrix::new(1, bias.len(), bias)?;
        Ok(Self {
            spec,
            params: MlpParams {
                layers: vec![Dense { weight, bias }],
            },
        })
    }

    /// Builds from explicit layers, checking them against `spec`.
    pub fn from_parts(spec: MlpSpec, params: MlpParams) -> Result<Self> {
        check_params(&spec, &params)?;
        Ok(Self { spec, params })
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        mlp_forward(&self.spec, &self.params, x)
    }

    pub fn register(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            layers: self
                .params
                .layers
                .iter()
                .map(|l| (tape.param(l.weight.clone()), tape.param(l.bias.clone())))
                .collect(),
        }
    }

    /// Records the forward pass of `x` with the weights bound to `vars`.
    pub fn forward_on_tape(&self, tape: &mut Tape, vars: &MlpVars, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.spec.input_width() {
            return Err(shape_err(
                "Mlp::forward_on_tape",
                format!(
                    "input has {} columns, MLP expects {}",
                    tape.value(x).cols(),
                    self.spec.input_width()
                ),
            ));
        }
        let last = vars.layers.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in vars.layers.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            let z = tape.add_row(z, b)?;
            h = if i < last { tape.relu(z) } else { z };
        }
        Ok(h)
    }
}

fn check_params(spec: &MlpSpec, params: &MlpParams) -> Result<()> {
    if params.layers.len() != spec.layer_count() {
        return Err(shape_err(
            "mlp",
            format!(
                "{} layers for widths {:?}",
                params.layers.len(),
                spec.widths
            ),
        ));
    }
    for (l, w) in params.layers.iter().zip(spec.widths.windows(2)) {
        if l.weight.shape() != (w[0], w[1]) || l.bias.shape() != (1, w[1]) {
            return Err(shape_err(
                "mlp",
                format!(
                    "layer {:?}/{:?} does not match widths {}→{}",
                    l.weight.shape(),
                    l.bias.shape(),
                    w[0],
                    w[1]
                ),
            ));
        }
    }
    Ok(())
}

/// Applies the MLP to every row of `x`.
pub fn mlp_forward(spec: &MlpSpec, params: &MlpParams, x: &Matrix) -> Result<Matrix> {
    check_params(spec, params)?;
    if x.cols() != spec.input_width() {
        return Err(shape_err(
            "mlp_forward",
            format!(
                "input has {} columns, MLP expects {}",
                x.cols(),
                spec.input_width()
            ),
        ));
    }
    let last = params.layers.len() - 1;
    let mut h = x.clone();
    for (i, layer) in params.layers.iter().enumerate() {
        h = matmul(&h, &layer.weight)?.add_row(layer.bias.row(0))?;
        if i < last {
            h = h.map(|v| v.max(0.0));
        }
    }
    Ok(h)
}
