//! MLP encoder `x → (h, z)` and the linear classification head.
//!
//! The backbone is a stack of affine layers each followed by relu; `h` is
//! the output of the last backbone layer. The projection head maps `h` to
//! `K` dimensions and rows are L2-normalized to give `z`. The classifier
//! reads `h`.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::{Graph, Matrix, Tensor, DEGENERATE_ROW_NORM};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub input: usize,
    /// Backbone widths; the last entry is the feature width `H`.
    pub hidden: Vec<usize>,
    /// Projection width `K`.
    pub proj: usize,
}

impl EncoderDims {
    pub fn new(input: usize, hidden: Vec<usize>, proj: usize) -> Self {
        Self {
            input,
            hidden,
            proj,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.proj == 0 || self.hidden.is_empty() || self.hidden.contains(&0)
        {
            return Err(Error::config(format!(
                "encoder dims must all be >= 1 with at least one hidden layer, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.hidden.last().expect("validated")
    }

    pub fn param_count(&self) -> usize {
        let mut fan_in = self.input;
        let mut total = 0;
        for &w in &self.hidden {
            total += w * fan_in + w;
            fan_in = w;
        }
        total + self.proj * fan_in + self.proj
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `out × in`
    pub weight: Matrix,
    /// `1 × out`
    pub bias: Matrix,
}

impl Linear {
    fn he_normal(fan_in: usize, fan_out: usize, rng: &mut crate::rng::Rng) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| {
                let n: f64 = StandardNormal.sample(rng);
                std * n
            })
            .collect::<Vec<f64>>();
        Self {
            weight: Matrix::new(fan_out, fan_in, data).expect("sized"),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> LinearVars {
        let leaf = |g: &mut Graph, m: &Matrix| {
            if trainable {
                g.param(m.clone())
            } else {
                g.constant(m.clone())
            }
        };
        LinearVars {
            weight: leaf(g, &self.weight),
            bias: leaf(g, &self.bias),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearVars {
    pub fn forward(&self, g: &mut Graph, x: Tensor) -> Result<Tensor> {
        let y = g.matmul_t(x, self.weight)?;
        g.add_row(y, self.bias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpEncoder {
    pub dims: EncoderDims,
    pub backbone: Vec<Linear>,
    pub projection: Linear,
}

/// Graph handles for the encoder parameters, in [`MlpEncoder::params`] order.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub backbone: Vec<LinearVars>,
    pub projection: LinearVars,
}

impl EncoderVars {
    pub fn leaves(&self) -> Vec<Tensor> {
        self.backbone
            .iter()
            .chain(std::iter::once(&self.projection))
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Encoded {
    pub h: Tensor,
    pub z: Tensor,
    /// Rows whose projection was too small to normalize reliably.
    pub degenerate_rows: Vec<usize>,
}

impl MlpEncoder {
    /// He-normal weights, zero biases; a pure function of `(seed, dims)`.
    pub fn init(seed: u64, dims: EncoderDims) -> Result<Self> {
        dims.validate()?;
        let mut rng = stream(seed, Stream::Init, &[]);
        let mut fan_in = dims.input;
        let mut backbone = Vec::with_capacity(dims.hidden.len());
        for &w in &dims.hidden {
            backbone.push(Linear::he_normal(fan_in, w, &mut rng));
            fan_in = w;
        }
        let projection = Linear::he_normal(fan_in, dims.proj, &mut rng);
        Ok(Self {
            dims,
            backbone,
            projection,
        })
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.backbone
            .iter()
            .chain(std::iter::once(&self.projection))
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.backbone
            .iter_mut()
            .chain(std::iter::once(&mut self.projection))
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|m| m.len()).sum()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> EncoderVars {
        EncoderVars {
            backbone: self.backbone.iter().map(|l| l.bind(g, trainable)).collect(),
            projection: self.projection.bind(g, trainable),
        }
    }

    pub fn forward(&self, g: &mut Graph, vars: &EncoderVars, x: Tensor) -> Result<Encoded> {
        if x.cols() != self.dims.input {
            return Err(Error::Shape {
                op: "encode",
                lhs: x.shape(),
                rhs: (x.rows(), self.dims.input),
            });
        }
        let mut h = x;
        for layer in &vars.backbone {
            h = layer.forward(g, h)?;
            h = g.relu(h)?;
        }
        let p = vars.projection.forward(g, h)?;
        let pv = g.value(p);
        let degenerate_rows: Vec<usize> = (0..pv.rows())
            .filter(|&r| pv.row_norm(r) < DEGENERATE_ROW_NORM)
            .collect();
        if !degenerate_rows.is_empty() {
            log::warn!(
                "encode: {} projection rows below norm {DEGENERATE_ROW_NORM:e}",
                degenerate_rows.len()
            );
        }
        let z = g.l2_normalize_rows(p)?;
        Ok(Encoded {
            h,
            z,
            degenerate_rows,
        })
    }

    /// Graph-free evaluation returning `(h, z)`.
    pub fn encode(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let input = g.constant(x.clone());
        let out = self.forward(&mut g, &vars, input)?;
        Ok((g.value(out.h).clone(), g.value(out.z).clone()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    pub layer: Linear,
}

impl LinearClassifier {
    pub fn zeros(features: usize, classes: usize) -> Self {
        Self {
            layer: Linear {
                weight: Matrix::zeros(classes, features),
                bias: Matrix::zeros(1, classes),
            },
        }
    }

    pub fn classes(&self) -> usize {
        self.layer.weight.rows()
    }

    pub fn features(&self) -> usize {
        self.layer.weight.cols()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> LinearVars {
        self.layer.bind(g, trainable)
    }

    /// Logits for backbone features `h` (no softmax).
    pub fn classify(&self, h: &Matrix) -> Result<Matrix> {
        if h.cols() != self.features() {
            return Err(Error::Shape {
                op: "classify",
                lhs: h.shape(),
                rhs: self.layer.weight.shape(),
            });
        }
        let mut logits = h.matmul_t(&self.layer.weight)?;
        for r in 0..logits.rows() {
            for (o, b) in logits.row_mut(r).iter_mut().zip(self.layer.bias.as_slice()) {
                *o += b;
            }
        }
        Ok(logits)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.layer.weight, &mut self.layer.bias]
    }

    pub fn params(&self) -> Vec<&Matrix> {
        vec![&self.layer.weight, &self.layer.bias]
    }
}

/// Encoder plus classification head.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub encoder: MlpEncoder,
    pub head: LinearClassifier,
}

impl Classifier {
    /// Logits for raw inputs.
    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        let (h, _) = self.encoder.encode(x)?;
        self.head.classify(&h)
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok((0..logits.rows())
            .map(|r| argmax(logits.row(r)))
            .collect())
    }
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
