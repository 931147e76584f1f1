//! Embedding lookup, same-length convolution, dense layers and dropout.

use rand::Rng;

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{glorot, Parameters};
use crate::tensor::Tensor;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Word embedding matrix `[V×d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub weights: Tensor,
    pub pad_id: usize,
    pub unk_id: usize,
    pub trainable: bool,
}

impl EmbeddingTable {
    pub fn new(weights: Tensor) -> Result<Self> {
        if weights.rank() != 2 {
            return Err(Error::shape("embedding table", weights.shape(), &[]));
        }
        Ok(EmbeddingTable {
            weights,
            pad_id: PAD_ID,
            unk_id: UNK_ID,
            trainable: true,
        })
    }

    pub fn random<R: Rng + ?Sized>(vocab: usize, dim: usize, rng: &mut R) -> Self {
        Self::new(Tensor::uniform(vec![vocab, dim], -0.05, 0.05, rng)).expect("rank 2")
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Registers the table so lookups yield a sparse row gradient.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Var {
        tape.param_rows(&self.weights)
    }
}

impl Parameters for EmbeddingTable {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![("weights".into(), &self.weights)]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weights]
    }
}

/// Rows `ids` of the bound table, `[n×d]`.
pub fn embed_lookup(tape: &mut Tape<'_>, table: Var, ids: &[usize]) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::Contract(
            "embedding lookup of an empty sequence".into(),
        ));
    }
    tape.gather_rows(table, ids)
}

/// `d_out` filters of window `k` spanning the full input width.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBank {
    /// `[d_out×k×d_in]`
    pub filters: Tensor,
    /// `[d_out]`
    pub bias: Tensor,
    pub activation: Activation,
}

impl ConvBank {
    pub fn new(filters: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if filters.rank() != 3 {
            return Err(Error::shape("conv bank filters", filters.shape(), &[]));
        }
        let k = filters.shape()[1];
        if k.is_multiple_of(2) {
            return Err(Error::Config(format!("filter length must be odd, got {k}")));
        }
        if bias.shape() != [filters.shape()[0]] {
            return Err(Error::shape(
                "conv bank bias",
                bias.shape(),
                &filters.shape()[..1],
            ));
        }
        Ok(ConvBank {
            filters,
            bias,
            activation,
        })
    }

    pub fn zeros(d_in: usize, d_out: usize, k: usize, activation: Activation) -> Result<Self> {
        Self::new(
            Tensor::zeros(vec![d_out, k, d_in]),
            Tensor::zeros(vec![d_out]),
            activation,
        )
    }

    pub fn random<R: Rng + ?Sized>(
        d_in: usize,
        d_out: usize,
        k: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let filters = glorot(vec![d_out, k, d_in], k * d_in, d_out, rng);
        Self::new(filters, Tensor::zeros(vec![d_out]), activation)
    }

    /// Window-1 bank that copies each channel through unchanged.
    pub fn identity(d: usize, activation: Activation) -> Self {
        let filters = Tensor::identity(d)
            .reshape(vec![d, 1, d])
            .expect("identity reshape");
        Self::new(filters, Tensor::zeros(vec![d]), activation).expect("identity bank")
    }

    pub fn window(&self) -> usize {
        self.filters.shape()[1]
    }

    pub fn d_in(&self) -> usize {
        self.filters.shape()[2]
    }

    pub fn d_out(&self) -> usize {
        self.filters.shape()[0]
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> ConvVars {
        ConvVars {
            filters: tape.param(&self.filters),
            bias: tape.param(&self.bias),
            activation: self.activation,
        }
    }
}

impl Parameters for ConvBank {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("filters".into(), &self.filters),
            ("bias".into(), &self.bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.filters, &mut self.bias]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub filters: Var,
    pub bias: Var,
    pub activation: Activation,
}

/// `f(conv(e) + b)` with output length equal to input length.
pub fn same_length_conv(tape: &mut Tape<'_>, bank: &ConvVars, e: Var) -> Result<Var> {
    let pre = tape.conv_same(e, bank.filters, bank.bias)?;
    tape.activation(bank.activation, pre)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `[out×in]`
    pub weights: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weights.rank() != 2 || bias.shape() != [weights.shape()[0]] {
            return Err(Error::shape("dense layer", weights.shape(), bias.shape()));
        }
        Ok(DenseLayer {
            weights,
            bias,
            activation,
        })
    }

    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        Self::new(
            Tensor::zeros(vec![output, input]),
            Tensor::zeros(vec![output]),
            activation,
        )
        .expect("dense shapes")
    }

    pub fn random<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        Self::new(
            glorot(vec![output, input], input, output, rng),
            Tensor::zeros(vec![output]),
            activation,
        )
        .expect("dense shapes")
    }

    pub fn input_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> DenseVars {
        DenseVars {
            weights: tape.param(&self.weights),
            bias: tape.param(&self.bias),
            activation: self.activation,
        }
    }
}

impl Parameters for DenseLayer {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("weights".into(), &self.weights),
            ("bias".into(), &self.bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weights, &mut self.bias]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DenseVars {
    pub weights: Var,
    pub bias: Var,
    pub activation: Activation,
}

pub fn dense_forward(tape: &mut Tape<'_>, layer: &DenseVars, x: Var) -> Result<Var> {
    let wx = tape.matvec(layer.weights, x)?;
    let pre = tape.add(wx, layer.bias)?;
    tape.activation(layer.activation, pre)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub fn check_dropout_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )))
    }
}

/// Inverted dropout: in training, entries are zeroed with probability `rate`
/// and survivors scaled by `1/(1-rate)`; evaluation is the identity.
pub fn dropout_apply<R: Rng + ?Sized>(
    tape: &mut Tape<'_>,
    x: Var,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    check_dropout_rate(rate)?;
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let mut mask = Tensor::zeros(tape.shape(x).to_vec());
    for m in mask.data_mut() {
        if rng.gen::<f64>() >= rate {
            *m = keep;
        }
    }
    let mask = tape.constant(mask);
    tape.mul(x, mask)
}
