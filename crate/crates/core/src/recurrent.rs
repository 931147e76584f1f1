//! GRU and the three contextual recurrent unit (CRU) variants.
//!
//! All variants share one gated update,
//!
//! ```text
//! z  = σ(x_z + U_z·h + b_z)
//! r  = σ(x_r + U_r·h + b_r)
//! h~ = tanh(x_h + U·(r ⊙ h) + b_h)
//! h' = z ⊙ h + (1 − z) ⊙ h~
//! ```
//!
//! and differ only in how the gate inputs `x_*` are produced at step `t`:
//!
//! | variant         | `x_z`                     |
//! |-----------------|---------------------------|
//! | `gru`           | `W_z·e_t`                 |
//! | `shallow`       | `W_z·φ(ẽ_t)` (one shared bank φ) |
//! | `deep`          | `φ_z(ẽ_t)`                |
//! | `deep_enhanced` | `W_z·(φ_z(ẽ_t) + e_t)`     |
//!
//! where `φ(ẽ_t)` is row `t` of a same-length convolution over the whole
//! sequence. Convolutions are computed once per sequence, then indexed.
//! Note that `z` gates the *previous* state.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{same_length_conv, ConvBank, ConvVars};
use crate::params::{glorot, prefixed, Parameters};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Gru,
    Shallow,
    Deep,
    DeepEnhanced,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Gru,
        Variant::Shallow,
        Variant::Deep,
        Variant::DeepEnhanced,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Gru => "gru",
            Variant::Shallow => "shallow",
            Variant::Deep => "deep",
            Variant::DeepEnhanced => "deep_enhanced",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gru" => Ok(Variant::Gru),
            "shallow" => Ok(Variant::Shallow),
            "deep" => Ok(Variant::Deep),
            "deep_enhanced" | "deep-enhanced" => Ok(Variant::DeepEnhanced),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected gru|shallow|deep|deep_enhanced)"
            ))),
        }
    }
}

/// Hidden-to-hidden weights and gate biases.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    pub u_z: Tensor,
    pub u_r: Tensor,
    pub u_h: Tensor,
    pub b_z: Tensor,
    pub b_r: Tensor,
    pub b_h: Tensor,
}

impl GateParams {
    pub fn zeros(hidden: usize) -> Self {
        GateParams {
            u_z: Tensor::zeros(vec![hidden, hidden]),
            u_r: Tensor::zeros(vec![hidden, hidden]),
            u_h: Tensor::zeros(vec![hidden, hidden]),
            b_z: Tensor::zeros(vec![hidden]),
            b_r: Tensor::zeros(vec![hidden]),
            b_h: Tensor::zeros(vec![hidden]),
        }
    }

    pub fn random<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Self {
        GateParams {
            u_z: glorot(vec![hidden, hidden], hidden, hidden, rng),
            u_r: glorot(vec![hidden, hidden], hidden, hidden, rng),
            u_h: glorot(vec![hidden, hidden], hidden, hidden, rng),
            ..GateParams::zeros(hidden)
        }
    }

    pub fn hidden(&self) -> usize {
        self.b_z.numel()
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> GateVars {
        GateVars {
            u_z: tape.param(&self.u_z),
            u_r: tape.param(&self.u_r),
            u_h: tape.param(&self.u_h),
            b_z: tape.param(&self.b_z),
            b_r: tape.param(&self.b_r),
            b_h: tape.param(&self.b_h),
        }
    }
}

impl Parameters for GateParams {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("u_z".into(), &self.u_z),
            ("u_r".into(), &self.u_r),
            ("u_h".into(), &self.u_h),
            ("b_z".into(), &self.b_z),
            ("b_r".into(), &self.b_r),
            ("b_h".into(), &self.b_h),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.u_z,
            &mut self.u_r,
            &mut self.u_h,
            &mut self.b_z,
            &mut self.b_r,
            &mut self.b_h,
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub u_z: Var,
    pub u_r: Var,
    pub u_h: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_h: Var,
}

/// Plain GRU parameters: input projections `W_* : [d_h×d_in]` plus gates.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub w_z: Tensor,
    pub w_r: Tensor,
    pub w_h: Tensor,
    pub gates: GateParams,
}

impl GruParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        GruParams {
            w_z: Tensor::zeros(vec![hidden, input]),
            w_r: Tensor::zeros(vec![hidden, input]),
            w_h: Tensor::zeros(vec![hidden, input]),
            gates: GateParams::zeros(hidden),
        }
    }

    pub fn random<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        GruParams {
            w_z: glorot(vec![hidden, input], input, hidden, rng),
            w_r: glorot(vec![hidden, input], input, hidden, rng),
            w_h: glorot(vec![hidden, input], input, hidden, rng),
            gates: GateParams::random(hidden, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.gates.hidden()
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> GruVars {
        GruVars {
            w_z: tape.param(&self.w_z),
            w_r: tape.param(&self.w_r),
            w_h: tape.param(&self.w_h),
            gates: self.gates.bind(tape),
        }
    }
}

impl Parameters for GruParams {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("w_z".into(), &self.w_z),
            ("w_r".into(), &self.w_r),
            ("w_h".into(), &self.w_h),
        ];
        out.extend(self.gates.named_params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.w_z, &mut self.w_r, &mut self.w_h];
        out.extend(self.gates.params_mut());
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub w_r: Var,
    pub w_h: Var,
    pub gates: GateVars,
}

/// One recurrent cell of any variant.
#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Gru(GruParams),
    /// A single bank feeds an unmodified GRU.
    Shallow {
        conv: ConvBank,
        gru: GruParams,
    },
    /// Three unshared banks replace the input projections, so `d_h == d`.
    Deep {
        conv_z: ConvBank,
        conv_r: ConvBank,
        conv_h: ConvBank,
        gates: GateParams,
    },
    /// Bank outputs plus the raw embedding, then the input projections.
    DeepEnhanced {
        conv_z: ConvBank,
        conv_r: ConvBank,
        conv_h: ConvBank,
        gru: GruParams,
    },
}

/// Shape description used to build cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellSpec {
    pub variant: Variant,
    pub input: usize,
    pub hidden: usize,
    pub window: usize,
    pub conv_activation: Activation,
}

impl CellSpec {
    pub fn new(variant: Variant, input: usize, hidden: usize, window: usize) -> Self {
        CellSpec {
            variant,
            input,
            hidden,
            window,
            conv_activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.hidden == 0 {
            return Err(Error::Config("cell dimensions must be positive".into()));
        }
        if self.window.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "filter length must be odd, got {}",
                self.window
            )));
        }
        if self.variant == Variant::Deep && self.input != self.hidden {
            return Err(Error::Config(format!(
                "deep fusion requires hidden == embed (got hidden {} and embed {})",
                self.hidden, self.input
            )));
        }
        Ok(())
    }
}

impl Cell {
    pub fn random<R: Rng + ?Sized>(spec: CellSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let CellSpec {
            input: d,
            hidden: h,
            window: k,
            conv_activation: act,
            ..
        } = spec;
        Ok(match spec.variant {
            Variant::Gru => Cell::Gru(GruParams::random(d, h, rng)),
            Variant::Shallow => Cell::Shallow {
                conv: ConvBank::random(d, d, k, act, rng)?,
                gru: GruParams::random(d, h, rng),
            },
            Variant::Deep => Cell::Deep {
                conv_z: ConvBank::random(d, d, k, act, rng)?,
                conv_r: ConvBank::random(d, d, k, act, rng)?,
                conv_h: ConvBank::random(d, d, k, act, rng)?,
                gates: GateParams::random(h, rng),
            },
            Variant::DeepEnhanced => Cell::DeepEnhanced {
                conv_z: ConvBank::random(d, d, k, act, rng)?,
                conv_r: ConvBank::random(d, d, k, act, rng)?,
                conv_h: ConvBank::random(d, d, k, act, rng)?,
                gru: GruParams::random(d, h, rng),
            },
        })
    }

    pub fn zeros(spec: CellSpec) -> Result<Self> {
        spec.validate()?;
        let CellSpec {
            input: d,
            hidden: h,
            window: k,
            conv_activation: act,
            ..
        } = spec;
        Ok(match spec.variant {
            Variant::Gru => Cell::Gru(GruParams::zeros(d, h)),
            Variant::Shallow => Cell::Shallow {
                conv: ConvBank::zeros(d, d, k, act)?,
                gru: GruParams::zeros(d, h),
            },
            Variant::Deep => Cell::Deep {
                conv_z: ConvBank::zeros(d, d, k, act)?,
                conv_r: ConvBank::zeros(d, d, k, act)?,
                conv_h: ConvBank::zeros(d, d, k, act)?,
                gates: GateParams::zeros(h),
            },
            Variant::DeepEnhanced => Cell::DeepEnhanced {
                conv_z: ConvBank::zeros(d, d, k, act)?,
                conv_r: ConvBank::zeros(d, d, k, act)?,
                conv_h: ConvBank::zeros(d, d, k, act)?,
                gru: GruParams::zeros(d, h),
            },
        })
    }

    pub fn variant(&self) -> Variant {
        match self {
            Cell::Gru(_) => Variant::Gru,
            Cell::Shallow { .. } => Variant::Shallow,
            Cell::Deep { .. } => Variant::Deep,
            Cell::DeepEnhanced { .. } => Variant::DeepEnhanced,
        }
    }

    pub fn hidden(&self) -> usize {
        match self {
            Cell::Gru(g) | Cell::Shallow { gru: g, .. } | Cell::DeepEnhanced { gru: g, .. } => {
                g.hidden()
            }
            Cell::Deep { gates, .. } => gates.hidden(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Cell::Gru(g) => g.input_dim(),
            Cell::Shallow { conv, .. } => conv.d_in(),
            Cell::Deep { conv_z, .. } | Cell::DeepEnhanced { conv_z, .. } => conv_z.d_in(),
        }
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> CellVars {
        match self {
            Cell::Gru(g) => CellVars::Gru(g.bind(tape)),
            Cell::Shallow { conv, gru } => CellVars::Shallow {
                conv: conv.bind(tape),
                gru: gru.bind(tape),
            },
            Cell::Deep {
                conv_z,
                conv_r,
                conv_h,
                gates,
            } => CellVars::Deep {
                conv: [conv_z.bind(tape), conv_r.bind(tape), conv_h.bind(tape)],
                gates: gates.bind(tape),
            },
            Cell::DeepEnhanced {
                conv_z,
                conv_r,
                conv_h,
                gru,
            } => CellVars::DeepEnhanced {
                conv: [conv_z.bind(tape), conv_r.bind(tape), conv_h.bind(tape)],
                gru: gru.bind(tape),
            },
        }
    }
}

impl Parameters for Cell {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        match self {
            Cell::Gru(g) => g.named_params(),
            Cell::Shallow { conv, gru } => prefixed("conv_h", conv.named_params())
                .chain(gru.named_params())
                .collect(),
            Cell::Deep {
                conv_z,
                conv_r,
                conv_h,
                gates,
            } => prefixed("conv_z", conv_z.named_params())
                .chain(prefixed("conv_r", conv_r.named_params()))
                .chain(prefixed("conv_h", conv_h.named_params()))
                .chain(gates.named_params())
                .collect(),
            Cell::DeepEnhanced {
                conv_z,
                conv_r,
                conv_h,
                gru,
            } => prefixed("conv_z", conv_z.named_params())
                .chain(prefixed("conv_r", conv_r.named_params()))
                .chain(prefixed("conv_h", conv_h.named_params()))
                .chain(gru.named_params())
                .collect(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Cell::Gru(g) => g.params_mut(),
            Cell::Shallow { conv, gru } => {
                let mut out = conv.params_mut();
                out.extend(gru.params_mut());
                out
            }
            Cell::Deep {
                conv_z,
                conv_r,
                conv_h,
                gates,
            } => {
                let mut out = conv_z.params_mut();
                out.extend(conv_r.params_mut());
                out.extend(conv_h.params_mut());
                out.extend(gates.params_mut());
                out
            }
            Cell::DeepEnhanced {
                conv_z,
                conv_r,
                conv_h,
                gru,
            } => {
                let mut out = conv_z.params_mut();
                out.extend(conv_r.params_mut());
                out.extend(conv_h.params_mut());
                out.extend(gru.params_mut());
                out
            }
        }
    }
}

/// A cell's parameters bound on a tape.
#[derive(Clone, Copy, Debug)]
pub enum CellVars {
    Gru(GruVars),
    Shallow {
        conv: ConvVars,
        gru: GruVars,
    },
    Deep {
        conv: [ConvVars; 3],
        gates: GateVars,
    },
    DeepEnhanced {
        conv: [ConvVars; 3],
        gru: GruVars,
    },
}

impl CellVars {
    pub fn variant(&self) -> Variant {
        match self {
            CellVars::Gru(_) => Variant::Gru,
            CellVars::Shallow { .. } => Variant::Shallow,
            CellVars::Deep { .. } => Variant::Deep,
            CellVars::DeepEnhanced { .. } => Variant::DeepEnhanced,
        }
    }

    fn gates(&self) -> &GateVars {
        match self {
            CellVars::Gru(g)
            | CellVars::Shallow { gru: g, .. }
            | CellVars::DeepEnhanced { gru: g, .. } => &g.gates,
            CellVars::Deep { gates, .. } => gates,
        }
    }
}

/// The values produced by one recurrent step.
#[derive(Clone, Copy, Debug)]
pub struct Step {
    pub h: Var,
    pub z: Var,
    pub r: Var,
    pub candidate: Var,
}

fn gate_pre(tape: &mut Tape<'_>, x: Var, u: Var, h: Var, b: Var) -> Result<Var> {
    let uh = tape.matvec(u, h)?;
    let s = tape.add(x, uh)?;
    tape.add(s, b)
}

/// The shared gated update, given already-projected gate inputs.
pub fn gate_step(
    tape: &mut Tape<'_>,
    gates: &GateVars,
    x_z: Var,
    x_r: Var,
    x_h: Var,
    h_prev: Var,
) -> Result<Step> {
    let pz = gate_pre(tape, x_z, gates.u_z, h_prev, gates.b_z)?;
    let z = tape.sigmoid(pz)?;
    let pr = gate_pre(tape, x_r, gates.u_r, h_prev, gates.b_r)?;
    let r = tape.sigmoid(pr)?;
    let rh = tape.mul(r, h_prev)?;
    let ph = gate_pre(tape, x_h, gates.u_h, rh, gates.b_h)?;
    let candidate = tape.tanh(ph)?;
    let keep = tape.mul(z, h_prev)?;
    let one_minus_z = tape.one_minus(z)?;
    let fresh = tape.mul(one_minus_z, candidate)?;
    let h = tape.add(keep, fresh)?;
    Ok(Step { h, z, r, candidate })
}

/// One GRU step on input `x: [d_in]`.
pub fn gru_step(tape: &mut Tape<'_>, p: &GruVars, x: Var, h_prev: Var) -> Result<Step> {
    let x_z = tape.matvec(p.w_z, x)?;
    let x_r = tape.matvec(p.w_r, x)?;
    let x_h = tape.matvec(p.w_h, x)?;
    gate_step(tape, &p.gates, x_z, x_r, x_h, h_prev)
}

/// One deep-fusion step: the per-position bank outputs feed the gates directly.
pub fn cru_deep_step(
    tape: &mut Tape<'_>,
    gates: &GateVars,
    c_z: Var,
    c_r: Var,
    c_h: Var,
    h_prev: Var,
) -> Result<Step> {
    let (d, dh) = (tape.shape(c_z)[0], tape.shape(h_prev)[0]);
    if d != dh {
        return Err(Error::Config(format!(
            "deep fusion requires hidden == embed (got hidden {dh} and embed {d})"
        )));
    }
    gate_step(tape, gates, c_z, c_r, c_h, h_prev)
}

/// One deep-enhanced step: gate inputs are `W_*·(c_* + e_t)`.
pub fn cru_deep_enhanced_step(
    tape: &mut Tape<'_>,
    p: &GruVars,
    c_z: Var,
    c_r: Var,
    c_h: Var,
    e: Var,
    h_prev: Var,
) -> Result<Step> {
    let sz = tape.add(c_z, e)?;
    let sr = tape.add(c_r, e)?;
    let sh = tape.add(c_h, e)?;
    let x_z = tape.matvec(p.w_z, sz)?;
    let x_r = tape.matvec(p.w_r, sr)?;
    let x_h = tape.matvec(p.w_h, sh)?;
    gate_step(tape, &p.gates, x_z, x_r, x_h, h_prev)
}

#[derive(Clone, Copy, Debug)]
pub struct SequenceOutput {
    /// `[n×d_h]`, one row per position.
    pub all_h: Var,
    /// Hidden state at the last true position.
    pub final_h: Var,
}

/// Number of leading true entries; errors when the mask is empty, all-false
/// or not of the form `1…1 0…0`.
pub fn true_length(mask: &[bool]) -> Result<usize> {
    let len = mask.iter().take_while(|m| **m).count();
    if len == 0 {
        return Err(Error::Contract("sequence has no true tokens".into()));
    }
    if mask[len..].iter().any(|m| *m) {
        return Err(Error::Contract(
            "mask must be a prefix of true tokens".into(),
        ));
    }
    Ok(len)
}

/// Runs `cell` left to right over `e: [n×d]` starting from `h0`.
///
/// Positions where `mask` is false are padding: their embeddings are zeroed
/// before any convolution and the hidden state is carried through unchanged.
pub fn run_sequence(
    tape: &mut Tape<'_>,
    cell: &CellVars,
    e: Var,
    h0: Var,
    mask: &[bool],
) -> Result<SequenceOutput> {
    let shape = tape.shape(e).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("run_sequence", &shape, &[]));
    }
    let n = shape[0];
    if mask.len() != n {
        return Err(Error::shape("run_sequence mask", &[mask.len()], &shape));
    }
    let len = true_length(mask)?;
    let e = if len < n {
        let mut m = Tensor::zeros(shape.clone());
        m.data_mut()[..len * shape[1]].fill(1.0);
        let m = tape.constant(m);
        tape.mul(e, m)?
    } else {
        e
    };

    let conv = |tape: &mut Tape<'_>, bank: &ConvVars| same_length_conv(tape, bank, e);
    let project = |tape: &mut Tape<'_>, x: Var, g: &GruVars| -> Result<[Var; 3]> {
        Ok([
            tape.linear_rows(x, g.w_z)?,
            tape.linear_rows(x, g.w_r)?,
            tape.linear_rows(x, g.w_h)?,
        ])
    };
    let inputs: [Var; 3] = match cell {
        CellVars::Gru(g) => project(tape, e, g)?,
        CellVars::Shallow { conv: bank, gru } => {
            let c = conv(tape, bank)?;
            project(tape, c, gru)?
        }
        CellVars::Deep { conv: banks, .. } => {
            if shape[1] != tape.shape(h0)[0] {
                return Err(Error::Config(format!(
                    "deep fusion requires hidden == embed (got hidden {} and embed {})",
                    tape.shape(h0)[0],
                    shape[1]
                )));
            }
            [
                conv(tape, &banks[0])?,
                conv(tape, &banks[1])?,
                conv(tape, &banks[2])?,
            ]
        }
        CellVars::DeepEnhanced { conv: banks, gru } => {
            let mut out = [e; 3];
            for (slot, (bank, w)) in out
                .iter_mut()
                .zip(banks.iter().zip([gru.w_z, gru.w_r, gru.w_h]))
            {
                let c = conv(tape, bank)?;
                let enriched = tape.add(c, e)?;
                *slot = tape.linear_rows(enriched, w)?;
            }
            out
        }
    };

    let gates = *cell.gates();
    let mut h = h0;
    let mut states = Vec::with_capacity(n);
    for (t, &real) in mask.iter().enumerate() {
        if real {
            let x_z = tape.row(inputs[0], t)?;
            let x_r = tape.row(inputs[1], t)?;
            let x_h = tape.row(inputs[2], t)?;
            h = gate_step(tape, &gates, x_z, x_r, x_h, h)?.h;
        }
        states.push(h);
    }
    let all_h = tape.stack(&states)?;
    Ok(SequenceOutput {
        all_h,
        final_h: states[len - 1],
    })
}

/// Shallow fusion over a whole sequence, returning every hidden state.
pub fn cru_shallow_forward(tape: &mut Tape<'_>, cell: &CellVars, e: Var, h0: Var) -> Result<Var> {
    if cell.variant() != Variant::Shallow {
        return Err(Error::Contract(format!(
            "cru_shallow_forward called with a {} cell",
            cell.variant()
        )));
    }
    let n = tape.shape(e)[0];
    Ok(run_sequence(tape, cell, e, h0, &vec![true; n])?.all_h)
}

#[derive(Clone, Copy, Debug)]
pub struct BidirectionalOutput {
    /// `[n×2d_h]`: forward and backward states per position.
    pub states: Var,
    /// `[forward final ; backward final]`, `[2d_h]`.
    pub final_pair: Var,
    pub forward: SequenceOutput,
    /// Backward states re-reversed into original position order.
    pub backward: SequenceOutput,
}

/// Runs `fwd` over the sequence and `bwd` over its reversed true prefix.
pub fn run_bidirectional(
    tape: &mut Tape<'_>,
    fwd: &CellVars,
    bwd: &CellVars,
    e: Var,
    mask: &[bool],
    hidden: usize,
) -> Result<BidirectionalOutput> {
    let n = tape.shape(e)[0];
    if mask.len() != n {
        return Err(Error::shape("run_bidirectional mask", &[mask.len()], &[n]));
    }
    let len = true_length(mask)?;
    let h0 = tape.constant(Tensor::zeros(vec![hidden]));
    let forward = run_sequence(tape, fwd, e, h0, mask)?;

    let order: Vec<usize> = (0..len).rev().chain(len..n).collect();
    let e_rev = tape.gather_rows(e, &order)?;
    let h0b = tape.constant(Tensor::zeros(vec![hidden]));
    let rev = run_sequence(tape, bwd, e_rev, h0b, mask)?;
    let back_states = tape.gather_rows(rev.all_h, &order)?;

    if tape.shape(forward.all_h) != tape.shape(back_states) {
        return Err(Error::shape(
            "run_bidirectional",
            tape.shape(forward.all_h),
            tape.shape(back_states),
        ));
    }
    let states = tape.concat_cols(forward.all_h, back_states)?;
    let final_pair = tape.concat_rows(&[forward.final_h, rev.final_h])?;
    Ok(BidirectionalOutput {
        states,
        final_pair,
        forward,
        backward: SequenceOutput {
            all_h: back_states,
            final_h: rev.final_h,
        },
    })
}
