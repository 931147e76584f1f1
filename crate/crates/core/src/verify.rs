//! Finite-difference suite over every cell variant and the full classifier at
//! toy shapes.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Activation, Tape, Var};
use crate::classifier::{forward, mix_seed, ModelSpec, SentimentModel};
use crate::error::Result;
use crate::gradcheck::{finite_diff_gradcheck, GradCheckReport};
use crate::layers::Mode;
use crate::optim::l2_penalty;
use crate::params::{prefixed, Parameters};
use crate::recurrent::{run_sequence, Cell, CellSpec, Variant};
use crate::tensor::Tensor;

pub const DEFAULT_H: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
/// Gradient magnitude above which central differences at `DEFAULT_H` are
/// accurate to well under `DEFAULT_TOL` for unit-order losses.
pub const RESOLVABLE: f64 = 1e-6;

/// Toy sizes: sequence length, embedding and hidden width.
const N: usize = 5;
const D: usize = 4;

/// A cell plus its input sequence, both differentiated.
struct CellProbe {
    cell: Cell,
    input: Tensor,
    /// Constant read-out weights, so the loss mixes every hidden unit differently.
    readout: Tensor,
    mask: Vec<bool>,
}

impl Parameters for CellProbe {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.cell.named_params();
        out.push(("input".into(), &self.input));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.cell.params_mut();
        out.push(&mut self.input);
        out
    }
}

fn cell_loss<'a>(p: &'a CellProbe, tape: &mut Tape<'a>) -> Result<Var> {
    let cell = p.cell.bind(tape);
    let e = tape.param(&p.input);
    let h0 = tape.constant(Tensor::zeros(vec![p.cell.hidden()]));
    let out = run_sequence(tape, &cell, e, h0, &p.mask)?;
    let w = tape.constant(p.readout.clone());
    let weighted = tape.mul(out.all_h, w)?;
    tape.sum(weighted)
}

/// Gradient check of one cell over a sequence whose last position is padding.
pub fn cell_gradcheck(variant: Variant, seed: u64, h: f64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, variant as u64, 1]));
    let spec = CellSpec::new(variant, D, D, 3);
    let mut probe = CellProbe {
        cell: Cell::random(spec, &mut rng)?,
        input: Tensor::uniform(vec![N, D], -1.0, 1.0, &mut rng),
        readout: Tensor::uniform(vec![N, D], -1.0, 1.0, &mut rng),
        mask: (0..N).map(|t| t + 1 < N).collect(),
    };
    randomize(probe.cell.params_mut(), &mut rng);
    finite_diff_gradcheck(&mut probe, h, tol, cell_loss)
}

/// Redraws every tensor from `uniform(-1, 1)`.
///
/// Zero biases would park relus exactly on their kink, and small weights give
/// gradients that central differences at `h = 1e-5` cannot resolve.
fn randomize(params: Vec<&mut Tensor>, rng: &mut ChaCha8Rng) {
    for t in params {
        *t = Tensor::uniform(t.shape().to_vec(), -1.0, 1.0, rng);
    }
}

struct ClassifierProbe {
    model: SentimentModel,
    ids: Vec<usize>,
    mask: Vec<bool>,
    label: u8,
    l2: f64,
}

impl Parameters for ClassifierProbe {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        prefixed("model", self.model.named_params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.model.params_mut()
    }
}

fn classifier_loss<'a>(p: &'a ClassifierProbe, tape: &mut Tape<'a>) -> Result<Var> {
    let vars = p.model.bind(tape);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let prob = forward(
        tape,
        &vars,
        &p.model.spec,
        &p.ids,
        &p.mask,
        Mode::Eval,
        &mut rng,
    )?;
    let bce = tape.bce(prob, f64::from(p.label))?;
    let penalty = l2_penalty(tape, vars.embedding, p.l2)?;
    tape.add(bce, penalty)
}

/// Gradient check of the end-to-end classifier loss, penalty included.
pub fn classifier_gradcheck(
    variant: Variant,
    seed: u64,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, variant as u64, 2]));
    let spec = ModelSpec {
        variant,
        vocab: 7,
        embed: D,
        hidden: D,
        window: 3,
        fc: 6,
        dropout: 0.0,
        conv_activation: Activation::Relu,
    };
    let mut model = SentimentModel::random(spec, None, &mut rng)?;
    randomize(model.params_mut(), &mut rng);
    let mut probe = ClassifierProbe {
        model,
        ids: (0..N)
            .map(|t| if t + 1 < N { 2 + (3 * t) % 5 } else { 0 })
            .collect(),
        mask: (0..N).map(|t| t + 1 < N).collect(),
        label: (seed % 2) as u8,
        l2: 1e-2,
    };
    finite_diff_gradcheck(&mut probe, h, tol, classifier_loss)
}

/// One line of the suite.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub component: &'static str,
    pub variant: Variant,
    pub seed: u64,
    pub report: GradCheckReport,
}

impl fmt::Display for SuiteEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "component={} variant={} seed={} max_rel_error={:.3e} tol={:.1e} pass={}",
            self.component,
            self.variant,
            self.seed,
            self.report.max_rel_error,
            self.report.tol,
            self.report.passed
        )
    }
}

/// Every variant as a bare cell and inside the classifier, for each seed.
pub fn run_suite(seeds: &[u64], h: f64, tol: f64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for &seed in seeds {
        for variant in Variant::ALL {
            out.push(SuiteEntry {
                component: "cell",
                variant,
                seed,
                report: cell_gradcheck(variant, seed, h, tol)?,
            });
        }
        for variant in Variant::ALL {
            out.push(SuiteEntry {
                component: "classifier",
                variant,
                seed,
                report: classifier_gradcheck(variant, seed, h, tol)?,
            });
        }
    }
    Ok(out)
}
