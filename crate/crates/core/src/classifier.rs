//! Bidirectional recurrent sentiment classifier and its training loop.

use std::collections::BTreeMap;
use std::path::PathBuf;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{axpy, Activation, ParamGrad, Tape, Var};
use crate::data::{batch_and_pad, Batch, DatasetFormat, EncodedSample};
use crate::error::{Error, Result};
use crate::layers::{
    check_dropout_rate, dense_forward, dropout_apply, embed_lookup, DenseLayer, DenseVars,
    EmbeddingTable, Mode,
};
use crate::optim::{clip_global_norm, AdamConfig, AdamState};
use crate::params::{prefixed, Parameters};
use crate::recurrent::{run_bidirectional, Cell, CellSpec, CellVars, Variant};
use crate::tensor::Tensor;

/// Decision threshold; `p == 0.5` predicts positive.
pub const THRESHOLD: f64 = 0.5;

/// Samples per batch are split into at most this many contiguous chunks whose
/// gradients are summed in a fixed order, so results do not depend on the
/// worker count.
const REDUCE_CHUNKS: usize = 8;

/// Architecture hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelSpec {
    pub variant: Variant,
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub window: usize,
    pub fc: usize,
    pub dropout: f64,
    pub conv_activation: Activation,
}

impl ModelSpec {
    pub fn cell_spec(&self) -> CellSpec {
        CellSpec {
            conv_activation: self.conv_activation,
            ..CellSpec::new(self.variant, self.embed, self.hidden, self.window)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 3 || self.fc == 0 {
            return Err(Error::Config(format!(
                "model needs vocab >= 3 and fc > 0 (got vocab {} and fc {})",
                self.vocab, self.fc
            )));
        }
        check_dropout_rate(self.dropout)?;
        self.cell_spec().validate()
    }
}

/// Embedding, forward and backward cells, a relu layer and a sigmoid unit.
#[derive(Clone, Debug, PartialEq)]
pub struct SentimentModel {
    pub spec: ModelSpec,
    pub embedding: EmbeddingTable,
    pub fwd: Cell,
    pub bwd: Cell,
    pub fc: DenseLayer,
    pub out: DenseLayer,
}

/// The model's parameters bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub embedding: Var,
    pub fwd: CellVars,
    pub bwd: CellVars,
    pub fc: DenseVars,
    pub out: DenseVars,
}

impl SentimentModel {
    /// Randomly initialized model; `embedding` replaces the random table when given.
    pub fn random<R: Rng + ?Sized>(
        spec: ModelSpec,
        embedding: Option<EmbeddingTable>,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let embedding = match embedding {
            Some(t) => t,
            None => EmbeddingTable::random(spec.vocab, spec.embed, rng),
        };
        let fwd = Cell::random(spec.cell_spec(), rng)?;
        let bwd = Cell::random(spec.cell_spec(), rng)?;
        let fc = DenseLayer::random(2 * spec.hidden, spec.fc, Activation::Relu, rng);
        let out = DenseLayer::random(spec.fc, 1, Activation::Sigmoid, rng);
        Self::assemble(spec, embedding, fwd, bwd, fc, out)
    }

    /// Every parameter zero, including the embedding table.
    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let embedding = EmbeddingTable::new(Tensor::zeros(vec![spec.vocab, spec.embed]))?;
        Self::assemble(
            spec,
            embedding,
            Cell::zeros(spec.cell_spec())?,
            Cell::zeros(spec.cell_spec())?,
            DenseLayer::zeros(2 * spec.hidden, spec.fc, Activation::Relu),
            DenseLayer::zeros(spec.fc, 1, Activation::Sigmoid),
        )
    }

    /// Checks the dimension chain end to end.
    pub fn assemble(
        spec: ModelSpec,
        embedding: EmbeddingTable,
        fwd: Cell,
        bwd: Cell,
        fc: DenseLayer,
        out: DenseLayer,
    ) -> Result<Self> {
        spec.validate()?;
        let chain = [
            ("embedding rows", embedding.vocab_size(), spec.vocab),
            ("embedding width", embedding.dim(), spec.embed),
            ("fwd input", fwd.input_dim(), spec.embed),
            ("bwd input", bwd.input_dim(), spec.embed),
            ("fwd hidden", fwd.hidden(), spec.hidden),
            ("bwd hidden", bwd.hidden(), spec.hidden),
            ("fc input", fc.input_dim(), 2 * spec.hidden),
            ("fc output", fc.output_dim(), spec.fc),
            ("out input", out.input_dim(), spec.fc),
            ("out output", out.output_dim(), 1),
        ];
        for (what, got, want) in chain {
            if got != want {
                return Err(Error::Config(format!("{what} is {got}, expected {want}")));
            }
        }
        if fwd.variant() != spec.variant || bwd.variant() != spec.variant {
            return Err(Error::Config(
                "cell variants disagree with the model spec".into(),
            ));
        }
        Ok(SentimentModel {
            spec,
            embedding,
            fwd,
            bwd,
            fc,
            out,
        })
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> ModelVars {
        ModelVars {
            embedding: self.embedding.bind(tape),
            fwd: self.fwd.bind(tape),
            bwd: self.bwd.bind(tape),
            fc: self.fc.bind(tape),
            out: self.out.bind(tape),
        }
    }

    /// Positive-class probability of one unpadded sequence in evaluation mode.
    pub fn predict(&self, ids: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let mask = vec![true; ids.len()];
        let p = forward(
            &mut tape,
            &vars,
            &self.spec,
            ids,
            &mask,
            Mode::Eval,
            &mut NoRng,
        )?;
        Ok(tape.value(p).item())
    }
}

impl Parameters for SentimentModel {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        prefixed("embedding", self.embedding.named_params())
            .chain(prefixed("fwd", self.fwd.named_params()))
            .chain(prefixed("bwd", self.bwd.named_params()))
            .chain(prefixed("fc", self.fc.named_params()))
            .chain(prefixed("out", self.out.named_params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.embedding.params_mut();
        out.extend(self.fwd.params_mut());
        out.extend(self.bwd.params_mut());
        out.extend(self.fc.params_mut());
        out.extend(self.out.params_mut());
        out
    }
}

/// A generator that is never drawn from; used in evaluation mode.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("evaluation mode draws no random numbers")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("evaluation mode draws no random numbers")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("evaluation mode draws no random numbers")
    }
    fn try_fill_bytes(&mut self, _: &mut [u8]) -> std::result::Result<(), rand::Error> {
        unreachable!("evaluation mode draws no random numbers")
    }
}

/// Probability `[1]` for one (possibly padded) row of ids.
pub fn forward<R: Rng + ?Sized>(
    tape: &mut Tape<'_>,
    vars: &ModelVars,
    spec: &ModelSpec,
    ids: &[usize],
    mask: &[bool],
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    let e = embed_lookup(tape, vars.embedding, ids)?;
    let e = dropout_apply(tape, e, spec.dropout, mode, rng)?;
    let bi = run_bidirectional(tape, &vars.fwd, &vars.bwd, e, mask, spec.hidden)?;
    let f = dense_forward(tape, &vars.fc, bi.final_pair)?;
    let f = dropout_apply(tape, f, spec.dropout, mode, rng)?;
    dense_forward(tape, &vars.out, f)
}

/// Probabilities for every row of a padded batch, in evaluation mode.
pub fn forward_classify(model: &SentimentModel, batch: &Batch) -> Result<Vec<f64>> {
    (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let p = forward(
                &mut tape,
                &vars,
                &model.spec,
                &batch.ids[i],
                &batch.mask[i],
                Mode::Eval,
                &mut NoRng,
            )?;
            Ok(tape.value(p).item())
        })
        .collect()
}

/// Mean binary cross-entropy with probabilities clamped to `[ε, 1-ε]`.
pub fn bce_loss(p: &[f64], y: &[u8]) -> Result<f64> {
    if p.len() != y.len() || p.is_empty() {
        return Err(Error::shape("bce_loss", &[p.len()], &[y.len()]));
    }
    let eps = crate::autodiff::BCE_EPS;
    let total: f64 = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let q = p.clamp(eps, 1.0 - eps);
            if y == 1 {
                -q.ln()
            } else {
                -(1.0 - q).ln()
            }
        })
        .sum();
    Ok(total / p.len() as f64)
}

/// Training hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub window: usize,
    pub embed: usize,
    pub hidden: usize,
    pub fc: usize,
    pub dropout: f64,
    pub lr: f64,
    pub l2: f64,
    pub clip: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub vocab_cap: Option<usize>,
    pub pretrained: Option<PathBuf>,
    pub folds: usize,
    /// Fraction of each training split held out for best-epoch selection; 0 disables.
    pub valid_frac: f64,
    pub max_len: Option<usize>,
}

impl TrainConfig {
    /// Per-dataset defaults.
    pub fn for_dataset(format: DatasetFormat) -> Self {
        let base = TrainConfig {
            variant: Variant::DeepEnhanced,
            window: 3,
            embed: 200,
            hidden: 200,
            fc: 1024,
            dropout: 0.3,
            lr: 0.0005,
            l2: 1e-4,
            clip: 5.0,
            batch: 32,
            epochs: 10,
            seed: 1,
            vocab_cap: None,
            pretrained: None,
            folds: 10,
            valid_frac: 0.0,
            max_len: None,
        };
        match format {
            DatasetFormat::Mr => base,
            DatasetFormat::Subj => TrainConfig {
                dropout: 0.4,
                ..base
            },
            DatasetFormat::Imdb => TrainConfig {
                embed: 256,
                hidden: 256,
                lr: 0.001,
                vocab_cap: Some(50_000),
                folds: 1,
                ..base
            },
        }
    }

    pub fn model_spec(&self, vocab: usize) -> ModelSpec {
        ModelSpec {
            variant: self.variant,
            vocab,
            embed: self.embed,
            hidden: self.hidden,
            window: self.window,
            fc: self.fc,
            dropout: self.dropout,
            conv_activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: String| Err(Error::Config(format!("{key}: {why}")));
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".into());
        }
        if self.batch == 0 {
            return bad("batch", "must be at least 1".into());
        }
        if self.embed == 0 || self.hidden == 0 || self.fc == 0 {
            return bad("embed/hidden/fc", "dimensions must be positive".into());
        }
        if self.window.is_multiple_of(2) {
            return bad("filter", format!("must be odd, got {}", self.window));
        }
        if self.variant == Variant::Deep && self.embed != self.hidden {
            return bad(
                "hidden",
                format!(
                    "deep fusion requires hidden == embed (got hidden {} and embed {})",
                    self.hidden, self.embed
                ),
            );
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(
                "dropout",
                format!("must lie in [0, 1), got {}", self.dropout),
            );
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(
                "lr",
                format!("must be a non-negative number, got {}", self.lr),
            );
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return bad(
                "l2",
                format!("must be a non-negative number, got {}", self.l2),
            );
        }
        if self.clip.is_nan() || self.clip <= 0.0 {
            return bad("clip", format!("must be positive, got {}", self.clip));
        }
        if self.folds == 0 {
            return bad("folds", "must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.valid_frac) {
            return bad(
                "valid-frac",
                format!("must lie in [0, 1), got {}", self.valid_frac),
            );
        }
        if let Some(cap) = self.vocab_cap {
            if cap < 3 {
                return bad("vocab-cap", format!("must be at least 3, got {cap}"));
            }
        }
        Ok(())
    }
}

/// splitmix64 finalizer; decorrelates seeds derived from small integers.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Gradient sum that keeps row-sparse parameters sparse until finalized.
#[derive(Clone, Debug)]
enum Accum {
    Dense(Vec<f64>),
    Rows(BTreeMap<usize, Vec<f64>>),
}

struct GradSum {
    shapes: Vec<Vec<usize>>,
    slots: Vec<Accum>,
}

impl GradSum {
    fn new(model: &SentimentModel) -> Self {
        let shapes: Vec<Vec<usize>> = model
            .named_params()
            .iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        // Only the embedding table (slot 0) is row-sparse.
        let slots = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if i == 0 {
                    Accum::Rows(BTreeMap::new())
                } else {
                    Accum::Dense(vec![0.0; s.iter().product()])
                }
            })
            .collect();
        GradSum { shapes, slots }
    }

    fn add_param(&mut self, i: usize, g: ParamGrad) {
        match (&mut self.slots[i], g) {
            (_, ParamGrad::Zero(_)) => {}
            (Accum::Rows(acc), ParamGrad::Rows { rows, .. }) => {
                for (r, v) in rows {
                    match acc.get_mut(&r) {
                        Some(dst) => axpy(1.0, &v, dst),
                        None => {
                            acc.insert(r, v);
                        }
                    }
                }
            }
            (Accum::Rows(acc), ParamGrad::Dense(t)) => {
                let w = self.shapes[i][1];
                for (r, row) in t.data().chunks(w).enumerate() {
                    if row.iter().any(|x| *x != 0.0) {
                        let dst = acc.entry(r).or_insert_with(|| vec![0.0; w]);
                        axpy(1.0, row, dst);
                    }
                }
            }
            (Accum::Dense(acc), g) => axpy(1.0, g.to_dense().data(), acc),
        }
    }

    fn merge(&mut self, other: GradSum) {
        for (i, slot) in other.slots.into_iter().enumerate() {
            let g = match slot {
                Accum::Dense(d) => ParamGrad::Dense(
                    Tensor::new(self.shapes[i].clone(), d).expect("accumulator shape"),
                ),
                Accum::Rows(rows) => ParamGrad::Rows {
                    shape: self.shapes[i].clone(),
                    rows,
                },
            };
            self.add_param(i, g);
        }
    }

    fn into_dense(self) -> Vec<Tensor> {
        self.slots
            .into_iter()
            .zip(self.shapes)
            .map(|(slot, shape)| match slot {
                Accum::Dense(d) => Tensor::new(shape, d).expect("accumulator shape"),
                Accum::Rows(rows) => ParamGrad::Rows { shape, rows }.to_dense(),
            })
            .collect()
    }
}

/// Loss, prediction and gradients of one training sample, loss scaled by `scale`.
fn sample_grad(
    model: &SentimentModel,
    ids: &[usize],
    mask: &[bool],
    label: u8,
    scale: f64,
    seed: u64,
    into: &mut GradSum,
) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let p = forward(
        &mut tape,
        &vars,
        &model.spec,
        ids,
        mask,
        Mode::Train,
        &mut rng,
    )?;
    let bce = tape.bce(p, f64::from(label))?;
    let loss = tape.scale(bce, scale)?;
    let grads = tape.backward(loss)?;
    for (i, &v) in tape.params().iter().enumerate() {
        into.add_param(i, grads.param_grad(v));
    }
    Ok((tape.value(bce).item(), tape.value(p).item()))
}

/// Per-epoch summary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    /// Mean per-sample cross-entropy, without the penalty.
    pub loss: f64,
    pub accuracy: f64,
    /// Mean pre-clip global gradient norm over batches.
    pub grad_norm: f64,
}

fn predicted(p: f64) -> u8 {
    u8::from(p >= THRESHOLD)
}

/// One pass over `batches`: cross-entropy averaged over each batch plus
/// `l2·Σw²` on the embedding table, global-norm clipping, then one Adam step.
pub fn train_epoch(
    model: &mut SentimentModel,
    adam: &mut AdamState,
    batches: &[Batch],
    config: &TrainConfig,
    epoch_seed: u64,
) -> Result<EpochMetrics> {
    let (mut loss_sum, mut correct, mut seen, mut norm_sum) = (0.0, 0usize, 0usize, 0.0);
    for (b, batch) in batches.iter().enumerate() {
        if batch.is_empty() {
            continue;
        }
        let n = batch.len();
        let scale = 1.0 / n as f64;
        let chunk = n.div_ceil(REDUCE_CHUNKS.min(n));
        let frozen: &SentimentModel = model;
        let partials: Vec<Result<(GradSum, f64, usize)>> = (0..n)
            .step_by(chunk)
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|start| {
                let mut acc = GradSum::new(frozen);
                let (mut loss, mut right) = (0.0, 0);
                for i in start..(start + chunk).min(n) {
                    let seed = mix_seed(&[epoch_seed, b as u64, i as u64]);
                    let (l, p) = sample_grad(
                        frozen,
                        &batch.ids[i],
                        &batch.mask[i],
                        batch.labels[i],
                        scale,
                        seed,
                        &mut acc,
                    )?;
                    loss += l;
                    right += usize::from(predicted(p) == batch.labels[i]);
                }
                Ok((acc, loss, right))
            })
            .collect();
        let mut total = GradSum::new(model);
        let mut batch_loss = 0.0;
        for part in partials {
            let (acc, loss, right) = part.map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("batch {b}: {msg}")),
                other => other,
            })?;
            total.merge(acc);
            batch_loss += loss;
            correct += right;
        }
        if !batch_loss.is_finite() {
            return Err(Error::NonFinite(format!("batch {b}: loss is {batch_loss}")));
        }
        let mut grads = total.into_dense();
        if config.l2 > 0.0 {
            axpy(
                2.0 * config.l2,
                model.embedding.weights.data(),
                grads[0].data_mut(),
            );
        }
        if !model.embedding.trainable {
            grads[0] = Tensor::zeros(grads[0].shape().to_vec());
        }
        let norm = clip_global_norm(&mut grads, config.clip)?;
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!(
                "batch {b}: gradient norm is {norm}"
            )));
        }
        adam.step(model.params_mut(), &grads)?;
        loss_sum += batch_loss;
        seen += n;
        norm_sum += norm;
    }
    if seen == 0 {
        return Err(Error::Contract("training epoch over an empty set".into()));
    }
    Ok(EpochMetrics {
        loss: loss_sum / seen as f64,
        accuracy: correct as f64 / seen as f64,
        grad_norm: norm_sum / batches.len() as f64,
    })
}

/// Evaluation-mode loss and accuracy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub total: usize,
}

pub fn evaluate(model: &SentimentModel, batches: &[Batch]) -> Result<EvalMetrics> {
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    for batch in batches {
        probs.extend(forward_classify(model, batch)?);
        labels.extend_from_slice(&batch.labels);
    }
    if probs.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let correct = probs
        .iter()
        .zip(&labels)
        .filter(|(p, y)| predicted(**p) == **y)
        .count();
    Ok(EvalMetrics {
        loss: bce_loss(&probs, &labels)?,
        accuracy: correct as f64 / probs.len() as f64,
        total: probs.len(),
    })
}

/// Convenience: evaluation over unpadded samples.
pub fn evaluate_samples(model: &SentimentModel, samples: &[EncodedSample]) -> Result<EvalMetrics> {
    evaluate(
        model,
        &batch_and_pad(samples, 64, crate::layers::PAD_ID, None)?,
    )
}

/// Unweighted mean of per-fold accuracies.
pub fn cv_mean(fold_accuracies: &[f64]) -> Result<f64> {
    if fold_accuracies.is_empty() {
        return Err(Error::Contract("no folds to average".into()));
    }
    Ok(fold_accuracies.iter().sum::<f64>() / fold_accuracies.len() as f64)
}

/// One row of the metrics history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub model: SentimentModel,
    pub adam: AdamState,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters `model` holds.
    pub chosen_epoch: usize,
}

/// Trains from `model` for `config.epochs` epochs. With a non-empty
/// `valid` set the best epoch by validation accuracy (earliest on ties) is
/// kept; otherwise the last. `stream` identifies this run in derived seeds.
pub fn fit(
    mut model: SentimentModel,
    train: &[EncodedSample],
    valid: &[EncodedSample],
    test: &[EncodedSample],
    config: &TrainConfig,
    stream: u64,
) -> Result<FitResult> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let mut adam = AdamState::new(
        AdamConfig::with_lr(config.lr),
        model.named_params().into_iter().map(|(_, t)| t),
    );
    let eval_batches = |s: &[EncodedSample]| batch_and_pad(s, 64, crate::layers::PAD_ID, None);
    let valid_b = eval_batches(valid)?;
    let test_b = eval_batches(test)?;
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, SentimentModel, AdamState)> = None;
    for epoch in 1..=config.epochs {
        let epoch_seed = mix_seed(&[config.seed, stream, epoch as u64]);
        let batches = batch_and_pad(train, config.batch, crate::layers::PAD_ID, Some(epoch_seed))?;
        let m = train_epoch(&mut model, &mut adam, &batches, config, epoch_seed)?;
        info!(
            "event=epoch stream={stream} epoch={epoch} split=train loss={:.6} accuracy={:.6} grad_norm={:.4}",
            m.loss, m.accuracy, m.grad_norm
        );
        history.push(EpochRecord {
            epoch,
            split: "train",
            loss: m.loss,
            accuracy: m.accuracy,
        });
        for (split, batches) in [("valid", &valid_b), ("test", &test_b)] {
            if batches.is_empty() {
                continue;
            }
            let e = evaluate(&model, batches)?;
            info!(
                "event=epoch stream={stream} epoch={epoch} split={split} loss={:.6} accuracy={:.6}",
                e.loss, e.accuracy
            );
            history.push(EpochRecord {
                epoch,
                split,
                loss: e.loss,
                accuracy: e.accuracy,
            });
            if split == "valid" && best.as_ref().is_none_or(|b| e.accuracy > b.0) {
                best = Some((e.accuracy, epoch, model.clone(), adam.clone()));
            }
        }
    }
    let (model, adam, chosen_epoch) = match best {
        Some((_, epoch, m, a)) => (m, a, epoch),
        None => (model, adam, config.epochs),
    };
    Ok(FitResult {
        model,
        adam,
        history,
        chosen_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec(variant: Variant) -> ModelSpec {
        ModelSpec {
            variant,
            vocab: 6,
            embed: 3,
            hidden: 3,
            window: 3,
            fc: 4,
            dropout: 0.0,
            conv_activation: Activation::Relu,
        }
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            embed: 3,
            hidden: 3,
            fc: 4,
            dropout: 0.0,
            batch: 2,
            epochs: 1,
            lr: 0.01,
            ..TrainConfig::for_dataset(DatasetFormat::Mr)
        }
    }

    fn samples() -> Vec<EncodedSample> {
        vec![
            EncodedSample {
                ids: vec![2, 3, 4],
                label: 1,
            },
            EncodedSample {
                ids: vec![5, 2],
                label: 0,
            },
            EncodedSample {
                ids: vec![3],
                label: 1,
            },
            EncodedSample {
                ids: vec![4, 4, 5, 5],
                label: 0,
            },
        ]
    }

    #[test]
    fn zero_model_is_undecided() {
        for v in Variant::ALL {
            let m = SentimentModel::zeros(tiny_spec(v)).unwrap();
            assert_eq!(m.predict(&[2, 3, 1]).unwrap(), 0.5);
        }
    }

    #[test]
    fn zero_model_predicts_positive() {
        let m = SentimentModel::zeros(tiny_spec(Variant::Gru)).unwrap();
        let e = evaluate_samples(&m, &samples()).unwrap();
        assert_eq!(e.accuracy, 0.5);
        assert!(evaluate(&m, &[]).is_err());
    }

    #[test]
    fn dimension_chain_checked_at_build() {
        let spec = tiny_spec(Variant::Gru);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let wrong = EmbeddingTable::random(6, 5, &mut rng);
        assert!(matches!(
            SentimentModel::random(spec, Some(wrong), &mut rng),
            Err(Error::Config(_))
        ));
        let deep = ModelSpec {
            hidden: 4,
            ..tiny_spec(Variant::Deep)
        };
        assert!(SentimentModel::random(deep, None, &mut rng).is_err());
    }

    #[test]
    fn batch_of_one_matches_unbatched() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = SentimentModel::random(tiny_spec(Variant::DeepEnhanced), None, &mut rng).unwrap();
        let s = samples();
        let batches = batch_and_pad(&s, 4, 0, None).unwrap();
        let batched = forward_classify(&m, &batches[0]).unwrap();
        for (i, smp) in s.iter().enumerate() {
            let single = m.predict(&smp.ids).unwrap();
            assert!((batched[i] - single).abs() <= 1e-12);
            assert!(single > 0.0 && single < 1.0);
        }
    }

    #[test]
    fn bce_values() {
        assert!((bce_loss(&[0.5], &[1]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bce_loss(&[0.5], &[0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_loss(&[1.0, 0.0], &[1, 0]).unwrap() < 2e-7);
        assert!(bce_loss(&[], &[]).is_err());
    }

    #[test]
    fn zero_lr_is_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = SentimentModel::random(tiny_spec(Variant::Shallow), None, &mut rng).unwrap();
        let before = m.clone();
        let cfg = TrainConfig {
            lr: 0.0,
            ..tiny_config()
        };
        let mut adam = AdamState::new(
            AdamConfig::with_lr(0.0),
            m.named_params().into_iter().map(|(_, t)| t),
        );
        let batches = batch_and_pad(&samples(), 2, 0, Some(1)).unwrap();
        train_epoch(&mut m, &mut adam, &batches, &cfg, 9).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let spec = ModelSpec {
                dropout: 0.3,
                ..tiny_spec(Variant::DeepEnhanced)
            };
            let m = SentimentModel::random(spec, None, &mut rng).unwrap();
            let cfg = TrainConfig {
                epochs: 2,
                dropout: 0.3,
                ..tiny_config()
            };
            fit(m, &samples(), &[], &samples(), &cfg, 0).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn repeated_batch_overfits() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = ModelSpec {
            fc: 8,
            ..tiny_spec(Variant::Gru)
        };
        let mut m = SentimentModel::random(spec, None, &mut rng).unwrap();
        let cfg = TrainConfig {
            fc: 8,
            ..tiny_config()
        };
        let mut adam = AdamState::new(
            AdamConfig::with_lr(0.01),
            m.named_params().into_iter().map(|(_, t)| t),
        );
        let batches = batch_and_pad(&samples(), 4, 0, None).unwrap();
        let mut last = f64::INFINITY;
        for step in 0..200 {
            last = train_epoch(&mut m, &mut adam, &batches, &cfg, step)
                .unwrap()
                .loss;
        }
        assert!(last < 0.05, "final loss {last}");
    }

    #[test]
    fn table_defaults() {
        let mr = TrainConfig::for_dataset(DatasetFormat::Mr);
        assert_eq!(
            (mr.embed, mr.hidden, mr.dropout, mr.lr),
            (200, 200, 0.3, 0.0005)
        );
        let imdb = TrainConfig::for_dataset(DatasetFormat::Imdb);
        assert_eq!(
            (imdb.embed, imdb.lr, imdb.vocab_cap),
            (256, 0.001, Some(50_000))
        );
        let subj = TrainConfig::for_dataset(DatasetFormat::Subj);
        assert_eq!(
            (subj.dropout, subj.batch, subj.l2, subj.clip),
            (0.4, 32, 1e-4, 5.0)
        );
        assert!(TrainConfig {
            epochs: 0,
            ..mr.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            variant: Variant::Deep,
            hidden: 300,
            ..mr
        }
        .validate()
        .is_err());
    }

    #[test]
    fn cv_mean_is_unweighted() {
        assert_eq!(cv_mean(&[1.0, 0.5]).unwrap(), 0.75);
        assert!(cv_mean(&[]).is_err());
    }
}
