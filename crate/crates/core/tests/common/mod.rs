//! Plain-loop reference implementations, independent of the tape.

#![allow(dead_code)]

use std::path::Path;

use cru::data::synthetic::{generate_polarity, SyntheticSpec};
use cru::data::{encode_corpus, load_dataset, Corpus, DatasetFormat, EncodedSample, Sample, Vocab};
use cru::recurrent::{run_sequence, Cell, GateParams, GruParams};
use cru::{Activation, Tape, Tensor};

fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    assert_eq!(cols, x.len());
    (0..rows)
        .map(|i| (0..cols).map(|j| w.data()[i * cols + j] * x[j]).sum())
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `h' = z⊙h + (1−z)⊙tanh(x_h + U_h(r⊙h) + b_h)` from pre-projected inputs.
pub fn ref_gate_step(g: &GateParams, x_z: &[f64], x_r: &[f64], x_h: &[f64], h: &[f64]) -> Vec<f64> {
    let uz = matvec(&g.u_z, h);
    let ur = matvec(&g.u_r, h);
    let z: Vec<f64> = (0..h.len())
        .map(|i| sigmoid(x_z[i] + uz[i] + g.b_z.data()[i]))
        .collect();
    let r: Vec<f64> = (0..h.len())
        .map(|i| sigmoid(x_r[i] + ur[i] + g.b_r.data()[i]))
        .collect();
    let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
    let uh = matvec(&g.u_h, &rh);
    (0..h.len())
        .map(|i| {
            let cand = (x_h[i] + uh[i] + g.b_h.data()[i]).tanh();
            z[i] * h[i] + (1.0 - z[i]) * cand
        })
        .collect()
}

pub fn ref_gru_step(p: &GruParams, x: &[f64], h: &[f64]) -> Vec<f64> {
    ref_gate_step(
        &p.gates,
        &matvec(&p.w_z, x),
        &matvec(&p.w_r, x),
        &matvec(&p.w_h, x),
        h,
    )
}

/// Every hidden state of a plain GRU over the rows of `e`.
pub fn ref_gru_sequence(p: &GruParams, e: &Tensor) -> Vec<Vec<f64>> {
    let mut h = vec![0.0; p.gates.b_z.numel()];
    (0..e.rows())
        .map(|t| {
            h = ref_gru_step(p, e.row(t), &h);
            h.clone()
        })
        .collect()
}

/// Zero-padded same-length convolution, `filters: [d_out×k×d_in]`.
pub fn ref_conv(e: &Tensor, filters: &Tensor, bias: &Tensor, act: Activation) -> Vec<Vec<f64>> {
    let (n, d_in) = (e.rows(), e.row_len());
    let (d_out, k) = (filters.shape()[0], filters.shape()[1]);
    let half = (k / 2) as isize;
    (0..n)
        .map(|t| {
            (0..d_out)
                .map(|o| {
                    let mut acc = bias.data()[o];
                    for j in 0..k {
                        let src = t as isize + j as isize - half;
                        if src < 0 || src >= n as isize {
                            continue;
                        }
                        for c in 0..d_in {
                            acc += filters.data()[(o * k + j) * d_in + c] * e.row(src as usize)[c];
                        }
                    }
                    act.apply(acc)
                })
                .collect()
        })
        .collect()
}

/// Every hidden state of `cell` over `e` from a zero state, through the library.
pub fn lib_states(cell: &Cell, e: &Tensor, mask: &[bool]) -> Tensor {
    let mut tape = Tape::new();
    let vars = cell.bind(&mut tape);
    let x = tape.constant(e.clone());
    let h0 = tape.constant(Tensor::zeros(vec![cell.hidden()]));
    let out = run_sequence(&mut tape, &vars, x, h0, mask).unwrap();
    tape.value(out.all_h).clone()
}

pub fn max_abs_diff_rows(a: &Tensor, b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.rows(), b.len());
    b.iter()
        .enumerate()
        .flat_map(|(t, row)| a.row(t).iter().zip(row).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

pub fn brute_freq(doc: &[String]) -> Vec<f64> {
    doc.iter()
        .map(|w| doc.iter().filter(|x| *x == w).count() as f64 / doc.len() as f64)
        .collect()
}

pub fn brute_coq(doc: &[String], query: &[String]) -> Vec<usize> {
    doc.iter()
        .map(|w| query.iter().filter(|q| *q == w).count())
        .collect()
}

/// Real line-file corpus when `env` names a directory, else the seeded surrogate.
pub fn corpus_or_surrogate(
    env: &str,
    format: DatasetFormat,
    per_class: usize,
    seed: u64,
) -> (Corpus, &'static str) {
    if let Ok(dir) = std::env::var(env) {
        let ds = load_dataset(format, Path::new(&dir)).expect("dataset named by environment loads");
        return (ds.train, "real");
    }
    let samples: Vec<Sample> = generate_polarity(&SyntheticSpec {
        per_class,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap();
    (Corpus { samples, format }, "surrogate")
}

pub fn encode_all(corpus: &Corpus) -> (Vocab, Vec<EncodedSample>) {
    let vocab = Vocab::build(corpus.token_seqs(), None).unwrap();
    let encoded = encode_corpus(corpus, &vocab, None);
    (vocab, encoded)
}
