//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use lsc::decoding::AttentionScorer;
use lsc::nn::Tensor;
use lsc::Result;
use rand::Rng;

/// `[t, v]` rows drawn uniformly and normalized; no entry is tiny.
pub fn random_probs(rng: &mut impl Rng, t: usize, v: usize) -> Tensor {
    let mut data = Vec::with_capacity(t * v);
    for _ in 0..t {
        let row: Vec<f64> = (0..v).map(|_| rng.gen_range(0.05..1.0)).collect();
        let total: f64 = row.iter().sum();
        data.extend(row.iter().map(|p| p / total));
    }
    Tensor::from_vec(&[t, v], data)
}

/// Merge repeats, then drop blanks (symbol 0).
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &s in path {
        if Some(s) != prev && s != 0 {
            out.push(s);
        }
        prev = Some(s);
    }
    out
}

/// Probability of every collapsed output, by walking all `v^t` paths.
pub fn output_distribution(probs: &Tensor) -> BTreeMap<Vec<usize>, f64> {
    let (t, v) = probs.dims2();
    let mut dist = BTreeMap::new();
    let mut path = vec![0usize; t];
    loop {
        let p: f64 = path.iter().enumerate().map(|(i, &s)| probs.data()[i * v + s]).product();
        *dist.entry(collapse(&path)).or_insert(0.0) += p;
        let mut i = 0;
        loop {
            if i == t {
                return dist;
            }
            path[i] += 1;
            if path[i] < v {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Total probability of the paths that collapse to `target`.
pub fn enumerate_ctc(probs: &Tensor, target: &[usize]) -> f64 {
    output_distribution(probs).get(target).copied().unwrap_or(0.0)
}

/// `|sum_n h[n] e^{-i w n}|` at normalized frequency `f` (cycles per sample).
pub fn dtft_magnitude(kernel: &[f64], f: f64) -> f64 {
    let w = 2.0 * std::f64::consts::PI * f;
    let (re, im) = kernel.iter().enumerate().fold((0.0, 0.0), |(re, im), (n, &h)| {
        let a = w * n as f64;
        (re + h * a.cos(), im - h * a.sin())
    });
    re.hypot(im)
}

/// Attention stand-in whose next-symbol distribution depends only on the
/// previous symbol.
pub struct Table {
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn random(rng: &mut impl Rng, symbols: usize) -> Self {
        let probs = random_probs(rng, symbols, symbols);
        Self {
            rows: probs
                .data()
                .chunks(symbols)
                .map(|r| r.iter().map(|p| p.ln()).collect())
                .collect(),
        }
    }
}

impl AttentionScorer for Table {
    type State = usize;

    fn num_symbols(&self) -> usize {
        self.rows.len()
    }

    fn initial(&self) -> usize {
        0
    }

    fn step(&self, state: &usize) -> Result<(Vec<f64>, usize)> {
        Ok((self.rows[*state].clone(), *state))
    }

    fn advance(&self, _state: usize, token: usize) -> usize {
        token
    }
}

/// Canonical 44-byte-header PCM16 mono WAV.
pub fn pcm16_wav(samples: &[i16], rate: u32) -> Vec<u8> {
    let data_len = (samples.len() * 2) as u32;
    let mut b = Vec::new();
    b.extend_from_slice(b"RIFF");
    b.extend_from_slice(&(36 + data_len).to_le_bytes());
    b.extend_from_slice(b"WAVEfmt ");
    b.extend_from_slice(&16u32.to_le_bytes());
    b.extend_from_slice(&1u16.to_le_bytes());
    b.extend_from_slice(&1u16.to_le_bytes());
    b.extend_from_slice(&rate.to_le_bytes());
    b.extend_from_slice(&(rate * 2).to_le_bytes());
    b.extend_from_slice(&2u16.to_le_bytes());
    b.extend_from_slice(&16u16.to_le_bytes());
    b.extend_from_slice(b"data");
    b.extend_from_slice(&data_len.to_le_bytes());
    for s in samples {
        b.extend_from_slice(&s.to_le_bytes());
    }
    b
}

/// One second of a 440 Hz tone at 16 kHz.
pub fn tone_second() -> Vec<i16> {
    (0..16_000)
        .map(|n| (8000.0 * (2.0 * std::f64::consts::PI * 440.0 * n as f64 / 16_000.0).sin()) as i16)
        .collect()
}
