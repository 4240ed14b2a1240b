//! A from-scratch micro encoder-decoder transformer.
//!
//! Pre-layer-norm architecture, sinusoidal positions, ReLU feed-forward,
//! shared input embedding between encoder and decoder, untied output
//! projection. Everything computes in f64; parameters are kept on the f32
//! grid (quantized after init and after every optimizer step) so that the
//! f32 checkpoint format round-trips bitwise and reloading a model preserves
//! its forward outputs exactly.
//!
//! The backward pass is written by hand layer by layer and is validated
//! against central finite differences in the test suite, which is the reason
//! for the f64 compute path.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::ZettError;
use crate::rng::{substream, SplitMix64};
use crate::tokenizer::{PAD, RESERVED};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    pub max_input_len: usize,
    pub max_output_len: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: RESERVED as usize,
            d_model: 64,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_dim: 128,
            max_input_len: 128,
            max_output_len: 64,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn with_vocab(vocab_size: usize) -> ModelConfig {
        ModelConfig { vocab_size, ..ModelConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(ZettError::config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.encoder_layers == 0
            || self.decoder_layers == 0
            || self.ffn_dim == 0
            || self.max_input_len == 0
            || self.max_output_len == 0
        {
            return Err(ZettError::config("layer counts, ffn_dim and length caps must be at least 1"));
        }
        if self.vocab_size < RESERVED as usize {
            return Err(ZettError::config(format!(
                "vocab_size {} smaller than the {} reserved ids",
                self.vocab_size, RESERVED
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ZettError::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

const LN_EPS: f64 = 1e-6;

/// Snaps a value onto the f32 grid. Applied after init and after every
/// optimizer step; see the module docs.
#[inline]
fn q32(x: f64) -> f64 {
    x as f32 as f64
}

fn quantize(a: &mut Array2<f64>) {
    a.mapv_inplace(q32);
}

#[derive(Debug, Clone)]
struct LinearW {
    w: Array2<f64>,
    b: Array2<f64>,
}

impl LinearW {
    fn new(fan_in: usize, fan_out: usize, rng: &mut SplitMix64) -> LinearW {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.next_symmetric(a));
        quantize(&mut w);
        LinearW { w, b: Array2::zeros((1, fan_out)) }
    }

    fn zeros_like(&self) -> LinearW {
        LinearW { w: Array2::zeros(self.w.raw_dim()), b: Array2::zeros(self.b.raw_dim()) }
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, g: &mut LinearW) -> Array2<f64> {
        g.w += &x.t().dot(dy);
        g.b += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

#[derive(Debug, Clone)]
struct LayerNormW {
    g: Array2<f64>,
    b: Array2<f64>,
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNormW {
    fn new(d: usize) -> LayerNormW {
        LayerNormW { g: Array2::ones((1, d)), b: Array2::zeros((1, d)) }
    }

    fn zeros_like(&self) -> LayerNormW {
        LayerNormW { g: Array2::zeros(self.g.raw_dim()), b: Array2::zeros(self.b.raw_dim()) }
    }

    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LnCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            *is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| v * *is);
        }
        let y = &xhat * &self.g + &self.b;
        (y, LnCache { xhat, inv_std })
    }

    fn backward(&self, cache: &LnCache, dy: &Array2<f64>, g: &mut LayerNormW) -> Array2<f64> {
        let d = dy.ncols() as f64;
        g.g += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        g.b += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dxhat = dy * &self.g;
        let mut dx = Array2::zeros(dy.raw_dim());
        for t in 0..dy.nrows() {
            let dxh = dxhat.row(t);
            let xh = cache.xhat.row(t);
            let mean_dxh = dxh.sum() / d;
            let mean_dxh_xh = dxh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
            let is = cache.inv_std[t];
            for j in 0..dy.ncols() {
                dx[[t, j]] = (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh) * is;
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
struct AttnW {
    q: LinearW,
    k: LinearW,
    v: LinearW,
    o: LinearW,
}

struct AttnCache {
    x: Array2<f64>,
    mem: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    // Per-head post-softmax attention matrices [T, S].
    attn: Vec<Array2<f64>>,
    concat: Array2<f64>,
}

impl AttnW {
    fn new(d: usize, rng: &mut SplitMix64) -> AttnW {
        AttnW {
            q: LinearW::new(d, d, rng),
            k: LinearW::new(d, d, rng),
            v: LinearW::new(d, d, rng),
            o: LinearW::new(d, d, rng),
        }
    }

    fn zeros_like(&self) -> AttnW {
        AttnW {
            q: self.q.zeros_like(),
            k: self.k.zeros_like(),
            v: self.v.zeros_like(),
            o: self.o.zeros_like(),
        }
    }

    /// Scaled dot-product attention over all heads. `causal` masks positions
    /// `s > t`; masked scores are set to -inf before the softmax so masked
    /// probabilities are exactly zero and gradients cannot leak through.
    fn forward(&self, x: &Array2<f64>, mem: &Array2<f64>, causal: bool, heads: usize) -> (Array2<f64>, AttnCache) {
        let d = x.ncols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.q.forward(x);
        let k = self.k.forward(mem);
        let v = self.v.forward(mem);
        let mut concat = Array2::zeros((x.nrows(), d));
        let mut attn = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|v| v * scale);
            if causal {
                for t in 0..scores.nrows() {
                    for s_idx in (t + 1)..scores.ncols() {
                        scores[[t, s_idx]] = f64::NEG_INFINITY;
                    }
                }
            }
            softmax_rows_inplace(&mut scores);
            concat.slice_mut(cols).assign(&scores.dot(&vh));
            attn.push(scores);
        }
        let out = self.o.forward(&concat);
        (out, AttnCache { x: x.clone(), mem: mem.clone(), q, k, v, attn, concat })
    }

    /// Returns `(dx, dmem)`. For self-attention the caller adds both into the
    /// same upstream gradient.
    fn backward(&self, c: &AttnCache, dout: &Array2<f64>, g: &mut AttnW, heads: usize) -> (Array2<f64>, Array2<f64>) {
        let d = c.x.ncols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let dconcat = self.o.backward(&c.concat, dout, &mut g.o);
        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let ah = &c.attn[h];
            let vh = c.v.slice(cols);
            let doh = dconcat.slice(cols);
            let dah = doh.dot(&vh.t());
            dv.slice_mut(cols).assign(&ah.t().dot(&doh));
            // Softmax backward row-wise: ds = a * (da - sum(da * a)).
            let mut dsh = Array2::zeros(ah.raw_dim());
            for t in 0..ah.nrows() {
                let dot: f64 = dah.row(t).iter().zip(ah.row(t).iter()).map(|(a, b)| a * b).sum();
                for s_idx in 0..ah.ncols() {
                    dsh[[t, s_idx]] = ah[[t, s_idx]] * (dah[[t, s_idx]] - dot);
                }
            }
            dsh.mapv_inplace(|v| v * scale);
            let qh = c.q.slice(cols);
            let kh = c.k.slice(cols);
            dq.slice_mut(cols).assign(&dsh.dot(&kh));
            dk.slice_mut(cols).assign(&dsh.t().dot(&qh));
        }
        let dx = self.q.backward(&c.x, &dq, &mut g.q);
        let mut dmem = self.k.backward(&c.mem, &dk, &mut g.k);
        dmem += &self.v.backward(&c.mem, &dv, &mut g.v);
        (dx, dmem)
    }
}

#[derive(Debug, Clone)]
struct FfnW {
    w1: LinearW,
    w2: LinearW,
}

struct FfnCache {
    x: Array2<f64>,
    h: Array2<f64>,
}

impl FfnW {
    fn new(d: usize, ffn: usize, rng: &mut SplitMix64) -> FfnW {
        FfnW { w1: LinearW::new(d, ffn, rng), w2: LinearW::new(ffn, d, rng) }
    }

    fn zeros_like(&self) -> FfnW {
        FfnW { w1: self.w1.zeros_like(), w2: self.w2.zeros_like() }
    }

    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, FfnCache) {
        let mut h = self.w1.forward(x);
        h.mapv_inplace(|v| v.max(0.0));
        let y = self.w2.forward(&h);
        (y, FfnCache { x: x.clone(), h })
    }

    fn backward(&self, c: &FfnCache, dy: &Array2<f64>, g: &mut FfnW) -> Array2<f64> {
        let mut dh = self.w2.backward(&c.h, dy, &mut g.w2);
        dh.zip_mut_with(&c.h, |d, &h| {
            if h <= 0.0 {
                *d = 0.0;
            }
        });
        self.w1.backward(&c.x, &dh, &mut g.w1)
    }
}

#[derive(Debug, Clone)]
struct EncLayerW {
    ln1: LayerNormW,
    attn: AttnW,
    ln2: LayerNormW,
    ffn: FfnW,
}

struct EncCache {
    ln1: LnCache,
    attn: AttnCache,
    drop1: Option<Array2<f64>>,
    ln2: LnCache,
    ffn: FfnCache,
    drop2: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
struct DecLayerW {
    ln1: LayerNormW,
    self_attn: AttnW,
    ln2: LayerNormW,
    cross_attn: AttnW,
    ln3: LayerNormW,
    ffn: FfnW,
}

struct DecCache {
    ln1: LnCache,
    self_attn: AttnCache,
    drop1: Option<Array2<f64>>,
    ln2: LnCache,
    cross_attn: AttnCache,
    drop2: Option<Array2<f64>>,
    ln3: LnCache,
    ffn: FfnCache,
    drop3: Option<Array2<f64>>,
}

/// All learnable tensors. The same struct doubles as gradient storage; the
/// canonical tensor order defined by [`Weights::tensors`] is the checkpoint
/// manifest order and the optimizer state order.
#[derive(Debug, Clone)]
pub struct Weights {
    emb: Array2<f64>,
    enc: Vec<EncLayerW>,
    enc_ln: LayerNormW,
    dec: Vec<DecLayerW>,
    dec_ln: LayerNormW,
    out: LinearW,
}

impl Weights {
    fn init(cfg: &ModelConfig, rng: &mut SplitMix64) -> Weights {
        let d = cfg.d_model;
        let a_emb = 1.0 / (d as f64).sqrt();
        let mut emb = Array2::from_shape_fn((cfg.vocab_size, d), |_| rng.next_symmetric(a_emb));
        quantize(&mut emb);
        let enc = (0..cfg.encoder_layers)
            .map(|_| EncLayerW {
                ln1: LayerNormW::new(d),
                attn: AttnW::new(d, rng),
                ln2: LayerNormW::new(d),
                ffn: FfnW::new(d, cfg.ffn_dim, rng),
            })
            .collect();
        let dec = (0..cfg.decoder_layers)
            .map(|_| DecLayerW {
                ln1: LayerNormW::new(d),
                self_attn: AttnW::new(d, rng),
                ln2: LayerNormW::new(d),
                cross_attn: AttnW::new(d, rng),
                ln3: LayerNormW::new(d),
                ffn: FfnW::new(d, cfg.ffn_dim, rng),
            })
            .collect();
        Weights {
            emb,
            enc,
            enc_ln: LayerNormW::new(d),
            dec,
            dec_ln: LayerNormW::new(d),
            out: LinearW::new(d, cfg.vocab_size, rng),
        }
    }

    pub fn zeros_like(&self) -> Weights {
        Weights {
            emb: Array2::zeros(self.emb.raw_dim()),
            enc: self
                .enc
                .iter()
                .map(|l| EncLayerW {
                    ln1: l.ln1.zeros_like(),
                    attn: l.attn.zeros_like(),
                    ln2: l.ln2.zeros_like(),
                    ffn: l.ffn.zeros_like(),
                })
                .collect(),
            enc_ln: self.enc_ln.zeros_like(),
            dec: self
                .dec
                .iter()
                .map(|l| DecLayerW {
                    ln1: l.ln1.zeros_like(),
                    self_attn: l.self_attn.zeros_like(),
                    ln2: l.ln2.zeros_like(),
                    cross_attn: l.cross_attn.zeros_like(),
                    ln3: l.ln3.zeros_like(),
                    ffn: l.ffn.zeros_like(),
                })
                .collect(),
            dec_ln: self.dec_ln.zeros_like(),
            out: self.out.zeros_like(),
        }
    }

    /// Canonical `(name, tensor)` listing; the order defines the checkpoint
    /// manifest and must not change between save and load.
    pub fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out: Vec<(String, &Array2<f64>)> = vec![("embedding".to_string(), &self.emb)];
        for (i, l) in self.enc.iter().enumerate() {
            let p = format!("encoder.{i}");
            out.push((format!("{p}.ln1.gain"), &l.ln1.g));
            out.push((format!("{p}.ln1.bias"), &l.ln1.b));
            for (n, lin) in [("q", &l.attn.q), ("k", &l.attn.k), ("v", &l.attn.v), ("o", &l.attn.o)] {
                out.push((format!("{p}.attn.{n}.weight"), &lin.w));
                out.push((format!("{p}.attn.{n}.bias"), &lin.b));
            }
            out.push((format!("{p}.ln2.gain"), &l.ln2.g));
            out.push((format!("{p}.ln2.bias"), &l.ln2.b));
            out.push((format!("{p}.ffn.w1.weight"), &l.ffn.w1.w));
            out.push((format!("{p}.ffn.w1.bias"), &l.ffn.w1.b));
            out.push((format!("{p}.ffn.w2.weight"), &l.ffn.w2.w));
            out.push((format!("{p}.ffn.w2.bias"), &l.ffn.w2.b));
        }
        out.push(("encoder.final_ln.gain".to_string(), &self.enc_ln.g));
        out.push(("encoder.final_ln.bias".to_string(), &self.enc_ln.b));
        for (i, l) in self.dec.iter().enumerate() {
            let p = format!("decoder.{i}");
            out.push((format!("{p}.ln1.gain"), &l.ln1.g));
            out.push((format!("{p}.ln1.bias"), &l.ln1.b));
            for (n, lin) in
                [("q", &l.self_attn.q), ("k", &l.self_attn.k), ("v", &l.self_attn.v), ("o", &l.self_attn.o)]
            {
                out.push((format!("{p}.self_attn.{n}.weight"), &lin.w));
                out.push((format!("{p}.self_attn.{n}.bias"), &lin.b));
            }
            out.push((format!("{p}.ln2.gain"), &l.ln2.g));
            out.push((format!("{p}.ln2.bias"), &l.ln2.b));
            for (n, lin) in [
                ("q", &l.cross_attn.q),
                ("k", &l.cross_attn.k),
                ("v", &l.cross_attn.v),
                ("o", &l.cross_attn.o),
            ] {
                out.push((format!("{p}.cross_attn.{n}.weight"), &lin.w));
                out.push((format!("{p}.cross_attn.{n}.bias"), &lin.b));
            }
            out.push((format!("{p}.ln3.gain"), &l.ln3.g));
            out.push((format!("{p}.ln3.bias"), &l.ln3.b));
            out.push((format!("{p}.ffn.w1.weight"), &l.ffn.w1.w));
            out.push((format!("{p}.ffn.w1.bias"), &l.ffn.w1.b));
            out.push((format!("{p}.ffn.w2.weight"), &l.ffn.w2.w));
            out.push((format!("{p}.ffn.w2.bias"), &l.ffn.w2.b));
        }
        out.push(("decoder.final_ln.gain".to_string(), &self.dec_ln.g));
        out.push(("decoder.final_ln.bias".to_string(), &self.dec_ln.b));
        out.push(("out_proj.weight".to_string(), &self.out.w));
        out.push(("out_proj.bias".to_string(), &self.out.b));
        out
    }

    /// Mutable twin of [`Weights::tensors`], same names, same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out: Vec<(String, &mut Array2<f64>)> = vec![("embedding".to_string(), &mut self.emb)];
        for (i, l) in self.enc.iter_mut().enumerate() {
            let p = format!("encoder.{i}");
            out.push((format!("{p}.ln1.gain"), &mut l.ln1.g));
            out.push((format!("{p}.ln1.bias"), &mut l.ln1.b));
            for (n, lin) in
                [("q", &mut l.attn.q), ("k", &mut l.attn.k), ("v", &mut l.attn.v), ("o", &mut l.attn.o)]
            {
                out.push((format!("{p}.attn.{n}.weight"), &mut lin.w));
                out.push((format!("{p}.attn.{n}.bias"), &mut lin.b));
            }
            out.push((format!("{p}.ln2.gain"), &mut l.ln2.g));
            out.push((format!("{p}.ln2.bias"), &mut l.ln2.b));
            out.push((format!("{p}.ffn.w1.weight"), &mut l.ffn.w1.w));
            out.push((format!("{p}.ffn.w1.bias"), &mut l.ffn.w1.b));
            out.push((format!("{p}.ffn.w2.weight"), &mut l.ffn.w2.w));
            out.push((format!("{p}.ffn.w2.bias"), &mut l.ffn.w2.b));
        }
        out.push(("encoder.final_ln.gain".to_string(), &mut self.enc_ln.g));
        out.push(("encoder.final_ln.bias".to_string(), &mut self.enc_ln.b));
        for (i, l) in self.dec.iter_mut().enumerate() {
            let p = format!("decoder.{i}");
            out.push((format!("{p}.ln1.gain"), &mut l.ln1.g));
            out.push((format!("{p}.ln1.bias"), &mut l.ln1.b));
            for (n, lin) in [
                ("q", &mut l.self_attn.q),
                ("k", &mut l.self_attn.k),
                ("v", &mut l.self_attn.v),
                ("o", &mut l.self_attn.o),
            ] {
                out.push((format!("{p}.self_attn.{n}.weight"), &mut lin.w));
                out.push((format!("{p}.self_attn.{n}.bias"), &mut lin.b));
            }
            out.push((format!("{p}.ln2.gain"), &mut l.ln2.g));
            out.push((format!("{p}.ln2.bias"), &mut l.ln2.b));
            for (n, lin) in [
                ("q", &mut l.cross_attn.q),
                ("k", &mut l.cross_attn.k),
                ("v", &mut l.cross_attn.v),
                ("o", &mut l.cross_attn.o),
            ] {
                out.push((format!("{p}.cross_attn.{n}.weight"), &mut lin.w));
                out.push((format!("{p}.cross_attn.{n}.bias"), &mut lin.b));
            }
            out.push((format!("{p}.ln3.gain"), &mut l.ln3.g));
            out.push((format!("{p}.ln3.bias"), &mut l.ln3.b));
            out.push((format!("{p}.ffn.w1.weight"), &mut l.ffn.w1.w));
            out.push((format!("{p}.ffn.w1.bias"), &mut l.ffn.w1.b));
            out.push((format!("{p}.ffn.w2.weight"), &mut l.ffn.w2.w));
            out.push((format!("{p}.ffn.w2.bias"), &mut l.ffn.w2.b));
        }
        out.push(("decoder.final_ln.gain".to_string(), &mut self.dec_ln.g));
        out.push(("decoder.final_ln.bias".to_string(), &mut self.dec_ln.b));
        out.push(("out_proj.weight".to_string(), &mut self.out.w));
        out.push(("out_proj.bias".to_string(), &mut self.out.b));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

fn softmax_rows_inplace(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

fn positional_table(len: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, d), |(pos, i)| {
        let exponent = (2 * (i / 2)) as f64 / d as f64;
        let angle = pos as f64 / 10000f64.powf(exponent);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// The micro sequence-to-sequence model.
#[derive(Debug, Clone)]
pub struct Seq2Seq {
    cfg: ModelConfig,
    w: Weights,
    pe_enc: Array2<f64>,
    pe_dec: Array2<f64>,
}

struct TrainCache {
    enc_caches: Vec<EncCache>,
    enc_ln: LnCache,
    enc_out: Array2<f64>,
    dec_caches: Vec<DecCache>,
    dec_ln: LnCache,
    dec_hidden: Array2<f64>,
    probs: Array2<f64>,
}

impl Seq2Seq {
    /// Builds a model with Xavier-uniform weights drawn from the `init`
    /// substream of `seed`. Identical `(config, seed)` pairs produce
    /// identical weights.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Seq2Seq> {
        cfg.validate()?;
        let mut rng = substream(seed, "init", 0);
        let w = Weights::init(&cfg, &mut rng);
        let pe_enc = positional_table(cfg.max_input_len, cfg.d_model);
        // The decoder input is the target shifted right behind a start
        // token, so it can be one longer than the longest target.
        let pe_dec = positional_table(cfg.max_output_len + 1, cfg.d_model);
        Ok(Seq2Seq { cfg, w, pe_enc, pe_dec })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &Weights {
        &self.w
    }

    pub fn weights_mut(&mut self) -> &mut Weights {
        &mut self.w
    }

    fn check_ids(&self, ids: &[u32], cap: usize, what: &str) -> Result<()> {
        if ids.is_empty() {
            return Err(ZettError::model(format!("{what} is empty")));
        }
        if ids.len() > cap {
            return Err(ZettError::model(format!("{what} length {} exceeds cap {cap}", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.cfg.vocab_size) {
            return Err(ZettError::model(format!("{what} contains id {bad} outside vocab of size {}", self.cfg.vocab_size)));
        }
        Ok(())
    }

    fn embed(&self, ids: &[u32], pe: &Array2<f64>) -> Array2<f64> {
        let d = self.cfg.d_model;
        let scale = (d as f64).sqrt();
        let mut x = Array2::zeros((ids.len(), d));
        for (t, &id) in ids.iter().enumerate() {
            let row = self.w.emb.row(id as usize);
            for j in 0..d {
                x[[t, j]] = row[j] * scale + pe[[t, j]];
            }
        }
        x
    }

    fn run_encoder(&self, input_ids: &[u32], dropout: &mut DropoutState) -> Result<(Array2<f64>, Vec<EncCache>, LnCache)> {
        self.check_ids(input_ids, self.cfg.max_input_len, "encoder input")?;
        let mut x = self.embed(input_ids, &self.pe_enc);
        let mut caches = Vec::with_capacity(self.w.enc.len());
        for layer in &self.w.enc {
            let (a, ln1) = layer.ln1.forward(&x);
            let (mut sa, attn) = layer.attn.forward(&a, &a, false, self.cfg.heads);
            let drop1 = dropout.apply(&mut sa);
            x += &sa;
            let (f, ln2) = layer.ln2.forward(&x);
            let (mut ff, ffn) = layer.ffn.forward(&f);
            let drop2 = dropout.apply(&mut ff);
            x += &ff;
            caches.push(EncCache { ln1, attn, drop1, ln2, ffn, drop2 });
        }
        let (out, ln) = self.w.enc_ln.forward(&x);
        Ok((out, caches, ln))
    }

    fn run_decoder(
        &self,
        dec_input_ids: &[u32],
        enc_out: &Array2<f64>,
        dropout: &mut DropoutState,
    ) -> Result<(Array2<f64>, Vec<DecCache>, LnCache)> {
        self.check_ids(dec_input_ids, self.cfg.max_output_len + 1, "decoder input")?;
        let mut y = self.embed(dec_input_ids, &self.pe_dec);
        let mut caches = Vec::with_capacity(self.w.dec.len());
        for layer in &self.w.dec {
            let (a, ln1) = layer.ln1.forward(&y);
            let (mut sa, self_attn) = layer.self_attn.forward(&a, &a, true, self.cfg.heads);
            let drop1 = dropout.apply(&mut sa);
            y += &sa;
            let (c, ln2) = layer.ln2.forward(&y);
            let (mut ca, cross_attn) = layer.cross_attn.forward(&c, enc_out, false, self.cfg.heads);
            let drop2 = dropout.apply(&mut ca);
            y += &ca;
            let (f, ln3) = layer.ln3.forward(&y);
            let (mut ff, ffn) = layer.ffn.forward(&f);
            let drop3 = dropout.apply(&mut ff);
            y += &ff;
            caches.push(DecCache { ln1, self_attn, drop1, ln2, cross_attn, drop2, ln3, ffn, drop3 });
        }
        let (hidden, ln) = self.w.dec_ln.forward(&y);
        Ok((hidden, caches, ln))
    }

    /// Teacher-forced logits: row `t` predicts `target[t]` given the start
    /// token and `target[..t]`.
    pub fn logits_teacher_forced(&self, input_ids: &[u32], target_ids: &[u32]) -> Result<Array2<f64>> {
        let mut off = DropoutState::off();
        let (enc_out, _, _) = self.run_encoder(input_ids, &mut off)?;
        let dec_input = shift_right(target_ids, self.cfg.max_output_len)?;
        let (hidden, _, _) = self.run_decoder(&dec_input, &enc_out, &mut off)?;
        Ok(self.w.out.forward(&hidden))
    }

    /// Runs the encoder stack alone so callers decoding many continuations
    /// of one input can reuse the result.
    pub fn encode_input(&self, input_ids: &[u32]) -> Result<Array2<f64>> {
        let mut off = DropoutState::off();
        let (enc_out, _, _) = self.run_encoder(input_ids, &mut off)?;
        Ok(enc_out)
    }

    /// Logits for the next token after `prefix` given a precomputed
    /// [`Seq2Seq::encode_input`] result.
    pub fn next_logits_with_enc(&self, enc_out: &Array2<f64>, prefix_ids: &[u32]) -> Result<Vec<f64>> {
        if prefix_ids.len() > self.cfg.max_output_len {
            return Err(ZettError::model(format!(
                "prefix length {} exceeds max_output_len {}",
                prefix_ids.len(),
                self.cfg.max_output_len
            )));
        }
        let mut off = DropoutState::off();
        let mut dec_input = Vec::with_capacity(prefix_ids.len() + 1);
        dec_input.push(PAD);
        dec_input.extend_from_slice(prefix_ids);
        let (hidden, _, _) = self.run_decoder(&dec_input, enc_out, &mut off)?;
        let last = hidden.slice(s![hidden.nrows() - 1..hidden.nrows(), ..]).to_owned();
        Ok(self.w.out.forward(&last).row(0).to_vec())
    }

    /// Logits for the next token after `prefix` (possibly empty).
    pub fn next_logits(&self, input_ids: &[u32], prefix_ids: &[u32]) -> Result<Vec<f64>> {
        let enc_out = self.encode_input(input_ids)?;
        self.next_logits_with_enc(&enc_out, prefix_ids)
    }

    /// Equivalent to calling [`Seq2Seq::next_logits`] per query; exposed so
    /// callers can hand over a whole batch at once.
    pub fn next_logits_batch(&self, queries: &[(&[u32], &[u32])]) -> Result<Vec<Vec<f64>>> {
        queries.iter().map(|(input, prefix)| self.next_logits(input, prefix)).collect()
    }

    /// Mean negative log-likelihood of `target_ids` under teacher forcing.
    pub fn loss(&self, input_ids: &[u32], target_ids: &[u32]) -> Result<f64> {
        let logits = self.logits_teacher_forced(input_ids, target_ids)?;
        let mut total = 0.0;
        for (t, &tok) in target_ids.iter().enumerate() {
            let row: Vec<f64> = logits.row(t).to_vec();
            total -= log_softmax(&row)[tok as usize];
        }
        Ok(total / target_ids.len() as f64)
    }

    fn forward_train(
        &self,
        input_ids: &[u32],
        target_ids: &[u32],
        dropout: &mut DropoutState,
    ) -> Result<(f64, Vec<u32>, TrainCache)> {
        let (enc_out, enc_caches, enc_ln) = self.run_encoder(input_ids, dropout)?;
        let dec_input = shift_right(target_ids, self.cfg.max_output_len)?;
        let (dec_hidden, dec_caches, dec_ln) = self.run_decoder(&dec_input, &enc_out, dropout)?;
        let logits = self.w.out.forward(&dec_hidden);
        let mut probs = logits;
        softmax_rows_inplace(&mut probs);
        let mut loss = 0.0;
        for (t, &tok) in target_ids.iter().enumerate() {
            loss -= probs[[t, tok as usize]].max(f64::MIN_POSITIVE).ln();
        }
        loss /= target_ids.len() as f64;
        Ok((loss, dec_input, TrainCache { enc_caches, enc_ln, enc_out, dec_caches, dec_ln, dec_hidden, probs }))
    }

    /// Loss and analytic parameter gradients for one `(input, target)` pair.
    pub fn grads(&self, input_ids: &[u32], target_ids: &[u32]) -> Result<(f64, Weights)> {
        let mut off = DropoutState::off();
        self.grads_with_dropout(input_ids, target_ids, &mut off)
    }

    fn grads_with_dropout(
        &self,
        input_ids: &[u32],
        target_ids: &[u32],
        dropout: &mut DropoutState,
    ) -> Result<(f64, Weights)> {
        let (loss, dec_input, cache) = self.forward_train(input_ids, target_ids, dropout)?;
        let mut g = self.w.zeros_like();
        let tlen = target_ids.len() as f64;

        // d loss / d logits = (softmax - onehot) / T.
        let mut dlogits = cache.probs.clone();
        for (t, &tok) in target_ids.iter().enumerate() {
            dlogits[[t, tok as usize]] -= 1.0;
        }
        dlogits.mapv_inplace(|v| v / tlen);

        let dhidden = self.w.out.backward(&cache.dec_hidden, &dlogits, &mut g.out);
        let mut dy = self.w.dec_ln.backward(&cache.dec_ln, &dhidden, &mut g.dec_ln);
        let mut denc_out: Array2<f64> = Array2::zeros(cache.enc_out.raw_dim());
        for (layer, (gl, c)) in
            self.w.dec.iter().zip(g.dec.iter_mut().zip(cache.dec_caches.iter())).rev()
        {
            let mut dff = dy.clone();
            apply_mask(&mut dff, &c.drop3);
            let df = layer.ffn.backward(&c.ffn, &dff, &mut gl.ffn);
            dy += &layer.ln3.backward(&c.ln3, &df, &mut gl.ln3);

            let mut dca = dy.clone();
            apply_mask(&mut dca, &c.drop2);
            let (dc, dmem) = layer.cross_attn.backward(&c.cross_attn, &dca, &mut gl.cross_attn, self.cfg.heads);
            denc_out += &dmem;
            dy += &layer.ln2.backward(&c.ln2, &dc, &mut gl.ln2);

            let mut dsa = dy.clone();
            apply_mask(&mut dsa, &c.drop1);
            let (da, da_mem) = layer.self_attn.backward(&c.self_attn, &dsa, &mut gl.self_attn, self.cfg.heads);
            let da_total = da + da_mem;
            dy += &layer.ln1.backward(&c.ln1, &da_total, &mut gl.ln1);
        }
        self.embed_backward(&dec_input, &dy, &mut g.emb);

        let mut dx = self.w.enc_ln.backward(&cache.enc_ln, &denc_out, &mut g.enc_ln);
        for (layer, (gl, c)) in
            self.w.enc.iter().zip(g.enc.iter_mut().zip(cache.enc_caches.iter())).rev()
        {
            let mut dff = dx.clone();
            apply_mask(&mut dff, &c.drop2);
            let df = layer.ffn.backward(&c.ffn, &dff, &mut gl.ffn);
            dx += &layer.ln2.backward(&c.ln2, &df, &mut gl.ln2);

            let mut dsa = dx.clone();
            apply_mask(&mut dsa, &c.drop1);
            let (da, da_mem) = layer.attn.backward(&c.attn, &dsa, &mut gl.attn, self.cfg.heads);
            let da_total = da + da_mem;
            dx += &layer.ln1.backward(&c.ln1, &da_total, &mut gl.ln1);
        }
        self.embed_backward(input_ids, &dx, &mut g.emb);

        Ok((loss, g))
    }

    fn embed_backward(&self, ids: &[u32], dx: &Array2<f64>, g_emb: &mut Array2<f64>) {
        let scale = (self.cfg.d_model as f64).sqrt();
        for (t, &id) in ids.iter().enumerate() {
            let mut row = g_emb.row_mut(id as usize);
            for (j, v) in dx.row(t).iter().enumerate() {
                row[j] += v * scale;
            }
        }
    }
}

fn shift_right(target_ids: &[u32], cap: usize) -> Result<Vec<u32>> {
    if target_ids.is_empty() {
        return Err(ZettError::model("target is empty"));
    }
    if target_ids.len() > cap {
        return Err(ZettError::model(format!("target length {} exceeds max_output_len {cap}", target_ids.len())));
    }
    let mut dec = Vec::with_capacity(target_ids.len());
    dec.push(PAD);
    dec.extend_from_slice(&target_ids[..target_ids.len() - 1]);
    Ok(dec)
}

/// Inverted-dropout masks on the residual branches, active only while
/// training with `dropout > 0`.
struct DropoutState {
    p: f64,
    rng: Option<SplitMix64>,
}

impl DropoutState {
    fn off() -> DropoutState {
        DropoutState { p: 0.0, rng: None }
    }

    fn new(p: f64, rng: SplitMix64) -> DropoutState {
        if p > 0.0 {
            DropoutState { p, rng: Some(rng) }
        } else {
            DropoutState::off()
        }
    }

    fn apply(&mut self, x: &mut Array2<f64>) -> Option<Array2<f64>> {
        let rng = self.rng.as_mut()?;
        let keep = 1.0 / (1.0 - self.p);
        let mask = Array2::from_shape_fn(x.raw_dim(), |_| if rng.next_f64() < self.p { 0.0 } else { keep });
        *x *= &mask;
        Some(mask)
    }
}

fn apply_mask(dy: &mut Array2<f64>, mask: &Option<Array2<f64>>) {
    if let Some(m) = mask {
        *dy *= m;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 64,
            learning_rate: 3e-5,
            warmup_ratio: 0.2,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

/// Linear warmup to the peak rate, then linear decay to zero at the final
/// step. Steps are 1-based: with 100 total steps and ratio 0.2 the schedule
/// peaks exactly at step 20.
pub fn lr_at(step: usize, total_steps: usize, warmup_ratio: f64, peak: f64) -> f64 {
    assert!(step >= 1 && step <= total_steps);
    let warmup = (warmup_ratio * total_steps as f64).round() as usize;
    if warmup > 0 && step <= warmup {
        peak * step as f64 / warmup as f64
    } else if total_steps == warmup {
        peak
    } else {
        peak * (total_steps - step) as f64 / (total_steps - warmup) as f64
    }
}

/// Adam moments with decoupled weight decay. Decay touches only matrix
/// weights (names ending in `.weight` plus the embedding), never biases or
/// layer-norm parameters.
pub struct AdamW {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamW {
    pub fn new(weights: &Weights) -> AdamW {
        let shapes: Vec<Array2<f64>> =
            weights.tensors().iter().map(|(_, t)| Array2::zeros(t.raw_dim())).collect();
        AdamW { m: shapes.clone(), v: shapes, step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step(&mut self, weights: &mut Weights, grads: &Weights, lr: f64, weight_decay: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let gs = grads.tensors();
        for (i, (name, w)) in weights.tensors_mut().into_iter().enumerate() {
            let g = gs[i].1;
            debug_assert_eq!(name, gs[i].0);
            let decayed = weight_decay > 0.0 && (name.ends_with(".weight") || name == "embedding");
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for ((w, &g), (m, v)) in w.iter_mut().zip(g.iter()).zip(m.iter_mut().zip(v.iter_mut())) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                let mut upd = mhat / (vhat.sqrt() + self.eps);
                if decayed {
                    upd += weight_decay * *w;
                }
                *w = q32(*w - lr * upd);
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
}

/// Trains in place over `(input, target)` id pairs. Example order is
/// reshuffled every epoch from the `train-shuffle` substream of
/// `cfg.seed`; batches are consumed in order and the batch loss is the mean
/// of the per-example mean NLL. Fully deterministic for a fixed config.
pub fn train(model: &mut Seq2Seq, pairs: &[(Vec<u32>, Vec<u32>)], cfg: &TrainConfig) -> Result<TrainReport> {
    if pairs.is_empty() {
        return Err(ZettError::validation("no training pairs"));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(ZettError::config("epochs and batch_size must be positive"));
    }
    let steps_per_epoch = pairs.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut opt = AdamW::new(&model.w);
    let mut dropout_rng = substream(cfg.seed, "dropout", 0);
    let mut step = 0;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut rng = substream(cfg.seed, "train-shuffle", epoch as u64);
        crate::rng::shuffle(&mut order, &mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let lr = lr_at(step, total_steps, cfg.warmup_ratio, cfg.learning_rate);
            let mut acc = model.w.zeros_like();
            let mut batch_loss = 0.0;
            let scale = 1.0 / chunk.len() as f64;
            for &idx in chunk {
                let (input, target) = &pairs[idx];
                let mut dropout = DropoutState::new(model.cfg.dropout, dropout_rng);
                let (loss, g) = model.grads_with_dropout(input, target, &mut dropout)?;
                if let Some(r) = dropout.rng {
                    dropout_rng = r;
                }
                batch_loss += loss * scale;
                accumulate(&mut acc, &g, scale);
            }
            opt.step(&mut model.w, &acc, lr, cfg.weight_decay);
            epoch_loss += batch_loss;
        }
        epoch_losses.push(epoch_loss / steps_per_epoch as f64);
    }
    let final_loss = *epoch_losses.last().unwrap();
    Ok(TrainReport { steps: step, epoch_losses, final_loss })
}

fn accumulate(acc: &mut Weights, g: &Weights, scale: f64) {
    let gs = g.tensors();
    for (i, (_, a)) in acc.tensors_mut().into_iter().enumerate() {
        a.zip_mut_with(gs[i].1, |a, &b| *a += b * scale);
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ZETTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    vocab_hash: String,
    step: u64,
    seed: u64,
    tensors: Vec<TensorMeta>,
}

/// Everything in a checkpoint besides the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub vocab_hash: String,
    pub step: u64,
    pub seed: u64,
}

/// Layout: 8 magic bytes, u32 LE format version, u32 LE header length, JSON
/// header (config, vocab hash, step, seed, tensor manifest), then each
/// tensor's values row-major as little-endian f32 in manifest order.
/// Parameters live on the f32 grid, so save/load/save is byte-identical and
/// a reloaded model computes bitwise-identical forwards.
pub fn save_checkpoint(model: &Seq2Seq, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(model, meta);
    std::fs::write(path, bytes).map_err(|e| ZettError::io(path.display().to_string(), e))
}

pub fn checkpoint_bytes(model: &Seq2Seq, meta: &CheckpointMeta) -> Vec<u8> {
    let tensors = model.w.tensors();
    let header = CheckpointHeader {
        config: model.cfg.clone(),
        vocab_hash: meta.vocab_hash.clone(),
        step: meta.step,
        seed: meta.seed,
        tensors: tensors.iter().map(|(n, t)| TensorMeta { name: n.clone(), shape: [t.nrows(), t.ncols()] }).collect(),
    };
    let header_json = serde_json::to_vec(&header).expect("header is serializable");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (_, t) in &tensors {
        for &v in t.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn load_checkpoint(path: &Path) -> Result<(Seq2Seq, CheckpointMeta)> {
    let mut file = std::fs::File::open(path).map_err(|e| ZettError::io(path.display().to_string(), e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| ZettError::io(path.display().to_string(), e))?;
    checkpoint_from_bytes(&bytes)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(Seq2Seq, CheckpointMeta)> {
    let bad = |msg: &str| ZettError::model(format!("malformed checkpoint: {msg}"));
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body_at = 16 + header_len;
    if bytes.len() < body_at {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[16..body_at]).map_err(|e| bad(&format!("header: {e}")))?;
    let mut model = Seq2Seq::new(header.config.clone(), 0)?;
    let mut offset = body_at;
    let metas = header.tensors;
    let mut slots = model.w.tensors_mut();
    if metas.len() != slots.len() {
        return Err(bad(&format!("manifest lists {} tensors, model has {}", metas.len(), slots.len())));
    }
    for (meta, (name, tensor)) in metas.iter().zip(slots.iter_mut()) {
        if meta.name != *name || meta.shape != [tensor.nrows(), tensor.ncols()] {
            return Err(bad(&format!(
                "tensor {:?} shape {:?} does not match expected {:?} {:?}",
                meta.name,
                meta.shape,
                name,
                [tensor.nrows(), tensor.ncols()]
            )));
        }
        let n = tensor.len() * 4;
        if bytes.len() < offset + n {
            return Err(bad("truncated tensor data"));
        }
        for (i, v) in tensor.iter_mut().enumerate() {
            let at = offset + i * 4;
            *v = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as f64;
        }
        offset += n;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok((model, CheckpointMeta { vocab_hash: header.vocab_hash, step: header.step, seed: header.seed }))
}

/// Convenience save with an explicit writer, used by tests on buffers.
pub fn write_checkpoint<W: Write>(model: &Seq2Seq, meta: &CheckpointMeta, mut w: W) -> std::io::Result<()> {
    w.write_all(&checkpoint_bytes(model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::RESERVED;

    fn tiny_cfg(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            d_model: 16,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            ffn_dim: 24,
            max_input_len: 16,
            max_output_len: 12,
            dropout: 0.0,
        }
    }

    #[test]
    fn config_validation_catches_bad_shapes() {
        let c = ModelConfig { heads: 5, ..ModelConfig::default() };
        assert!(c.validate().is_err());
        let c = ModelConfig { vocab_size: 3, ..ModelConfig::default() };
        assert!(c.validate().is_err());
        let c = ModelConfig { dropout: 1.0, ..ModelConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_weights_give_uniform_distributions() {
        let mut m = Seq2Seq::new(tiny_cfg(10), 0).unwrap();
        for (_, t) in m.w.tensors_mut() {
            t.fill(0.0);
        }
        let logits = m.next_logits(&[6, 7], &[]).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
        let lp = log_softmax(&logits);
        let expect = -(10f64).ln();
        for v in lp {
            assert!((v - expect).abs() < 1e-12);
        }
        let loss = m.loss(&[6, 7], &[8, 9, 5]).unwrap();
        assert!((loss - (10f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_independent_log_softmax() {
        let m = Seq2Seq::new(tiny_cfg(12), 3).unwrap();
        let input = vec![6, 7, 8];
        let target = vec![9, 10, 5];
        let logits = m.logits_teacher_forced(&input, &target).unwrap();
        // Independent recomputation straight from the definition.
        let mut expect = 0.0;
        for (t, &tok) in target.iter().enumerate() {
            let row: Vec<f64> = logits.row(t).to_vec();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            expect -= row[tok as usize] - m - z.ln();
        }
        expect /= target.len() as f64;
        let got = m.loss(&input, &target).unwrap();
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Seq2Seq::new(tiny_cfg(10), 5).unwrap();
        let b = Seq2Seq::new(tiny_cfg(10), 5).unwrap();
        for ((_, x), (_, y)) in a.w.tensors().iter().zip(b.w.tensors()) {
            assert_eq!(x, y);
        }
        let c = Seq2Seq::new(tiny_cfg(10), 6).unwrap();
        assert!(a.w.tensors().iter().zip(c.w.tensors()).any(|((_, x), (_, y))| x != y));
    }

    #[test]
    fn tensor_listings_agree_and_names_are_unique() {
        let mut m = Seq2Seq::new(ModelConfig::with_vocab(20), 0).unwrap();
        let names: Vec<String> = m.w.tensors().into_iter().map(|(n, _)| n).collect();
        let names_mut: Vec<String> = m.w.tensors_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, names_mut);
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        assert!(m.w.param_count() >= 64);
    }

    #[test]
    fn batched_forward_equals_looped() {
        let m = Seq2Seq::new(tiny_cfg(12), 9).unwrap();
        let q1: (&[u32], &[u32]) = (&[6, 7], &[3, 8]);
        let q2: (&[u32], &[u32]) = (&[9, 10, 11], &[3]);
        let batch = m.next_logits_batch(&[q1, q2]).unwrap();
        assert_eq!(batch[0], m.next_logits(q1.0, q1.1).unwrap());
        assert_eq!(batch[1], m.next_logits(q2.0, q2.1).unwrap());
    }

    #[test]
    fn decoder_is_causal() {
        let m = Seq2Seq::new(tiny_cfg(12), 4).unwrap();
        let input = vec![6, 7, 8];
        let a = m.logits_teacher_forced(&input, &[9, 10, 11, 6]).unwrap();
        let b = m.logits_teacher_forced(&input, &[9, 10, 7, 8]).unwrap();
        // Rows 0..=2 see prefixes of length <= 2, identical in both targets.
        for t in 0..3 {
            assert_eq!(a.row(t), b.row(t), "row {t} should not depend on later tokens");
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn length_overflow_is_an_error() {
        let m = Seq2Seq::new(tiny_cfg(12), 4).unwrap();
        let long_in: Vec<u32> = vec![6; 17];
        assert!(m.next_logits(&long_in, &[]).is_err());
        let long_tgt: Vec<u32> = vec![6; 13];
        assert!(m.loss(&[6], &long_tgt).is_err());
        assert!(m.loss(&[], &[6]).is_err());
        assert!(m.next_logits(&[50], &[]).is_err());
    }

    #[test]
    fn warmup_schedule_peaks_and_decays() {
        let peak = 1e-3;
        assert_eq!(lr_at(20, 100, 0.2, peak), peak);
        assert!(lr_at(19, 100, 0.2, peak) < peak);
        assert!(lr_at(21, 100, 0.2, peak) < peak);
        assert_eq!(lr_at(100, 100, 0.2, peak), 0.0);
        assert!((lr_at(1, 100, 0.2, peak) - peak / 20.0).abs() < 1e-18);
        // Degenerate all-warmup schedule stays defined.
        assert_eq!(lr_at(5, 10, 1.0, peak), peak * 0.5);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let cfg = tiny_cfg(12);
        let pairs: Vec<(Vec<u32>, Vec<u32>)> = vec![
            (vec![6, 7], vec![3, 6, 4, 7, 5]),
            (vec![8, 9], vec![3, 8, 4, 9, 5]),
            (vec![10, 11], vec![3, 10, 4, 11, 5]),
        ];
        let tc = TrainConfig { epochs: 30, batch_size: 2, learning_rate: 3e-3, seed: 1, ..TrainConfig::default() };
        let mut m1 = Seq2Seq::new(cfg.clone(), 1).unwrap();
        let r1 = train(&mut m1, &pairs, &tc).unwrap();
        let mut m2 = Seq2Seq::new(cfg, 1).unwrap();
        let r2 = train(&mut m2, &pairs, &tc).unwrap();
        assert_eq!(r1.epoch_losses, r2.epoch_losses);
        let meta = CheckpointMeta { vocab_hash: "h".into(), step: r1.steps as u64, seed: 1 };
        assert_eq!(checkpoint_bytes(&m1, &meta), checkpoint_bytes(&m2, &meta));
        assert!(r1.final_loss < r1.epoch_losses[0], "loss should drop: {:?}", r1.epoch_losses);
    }

    #[test]
    fn dropout_training_stays_finite_and_deterministic() {
        let mut cfg = tiny_cfg(12);
        cfg.dropout = 0.3;
        let pairs = vec![(vec![6, 7], vec![3, 6, 4, 7, 5])];
        let tc = TrainConfig { epochs: 5, batch_size: 1, learning_rate: 1e-3, seed: 2, ..TrainConfig::default() };
        let mut m1 = Seq2Seq::new(cfg.clone(), 2).unwrap();
        let r1 = train(&mut m1, &pairs, &tc).unwrap();
        let mut m2 = Seq2Seq::new(cfg, 2).unwrap();
        let r2 = train(&mut m2, &pairs, &tc).unwrap();
        assert_eq!(r1.epoch_losses, r2.epoch_losses);
        assert!(r1.final_loss.is_finite());
    }

    #[test]
    fn checkpoint_round_trips_bitwise_and_preserves_forwards() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.zett");
        let mut m = Seq2Seq::new(tiny_cfg(12), 7).unwrap();
        let pairs = vec![(vec![6, 7], vec![3, 6, 4, 7, 5])];
        let tc = TrainConfig { epochs: 3, batch_size: 1, learning_rate: 1e-3, seed: 7, ..TrainConfig::default() };
        train(&mut m, &pairs, &tc).unwrap();
        let meta = CheckpointMeta { vocab_hash: "abc".into(), step: 3, seed: 7 };
        save_checkpoint(&m, &meta, &path).unwrap();
        let b1 = std::fs::read(&path).unwrap();
        let (m2, meta2) = load_checkpoint(&path).unwrap();
        assert_eq!(meta, meta2);
        let b2 = checkpoint_bytes(&m2, &meta2);
        assert_eq!(b1, b2, "save -> load -> save must be byte-identical");
        // Parameters sit on the f32 grid, so the reload is lossless and the
        // probe forwards agree bitwise.
        let probe_in = vec![6u32, 8, 9];
        let probe_pre = vec![3u32, 7];
        assert_eq!(m.next_logits(&probe_in, &probe_pre).unwrap(), m2.next_logits(&probe_in, &probe_pre).unwrap());
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let m = Seq2Seq::new(tiny_cfg(12), 7).unwrap();
        let meta = CheckpointMeta { vocab_hash: "h".into(), step: 0, seed: 7 };
        let bytes = checkpoint_bytes(&m, &meta);
        assert!(checkpoint_from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(checkpoint_from_bytes(&bad_magic).is_err());
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(checkpoint_from_bytes(&trailing).is_err());
        assert!(checkpoint_from_bytes(&bytes).is_ok());
    }

    #[test]
    fn gradients_match_finite_differences() {
        // Central differences with step 1e-5 against the analytic backward
        // pass, two sampled entries per tensor so every parameter role is
        // covered. The 1e-6 denominator floor only silences parameters whose
        // gradient is below the finite-difference noise floor (~1e-11).
        let mut m = Seq2Seq::new(tiny_cfg(12), 11).unwrap();
        let input = vec![6u32, 7, 8, 9];
        let target = vec![3u32, 8, 4, 9, 5];
        let (_, analytic) = m.grads(&input, &target).unwrap();
        let an: Vec<(String, Vec<f64>)> =
            analytic.tensors().into_iter().map(|(n, t)| (n, t.iter().cloned().collect())).collect();
        let mut rng = SplitMix64::new(99);
        let h = 1e-5;
        let mut checked = 0;
        let mut worst = 0.0f64;
        let ntensors = m.w.tensors().len();
        for ti in 0..ntensors {
            let len = m.w.tensors()[ti].1.len();
            for _ in 0..2 {
                let fi = rng.next_below(len as u64) as usize;
                let orig = {
                    let mut slots = m.w.tensors_mut();
                    let v = slots[ti].1.as_slice_mut().unwrap()[fi];
                    slots[ti].1.as_slice_mut().unwrap()[fi] = v + h;
                    v
                };
                let up = m.loss(&input, &target).unwrap();
                m.w.tensors_mut()[ti].1.as_slice_mut().unwrap()[fi] = orig - h;
                let down = m.loss(&input, &target).unwrap();
                m.w.tensors_mut()[ti].1.as_slice_mut().unwrap()[fi] = orig;
                let fd = (up - down) / (2.0 * h);
                let a = an[ti].1[fi];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                if rel > worst {
                    worst = rel;
                }
                assert!(rel <= 1e-4, "tensor {} idx {fi}: analytic {a} vs fd {fd} rel {rel}", an[ti].0);
                checked += 1;
            }
        }
        assert!(checked >= 64, "sampled only {checked} parameters");
        assert!(worst <= 1e-4);
    }

    #[test]
    fn reserved_vocab_floor_is_enforced() {
        assert!(Seq2Seq::new(tiny_cfg(RESERVED as usize), 0).is_ok());
        assert!(Seq2Seq::new(tiny_cfg(RESERVED as usize - 1), 0).is_err());
    }
}
