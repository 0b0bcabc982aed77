//! Naive 64-bit forward pass used as a test oracle.
//!
//! Shares no kernel code with the engine: weights are decoded with
//! [`crate::quant::dequantize`] up front, everything else is written out
//! with plain loops in `f64`, and attention recomputes the whole sequence
//! instead of using a cache.

use crate::container::ModelContainer;
use crate::model::{names, ModelConfig, ModelError};
use crate::quant;
use crate::tokenizer::TokenId;

struct Mat {
    rows: usize,
    cols: usize,
    w: Vec<f64>,
}

impl Mat {
    fn mul(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| {
                let row = &self.w[r * self.cols..(r + 1) * self.cols];
                row.iter().zip(x).map(|(a, b)| a * b).sum()
            })
            .collect()
    }
}

struct Layer {
    attn_norm: Vec<f64>,
    wq: Mat,
    wk: Mat,
    wv: Mat,
    wo: Mat,
    ffn_norm: Vec<f64>,
    gate: Mat,
    up: Mat,
    down: Mat,
}

pub struct ReferenceModel {
    pub config: ModelConfig,
    embd: Mat,
    layers: Vec<Layer>,
    out_norm: Vec<f64>,
    out: Mat,
}

fn tensor(c: &ModelContainer, name: &str) -> Result<Mat, ModelError> {
    let (desc, data) = c
        .get_tensor(name)
        .map_err(|_| ModelError::MissingTensor(name.to_string()))?;
    let w = quant::dequantize(data, desc.dtype).map_err(|e| ModelError::ShapeMismatch {
        name: name.to_string(),
        reason: e.to_string(),
    })?;
    let cols = *desc.dims.last().unwrap() as usize;
    Ok(Mat {
        rows: w.len() / cols,
        cols,
        w: w.into_iter().map(f64::from).collect(),
    })
}

fn rmsnorm(x: &[f64], w: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    x.iter().zip(w).map(|(a, b)| a * inv * b).collect()
}

fn rope(v: &mut [f64], pos: usize, theta: f64) {
    let hd = v.len();
    for i in 0..hd / 2 {
        let angle = pos as f64 * theta.powf(-2.0 * i as f64 / hd as f64);
        let (s, c) = angle.sin_cos();
        let (a, b) = (v[2 * i], v[2 * i + 1]);
        v[2 * i] = a * c - b * s;
        v[2 * i + 1] = a * s + b * c;
    }
}

impl ReferenceModel {
    pub fn from_container(c: &ModelContainer) -> Result<Self, ModelError> {
        let config = ModelConfig::from_container(c)?;
        let layers = (0..config.n_layers)
            .map(|l| {
                Ok(Layer {
                    attn_norm: tensor(c, &names::attn_norm(l))?.w,
                    wq: tensor(c, &names::attn_q(l))?,
                    wk: tensor(c, &names::attn_k(l))?,
                    wv: tensor(c, &names::attn_v(l))?,
                    wo: tensor(c, &names::attn_o(l))?,
                    ffn_norm: tensor(c, &names::ffn_norm(l))?.w,
                    gate: tensor(c, &names::ffn_gate(l))?,
                    up: tensor(c, &names::ffn_up(l))?,
                    down: tensor(c, &names::ffn_down(l))?,
                })
            })
            .collect::<Result<_, ModelError>>()?;
        Ok(Self {
            config,
            embd: tensor(c, names::TOKEN_EMBD)?,
            layers,
            out_norm: tensor(c, names::OUTPUT_NORM)?.w,
            out: tensor(c, names::OUTPUT)?,
        })
    }

    /// Logits after every position of `tokens`.
    pub fn logits(&self, tokens: &[TokenId]) -> Vec<Vec<f64>> {
        let cfg = &self.config;
        let (d, hd) = (cfg.d_model, cfg.head_dim());
        let eps = cfg.norm_eps as f64;
        let theta = cfg.rope_theta as f64;
        let group = cfg.n_heads / cfg.n_kv_heads;
        let n = tokens.len();

        let mut xs: Vec<Vec<f64>> = tokens
            .iter()
            .map(|&t| self.embd.w[t as usize * d..(t as usize + 1) * d].to_vec())
            .collect();

        for layer in &self.layers {
            let mut qs = Vec::with_capacity(n);
            let mut ks = Vec::with_capacity(n);
            let mut vs = Vec::with_capacity(n);
            for (pos, x) in xs.iter().enumerate() {
                let h = rmsnorm(x, &layer.attn_norm, eps);
                let mut q = layer.wq.mul(&h);
                let mut k = layer.wk.mul(&h);
                for head in q.chunks_mut(hd) {
                    rope(head, pos, theta);
                }
                for head in k.chunks_mut(hd) {
                    rope(head, pos, theta);
                }
                qs.push(q);
                ks.push(k);
                vs.push(layer.wv.mul(&h));
            }
            for i in 0..n {
                let mut attn = vec![0.0; d];
                for h in 0..cfg.n_heads {
                    let q = &qs[i][h * hd..(h + 1) * hd];
                    let kv = (h / group) * hd;
                    let scores: Vec<f64> = (0..=i)
                        .map(|j| {
                            let k = &ks[j][kv..kv + hd];
                            q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt()
                        })
                        .collect();
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for (j, w) in e.iter().enumerate() {
                        for t in 0..hd {
                            attn[h * hd + t] += w / z * vs[j][kv + t];
                        }
                    }
                }
                let o = layer.wo.mul(&attn);
                for (x, v) in xs[i].iter_mut().zip(o) {
                    *x += v;
                }
                let h = rmsnorm(&xs[i], &layer.ffn_norm, eps);
                let g = layer.gate.mul(&h);
                let u = layer.up.mul(&h);
                let act: Vec<f64> = g
                    .iter()
                    .zip(&u)
                    .map(|(g, u)| g / (1.0 + (-g).exp()) * u)
                    .collect();
                let o = layer.down.mul(&act);
                for (x, v) in xs[i].iter_mut().zip(o) {
                    *x += v;
                }
            }
        }
        xs.iter()
            .map(|x| self.out.mul(&rmsnorm(x, &self.out_norm, eps)))
            .collect()
    }
}
