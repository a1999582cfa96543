//! Location-aware text encoder: token embeddings feed a kernel-3 convolution
//! (local phrases) and a kernel-5 depthwise-separable convolution (wider
//! context) in parallel; the two are concatenated, linearly fused and
//! layer-normalized. PAD positions are zeroed on input and output.

use crate::error::{Error, Result};
use crate::nn::{Grads, LayerNorm, LayerNormCache, Linear, ParamId, ParamSet};
use crate::numerics::{add_assign, gemm, gemm_at_b_acc, gemm_a_bt, RngState, Tensor};
use crate::tokenizer::{TokenSequence, PAD};

pub const LOCAL_KERNEL: usize = 3;
pub const GLOBAL_KERNEL: usize = 5;

#[derive(Clone, Copy, Debug)]
pub struct TextEncoder {
    /// `[V, D]`
    pub embedding: ParamId,
    /// `[D_out, D_in, 3]`
    pub local_conv: ParamId,
    /// `[D, 5]`
    pub depthwise: ParamId,
    /// `[D, D]`
    pub pointwise: ParamId,
    /// `[2D, D]` + bias
    pub fuse: Linear,
    pub norm: LayerNorm,
    pub vocab_size: usize,
    pub d: usize,
}

#[derive(Clone, Debug)]
pub struct TextEncoderCache {
    tokens: Vec<usize>,
    mask: Vec<f64>,
    emb: Vec<f64>,
    dw: Vec<f64>,
    cat: Vec<f64>,
    ln: LayerNormCache,
}

impl TextEncoder {
    pub fn new(ps: &mut ParamSet, name: &str, vocab_size: usize, d: usize, rng: &mut RngState) -> Self {
        let conv_scale = (1.0 / (d * LOCAL_KERNEL) as f64).sqrt();
        TextEncoder {
            embedding: ps.add(format!("{name}.embedding"), Tensor::randn(&[vocab_size, d], 1.0, rng)),
            local_conv: ps.add(
                format!("{name}.local_conv"),
                Tensor::randn(&[d, d, LOCAL_KERNEL], conv_scale, rng),
            ),
            depthwise: ps.add(
                format!("{name}.depthwise"),
                Tensor::randn(&[d, GLOBAL_KERNEL], (1.0 / GLOBAL_KERNEL as f64).sqrt(), rng),
            ),
            pointwise: ps.add(
                format!("{name}.pointwise"),
                Tensor::randn(&[d, d], (1.0 / d as f64).sqrt(), rng),
            ),
            fuse: Linear::new(ps, &format!("{name}.fuse"), 2 * d, d, true, rng),
            norm: LayerNorm::new(ps, &format!("{name}.norm"), d),
            vocab_size,
            d,
        }
    }

    /// `[B, L]` token batch to `H_text` of shape `[B, L, D]`.
    pub fn encode_text(&self, ps: &ParamSet, batch: &[TokenSequence]) -> Result<Tensor> {
        let len = batch.first().map_or(0, TokenSequence::len);
        let mut out = Vec::with_capacity(batch.len() * len * self.d);
        for seq in batch {
            if seq.len() != len {
                return Err(Error::Dimension("token batch has ragged lengths".into()));
            }
            out.extend(self.forward(ps, &seq.ids)?.0);
        }
        Tensor::new(&[batch.len(), len, self.d], out)
    }

    /// One sequence, `[L]` ids to `[L, D]`.
    pub fn forward(&self, ps: &ParamSet, tokens: &[usize]) -> Result<(Vec<f64>, TextEncoderCache)> {
        let d = self.d;
        let len = tokens.len();
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Parameter(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.vocab_size
            )));
        }
        let mask: Vec<f64> = tokens.iter().map(|&t| f64::from(t != PAD)).collect();
        let table = ps.data(self.embedding);
        let mut emb = vec![0.0; len * d];
        for (l, &tok) in tokens.iter().enumerate() {
            if mask[l] != 0.0 {
                emb[l * d..(l + 1) * d].copy_from_slice(&table[tok * d..(tok + 1) * d]);
            }
        }

        // local branch: out[l,o] = Σ_k Σ_i W[o,i,k] e[l+k-1,i]
        let w = ps.data(self.local_conv);
        let mut local = vec![0.0; len * d];
        for l in 0..len {
            for k in 0..LOCAL_KERNEL {
                let Some(src) = (l + k).checked_sub(LOCAL_KERNEL / 2).filter(|&s| s < len) else {
                    continue;
                };
                let e = &emb[src * d..(src + 1) * d];
                for o in 0..d {
                    let mut acc = 0.0;
                    for (i, ev) in e.iter().enumerate() {
                        acc += w[(o * d + i) * LOCAL_KERNEL + k] * ev;
                    }
                    local[l * d + o] += acc;
                }
            }
        }

        // global branch: depthwise kernel 5, then pointwise
        let dk = ps.data(self.depthwise);
        let mut dw = vec![0.0; len * d];
        for l in 0..len {
            for k in 0..GLOBAL_KERNEL {
                let Some(src) = (l + k).checked_sub(GLOBAL_KERNEL / 2).filter(|&s| s < len) else {
                    continue;
                };
                for c in 0..d {
                    dw[l * d + c] += dk[c * GLOBAL_KERNEL + k] * emb[src * d + c];
                }
            }
        }
        let global = gemm(&dw, ps.data(self.pointwise), len, d, d);

        let mut cat = Vec::with_capacity(len * 2 * d);
        for l in 0..len {
            cat.extend_from_slice(&local[l * d..(l + 1) * d]);
            cat.extend_from_slice(&global[l * d..(l + 1) * d]);
        }
        let fused = self.fuse.forward(ps, &cat);
        let (mut out, ln) = self.norm.forward(ps, &fused);
        for (l, m) in mask.iter().enumerate() {
            if *m == 0.0 {
                out[l * d..(l + 1) * d].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Ok((
            out,
            TextEncoderCache {
                tokens: tokens.to_vec(),
                mask,
                emb,
                dw,
                cat,
                ln,
            },
        ))
    }

    pub fn backward(&self, ps: &ParamSet, cache: &TextEncoderCache, dout: &[f64], grads: &mut Grads) {
        let d = self.d;
        let len = cache.tokens.len();
        let mut dy = dout.to_vec();
        for (l, m) in cache.mask.iter().enumerate() {
            if *m == 0.0 {
                dy[l * d..(l + 1) * d].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let dfused = self.norm.backward(ps, &cache.ln, &dy, grads);
        let dcat = self.fuse.backward(ps, &cache.cat, &dfused, grads);
        let mut dlocal = vec![0.0; len * d];
        let mut dglobal = vec![0.0; len * d];
        for l in 0..len {
            dlocal[l * d..(l + 1) * d].copy_from_slice(&dcat[l * 2 * d..l * 2 * d + d]);
            dglobal[l * d..(l + 1) * d].copy_from_slice(&dcat[l * 2 * d + d..(l + 1) * 2 * d]);
        }

        let mut demb = vec![0.0; len * d];

        // pointwise
        gemm_at_b_acc(grads.slot(self.pointwise), &cache.dw, &dglobal, len, d, d);
        let ddw = gemm_a_bt(&dglobal, ps.data(self.pointwise), len, d, d);
        // depthwise
        let dk = ps.data(self.depthwise);
        let mut gdk = vec![0.0; d * GLOBAL_KERNEL];
        for l in 0..len {
            for k in 0..GLOBAL_KERNEL {
                let Some(src) = (l + k).checked_sub(GLOBAL_KERNEL / 2).filter(|&s| s < len) else {
                    continue;
                };
                for c in 0..d {
                    let g = ddw[l * d + c];
                    gdk[c * GLOBAL_KERNEL + k] += g * cache.emb[src * d + c];
                    demb[src * d + c] += g * dk[c * GLOBAL_KERNEL + k];
                }
            }
        }
        grads.add(self.depthwise, &gdk);

        // local conv
        let w = ps.data(self.local_conv);
        let mut gw = vec![0.0; d * d * LOCAL_KERNEL];
        for l in 0..len {
            for k in 0..LOCAL_KERNEL {
                let Some(src) = (l + k).checked_sub(LOCAL_KERNEL / 2).filter(|&s| s < len) else {
                    continue;
                };
                for o in 0..d {
                    let g = dlocal[l * d + o];
                    if g == 0.0 {
                        continue;
                    }
                    for i in 0..d {
                        gw[(o * d + i) * LOCAL_KERNEL + k] += g * cache.emb[src * d + i];
                        demb[src * d + i] += g * w[(o * d + i) * LOCAL_KERNEL + k];
                    }
                }
            }
        }
        grads.add(self.local_conv, &gw);

        let gtable = grads.slot(self.embedding);
        for (l, &tok) in cache.tokens.iter().enumerate() {
            if cache.mask[l] != 0.0 {
                add_assign(&mut gtable[tok * d..(tok + 1) * d], &demb[l * d..(l + 1) * d]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{BOS, EOS};

    fn setup() -> (ParamSet, TextEncoder) {
        let mut rng = RngState::new(17);
        let mut ps = ParamSet::new();
        let enc = TextEncoder::new(&mut ps, "text", 12, 6, &mut rng);
        // non-trivial layer-norm affine
        *ps.get_mut(enc.norm.gain) = Tensor::randn(&[6], 1.0, &mut rng);
        *ps.get_mut(enc.norm.bias) = Tensor::randn(&[6], 1.0, &mut rng);
        (ps, enc)
    }

    /// Straight-line re-derivation of both branches from the definitions.
    fn naive(ps: &ParamSet, enc: &TextEncoder, tokens: &[usize]) -> Vec<f64> {
        let d = enc.d;
        let len = tokens.len();
        let e = |l: isize, i: usize| -> f64 {
            if l < 0 || l as usize >= len || tokens[l as usize] == PAD {
                0.0
            } else {
                ps.get(enc.embedding).get(&[tokens[l as usize], i])
            }
        };
        let mut out = vec![0.0; len * d];
        for l in 0..len {
            let mut cat = vec![0.0; 2 * d];
            for o in 0..d {
                for k in 0..3 {
                    for i in 0..d {
                        cat[o] += ps.get(enc.local_conv).get(&[o, i, k]) * e(l as isize + k as isize - 1, i);
                    }
                }
            }
            let mut dw = vec![0.0; d];
            for (c, dwc) in dw.iter_mut().enumerate() {
                for k in 0..5 {
                    *dwc += ps.get(enc.depthwise).get(&[c, k]) * e(l as isize + k as isize - 2, c);
                }
            }
            for o in 0..d {
                for (c, dwc) in dw.iter().enumerate() {
                    cat[d + o] += dwc * ps.get(enc.pointwise).get(&[c, o]);
                }
            }
            let mut f = ps.data(enc.fuse.b.unwrap()).to_vec();
            for (o, fo) in f.iter_mut().enumerate() {
                for (i, cv) in cat.iter().enumerate() {
                    *fo += cv * ps.get(enc.fuse.w).get(&[i, o]);
                }
            }
            let mean = f.iter().sum::<f64>() / d as f64;
            let var = f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            for o in 0..d {
                let y = (f[o] - mean) / (var + 1e-5).sqrt() * ps.data(enc.norm.gain)[o]
                    + ps.data(enc.norm.bias)[o];
                out[l * d + o] = if tokens[l] == PAD { 0.0 } else { y };
            }
        }
        out
    }

    #[test]
    fn matches_naive_convolutions() {
        let (ps, enc) = setup();
        let tokens = [BOS, 5, 7, 9, 4, EOS, PAD, PAD];
        let (out, _) = enc.forward(&ps, &tokens).unwrap();
        let want = naive(&ps, &enc, &tokens);
        let diff = out.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "max diff {diff}");
    }

    #[test]
    fn shape_and_pad_mask() {
        let (ps, enc) = setup();
        let batch = vec![
            TokenSequence { ids: vec![BOS, 4, EOS, PAD] },
            TokenSequence { ids: vec![PAD; 4] },
        ];
        let h = enc.encode_text(&ps, &batch).unwrap();
        assert_eq!(h.shape(), &[2, 4, 6]);
        assert!(h.data()[4 * 6..].iter().all(|&v| v == 0.0));
        assert!(h.data()[3 * 6..4 * 6].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_range_token_rejected() {
        let (ps, enc) = setup();
        assert!(enc.forward(&ps, &[BOS, 99]).is_err());
    }

    #[test]
    fn pad_embedding_gets_no_gradient() {
        let (ps, enc) = setup();
        let tokens = [BOS, 5, EOS, PAD];
        let (out, cache) = enc.forward(&ps, &tokens).unwrap();
        let mut g = ps.zero_grads();
        enc.backward(&ps, &cache, &vec![1.0; out.len()], &mut g);
        assert!(g.get(enc.embedding).data()[..6].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (ps, enc) = setup();
        let tokens = [BOS, 5, 7, 4, EOS, PAD];
        let mut rng = RngState::new(2);
        let w = Tensor::randn(&[tokens.len(), 6], 1.0, &mut rng).into_data();
        let loss = |p: &ParamSet| {
            let (out, _) = enc.forward(p, &tokens).unwrap();
            out.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = enc.forward(&ps, &tokens).unwrap();
        let mut g = ps.zero_grads();
        enc.backward(&ps, &cache, &w, &mut g);
        let report = crate::gradcheck::check_gradients(&ps, &g, &loss, 64, 9);
        assert!(report.passed(), "{:?}", report.worst());
    }
}
