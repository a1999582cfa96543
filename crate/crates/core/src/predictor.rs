//! Patch-based two-stage attention forecaster. History is cut into patches
//! per node, embedded, passed through blocks that attend first along the
//! patch axis and then along the node axis, and decoded by learned patch
//! queries whose outputs a flat head maps back to time steps.

use crate::error::{Error, Result};
use crate::nn::{
    gather_rows, scatter_add_rows, AttnBlock, AttnBlockCache, AttnMask, Grads, Linear,
    MultiHeadAttention, ParamId, ParamSet,
};
use crate::numerics::{sinusoidal_positions, RngState, Tensor};

#[derive(Clone, Debug)]
pub struct Predictor {
    pub patch_embed: Linear,
    /// (temporal stage, node stage) per block
    pub blocks: Vec<(AttnBlock, AttnBlock)>,
    /// `[P, D]`
    pub queries: ParamId,
    pub decoder: AttnBlock,
    pub head: Linear,
    pub t: usize,
    pub n: usize,
    pub c: usize,
    pub d: usize,
    pub patch: usize,
    pub n_patches: usize,
}

#[derive(Clone, Debug)]
pub struct EmbedCache {
    patches: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct EncodeCache {
    blocks: Vec<(Vec<AttnBlockCache>, Vec<AttnBlockCache>)>,
    memory: Vec<f64>,
    decoder: Vec<AttnBlockCache>,
    decoded: Vec<Vec<f64>>,
}

pub fn num_patches(t: usize, p: usize) -> usize {
    t.div_ceil(p)
}

/// `[t, N, C]` to `[P, N, p·C]` rows ordered (patch, node); the tail of the
/// last patch is zero when `p` does not divide `t`.
pub fn patchify(x: &[f64], t: usize, n: usize, c: usize, p: usize) -> Vec<f64> {
    let np = num_patches(t, p);
    let mut out = vec![0.0; np * n * p * c];
    for i in 0..np {
        for node in 0..n {
            let row = (i * n + node) * p * c;
            for j in 0..p {
                let step = i * p + j;
                if step >= t {
                    break;
                }
                for ch in 0..c {
                    out[row + j * c + ch] = x[(step * n + node) * c + ch];
                }
            }
        }
    }
    out
}

fn node_rows(n: usize, np: usize, node: usize) -> Vec<usize> {
    (0..np).map(|i| i * n + node).collect()
}

impl Predictor {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        t: usize,
        n: usize,
        c: usize,
        d: usize,
        heads: usize,
        n_blocks: usize,
        patch: usize,
        rng: &mut RngState,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("model width {d} is not divisible by {heads} heads")));
        }
        if patch == 0 || t == 0 {
            return Err(Error::Config("patch length and window must be positive".into()));
        }
        let np = num_patches(t, patch);
        let blocks = (0..n_blocks)
            .map(|b| {
                (
                    AttnBlock::new(ps, &format!("{name}.block{b}.temporal"), d, heads, rng),
                    AttnBlock::new(ps, &format!("{name}.block{b}.spatial"), d, heads, rng),
                )
            })
            .collect();
        Ok(Predictor {
            patch_embed: Linear::new(ps, &format!("{name}.patch_embed"), patch * c, d, true, rng),
            blocks,
            queries: ps.add(format!("{name}.queries"), Tensor::randn(&[np, d], 1.0, rng)),
            decoder: AttnBlock::new(ps, &format!("{name}.decoder"), d, heads, rng),
            head: Linear::new(ps, &format!("{name}.head"), d, patch * c, true, rng),
            t,
            n,
            c,
            d,
            patch,
            n_patches: np,
        })
    }

    /// `[t, N, C]` to `[P, N, D]`, with sinusoidal patch positions added.
    pub fn embed(&self, ps: &ParamSet, x: &[f64]) -> (Vec<f64>, EmbedCache) {
        let patches = patchify(x, self.t, self.n, self.c, self.patch);
        let mut h = self.patch_embed.forward(ps, &patches);
        let pe = sinusoidal_positions(self.n_patches, self.d);
        for (r, row) in h.chunks_exact_mut(self.d).enumerate() {
            let i = r / self.n;
            for (v, p) in row.iter_mut().zip(&pe[i * self.d..(i + 1) * self.d]) {
                *v += p;
            }
        }
        (h, EmbedCache { patches })
    }

    pub fn embed_backward(&self, ps: &ParamSet, cache: &EmbedCache, dh: &[f64], grads: &mut Grads) {
        self.patch_embed.backward(ps, &cache.patches, dh, grads);
    }

    /// One two-stage block over `[P, N, D]`.
    pub fn block_forward(
        &self,
        ps: &ParamSet,
        block: usize,
        x: &[f64],
    ) -> (Vec<f64>, Vec<AttnBlockCache>, Vec<AttnBlockCache>) {
        let (n, d, np) = (self.n, self.d, self.n_patches);
        let (temporal, spatial) = &self.blocks[block];
        let mut y = vec![0.0; x.len()];
        let mut tc = Vec::with_capacity(n);
        for node in 0..n {
            let idx = node_rows(n, np, node);
            let seq = gather_rows(x, d, &idx);
            let (out, cache) = temporal.self_forward(ps, &seq, &AttnMask::None, None);
            for (r, &i) in idx.iter().enumerate() {
                y[i * d..(i + 1) * d].copy_from_slice(&out[r * d..(r + 1) * d]);
            }
            tc.push(cache);
        }
        let mut z = Vec::with_capacity(x.len());
        let mut sc = Vec::with_capacity(np);
        for i in 0..np {
            let (out, cache) = spatial.self_forward(ps, &y[i * n * d..(i + 1) * n * d], &AttnMask::None, None);
            z.extend(out);
            sc.push(cache);
        }
        (z, tc, sc)
    }

    fn block_backward(
        &self,
        ps: &ParamSet,
        block: usize,
        tc: &[AttnBlockCache],
        sc: &[AttnBlockCache],
        dz: &[f64],
        grads: &mut Grads,
    ) -> Vec<f64> {
        let (n, d, np) = (self.n, self.d, self.n_patches);
        let (temporal, spatial) = &self.blocks[block];
        let mut dy = Vec::with_capacity(dz.len());
        for (i, cache) in sc.iter().enumerate() {
            dy.extend(spatial.self_backward(ps, cache, &dz[i * n * d..(i + 1) * n * d], grads));
        }
        let mut dx = vec![0.0; dz.len()];
        for (node, cache) in tc.iter().enumerate() {
            let idx = node_rows(n, np, node);
            let dseq = gather_rows(&dy, d, &idx);
            let g = temporal.self_backward(ps, cache, &dseq, grads);
            scatter_add_rows(&mut dx, d, &idx, &g);
        }
        dx
    }

    /// Encoder blocks, query decoder and head: `[P, N, D]` to `[t, N, C]`.
    pub fn encode_decode(&self, ps: &ParamSet, h: &[f64]) -> (Vec<f64>, EncodeCache) {
        let (n, d, np, c, p) = (self.n, self.d, self.n_patches, self.c, self.patch);
        let mut x = h.to_vec();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in 0..self.blocks.len() {
            let (z, tc, sc) = self.block_forward(ps, b, &x);
            blocks.push((tc, sc));
            x = z;
        }
        let queries = ps.data(self.queries);
        let mut y = vec![0.0; self.t * n * c];
        let mut decoder = Vec::with_capacity(n);
        let mut decoded = Vec::with_capacity(n);
        for node in 0..n {
            let mem = gather_rows(&x, d, &node_rows(n, np, node));
            let (dec, cache) = self.decoder.forward(ps, queries, &mem, &AttnMask::None, None);
            let out = self.head.forward(ps, &dec);
            for i in 0..np {
                for j in 0..p {
                    let step = i * p + j;
                    if step >= self.t {
                        break;
                    }
                    for ch in 0..c {
                        y[(step * n + node) * c + ch] = out[i * p * c + j * c + ch];
                    }
                }
            }
            decoder.push(cache);
            decoded.push(dec);
        }
        (
            y,
            EncodeCache {
                blocks,
                memory: x,
                decoder,
                decoded,
            },
        )
    }

    pub fn encode_decode_backward(&self, ps: &ParamSet, cache: &EncodeCache, dy: &[f64], grads: &mut Grads) -> Vec<f64> {
        let (n, d, np, c, p) = (self.n, self.d, self.n_patches, self.c, self.patch);
        let mut dx = vec![0.0; cache.memory.len()];
        for node in 0..n {
            let mut dout = vec![0.0; np * p * c];
            for i in 0..np {
                for j in 0..p {
                    let step = i * p + j;
                    if step >= self.t {
                        break;
                    }
                    for ch in 0..c {
                        dout[i * p * c + j * c + ch] = dy[(step * n + node) * c + ch];
                    }
                }
            }
            let ddec = self.head.backward(ps, &cache.decoded[node], &dout, grads);
            let (dq, dmem) = self.decoder.backward(ps, &cache.decoder[node], &ddec, grads);
            grads.add(self.queries, &dq);
            scatter_add_rows(&mut dx, d, &node_rows(n, np, node), &dmem);
        }
        for (b, (tc, sc)) in cache.blocks.iter().enumerate().rev() {
            dx = self.block_backward(ps, b, tc, sc, &dx, grads);
        }
        dx
    }

    /// Text-free forward used when no fusion layer sits between embedding
    /// and encoder.
    pub fn forward_plain(&self, ps: &ParamSet, x: &[f64]) -> Vec<f64> {
        let (h, _) = self.embed(ps, x);
        self.encode_decode(ps, &h).0
    }
}

/// `[B, t, N, C]` to `[B, P, N, D]`.
pub fn patch_embed(ps: &ParamSet, pred: &Predictor, x: &Tensor) -> Result<Tensor> {
    let &[b, t, n, c] = x.shape() else {
        return Err(Error::Dimension(format!("expected [B,t,N,C], got {:?}", x.shape())));
    };
    if (t, n, c) != (pred.t, pred.n, pred.c) {
        return Err(Error::Dimension(format!(
            "input [{t},{n},{c}] does not match the configured [{},{},{}]",
            pred.t, pred.n, pred.c
        )));
    }
    let per = t * n * c;
    let mut out = Vec::with_capacity(b * pred.n_patches * n * pred.d);
    for i in 0..b {
        out.extend(pred.embed(ps, &x.data()[i * per..(i + 1) * per]).0);
    }
    Tensor::new(&[b, pred.n_patches, n, pred.d], out)
}

/// Multi-head self-attention over `[B, S, D]` (no residual).
pub fn mhsa(ps: &ParamSet, mha: &MultiHeadAttention, x: &Tensor) -> Result<Tensor> {
    let &[b, s, d] = x.shape() else {
        return Err(Error::Dimension(format!("expected [B,S,D], got {:?}", x.shape())));
    };
    if d != mha.d {
        return Err(Error::Dimension(format!("feature width {d} does not match attention width {}", mha.d)));
    }
    let mut out = Vec::with_capacity(x.len());
    for i in 0..b {
        let seq = &x.data()[i * s * d..(i + 1) * s * d];
        out.extend(mha.forward(ps, seq, seq, &AttnMask::None, None).0);
    }
    Tensor::new(&[b, s, d], out)
}

/// Applies block `block` to `[B, P, N, D]`.
pub fn two_stage_block(ps: &ParamSet, pred: &Predictor, block: usize, x: &Tensor) -> Result<Tensor> {
    let &[b, np, n, d] = x.shape() else {
        return Err(Error::Dimension(format!("expected [B,P,N,D], got {:?}", x.shape())));
    };
    if (np, n, d) != (pred.n_patches, pred.n, pred.d) {
        return Err(Error::Dimension(format!("block input {:?} does not match configuration", x.shape())));
    }
    let per = np * n * d;
    let mut out = Vec::with_capacity(x.len());
    for i in 0..b {
        out.extend(pred.block_forward(ps, block, &x.data()[i * per..(i + 1) * per]).0);
    }
    Tensor::new(x.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;

    fn small(n: usize, t: usize, d: usize, seed: u64) -> (ParamSet, Predictor) {
        let mut rng = RngState::new(seed);
        let mut ps = ParamSet::new();
        let pred = Predictor::new(&mut ps, "pred", t, n, 1, d, 2, 2, 4, &mut rng).unwrap();
        (ps, pred)
    }

    #[test]
    fn patch_counts_and_padding() {
        assert_eq!(num_patches(12, 4), 3);
        assert_eq!(num_patches(13, 4), 4);
        let x: Vec<f64> = (1..=13).map(f64::from).collect();
        let p = patchify(&x, 13, 1, 1, 4);
        assert_eq!(p.len(), 16);
        assert_eq!(&p[12..], &[13.0, 0.0, 0.0, 0.0]);
        let (ps, pred) = small(2, 13, 8, 0);
        let x = Tensor::zeros(&[3, 13, 2, 1]);
        assert_eq!(patch_embed(&ps, &pred, &x).unwrap().shape(), &[3, 4, 2, 8]);
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let mut rng = RngState::new(0);
        let mut ps = ParamSet::new();
        assert!(matches!(
            Predictor::new(&mut ps, "p", 12, 2, 1, 7, 2, 1, 4, &mut rng),
            Err(Error::Config(_))
        ));
    }

    /// Per-head O(S²) loops straight from the definition.
    fn naive_mhsa(ps: &ParamSet, m: &MultiHeadAttention, x: &[f64], s: usize) -> Vec<f64> {
        let d = m.d;
        let dh = d / m.heads;
        let proj = |w: ParamId, row: &[f64]| -> Vec<f64> {
            (0..d).map(|o| (0..d).map(|i| row[i] * ps.get(w).get(&[i, o])).sum()).collect()
        };
        let rows: Vec<&[f64]> = x.chunks(d).collect();
        let q: Vec<Vec<f64>> = rows.iter().map(|r| proj(m.q.w, r)).collect();
        let k: Vec<Vec<f64>> = rows.iter().map(|r| proj(m.k.w, r)).collect();
        let v: Vec<Vec<f64>> = rows.iter().map(|r| proj(m.v.w, r)).collect();
        let mut out = Vec::new();
        for i in 0..s {
            let mut ctx = vec![0.0; d];
            for h in 0..m.heads {
                let sc: Vec<f64> = (0..s)
                    .map(|j| (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = sc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = sc.iter().map(|v| (v - mx).exp()).sum();
                for j in 0..s {
                    let p = (sc[j] - mx).exp() / z;
                    for c in 0..dh {
                        ctx[h * dh + c] += p * v[j][h * dh + c];
                    }
                }
            }
            out.extend(proj(m.o.w, &ctx));
        }
        out
    }

    #[test]
    fn mhsa_matches_naive_loops() {
        let (ps, pred) = small(2, 12, 8, 1);
        let mut rng = RngState::new(9);
        let x = Tensor::randn(&[2, 5, 8], 1.0, &mut rng);
        let m = pred.blocks[0].0.mha;
        let y = mhsa(&ps, &m, &x).unwrap();
        assert_eq!(y.shape(), x.shape());
        for b in 0..2 {
            let want = naive_mhsa(&ps, &m, &x.data()[b * 40..(b + 1) * 40], 5);
            for (a, w) in y.data()[b * 40..(b + 1) * 40].iter().zip(&want) {
                assert!((a - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mhsa_single_token_identity_projections() {
        let (mut ps, pred) = small(2, 12, 4, 1);
        let m = pred.blocks[0].0.mha;
        for w in [m.q.w, m.k.w, m.v.w, m.o.w] {
            *ps.get_mut(w) = Tensor::eye(4);
        }
        let x = Tensor::new(&[1, 1, 4], vec![0.3, -1.0, 2.0, 0.5]).unwrap();
        assert_eq!(mhsa(&ps, &m, &x).unwrap().data(), x.data());
    }

    #[test]
    fn single_node_block_reduces_to_temporal_stage() {
        let (mut ps, pred) = small(1, 12, 8, 2);
        let spatial = pred.blocks[0].1.mha;
        for w in [spatial.q.w, spatial.k.w, spatial.o.w] {
            *ps.get_mut(w) = Tensor::eye(8);
        }
        *ps.get_mut(spatial.v.w) = Tensor::zeros(&[8, 8]);
        let mut rng = RngState::new(3);
        let x = Tensor::randn(&[3, 1, 8], 1.0, &mut rng).into_data();
        let (full, _, _) = pred.block_forward(&ps, 0, &x);
        let (temporal, _) = pred.blocks[0].0.self_forward(&ps, &x, &AttnMask::None, None);
        // the node stage then only re-normalizes already normalized rows
        let diff = full.iter().zip(&temporal).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-4, "{diff}");
    }

    #[test]
    fn block_is_node_permutation_equivariant() {
        let (ps, pred) = small(4, 12, 8, 3);
        let mut rng = RngState::new(4);
        let x = Tensor::randn(&[1, 3, 4, 8], 1.0, &mut rng);
        let perm = [2, 0, 3, 1];
        let permute = |t: &Tensor| {
            let mut out = vec![0.0; t.len()];
            for i in 0..3 {
                for (new, &old) in perm.iter().enumerate() {
                    out[(i * 4 + new) * 8..(i * 4 + new + 1) * 8]
                        .copy_from_slice(&t.data()[(i * 4 + old) * 8..(i * 4 + old + 1) * 8]);
                }
            }
            Tensor::new(t.shape(), out).unwrap()
        };
        let a = permute(&two_stage_block(&ps, &pred, 0, &x).unwrap());
        let b = two_stage_block(&ps, &pred, 0, &permute(&x)).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn forecast_shape_and_determinism() {
        let (ps, pred) = small(3, 12, 8, 5);
        let mut rng = RngState::new(6);
        let x = Tensor::randn(&[12, 3, 1], 1.0, &mut rng).into_data();
        let a = pred.forward_plain(&ps, &x);
        let b = pred.forward_plain(&ps, &x);
        assert_eq!(a.len(), 36);
        assert_eq!(a, b);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let (ps, pred) = small(3, 8, 8, seed);
            let mut rng = RngState::new(100 + seed);
            let x = Tensor::randn(&[8, 3, 1], 1.0, &mut rng).into_data();
            let w = Tensor::randn(&[8, 3, 1], 1.0, &mut rng).into_data();
            let loss = |p: &ParamSet| {
                pred.forward_plain(p, &x).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
            };
            let (h, ec) = pred.embed(&ps, &x);
            let (_, cache) = pred.encode_decode(&ps, &h);
            let mut g = ps.zero_grads();
            let dh = pred.encode_decode_backward(&ps, &cache, &w, &mut g);
            pred.embed_backward(&ps, &ec, &dh, &mut g);
            let report = check_gradients(&ps, &g, &loss, 64, seed);
            assert!(report.passed(), "{:?}", report.worst());
        }
    }
}
