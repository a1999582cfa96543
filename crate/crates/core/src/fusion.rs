//! Text-guided adaptive graph convolution: sparse top-k alignment of traffic
//! steps to text tokens, FiLM modulation of the traffic features by the
//! aligned text, and a residual graph convolution over a learned adjacency
//! mixed with the physical one.

use crate::error::{Error, Result};
use crate::nn::{attention, attention_backward, relu_backward, AttnMask, Grads, Linear, ParamId, ParamSet};
use crate::numerics::{
    gemm, gemm_a_bt, gemm_at_b_acc, sigmoid, softmax_backward, softmax_in_place, RngState, Tensor,
};

/// Shift weight on the FiLM β term.
pub const FILM_ETA: f64 = 0.1;

pub fn default_top_k(text_len: usize) -> usize {
    2usize.max(text_len.div_ceil(4)).min(text_len.max(1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignedContext {
    /// `[B, S, D]`
    pub c_text: Tensor,
    /// `[B, S, L]`
    pub attn_weights: Tensor,
}

fn check_top_k(top_k: usize, len: usize) -> Result<()> {
    if top_k == 0 || top_k > len {
        return Err(Error::Parameter(format!(
            "top_k = {top_k} must lie in 1..={len}"
        )));
    }
    Ok(())
}

/// Scaled dot-product attention from traffic steps to text tokens keeping
/// only the `top_k` best-scoring tokens per step.
pub fn sparse_align(h_traffic: &Tensor, h_text: &Tensor, top_k: usize) -> Result<AlignedContext> {
    let (&[b, s, d], &[b2, l, d2]) = (h_traffic.shape(), h_text.shape()) else {
        return Err(Error::Dimension(format!(
            "sparse_align expects [B,S,D] and [B,L,D], got {:?} and {:?}",
            h_traffic.shape(),
            h_text.shape()
        )));
    };
    if b != b2 || d != d2 {
        return Err(Error::Dimension(format!(
            "sparse_align shape mismatch {:?} vs {:?}",
            h_traffic.shape(),
            h_text.shape()
        )));
    }
    check_top_k(top_k, l)?;
    let mut c = Vec::with_capacity(b * s * d);
    let mut w = Vec::with_capacity(b * s * l);
    for i in 0..b {
        let q = &h_traffic.data()[i * s * d..(i + 1) * s * d];
        let kv = &h_text.data()[i * l * d..(i + 1) * l * d];
        let att = attention(q, kv, kv, s, l, d, 1, &AttnMask::TopK(top_k));
        c.extend(att.out);
        w.extend(att.probs);
    }
    Ok(AlignedContext {
        c_text: Tensor::new(&[b, s, d], c)?,
        attn_weights: Tensor::new(&[b, s, l], w)?,
    })
}

/// `softmax_rows(relu(E·Eᵀ))`, flat `[N, N]`.
pub fn adaptive_adjacency_flat(e: &[f64], n: usize, de: usize) -> Vec<f64> {
    let mut a = gemm_a_bt(e, e, n, de, n);
    for row in a.chunks_exact_mut(n) {
        row.iter_mut().for_each(|v| *v = v.max(0.0));
        softmax_in_place(row);
    }
    a
}

pub fn adaptive_adjacency(e: &Tensor) -> Result<Tensor> {
    let &[n, de] = e.shape() else {
        return Err(Error::Dimension(format!("node embedding must be [N, d_e], got {:?}", e.shape())));
    };
    Tensor::new(&[n, n], adaptive_adjacency_flat(e.data(), n, de))
}

/// FiLM projections and shift.
#[derive(Clone, Copy, Debug)]
pub struct Film {
    pub w_alpha: Linear,
    pub w_beta: Linear,
    pub eta: f64,
}

#[derive(Clone, Debug)]
pub struct FilmCache {
    c: Vec<f64>,
    h: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

impl Film {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize, rng: &mut RngState) -> Self {
        Film {
            w_alpha: Linear::new(ps, &format!("{name}.w_alpha"), d, d, false, rng),
            w_beta: Linear::new(ps, &format!("{name}.w_beta"), d, d, false, rng),
            eta: FILM_ETA,
        }
    }

    /// h: `[S, N, D]`, c: `[S, D]`; α and β broadcast over the node axis.
    pub fn forward(&self, ps: &ParamSet, h: &[f64], c: &[f64], n: usize) -> (Vec<f64>, FilmCache) {
        let d = self.w_alpha.d_in;
        let alpha: Vec<f64> = self.w_alpha.forward(ps, c).into_iter().map(sigmoid).collect();
        let beta: Vec<f64> = self.w_beta.forward(ps, c).into_iter().map(f64::tanh).collect();
        let mut out = vec![0.0; h.len()];
        for (idx, o) in out.iter_mut().enumerate() {
            let s = idx / (n * d);
            let j = idx % d;
            *o = alpha[s * d + j] * h[idx] + self.eta * beta[s * d + j];
        }
        (
            out,
            FilmCache {
                c: c.to_vec(),
                h: h.to_vec(),
                alpha,
                beta,
            },
        )
    }

    /// Returns (d h, d c).
    pub fn backward(
        &self,
        ps: &ParamSet,
        cache: &FilmCache,
        dy: &[f64],
        n: usize,
        grads: &mut Grads,
    ) -> (Vec<f64>, Vec<f64>) {
        let d = self.w_alpha.d_in;
        let mut dh = vec![0.0; dy.len()];
        let mut dalpha = vec![0.0; cache.alpha.len()];
        let mut dbeta = vec![0.0; cache.beta.len()];
        for (idx, &g) in dy.iter().enumerate() {
            let sj = (idx / (n * d)) * d + idx % d;
            dh[idx] = g * cache.alpha[sj];
            dalpha[sj] += g * cache.h[idx];
            dbeta[sj] += g * self.eta;
        }
        for (g, a) in dalpha.iter_mut().zip(&cache.alpha) {
            *g *= a * (1.0 - a);
        }
        for (g, b) in dbeta.iter_mut().zip(&cache.beta) {
            *g *= 1.0 - b * b;
        }
        let mut dc = self.w_alpha.backward(ps, &cache.c, &dalpha, grads);
        crate::numerics::add_assign(&mut dc, &self.w_beta.backward(ps, &cache.c, &dbeta, grads));
        (dh, dc)
    }
}

/// One residual graph-convolution layer over `½(A_adp + Â)`.
#[derive(Clone, Copy, Debug)]
pub struct Gcn {
    /// `[N, d_e]`
    pub node_embed: ParamId,
    pub linear: Linear,
    pub n: usize,
    pub de: usize,
}

#[derive(Clone, Debug)]
pub struct GcnCache {
    a_adp: Vec<f64>,
    mix: Vec<f64>,
    x: Vec<f64>,
    z: Vec<f64>,
    u: Vec<f64>,
}

impl Gcn {
    pub fn new(ps: &mut ParamSet, name: &str, n: usize, de: usize, d: usize, rng: &mut RngState) -> Self {
        Gcn {
            node_embed: ps.add(format!("{name}.node_embed"), Tensor::randn(&[n, de], 1.0 / (de as f64).sqrt(), rng)),
            linear: Linear::new(ps, &format!("{name}.linear"), d, d, true, rng),
            n,
            de,
        }
    }

    /// x: `[S, N, D]`; `a_phys` is the row-normalized physical adjacency
    /// with self-loops, flat `[N, N]`.
    pub fn forward(&self, ps: &ParamSet, x: &[f64], a_phys: &[f64]) -> (Vec<f64>, GcnCache) {
        let a_adp = adaptive_adjacency_flat(ps.data(self.node_embed), self.n, self.de);
        let mix: Vec<f64> = a_adp.iter().zip(a_phys).map(|(a, b)| 0.5 * (a + b)).collect();
        self.forward_with(ps, x, a_adp, mix)
    }

    fn forward_with(&self, ps: &ParamSet, x: &[f64], a_adp: Vec<f64>, mix: Vec<f64>) -> (Vec<f64>, GcnCache) {
        let (n, d) = (self.n, self.linear.d_in);
        let steps = x.len() / (n * d);
        let mut z = Vec::with_capacity(x.len());
        for s in 0..steps {
            z.extend(gemm(&mix, &x[s * n * d..(s + 1) * n * d], n, n, d));
        }
        let u = self.linear.forward(ps, &z);
        let out = u.iter().zip(x).map(|(&uv, &xv)| uv.max(0.0) + xv).collect();
        (
            out,
            GcnCache {
                a_adp,
                mix,
                x: x.to_vec(),
                z,
                u,
            },
        )
    }

    /// Applies the layer with a caller-supplied aggregation matrix.
    pub fn forward_fixed(&self, ps: &ParamSet, x: &[f64], a: &[f64]) -> Vec<f64> {
        self.forward_with(ps, x, a.to_vec(), a.to_vec()).0
    }

    pub fn backward(&self, ps: &ParamSet, cache: &GcnCache, dy: &[f64], grads: &mut Grads) -> Vec<f64> {
        let (n, d) = (self.n, self.linear.d_in);
        let steps = dy.len() / (n * d);
        let du = relu_backward(&cache.u, dy);
        let dz = self.linear.backward(ps, &cache.z, &du, grads);
        let mut dx = dy.to_vec();
        let mut dmix = vec![0.0; n * n];
        for s in 0..steps {
            let r = s * n * d..(s + 1) * n * d;
            // dx_s += mixᵀ dz_s ; dmix += dz_s x_sᵀ
            gemm_at_b_acc(&mut dx[r.clone()], &cache.mix, &dz[r.clone()], n, n, d);
            crate::numerics::gemm_a_bt_acc(&mut dmix, &dz[r.clone()], &cache.x[r], n, d, n);
        }
        // A_adp = softmax(relu(E·Eᵀ)), enters the mix with weight ½
        let e = ps.data(self.node_embed);
        let s_raw = gemm_a_bt(e, e, n, self.de, n);
        let mut ds = vec![0.0; n * n];
        for i in 0..n {
            let row = i * n..(i + 1) * n;
            let dp: Vec<f64> = dmix[row.clone()].iter().map(|v| 0.5 * v).collect();
            let dr = softmax_backward(&cache.a_adp[row.clone()], &dp);
            for j in 0..n {
                if s_raw[i * n + j] > 0.0 {
                    ds[i * n + j] = dr[j];
                }
            }
        }
        let dsym: Vec<f64> = (0..n * n).map(|k| ds[k] + ds[(k % n) * n + k / n]).collect();
        grads.add(self.node_embed, &gemm(&dsym, e, n, n, self.de));
        dx
    }
}

/// Alignment, FiLM and GCN applied to one sample's patch features.
#[derive(Clone, Copy, Debug)]
pub struct Fusion {
    pub film: Film,
    pub gcn: Gcn,
    pub top_k: usize,
    pub d: usize,
}

#[derive(Clone, Debug)]
pub struct FusionCache {
    n: usize,
    align: Option<AlignCache>,
    film: Option<FilmCache>,
    gcn: Option<GcnCache>,
}

#[derive(Clone, Debug)]
struct AlignCache {
    pooled: Vec<f64>,
    text: Vec<f64>,
    probs: Vec<f64>,
    /// `[S, L]` positions that survived top-k.
    allowed: Vec<bool>,
}

impl FusionCache {
    /// Top-k selection actually used, if text was present.
    pub fn align_mask(&self) -> Option<&[bool]> {
        self.align.as_ref().map(|a| a.allowed.as_slice())
    }

    pub fn align_weights(&self) -> Option<&[f64]> {
        self.align.as_ref().map(|a| a.probs.as_slice())
    }
}

impl Fusion {
    pub fn new(ps: &mut ParamSet, name: &str, n: usize, d: usize, de: usize, top_k: usize, rng: &mut RngState) -> Self {
        Fusion {
            film: Film::new(ps, &format!("{name}.film"), d, rng),
            gcn: Gcn::new(ps, &format!("{name}.gcn"), n, de, d, rng),
            top_k,
            d,
        }
    }

    /// h: `[S, N, D]`, text: `[L, D]` or `None` for the no-text variant.
    /// `mask` pins the top-k selection (used when probing gradients).
    pub fn forward(
        &self,
        ps: &ParamSet,
        h: &[f64],
        text: Option<&[f64]>,
        a_phys: &[f64],
        use_gcn: bool,
        mask: Option<&[bool]>,
    ) -> Result<(Vec<f64>, FusionCache)> {
        let d = self.d;
        let n = self.gcn.n;
        let steps = h.len() / (n * d);
        let mut cache = FusionCache {
            n,
            align: None,
            film: None,
            gcn: None,
        };
        let mut x = h.to_vec();
        if let Some(text) = text {
            let len = text.len() / d;
            let attn_mask = match mask {
                Some(m) => AttnMask::Allowed(m.to_vec()),
                None => {
                    check_top_k(self.top_k, len)?;
                    AttnMask::TopK(self.top_k)
                }
            };
            let mut pooled = vec![0.0; steps * d];
            for s in 0..steps {
                for node in 0..n {
                    let row = &h[(s * n + node) * d..(s * n + node + 1) * d];
                    for (p, v) in pooled[s * d..(s + 1) * d].iter_mut().zip(row) {
                        *p += v / n as f64;
                    }
                }
            }
            let att = attention(&pooled, text, text, steps, len, d, 1, &attn_mask);
            let (y, fc) = self.film.forward(ps, h, &att.out, n);
            x = y;
            cache.film = Some(fc);
            cache.align = Some(AlignCache {
                pooled,
                text: text.to_vec(),
                probs: att.probs,
                allowed: att.allowed,
            });
        }
        if use_gcn {
            let (y, gc) = self.gcn.forward(ps, &x, a_phys);
            x = y;
            cache.gcn = Some(gc);
        }
        Ok((x, cache))
    }

    /// Returns (d h, d text); the text gradient is empty without text.
    pub fn backward(&self, ps: &ParamSet, cache: &FusionCache, dy: &[f64], grads: &mut Grads) -> (Vec<f64>, Vec<f64>) {
        let d = self.d;
        let n = cache.n;
        let mut dx = match &cache.gcn {
            Some(gc) => self.gcn.backward(ps, gc, dy, grads),
            None => dy.to_vec(),
        };
        let (Some(fc), Some(ac)) = (&cache.film, &cache.align) else {
            return (dx, Vec::new());
        };
        let steps = dx.len() / (n * d);
        let len = ac.text.len() / d;
        let (mut dh, dc) = self.film.backward(ps, fc, &dx, n, grads);
        let (dpool, dk, dv) = attention_backward(&ac.pooled, &ac.text, &ac.text, &ac.probs, &dc, steps, len, d, 1);
        for s in 0..steps {
            for node in 0..n {
                for j in 0..d {
                    dh[(s * n + node) * d + j] += dpool[s * d + j] / n as f64;
                }
            }
        }
        dx = dh;
        let dtext = dk.iter().zip(&dv).map(|(a, b)| a + b).collect();
        (dx, dtext)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;

    fn dense_attention(q: &[f64], kv: &[f64], s: usize, l: usize, d: usize) -> Vec<f64> {
        let mut out = vec![0.0; s * d];
        for i in 0..s {
            let scores: Vec<f64> = (0..l)
                .map(|j| (0..d).map(|c| q[i * d + c] * kv[j * d + c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..l {
                for c in 0..d {
                    out[i * d + c] += e[j] / z * kv[j * d + c];
                }
            }
        }
        out
    }

    #[test]
    fn full_top_k_equals_dense_attention() {
        let mut rng = RngState::new(4);
        let q = Tensor::randn(&[2, 3, 5], 1.0, &mut rng);
        let kv = Tensor::randn(&[2, 6, 5], 1.0, &mut rng);
        let ctx = sparse_align(&q, &kv, 6).unwrap();
        for b in 0..2 {
            let want = dense_attention(&q.data()[b * 15..(b + 1) * 15], &kv.data()[b * 30..(b + 1) * 30], 3, 6, 5);
            for (a, w) in ctx.c_text.data()[b * 15..(b + 1) * 15].iter().zip(&want) {
                assert!((a - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sparse_rows_are_distributions_with_k_support() {
        let mut rng = RngState::new(5);
        let q = Tensor::randn(&[1, 4, 3], 1.0, &mut rng);
        let kv = Tensor::randn(&[1, 7, 3], 1.0, &mut rng);
        let ctx = sparse_align(&q, &kv, 2).unwrap();
        for row in ctx.attn_weights.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().filter(|&&p| p > 0.0).count() <= 2);
        }
        assert!(sparse_align(&q, &kv, 0).is_err());
        assert!(sparse_align(&q, &kv, 8).is_err());
    }

    #[test]
    fn single_token_text_is_copied() {
        let mut rng = RngState::new(6);
        let q = Tensor::randn(&[1, 3, 4], 1.0, &mut rng);
        let kv = Tensor::randn(&[1, 1, 4], 1.0, &mut rng);
        let ctx = sparse_align(&q, &kv, 1).unwrap();
        for row in ctx.c_text.data().chunks(4) {
            assert_eq!(row, kv.data());
        }
    }

    #[test]
    fn film_zero_context_halves_and_scalar_case() {
        let mut rng = RngState::new(1);
        let mut ps = ParamSet::new();
        let film = Film::new(&mut ps, "f", 1, &mut rng);
        let (y, _) = film.forward(&ps, &[2.0, -3.0], &[0.0], 2);
        assert_eq!(y, vec![1.0, -1.5]);
        *ps.get_mut(film.w_alpha.w) = Tensor::filled(&[1, 1], 1.0);
        *ps.get_mut(film.w_beta.w) = Tensor::filled(&[1, 1], 1.0);
        let (y, _) = film.forward(&ps, &[2.0], &[1.0], 1);
        // 2/(1+e^-1) + 0.1·tanh(1) = 1.462117 + 0.076159
        let want = 2.0 / (1.0 + (-1.0f64).exp()) + 0.1 * 1f64.tanh();
        assert!((y[0] - want).abs() < 1e-12);
        assert!((y[0] - 1.53828).abs() < 1e-5, "{}", y[0]);
    }

    #[test]
    fn film_gate_monotone_in_context() {
        let mut rng = RngState::new(1);
        let mut ps = ParamSet::new();
        let film = Film::new(&mut ps, "f", 2, &mut rng);
        *ps.get_mut(film.w_alpha.w) = Tensor::eye(2);
        let h = [1.0, 1.0];
        let mut last = f64::NEG_INFINITY;
        for c in [-2.0, -0.5, 0.0, 0.3, 1.7] {
            let (_, cache) = film.forward(&ps, &h, &[c, 0.0], 1);
            assert!(cache.alpha[0] > last);
            last = cache.alpha[0];
        }
    }

    #[test]
    fn adjacency_examples() {
        let a = adaptive_adjacency(&Tensor::eye(2)).unwrap();
        let e = std::f64::consts::E;
        assert!((a.get(&[0, 0]) - e / (e + 1.0)).abs() < 1e-12);
        assert!((a.get(&[0, 1]) - 1.0 / (e + 1.0)).abs() < 1e-12);
        let a = adaptive_adjacency(&Tensor::zeros(&[4, 3])).unwrap();
        assert!(a.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn gcn_identity_and_uniform_examples() {
        let mut rng = RngState::new(2);
        let mut ps = ParamSet::new();
        let gcn = Gcn::new(&mut ps, "g", 2, 2, 2, &mut rng);
        *ps.get_mut(gcn.linear.w) = Tensor::eye(2);
        let x = [1.0, 2.0, 3.0, 0.5];
        let eye = Tensor::eye(2).into_data();
        assert_eq!(gcn.forward_fixed(&ps, &x, &eye), vec![2.0, 4.0, 6.0, 1.0]);
        let uniform = [0.5; 4];
        let y = gcn.forward_fixed(&ps, &x, &uniform);
        // pre-residual rows are both the mean of the inputs
        assert_eq!(y[0] - x[0], 2.0);
        assert_eq!(y[2] - x[2], 2.0);
        assert_eq!(y[1] - x[1], 1.25);
        assert_eq!(y[3] - x[3], 1.25);
    }

    #[test]
    fn different_text_changes_guided_features() {
        let mut rng = RngState::new(3);
        let mut ps = ParamSet::new();
        let fusion = Fusion::new(&mut ps, "fu", 3, 4, 2, 2, &mut rng);
        let h = Tensor::randn(&[2, 3, 4], 1.0, &mut rng).into_data();
        let t1 = Tensor::randn(&[5, 4], 1.0, &mut rng).into_data();
        let t2 = Tensor::randn(&[5, 4], 1.0, &mut rng).into_data();
        let a = [0.0; 9];
        let (y1, _) = fusion.forward(&ps, &h, Some(&t1), &a, false, None).unwrap();
        let (y2, _) = fusion.forward(&ps, &h, Some(&t2), &a, false, None).unwrap();
        assert_ne!(y1, y2);
        for (y, hv) in y1.iter().zip(&h) {
            assert!(y.abs() <= hv.abs() + FILM_ETA + 1e-15);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let mut rng = RngState::new(seed);
            let mut ps = ParamSet::new();
            let (n, d, l, s) = (3, 8, 6, 2);
            let fusion = Fusion::new(&mut ps, "fu", n, d, 4, 2, &mut rng);
            *ps.get_mut(fusion.gcn.linear.b.unwrap()) = Tensor::randn(&[d], 0.5, &mut rng);
            let h = Tensor::randn(&[s, n, d], 1.0, &mut rng).into_data();
            let text = Tensor::randn(&[l, d], 1.0, &mut rng).into_data();
            let a = crate::dataset::RoadGraph::from_edges((0..n).map(crate::dataset::node_name).collect(), &[(0, 1), (1, 2)])
                .unwrap()
                .normalized_with_self_loops();
            let w = Tensor::randn(&[s, n, d], 1.0, &mut rng).into_data();
            let (y, cache) = fusion.forward(&ps, &h, Some(&text), &a, true, None).unwrap();
            let mask = cache.align_mask().unwrap().to_vec();
            let mut g = ps.zero_grads();
            let (dh, dt) = fusion.backward(&ps, &cache, &w, &mut g);
            let loss_of = |p: &ParamSet, h: &[f64], t: &[f64]| {
                let (y, _) = fusion.forward(p, h, Some(t), &a, true, Some(&mask)).unwrap();
                y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
            };
            assert!((loss_of(&ps, &h, &text) - y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()).abs() < 1e-12);
            let report = check_gradients(&ps, &g, &|p| loss_of(p, &h, &text), 64, seed);
            assert!(report.passed(), "{:?}", report.worst());
            // input gradients, through a scalar wrapper
            let mut hp = ParamSet::new();
            let hid = hp.add("h", Tensor::new(&[h.len()], h.clone()).unwrap());
            let tid = hp.add("t", Tensor::new(&[text.len()], text.clone()).unwrap());
            let mut hg = hp.zero_grads();
            hg.add(hid, &dh);
            hg.add(tid, &dt);
            let report = check_gradients(&hp, &hg, &|p| loss_of(&ps, p.data(hid), p.data(tid)), 64, seed);
            assert!(report.passed(), "{:?}", report.worst());
        }
    }

    #[test]
    fn default_top_k_values() {
        assert_eq!(default_top_k(16), 4);
        assert_eq!(default_top_k(4), 2);
        assert_eq!(default_top_k(1), 1);
    }
}
