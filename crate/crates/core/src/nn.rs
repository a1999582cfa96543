//! Parameter storage and the handful of differentiable layers every model
//! component is assembled from. Each layer exposes a `forward` that returns
//! whatever the matching `backward` needs, and `backward` accumulates
//! parameter gradients into a [`Grads`] buffer while returning the input
//! gradient.

use std::collections::HashMap;

use crate::numerics::{
    add_assign, gemm, gemm_a_bt, gemm_acc, gemm_at_b_acc, normalize_row,
    softmax_backward, softmax_in_place, topk_indices, RngState, Tensor, LAYER_NORM_EPS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    frozen: Vec<bool>,
    lookup: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.lookup.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.tensors.len();
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        self.frozen.push(false);
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn data(&self, id: ParamId) -> &[f64] {
        self.tensors[id.0].data()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id.0] = frozen;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }
}

/// Gradient buffer laid out like a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Grads {
    tensors: Vec<Tensor>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn slot(&mut self, id: ParamId) -> &mut [f64] {
        self.tensors[id.0].data_mut()
    }

    pub fn add(&mut self, id: ParamId, g: &[f64]) {
        add_assign(self.tensors[id.0].data_mut(), g);
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn merge(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            add_assign(a.data_mut(), b.data());
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }
}

/// Xavier-style normal initialisation.
pub fn init_weight(shape: &[usize], rng: &mut RngState) -> Tensor {
    let fan_in = shape[0] as f64;
    let fan_out = *shape.last().unwrap() as f64;
    Tensor::randn(shape, (2.0 / (fan_in + fan_out)).sqrt(), rng)
}

// ---------------------------------------------------------------------------

/// y = x·W (+ b), W stored `[d_in, d_out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut RngState,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), init_weight(&[d_in, d_out], rng));
        let b = bias.then(|| ps.add(format!("{name}.b"), Tensor::zeros(&[d_out])));
        Linear { w, b, d_in, d_out }
    }

    pub fn forward(&self, ps: &ParamSet, x: &[f64]) -> Vec<f64> {
        let rows = x.len() / self.d_in;
        let mut y = gemm(x, ps.data(self.w), rows, self.d_in, self.d_out);
        if let Some(b) = self.b {
            let bias = ps.data(b);
            for row in y.chunks_exact_mut(self.d_out) {
                add_assign(row, bias);
            }
        }
        y
    }

    pub fn backward(&self, ps: &ParamSet, x: &[f64], dy: &[f64], grads: &mut Grads) -> Vec<f64> {
        let rows = x.len() / self.d_in;
        gemm_at_b_acc(grads.slot(self.w), x, dy, rows, self.d_in, self.d_out);
        if let Some(b) = self.b {
            let gb = grads.slot(b);
            for row in dy.chunks_exact(self.d_out) {
                add_assign(gb, row);
            }
        }
        gemm_a_bt(dy, ps.data(self.w), rows, self.d_out, self.d_in)
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub d: usize,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize) -> Self {
        LayerNorm {
            gain: ps.add(format!("{name}.gain"), Tensor::filled(&[d], 1.0)),
            bias: ps.add(format!("{name}.bias"), Tensor::zeros(&[d])),
            d,
        }
    }

    pub fn forward(&self, ps: &ParamSet, x: &[f64]) -> (Vec<f64>, LayerNormCache) {
        let (gain, bias) = (ps.data(self.gain), ps.data(self.bias));
        let mut y = Vec::with_capacity(x.len());
        let mut xhat = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(x.len() / self.d);
        for row in x.chunks_exact(self.d) {
            let (h, s) = normalize_row(row, LAYER_NORM_EPS);
            for i in 0..self.d {
                y.push(h[i] * gain[i] + bias[i]);
            }
            xhat.extend(h);
            inv_std.push(s);
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        ps: &ParamSet,
        cache: &LayerNormCache,
        dy: &[f64],
        grads: &mut Grads,
    ) -> Vec<f64> {
        let d = self.d;
        let gain = ps.data(self.gain);
        let mut dgain = vec![0.0; d];
        let mut dbias = vec![0.0; d];
        let mut dx = vec![0.0; dy.len()];
        for (r, (dyr, xh)) in dy
            .chunks_exact(d)
            .zip(cache.xhat.chunks_exact(d))
            .enumerate()
        {
            let mut dxhat = vec![0.0; d];
            for i in 0..d {
                dgain[i] += dyr[i] * xh[i];
                dbias[i] += dyr[i];
                dxhat[i] = dyr[i] * gain[i];
            }
            let mean_d = dxhat.iter().sum::<f64>() / d as f64;
            let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            let s = cache.inv_std[r];
            for i in 0..d {
                dx[r * d + i] = s * (dxhat[i] - mean_d - xh[i] * mean_dx);
            }
        }
        grads.add(self.gain, &dgain);
        grads.add(self.bias, &dbias);
        dx
    }
}

// ---------------------------------------------------------------------------

/// Which key positions each query may attend to.
#[derive(Clone, Debug)]
pub enum AttnMask {
    None,
    /// Query i sees keys 0..=i.
    Causal,
    /// Row-major `[sq, sk]` allow-list shared by all heads.
    Allowed(Vec<bool>),
    /// Per (head, query) keep only the k highest scores.
    TopK(usize),
}

#[derive(Clone, Debug)]
pub struct AttnOutput {
    pub out: Vec<f64>,
    /// `[heads, sq, sk]`, zero where masked.
    pub probs: Vec<f64>,
    /// `[heads, sq, sk]` allow-list actually applied.
    pub allowed: Vec<bool>,
}

/// Scaled dot-product attention over `heads` equal slices of the feature
/// axis. q: `[sq, d]`, k, v: `[sk, d]`.
pub fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    sq: usize,
    sk: usize,
    d: usize,
    heads: usize,
    mask: &AttnMask,
) -> AttnOutput {
    assert_eq!(d % heads, 0, "width {d} not divisible by {heads} heads");
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; sq * d];
    let mut probs = vec![0.0; heads * sq * sk];
    let mut allowed = vec![true; heads * sq * sk];
    let mut scores = vec![0.0; sk];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..sq {
            let qi = &q[i * d + off..i * d + off + dh];
            for j in 0..sk {
                let kj = &k[j * d + off..j * d + off + dh];
                scores[j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            let allow = &mut allowed[(h * sq + i) * sk..(h * sq + i + 1) * sk];
            match mask {
                AttnMask::None => {}
                AttnMask::Causal => {
                    for (j, a) in allow.iter_mut().enumerate() {
                        *a = j <= i;
                    }
                }
                AttnMask::Allowed(m) => allow.copy_from_slice(&m[i * sk..(i + 1) * sk]),
                AttnMask::TopK(kk) => {
                    allow.iter_mut().for_each(|a| *a = false);
                    for j in topk_indices(&scores, *kk) {
                        allow[j] = true;
                    }
                }
            }
            for (s, &a) in scores.iter_mut().zip(allow.iter()) {
                if !a {
                    *s = f64::NEG_INFINITY;
                }
            }
            softmax_in_place(&mut scores);
            let prow = &mut probs[(h * sq + i) * sk..(h * sq + i + 1) * sk];
            prow.copy_from_slice(&scores);
            let orow = &mut out[i * d + off..i * d + off + dh];
            for (j, &p) in prow.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let vj = &v[j * d + off..j * d + off + dh];
                for (o, vv) in orow.iter_mut().zip(vj) {
                    *o += p * vv;
                }
            }
        }
    }
    AttnOutput {
        out,
        probs,
        allowed,
    }
}

/// Gradients of [`attention`] w.r.t. q, k, v with the mask held fixed.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    sq: usize,
    sk: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; sq * d];
    let mut dk = vec![0.0; sk * d];
    let mut dv = vec![0.0; sk * d];
    let mut dp = vec![0.0; sk];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..sq {
            let prow = &probs[(h * sq + i) * sk..(h * sq + i + 1) * sk];
            let doi = &dout[i * d + off..i * d + off + dh];
            for j in 0..sk {
                let vj = &v[j * d + off..j * d + off + dh];
                dp[j] = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                if prow[j] != 0.0 {
                    let dvj = &mut dv[j * d + off..j * d + off + dh];
                    for (g, o) in dvj.iter_mut().zip(doi) {
                        *g += prow[j] * o;
                    }
                }
            }
            let ds = softmax_backward(prow, &dp);
            for j in 0..sk {
                let g = ds[j] * scale;
                if g == 0.0 {
                    continue;
                }
                for c in 0..dh {
                    dq[i * d + off + c] += g * k[j * d + off + c];
                    dk[j * d + off + c] += g * q[i * d + off + c];
                }
            }
        }
    }
    (dq, dk, dv)
}

// ---------------------------------------------------------------------------

/// Low-rank adapter y += scale · dropout(x·Aᵀ)·Bᵀ with A: `[r, d_in]`,
/// B: `[d_out, r]`.
#[derive(Clone, Copy, Debug)]
pub struct Lora {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub scale: f64,
    pub dropout: f64,
}

#[derive(Clone, Debug)]
pub struct LoraCache {
    /// x·Aᵀ after dropout, `[rows, r]`.
    u: Vec<f64>,
    /// Inverted-dropout multipliers; empty when dropout was off.
    keep: Vec<f64>,
}

impl Lora {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        dropout: f64,
        rng: &mut RngState,
    ) -> Self {
        let a = ps.add(
            format!("{name}.lora_a"),
            Tensor::randn(&[rank, d_in], 1.0 / (d_in as f64).sqrt(), rng),
        );
        let b = ps.add(format!("{name}.lora_b"), Tensor::zeros(&[d_out, rank]));
        Lora {
            a,
            b,
            rank,
            d_in,
            d_out,
            scale: alpha / rank as f64,
            dropout,
        }
    }

    /// Adds the adapter contribution to `y` in place.
    pub fn forward_add(
        &self,
        ps: &ParamSet,
        x: &[f64],
        y: &mut [f64],
        rng: Option<&mut RngState>,
    ) -> LoraCache {
        let rows = x.len() / self.d_in;
        let mut u = gemm_a_bt(x, ps.data(self.a), rows, self.d_in, self.rank);
        let mut keep = Vec::new();
        if let Some(rng) = rng {
            if self.dropout > 0.0 {
                let inv = 1.0 / (1.0 - self.dropout);
                keep = (0..u.len())
                    .map(|_| if rng.uniform() < self.dropout { 0.0 } else { inv })
                    .collect();
                for (v, k) in u.iter_mut().zip(&keep) {
                    *v *= k;
                }
            }
        }
        let mut delta = gemm_a_bt(&u, ps.data(self.b), rows, self.rank, self.d_out);
        for (yv, dv) in y.iter_mut().zip(delta.iter_mut()) {
            *yv += self.scale * *dv;
        }
        LoraCache { u, keep }
    }

    /// Accumulates adapter gradients and adds the adapter's input gradient
    /// into `dx`.
    pub fn backward(
        &self,
        ps: &ParamSet,
        x: &[f64],
        cache: &LoraCache,
        dy: &[f64],
        dx: &mut [f64],
        grads: &mut Grads,
    ) {
        let rows = x.len() / self.d_in;
        let dys: Vec<f64> = dy.iter().map(|v| v * self.scale).collect();
        // dB [d_out, r] += dysᵀ · u
        gemm_at_b_acc(grads.slot(self.b), &dys, &cache.u, rows, self.d_out, self.rank);
        // du [rows, r] = dys · B
        let mut du = gemm(&dys, ps.data(self.b), rows, self.d_out, self.rank);
        if !cache.keep.is_empty() {
            for (g, k) in du.iter_mut().zip(&cache.keep) {
                *g *= k;
            }
        }
        // dA [r, d_in] += duᵀ · x
        gemm_at_b_acc(grads.slot(self.a), &du, x, rows, self.rank, self.d_in);
        gemm_acc(dx, &du, ps.data(self.a), rows, self.rank, self.d_in);
    }
}

// ---------------------------------------------------------------------------

/// Multi-head attention with bias-free Q/K/V/O projections and optional
/// adapters on the Q and V projections.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d: usize,
    pub lora_q: Option<Lora>,
    pub lora_v: Option<Lora>,
}

#[derive(Clone, Debug)]
pub struct MhaCache {
    xq: Vec<f64>,
    xk: Vec<f64>,
    xv: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    ctx: Vec<f64>,
    pub probs: Vec<f64>,
    pub allowed: Vec<bool>,
    lora_q: Option<LoraCache>,
    lora_v: Option<LoraCache>,
    sq: usize,
    sk: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize, heads: usize, rng: &mut RngState) -> Self {
        assert!(heads > 0 && d % heads == 0, "d = {d} not divisible by heads = {heads}");
        MultiHeadAttention {
            q: Linear::new(ps, &format!("{name}.q"), d, d, false, rng),
            k: Linear::new(ps, &format!("{name}.k"), d, d, false, rng),
            v: Linear::new(ps, &format!("{name}.v"), d, d, false, rng),
            o: Linear::new(ps, &format!("{name}.o"), d, d, false, rng),
            heads,
            d,
            lora_q: None,
            lora_v: None,
        }
    }

    pub fn forward(
        &self,
        ps: &ParamSet,
        xq: &[f64],
        xkv: &[f64],
        mask: &AttnMask,
        rng: Option<&mut RngState>,
    ) -> (Vec<f64>, MhaCache) {
        self.forward_kv(ps, xq, xkv, xkv, mask, rng)
    }

    /// Keys and values taken from different inputs of equal row count.
    pub fn forward_kv(
        &self,
        ps: &ParamSet,
        xq: &[f64],
        xk: &[f64],
        xv: &[f64],
        mask: &AttnMask,
        mut rng: Option<&mut RngState>,
    ) -> (Vec<f64>, MhaCache) {
        let d = self.d;
        let (sq, sk) = (xq.len() / d, xk.len() / d);
        debug_assert_eq!(xk.len(), xv.len());
        let mut q = self.q.forward(ps, xq);
        let lora_q = self
            .lora_q
            .map(|l| l.forward_add(ps, xq, &mut q, rng.as_deref_mut()));
        let k = self.k.forward(ps, xk);
        let mut v = self.v.forward(ps, xv);
        let lora_v = self
            .lora_v
            .map(|l| l.forward_add(ps, xv, &mut v, rng.as_deref_mut()));
        let att = attention(&q, &k, &v, sq, sk, d, self.heads, mask);
        let out = self.o.forward(ps, &att.out);
        let cache = MhaCache {
            xq: xq.to_vec(),
            xk: xk.to_vec(),
            xv: xv.to_vec(),
            q,
            k,
            v,
            ctx: att.out,
            probs: att.probs,
            allowed: att.allowed,
            lora_q,
            lora_v,
            sq,
            sk,
        };
        (out, cache)
    }

    /// Returns (d xq, d xkv) for a cache made by [`Self::forward`].
    pub fn backward(
        &self,
        ps: &ParamSet,
        cache: &MhaCache,
        dout: &[f64],
        grads: &mut Grads,
    ) -> (Vec<f64>, Vec<f64>) {
        let (dxq, mut dxk, dxv) = self.backward_kv(ps, cache, dout, grads);
        add_assign(&mut dxk, &dxv);
        (dxq, dxk)
    }

    /// Returns (d xq, d xk, d xv).
    pub fn backward_kv(
        &self,
        ps: &ParamSet,
        cache: &MhaCache,
        dout: &[f64],
        grads: &mut Grads,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let dctx = self.o.backward(ps, &cache.ctx, dout, grads);
        let (dq, dk, dv) = attention_backward(
            &cache.q,
            &cache.k,
            &cache.v,
            &cache.probs,
            &dctx,
            cache.sq,
            cache.sk,
            self.d,
            self.heads,
        );
        let mut dxq = self.q.backward(ps, &cache.xq, &dq, grads);
        if let (Some(l), Some(c)) = (self.lora_q, &cache.lora_q) {
            l.backward(ps, &cache.xq, c, &dq, &mut dxq, grads);
        }
        let dxk = self.k.backward(ps, &cache.xk, &dk, grads);
        let mut dxv = self.v.backward(ps, &cache.xv, &dv, grads);
        if let (Some(l), Some(c)) = (self.lora_v, &cache.lora_v) {
            l.backward(ps, &cache.xv, c, &dv, &mut dxv, grads);
        }
        (dxq, dxk, dxv)
    }
}

/// `LN(xq + MHA(xq, xkv))`.
#[derive(Clone, Copy, Debug)]
pub struct AttnBlock {
    pub mha: MultiHeadAttention,
    pub norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct AttnBlockCache {
    pub mha: MhaCache,
    ln: LayerNormCache,
}

impl AttnBlock {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize, heads: usize, rng: &mut RngState) -> Self {
        AttnBlock {
            mha: MultiHeadAttention::new(ps, &format!("{name}.attn"), d, heads, rng),
            norm: LayerNorm::new(ps, &format!("{name}.norm"), d),
        }
    }

    pub fn forward(
        &self,
        ps: &ParamSet,
        xq: &[f64],
        xkv: &[f64],
        mask: &AttnMask,
        rng: Option<&mut RngState>,
    ) -> (Vec<f64>, AttnBlockCache) {
        let (mut a, mha) = self.mha.forward(ps, xq, xkv, mask, rng);
        add_assign(&mut a, xq);
        let (y, ln) = self.norm.forward(ps, &a);
        (y, AttnBlockCache { mha, ln })
    }

    /// Returns (d xq, d xkv); for self-attention the caller sums the two.
    pub fn backward(
        &self,
        ps: &ParamSet,
        cache: &AttnBlockCache,
        dy: &[f64],
        grads: &mut Grads,
    ) -> (Vec<f64>, Vec<f64>) {
        let da = self.norm.backward(ps, &cache.ln, dy, grads);
        let (mut dxq, dxkv) = self.mha.backward(ps, &cache.mha, &da, grads);
        add_assign(&mut dxq, &da);
        (dxq, dxkv)
    }

    pub fn self_forward(
        &self,
        ps: &ParamSet,
        x: &[f64],
        mask: &AttnMask,
        rng: Option<&mut RngState>,
    ) -> (Vec<f64>, AttnBlockCache) {
        self.forward(ps, x, x, mask, rng)
    }

    pub fn self_backward(
        &self,
        ps: &ParamSet,
        cache: &AttnBlockCache,
        dy: &[f64],
        grads: &mut Grads,
    ) -> Vec<f64> {
        let (mut dx, dkv) = self.backward(ps, cache, dy, grads);
        add_assign(&mut dx, &dkv);
        dx
    }
}

/// `LN(x + W2·relu(W1·x + b1) + b2)`.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
    pub norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct FeedForwardCache {
    x: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
    ln: LayerNormCache,
}

impl FeedForward {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize, hidden: usize, rng: &mut RngState) -> Self {
        FeedForward {
            l1: Linear::new(ps, &format!("{name}.l1"), d, hidden, true, rng),
            l2: Linear::new(ps, &format!("{name}.l2"), hidden, d, true, rng),
            norm: LayerNorm::new(ps, &format!("{name}.norm"), d),
        }
    }

    pub fn forward(&self, ps: &ParamSet, x: &[f64]) -> (Vec<f64>, FeedForwardCache) {
        let pre = self.l1.forward(ps, x);
        let hidden: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
        let mut a = self.l2.forward(ps, &hidden);
        add_assign(&mut a, x);
        let (y, ln) = self.norm.forward(ps, &a);
        (
            y,
            FeedForwardCache {
                x: x.to_vec(),
                pre,
                hidden,
                ln,
            },
        )
    }

    pub fn backward(&self, ps: &ParamSet, cache: &FeedForwardCache, dy: &[f64], grads: &mut Grads) -> Vec<f64> {
        let da = self.norm.backward(ps, &cache.ln, dy, grads);
        let dh = self.l2.backward(ps, &cache.hidden, &da, grads);
        let dpre = relu_backward(&cache.pre, &dh);
        let mut dx = self.l1.backward(ps, &cache.x, &dpre, grads);
        add_assign(&mut dx, &da);
        dx
    }
}

/// Gathers the rows `idx` of a `[rows, d]` matrix.
pub fn gather_rows(x: &[f64], d: usize, idx: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend_from_slice(&x[i * d..(i + 1) * d]);
    }
    out
}

/// Adds the rows of `src` into rows `idx` of `dst`.
pub fn scatter_add_rows(dst: &mut [f64], d: usize, idx: &[usize], src: &[f64]) {
    for (r, &i) in idx.iter().enumerate() {
        add_assign(&mut dst[i * d..(i + 1) * d], &src[r * d..(r + 1) * d]);
    }
}

/// Same-shape row gradient of `y = relu(x)` given x.
pub fn relu_backward(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(dy)
        .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(
        f: &dyn Fn(&[f64]) -> f64,
        x: &[f64],
        analytic: &[f64],
    ) {
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            xp[i] += h;
            let mut xm = x.to_vec();
            xm[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let err = (fd - analytic[i]).abs() / 1f64.max(fd.abs()).max(analytic[i].abs());
            assert!(err < 1e-6, "coord {i}: fd {fd} vs analytic {}", analytic[i]);
        }
    }

    #[test]
    fn attention_input_gradients() {
        let mut rng = RngState::new(3);
        let (sq, sk, d, heads) = (3, 4, 4, 2);
        let q = Tensor::randn(&[sq, d], 1.0, &mut rng).into_data();
        let k = Tensor::randn(&[sk, d], 1.0, &mut rng).into_data();
        let v = Tensor::randn(&[sk, d], 1.0, &mut rng).into_data();
        let w = Tensor::randn(&[sq, d], 1.0, &mut rng).into_data();
        let loss = |q: &[f64], k: &[f64], v: &[f64]| {
            let o = attention(q, k, v, sq, sk, d, heads, &AttnMask::None).out;
            o.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let att = attention(&q, &k, &v, sq, sk, d, heads, &AttnMask::None);
        let (dq, dk, dv) = attention_backward(&q, &k, &v, &att.probs, &w, sq, sk, d, heads);
        fd_check(&|x| loss(x, &k, &v), &q, &dq);
        fd_check(&|x| loss(&q, x, &v), &k, &dk);
        fd_check(&|x| loss(&q, &k, x), &v, &dv);
    }

    #[test]
    fn layer_norm_input_gradient() {
        let mut rng = RngState::new(5);
        let mut ps = ParamSet::new();
        let ln = LayerNorm::new(&mut ps, "ln", 5);
        *ps.get_mut(ln.gain) = Tensor::randn(&[5], 1.0, &mut rng);
        let x = Tensor::randn(&[2, 5], 1.0, &mut rng).into_data();
        let w = Tensor::randn(&[2, 5], 1.0, &mut rng).into_data();
        let (_, cache) = ln.forward(&ps, &x);
        let mut g = ps.zero_grads();
        let dx = ln.backward(&ps, &cache, &w, &mut g);
        fd_check(
            &|x| ln.forward(&ps, x).0.iter().zip(&w).map(|(a, b)| a * b).sum(),
            &x,
            &dx,
        );
    }

    #[test]
    fn causal_mask_blocks_future() {
        let mut rng = RngState::new(1);
        let x = Tensor::randn(&[4, 2], 1.0, &mut rng).into_data();
        let att = attention(&x, &x, &x, 4, 4, 2, 1, &AttnMask::Causal);
        for i in 0..4 {
            for j in i + 1..4 {
                assert_eq!(att.probs[i * 4 + j], 0.0);
            }
        }
    }
}
