//! Traffic-conditioned report generator. Per-node traffic features are
//! embedded (optionally through a graph layer), scored for importance, and
//! the top fraction of nodes becomes the key/value set a small causal
//! decoder reads through a gated cross-attention and a slot memory.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{Gcn, GcnCache};
use crate::nn::{
    gather_rows, relu_backward, AttnBlock, AttnBlockCache, AttnMask, FeedForward, FeedForwardCache,
    Grads, Linear, Lora, MhaCache, MultiHeadAttention, ParamId, ParamSet,
};
use crate::numerics::{add_assign, sigmoid, sinusoidal_positions, softmax_in_place, topk_indices, RngState, Tensor};
use crate::tokenizer::{TokenSequence, BOS, EOS, PAD};

pub const MEMORY_SLOTS: usize = 16;
pub const MEMORY_HEADS: usize = 2;

/// `⌈0.3·n⌉` in exact integer arithmetic.
pub fn selection_size(n: usize) -> usize {
    (3 * n).div_ceil(10)
}

/// Indices of the `⌈0.3·N⌉` largest scores, ties to the lower index,
/// returned sorted.
pub fn select_top(scores: &[f64]) -> Vec<usize> {
    topk_indices(scores, selection_size(scores.len()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorFlags {
    pub use_gcn: bool,
    pub use_importance: bool,
    pub use_xattn: bool,
    pub use_memory: bool,
}

impl GeneratorFlags {
    pub const ALL: GeneratorFlags = GeneratorFlags {
        use_gcn: true,
        use_importance: true,
        use_xattn: true,
        use_memory: true,
    };
    pub const NONE: GeneratorFlags = GeneratorFlags {
        use_gcn: false,
        use_importance: false,
        use_xattn: false,
        use_memory: false,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 12,
            alpha: 24.0,
            dropout: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub d: usize,
    pub n: usize,
    pub steps: usize,
    pub channels: usize,
    /// Per-node input width `t·C`.
    pub feat: usize,
    pub vocab_size: usize,
    pub input: Linear,
    /// `[N, D]`
    pub road_embed: ParamId,
    pub gcn: Gcn,
    pub detector_hidden: Linear,
    pub detector_out: Linear,
    /// `[V, D]`
    pub tok_embed: ParamId,
    pub blocks: Vec<(AttnBlock, FeedForward)>,
    pub xattn: MultiHeadAttention,
    pub gate: Linear,
    pub memory: MultiHeadAttention,
    /// `[M, D]`
    pub mem_keys: ParamId,
    /// `[M, D]`
    pub mem_values: ParamId,
    pub lm_head: Linear,
}

/// Node-side state shared by every decoding step of one sample.
#[derive(Clone, Debug)]
pub struct ContextCache {
    f: Vec<f64>,
    gcn: Option<GcnCache>,
    /// Node rows before selection, `[N, D]`.
    pub hn: Vec<f64>,
    det_pre: Vec<f64>,
    det_hidden: Vec<f64>,
    pub scores: Vec<f64>,
    pub selected: Vec<usize>,
    weighted: bool,
    /// Rows the decoder reads, `[selected, D]`.
    pub kv: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct DecodeCache {
    ids: Vec<usize>,
    blocks: Vec<(AttnBlockCache, FeedForwardCache)>,
    kv_rows: usize,
    xattn: Option<XattnCache>,
    memory: Option<MhaCache>,
    hf: Vec<f64>,
}

#[derive(Clone, Debug)]
struct XattnCache {
    mha: MhaCache,
    gate_in: Vec<f64>,
    hm: Vec<f64>,
    g: Vec<f64>,
}

impl Generator {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        n: usize,
        steps: usize,
        channels: usize,
        vocab_size: usize,
        d: usize,
        heads: usize,
        de: usize,
        n_blocks: usize,
        lora: Option<LoraConfig>,
        rng: &mut RngState,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 || d % MEMORY_HEADS != 0 {
            return Err(Error::Config(format!("model width {d} is not divisible by the head count")));
        }
        if let Some(l) = lora {
            if l.rank == 0 || l.rank > d {
                return Err(Error::Config(format!("adapter rank {} must lie in 1..={d}", l.rank)));
            }
            if !(0.0..1.0).contains(&l.dropout) {
                return Err(Error::Config(format!("adapter dropout {} outside [0, 1)", l.dropout)));
            }
        }
        let feat = steps * channels;
        let mut blocks = Vec::with_capacity(n_blocks);
        for b in 0..n_blocks {
            let bname = format!("{name}.block{b}");
            let mut attn = AttnBlock::new(ps, &format!("{bname}.self"), d, heads, rng);
            if let Some(l) = lora {
                attn.mha.lora_q = Some(Lora::new(ps, &format!("{bname}.self.q"), d, d, l.rank, l.alpha, l.dropout, rng));
                attn.mha.lora_v = Some(Lora::new(ps, &format!("{bname}.self.v"), d, d, l.rank, l.alpha, l.dropout, rng));
            }
            let ffn = FeedForward::new(ps, &format!("{bname}.ffn"), d, 2 * d, rng);
            blocks.push((attn, ffn));
        }
        Ok(Generator {
            d,
            n,
            steps,
            channels,
            feat,
            vocab_size,
            input: Linear::new(ps, &format!("{name}.input"), feat, d, true, rng),
            road_embed: ps.add(format!("{name}.road_embed"), Tensor::randn(&[n, d], 1.0, rng)),
            gcn: Gcn::new(ps, &format!("{name}.gcn"), n, de, d, rng),
            detector_hidden: Linear::new(ps, &format!("{name}.detector.hidden"), feat, d, true, rng),
            detector_out: Linear::new(ps, &format!("{name}.detector.out"), d, 1, true, rng),
            tok_embed: ps.add(format!("{name}.tok_embed"), Tensor::randn(&[vocab_size, d], 1.0, rng)),
            blocks,
            xattn: MultiHeadAttention::new(ps, &format!("{name}.xattn"), d, heads, rng),
            gate: Linear::new(ps, &format!("{name}.gate"), 2 * d, d, true, rng),
            memory: MultiHeadAttention::new(ps, &format!("{name}.memory"), d, MEMORY_HEADS, rng),
            mem_keys: ps.add(format!("{name}.mem_keys"), Tensor::randn(&[MEMORY_SLOTS, d], 1.0, rng)),
            mem_values: ps.add(format!("{name}.mem_values"), Tensor::randn(&[MEMORY_SLOTS, d], 1.0, rng)),
            lm_head: Linear::new(ps, &format!("{name}.lm_head"), d, vocab_size, true, rng),
        })
    }

    /// Parameters frozen while adapters train.
    pub fn adapter_base_weights(&self) -> Vec<ParamId> {
        self.blocks
            .iter()
            .filter(|(a, _)| a.mha.lora_q.is_some())
            .flat_map(|(a, _)| [a.mha.q.w, a.mha.v.w])
            .collect()
    }

    /// `[t, N, C]` to per-node rows `[N, t·C]`.
    pub fn node_features(&self, traffic: &[f64]) -> Vec<f64> {
        let (n, c) = (self.n, self.channels);
        let mut f = vec![0.0; n * self.feat];
        for s in 0..self.steps {
            for node in 0..n {
                for ch in 0..c {
                    f[node * self.feat + s * c + ch] = traffic[(s * n + node) * c + ch];
                }
            }
        }
        f
    }

    /// Importance logits' sigmoid per node.
    pub fn scores(&self, ps: &ParamSet, f: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let pre = self.detector_hidden.forward(ps, f);
        let hidden: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
        let scores = self.detector_out.forward(ps, &hidden).into_iter().map(sigmoid).collect();
        (scores, pre, hidden)
    }

    /// Builds the node-side key/value rows from one window of traffic.
    /// `selection` pins the chosen nodes (used when probing gradients).
    pub fn context(
        &self,
        ps: &ParamSet,
        traffic: &[f64],
        a_phys: &[f64],
        flags: GeneratorFlags,
        selection: Option<&[usize]>,
    ) -> ContextCache {
        let f = self.node_features(traffic);
        let mut hn = self.input.forward(ps, &f);
        add_assign(&mut hn, ps.data(self.road_embed));
        let mut gcn = None;
        if flags.use_gcn {
            let (y, c) = self.gcn.forward(ps, &hn, a_phys);
            hn = y;
            gcn = Some(c);
        }
        let (scores, det_pre, det_hidden) = self.scores(ps, &f);
        let (selected, weighted) = if flags.use_importance {
            (selection.map_or_else(|| select_top(&scores), <[usize]>::to_vec), true)
        } else {
            ((0..self.n).collect(), false)
        };
        let mut kv = gather_rows(&hn, self.d, &selected);
        if weighted {
            for (r, &node) in selected.iter().enumerate() {
                kv[r * self.d..(r + 1) * self.d].iter_mut().for_each(|v| *v *= scores[node]);
            }
        }
        ContextCache {
            f,
            gcn,
            hn,
            det_pre,
            det_hidden,
            scores,
            selected,
            weighted,
            kv,
        }
    }

    /// Accumulates parameter gradients from `dkv` (gradient w.r.t. the
    /// key/value rows).
    pub fn context_backward(&self, ps: &ParamSet, cache: &ContextCache, dkv: &[f64], grads: &mut Grads) {
        let d = self.d;
        let mut dhn = vec![0.0; cache.hn.len()];
        let mut dscore = vec![0.0; self.n];
        for (r, &node) in cache.selected.iter().enumerate() {
            let g = &dkv[r * d..(r + 1) * d];
            let h = &cache.hn[node * d..(node + 1) * d];
            if cache.weighted {
                let s = cache.scores[node];
                for j in 0..d {
                    dhn[node * d + j] += s * g[j];
                }
                dscore[node] += g.iter().zip(h).map(|(a, b)| a * b).sum::<f64>();
            } else {
                add_assign(&mut dhn[node * d..(node + 1) * d], g);
            }
        }
        if cache.weighted {
            let dlogit: Vec<f64> = dscore.iter().zip(&cache.scores).map(|(g, s)| g * s * (1.0 - s)).collect();
            let dhidden = self.detector_out.backward(ps, &cache.det_hidden, &dlogit, grads);
            let dpre = relu_backward(&cache.det_pre, &dhidden);
            self.detector_hidden.backward(ps, &cache.f, &dpre, grads);
        }
        if let Some(gc) = &cache.gcn {
            dhn = self.gcn.backward(ps, gc, &dhn, grads);
        }
        grads.add(self.road_embed, &dhn);
        self.input.backward(ps, &cache.f, &dhn, grads);
    }

    /// Teacher-forced decoder pass: `ids` `[L']` to logits `[L', V]`.
    /// `rng` enables adapter dropout.
    pub fn decode(
        &self,
        ps: &ParamSet,
        ids: &[usize],
        kv: &[f64],
        flags: GeneratorFlags,
        mut rng: Option<&mut RngState>,
    ) -> (Vec<f64>, DecodeCache) {
        let d = self.d;
        let len = ids.len();
        let table = ps.data(self.tok_embed);
        let pe = sinusoidal_positions(len, d);
        let mut h = Vec::with_capacity(len * d);
        for (l, &id) in ids.iter().enumerate() {
            for j in 0..d {
                h.push(table[id * d + j] + pe[l * d + j]);
            }
        }
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (attn, ffn) in &self.blocks {
            let (a, ac) = attn.self_forward(ps, &h, &AttnMask::Causal, rng.as_deref_mut());
            let (f, fc) = ffn.forward(ps, &a);
            blocks.push((ac, fc));
            h = f;
        }
        let h_text = h;
        let mut hf = h_text.clone();
        let mut xattn = None;
        if flags.use_xattn {
            let (y, xc) = self.road_cross_attention_cached(ps, &h_text, kv);
            hf = y;
            xattn = Some(xc);
        } else {
            let pooled = mean_rows(kv, d);
            for row in hf.chunks_exact_mut(d) {
                add_assign(row, &pooled);
            }
        }
        let mut memory = None;
        if flags.use_memory {
            let (mo, mc) = self.memory.forward_kv(
                ps,
                &hf,
                ps.data(self.mem_keys),
                ps.data(self.mem_values),
                &AttnMask::None,
                None,
            );
            add_assign(&mut hf, &mo);
            memory = Some(mc);
        }
        let logits = self.lm_head.forward(ps, &hf);
        (
            logits,
            DecodeCache {
                ids: ids.to_vec(),
                blocks,
                kv_rows: kv.len() / d,
                xattn,
                memory,
                hf,
            },
        )
    }

    /// Returns the gradient w.r.t. the key/value rows.
    pub fn decode_backward(&self, ps: &ParamSet, cache: &DecodeCache, dlogits: &[f64], grads: &mut Grads) -> Vec<f64> {
        let d = self.d;
        let mut dhf = self.lm_head.backward(ps, &cache.hf, dlogits, grads);
        if let Some(mc) = &cache.memory {
            let (dq, dk, dv) = self.memory.backward_kv(ps, mc, &dhf, grads);
            add_assign(&mut dhf, &dq);
            grads.add(self.mem_keys, &dk);
            grads.add(self.mem_values, &dv);
        }
        let mut dh = dhf.clone();
        let dkv = if let Some(xc) = &cache.xattn {
            // hf = h_text + g ⊙ hm, g = σ(gate([h_text, hm]))
            let mut dhm: Vec<f64> = dhf.iter().zip(&xc.g).map(|(a, g)| a * g).collect();
            let dgpre: Vec<f64> = dhf
                .iter()
                .zip(&xc.hm)
                .zip(&xc.g)
                .map(|((a, m), g)| a * m * g * (1.0 - g))
                .collect();
            let dgate_in = self.gate.backward(ps, &xc.gate_in, &dgpre, grads);
            for (r, row) in dgate_in.chunks_exact(2 * d).enumerate() {
                add_assign(&mut dh[r * d..(r + 1) * d], &row[..d]);
                add_assign(&mut dhm[r * d..(r + 1) * d], &row[d..]);
            }
            let (dq, dkv) = self.xattn.backward(ps, &xc.mha, &dhm, grads);
            add_assign(&mut dh, &dq);
            dkv
        } else {
            // every kv row contributes 1/rows to each position's context
            let mut share = vec![0.0; d];
            for row in dhf.chunks_exact(d) {
                add_assign(&mut share, row);
            }
            share.iter_mut().for_each(|v| *v /= cache.kv_rows.max(1) as f64);
            share.repeat(cache.kv_rows)
        };
        for ((attn, ffn), (ac, fc)) in self.blocks.iter().zip(&cache.blocks).rev() {
            let da = ffn.backward(ps, fc, &dh, grads);
            dh = attn.self_backward(ps, ac, &da, grads);
        }
        let gt = grads.slot(self.tok_embed);
        for (l, &id) in cache.ids.iter().enumerate() {
            add_assign(&mut gt[id * d..(id + 1) * d], &dh[l * d..(l + 1) * d]);
        }
        dkv
    }

    fn road_cross_attention_cached(&self, ps: &ParamSet, h_text: &[f64], kv: &[f64]) -> (Vec<f64>, XattnCache) {
        let d = self.d;
        let (hm, mha) = self.xattn.forward(ps, h_text, kv, &AttnMask::None, None);
        let gate_in = concat_rows(h_text, &hm, d);
        let g: Vec<f64> = self.gate.forward(ps, &gate_in).into_iter().map(sigmoid).collect();
        let mut hf = h_text.to_vec();
        for ((o, gv), m) in hf.iter_mut().zip(&g).zip(&hm) {
            *o += gv * m;
        }
        (hf, XattnCache { mha, gate_in, hm, g })
    }

    /// `h_text + G ⊙ Attn(h_text, kv)` with `G = σ(gate([h_text, ·]))`.
    pub fn road_cross_attention(&self, ps: &ParamSet, h_text: &[f64], kv: &[f64]) -> Vec<f64> {
        self.road_cross_attention_cached(ps, h_text, kv).0
    }

    /// `h + MHA(h, memory keys, memory values)`.
    pub fn memory_read(&self, ps: &ParamSet, h: &[f64]) -> Vec<f64> {
        let (mut mo, _) = self.memory.forward_kv(
            ps,
            h,
            ps.data(self.mem_keys),
            ps.data(self.mem_values),
            &AttnMask::None,
            None,
        );
        add_assign(&mut mo, h);
        mo
    }

    /// Probability vector for the token after `prefix`.
    pub fn lm_step(&self, ps: &ParamSet, prefix: &[usize], kv: &[f64], flags: GeneratorFlags) -> Vec<f64> {
        let (logits, _) = self.decode(ps, prefix, kv, flags, None);
        let mut last = logits[(prefix.len() - 1) * self.vocab_size..].to_vec();
        softmax_in_place(&mut last);
        last
    }

    /// Greedy decoding from BOS; stops after EOS or at `max_len` ids.
    pub fn greedy_decode(&self, ps: &ParamSet, kv: &[f64], flags: GeneratorFlags, max_len: usize) -> TokenSequence {
        assert!(max_len >= 2, "max_len must be at least 2");
        let mut ids = vec![BOS];
        while ids.len() < max_len {
            let probs = self.lm_step(ps, &ids, kv, flags);
            let next = argmax(&probs);
            ids.push(next);
            if next == EOS {
                break;
            }
        }
        TokenSequence { ids }
    }
}

fn concat_rows(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() * 2);
    for (ra, rb) in a.chunks_exact(d).zip(b.chunks_exact(d)) {
        out.extend_from_slice(ra);
        out.extend_from_slice(rb);
    }
    out
}

fn mean_rows(x: &[f64], d: usize) -> Vec<f64> {
    let rows = x.len() / d;
    let mut out = vec![0.0; d];
    for row in x.chunks_exact(d) {
        add_assign(&mut out, row);
    }
    out.iter_mut().for_each(|v| *v /= rows.max(1) as f64);
    out
}

/// First maximum wins.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy over non-PAD targets and its logit gradient.
pub fn cross_entropy(logits: &[f64], targets: &[usize], vocab: usize) -> (f64, Vec<f64>) {
    let count = targets.iter().filter(|&&t| t != PAD).count();
    let mut grad = vec![0.0; logits.len()];
    if count == 0 {
        return (0.0, grad);
    }
    let mut loss = 0.0;
    for (r, &tgt) in targets.iter().enumerate() {
        if tgt == PAD {
            continue;
        }
        let mut p = logits[r * vocab..(r + 1) * vocab].to_vec();
        softmax_in_place(&mut p);
        loss -= p[tgt].max(f64::MIN_POSITIVE).ln();
        p[tgt] -= 1.0;
        for (g, v) in grad[r * vocab..(r + 1) * vocab].iter_mut().zip(&p) {
            *g = v / count as f64;
        }
    }
    (loss / count as f64, grad)
}

/// `y = x·W + scale·(x·Aᵀ)·Bᵀ` for a single adapted projection.
pub fn lora_apply(ps: &ParamSet, base: &Linear, adapter: &Lora, x: &[f64], rng: Option<&mut RngState>) -> Vec<f64> {
    let mut y = base.forward(ps, x);
    adapter.forward_add(ps, x, &mut y, rng);
    y
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceScores {
    /// `[B, T, N, 1]`
    pub scores: Tensor,
    /// Per (b, t), sorted.
    pub selected: Vec<Vec<usize>>,
}

/// Scores every node of a `[B, T, N, F]` feature tensor and selects the
/// top `⌈0.3·N⌉` per (b, t).
pub fn road_importance(ps: &ParamSet, gen: &Generator, x: &Tensor) -> Result<ImportanceScores> {
    let &[b, t, n, f] = x.shape() else {
        return Err(Error::Dimension(format!("expected [B,T,N,F], got {:?}", x.shape())));
    };
    if f != gen.feat {
        return Err(Error::Dimension(format!("feature width {f} does not match {}", gen.feat)));
    }
    let mut scores = Vec::with_capacity(b * t * n);
    let mut selected = Vec::with_capacity(b * t);
    for group in x.data().chunks_exact(n * f) {
        let (s, _, _) = gen.scores(ps, group);
        selected.push(select_top(&s));
        scores.extend(s);
    }
    Ok(ImportanceScores {
        scores: Tensor::new(&[b, t, n, 1], scores)?,
        selected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::nn::attention;

    const V: usize = 10;

    fn small(flags_lora: Option<LoraConfig>, seed: u64) -> (ParamSet, Generator) {
        let mut rng = RngState::new(seed);
        let mut ps = ParamSet::new();
        let gen = Generator::new(&mut ps, "gen", 3, 8, 1, V, 8, 2, 4, 2, flags_lora, &mut rng).unwrap();
        (ps, gen)
    }

    fn ring3() -> Vec<f64> {
        crate::dataset::RoadGraph::from_edges((0..3).map(crate::dataset::node_name).collect(), &[(0, 1), (1, 2)])
            .unwrap()
            .normalized_with_self_loops()
    }

    #[test]
    fn selection_size_is_ceiling_of_thirty_percent() {
        for n in 1..=50usize {
            let k = selection_size(n);
            // smallest k with 10k >= 3n
            assert!(10 * k >= 3 * n && 10 * (k - 1) < 3 * n, "n = {n}");
            let mut rng = RngState::new(n as u64);
            let scores: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            assert_eq!(select_top(&scores).len(), k);
        }
        assert_eq!(selection_size(10), 3);
        assert_eq!(selection_size(1), 1);
    }

    #[test]
    fn importance_scores_in_open_unit_interval() {
        let (ps, gen) = small(None, 1);
        let mut rng = RngState::new(2);
        let x = Tensor::randn(&[2, 1, 3, 8], 3.0, &mut rng);
        let imp = road_importance(&ps, &gen, &x).unwrap();
        assert_eq!(imp.scores.shape(), &[2, 1, 3, 1]);
        assert!(imp.scores.data().iter().all(|&s| s > 0.0 && s < 1.0));
        assert!(imp.selected.iter().all(|s| s.len() == 1));
    }

    #[test]
    fn gate_limits() {
        let (mut ps, gen) = small(None, 3);
        let mut rng = RngState::new(4);
        let h = Tensor::randn(&[4, 8], 1.0, &mut rng).into_data();
        let kv = Tensor::randn(&[2, 8], 1.0, &mut rng).into_data();
        let (hm, _) = gen.xattn.forward(&ps, &h, &kv, &AttnMask::None, None);
        *ps.get_mut(gen.gate.w) = Tensor::zeros(&[16, 8]);
        let y = gen.road_cross_attention(&ps, &h, &kv);
        for ((yv, hv), mv) in y.iter().zip(&h).zip(&hm) {
            assert_eq!(*yv, hv + 0.5 * mv);
        }
        *ps.get_mut(gen.gate.b.unwrap()) = Tensor::filled(&[8], -1e4);
        assert_eq!(gen.road_cross_attention(&ps, &h, &kv), h);
    }

    #[test]
    fn single_key_returns_projected_value() {
        let (ps, gen) = small(None, 5);
        let mut rng = RngState::new(6);
        let h = Tensor::randn(&[3, 8], 1.0, &mut rng).into_data();
        let kv = Tensor::randn(&[1, 8], 1.0, &mut rng).into_data();
        let (hm, _) = gen.xattn.forward(&ps, &h, &kv, &AttnMask::None, None);
        let projected = gen.xattn.o.forward(&ps, &gen.xattn.v.forward(&ps, &kv));
        for row in hm.chunks(8) {
            for (a, b) in row.iter().zip(&projected) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn restricted_attention_matches_masked_dense() {
        let (ps, gen) = small(None, 7);
        let mut rng = RngState::new(8);
        let traffic = Tensor::randn(&[8, 3, 1], 1.0, &mut rng).into_data();
        let flags = GeneratorFlags::ALL;
        let ctx = gen.context(&ps, &traffic, &ring3(), flags, None);
        let h = Tensor::randn(&[5, 8], 1.0, &mut rng).into_data();
        // dense keys over all nodes, unselected ones masked out
        let mut all = ctx.hn.clone();
        for (node, row) in all.chunks_mut(8).enumerate() {
            row.iter_mut().for_each(|v| *v *= ctx.scores[node]);
        }
        let q = gen.xattn.q.forward(&ps, &h);
        let k = gen.xattn.k.forward(&ps, &all);
        let v = gen.xattn.v.forward(&ps, &all);
        let mut allowed = vec![false; 5 * 3];
        for i in 0..5 {
            for &j in &ctx.selected {
                allowed[i * 3 + j] = true;
            }
        }
        let dense = attention(&q, &k, &v, 5, 3, 8, 2, &AttnMask::Allowed(allowed));
        let want = gen.xattn.o.forward(&ps, &dense.out);
        let (got, _) = gen.xattn.forward(&ps, &h, &ctx.kv, &AttnMask::None, None);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn memory_read_matches_naive_slots_and_single_slot() {
        let (ps, gen) = small(None, 9);
        let mut rng = RngState::new(10);
        let h = Tensor::randn(&[3, 8], 1.0, &mut rng).into_data();
        let out = gen.memory_read(&ps, &h);
        let m = gen.memory;
        let keys = gen.memory.k.forward(&ps, ps.data(gen.mem_keys));
        let vals = gen.memory.v.forward(&ps, ps.data(gen.mem_values));
        let q = gen.memory.q.forward(&ps, &h);
        let dh = 8 / m.heads;
        for i in 0..3 {
            let mut ctx = vec![0.0; 8];
            for head in 0..m.heads {
                let sc: Vec<f64> = (0..MEMORY_SLOTS)
                    .map(|j| (0..dh).map(|c| q[i * 8 + head * dh + c] * keys[j * 8 + head * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = sc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = sc.iter().map(|s| (s - mx).exp()).sum();
                let mut total = 0.0;
                for j in 0..MEMORY_SLOTS {
                    let p = (sc[j] - mx).exp() / z;
                    total += p;
                    for c in 0..dh {
                        ctx[head * dh + c] += p * vals[j * 8 + head * dh + c];
                    }
                }
                assert!((total - 1.0).abs() < 1e-12);
            }
            let o = gen.memory.o.forward(&ps, &ctx);
            for c in 0..8 {
                assert!((out[i * 8 + c] - h[i * 8 + c] - o[c]).abs() < 1e-12);
            }
        }
        // one slot: every query reads the projected value
        let slot_v = &ps.data(gen.mem_values)[..8];
        let (one, cache) = m.forward_kv(&ps, &h, &ps.data(gen.mem_keys)[..8], slot_v, &AttnMask::None, None);
        assert!(cache.probs.iter().all(|&p| p == 1.0));
        let projected = m.o.forward(&ps, &m.v.forward(&ps, slot_v));
        for row in one.chunks(8) {
            assert_eq!(row, projected.as_slice());
        }
    }

    #[test]
    fn lora_scalar_probe_and_zero_init_identity() {
        let mut rng = RngState::new(0);
        let mut ps = ParamSet::new();
        let base = Linear::new(&mut ps, "base", 1, 1, false, &mut rng);
        let lora = Lora::new(&mut ps, "base", 1, 1, 1, 2.0, 0.1, &mut rng);
        *ps.get_mut(base.w) = Tensor::filled(&[1, 1], 1.0);
        *ps.get_mut(lora.a) = Tensor::filled(&[1, 1], 1.0);
        assert_eq!(lora_apply(&ps, &base, &lora, &[3.0], None), vec![3.0]);
        *ps.get_mut(lora.b) = Tensor::filled(&[1, 1], 1.0);
        assert_eq!(lora.scale, 2.0);
        assert_eq!(lora_apply(&ps, &base, &lora, &[3.0], None), vec![9.0]);
        assert_eq!(LoraConfig::default().alpha / LoraConfig::default().rank as f64, 2.0);

        let (ps, gen) = small(Some(LoraConfig { rank: 4, ..LoraConfig::default() }), 1);
        let x = Tensor::randn(&[3, 8], 1.0, &mut rng).into_data();
        let mha = gen.blocks[0].0.mha;
        let plain = MultiHeadAttention { lora_q: None, lora_v: None, ..mha };
        assert_eq!(
            mha.forward(&ps, &x, &x, &AttnMask::Causal, None).0,
            plain.forward(&ps, &x, &x, &AttnMask::Causal, None).0
        );
    }

    #[test]
    fn rank_above_width_rejected() {
        let mut rng = RngState::new(0);
        let mut ps = ParamSet::new();
        let lora = Some(LoraConfig { rank: 12, ..LoraConfig::default() });
        assert!(matches!(
            Generator::new(&mut ps, "g", 3, 8, 1, V, 8, 2, 4, 1, lora, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn lm_step_is_distribution_and_matches_teacher_forced_rows() {
        let (ps, gen) = small(None, 11);
        let mut rng = RngState::new(12);
        let traffic = Tensor::randn(&[8, 3, 1], 1.0, &mut rng).into_data();
        let ctx = gen.context(&ps, &traffic, &ring3(), GeneratorFlags::ALL, None);
        let ids = [BOS, 5, 7];
        let (logits, _) = gen.decode(&ps, &ids, &ctx.kv, GeneratorFlags::ALL, None);
        for j in 0..3 {
            let p = gen.lm_step(&ps, &ids[..=j], &ctx.kv, GeneratorFlags::ALL);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let mut row = logits[j * V..(j + 1) * V].to_vec();
            softmax_in_place(&mut row);
            for (a, b) in p.iter().zip(&row) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decoder_is_causal() {
        let (ps, gen) = small(Some(LoraConfig { rank: 4, ..LoraConfig::default() }), 13);
        let mut rng = RngState::new(14);
        let kv = Tensor::randn(&[2, 8], 1.0, &mut rng).into_data();
        for trial in 0..5 {
            let a: Vec<usize> = (0..6).map(|_| rng.below(V)).collect();
            let mut b = a.clone();
            let j = trial % 5;
            for id in b.iter_mut().skip(j + 1) {
                *id = (*id + 1 + rng.below(V - 1)) % V;
            }
            let (la, _) = gen.decode(&ps, &a, &kv, GeneratorFlags::ALL, None);
            let (lb, _) = gen.decode(&ps, &b, &kv, GeneratorFlags::ALL, None);
            assert_eq!(la[..(j + 1) * V], lb[..(j + 1) * V]);
        }
    }

    #[test]
    fn greedy_decode_contracts() {
        let (mut ps, gen) = small(None, 15);
        let mut rng = RngState::new(16);
        let kv = Tensor::randn(&[1, 8], 1.0, &mut rng).into_data();
        let seq = gen.greedy_decode(&ps, &kv, GeneratorFlags::ALL, 6);
        assert!(seq.len() <= 6 && seq.ids[0] == BOS);
        assert_eq!(seq, gen.greedy_decode(&ps, &kv, GeneratorFlags::ALL, 6));
        let mut bias = vec![0.0; V];
        bias[EOS] = 1e3;
        *ps.get_mut(gen.lm_head.b.unwrap()) = Tensor::new(&[V], bias).unwrap();
        assert_eq!(gen.greedy_decode(&ps, &kv, GeneratorFlags::ALL, 6).ids, vec![BOS, EOS]);
    }

    #[test]
    fn cross_entropy_skips_pad_and_matches_hand_value() {
        let logits = vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0];
        let (l, g) = cross_entropy(&logits, &[1, PAD], 3);
        assert!((l - 3f64.ln()).abs() < 1e-12);
        assert!(g[3..].iter().all(|&v| v == 0.0));
        let (l, _) = cross_entropy(&logits, &[PAD, PAD], 3);
        assert_eq!(l, 0.0);
    }

    fn randomize_adapters(ps: &mut ParamSet, gen: &Generator, rng: &mut RngState) {
        for (a, _) in &gen.blocks {
            for l in [a.mha.lora_q, a.mha.lora_v].into_iter().flatten() {
                let shape = ps.get(l.b).shape().to_vec();
                *ps.get_mut(l.b) = Tensor::randn(&shape, 0.5, rng);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let flag_sets = [
            GeneratorFlags::ALL,
            GeneratorFlags::NONE,
            GeneratorFlags { use_xattn: false, ..GeneratorFlags::ALL },
        ];
        for seed in 0..3 {
            for flags in flag_sets {
                let lora = LoraConfig { rank: 4, ..LoraConfig::default() };
                let (mut ps, gen) = small(Some(lora), seed);
                let mut rng = RngState::new(50 + seed);
                randomize_adapters(&mut ps, &gen, &mut rng);
                let traffic = Tensor::randn(&[8, 3, 1], 1.0, &mut rng).into_data();
                let ids = [BOS, 5, 7, 4, EOS, PAD];
                let a = ring3();
                let ctx = gen.context(&ps, &traffic, &a, flags, None);
                let sel = ctx.selected.clone();
                let loss = |p: &ParamSet| {
                    let c = gen.context(p, &traffic, &a, flags, Some(&sel));
                    let (logits, _) = gen.decode(p, &ids[..5], &c.kv, flags, None);
                    cross_entropy(&logits, &ids[1..], V).0
                };
                let (logits, dc) = gen.decode(&ps, &ids[..5], &ctx.kv, flags, None);
                let (_, dlogits) = cross_entropy(&logits, &ids[1..], V);
                let mut g = ps.zero_grads();
                let dkv = gen.decode_backward(&ps, &dc, &dlogits, &mut g);
                gen.context_backward(&ps, &ctx, &dkv, &mut g);
                let report = check_gradients(&ps, &g, &loss, 64, seed);
                assert!(report.passed(), "{flags:?}: {:?}", report.worst());
            }
        }
    }
}
