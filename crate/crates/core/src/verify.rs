//! Self-check suite behind the `verify` command: finite-difference checks
//! of the joint loss for every module and comparisons of the fast kernels
//! and metrics against slow reference loops.

use std::time::Instant;

use serde::Serialize;

use crate::dataset::{generate_synthetic, template_corpus, windowize, z_normalize, SyntheticConfig};
use crate::fusion::{adaptive_adjacency_flat, sparse_align, Film};
use crate::generator::{lora_apply, selection_size, select_top, Generator, GeneratorFlags, LoraConfig};
use crate::metrics::{bleu4, lcs_length, meteor, rouge_l, METEOR_ALPHA, METEOR_BETA, METEOR_GAMMA};
use crate::model::{Components, Dims, Model, ModelConfig, Prepared};
use crate::nn::{attention, AttnMask, Linear, Lora, MultiHeadAttention, ParamSet};
use crate::numerics::{RngState, Tensor};
use crate::predictor::mhsa;
use crate::tokenizer::Vocab;

pub const PROBE_SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckOutcome>,
    pub elapsed_secs: f64,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckOutcome> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let tag = if c.passed { "PASS" } else { "FAIL" };
            out.push_str(&format!("{tag} {:<28} {}\n", c.name, c.detail));
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct VerifyOptions {
    /// Multiplier applied to every analytic gradient before comparison;
    /// anything other than 1.0 must make the gradient checks fail.
    pub grad_corruption: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { grad_corruption: 1.0 }
    }
}

pub fn run(opts: VerifyOptions) -> VerifyReport {
    let start = Instant::now();
    let mut checks = gradient_checks(opts.grad_corruption);
    checks.extend(metric_checks());
    checks.extend(attention_checks());
    checks.extend(structural_checks());
    VerifyReport {
        checks,
        elapsed_secs: start.elapsed().as_secs_f64(),
    }
}

/// Tiny model (N=3, t=8, D=8, one block each) with one window of data.
pub fn probe(seed: u64, components: Components) -> (Model, Prepared) {
    let data = generate_synthetic(&SyntheticConfig::new(3, 40, 0.6, 0.5, seed)).expect("probe data");
    let vocab = Vocab::build(&template_corpus(&data.graph), 1).expect("probe vocab");
    let samples = windowize(&data.series, &data.events, &vocab, 8, 8).expect("probe windows");
    let (_, stats) = z_normalize(&data.series.speeds, None);
    let config = ModelConfig {
        window: 8,
        text_len: 8,
        d_model: 8,
        heads: 2,
        encoder_blocks: 1,
        patch_len: 4,
        node_embed_dim: 4,
        decoder_blocks: 1,
        lora: Some(LoraConfig {
            rank: 4,
            ..LoraConfig::default()
        }),
        components,
        ..ModelConfig::default()
    };
    let dims = Dims {
        n_nodes: 3,
        channels: 1,
        vocab_size: vocab.len(),
    };
    let mut model = Model::new(config, dims, data.graph.clone(), seed).expect("probe model");
    // non-zero adapters so their gradients are exercised
    let mut rng = RngState::new(seed + 77);
    for (a, _) in model.generator.blocks.clone() {
        for l in [a.mha.lora_q, a.mha.lora_v].into_iter().flatten() {
            let shape = model.params.get(l.b).shape().to_vec();
            *model.params.get_mut(l.b) = Tensor::randn(&shape, 0.5, &mut rng);
        }
    }
    (model, Prepared::from_sample(&samples[0], &stats))
}

const MODULES: [(&str, &str); 4] = [
    ("text_encoder", "text."),
    ("fusion", "fusion."),
    ("predictor", "pred."),
    ("generator", "gen."),
];

fn gradient_checks(corruption: f64) -> Vec<CheckOutcome> {
    let configs = [
        Components::FULL,
        Components::no_text(),
        Components::ablation_rows()[0].1,
    ];
    let mut worst: [(f64, String); 5] = Default::default();
    let mut errors = Vec::new();
    let mut probes = 0;
    for seed in PROBE_SEEDS {
        for comps in configs {
            let (model, p) = probe(seed, comps);
            let report = match model.grad_check_with(&p, 0.5, crate::gradcheck::MAX_COORDS_PER_TENSOR, seed, corruption) {
                Ok(r) => r,
                Err(e) => {
                    errors.push(format!("{comps} seed {seed}: {e}"));
                    continue;
                }
            };
            probes += 1;
            for t in &report.tensors {
                let slot = MODULES.iter().position(|(_, pre)| t.name.starts_with(pre)).unwrap_or(4);
                for s in [slot, 4] {
                    if t.max_rel_error > worst[s].0 || !t.max_rel_error.is_finite() {
                        worst[s] = (
                            t.max_rel_error,
                            format!(
                                "{}[{}] analytic {:.6e} numeric {:.6e} ({comps}, seed {seed})",
                                t.name, t.worst, t.analytic, t.numeric
                            ),
                        );
                    }
                }
            }
        }
    }
    let names = ["text_encoder", "fusion", "predictor", "generator", "joint_loss"];
    names
        .iter()
        .zip(worst)
        .map(|(name, (err, at))| {
            let passed = errors.is_empty() && err < crate::gradcheck::FD_TOLERANCE;
            let mut detail = format!("max rel err {err:.2e} over {probes} probes");
            if !passed {
                detail.push_str(&format!("; worst {at}"));
            }
            if !errors.is_empty() {
                detail.push_str(&format!("; errors: {}", errors.join(", ")));
            }
            CheckOutcome {
                name: format!("grad {name}"),
                passed,
                detail,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Reference metric implementations, written independently of the fast ones.

fn count_occurrences(tokens: &[u32], gram: &[u32]) -> usize {
    if gram.len() > tokens.len() {
        return 0;
    }
    (0..=tokens.len() - gram.len())
        .filter(|&i| tokens[i..i + gram.len()] == *gram)
        .count()
}

pub fn reference_bleu4(hyp: &[u32], reference: &[u32]) -> f64 {
    let mut product = 1.0;
    for n in 1..=4 {
        if hyp.len() < n {
            return 0.0;
        }
        let mut seen: Vec<&[u32]> = Vec::new();
        let mut clipped = 0;
        for i in 0..=hyp.len() - n {
            let g = &hyp[i..i + n];
            if seen.contains(&g) {
                continue;
            }
            seen.push(g);
            clipped += count_occurrences(hyp, g).min(count_occurrences(reference, g));
        }
        product *= clipped as f64 / (hyp.len() - n + 1) as f64;
    }
    if product == 0.0 {
        return 0.0;
    }
    let (c, r) = (hyp.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    100.0 * bp * product.powf(0.25)
}

pub fn reference_lcs(x: &[u32], y: &[u32]) -> usize {
    fn go(x: &[u32], y: &[u32], i: usize, j: usize, memo: &mut Vec<Vec<Option<usize>>>) -> usize {
        if i == x.len() || j == y.len() {
            return 0;
        }
        if let Some(v) = memo[i][j] {
            return v;
        }
        let v = if x[i] == y[j] {
            1 + go(x, y, i + 1, j + 1, memo)
        } else {
            go(x, y, i + 1, j, memo).max(go(x, y, i, j + 1, memo))
        };
        memo[i][j] = Some(v);
        v
    }
    let mut memo = vec![vec![None; y.len()]; x.len()];
    go(x, y, 0, 0, &mut memo)
}

pub fn reference_rouge_l(hyp: &[u32], reference: &[u32]) -> f64 {
    let l = reference_lcs(hyp, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (p, r) = (l / hyp.len() as f64, l / reference.len() as f64);
    2.0 * p * r / (p + r)
}

/// Pairs the k-th occurrence of each word in `hyp` with its k-th occurrence
/// in `reference`.
pub fn reference_meteor(hyp: &[u32], reference: &[u32]) -> f64 {
    let mut map: Vec<Option<usize>> = Vec::with_capacity(hyp.len());
    for (i, w) in hyp.iter().enumerate() {
        let k = hyp[..i].iter().filter(|&&x| x == *w).count();
        map.push(
            reference
                .iter()
                .enumerate()
                .filter(|(_, x)| *x == w)
                .nth(k)
                .map(|(j, _)| j),
        );
    }
    let aligned: Vec<(usize, usize)> = map
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| (i, j)))
        .collect();
    let m = aligned.len();
    if m == 0 {
        return 0.0;
    }
    let mut chunks = 1;
    for w in aligned.windows(2) {
        let contiguous = w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1;
        if !contiguous {
            chunks += 1;
        }
    }
    let p = m as f64 / hyp.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    fmean * (1.0 - METEOR_GAMMA * (chunks as f64 / m as f64).powf(METEOR_BETA))
}

fn random_tokens(rng: &mut RngState) -> Vec<u32> {
    let len = 1 + rng.below(20);
    (0..len).map(|_| rng.below(6) as u32).collect()
}

fn metric_checks() -> Vec<CheckOutcome> {
    let mut rng = RngState::new(2024);
    let words = |s: &str| -> Vec<u32> { s.bytes().filter(|b| *b != b' ').map(u32::from).collect() };
    let mut pairs = vec![
        (words("a b c d e"), words("a b c d f")),
        (words("a b c"), words("a b d")),
        (words("a c d"), words("a b c d")),
    ];
    for _ in 0..100 {
        pairs.push((random_tokens(&mut rng), random_tokens(&mut rng)));
    }
    let mut worst = [0.0f64; 4];
    for (h, r) in &pairs {
        let diffs = [
            (bleu4(h, &[r.as_slice()]) - reference_bleu4(h, r)).abs(),
            (meteor(h, r) - reference_meteor(h, r)).abs(),
            (rouge_l(h, r) - reference_rouge_l(h, r)).abs(),
            (lcs_length(h, r) as f64 - reference_lcs(h, r) as f64).abs(),
        ];
        for (w, d) in worst.iter_mut().zip(diffs) {
            *w = w.max(d);
        }
    }
    let examples_ok = (reference_bleu4(&pairs[0].0, &pairs[0].1) - 66.87).abs() < 0.01
        && (reference_meteor(&pairs[1].0, &pairs[1].1) - 0.625).abs() < 1e-12
        && (reference_rouge_l(&pairs[2].0, &pairs[2].1) - 6.0 / 7.0).abs() < 1e-12;
    ["bleu4", "meteor", "rouge_l", "lcs_length"]
        .iter()
        .zip(worst)
        .map(|(name, w)| CheckOutcome {
            name: format!("oracle {name}"),
            passed: w < 1e-9 && examples_ok,
            detail: format!("max abs diff {w:.1e} over {} pairs", pairs.len()),
        })
        .collect()
}

// ---------------------------------------------------------------------------

fn dense_attention(q: &[f64], kv: &[f64], s: usize, l: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; s * d];
    for i in 0..s {
        let scores: Vec<f64> = (0..l)
            .map(|j| (0..d).map(|c| q[i * d + c] * kv[j * d + c]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|v| (v - m).exp()).sum();
        for j in 0..l {
            let p = (scores[j] - m).exp() / z;
            for c in 0..d {
                out[i * d + c] += p * kv[j * d + c];
            }
        }
    }
    out
}

fn naive_mhsa(ps: &ParamSet, m: &MultiHeadAttention, x: &[f64], s: usize) -> Vec<f64> {
    let d = m.d;
    let dh = d / m.heads;
    let proj = |w: &Linear, row: &[f64]| -> Vec<f64> {
        let t = ps.get(w.w);
        (0..d).map(|o| (0..d).map(|i| row[i] * t.get(&[i, o])).sum()).collect()
    };
    let rows: Vec<&[f64]> = x.chunks(d).collect();
    let q: Vec<Vec<f64>> = rows.iter().map(|r| proj(&m.q, r)).collect();
    let k: Vec<Vec<f64>> = rows.iter().map(|r| proj(&m.k, r)).collect();
    let v: Vec<Vec<f64>> = rows.iter().map(|r| proj(&m.v, r)).collect();
    let mut out = Vec::with_capacity(s * d);
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
        out.extend(proj(&m.o, &ctx));
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn small_generator(seed: u64) -> (ParamSet, Generator) {
    let mut ps = ParamSet::new();
    let mut rng = RngState::new(seed);
    let gen = Generator::new(&mut ps, "gen", 5, 8, 1, 12, 8, 2, 4, 2, Some(LoraConfig { rank: 4, ..LoraConfig::default() }), &mut rng)
        .expect("generator config");
    (ps, gen)
}

fn ring(n: usize) -> Vec<f64> {
    let names = (0..n).map(crate::dataset::node_name).collect();
    let edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).chain(std::iter::once((0, n - 1))).collect();
    crate::dataset::RoadGraph::from_edges(names, &edges)
        .expect("ring graph")
        .normalized_with_self_loops()
}

fn attention_checks() -> Vec<CheckOutcome> {
    let mut rng = RngState::new(31);
    let mut out = Vec::new();

    let mut worst = 0.0f64;
    for _ in 0..5 {
        let (s, l, d) = (1 + rng.below(6), 1 + rng.below(10), 2 + rng.below(7));
        let q = Tensor::randn(&[2, s, d], 1.0, &mut rng);
        let kv = Tensor::randn(&[2, l, d], 1.0, &mut rng);
        let got = sparse_align(&q, &kv, l).expect("top_k = L is valid");
        for b in 0..2 {
            let want = dense_attention(&q.data()[b * s * d..(b + 1) * s * d], &kv.data()[b * l * d..(b + 1) * l * d], s, l, d);
            worst = worst.max(max_diff(&got.c_text.data()[b * s * d..(b + 1) * s * d], &want));
        }
    }
    out.push(CheckOutcome {
        name: "sparse_align full = dense".into(),
        passed: worst < 1e-12,
        detail: format!("max abs diff {worst:.1e}"),
    });

    let mut worst = 0.0f64;
    for heads in [1, 2, 4] {
        let mut ps = ParamSet::new();
        let m = MultiHeadAttention::new(&mut ps, "m", 8, heads, &mut rng);
        let s = 3 + rng.below(5);
        let x = Tensor::randn(&[2, s, 8], 1.0, &mut rng);
        let y = mhsa(&ps, &m, &x).expect("mhsa shapes");
        for b in 0..2 {
            let want = naive_mhsa(&ps, &m, &x.data()[b * s * 8..(b + 1) * s * 8], s);
            worst = worst.max(max_diff(&y.data()[b * s * 8..(b + 1) * s * 8], &want));
        }
    }
    out.push(CheckOutcome {
        name: "mhsa = naive loops".into(),
        passed: worst < 1e-12,
        detail: format!("max abs diff {worst:.1e}"),
    });

    let mut worst = 0.0f64;
    for seed in PROBE_SEEDS {
        let (ps, gen) = small_generator(seed);
        let traffic = Tensor::randn(&[8, 5, 1], 1.0, &mut rng).into_data();
        let ctx = gen.context(&ps, &traffic, &ring(5), GeneratorFlags::ALL, None);
        let h = Tensor::randn(&[4, 8], 1.0, &mut rng).into_data();
        // all nodes as keys, unselected ones masked
        let mut all = ctx.hn.clone();
        for (node, row) in all.chunks_mut(8).enumerate() {
            row.iter_mut().for_each(|v| *v *= ctx.scores[node]);
        }
        let q = gen.xattn.q.forward(&ps, &h);
        let k = gen.xattn.k.forward(&ps, &all);
        let v = gen.xattn.v.forward(&ps, &all);
        let mut allowed = vec![false; 4 * 5];
        for i in 0..4 {
            for &j in &ctx.selected {
                allowed[i * 5 + j] = true;
            }
        }
        let dense = attention(&q, &k, &v, 4, 5, 8, gen.xattn.heads, &AttnMask::Allowed(allowed));
        let hm = gen.xattn.o.forward(&ps, &dense.out);
        let gate_in: Vec<f64> = h.chunks(8).zip(hm.chunks(8)).flat_map(|(a, b)| a.iter().chain(b).copied()).collect();
        let g = gen.gate.forward(&ps, &gate_in);
        let want: Vec<f64> = (0..h.len())
            .map(|i| h[i] + crate::numerics::sigmoid(g[i]) * hm[i])
            .collect();
        worst = worst.max(max_diff(&gen.road_cross_attention(&ps, &h, &ctx.kv), &want));
    }
    out.push(CheckOutcome {
        name: "road_cross_attention = masked".into(),
        passed: worst < 1e-12,
        detail: format!("max abs diff {worst:.1e}"),
    });
    out
}

fn structural_checks() -> Vec<CheckOutcome> {
    let mut rng = RngState::new(57);
    let mut out = Vec::new();

    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (n, de) = (2 + rng.below(10), 1 + rng.below(6));
        let e = Tensor::randn(&[n, de], 2.0, &mut rng);
        let a = adaptive_adjacency_flat(e.data(), n, de);
        for row in a.chunks(n) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    out.push(CheckOutcome {
        name: "adaptive adjacency rows".into(),
        passed: worst < 1e-9,
        detail: format!("max |row sum - 1| {worst:.1e}"),
    });

    let mut ps = ParamSet::new();
    let film = Film::new(&mut ps, "film", 6, &mut rng);
    let h = Tensor::randn(&[3, 4, 6], 1.0, &mut rng).into_data();
    let (y, _) = film.forward(&ps, &h, &[0.0; 18], 4);
    let exact = y.iter().zip(&h).all(|(a, b)| *a == 0.5 * b);
    out.push(CheckOutcome {
        name: "film zero context".into(),
        passed: exact,
        detail: "output equals 0.5 h bitwise".into(),
    });

    let mut bad = Vec::new();
    for n in 1..=50 {
        let scores = Tensor::randn(&[n], 1.0, &mut rng).into_data();
        let sel = select_top(&scores);
        let want = (3 * n).div_ceil(10);
        if sel.len() != want || selection_size(n) != want {
            bad.push(n);
        }
    }
    out.push(CheckOutcome {
        name: "top-30% selection size".into(),
        passed: bad.is_empty(),
        detail: if bad.is_empty() { "N = 1..50".into() } else { format!("wrong for N = {bad:?}") },
    });

    let mut ps = ParamSet::new();
    let base = Linear::new(&mut ps, "base", 8, 8, false, &mut rng);
    let lora = Lora::new(&mut ps, "base", 8, 8, 4, 8.0, 0.1, &mut rng);
    let x = Tensor::randn(&[5, 8], 1.0, &mut rng).into_data();
    let same = lora_apply(&ps, &base, &lora, &x, None) == base.forward(&ps, &x);
    out.push(CheckOutcome {
        name: "lora zero-init identity".into(),
        passed: same,
        detail: "adapter output equals base bitwise".into(),
    });

    let (ps, gen) = small_generator(5);
    let mut violations = 0;
    for _ in 0..10 {
        let len = 3 + rng.below(8);
        let ids: Vec<usize> = (0..len).map(|_| rng.below(12)).collect();
        let cut = 1 + rng.below(len - 1);
        let mut other = ids.clone();
        for id in other.iter_mut().skip(cut) {
            *id = (*id + 1 + rng.below(11)) % 12;
        }
        let kv = Tensor::randn(&[2, 8], 1.0, &mut rng).into_data();
        let (a, _) = gen.decode(&ps, &ids, &kv, GeneratorFlags::ALL, None);
        let (b, _) = gen.decode(&ps, &other, &kv, GeneratorFlags::ALL, None);
        if a[..cut * 12] != b[..cut * 12] {
            violations += 1;
        }
    }
    out.push(CheckOutcome {
        name: "decoder causality".into(),
        passed: violations == 0,
        detail: format!("{violations} of 10 probes leaked future tokens"),
    });
    out
}
