//! Forecast errors (MAE, RMSE) and text overlap scores (BLEU-4, METEOR,
//! ROUGE-L) plus the report written after an evaluation run.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_HORIZONS: [usize; 3] = [5, 10, 15];

pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_BETA: f64 = 3.0;
pub const METEOR_GAMMA: f64 = 0.5;

/// Figures reported for the full-scale system on the 1,260-node benchmark
/// with a pretrained language model. Kept for reference only.
pub mod reported {
    pub const MAE_T5: f64 = 3.25;
    pub const RMSE_T5: f64 = 4.86;
    pub const MAE_T5_NO_TEXT: f64 = 3.31;
    pub const BLEU4: f64 = 71.58;
    pub const METEOR: f64 = 72.56;
    pub const ROUGE_L: f64 = 89.64;
    /// BLEU-4 of the component rows: none, +GCN, +importance,
    /// +cross-attention, +memory.
    pub const ABLATION_BLEU4: [f64; 5] = [66.69, 67.38, 68.21, 71.28, 71.58];
}

fn check_pair(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.len() != y_hat.len() {
        return Err(Error::Dimension(format!(
            "metric inputs differ in length: {} vs {}",
            y.len(),
            y_hat.len()
        )));
    }
    if y.is_empty() {
        return Err(Error::EmptyDataset("metric over zero values".into()));
    }
    Ok(())
}

pub fn mae(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

pub fn rmse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pair(y, y_hat)?;
    Ok((y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64).sqrt())
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU with uniform weights over 1..=4-grams, clipped counts and
/// no smoothing, on a 0-100 scale.
pub fn bleu4<T: Eq + Hash>(hyp: &[T], refs: &[&[T]]) -> f64 {
    if hyp.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let counts = ngram_counts(hyp, n);
        let total = hyp.len().saturating_sub(n - 1);
        if total == 0 {
            return 0.0;
        }
        let ref_counts: Vec<_> = refs.iter().map(|r| ngram_counts(r, n)).collect();
        let clipped: usize = counts
            .iter()
            .map(|(g, &c)| {
                let max_ref = ref_counts.iter().map(|rc| rc.get(g).copied().unwrap_or(0)).max().unwrap_or(0);
                c.min(max_ref)
            })
            .sum();
        if clipped == 0 {
            return 0.0;
        }
        log_sum += 0.25 * (clipped as f64 / total as f64).ln();
    }
    let c = hyp.len();
    // closest reference length, shorter on ties
    let r = refs
        .iter()
        .map(|x| x.len())
        .min_by_key(|&l| (l.abs_diff(c), l))
        .unwrap();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    100.0 * bp * log_sum.exp()
}

/// Exact-match alignment: the k-th occurrence of a word in `hyp` pairs with
/// the k-th occurrence of the same word in `reference`. Returns (hyp index,
/// ref index) pairs in hypothesis order.
pub fn align_exact<T: Eq>(hyp: &[T], reference: &[T]) -> Vec<(usize, usize)> {
    let mut used = vec![false; reference.len()];
    let mut pairs = Vec::new();
    for (i, h) in hyp.iter().enumerate() {
        if let Some(j) = (0..reference.len()).find(|&j| !used[j] && reference[j] == *h) {
            used[j] = true;
            pairs.push((i, j));
        }
    }
    pairs
}

/// METEOR with exact unigram matching.
pub fn meteor<T: Eq>(hyp: &[T], reference: &[T]) -> f64 {
    let pairs = align_exact(hyp, reference);
    let m = pairs.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / hyp.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let chunks = 1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count();
    let frag = chunks as f64 / m as f64;
    (1.0 - METEOR_GAMMA * frag.powf(METEOR_BETA)) * f
}

pub fn lcs_length<T: Eq>(x: &[T], y: &[T]) -> usize {
    let mut prev = vec![0usize; y.len() + 1];
    let mut cur = vec![0usize; y.len() + 1];
    for a in x {
        for (j, b) in y.iter().enumerate() {
            cur[j + 1] = if a == b { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[y.len()]
}

/// ROUGE-L F-measure with β = 1.
pub fn rouge_l<T: Eq>(hyp: &[T], reference: &[T]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_length(hyp, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / hyp.len() as f64;
    let r = lcs / reference.len() as f64;
    2.0 * p * r / (p + r)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub mae: f64,
    pub rmse: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextMetrics {
    pub bleu4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Keyed `"T5"`, `"T10"`, ...
    pub pred: BTreeMap<String, HorizonMetrics>,
    pub text: TextMetrics,
    pub n_samples: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<MetricReport> {
        let report: MetricReport = serde_json::from_str(text)?;
        report.validate()?;
        Ok(report)
    }

    /// Schema-level checks: horizon keys, finite values, rmse ≥ mae, text
    /// scores in range.
    pub fn validate(&self) -> Result<()> {
        if self.pred.is_empty() {
            return Err(Error::Validation("report has no forecast horizons".into()));
        }
        for (key, h) in &self.pred {
            let ok_key = key.strip_prefix('T').is_some_and(|n| n.parse::<usize>().is_ok_and(|v| v > 0));
            if !ok_key {
                return Err(Error::Validation(format!("bad horizon key {key:?}")));
            }
            if !(h.mae.is_finite() && h.rmse.is_finite() && h.mae >= 0.0) {
                return Err(Error::Validation(format!("{key}: non-finite or negative error")));
            }
            if h.rmse < h.mae * (1.0 - 1e-12) {
                return Err(Error::Validation(format!("{key}: rmse {} below mae {}", h.rmse, h.mae)));
            }
        }
        let t = &self.text;
        if !(0.0..=100.0).contains(&t.bleu4) || !(0.0..=1.0).contains(&t.meteor) || !(0.0..=1.0).contains(&t.rouge_l) {
            return Err(Error::Validation("text metric outside its range".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// Scores aligned forecasts/targets (each `[t, N, C]`, original units) and
/// generated/reference token lists. Horizons longer than `t` are evaluated
/// over all `t` steps and reported in `warnings`.
pub fn evaluate_run<S: AsRef<str>>(
    forecasts: &[Tensor],
    targets: &[Tensor],
    gen_texts: &[Vec<S>],
    ref_texts: &[Vec<S>],
    horizons: &[usize],
) -> Result<MetricReport> {
    if forecasts.len() != targets.len() || gen_texts.len() != ref_texts.len() {
        return Err(Error::Dimension(format!(
            "misaligned evaluation inputs: {} forecasts, {} targets, {} generated, {} references",
            forecasts.len(),
            targets.len(),
            gen_texts.len(),
            ref_texts.len()
        )));
    }
    if forecasts.is_empty() {
        return Err(Error::EmptyDataset("no samples to evaluate".into()));
    }
    let t = targets[0].shape()[0];
    let mut warnings = Vec::new();
    let mut pred = BTreeMap::new();
    for &h in horizons {
        if h == 0 {
            return Err(Error::Parameter("horizon must be positive".into()));
        }
        let steps = if h > t {
            warnings.push(format!("horizon {h} exceeds the {t}-step window; evaluated over {t} steps"));
            t
        } else {
            h
        };
        let mut y = Vec::new();
        let mut y_hat = Vec::new();
        for (f, g) in forecasts.iter().zip(targets) {
            if f.shape() != g.shape() || g.shape()[0] != t {
                return Err(Error::Dimension(format!(
                    "forecast {:?} and target {:?} differ",
                    f.shape(),
                    g.shape()
                )));
            }
            let per = f.len() / t;
            y.extend_from_slice(&g.data()[..steps * per]);
            y_hat.extend_from_slice(&f.data()[..steps * per]);
        }
        pred.insert(
            format!("T{h}"),
            HorizonMetrics {
                mae: mae(&y, &y_hat)?,
                rmse: rmse(&y, &y_hat)?,
            },
        );
    }
    let mut text = TextMetrics {
        bleu4: 0.0,
        meteor: 0.0,
        rouge_l: 0.0,
    };
    let k = gen_texts.len().max(1) as f64;
    for (g, r) in gen_texts.iter().zip(ref_texts) {
        let g: Vec<&str> = g.iter().map(AsRef::as_ref).collect();
        let r: Vec<&str> = r.iter().map(AsRef::as_ref).collect();
        text.bleu4 += bleu4(&g, &[&r]) / k;
        text.meteor += meteor(&g, &r) / k;
        text.rouge_l += rouge_l(&g, &r) / k;
    }
    Ok(MetricReport {
        pred,
        text,
        n_samples: forecasts.len(),
        warnings,
    })
}

/// Long-format CSV `sample,step,node,channel,target,forecast` for plotting.
pub fn plot_csv(anchors: &[usize], forecasts: &[Tensor], targets: &[Tensor]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Validation(format!("csv: {e}"));
    w.write_record(["anchor", "step", "node", "channel", "target", "forecast"]).map_err(io)?;
    for ((a, f), g) in anchors.iter().zip(forecasts).zip(targets) {
        let &[t, n, c] = g.shape() else {
            return Err(Error::Dimension(format!("expected [t,N,C], got {:?}", g.shape())));
        };
        for s in 0..t {
            for node in 0..n {
                for ch in 0..c {
                    let i = (s * n + node) * c + ch;
                    w.write_record([
                        a.to_string(),
                        s.to_string(),
                        node.to_string(),
                        ch.to_string(),
                        g.data()[i].to_string(),
                        f.data()[i].to_string(),
                    ])
                    .map_err(io)?;
                }
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Validation(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn mae_rmse_examples() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[0.0, 0.0], &[1.0, 3.0]).unwrap(), 2.0);
        assert!((rmse(&[0.0, 0.0], &[1.0, 3.0]).unwrap() - 5f64.sqrt()).abs() < 1e-15);
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn bleu_examples() {
        let a = toks("a b c d e");
        assert!((bleu4(&a, &[&a]) - 100.0).abs() < 1e-9);
        let b = toks("a b c d f");
        let want = 100.0 * (0.8f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
        assert!((bleu4(&a, &[&b]) - want).abs() < 1e-9);
        assert!((bleu4(&a, &[&b]) - 66.87).abs() < 0.01);
        assert_eq!(bleu4(&toks("a b c d"), &[&toks("d c b a")]), 0.0);
        let empty: Vec<&str> = Vec::new();
        assert_eq!(bleu4(&empty, &[&a]), 0.0);
    }

    #[test]
    fn meteor_examples() {
        assert!((meteor(&toks("a b c"), &toks("a b d")) - 0.625).abs() < 1e-12);
        let five = toks("a b c d e");
        assert!((meteor(&five, &five) - 0.996).abs() < 1e-12);
        assert_eq!(meteor(&toks("a b"), &toks("c d")), 0.0);
    }

    #[test]
    fn rouge_and_lcs_examples() {
        assert!((rouge_l(&toks("a c d"), &toks("a b c d")) - 6.0 / 7.0).abs() < 1e-12);
        assert_eq!(rouge_l(&toks("x y"), &toks("x y")), 1.0);
        let empty: Vec<&str> = Vec::new();
        assert_eq!(rouge_l(&empty, &toks("a")), 0.0);
        let x: Vec<char> = "ABCBDAB".chars().collect();
        let y: Vec<char> = "BDCABA".chars().collect();
        assert_eq!(lcs_length(&x, &y), 4);
        assert_eq!(lcs_length(&x, &x), 7);
        assert_eq!(lcs_length(&['a', 'b'], &['c']), 0);
    }

    #[test]
    fn perfect_run_and_clipping() {
        let mut rng = crate::numerics::RngState::new(1);
        let y = Tensor::randn(&[12, 2, 1], 5.0, &mut rng);
        let text = vec![toks("accident on elm road")];
        let r = evaluate_run(&[y.clone()], &[y], &text, &text, &DEFAULT_HORIZONS).unwrap();
        for h in r.pred.values() {
            assert_eq!((h.mae, h.rmse), (0.0, 0.0));
        }
        assert_eq!(r.text.bleu4, 100.0);
        assert!(r.text.meteor > 0.98);
        assert_eq!(r.text.rouge_l, 1.0);
        assert_eq!(r.warnings.len(), 1);
        let back = MetricReport::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.to_json(), r.to_json());
    }

    #[test]
    fn report_schema_rejects_bad_values() {
        let mut pred = BTreeMap::new();
        pred.insert("T5".to_string(), HorizonMetrics { mae: 2.0, rmse: 1.0 });
        let r = MetricReport {
            pred,
            text: TextMetrics { bleu4: 10.0, meteor: 0.5, rouge_l: 0.5 },
            n_samples: 1,
            warnings: vec![],
        };
        assert!(r.validate().is_err());
        assert!(MetricReport::from_json(r#"{"pred":{},"text":{"bleu4":1,"meteor":0,"rouge_l":0},"n_samples":1}"#).is_err());
    }

    #[test]
    fn misaligned_inputs_rejected() {
        let y = Tensor::zeros(&[12, 1, 1]);
        let t: Vec<Vec<&str>> = vec![];
        assert!(evaluate_run(&[y.clone()], &[], &t, &t, &[5]).is_err());
    }
}
