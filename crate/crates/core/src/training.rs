//! Optimizer, learning-rate schedule, the joint training loop, evaluation
//! of a trained model and the component ablation runner.

use serde::{Deserialize, Serialize};

use crate::dataset::{NormStats, RoadGraph, Sample};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_run, MetricReport, DEFAULT_HORIZONS};
use crate::model::{Components, Conditioning, Dims, LossParts, Model, ModelConfig, Prepared};
use crate::nn::{Grads, ParamSet};
use crate::numerics::{RngState, Tensor};
use crate::tokenizer::{TokenSequence, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lambda_text: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale settings.
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch: 4,
            epochs: 10,
            warmup_epochs: 1,
            lambda_text: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings of the full-scale setup: lr 5e-5, 50 epochs, 5 warmup.
    pub fn full_scale() -> Self {
        TrainConfig {
            lr: 5e-5,
            epochs: 50,
            warmup_epochs: 5,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.lambda_text >= 0.0 && self.lambda_text.is_finite()) {
            return Err(Error::Config(format!("lambda_text {} must be non-negative", self.lambda_text)));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0 at
/// `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if step >= total_steps {
        return 0.0;
    }
    let span = (total_steps - warmup_steps) as f64;
    let progress = (step - warmup_steps) as f64 / span;
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(ps: &ParamSet) -> Adam {
        let zeros: Vec<Tensor> = ps.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update; frozen tensors are left untouched.
    pub fn step(&mut self, ps: &mut ParamSet, grads: &Grads, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = ps.ids().collect();
        for id in ids {
            if ps.is_frozen(id) {
                continue;
            }
            let i = id.index();
            let g = grads.get(id).data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = ps.get_mut(id).data_mut();
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub mse: f64,
    pub ce: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub trace: Vec<EpochLoss>,
    pub steps: usize,
}

pub fn loss_trace_csv(trace: &[EpochLoss]) -> String {
    let mut out = String::from("epoch,total,mse,ce\n");
    for e in trace {
        out.push_str(&format!("{},{},{},{}\n", e.epoch, e.total, e.mse, e.ce));
    }
    out
}

/// Mini-batch joint training. Deterministic given the model's initial
/// parameters, the samples and `cfg.seed`.
pub fn train(model: &mut Model, samples: &[Prepared], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no training samples".into()));
    }
    let root = RngState::new(cfg.seed);
    let mut shuffle_rng = root.derive(11);
    let mut dropout_rng = root.derive(12);
    let per_epoch = samples.len().div_ceil(cfg.batch);
    let total = per_epoch * cfg.epochs;
    let warmup = per_epoch * cfg.warmup_epochs;
    let mut adam = Adam::new(&model.params);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut sums = LossParts::default();
        for batch in order.chunks(cfg.batch) {
            let mut grads = model.params.zero_grads();
            for &i in batch {
                let (parts, _) = model.loss_and_grads(
                    &model.params,
                    &samples[i],
                    cfg.lambda_text,
                    None,
                    Some(&mut dropout_rng),
                    Some(&mut grads),
                )?;
                if !parts.total.is_finite() {
                    return Err(Error::Divergence(format!(
                        "non-finite loss at epoch {epoch}, step {step}, sample anchor {}: mse {} ce {}",
                        samples[i].anchor, parts.mse, parts.ce
                    )));
                }
                sums.mse += parts.mse;
                sums.ce += parts.ce;
                sums.total += parts.total;
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite gradient at epoch {epoch}, step {step}"
                )));
            }
            step += 1;
            adam.step(&mut model.params, &grads, lr_schedule(step, total, warmup, cfg.lr));
        }
        let n = samples.len() as f64;
        trace.push(EpochLoss {
            epoch,
            total: sums.total / n,
            mse: sums.mse / n,
            ce: sums.ce / n,
        });
    }
    Ok(TrainOutcome { trace, steps: step })
}

/// Mean joint loss over `samples` in evaluation mode.
pub fn mean_loss(model: &Model, samples: &[Prepared], lambda_text: f64) -> Result<LossParts> {
    let mut sums = LossParts::default();
    for s in samples {
        let (p, _) = model.loss_and_grads(&model.params, s, lambda_text, None, None, None)?;
        sums.mse += p.mse;
        sums.ce += p.ce;
        sums.total += p.total;
    }
    let n = samples.len().max(1) as f64;
    Ok(LossParts {
        mse: sums.mse / n,
        ce: sums.ce / n,
        total: sums.total / n,
    })
}

/// Everything produced by running a trained model over a split.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricReport,
    /// Original units, `[t, N, C]` each.
    pub forecasts: Vec<Tensor>,
    pub generated: Vec<TokenSequence>,
    pub selected: Vec<Vec<usize>>,
    pub anchors: Vec<usize>,
}

pub fn evaluate_model(
    model: &Model,
    samples: &[Sample],
    stats: &NormStats,
    vocab: &Vocab,
    conditioning: Conditioning,
) -> Result<Evaluation> {
    let mut forecasts = Vec::with_capacity(samples.len());
    let mut generated = Vec::with_capacity(samples.len());
    let mut selected = Vec::with_capacity(samples.len());
    let mut gen_words = Vec::with_capacity(samples.len());
    let mut ref_words = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len());
    for s in samples {
        let p = Prepared::from_sample(s, stats);
        let y_hat = model.forecast(&model.params, &p)?;
        let traffic = match conditioning {
            Conditioning::Predicted => y_hat.clone(),
            Conditioning::Observed => p.y.clone(),
        };
        let (seq, sel) = model.describe(&model.params, &traffic);
        gen_words.push(vocab.content_words(&seq.ids).into_iter().map(str::to_string).collect::<Vec<_>>());
        ref_words.push(
            vocab
                .content_words(&s.text_future.ids)
                .into_iter()
                .map(str::to_string)
                .collect::<Vec<_>>(),
        );
        forecasts.push(stats.denormalize(&Tensor::new(s.y_future.shape(), y_hat)?));
        targets.push(s.y_future.clone());
        generated.push(seq);
        selected.push(sel);
    }
    let report = evaluate_run(&forecasts, &targets, &gen_words, &ref_words, &DEFAULT_HORIZONS)?;
    Ok(Evaluation {
        report,
        forecasts,
        generated,
        selected,
        anchors: samples.iter().map(|s| s.anchor).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub components: Components,
    pub report: MetricReport,
    /// Text scores with the generator reading the forecast instead of the
    /// observed window (or vice versa), for comparison.
    pub alt_text: crate::metrics::TextMetrics,
    pub alt_conditioning: Conditioning,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub conditioning: Conditioning,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    /// Fixed-width text table with columns BLEU-4, ROUGE-L, METEOR and the
    /// T5 forecast errors.
    pub fn render(&self) -> String {
        let mut out = format!(
            "{:<22} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "components", "BLEU-4", "ROUGE-L", "METEOR", "MAE@T5", "RMSE@T5"
        );
        for r in &self.rows {
            let t5 = r.report.pred.get("T5");
            out.push_str(&format!(
                "{:<22} {:>8.2} {:>8.2} {:>8.2} {:>8.3} {:>8.3}\n",
                r.name,
                r.report.text.bleu4,
                100.0 * r.report.text.rouge_l,
                100.0 * r.report.text.meteor,
                t5.map_or(f64::NAN, |h| h.mae),
                t5.map_or(f64::NAN, |h| h.rmse),
            ));
        }
        out
    }
}

/// Windows `ds` and splits the samples 80/20 in time.
pub fn split_dataset(
    ds: &crate::dataset::Dataset,
    vocab: &Vocab,
    window: usize,
    text_len: usize,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let samples = crate::dataset::windowize(&ds.series, &ds.events, vocab, window, text_len)?;
    let (train, test) = crate::dataset::split_temporal(samples, 0.8);
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{} steps leave {} training and {} test windows",
            ds.series.n_steps(),
            train.len(),
            test.len()
        )));
    }
    Ok((train, test))
}

/// Inputs shared by every training run of an experiment.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub graph: RoadGraph,
    pub dims: Dims,
    pub vocab: Vocab,
    pub stats: NormStats,
    pub train: Vec<Prepared>,
    pub test: Vec<Sample>,
}

impl Experiment {
    /// Fits normalization on the training span, windows and splits.
    pub fn from_dataset(ds: &crate::dataset::Dataset, window: usize, text_len: usize) -> Result<Experiment> {
        let vocab = ds.vocab();
        let (train, test) = split_dataset(ds, &vocab, window, text_len)?;
        let stats = NormStats::fit(&ds.series.speeds, 0..crate::dataset::train_span(&train));
        Ok(Experiment {
            graph: ds.graph.clone(),
            dims: Dims {
                n_nodes: ds.series.n_nodes(),
                channels: ds.series.channels(),
                vocab_size: vocab.len(),
            },
            train: train.iter().map(|s| Prepared::from_sample(s, &stats)).collect(),
            test,
            vocab,
            stats,
        })
    }

    pub fn build(&self, config: ModelConfig, seed: u64) -> Result<Model> {
        Model::new(config, self.dims, self.graph.clone(), seed)
    }

    /// Trains one configuration and evaluates it on the test split.
    pub fn run(&self, config: ModelConfig, train_cfg: &TrainConfig) -> Result<(Model, TrainOutcome, Evaluation)> {
        let mut model = self.build(config, train_cfg.seed)?;
        let outcome = train(&mut model, &self.train, train_cfg)?;
        let cond = model.config.eval_conditioning;
        let eval = evaluate_model(&model, &self.test, &self.stats, &self.vocab, cond)?;
        Ok((model, outcome, eval))
    }
}

/// Trains the component rows (none, +gcn, +importance, +xattn, full) and
/// the no-text variant on the same data and evaluates each on the test
/// split.
pub fn run_ablation(exp: &Experiment, base: &ModelConfig, train_cfg: &TrainConfig) -> Result<AblationTable> {
    let mut rows = Vec::new();
    let named: Vec<(String, Components)> = Components::ablation_rows()
        .into_iter()
        .map(|(n, c)| (n.to_string(), c))
        .chain(std::iter::once(("no-text".to_string(), Components::no_text())))
        .collect();
    let alt = match base.eval_conditioning {
        Conditioning::Predicted => Conditioning::Observed,
        Conditioning::Observed => Conditioning::Predicted,
    };
    for (name, components) in named {
        let config = ModelConfig {
            components,
            ..base.clone()
        };
        let (model, _, eval) = exp.run(config, train_cfg)?;
        let alt_eval = evaluate_model(&model, &exp.test, &exp.stats, &exp.vocab, alt)?;
        rows.push(AblationRow {
            name,
            components,
            report: eval.report,
            alt_text: alt_eval.report.text,
            alt_conditioning: alt,
        });
    }
    Ok(AblationTable {
        conditioning: base.eval_conditioning,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let base = 0.01;
        assert_eq!(lr_schedule(0, 100, 10, base), 0.0);
        assert!((lr_schedule(10, 100, 10, base) - base).abs() < 1e-15);
        assert!(lr_schedule(100, 100, 10, base).abs() < 1e-12);
        // continuous at the junction
        let before = lr_schedule(9, 100, 10, base);
        let after = lr_schedule(11, 100, 10, base);
        assert!((before - base).abs() <= base / 10.0 + 1e-15);
        assert!((after - base).abs() < base * 1e-3);
        assert_eq!(lr_schedule(5, 100, 0, base), 0.5 * base * (1.0 + (std::f64::consts::PI * 0.05).cos()));
    }

    #[test]
    fn adam_properties() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
        let mut adam = Adam::new(&ps);
        let zero = ps.zero_grads();
        adam.step(&mut ps, &zero, 0.1);
        assert_eq!(ps.data(id), &[1.0, -2.0]);

        let mut adam = Adam::new(&ps);
        let mut g = ps.zero_grads();
        g.add(id, &[0.3, -7.0]);
        adam.step(&mut ps, &g, 0.1);
        assert!((ps.data(id)[0] - 0.9).abs() < 1e-6);
        assert!((ps.data(id)[1] + 1.9).abs() < 1e-6);

        let mut ps = ParamSet::new();
        let id = ps.add("x", Tensor::zeros(&[1]));
        let mut adam = Adam::new(&ps);
        for _ in 0..2000 {
            let mut g = ps.zero_grads();
            g.add(id, &[2.0 * (ps.data(id)[0] - 3.0)]);
            adam.step(&mut ps, &g, 0.01);
        }
        assert!((ps.data(id)[0] - 3.0).abs() < 0.01, "{}", ps.data(id)[0]);
    }

    #[test]
    fn frozen_tensors_do_not_move() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", Tensor::filled(&[1], 1.0));
        ps.set_frozen(id, true);
        let mut adam = Adam::new(&ps);
        let mut g = ps.zero_grads();
        g.add(id, &[1.0]);
        adam.step(&mut ps, &g, 0.1);
        assert_eq!(ps.data(id), &[1.0]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig::full_scale().validate().is_ok());
        assert_eq!(TrainConfig::full_scale().lr, 5e-5);
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { warmup_epochs: 10, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn trace_csv_layout() {
        let csv = loss_trace_csv(&[EpochLoss { epoch: 0, total: 1.5, mse: 1.0, ce: 1.0 }]);
        assert_eq!(csv, "epoch,total,mse,ce\n0,1.5,1,1\n");
    }
}
