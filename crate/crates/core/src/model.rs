//! The joint model: text encoder, patch embedding, text-guided fusion,
//! two-stage encoder/decoder forecaster and the report generator, with the
//! joint loss and its hand-written backward pass.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{NormStats, RoadGraph, Sample};
use crate::error::{Error, Result};
use crate::fusion::{default_top_k, Fusion};
use crate::generator::{cross_entropy, Generator, GeneratorFlags, LoraConfig};
use crate::nn::{Grads, ParamSet};
use crate::numerics::{RngState, Tensor};
use crate::predictor::Predictor;
use crate::text_encoder::TextEncoder;
use crate::tokenizer::TokenSequence;

/// Which traffic the generator reads outside training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    /// The forecaster's own output.
    Predicted,
    /// The observed future window.
    Observed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    pub use_text: bool,
    pub use_gcn: bool,
    pub use_importance: bool,
    pub use_xattn: bool,
    pub use_memory: bool,
}

impl Components {
    pub const FULL: Components = Components {
        use_text: true,
        use_gcn: true,
        use_importance: true,
        use_xattn: true,
        use_memory: true,
    };

    pub fn generator_flags(self) -> GeneratorFlags {
        GeneratorFlags {
            use_gcn: self.use_gcn,
            use_importance: self.use_importance,
            use_xattn: self.use_xattn,
            use_memory: self.use_memory,
        }
    }

    /// Component rows in the order they are added: nothing, then graph
    /// convolution, road importance, cross-attention, memory.
    pub fn ablation_rows() -> [(&'static str, Components); 5] {
        let none = Components {
            use_gcn: false,
            use_importance: false,
            use_xattn: false,
            use_memory: false,
            ..Components::FULL
        };
        let gcn = Components { use_gcn: true, ..none };
        let imp = Components { use_importance: true, ..gcn };
        let xattn = Components { use_xattn: true, ..imp };
        [
            ("none", none),
            ("gcn", gcn),
            ("gcn+importance", imp),
            ("gcn+importance+xattn", xattn),
            ("full", Components::FULL),
        ]
    }

    pub fn no_text() -> Components {
        Components {
            use_text: false,
            ..Components::FULL
        }
    }
}

impl Default for Components {
    fn default() -> Self {
        Components::FULL
    }
}

/// `full`, `no-text`, `none`, or a `+`-joined subset of
/// `gcn`, `importance`, `xattn`, `memory` (text stays on unless `no-text`
/// is one of the parts).
impl FromStr for Components {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut c = Components {
            use_text: true,
            use_gcn: false,
            use_importance: false,
            use_xattn: false,
            use_memory: false,
        };
        match s {
            "full" => return Ok(Components::FULL),
            "no-text" => return Ok(Components::no_text()),
            "none" => return Ok(c),
            _ => {}
        }
        for part in s.split('+') {
            match part.trim() {
                "gcn" => c.use_gcn = true,
                "importance" => c.use_importance = true,
                "xattn" => c.use_xattn = true,
                "memory" => c.use_memory = true,
                "no-text" => c.use_text = false,
                other => {
                    return Err(Error::Config(format!(
                        "unknown component {other:?}; expected full, no-text, none or gcn/importance/xattn/memory joined by +"
                    )))
                }
            }
        }
        Ok(c)
    }
}

impl fmt::Display for Components {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == Components::FULL {
            return f.write_str("full");
        }
        if *self == Components::no_text() {
            return f.write_str("no-text");
        }
        let mut parts = Vec::new();
        if !self.use_text {
            parts.push("no-text");
        }
        for (on, name) in [
            (self.use_gcn, "gcn"),
            (self.use_importance, "importance"),
            (self.use_xattn, "xattn"),
            (self.use_memory, "memory"),
        ] {
            if on {
                parts.push(name);
            }
        }
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// History and forecast window length.
    pub window: usize,
    pub text_len: usize,
    pub d_model: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub patch_len: usize,
    pub node_embed_dim: usize,
    /// `None` means `max(2, ⌈text_len/4⌉)`.
    pub top_k: Option<usize>,
    pub decoder_blocks: usize,
    pub lora: Option<LoraConfig>,
    pub freeze_adapter_base: bool,
    pub components: Components,
    pub eval_conditioning: Conditioning,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            window: 12,
            text_len: 16,
            d_model: 32,
            heads: 2,
            encoder_blocks: 2,
            patch_len: 4,
            node_embed_dim: 8,
            top_k: None,
            decoder_blocks: 2,
            lora: Some(LoraConfig::default()),
            freeze_adapter_base: true,
            components: Components::FULL,
            eval_conditioning: Conditioning::Predicted,
        }
    }
}

impl ModelConfig {
    pub fn top_k(&self) -> usize {
        self.top_k.unwrap_or_else(|| default_top_k(self.text_len))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.window == 0 || self.patch_len == 0 {
            return bad("window and patch_len must be positive".into());
        }
        if self.text_len < 3 {
            return bad(format!("text_len {} is below the minimum of 3", self.text_len));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.d_model % crate::generator::MEMORY_HEADS != 0 {
            return bad(format!("d_model {} not divisible by the memory head count", self.d_model));
        }
        let k = self.top_k();
        if k == 0 || k > self.text_len {
            return bad(format!("top_k {k} outside 1..={}", self.text_len));
        }
        if self.node_embed_dim == 0 {
            return bad("node_embed_dim must be positive".into());
        }
        if let Some(l) = self.lora {
            if l.rank == 0 || l.rank > self.d_model {
                return bad(format!("adapter rank {} must lie in 1..={}", l.rank, self.d_model));
            }
        }
        Ok(())
    }
}

/// Data-dependent sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n_nodes: usize,
    pub channels: usize,
    pub vocab_size: usize,
}

/// A window in model units: z-scored traffic and token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub text_hist: Vec<usize>,
    pub text_future: Vec<usize>,
    pub anchor: usize,
}

impl Prepared {
    pub fn from_sample(s: &Sample, stats: &NormStats) -> Prepared {
        Prepared {
            x: stats.normalize(&s.x_hist).into_data(),
            y: stats.normalize(&s.y_future).into_data(),
            text_hist: s.text_hist.ids.clone(),
            text_future: s.text_future.ids.clone(),
            anchor: s.anchor,
        }
    }
}

/// Discrete choices pinned while probing gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrozenMasks {
    pub align: Option<Vec<bool>>,
    pub selection: Option<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub mse: f64,
    pub ce: f64,
    pub total: f64,
}

/// `MSE + λ·CE`.
pub fn joint_loss(mse: f64, ce: f64, lambda_text: f64) -> f64 {
    mse + lambda_text * ce
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub dims: Dims,
    pub params: ParamSet,
    pub text_encoder: TextEncoder,
    pub predictor: Predictor,
    pub fusion: Fusion,
    pub generator: Generator,
    pub graph: RoadGraph,
    a_phys: Vec<f64>,
}

impl Model {
    pub fn new(config: ModelConfig, dims: Dims, graph: RoadGraph, seed: u64) -> Result<Model> {
        config.validate()?;
        if graph.n_nodes() != dims.n_nodes {
            return Err(Error::Config(format!(
                "graph has {} nodes but the data has {}",
                graph.n_nodes(),
                dims.n_nodes
            )));
        }
        let c = &config;
        let rng = RngState::new(seed);
        let mut ps = ParamSet::new();
        let text_encoder = TextEncoder::new(&mut ps, "text", dims.vocab_size, c.d_model, &mut rng.derive(1));
        let predictor = Predictor::new(
            &mut ps,
            "pred",
            c.window,
            dims.n_nodes,
            dims.channels,
            c.d_model,
            c.heads,
            c.encoder_blocks,
            c.patch_len,
            &mut rng.derive(2),
        )?;
        let fusion = Fusion::new(
            &mut ps,
            "fusion",
            dims.n_nodes,
            c.d_model,
            c.node_embed_dim,
            c.top_k(),
            &mut rng.derive(3),
        );
        let generator = Generator::new(
            &mut ps,
            "gen",
            dims.n_nodes,
            c.window,
            dims.channels,
            dims.vocab_size,
            c.d_model,
            c.heads,
            c.node_embed_dim,
            c.decoder_blocks,
            c.lora,
            &mut rng.derive(4),
        )?;
        if c.freeze_adapter_base {
            for id in generator.adapter_base_weights() {
                ps.set_frozen(id, true);
            }
        }
        let a_phys = graph.normalized_with_self_loops();
        Ok(Model {
            config,
            dims,
            params: ps,
            text_encoder,
            predictor,
            fusion,
            generator,
            graph,
            a_phys,
        })
    }

    pub fn components(&self) -> Components {
        self.config.components
    }

    fn check(&self, p: &Prepared) -> Result<()> {
        let want = self.config.window * self.dims.n_nodes * self.dims.channels;
        if p.x.len() != want || p.y.len() != want {
            return Err(Error::Dimension(format!(
                "window holds {} values, the model expects {want}",
                p.x.len()
            )));
        }
        if p.text_hist.len() != self.config.text_len || p.text_future.len() != self.config.text_len {
            return Err(Error::Dimension(format!(
                "token sequences must have length {}",
                self.config.text_len
            )));
        }
        Ok(())
    }

    /// Normalized forecast `[t·N·C]`.
    pub fn forecast(&self, ps: &ParamSet, p: &Prepared) -> Result<Vec<f64>> {
        let text = if self.components().use_text {
            Some(self.text_encoder.forward(ps, &p.text_hist)?.0)
        } else {
            None
        };
        let (h0, _) = self.predictor.embed(ps, &p.x);
        let (hg, _) = self.fusion.forward(ps, &h0, text.as_deref(), &self.a_phys, self.components().use_gcn, None)?;
        Ok(self.predictor.encode_decode(ps, &hg).0)
    }

    /// Greedy report for a traffic window in model units.
    pub fn describe(&self, ps: &ParamSet, traffic: &[f64]) -> (TokenSequence, Vec<usize>) {
        let flags = self.components().generator_flags();
        let ctx = self.generator.context(ps, traffic, &self.a_phys, flags, None);
        let seq = self.generator.greedy_decode(ps, &ctx.kv, flags, self.config.text_len);
        (seq, ctx.selected)
    }

    /// Joint loss on one window with gradients accumulated into `grads`.
    /// `rng` switches on adapter dropout.
    pub fn loss_and_grads(
        &self,
        ps: &ParamSet,
        p: &Prepared,
        lambda_text: f64,
        masks: Option<&FrozenMasks>,
        rng: Option<&mut RngState>,
        grads: Option<&mut Grads>,
    ) -> Result<(LossParts, FrozenMasks)> {
        self.check(p)?;
        let comps = self.components();
        let flags = comps.generator_flags();
        let text = if comps.use_text {
            Some(self.text_encoder.forward(ps, &p.text_hist)?)
        } else {
            None
        };
        let (h0, ec) = self.predictor.embed(ps, &p.x);
        let align_mask = masks.and_then(|m| m.align.as_deref());
        let (hg, fc) = self.fusion.forward(
            ps,
            &h0,
            text.as_ref().map(|t| t.0.as_slice()),
            &self.a_phys,
            comps.use_gcn,
            align_mask,
        )?;
        let (y_hat, dc) = self.predictor.encode_decode(ps, &hg);
        let n = y_hat.len() as f64;
        let mse = y_hat.iter().zip(&p.y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;

        let selection = masks.and_then(|m| m.selection.as_deref());
        let ctx = self.generator.context(ps, &p.y, &self.a_phys, flags, selection);
        let len = p.text_future.len();
        let (logits, gc) = self.generator.decode(ps, &p.text_future[..len - 1], &ctx.kv, flags, rng);
        let (ce, mut dlogits) = cross_entropy(&logits, &p.text_future[1..], self.dims.vocab_size);
        let parts = LossParts {
            mse,
            ce,
            total: joint_loss(mse, ce, lambda_text),
        };
        let used = FrozenMasks {
            align: fc.align_mask().map(<[bool]>::to_vec),
            selection: flags.use_importance.then(|| ctx.selected.clone()),
        };

        if let Some(grads) = grads {
            dlogits.iter_mut().for_each(|g| *g *= lambda_text);
            let dkv = self.generator.decode_backward(ps, &gc, &dlogits, grads);
            self.generator.context_backward(ps, &ctx, &dkv, grads);
            let dy: Vec<f64> = y_hat.iter().zip(&p.y).map(|(a, b)| 2.0 * (a - b) / n).collect();
            let dhg = self.predictor.encode_decode_backward(ps, &dc, &dy, grads);
            let (dh0, dtext) = self.fusion.backward(ps, &fc, &dhg, grads);
            self.predictor.embed_backward(ps, &ec, &dh0, grads);
            if let Some((_, tc)) = &text {
                self.text_encoder.backward(ps, tc, &dtext, grads);
            }
        }
        Ok((parts, used))
    }

    /// Compares the hand-written gradient of the joint loss on `p` with
    /// central differences, discrete masks pinned at the probe point.
    pub fn grad_check(&self, p: &Prepared, lambda_text: f64, max_coords: usize, seed: u64) -> Result<crate::gradcheck::GradCheckReport> {
        self.grad_check_with(p, lambda_text, max_coords, seed, 1.0)
    }

    /// As [`Self::grad_check`] with the analytic gradient scaled by
    /// `corruption` (1.0 leaves it intact).
    pub fn grad_check_with(
        &self,
        p: &Prepared,
        lambda_text: f64,
        max_coords: usize,
        seed: u64,
        corruption: f64,
    ) -> Result<crate::gradcheck::GradCheckReport> {
        let ps = &self.params;
        let mut grads = ps.zero_grads();
        let (_, masks) = self.loss_and_grads(ps, p, lambda_text, None, None, Some(&mut grads))?;
        if corruption != 1.0 {
            grads.scale(corruption);
        }
        let loss = |q: &ParamSet| {
            self.loss_and_grads(q, p, lambda_text, Some(&masks), None, None)
                .map(|(l, _)| l.total)
                .unwrap_or(f64::NAN)
        };
        Ok(crate::gradcheck::check_gradients(ps, &grads, &loss, max_coords, seed))
    }
}

/// Denormalizes a flat `[t·N·C]` forecast into a tensor.
pub fn to_original_units(values: Vec<f64>, window: usize, dims: Dims, stats: &NormStats) -> Result<Tensor> {
    let t = Tensor::new(&[window, dims.n_nodes, dims.channels], values)?;
    Ok(stats.denormalize(&t))
}
