//! Synthetic road-network traffic with event texts, plus windowing,
//! normalization, temporal splitting and the on-disk dataset format.
//!
//! On disk a dataset is a directory with
//!
//! * `speeds.csv` – `timestamp,<node_0>,…,<node_{N-1}>`, one row per step,
//! * `adjacency.json` – `{"nodes":[…],"edges":[[i,j],…]}`,
//! * `events.jsonl` – `{"t":…,"node":…,"kind":…,"text":…}` per line,
//! * `manifest.json` – binds the three files with `step_minutes` and `seed`.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngState, Tensor};
use crate::tokenizer::{TokenSequence, Vocab};

pub const DEFAULT_STEP_MINUTES: u32 = 4;
pub const NORM_EPS: f64 = 1e-8;

/// Report text for a window in which nothing was logged.
pub const QUIET_TEXT: &str = "no incidents reported on the road network";
/// Separator between multiple event texts in one window.
pub const EVENT_JOINER: &str = " and ";

const NAME_WORDS: [&str; 16] = [
    "elm", "oak", "pine", "maple", "cedar", "birch", "willow", "ash", "spruce", "alder",
    "poplar", "linden", "hazel", "rowan", "juniper", "laurel",
];
const NAME_SUFFIXES: [&str; 4] = ["road", "street", "avenue", "bridge"];

/// Deterministic node name: `<word> <suffix>` with a numeric tail once the
/// combinations run out.
pub fn node_name(i: usize) -> String {
    let w = NAME_WORDS[i % NAME_WORDS.len()];
    let s = NAME_SUFFIXES[(i / NAME_WORDS.len()) % NAME_SUFFIXES.len()];
    let round = i / (NAME_WORDS.len() * NAME_SUFFIXES.len());
    if round == 0 {
        format!("{w} {s}")
    } else {
        format!("{w} {s} {round}")
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct RoadGraph {
    pub node_names: Vec<String>,
    /// `[N,N]` symmetric {0,1}, zero diagonal.
    pub adjacency: Tensor,
}

#[derive(Serialize, Deserialize)]
struct AdjacencyFile {
    nodes: Vec<String>,
    edges: Vec<[usize; 2]>,
}

impl RoadGraph {
    pub fn from_edges(node_names: Vec<String>, edges: &[(usize, usize)]) -> Result<Self> {
        let n = node_names.len();
        if n == 0 {
            return Err(Error::Validation("graph has no nodes".into()));
        }
        let mut adj = Tensor::zeros(&[n, n]);
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::Validation(format!("edge ({i},{j}) out of range for {n} nodes")));
            }
            if i == j {
                return Err(Error::Validation(format!("self-loop on node {i}")));
            }
            adj.set(&[i, j], 1.0);
            adj.set(&[j, i], 1.0);
        }
        Ok(RoadGraph {
            node_names,
            adjacency: adj,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.node_names.len()
    }

    /// Undirected edges with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.n_nodes();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if self.adjacency.get(&[i, j]) != 0.0 {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.n_nodes())
            .filter(|&j| self.adjacency.get(&[i, j]) != 0.0)
            .collect()
    }

    pub fn is_connected(&self) -> bool {
        let n = self.n_nodes();
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in self.neighbors(i) {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Row-normalized `A + I`, `[N,N]` flat.
    pub fn normalized_with_self_loops(&self) -> Vec<f64> {
        let n = self.n_nodes();
        let mut out = self.adjacency.data().to_vec();
        for i in 0..n {
            out[i * n + i] = 1.0;
            let s: f64 = out[i * n..(i + 1) * n].iter().sum();
            out[i * n..(i + 1) * n].iter_mut().for_each(|v| *v /= s);
        }
        out
    }

    /// The same graph with node `perm[i]` of `self` placed at index `i`.
    pub fn permuted(&self, perm: &[usize]) -> RoadGraph {
        let n = self.n_nodes();
        let mut adj = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                adj.set(&[i, j], self.adjacency.get(&[perm[i], perm[j]]));
            }
        }
        RoadGraph {
            node_names: perm.iter().map(|&p| self.node_names[p].clone()).collect(),
            adjacency: adj,
        }
    }

    pub fn to_json(&self) -> String {
        let mut edges = Vec::new();
        for (i, j) in self.edges() {
            edges.push([i, j]);
            edges.push([j, i]);
        }
        edges.sort();
        serde_json::to_string(&AdjacencyFile {
            nodes: self.node_names.clone(),
            edges,
        })
        .expect("adjacency serializes")
    }

    /// Edges are directed pairs that must come in symmetric couples.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: AdjacencyFile = serde_json::from_str(text)
            .map_err(|e| Error::parse("adjacency.json", format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
        let arcs: BTreeSet<(usize, usize)> = file.edges.iter().map(|e| (e[0], e[1])).collect();
        for &(i, j) in &arcs {
            if !arcs.contains(&(j, i)) {
                return Err(Error::Validation(format!(
                    "adjacency edge list is asymmetric: [{i},{j}] present without [{j},{i}]"
                )));
            }
        }
        let edges: Vec<(usize, usize)> = arcs.into_iter().filter(|(i, j)| i < j).collect();
        RoadGraph::from_edges(file.nodes, &edges)
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct TrafficSeries {
    /// `[T, N, C]`, km/h.
    pub speeds: Tensor,
    pub step_minutes: u32,
}

impl TrafficSeries {
    pub fn n_steps(&self) -> usize {
        self.speeds.shape()[0]
    }

    pub fn n_nodes(&self) -> usize {
        self.speeds.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.speeds.shape()[2]
    }

    /// Copies steps `range` into a `[len, N, C]` tensor.
    pub fn window(&self, range: Range<usize>) -> Tensor {
        let stride = self.n_nodes() * self.channels();
        let data = self.speeds.data()[range.start * stride..range.end * stride].to_vec();
        Tensor::new(&[range.len(), self.n_nodes(), self.channels()], data).expect("window in range")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Accident,
    Closure,
    Construction,
    Congestion,
}

impl EventKind {
    pub const ALL: [EventKind; 4] = [
        EventKind::Accident,
        EventKind::Closure,
        EventKind::Construction,
        EventKind::Congestion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Accident => "accident",
            EventKind::Closure => "closure",
            EventKind::Construction => "construction",
            EventKind::Congestion => "congestion",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EventKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown event kind {s:?}")))
    }
}

pub fn event_text(kind: EventKind, node_name: &str) -> String {
    format!("{kind} on {node_name}")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    #[serde(rename = "t")]
    pub time: usize,
    pub node: usize,
    pub kind: EventKind,
    pub text: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EventLog {
    pub events: Vec<Event>,
}

impl EventLog {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn validate(&self, n_steps: usize, n_nodes: usize) -> Result<()> {
        for (i, e) in self.events.iter().enumerate() {
            if e.time >= n_steps || e.node >= n_nodes || e.text.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "event {i} invalid for {n_steps} steps / {n_nodes} nodes: {e:?}"
                )));
            }
        }
        Ok(())
    }

    /// Event texts with onset in `range`, joined; [`QUIET_TEXT`] when none.
    pub fn window_text(&self, range: Range<usize>) -> String {
        let texts: Vec<&str> = self
            .events
            .iter()
            .filter(|e| range.contains(&e.time))
            .map(|e| e.text.as_str())
            .collect();
        if texts.is_empty() {
            QUIET_TEXT.to_string()
        } else {
            texts.join(EVENT_JOINER)
        }
    }
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_nodes: usize,
    pub n_steps: usize,
    /// Probability that an anomaly starts inside each `block_len`-step block.
    pub anomaly_rate: f64,
    /// Fractional speed drop at the affected node.
    pub anomaly_depth: f64,
    pub seed: u64,
    pub block_len: usize,
    pub noise_std: f64,
    pub step_minutes: u32,
    /// Anomaly duration in steps for accident, closure, construction, congestion.
    pub durations: [usize; 4],
}

impl SyntheticConfig {
    pub fn new(n_nodes: usize, n_steps: usize, anomaly_rate: f64, anomaly_depth: f64, seed: u64) -> Self {
        SyntheticConfig {
            n_nodes,
            n_steps,
            anomaly_rate,
            anomaly_depth,
            seed,
            ..SyntheticConfig::default()
        }
    }

    pub fn duration(&self, kind: EventKind) -> usize {
        self.durations[kind as usize]
    }

    pub fn steps_per_day(&self) -> usize {
        (24 * 60 / self.step_minutes.max(1)) as usize
    }

    fn validate(&self) -> Result<()> {
        if self.n_nodes < 2 {
            return Err(Error::Parameter(format!("n_nodes must be >= 2, got {}", self.n_nodes)));
        }
        if self.n_steps < 2 * self.block_len || self.block_len == 0 {
            return Err(Error::Parameter(format!(
                "n_steps must be >= 2 x window ({}), got {}",
                2 * self.block_len,
                self.n_steps
            )));
        }
        if !(0.0..=1.0).contains(&self.anomaly_rate) {
            return Err(Error::Parameter(format!("anomaly_rate must lie in [0,1], got {}", self.anomaly_rate)));
        }
        if !(self.anomaly_depth > 0.0 && self.anomaly_depth < 1.0) {
            return Err(Error::Parameter(format!("anomaly_depth must lie in (0,1), got {}", self.anomaly_depth)));
        }
        if self.noise_std < 0.0 || self.step_minutes == 0 {
            return Err(Error::Parameter("noise_std must be >= 0 and step_minutes > 0".into()));
        }
        Ok(())
    }
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_nodes: 8,
            n_steps: 1000,
            anomaly_rate: 0.3,
            anomaly_depth: 0.5,
            seed: 0,
            block_len: 12,
            noise_std: 1.0,
            step_minutes: DEFAULT_STEP_MINUTES,
            durations: [8, 36, 20, 4],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Anomaly {
    pub node: usize,
    pub start: usize,
    pub len: usize,
    pub kind: EventKind,
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub graph: RoadGraph,
    pub series: TrafficSeries,
    pub events: EventLog,
    /// Diurnal profile plus noise, before any anomaly, `[T, N, 1]`.
    pub baseline: Tensor,
    /// Per step/node speed multiplier applied on top of `baseline`.
    pub factor: Tensor,
    pub anomalies: Vec<Anomaly>,
    pub depth: f64,
}

impl SyntheticData {
    /// Applies one anomaly: the node drops to `1 - depth` of baseline over
    /// the interval, its graph neighbours to `1 - depth/2` one step later.
    /// Overlapping anomalies keep the deepest multiplier.
    pub fn inject(&mut self, anomaly: Anomaly) {
        let n_steps = self.series.n_steps();
        let n = self.graph.n_nodes();
        let end = (anomaly.start + anomaly.len).min(n_steps);
        let mut lower = |t: usize, node: usize, f: f64| {
            let cur = self.factor.get(&[t, node]);
            self.factor.set(&[t, node], cur.min(f));
        };
        for t in anomaly.start..end {
            lower(t, anomaly.node, 1.0 - self.depth);
        }
        for nb in self.graph.neighbors(anomaly.node) {
            for t in anomaly.start + 1..(end + 1).min(n_steps) {
                lower(t, nb, 1.0 - self.depth / 2.0);
            }
        }
        self.anomalies.push(anomaly);
        self.events.events.push(Event {
            time: anomaly.start,
            node: anomaly.node,
            kind: anomaly.kind,
            text: event_text(anomaly.kind, &self.graph.node_names[anomaly.node]),
        });
        self.events.events.sort_by_key(|e| (e.time, e.node));
        // recompute speeds for the touched rows
        let speeds = self.series.speeds.data_mut();
        for t in anomaly.start..(end + 1).min(n_steps) {
            for node in 0..n {
                let i = t * n + node;
                speeds[i] = (self.baseline.data()[i] * self.factor.data()[i]).max(0.0);
            }
        }
    }
}

fn ring_plus_chords(n: usize, rng: &mut RngState) -> Vec<(usize, usize)> {
    let mut edges: BTreeSet<(usize, usize)> = BTreeSet::new();
    for i in 0..n {
        let j = (i + 1) % n;
        if i != j {
            edges.insert((i.min(j), i.max(j)));
        }
    }
    let chords = n / 4;
    let mut attempts = 0;
    let mut added = 0;
    while added < chords && attempts < 100 * (chords + 1) {
        attempts += 1;
        let (a, b) = (rng.below(n), rng.below(n));
        let e = (a.min(b), a.max(b));
        if a != b && edges.insert(e) {
            added += 1;
        }
    }
    edges.into_iter().collect()
}

/// Generates a connected ring-plus-chords network with diurnal speeds and
/// text-announced anomalies.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let n = cfg.n_nodes;
    let mut rng = RngState::new(cfg.seed);
    let names: Vec<String> = (0..n).map(node_name).collect();
    let graph = RoadGraph::from_edges(names, &ring_plus_chords(n, &mut rng))?;

    let period = cfg.steps_per_day() as f64;
    let profiles: Vec<(f64, f64, f64)> = (0..n)
        .map(|_| {
            let mean = 45.0 + 20.0 * rng.uniform();
            let amp = 8.0 + 7.0 * rng.uniform();
            let phase = 2.0 * std::f64::consts::PI * rng.uniform();
            (mean, amp, phase)
        })
        .collect();
    let mut baseline = Tensor::zeros(&[cfg.n_steps, n, 1]);
    {
        let b = baseline.data_mut();
        for t in 0..cfg.n_steps {
            for (node, &(mean, amp, phase)) in profiles.iter().enumerate() {
                let angle = 2.0 * std::f64::consts::PI * t as f64 / period + phase;
                let v = mean + amp * angle.sin() + cfg.noise_std * rng.normal();
                b[t * n + node] = v.max(0.0);
            }
        }
    }

    let mut data = SyntheticData {
        graph,
        series: TrafficSeries {
            speeds: baseline.clone(),
            step_minutes: cfg.step_minutes,
        },
        events: EventLog::default(),
        factor: Tensor::filled(&[cfg.n_steps, n], 1.0),
        baseline,
        anomalies: Vec::new(),
        depth: cfg.anomaly_depth,
    };

    let mut anomaly_rng = rng.derive(1);
    let blocks = cfg.n_steps / cfg.block_len;
    for block in 0..blocks {
        if anomaly_rng.uniform() >= cfg.anomaly_rate {
            continue;
        }
        let start = block * cfg.block_len + anomaly_rng.below(cfg.block_len);
        let node = anomaly_rng.below(n);
        let kind = EventKind::ALL[anomaly_rng.below(EventKind::ALL.len())];
        data.inject(Anomaly {
            node,
            start,
            len: cfg.duration(kind),
            kind,
        });
    }
    Ok(data)
}

/// Every text the generator can emit for `graph`; used as the closed
/// vocabulary corpus.
pub fn template_corpus(graph: &RoadGraph) -> Vec<String> {
    let mut corpus = vec![QUIET_TEXT.to_string()];
    for name in &graph.node_names {
        for kind in EventKind::ALL {
            corpus.push(event_text(kind, name));
        }
    }
    corpus.push(EVENT_JOINER.trim().to_string());
    corpus
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[t, N, C]`
    pub x_hist: Tensor,
    pub text_hist: TokenSequence,
    /// `[t, N, C]`
    pub y_future: Tensor,
    pub text_future: TokenSequence,
    pub anchor: usize,
}

/// Number of stride-1 windows of history+future length `2t`.
pub fn window_count(n_steps: usize, t: usize) -> usize {
    if n_steps < 2 * t {
        0
    } else {
        n_steps - 2 * t + 1
    }
}

/// One sample per anchor `a` in `0..=T-2t`: history `[a, a+t)`, future
/// `[a+t, a+2t)`.
pub fn windowize(
    series: &TrafficSeries,
    events: &EventLog,
    vocab: &Vocab,
    t: usize,
    text_len: usize,
) -> Result<Vec<Sample>> {
    if t == 0 {
        return Err(Error::Parameter("window length must be positive".into()));
    }
    let count = window_count(series.n_steps(), t);
    if count == 0 {
        return Err(Error::EmptyDataset(format!(
            "{} steps cannot hold a history+future window of 2 x {t}",
            series.n_steps()
        )));
    }
    Ok((0..count)
        .map(|a| Sample {
            x_hist: series.window(a..a + t),
            text_hist: vocab.encode(&events.window_text(a..a + t), text_len),
            y_future: series.window(a + t..a + 2 * t),
            text_future: vocab.encode(&events.window_text(a + t..a + 2 * t), text_len),
            anchor: a,
        })
        .collect())
}

/// First `floor(ratio n)` samples are training candidates; candidates whose
/// window reaches into the first test sample's span are dropped.
pub fn split_temporal(samples: Vec<Sample>, ratio: f64) -> (Vec<Sample>, Vec<Sample>) {
    let n = samples.len();
    let cut = ((ratio * n as f64).floor() as usize).min(n);
    let mut train = samples;
    let test = train.split_off(cut);
    if let Some(first) = test.first() {
        let boundary = first.anchor;
        train.retain(|s| s.anchor + s.x_hist.shape()[0] + s.y_future.shape()[0] <= boundary);
    }
    (train, test)
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    /// `[N*C]` per node/channel
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Per node/channel moments over steps `range` of a `[T,N,C]` tensor.
    pub fn fit(speeds: &Tensor, range: Range<usize>) -> NormStats {
        let stride = speeds.shape()[1] * speeds.shape()[2];
        let rows = &speeds.data()[range.start * stride..range.end * stride];
        let count = range.len().max(1) as f64;
        let mut mean = vec![0.0; stride];
        for row in rows.chunks_exact(stride) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; stride];
        for row in rows.chunks_exact(stride) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.iter().map(|s| (s / count).sqrt().max(NORM_EPS)).collect();
        NormStats { mean, std }
    }

    pub fn normalize(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        for row in out.data_mut().chunks_exact_mut(self.mean.len()) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        out
    }

    pub fn denormalize(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        for row in out.data_mut().chunks_exact_mut(self.mean.len()) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
        out
    }
}

/// Standardizes a `[T,N,C]` tensor. Without `stats`, moments come from the
/// tensor itself.
pub fn z_normalize(speeds: &Tensor, stats: Option<&NormStats>) -> (Tensor, NormStats) {
    let stats = stats
        .cloned()
        .unwrap_or_else(|| NormStats::fit(speeds, 0..speeds.shape()[0]));
    (stats.normalize(speeds), stats)
}

pub fn denormalize(speeds: &Tensor, stats: &NormStats) -> Tensor {
    stats.denormalize(speeds)
}

/// Last step (exclusive) touched by any training sample.
pub fn train_span(train: &[Sample]) -> usize {
    train
        .iter()
        .map(|s| s.anchor + s.x_hist.shape()[0] + s.y_future.shape()[0])
        .max()
        .unwrap_or(0)
}

// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub graph: RoadGraph,
    pub series: TrafficSeries,
    pub events: EventLog,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub speeds: String,
    pub adjacency: String,
    pub events: String,
    pub step_minutes: u32,
    pub seed: Option<u64>,
    pub n_nodes: usize,
    pub n_steps: usize,
}

impl From<SyntheticData> for Dataset {
    fn from(d: SyntheticData) -> Self {
        Dataset {
            graph: d.graph,
            series: d.series,
            events: d.events,
            seed: None,
        }
    }
}

impl Dataset {
    pub fn vocab(&self) -> Vocab {
        Vocab::build(&template_corpus(&self.graph), 1).expect("template corpus is non-empty")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        if self.series.channels() != 1 {
            return Err(Error::Config("speeds.csv holds a single speed channel".into()));
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, body: &[u8]| -> Result<()> {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))
        };

        let n = self.graph.n_nodes();
        let mut csv_out = csv::Writer::from_writer(Vec::new());
        let header: Vec<&str> = std::iter::once("timestamp")
            .chain(self.graph.node_names.iter().map(String::as_str))
            .collect();
        csv_out.write_record(&header).map_err(csv_io)?;
        for t in 0..self.series.n_steps() {
            let mut rec = vec![(t as u64 * self.series.step_minutes as u64).to_string()];
            rec.extend(self.series.speeds.data()[t * n..(t + 1) * n].iter().map(|v| v.to_string()));
            csv_out.write_record(&rec).map_err(csv_io)?;
        }
        let csv_bytes = csv_out.into_inner().map_err(|e| csv_io(e.into_error().into()))?;
        write("speeds.csv", &csv_bytes)?;
        write("adjacency.json", self.graph.to_json().as_bytes())?;

        let mut jsonl = Vec::new();
        for e in &self.events.events {
            serde_json::to_writer(&mut jsonl, e)?;
            jsonl.write_all(b"\n").expect("vec write");
        }
        write("events.jsonl", &jsonl)?;

        let manifest = DatasetManifest {
            speeds: "speeds.csv".into(),
            adjacency: "adjacency.json".into(),
            events: "events.jsonl".into(),
            step_minutes: self.series.step_minutes,
            seed: self.seed,
            n_nodes: n,
            n_steps: self.series.n_steps(),
        };
        write("manifest.json", serde_json::to_string_pretty(&manifest)?.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let read = |name: &str| -> Result<String> {
            let path = dir.join(name);
            fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
        };
        let manifest: DatasetManifest = serde_json::from_str(&read("manifest.json")?)
            .map_err(|e| Error::parse("manifest.json", format!("line {}", e.line()), e.to_string()))?;
        let graph = RoadGraph::from_json(&read(&manifest.adjacency)?)?;
        let speeds = parse_speeds_csv(&read(&manifest.speeds)?, &graph.node_names)?;
        let events = parse_events_jsonl(&read(&manifest.events)?)?;
        let series = TrafficSeries {
            speeds,
            step_minutes: manifest.step_minutes,
        };
        events.validate(series.n_steps(), graph.n_nodes())?;
        if series.n_nodes() != graph.n_nodes() {
            return Err(Error::Validation("speeds.csv and adjacency.json disagree on node count".into()));
        }
        Ok(Dataset {
            graph,
            series,
            events,
            seed: manifest.seed,
        })
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::parse("speeds.csv", "write", e.to_string())
}

pub fn parse_speeds_csv(text: &str, node_names: &[String]) -> Result<Tensor> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::parse("speeds.csv", "header", e.to_string()))?
        .clone();
    let n = node_names.len();
    if header.len() != n + 1 || &header[0] != "timestamp" {
        return Err(Error::parse(
            "speeds.csv",
            "header",
            format!("expected timestamp plus {n} node columns, found {} columns", header.len()),
        ));
    }
    for (i, name) in node_names.iter().enumerate() {
        if &header[i + 1] != name {
            return Err(Error::parse(
                "speeds.csv",
                "header",
                format!("column {} is {:?}, adjacency names {:?}", i + 1, &header[i + 1], name),
            ));
        }
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for (r, rec) in reader.records().enumerate() {
        let row_no = r + 1;
        let rec = rec.map_err(|e| Error::parse("speeds.csv", format!("row {row_no}"), e.to_string()))?;
        if rec.len() != n + 1 {
            return Err(Error::parse(
                "speeds.csv",
                format!("row {row_no}"),
                format!("expected {} columns, found {}", n + 1, rec.len()),
            ));
        }
        rec[0].parse::<u64>().map_err(|e| {
            Error::parse("speeds.csv", format!("row {row_no}, column 1"), e.to_string())
        })?;
        for c in 1..=n {
            let v: f64 = rec[c].parse().map_err(|e: std::num::ParseFloatError| {
                Error::parse("speeds.csv", format!("row {row_no}, column {}", c + 1), e.to_string())
            })?;
            if !v.is_finite() || v < 0.0 {
                return Err(Error::parse(
                    "speeds.csv",
                    format!("row {row_no}, column {}", c + 1),
                    "speeds must be finite and non-negative",
                ));
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::EmptyDataset("speeds.csv has no rows".into()));
    }
    Tensor::new(&[rows, n, 1], data)
}

pub fn parse_events_jsonl(text: &str) -> Result<EventLog> {
    let mut events = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: Event = serde_json::from_str(line).map_err(|e| {
            Error::parse("events.jsonl", format!("line {}, column {}", i + 1, e.column()), e.to_string())
        })?;
        events.push(e);
    }
    Ok(EventLog { events })
}
