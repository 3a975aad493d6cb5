//! Per-component linear probes on paraphrase-pair activations.
//!
//! A component's feature for a pair is its last-token output on `p`
//! concatenated with its last-token output on `q`. One L2-regularized logistic
//! regression is trained per component on the probe set and scored on the
//! locate set; components are ranked by locate accuracy.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::{PairSplit, PromptPair};
use crate::engine::{self, ComponentId, Model};
use crate::error::{Error, Result};
use crate::model_io::Tokenizer;
use crate::par;

/// Lower bound on standardizer std entries.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeFeature {
    pub pair_index: usize,
    /// `[act(p_last); act(q_last)]`.
    pub vector: Vec<f32>,
    pub label: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeHyper {
    pub lr: f64,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ProbeHyper {
    fn default() -> Self {
        ProbeHyper {
            lr: 0.1,
            epochs: 500,
            l2: 1e-3,
            seed: 0,
        }
    }
}

/// Logistic probe over standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub w: Vec<f64>,
    pub b: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Probe {
    pub fn standardize(&self, x: &[f32]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (m, s))| (f64::from(v) - m) / s)
            .collect()
    }

    pub fn logit(&self, x: &[f32]) -> f64 {
        dot(&self.w, &self.standardize(x)) + self.b
    }

    /// Predicts 1 when the sigmoid output is at least 0.5.
    pub fn predict(&self, x: &[f32]) -> u8 {
        u8::from(self.logit(x) >= 0.0)
    }

    pub fn accuracy(&self, features: &[ProbeFeature]) -> f64 {
        if features.is_empty() {
            return 0.0;
        }
        let hits = features
            .iter()
            .filter(|f| self.predict(&f.vector) == f.label)
            .count();
        hits as f64 / features.len() as f64
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Mean logistic loss plus `l2/2 · ‖w‖²` (intercept unpenalized).
pub fn loss(w: &[f64], b: f64, xs: &[Vec<f64>], ys: &[u8], l2: f64) -> f64 {
    let n = xs.len() as f64;
    let data: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, &y)| {
            let z = dot(w, x) + b;
            softplus(z) - f64::from(y) * z
        })
        .sum();
    data / n + 0.5 * l2 * dot(w, w)
}

/// Gradient of [`loss`] with respect to `(w, b)`.
pub fn gradient(w: &[f64], b: f64, xs: &[Vec<f64>], ys: &[u8], l2: f64) -> (Vec<f64>, f64) {
    let n = xs.len() as f64;
    let mut gw = vec![0.0; w.len()];
    let mut gb = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let r = sigmoid(dot(w, x) + b) - f64::from(y);
        for (g, xi) in gw.iter_mut().zip(x) {
            *g += r * xi;
        }
        gb += r;
    }
    for (g, wi) in gw.iter_mut().zip(w) {
        *g = *g / n + l2 * wi;
    }
    (gw, gb / n)
}

/// Standardizes with the features' own mean and std, then runs full-batch
/// gradient descent from zero.
pub fn train_probe(features: &[ProbeFeature], hyper: &ProbeHyper) -> Result<Probe> {
    let Some(first) = features.first() else {
        return Err(Error::DegenerateClass("empty probe set".into()));
    };
    let dim = first.vector.len();
    if let Some(bad) = features.iter().find(|f| f.vector.len() != dim) {
        return Err(Error::Shape(format!(
            "feature for pair {} has length {}, expected {dim}",
            bad.pair_index,
            bad.vector.len()
        )));
    }
    let ones = features.iter().filter(|f| f.label == 1).count();
    if ones == 0 || ones == features.len() {
        return Err(Error::DegenerateClass(format!(
            "probe set has only label {}",
            first.label
        )));
    }
    let n = features.len() as f64;
    let mut mean = vec![0.0; dim];
    for f in features {
        for (m, &v) in mean.iter_mut().zip(&f.vector) {
            *m += f64::from(v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for f in features {
        for ((s, &v), m) in var.iter_mut().zip(&f.vector).zip(&mean) {
            *s += (f64::from(v) - m).powi(2);
        }
    }
    let std: Vec<f64> = var.iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();

    let mut probe = Probe {
        w: vec![0.0; dim],
        b: 0.0,
        mean,
        std,
    };
    let xs: Vec<Vec<f64>> = features
        .iter()
        .map(|f| probe.standardize(&f.vector))
        .collect();
    let ys: Vec<u8> = features.iter().map(|f| f.label).collect();
    for _ in 0..hyper.epochs {
        let (gw, gb) = gradient(&probe.w, probe.b, &xs, &ys, hyper.l2);
        for (w, g) in probe.w.iter_mut().zip(&gw) {
            *w -= hyper.lr * g;
        }
        probe.b -= hyper.lr * gb;
    }
    Ok(probe)
}

/// Last-token outputs of a fixed component list for both prompts of every pair.
#[derive(Debug, Clone)]
pub struct PairActivations {
    pub components: Vec<ComponentId>,
    /// `[pair][component]` for `p`.
    pub p: Vec<Vec<Vec<f32>>>,
    /// `[pair][component]` for `q`.
    pub q: Vec<Vec<Vec<f32>>>,
}

impl PairActivations {
    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    /// Features of the component at `slot` in `self.components`.
    pub fn features(&self, slot: usize, labels: &[u8]) -> Vec<ProbeFeature> {
        labels
            .iter()
            .enumerate()
            .map(|(i, &label)| {
                let mut vector = self.p[i][slot].clone();
                vector.extend_from_slice(&self.q[i][slot]);
                ProbeFeature {
                    pair_index: i,
                    vector,
                    label,
                }
            })
            .collect()
    }
}

fn capture(
    model: &Model,
    tokenizer: &Tokenizer,
    prompt: &str,
    comps: &[ComponentId],
) -> Result<Vec<Vec<f32>>> {
    let ids = tokenizer.prompt_ids(prompt)?;
    Ok(engine::capture_last_token(model, &ids, comps)?
        .into_iter()
        .map(|r| r.vector)
        .collect())
}

/// Runs every pair once for `p` and once for `q`, capturing `components`.
pub fn capture_pairs(
    model: &Model,
    tokenizer: &Tokenizer,
    pairs: &[PromptPair],
    components: &[ComponentId],
) -> Result<PairActivations> {
    let both = par::try_map(pairs, |i, pair| {
        let run = || -> Result<_> {
            Ok((
                capture(model, tokenizer, &pair.p, components)?,
                capture(model, tokenizer, &pair.q, components)?,
            ))
        };
        run().map_err(Error::at_pair(i))
    })?;
    let (p, q) = both.into_iter().unzip();
    Ok(PairActivations {
        components: components.to_vec(),
        p,
        q,
    })
}

fn labels(pairs: &[PromptPair]) -> Result<Vec<u8>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| p.label().map_err(Error::at_pair(i)))
        .collect()
}

pub fn extract_features(
    model: &Model,
    tokenizer: &Tokenizer,
    pairs: &[PromptPair],
    component: ComponentId,
) -> Result<Vec<ProbeFeature>> {
    component.validate(model.config())?;
    let ys = labels(pairs)?;
    Ok(capture_pairs(model, tokenizer, pairs, &[component])?.features(0, &ys))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentScore {
    #[serde(flatten)]
    pub component: ComponentId,
    pub locate_acc: f64,
    pub probe: Probe,
    pub n_probe: usize,
    pub n_locate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// In model order (layer by layer, heads then MLP).
    pub components: Vec<ComponentScore>,
    pub ranking: Vec<ComponentId>,
    pub hyper: ProbeHyper,
}

impl ProbeReport {
    pub fn score(&self, component: ComponentId) -> Option<&ComponentScore> {
        self.components.iter().find(|s| s.component == component)
    }

    pub fn top(&self, k: usize) -> &[ComponentId] {
        &self.ranking[..k.min(self.ranking.len())]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: ProbeReport = serde_json::from_str(text)?;
        let mut ranked = r.ranking.clone();
        ranked.sort();
        let mut listed: Vec<ComponentId> = r.components.iter().map(|s| s.component).collect();
        listed.sort();
        if ranked != listed || listed.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Schema(
                "report ranking must be a permutation of its components".into(),
            ));
        }
        Ok(r)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Layers by rows, heads then the MLP by columns, 4 decimals.
    pub fn heatmap_csv(&self) -> String {
        let n_layers = self
            .components
            .iter()
            .map(|s| s.component.layer + 1)
            .max()
            .unwrap_or(0);
        let n_heads = self
            .components
            .iter()
            .filter(|s| s.component.layer == 0 && !s.component.is_mlp())
            .count();
        let mut out = String::new();
        let header: Vec<String> = (0..n_heads)
            .map(|h| format!("h{h}"))
            .chain(std::iter::once("mlp".to_string()))
            .collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for layer in 0..n_layers {
            let cells: Vec<String> = (0..n_heads)
                .map(|h| ComponentId::head(layer, h))
                .chain(std::iter::once(ComponentId::mlp(layer)))
                .map(|c| {
                    self.score(c)
                        .map(|s| format!("{:.4}", s.locate_acc))
                        .unwrap_or_default()
                })
                .collect();
            let _ = writeln!(out, "{}", cells.join(","));
        }
        out
    }
}

pub fn export_heatmap(report: &ProbeReport, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, report.heatmap_csv())?;
    Ok(())
}

/// Sorts by accuracy descending, then layer, heads before the MLP, head index.
pub fn rank(scores: &[ComponentScore]) -> Vec<ComponentId> {
    let mut order: Vec<&ComponentScore> = scores.iter().collect();
    order.sort_by(|a, b| {
        b.locate_acc
            .total_cmp(&a.locate_acc)
            .then(a.component.cmp(&b.component))
    });
    order.into_iter().map(|s| s.component).collect()
}

/// Trains and scores one probe per captured component.
pub fn locate_from_activations(
    probe: (&PairActivations, &[u8]),
    locate: (&PairActivations, &[u8]),
    hyper: &ProbeHyper,
) -> Result<ProbeReport> {
    let (probe_acts, probe_ys) = probe;
    let (locate_acts, locate_ys) = locate;
    if probe_acts.components != locate_acts.components {
        return Err(Error::Data(
            "probe and locate captures cover different components".into(),
        ));
    }
    if probe_acts.len() != probe_ys.len() || locate_acts.len() != locate_ys.len() {
        return Err(Error::Size("activation and label counts differ".into()));
    }
    if locate_ys.is_empty() {
        return Err(Error::Size("locate set is empty".into()));
    }
    let comps = &probe_acts.components;
    let components = par::try_map(comps, |slot, &component| {
        let train = probe_acts.features(slot, probe_ys);
        let test = locate_acts.features(slot, locate_ys);
        let probe = train_probe(&train, hyper)
            .map_err(|e| Error::DegenerateClass(format!("{component}: {e}")))?;
        Ok(ComponentScore {
            component,
            locate_acc: probe.accuracy(&test),
            probe,
            n_probe: train.len(),
            n_locate: test.len(),
        })
    })?;
    Ok(ProbeReport {
        ranking: rank(&components),
        components,
        hyper: *hyper,
    })
}

/// Probes every component of the model on `split`.
pub fn locate_components(
    model: &Model,
    tokenizer: &Tokenizer,
    split: &PairSplit,
    hyper: &ProbeHyper,
) -> Result<ProbeReport> {
    let comps = model.config().components();
    let probe_ys = labels(&split.probe)?;
    let locate_ys = labels(&split.locate)?;
    let probe_acts = capture_pairs(model, tokenizer, &split.probe, &comps)?;
    let locate_acts = capture_pairs(model, tokenizer, &split.locate, &comps)?;
    locate_from_activations((&probe_acts, &probe_ys), (&locate_acts, &locate_ys), hyper)
}
