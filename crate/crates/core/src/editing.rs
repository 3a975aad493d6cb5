//! Mass-mean steering biases for the top-ranked components and the edit plans
//! that carry them to the engine.

use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datasets::PromptPair;
use crate::engine::{ComponentId, Injection, InjectionSet, Model};
use crate::error::{Error, Result};
use crate::model_io::Tokenizer;
use crate::par;
use crate::probing::ProbeReport;

pub const DEFAULT_K: usize = 25;
pub const DEFAULT_ALPHA: f32 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    RandomComponents,
    /// Gaussian directions rescaled to the replaced biases' norms.
    RandomDirection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    #[serde(flatten)]
    pub component: ComponentId,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditPlan {
    pub alpha: f32,
    pub k: usize,
    pub provenance: Provenance,
    pub seed: Option<u64>,
    pub entries: Vec<PlanEntry>,
}

impl EditPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Range(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if self.entries.len() != self.k {
            return Err(Error::Schema(format!(
                "plan declares k = {} but has {} entries",
                self.k,
                self.entries.len()
            )));
        }
        let mut seen: Vec<ComponentId> = self.entries.iter().map(|e| e.component).collect();
        seen.sort();
        if let Some(w) = seen.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Schema(format!("{} appears twice in the plan", w[0])));
        }
        if let Some(e) = self
            .entries
            .iter()
            .find(|e| e.bias.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Data(format!(
                "bias for {} is not finite",
                e.component
            )));
        }
        Ok(())
    }

    /// Same entries at a different strength.
    pub fn with_alpha(&self, alpha: f32) -> Result<EditPlan> {
        let plan = EditPlan {
            alpha,
            ..self.clone()
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn to_injections(&self) -> Result<InjectionSet> {
        self.validate()?;
        InjectionSet::new(
            self.entries
                .iter()
                .map(|e| Injection {
                    component: e.component,
                    bias: e.bias.clone(),
                    alpha: self.alpha,
                })
                .collect(),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: EditPlan = serde_json::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Mass-mean biases over the `p` prompts: mean activation over `c = 1` pairs
/// minus the mean over all pairs, one vector per component.
pub fn compute_biases(
    model: &Model,
    tokenizer: &Tokenizer,
    probe_pairs: &[PromptPair],
    components: &[ComponentId],
) -> Result<Vec<Vec<f32>>> {
    for c in components {
        c.validate(model.config())?;
    }
    let labels: Vec<u8> = probe_pairs
        .iter()
        .enumerate()
        .map(|(i, p)| p.label().map_err(Error::at_pair(i)))
        .collect::<Result<_>>()?;
    let n_pos = labels.iter().filter(|&&c| c == 1).count();
    if n_pos == 0 {
        return Err(Error::DegenerateClass(
            "no consistent (c = 1) pairs to take a mean over".into(),
        ));
    }
    let acts = capture_p(model, tokenizer, probe_pairs, components)?;
    let d = model.config().d_model;
    Ok((0..components.len())
        .map(|slot| {
            let mut pos = vec![0.0f64; d];
            let mut all = vec![0.0f64; d];
            for (row, &c) in acts.iter().zip(&labels) {
                for (j, &v) in row[slot].iter().enumerate() {
                    all[j] += f64::from(v);
                    if c == 1 {
                        pos[j] += f64::from(v);
                    }
                }
            }
            let (n_pos, n_all) = (n_pos as f64, labels.len() as f64);
            pos.iter()
                .zip(&all)
                .map(|(p, a)| (p / n_pos - a / n_all) as f32)
                .collect()
        })
        .collect())
}

fn capture_p(
    model: &Model,
    tokenizer: &Tokenizer,
    pairs: &[PromptPair],
    components: &[ComponentId],
) -> Result<Vec<Vec<Vec<f32>>>> {
    par::try_map(pairs, |i, pair| {
        let run = || -> Result<Vec<Vec<f32>>> {
            let ids = tokenizer.prompt_ids(&pair.p)?;
            Ok(crate::engine::capture_last_token(model, &ids, components)?
                .into_iter()
                .map(|r| r.vector)
                .collect())
        };
        run().map_err(Error::at_pair(i))
    })
}

pub fn compute_bias(
    model: &Model,
    tokenizer: &Tokenizer,
    probe_pairs: &[PromptPair],
    component: ComponentId,
) -> Result<Vec<f32>> {
    Ok(compute_biases(model, tokenizer, probe_pairs, &[component])?.remove(0))
}

fn check_k_alpha(report: &ProbeReport, k: usize, alpha: f32) -> Result<()> {
    let total = report.ranking.len();
    if k == 0 || k > total {
        return Err(Error::Range(format!("k must be in 1..={total}, got {k}")));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Range(format!(
            "alpha must be finite and >= 0, got {alpha}"
        )));
    }
    Ok(())
}

fn plan_for(
    model: &Model,
    tokenizer: &Tokenizer,
    probe_pairs: &[PromptPair],
    components: Vec<ComponentId>,
    alpha: f32,
    provenance: Provenance,
    seed: Option<u64>,
) -> Result<EditPlan> {
    let biases = compute_biases(model, tokenizer, probe_pairs, &components)?;
    Ok(EditPlan {
        alpha,
        k: components.len(),
        provenance,
        seed,
        entries: components
            .into_iter()
            .zip(biases)
            .map(|(component, bias)| PlanEntry { component, bias })
            .collect(),
    })
}

/// The top-`k` components of `report` with their mass-mean biases.
pub fn build_plan(
    model: &Model,
    tokenizer: &Tokenizer,
    report: &ProbeReport,
    probe_pairs: &[PromptPair],
    k: usize,
    alpha: f32,
) -> Result<EditPlan> {
    check_k_alpha(report, k, alpha)?;
    let comps = report.top(k).to_vec();
    plan_for(
        model,
        tokenizer,
        probe_pairs,
        comps,
        alpha,
        Provenance::Real,
        None,
    )
}

/// `k` components drawn uniformly without replacement, with real biases.
pub fn build_random_components_plan(
    model: &Model,
    tokenizer: &Tokenizer,
    report: &ProbeReport,
    probe_pairs: &[PromptPair],
    k: usize,
    alpha: f32,
    seed: u64,
) -> Result<EditPlan> {
    check_k_alpha(report, k, alpha)?;
    let mut pool = report.ranking.clone();
    pool.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut comps: Vec<ComponentId> = index::sample(&mut rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    comps.sort();
    plan_for(
        model,
        tokenizer,
        probe_pairs,
        comps,
        alpha,
        Provenance::RandomComponents,
        Some(seed),
    )
}

/// Replaces each bias of a real plan by a Gaussian vector of the same norm.
pub fn build_random_direction_plan(plan: &EditPlan, seed: u64) -> Result<EditPlan> {
    if plan.provenance != Provenance::Real {
        return Err(Error::Data(format!(
            "random directions replace a real plan, got {:?}",
            plan.provenance
        )));
    }
    plan.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = plan
        .entries
        .iter()
        .map(|e| {
            let target = e
                .bias
                .iter()
                .map(|&v| f64::from(v).powi(2))
                .sum::<f64>()
                .sqrt();
            let raw: Vec<f64> = (0..e.bias.len())
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            let bias = if target == 0.0 || norm == 0.0 {
                vec![0.0; e.bias.len()]
            } else {
                raw.iter().map(|v| (v * target / norm) as f32).collect()
            };
            PlanEntry {
                component: e.component,
                bias,
            }
        })
        .collect();
    Ok(EditPlan {
        alpha: plan.alpha,
        k: plan.k,
        provenance: Provenance::RandomDirection,
        seed: Some(seed),
        entries,
    })
}

pub fn to_injections(plan: &EditPlan) -> Result<InjectionSet> {
    plan.to_injections()
}
