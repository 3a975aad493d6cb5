//! Accuracy and its spread across instruction templates, answer similarity
//! within paraphrase groups, and the K / alpha / ablation experiment drivers.

use serde::{Deserialize, Serialize};

use crate::datasets::{
    compose_prompt, normalize_answer, Instance, PromptPair, DEFAULT_MAX_NEW_TOKENS,
};
use crate::editing::{
    build_plan, build_random_components_plan, build_random_direction_plan, EditPlan,
};
use crate::engine::{self, InjectionSet, Model};
use crate::error::{Error, Result};
use crate::model_io::Tokenizer;
use crate::par;
use crate::probing::ProbeReport;

pub const DEFAULT_KS: [usize; 6] = [5, 15, 25, 35, 45, 55];
pub const DEFAULT_ALPHAS: [f32; 5] = [1.0, 3.0, 5.0, 7.0, 9.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateEvalResult {
    pub per_template_acc: Vec<f64>,
    pub mean_acc: f64,
    /// Population standard deviation of `per_template_acc`.
    pub std_acc: f64,
    /// Always `"population"`; kept in the output so readers know the divisor.
    pub std_kind: String,
    pub n_templates: usize,
    pub n_instances: usize,
}

impl TemplateEvalResult {
    pub fn from_accuracies(per_template_acc: Vec<f64>, n_instances: usize) -> Result<Self> {
        if per_template_acc.is_empty() {
            return Err(Error::Size("no template accuracies".into()));
        }
        let n = per_template_acc.len() as f64;
        let mean = per_template_acc.iter().sum::<f64>() / n;
        let var = per_template_acc
            .iter()
            .map(|a| (a - mean).powi(2))
            .sum::<f64>()
            / n;
        Ok(TemplateEvalResult {
            n_templates: per_template_acc.len(),
            per_template_acc,
            mean_acc: mean,
            std_acc: var.sqrt(),
            std_kind: "population".into(),
            n_instances,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityResult {
    pub mean_pairwise_cos: f64,
    pub accuracy: f64,
    pub n_paraphrase_groups: usize,
}

/// Paraphrases of one question sharing a gold answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParaphraseGroup {
    pub prompts: Vec<String>,
    pub gold: String,
}

/// Inputs shared by every template evaluation in a sweep.
#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub templates: Vec<String>,
    pub instances: Vec<Instance>,
    pub max_new_tokens: usize,
}

impl EvalArgs {
    pub fn new(templates: Vec<String>, instances: Vec<Instance>) -> Self {
        EvalArgs {
            templates,
            instances,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        }
    }
}

fn injections(plan: Option<&EditPlan>) -> Result<InjectionSet> {
    plan.map_or_else(|| Ok(InjectionSet::empty()), EditPlan::to_injections)
}

fn greedy_text(
    model: &Model,
    tokenizer: &Tokenizer,
    prompt: &str,
    inj: &InjectionSet,
    max_new_tokens: usize,
) -> Result<String> {
    let ids = tokenizer.prompt_ids(prompt)?;
    let out = engine::generate_greedy(model, &ids, inj, max_new_tokens, &tokenizer.stop_ids())?;
    tokenizer.decode(&out)
}

/// Greedy accuracy of every template over every instance, with an optional
/// edit applied.
pub fn eval_templates(
    model: &Model,
    tokenizer: &Tokenizer,
    plan: Option<&EditPlan>,
    args: &EvalArgs,
) -> Result<TemplateEvalResult> {
    let (nt, ni) = (args.templates.len(), args.instances.len());
    if nt == 0 || ni == 0 {
        return Err(Error::Size(format!(
            "need at least one template and one instance, got {nt} and {ni}"
        )));
    }
    let inj = injections(plan)?;
    let hits = par::map_range(nt * ni, |cell| {
        let (t, i) = (cell / ni, cell % ni);
        let inst = &args.instances[i];
        let prompt = compose_prompt(&args.templates[t], &inst.content);
        greedy_text(model, tokenizer, &prompt, &inj, args.max_new_tokens)
            .map(|pred| normalize_answer(&pred) == normalize_answer(&inst.gold))
    });
    let mut per_template = vec![0usize; nt];
    for (cell, hit) in hits.into_iter().enumerate() {
        if hit.map_err(Error::at_pair(cell))? {
            per_template[cell / ni] += 1;
        }
    }
    TemplateEvalResult::from_accuracies(
        per_template.iter().map(|&h| h as f64 / ni as f64).collect(),
        ni,
    )
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Mean cosine over all `C(n, 2)` pairs.
pub fn mean_pairwise_cosine(embeddings: &[Vec<f32>]) -> Result<f64> {
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::Size(format!("need at least 2 embeddings, got {n}")));
    }
    let e: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|v| v.iter().map(|&x| f64::from(x)).collect())
        .collect();
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += cosine(&e[i], &e[j]);
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

/// Mean of the final residual states over the decoding steps of one answer.
pub fn answer_embedding(states: &[Vec<f32>]) -> Result<Vec<f32>> {
    let Some(first) = states.first() else {
        return Err(Error::Size("answer has no decoding steps".into()));
    };
    let mut acc = vec![0.0f64; first.len()];
    for s in states {
        for (a, &v) in acc.iter_mut().zip(s) {
            *a += f64::from(v);
        }
    }
    Ok(acc
        .iter()
        .map(|a| (a / states.len() as f64) as f32)
        .collect())
}

pub fn eval_similarity(
    model: &Model,
    tokenizer: &Tokenizer,
    plan: Option<&EditPlan>,
    groups: &[ParaphraseGroup],
    max_new_tokens: usize,
) -> Result<SimilarityResult> {
    if groups.is_empty() {
        return Err(Error::Size("no paraphrase groups".into()));
    }
    if let Some((i, g)) = groups.iter().enumerate().find(|(_, g)| g.prompts.len() < 2) {
        return Err(Error::Size(format!(
            "group {i} has {} paraphrases, need at least 2",
            g.prompts.len()
        )));
    }
    if max_new_tokens == 0 {
        return Err(Error::Size("max_new_tokens must be at least 1".into()));
    }
    let inj = injections(plan)?;
    let per_group = par::try_map(groups, |gi, g| {
        let run = || -> Result<(f64, usize)> {
            let gold = normalize_answer(&g.gold);
            let mut embeddings = Vec::with_capacity(g.prompts.len());
            let mut hits = 0;
            for prompt in &g.prompts {
                let ids = tokenizer.prompt_ids(prompt)?;
                let gen = engine::generate_with_states(
                    model,
                    &ids,
                    &inj,
                    max_new_tokens,
                    &tokenizer.stop_ids(),
                )?;
                if normalize_answer(&tokenizer.decode(&gen.tokens)?).contains(&gold) {
                    hits += 1;
                }
                embeddings.push(answer_embedding(&gen.states)?);
            }
            Ok((mean_pairwise_cosine(&embeddings)?, hits))
        };
        run().map_err(Error::at_pair(gi))
    })?;
    let n_answers: usize = groups.iter().map(|g| g.prompts.len()).sum();
    Ok(SimilarityResult {
        mean_pairwise_cos: per_group.iter().map(|g| g.0).sum::<f64>() / groups.len() as f64,
        accuracy: per_group.iter().map(|g| g.1).sum::<usize>() as f64 / n_answers as f64,
        n_paraphrase_groups: groups.len(),
    })
}

/// One evaluation per `k`, rows ascending by `k`.
pub fn sweep_k(
    model: &Model,
    tokenizer: &Tokenizer,
    report: &ProbeReport,
    probe_pairs: &[PromptPair],
    ks: &[usize],
    alpha: f32,
    args: &EvalArgs,
) -> Result<Vec<(usize, TemplateEvalResult)>> {
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let Some(&k_max) = ks.last() else {
        return Ok(Vec::new());
    };
    // biases depend only on the component, so the top-k plan is a prefix of
    // the top-k_max plan
    if ks[0] == 0 {
        return Err(Error::Range("k must be at least 1".into()));
    }
    let full = build_plan(model, tokenizer, report, probe_pairs, k_max, alpha)?;
    ks.iter()
        .map(|&k| {
            let plan = EditPlan {
                k,
                entries: full.entries[..k].to_vec(),
                ..full.clone()
            };
            Ok((k, eval_templates(model, tokenizer, Some(&plan), args)?))
        })
        .collect()
}

/// One evaluation per alpha over a single set of biases, rows ascending by alpha.
pub fn sweep_alpha(
    model: &Model,
    tokenizer: &Tokenizer,
    report: &ProbeReport,
    probe_pairs: &[PromptPair],
    k: usize,
    alphas: &[f32],
    args: &EvalArgs,
) -> Result<Vec<(f32, TemplateEvalResult)>> {
    let mut alphas = alphas.to_vec();
    if let Some(bad) = alphas.iter().find(|a| !(**a >= 0.0 && a.is_finite())) {
        return Err(Error::Range(format!(
            "alpha must be finite and >= 0, got {bad}"
        )));
    }
    alphas.sort_by(f32::total_cmp);
    alphas.dedup();
    let base = build_plan(model, tokenizer, report, probe_pairs, k, 0.0)?;
    alphas
        .iter()
        .map(|&a| {
            Ok((
                a,
                eval_templates(model, tokenizer, Some(&base.with_alpha(a)?), args)?,
            ))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub result: TemplateEvalResult,
}

/// Baseline, real edit, random components and random directions.
#[allow(clippy::too_many_arguments)]
pub fn run_ablations(
    model: &Model,
    tokenizer: &Tokenizer,
    report: &ProbeReport,
    probe_pairs: &[PromptPair],
    k: usize,
    alpha: f32,
    seed: u64,
    args: &EvalArgs,
) -> Result<Vec<AblationRow>> {
    let real = build_plan(model, tokenizer, report, probe_pairs, k, alpha)?;
    let random_components = build_random_components_plan(
        model,
        tokenizer,
        report,
        probe_pairs,
        k,
        alpha,
        par::derive_seed(seed, &[1]),
    )?;
    let random_direction = build_random_direction_plan(&real, par::derive_seed(seed, &[2]))?;
    let settings: [(&str, Option<&EditPlan>); 4] = [
        ("baseline", None),
        ("real", Some(&real)),
        ("random_components", Some(&random_components)),
        ("random_direction", Some(&random_direction)),
    ];
    settings
        .into_iter()
        .map(|(name, plan)| {
            Ok(AblationRow {
                setting: name.to_string(),
                result: eval_templates(model, tokenizer, plan, args)?,
            })
        })
        .collect()
}

/// CSV with a header row; per-template accuracies are `;`-separated.
pub fn results_csv<K: std::fmt::Display>(key: &str, rows: &[(K, TemplateEvalResult)]) -> String {
    let mut out = format!("{key},mean_acc,std_acc,n_templates,n_instances,per_template_acc\n");
    for (k, r) in rows {
        let per: Vec<String> = r.per_template_acc.iter().map(|a| a.to_string()).collect();
        out.push_str(&format!(
            "{k},{},{},{},{},{}\n",
            r.mean_acc,
            r.std_acc,
            r.n_templates,
            r.n_instances,
            per.join(";")
        ));
    }
    out
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let pairs: Vec<(&str, TemplateEvalResult)> = rows
        .iter()
        .map(|r| (r.setting.as_str(), r.result.clone()))
        .collect();
    results_csv("setting", &pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_std() {
        let r = TemplateEvalResult::from_accuracies(vec![1.0, 0.5], 2).unwrap();
        assert_eq!((r.mean_acc, r.std_acc), (0.75, 0.25));
        let r = TemplateEvalResult::from_accuracies(vec![0.3], 10).unwrap();
        assert_eq!(r.std_acc, 0.0);
    }

    #[test]
    fn cosine_fixtures() {
        let e = vec![1.0f32, 2.0, -0.5];
        let neg: Vec<f32> = e.iter().map(|x| -x).collect();
        let m = mean_pairwise_cosine(&[e.clone(), e.clone(), neg]).unwrap();
        assert!((m + 1.0 / 3.0).abs() < 1e-6);
        let same = mean_pairwise_cosine(&[e.clone(), e.clone()]).unwrap();
        assert!((same - 1.0).abs() < 1e-6);
        let orth = mean_pairwise_cosine(&[vec![1.0, 0.0], vec![0.0, 3.0]]).unwrap();
        assert_eq!(orth, 0.0);
        assert!(mean_pairwise_cosine(&[e]).is_err());
    }

    #[test]
    fn embedding_is_step_mean() {
        let e = answer_embedding(&[vec![1.0, 0.0], vec![3.0, 2.0]]).unwrap();
        assert_eq!(e, vec![2.0, 1.0]);
        assert!(answer_embedding(&[]).is_err());
    }

    #[test]
    fn csv_layout() {
        let r = TemplateEvalResult::from_accuracies(vec![1.0, 0.5], 2).unwrap();
        assert_eq!(
            results_csv("k", &[(5usize, r)]),
            "k,mean_acc,std_acc,n_templates,n_instances,per_template_acc\n5,0.75,0.25,2,2,1;0.5\n"
        );
    }
}
