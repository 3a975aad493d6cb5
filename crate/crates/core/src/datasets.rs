//! Paraphrase pairs: consistency labeling, the probe/locate split, and the
//! instruction-benchmark construction (all-pairs training set, class-balanced
//! sampling, hard-negative test selection).

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{self, InjectionSet, Model};
use crate::error::{Error, Result};
use crate::model_io::Tokenizer;
use crate::par;

/// Default generation budget for single-word answers.
pub const DEFAULT_MAX_NEW_TOKENS: usize = 8;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairMeta {
    pub instr_i: Option<usize>,
    pub instr_j: Option<usize>,
}

/// A prompt `p`, its paraphrase `q`, and the consistency label `c`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub p: String,
    pub q: String,
    pub c: Option<u8>,
    pub gold: Option<String>,
    #[serde(default)]
    pub meta: PairMeta,
}

impl PromptPair {
    pub fn new(p: impl Into<String>, q: impl Into<String>) -> Self {
        PromptPair {
            p: p.into(),
            q: q.into(),
            c: None,
            gold: None,
            meta: PairMeta::default(),
        }
    }

    pub fn labeled(mut self, c: u8) -> Self {
        self.c = Some(c);
        self
    }

    fn validate(&self) -> Result<()> {
        if self.p == self.q {
            return Err(Error::Data(format!(
                "p and q are the same string: {:?}",
                self.p
            )));
        }
        if let Some(c) = self.c {
            if c > 1 {
                return Err(Error::Data(format!("label c must be 0 or 1, got {c}")));
            }
        }
        Ok(())
    }

    pub fn label(&self) -> Result<u8> {
        self.c
            .ok_or_else(|| Error::Data("pair is not labeled".into()))
    }
}

/// Probe and locate sets in a 4:1 ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSplit {
    pub probe: Vec<PromptPair>,
    pub locate: Vec<PromptPair>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub content: String,
    pub gold: String,
}

/// Synonymous instructions (training ones first) and task instances.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSpec {
    pub instructions: Vec<String>,
    pub n_train: usize,
    pub instances: Vec<Instance>,
    pub test_instances: Vec<Instance>,
}

#[derive(Serialize, Deserialize)]
struct BenchmarkJson {
    instructions: Vec<String>,
    instances: Vec<Instance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    test_instances: Option<Vec<Instance>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n_train: Option<usize>,
}

pub const BENCH_INSTRUCTIONS: usize = 30;
pub const BENCH_TRAIN_INSTRUCTIONS: usize = 24;

impl BenchmarkSpec {
    /// The standard layout: 30 instructions, the first 24 for training.
    pub fn new(
        instructions: Vec<String>,
        instances: Vec<Instance>,
        test_instances: Vec<Instance>,
    ) -> Result<Self> {
        if instructions.len() != BENCH_INSTRUCTIONS {
            return Err(Error::Size(format!(
                "benchmark needs {BENCH_INSTRUCTIONS} instructions, got {}",
                instructions.len()
            )));
        }
        Self::with_split(
            instructions,
            BENCH_TRAIN_INSTRUCTIONS,
            instances,
            test_instances,
        )
    }

    /// Any instruction count with an explicit training prefix length.
    pub fn with_split(
        instructions: Vec<String>,
        n_train: usize,
        instances: Vec<Instance>,
        test_instances: Vec<Instance>,
    ) -> Result<Self> {
        if n_train == 0 || n_train > instructions.len() {
            return Err(Error::Size(format!(
                "cannot take {n_train} training instructions out of {}",
                instructions.len()
            )));
        }
        Ok(BenchmarkSpec {
            instructions,
            n_train,
            instances,
            test_instances,
        })
    }

    pub fn train_instructions(&self) -> &[String] {
        &self.instructions[..self.n_train]
    }

    pub fn test_instructions(&self) -> &[String] {
        &self.instructions[self.n_train..]
    }

    /// Parses the benchmark JSON. Without `test_instances`, the last fifth of
    /// `instances` becomes the test set.
    pub fn from_json(text: &str) -> Result<Self> {
        let j: BenchmarkJson = serde_json::from_str(text)?;
        let (instances, test_instances) = match j.test_instances {
            Some(t) => (j.instances, t),
            None => {
                let mut all = j.instances;
                let n_test = all.len() / 5;
                let test = all.split_off(all.len() - n_test);
                (all, test)
            }
        };
        match j.n_train {
            Some(n) => Self::with_split(j.instructions, n, instances, test_instances),
            None => Self::new(j.instructions, instances, test_instances),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&BenchmarkJson {
            instructions: self.instructions.clone(),
            instances: self.instances.clone(),
            test_instances: Some(self.test_instances.clone()),
            n_train: (self.instructions.len() != BENCH_INSTRUCTIONS
                || self.n_train != BENCH_TRAIN_INSTRUCTIONS)
                .then_some(self.n_train),
        })?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Case-folds, trims, and strips trailing `.`, `!`, `?`.
pub fn normalize_answer(s: &str) -> String {
    s.trim()
        .to_lowercase()
        .trim_end_matches(['.', '!', '?'])
        .trim()
        .to_string()
}

/// The prompt for one instruction applied to one instance.
pub fn compose_prompt(instruction: &str, content: &str) -> String {
    format!("{instruction} {content}")
}

/// Greedy answer text for one prompt.
pub fn predict(
    model: &Model,
    tokenizer: &Tokenizer,
    prompt: &str,
    injections: &InjectionSet,
    max_new_tokens: usize,
) -> Result<String> {
    let ids = tokenizer.prompt_ids(prompt)?;
    let out = engine::generate_greedy(
        model,
        &ids,
        injections,
        max_new_tokens,
        &tokenizer.stop_ids(),
    )?;
    tokenizer.decode(&out)
}

#[derive(Debug, Clone, Copy)]
pub struct LabelOptions {
    pub max_new_tokens: usize,
    pub normalizer: fn(&str) -> String,
}

impl Default for LabelOptions {
    fn default() -> Self {
        LabelOptions {
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            normalizer: normalize_answer,
        }
    }
}

/// Sets `c = 1` iff the normalized greedy answers to `p` and `q` match.
pub fn label_consistency(
    model: &Model,
    tokenizer: &Tokenizer,
    pairs: &[PromptPair],
    options: &LabelOptions,
) -> Result<Vec<PromptPair>> {
    let empty = InjectionSet::empty();
    par::try_map(pairs, |i, pair| {
        let answer = |prompt: &str| -> Result<String> {
            let raw = predict(model, tokenizer, prompt, &empty, options.max_new_tokens)?;
            Ok((options.normalizer)(&raw))
        };
        let run = || -> Result<PromptPair> {
            pair.validate()?;
            let same = answer(&pair.p)? == answer(&pair.q)?;
            let mut out = pair.clone();
            out.c = Some(u8::from(same));
            Ok(out)
        };
        run().map_err(Error::at_pair(i))
    })
}

/// Judge-file entry: an externally decided label for the pair at `index`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeLabel {
    pub index: usize,
    pub c: u8,
}

/// Overwrites labels with judge decisions.
pub fn merge_judge_labels(pairs: &mut [PromptPair], judge: &[JudgeLabel]) -> Result<()> {
    for j in judge {
        if j.c > 1 {
            return Err(Error::Data(format!(
                "judge label for pair {} must be 0 or 1",
                j.index
            )));
        }
        let n = pairs.len();
        let pair = pairs
            .get_mut(j.index)
            .ok_or_else(|| Error::Range(format!("judge index {} but only {n} pairs", j.index)))?;
        pair.c = Some(j.c);
    }
    Ok(())
}

/// Seeded shuffle, first 80% to the probe set, the rest to the locate set.
pub fn split_pairs(pairs: &[PromptPair], seed: u64) -> Result<PairSplit> {
    let n = pairs.len();
    if n < 5 {
        return Err(Error::Size(format!(
            "need at least 5 pairs to split, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_probe = (4 * n + 2) / 5;
    let pick = |idx: &[usize]| idx.iter().map(|&i| pairs[i].clone()).collect();
    Ok(PairSplit {
        probe: pick(&order[..n_probe]),
        locate: pick(&order[n_probe..]),
        seed,
    })
}

/// All `C(n_train, 2)` pairs of training instructions applied to `instance`.
pub fn enumerate_training_pairs(spec: &BenchmarkSpec, instance: &Instance) -> Vec<PromptPair> {
    let train = spec.train_instructions();
    let mut out = Vec::with_capacity(train.len() * train.len().saturating_sub(1) / 2);
    for i in 0..train.len() {
        for j in i + 1..train.len() {
            out.push(PromptPair {
                p: compose_prompt(&train[i], &instance.content),
                q: compose_prompt(&train[j], &instance.content),
                c: None,
                gold: Some(instance.gold.clone()),
                meta: PairMeta {
                    instr_i: Some(i),
                    instr_j: Some(j),
                },
            });
        }
    }
    out
}

/// [`enumerate_training_pairs`] subsampled to at most `cap` pairs (seeded),
/// keeping enumeration order.
pub fn enumerate_training_pairs_capped(
    spec: &BenchmarkSpec,
    instance: &Instance,
    cap: Option<usize>,
    seed: u64,
) -> Vec<PromptPair> {
    let all = enumerate_training_pairs(spec, instance);
    match cap {
        Some(cap) if cap < all.len() => {
            let mut keep =
                index::sample(&mut ChaCha8Rng::seed_from_u64(seed), all.len(), cap).into_vec();
            keep.sort_unstable();
            keep.into_iter().map(|i| all[i].clone()).collect()
        }
        _ => all,
    }
}

/// Exactly `per_class` pairs of each label, sampled without replacement.
/// The result keeps input order.
pub fn balance_sample(
    pairs: &[PromptPair],
    per_class: usize,
    seed: u64,
) -> Result<Vec<PromptPair>> {
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, p) in pairs.iter().enumerate() {
        let c = p.label().map_err(Error::at_pair(i))?;
        by_class[usize::from(c == 1)].push(i);
    }
    let (c0, c1) = (by_class[0].len(), by_class[1].len());
    if c0 < per_class || c1 < per_class {
        return Err(Error::Sampling { per_class, c0, c1 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(2 * per_class);
    for class in &by_class {
        keep.extend(
            index::sample(&mut rng, class.len(), per_class)
                .into_iter()
                .map(|k| class[k]),
        );
    }
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| pairs[i].clone()).collect())
}

/// Groups `predictions` by value (in order of first appearance) and picks one
/// seeded-random member per group. Returns indices into `predictions`.
pub fn select_test_prompts(predictions: &[String], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    for (i, p) in predictions.iter().enumerate() {
        let g = *slot.entry(p.as_str()).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }
    groups
        .iter()
        .map(|g| *g.choose(rng).expect("groups are non-empty"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestItem {
    pub prompt: String,
    pub gold: String,
    /// Index into the benchmark's instruction list.
    pub instr: usize,
    pub instance: usize,
}

/// For each test instance, runs every test instruction and keeps one prompt per
/// distinct normalized prediction.
pub fn build_test_set(
    model: &Model,
    tokenizer: &Tokenizer,
    spec: &BenchmarkSpec,
    seed: u64,
    options: &LabelOptions,
) -> Result<Vec<TestItem>> {
    if spec.test_instances.is_empty() {
        return Err(Error::Size("benchmark has no test instances".into()));
    }
    if spec.test_instructions().is_empty() {
        return Err(Error::Size("benchmark has no test instructions".into()));
    }
    let empty = InjectionSet::empty();
    let per_instance = par::try_map(&spec.test_instances, |k, inst| {
        let prompts: Vec<String> = spec
            .test_instructions()
            .iter()
            .map(|ins| compose_prompt(ins, &inst.content))
            .collect();
        let predictions = prompts
            .iter()
            .map(|p| {
                predict(model, tokenizer, p, &empty, options.max_new_tokens)
                    .map(|raw| (options.normalizer)(&raw))
            })
            .collect::<Result<Vec<_>>>()
            .map_err(Error::at_pair(k))?;
        let mut rng = ChaCha8Rng::seed_from_u64(par::derive_seed(seed, &[k as u64]));
        Ok(select_test_prompts(&predictions, &mut rng)
            .into_iter()
            .map(|i| TestItem {
                prompt: prompts[i].clone(),
                gold: inst.gold.clone(),
                instr: spec.n_train + i,
                instance: k,
            })
            .collect::<Vec<_>>())
    })?;
    Ok(per_instance.into_iter().flatten().collect())
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

/// Reads and validates a pairs JSONL file.
pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<PromptPair>> {
    let pairs: Vec<PromptPair> = read_jsonl(path)?;
    for (i, p) in pairs.iter().enumerate() {
        p.validate().map_err(Error::at_pair(i))?;
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(n: usize) -> Vec<PromptPair> {
        (0..n)
            .map(|i| PromptPair::new(format!("p{i}"), format!("q{i}")).labeled((i % 2) as u8))
            .collect()
    }

    #[test]
    fn normalizer_rule() {
        assert_eq!(normalize_answer("Positive."), normalize_answer("positive"));
        assert_eq!(normalize_answer("  Yes?! "), "yes");
        assert_ne!(normalize_answer("no"), normalize_answer("yes"));
    }

    #[test]
    fn split_ratios() {
        let s = split_pairs(&pairs(500), 1).unwrap();
        assert_eq!((s.probe.len(), s.locate.len()), (400, 100));
        let s = split_pairs(&pairs(5), 1).unwrap();
        assert_eq!((s.probe.len(), s.locate.len()), (4, 1));
        assert!(matches!(split_pairs(&pairs(4), 1), Err(Error::Size(_))));
    }

    #[test]
    fn split_is_seeded_partition() {
        let all = pairs(37);
        let a = split_pairs(&all, 9).unwrap();
        assert_eq!(a, split_pairs(&all, 9).unwrap());
        let mut seen: Vec<String> = a
            .probe
            .iter()
            .chain(&a.locate)
            .map(|p| p.p.clone())
            .collect();
        seen.sort();
        let mut want: Vec<String> = all.iter().map(|p| p.p.clone()).collect();
        want.sort();
        assert_eq!(seen, want);
        for n in 5..60 {
            let s = split_pairs(&pairs(n), 0).unwrap();
            let exact = 4.0 * n as f64 / 5.0;
            assert!((s.probe.len() as f64 - exact).abs() <= 1.0);
        }
    }

    fn spec(n: usize, n_train: usize) -> BenchmarkSpec {
        let instr = (0..n).map(|i| format!("instruction {i}")).collect();
        let inst = vec![Instance {
            content: "x".into(),
            gold: "y".into(),
        }];
        BenchmarkSpec::with_split(instr, n_train, inst.clone(), inst).unwrap()
    }

    #[test]
    fn enumeration_counts() {
        let s = spec(30, 24);
        let p = enumerate_training_pairs(&s, &s.instances[0]);
        assert_eq!(p.len(), 276);
        assert!(p.iter().all(|x| x.meta.instr_i < x.meta.instr_j));
        let s2 = spec(2, 2);
        assert_eq!(enumerate_training_pairs(&s2, &s2.instances[0]).len(), 1);
        let capped = enumerate_training_pairs_capped(&s, &s.instances[0], Some(10), 3);
        assert_eq!(capped.len(), 10);
        assert_eq!(
            capped,
            enumerate_training_pairs_capped(&s, &s.instances[0], Some(10), 3)
        );
    }

    #[test]
    fn benchmark_json_requires_thirty() {
        let s = spec(30, 24);
        let back = BenchmarkSpec::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(back, s);
        let bad = r#"{"instructions":["a","b"],"instances":[]}"#;
        assert!(matches!(BenchmarkSpec::from_json(bad), Err(Error::Size(_))));
        let small = r#"{"instructions":["a","b","c"],"n_train":2,"instances":[
            {"content":"1","gold":"x"},{"content":"2","gold":"x"},{"content":"3","gold":"x"},
            {"content":"4","gold":"x"},{"content":"5","gold":"x"}]}"#;
        let s = BenchmarkSpec::from_json(small).unwrap();
        assert_eq!((s.instances.len(), s.test_instances.len()), (4, 1));
    }

    #[test]
    fn balance_sampling() {
        let all = pairs(600);
        let b = balance_sample(&all, 250, 5).unwrap();
        assert_eq!(b.len(), 500);
        assert_eq!(b.iter().filter(|p| p.c == Some(1)).count(), 250);
        let tiny = vec![pairs(2)[0].clone(), pairs(2)[1].clone()];
        assert_eq!(balance_sample(&tiny, 1, 0).unwrap(), tiny);
        let skewed: Vec<PromptPair> = (0..20)
            .map(|i| PromptPair::new(format!("a{i}"), "b").labeled(u8::from(i >= 5)))
            .collect();
        match balance_sample(&skewed, 10, 0) {
            Err(Error::Sampling { c0, c1, .. }) => assert_eq!((c0, c1), (5, 15)),
            other => panic!("expected sampling error, got {other:?}"),
        }
    }

    #[test]
    fn test_prompt_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let same = vec!["a".to_string(); 6];
        assert_eq!(select_test_prompts(&same, &mut rng).len(), 1);
        let three: Vec<String> = ["a", "a", "b", "b", "b", "c"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let picked = select_test_prompts(&three, &mut rng);
        let got: Vec<&str> = picked.iter().map(|&i| three[i].as_str()).collect();
        assert_eq!(got, vec!["a", "b", "c"]);
        let six: Vec<String> = (0..6).map(|i| i.to_string()).collect();
        assert_eq!(select_test_prompts(&six, &mut rng), vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn judge_merge() {
        let mut ps: Vec<PromptPair> = (0..3)
            .map(|i| PromptPair::new(format!("a{i}"), "b"))
            .collect();
        merge_judge_labels(&mut ps, &[JudgeLabel { index: 2, c: 1 }]).unwrap();
        assert_eq!(ps[2].c, Some(1));
        assert!(merge_judge_labels(&mut ps, &[JudgeLabel { index: 7, c: 1 }]).is_err());
    }

    #[test]
    fn pairs_jsonl_shape() {
        let mut p = PromptPair::new("a", "b");
        p.meta = PairMeta {
            instr_i: Some(0),
            instr_j: Some(3),
        };
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(
            s,
            r#"{"p":"a","q":"b","c":null,"gold":null,"meta":{"instr_i":0,"instr_j":3}}"#
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");
        write_jsonl(&path, &[p.clone()]).unwrap();
        assert_eq!(read_pairs(&path).unwrap(), vec![p]);
        std::fs::write(
            &path,
            "{\"p\":\"a\",\"q\":\"a\",\"c\":null,\"gold\":null}\n",
        )
        .unwrap();
        assert!(read_pairs(&path).is_err());
    }
}
