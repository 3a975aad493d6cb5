//! A synthetic model with a known consistency mechanism.
//!
//! Every prompt built by [`PlantedTask`] is a template followed by content. A
//! template starts with a slot character, either the marker or the neutral
//! token, and continues with filler characters. Content ends with a trigger.
//! The final-layer MLP maps each trigger to its answer. Each planted head
//! attends from the last position to the slot and writes `+s` (marker) or `-s`
//! (neutral) along a reserved signal direction. The unembedding reads that
//! direction so that a marked template flips the answer to a distractor.
//!
//! Reserved residual coordinates hold the slot, filler and signal features.
//! Non-planted components neither read nor write them, and fillers, marker and
//! neutral tokens have no other features. So those components see the same
//! input for a marked and a clean template, and their activations carry no
//! label information.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::random::random_model;
use super::tokenizer::{BYTE_BOS, BYTE_EOS, BYTE_VOCAB};
use crate::datasets::{compose_prompt, BenchmarkSpec, Instance, PairMeta, PromptPair};
use crate::engine::{
    self, ComponentId, InjectionSet, MlpKind, Model, ModelConfig, NormKind, PosKind,
};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

const CONST: usize = 0;
const MARK: usize = 1;
const NEUT: usize = 2;
const FILL: usize = 3;
const SIGNAL: usize = 4;
const STOP: usize = 5;
/// Coordinates `0..=SIGNAL` are invisible to non-planted components.
const HIDDEN: usize = SIGNAL + 1;
const MIN_FREE_DIMS: usize = 4;

/// Target pre-softmax score of a planted head on the slot.
const SLOT_SCORE: f32 = 40.0;
const MLP_IN: f32 = 1.0;
const MLP_OUT: f32 = 0.4;
const LOGIT_ANSWER: f32 = 4.0;
const LOGIT_DISTRACTOR: f32 = 3.0;
const LOGIT_STOP: f32 = 40.0;
const MIN_READOUT: f32 = 0.2;

const FILLER_PUNCT: &[u8] = b" ,.:;'-!?";

/// Filler-only instruction phrases. All are distinct.
const PHRASES: [&str; 30] = [
    "answer the question:",
    "give the answer:",
    "respond with one word:",
    "what is the output?",
    "reply briefly:",
    "say the result:",
    "tell me the answer:",
    "produce the label:",
    "write the response:",
    "return one token:",
    "state the outcome:",
    "name the answer:",
    "output the value:",
    "please respond:",
    "give a short reply:",
    "what comes next?",
    "complete the task:",
    "report the result:",
    "provide the answer:",
    "answer briefly:",
    "decide and answer:",
    "read, then reply:",
    "one word, please:",
    "what's the answer?",
    "solve it:",
    "give the label:",
    "find the output:",
    "answer now:",
    "reply with the result:",
    "the answer is:",
];

/// One planted association: `component` carries the consistency signal and the
/// model maps `trigger` to `answer`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlantedHead {
    pub component: ComponentId,
    pub trigger: u32,
    pub answer: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlantOptions {
    pub marker: u8,
    pub neutral: u8,
    pub distractor: u8,
    pub max_seq_len: usize,
}

impl Default for PlantOptions {
    fn default() -> Self {
        PlantOptions {
            marker: b'#',
            neutral: b'_',
            distractor: b'Z',
            max_seq_len: 64,
        }
    }
}

/// Lowercase letters, space and light punctuation.
pub fn is_filler(byte: u8) -> bool {
    byte.is_ascii_lowercase() || FILLER_PUNCT.contains(&byte)
}

fn planted_config(
    n_layers: usize,
    n_heads: usize,
    d_model: usize,
    opts: &PlantOptions,
) -> ModelConfig {
    let mut cfg = ModelConfig::new(n_layers, n_heads, d_model, BYTE_VOCAB);
    cfg.norm_kind = NormKind::RmsNorm;
    cfg.mlp_kind = MlpKind::Gelu;
    cfg.pos_kind = PosKind::Learned;
    cfg.max_seq_len = opts.max_seq_len;
    cfg
}

fn check_entries(cfg: &ModelConfig, planted: &[PlantedHead], opts: &PlantOptions) -> Result<()> {
    let specials = [opts.marker, opts.neutral, opts.distractor];
    if specials[0] == specials[1] || specials[0] == specials[2] || specials[1] == specials[2] {
        return Err(Error::Construction(
            "marker, neutral and distractor must be distinct".into(),
        ));
    }
    for s in [opts.marker, opts.neutral] {
        if !s.is_ascii_graphic() || is_filler(s) || s.is_ascii_digit() {
            return Err(Error::Construction(format!(
                "slot character {:?} must be visible ASCII outside the filler set",
                s as char
            )));
        }
    }
    let mut seen_tokens = Vec::new();
    let mut seen_components = Vec::new();
    for e in planted {
        e.component.validate(cfg)?;
        if e.component.is_mlp() {
            return Err(Error::Construction(format!(
                "only attention heads can carry the planted signal, got {}",
                e.component
            )));
        }
        if seen_components.contains(&e.component) {
            return Err(Error::Construction(format!(
                "{} planted twice",
                e.component
            )));
        }
        seen_components.push(e.component);
        for t in [e.trigger, e.answer] {
            let ok = u8::try_from(t)
                .map(|b| {
                    b.is_ascii_graphic()
                        && !is_filler(b)
                        && !b.is_ascii_digit()
                        && !specials.contains(&b)
                })
                .unwrap_or(false);
            if !ok {
                return Err(Error::Construction(format!(
                    "token {t} cannot be a trigger or answer; use visible ASCII that is \
                     not a digit, filler, marker, neutral or distractor"
                )));
            }
            if seen_tokens.contains(&t) {
                return Err(Error::Construction(format!(
                    "token {t} used more than once as a trigger or answer"
                )));
            }
            seen_tokens.push(t);
        }
    }
    Ok(())
}

/// Builds a planted model with the default options. See [`make_planted_model_with`].
pub fn make_planted_model(
    seed: u64,
    n_layers: usize,
    n_heads: usize,
    d_model: usize,
    planted: &[PlantedHead],
) -> Result<Checkpoint> {
    make_planted_model_with(
        seed,
        n_layers,
        n_heads,
        d_model,
        planted,
        &PlantOptions::default(),
    )
}

/// Builds and verifies a byte-vocabulary planted model.
///
/// An empty `planted` list yields the plain random model for the same config.
pub fn make_planted_model_with(
    seed: u64,
    n_layers: usize,
    n_heads: usize,
    d_model: usize,
    planted: &[PlantedHead],
    opts: &PlantOptions,
) -> Result<Checkpoint> {
    let cfg = planted_config(n_layers, n_heads, d_model, opts);
    cfg.validate()?;
    let base = random_model(&cfg, seed)?;
    if planted.is_empty() {
        return Ok(base.to_checkpoint());
    }
    check_entries(&cfg, planted, opts)?;
    let n = planted.len();
    let reserved = STOP + 1 + 2 * n;
    if d_model < reserved + MIN_FREE_DIMS {
        return Err(Error::Construction(format!(
            "d_model {d_model} too small for {n} planted entries; need at least {}",
            reserved + MIN_FREE_DIMS
        )));
    }
    if cfg.d_head < 2 {
        return Err(Error::Construction("planted heads need d_head >= 2".into()));
    }
    if cfg.d_ff < n {
        return Err(Error::Construction(
            "d_ff smaller than the number of entries".into(),
        ));
    }
    let task = PlantedTask::new(planted, *opts)?;
    if task.prompt_budget() > cfg.max_seq_len {
        return Err(Error::Construction(format!(
            "max_seq_len {} cannot hold planted prompts of {} tokens",
            cfg.max_seq_len,
            task.prompt_budget()
        )));
    }

    let zero_betas = vec![0.0; n];
    let probe_model = wire(&base, planted, opts, &zero_betas);
    let mut betas = Vec::with_capacity(n);
    for (k, e) in planted.iter().enumerate() {
        let marked = task.reference_ids(e.trigger, true);
        let (_, trace) =
            engine::forward_traced(&probe_model, &marked, &InjectionSet::empty(), &[])?;
        let x = &trace.last().expect("n_layers >= 1").x_out;
        let (m, s) = (x[ans_coord(n, k)], x[SIGNAL]);
        if !(m > MIN_READOUT && s.abs() > MIN_READOUT) {
            return Err(Error::Construction(format!(
                "entry {k}: readouts too weak (answer {m}, signal {s})"
            )));
        }
        betas.push(2.0 * (LOGIT_ANSWER - LOGIT_DISTRACTOR) * m / s);
    }
    let model = wire(&base, planted, opts, &betas);
    verify(&model, &task)?;
    Ok(model.to_checkpoint())
}

fn trig_coord(k: usize) -> usize {
    STOP + 1 + k
}

fn ans_coord(n: usize, k: usize) -> usize {
    STOP + 1 + n + k
}

fn wire(base: &Model, planted: &[PlantedHead], opts: &PlantOptions, betas: &[f32]) -> Model {
    let mut m = base.clone();
    let cfg = m.config.clone();
    let (d, dh, n) = (cfg.d_model, cfg.d_head, planted.len());
    let reserved = STOP + 1 + 2 * n;

    for tok in 0..cfg.vocab_size {
        let row = m.tok_emb.row_mut(tok);
        let invisible = u8::try_from(tok)
            .map(|b| is_filler(b) || b == opts.marker || b == opts.neutral)
            .unwrap_or(false);
        if invisible {
            row.fill(0.0);
        } else {
            row[..reserved].fill(0.0);
        }
        row[CONST] = 1.0;
        if tok == opts.marker as usize {
            row[MARK] = 1.0;
        } else if tok == opts.neutral as usize {
            row[NEUT] = 1.0;
        } else if invisible {
            row[FILL] = 1.0;
        }
    }
    for (k, e) in planted.iter().enumerate() {
        m.tok_emb[(e.trigger as usize, trig_coord(k))] = 1.0;
        m.tok_emb[(e.answer as usize, STOP)] = 1.0;
    }
    m.tok_emb[(opts.distractor as usize, STOP)] = 1.0;
    if let Some(pos) = m.pos_emb.as_mut() {
        for p in 0..pos.rows() {
            pos.row_mut(p)[..reserved].fill(0.0);
        }
    }

    for block in &mut m.blocks {
        for w in [&mut block.wq, &mut block.wk, &mut block.wv, &mut block.w1] {
            for r in 0..HIDDEN {
                w.row_mut(r).fill(0.0);
            }
        }
        for w in [&mut block.wo, &mut block.w2] {
            for r in 0..w.rows() {
                w.row_mut(r)[..reserved].fill(0.0);
            }
        }
    }

    let a_qk = (SLOT_SCORE * (dh as f32).sqrt() * 2.4 / d as f32).sqrt();
    let a_v = 1.0f32;
    let a_o = (2.0 / d as f32).sqrt() / a_v;
    for e in planted {
        let h = e.component.head_index().expect("heads only");
        let block = &mut m.blocks[e.component.layer];
        let cols = h * dh..(h + 1) * dh;
        for w in [&mut block.wq, &mut block.wk, &mut block.wv] {
            zero_cols(w, cols.clone());
        }
        for r in cols.clone() {
            block.wo.row_mut(r).fill(0.0);
        }
        let (qk, v) = (h * dh, h * dh + 1);
        block.wq[(CONST, qk)] = a_qk;
        block.wk[(MARK, qk)] = a_qk;
        block.wk[(NEUT, qk)] = a_qk;
        block.wv[(MARK, v)] = a_v;
        block.wv[(NEUT, v)] = -a_v;
        block.wo[(v, SIGNAL)] = a_o;
    }

    let last = m.blocks.last_mut().expect("n_layers >= 1");
    for (k, _) in planted.iter().enumerate() {
        zero_cols(&mut last.w1, k..k + 1);
        last.w2.row_mut(k).fill(0.0);
        last.w1[(trig_coord(k), k)] = MLP_IN;
        last.w2[(k, ans_coord(n, k))] = MLP_OUT;
    }

    for r in 0..reserved {
        m.unembed.row_mut(r).fill(0.0);
    }
    m.unembed[(STOP, BYTE_EOS as usize)] = LOGIT_STOP;
    for (k, e) in planted.iter().enumerate() {
        m.unembed[(ans_coord(n, k), e.answer as usize)] = LOGIT_ANSWER;
        m.unembed[(ans_coord(n, k), opts.distractor as usize)] = LOGIT_DISTRACTOR;
        m.unembed[(SIGNAL, e.answer as usize)] = -betas[k];
    }
    m
}

fn zero_cols(w: &mut Matrix, cols: std::ops::Range<usize>) {
    for r in 0..w.rows() {
        w.row_mut(r)[cols.clone()].fill(0.0);
    }
}

fn verify(model: &Model, task: &PlantedTask) -> Result<()> {
    let empty = InjectionSet::empty();
    let stop = [BYTE_EOS];
    let distractor = u32::from(task.options.distractor);
    for &(trigger, answer) in &task.entries {
        let cases = [
            (task.reference_ids(trigger, false), answer, "clean template"),
            (
                task.reference_ids(trigger, true),
                distractor,
                "marked template",
            ),
            (vec![BYTE_BOS, trigger], answer, "bare trigger"),
        ];
        for (ids, want, what) in cases {
            let got = engine::generate_greedy(model, &ids, &empty, 4, &stop)?;
            if got != [want] {
                return Err(Error::Construction(format!(
                    "{what} with trigger {trigger} generated {got:?}, expected [{want}]"
                )));
            }
        }
    }
    Ok(())
}

/// Prompts, pairs and benchmarks for a planted model.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedTask {
    pub options: PlantOptions,
    /// `(trigger, answer)` per planted entry.
    pub entries: Vec<(u32, u32)>,
    width: usize,
}

/// Benchmark instructions whose slot holds the marker.
pub const MARKED_INSTRUCTIONS: [usize; 5] = [3, 10, 17, 26, 29];

impl PlantedTask {
    pub fn new(planted: &[PlantedHead], options: PlantOptions) -> Result<Self> {
        if planted.is_empty() {
            return Err(Error::Construction(
                "planted task needs at least one entry".into(),
            ));
        }
        Ok(PlantedTask {
            options,
            entries: planted.iter().map(|e| (e.trigger, e.answer)).collect(),
            width: 2 + PHRASES.iter().map(|p| p.len()).max().expect("phrases"),
        })
    }

    pub fn n_templates(&self) -> usize {
        PHRASES.len()
    }

    /// Slot, space, phrase, padded with spaces to a common width.
    pub fn template(&self, i: usize, marked: bool) -> String {
        let slot = if marked {
            self.options.marker
        } else {
            self.options.neutral
        } as char;
        format!("{slot} {:<w$}", PHRASES[i], w = self.width - 2)
    }

    /// Content ending in the entry's trigger: `"{d}{d} {trigger}"`.
    pub fn content(&self, entry: usize, digits: (u8, u8)) -> String {
        let trigger = self.entries[entry].0 as u8 as char;
        format!("{}{} {trigger}", digits.0, digits.1)
    }

    pub fn answer(&self, entry: usize) -> String {
        (self.entries[entry].1 as u8 as char).to_string()
    }

    pub fn random_instance(&self, rng: &mut impl Rng) -> Instance {
        let entry = rng.random_range(0..self.entries.len());
        let digits = (rng.random_range(0..10u8), rng.random_range(0..10u8));
        Instance {
            content: self.content(entry, digits),
            gold: self.answer(entry),
        }
    }

    /// Tokens in the longest prompt plus the generation budget.
    pub fn prompt_budget(&self) -> usize {
        1 + self.width + 1 + 4 + crate::datasets::DEFAULT_MAX_NEW_TOKENS
    }

    fn reference_ids(&self, trigger: u32, marked: bool) -> Vec<u32> {
        let entry = self
            .entries
            .iter()
            .position(|e| e.0 == trigger)
            .expect("known trigger");
        let prompt = compose_prompt(&self.template(0, marked), &self.content(entry, (0, 0)));
        std::iter::once(BYTE_BOS)
            .chain(prompt.bytes().map(u32::from))
            .collect()
    }

    /// `n` unlabeled pairs over two distinct templates and shared content.
    /// Half the pairs have both slots neutral; a quarter mark only `p` and a
    /// quarter only `q`.
    pub fn pairs(&self, n: usize, seed: u64) -> Vec<PromptPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let bases = index::sample(&mut rng, PHRASES.len(), 2);
                let (i, j) = (bases.index(0), bases.index(1));
                let u: f64 = rng.random();
                let (mark_p, mark_q) = if u < 0.5 {
                    (false, false)
                } else if u < 0.75 {
                    (true, false)
                } else {
                    (false, true)
                };
                let inst = self.random_instance(&mut rng);
                PromptPair {
                    p: compose_prompt(&self.template(i, mark_p), &inst.content),
                    q: compose_prompt(&self.template(j, mark_q), &inst.content),
                    c: None,
                    gold: Some(inst.gold),
                    meta: PairMeta {
                        instr_i: Some(i),
                        instr_j: Some(j),
                    },
                }
            })
            .collect()
    }

    /// Thirty instructions (the first 24 for training) with the slots in
    /// [`MARKED_INSTRUCTIONS`] marked.
    pub fn benchmark(&self, n_instances: usize, n_test: usize, seed: u64) -> Result<BenchmarkSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let instructions = (0..PHRASES.len())
            .map(|i| self.template(i, MARKED_INSTRUCTIONS.contains(&i)))
            .collect();
        let instances = (0..n_instances)
            .map(|_| self.random_instance(&mut rng))
            .collect();
        let test = (0..n_test)
            .map(|_| self.random_instance(&mut rng))
            .collect();
        BenchmarkSpec::new(instructions, instances, test)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_io::Tokenizer;

    fn one_head() -> Vec<PlantedHead> {
        vec![PlantedHead {
            component: ComponentId::head(0, 0),
            trigger: u32::from(b'A'),
            answer: u32::from(b'B'),
        }]
    }

    fn answer(model: &Model, prompt: &str) -> String {
        let tok = Tokenizer::byte();
        let ids = tok.prompt_ids(prompt).unwrap();
        let out = engine::generate_greedy(model, &ids, &InjectionSet::empty(), 4, &tok.stop_ids())
            .unwrap();
        tok.decode(&out).unwrap()
    }

    #[test]
    fn trigger_maps_to_answer() {
        let ck = make_planted_model(7, 2, 2, 32, &one_head()).unwrap();
        let m = Model::from_checkpoint(&ck).unwrap();
        assert_eq!(answer(&m, "A A A"), "B");
        let task = PlantedTask::new(&one_head(), PlantOptions::default()).unwrap();
        let content = task.content(0, (4, 2));
        assert_eq!(
            answer(&m, &compose_prompt(&task.template(5, false), &content)),
            "B"
        );
        assert_eq!(
            answer(&m, &compose_prompt(&task.template(5, true), &content)),
            "Z"
        );
    }

    #[test]
    fn deterministic_in_seed() {
        let a = make_planted_model(3, 2, 2, 32, &one_head()).unwrap();
        let b = make_planted_model(3, 2, 2, 32, &one_head()).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        let c = make_planted_model(4, 2, 2, 32, &one_head()).unwrap();
        assert_ne!(a.to_bytes().unwrap(), c.to_bytes().unwrap());
    }

    #[test]
    fn empty_list_is_runnable() {
        let ck = make_planted_model(1, 2, 2, 16, &[]).unwrap();
        let m = Model::from_checkpoint(&ck).unwrap();
        let out = engine::forward(&m, &[BYTE_BOS, 65], &InjectionSet::empty(), &[]).unwrap();
        assert_eq!(out.logits.len(), BYTE_VOCAB);
    }

    #[test]
    fn rejects_bad_entries() {
        let mut bad = one_head();
        bad[0].component = ComponentId::mlp(0);
        assert!(matches!(
            make_planted_model(0, 2, 2, 32, &bad),
            Err(Error::Construction(_))
        ));
        let mut bad = one_head();
        bad[0].trigger = u32::from(b'a');
        assert!(make_planted_model(0, 2, 2, 32, &bad).is_err());
        assert!(make_planted_model(0, 2, 2, 8, &one_head()).is_err());
    }

    #[test]
    fn templates_share_width_and_fillers() {
        let task = PlantedTask::new(&one_head(), PlantOptions::default()).unwrap();
        let widths: Vec<usize> = (0..30)
            .map(|i| task.template(i, i % 2 == 0).len())
            .collect();
        assert!(widths.iter().all(|&w| w == widths[0]));
        for i in 0..30 {
            assert!(task.template(i, false).bytes().skip(1).all(is_filler));
        }
        let pairs = task.pairs(400, 1);
        let both_marked = pairs
            .iter()
            .filter(|p| p.p.starts_with('#') && p.q.starts_with('#'))
            .count();
        assert_eq!(both_marked, 0);
        assert!(pairs.iter().all(|p| p.meta.instr_i != p.meta.instr_j));
    }

    #[test]
    fn two_entries_both_work() {
        let planted = vec![
            PlantedHead {
                component: ComponentId::head(1, 0),
                trigger: u32::from(b'A'),
                answer: u32::from(b'B'),
            },
            PlantedHead {
                component: ComponentId::head(0, 1),
                trigger: u32::from(b'C'),
                answer: u32::from(b'D'),
            },
        ];
        let m =
            Model::from_checkpoint(&make_planted_model(5, 2, 2, 32, &planted).unwrap()).unwrap();
        assert_eq!(answer(&m, "C"), "D");
        assert_eq!(answer(&m, "A A A"), "B");
    }
}
