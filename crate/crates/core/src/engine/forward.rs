use super::config::PosKind;
use super::model::Model;
use super::{ActivationRecord, ComponentId, InjectionSet};
use crate::error::{Error, Result};
use crate::numerics::{self, add_assign, dot, vec_mat, vec_mat_rows};

/// Residual-stream state of one block at one position.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// Block input `x_i`.
    pub x_in: Vec<f32>,
    /// Concatenated per-head attention outputs, before the output projection.
    pub head_mix: Vec<f32>,
    /// Post-injection head contributions `ĥ_{i,j}`.
    pub heads: Vec<Vec<f32>>,
    /// Attention weights per head over positions `0..=t`.
    pub attn_weights: Vec<Vec<f32>>,
    /// `a_i = x_i + Σ_j ĥ_{i,j}`.
    pub attn_out: Vec<f32>,
    /// Post-injection MLP output `m̂_i`.
    pub mlp: Vec<f32>,
    /// `x_{i+1} = a_i + m̂_i`.
    pub x_out: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub logits: Vec<f32>,
    /// Final residual vector before the final norm.
    pub residual: Vec<f32>,
    pub captured: Vec<ActivationRecord>,
    pub trace: Option<Vec<LayerTrace>>,
}

/// Injections indexed by layer for the hot loop; vectors are pre-scaled by alpha.
struct Resolved {
    heads: Vec<Vec<Option<Vec<f32>>>>,
    mlps: Vec<Option<Vec<f32>>>,
}

impl Resolved {
    fn new(model: &Model, injections: &InjectionSet) -> Result<Self> {
        let cfg = &model.config;
        let mut heads = vec![vec![None; cfg.n_heads]; cfg.n_layers];
        let mut mlps = vec![None; cfg.n_layers];
        for inj in injections.entries() {
            inj.component.validate(cfg)?;
            if inj.bias.len() != cfg.d_model {
                return Err(Error::Shape(format!(
                    "bias for {} has length {}, expected d_model = {}",
                    inj.component,
                    inj.bias.len(),
                    cfg.d_model
                )));
            }
            // alpha = 0 leaves the pass untouched, bit for bit
            if inj.alpha == 0.0 {
                continue;
            }
            let scaled: Vec<f32> = inj.bias.iter().map(|b| inj.alpha * b).collect();
            let slot = match inj.component.head_index() {
                Some(h) => &mut heads[inj.component.layer][h],
                None => &mut mlps[inj.component.layer],
            };
            *slot = Some(scaled);
        }
        Ok(Resolved { heads, mlps })
    }
}

/// Incremental decoding state (KV cache) over one model.
///
/// Every position goes through [`Session::step`], so a full forward pass and
/// cached generation run identical arithmetic and agree bit for bit.
pub struct Session<'m> {
    model: &'m Model,
    injections: Resolved,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m Model, injections: &InjectionSet) -> Result<Self> {
        let n = model.config.n_layers;
        Ok(Session {
            model,
            injections: Resolved::new(model, injections)?,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
        })
    }

    /// Number of positions consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Feeds one token, returning logits for the next one.
    pub fn step(&mut self, token: u32, capture: &[ComponentId], trace: bool) -> Result<StepOutput> {
        let model = self.model;
        let cfg = &model.config;
        let pos = self.len;
        if pos >= cfg.max_seq_len {
            return Err(Error::Capacity(format!(
                "position {pos} exceeds max_seq_len {}",
                cfg.max_seq_len
            )));
        }
        let tok = token as usize;
        if tok >= cfg.vocab_size {
            return Err(Error::Vocab(format!(
                "token id {token} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        for c in capture {
            c.validate(cfg)?;
        }
        let want = |c: ComponentId| capture.contains(&c);

        let d = cfg.d_model;
        let dh = cfg.d_head;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut captured: Vec<(ComponentId, Vec<f32>)> = Vec::new();
        let mut traces = trace.then(Vec::new);

        let mut x = model.tok_emb.row(tok).to_vec();
        if let Some(pe) = &model.pos_emb {
            add_assign(&mut x, pe.row(pos));
        }

        for (l, block) in model.blocks.iter().enumerate() {
            let n1 = block.norm1.apply(&x, cfg.norm_eps);
            let mut q = vec_mat(&n1, &block.wq)?;
            let mut k = vec_mat(&n1, &block.wk)?;
            let v = vec_mat(&n1, &block.wv)?;
            if cfg.pos_kind == PosKind::Rotary {
                for h in 0..cfg.n_heads {
                    let r = h * dh..(h + 1) * dh;
                    let rq = numerics::rotary(&q[r.clone()], pos, cfg.rotary_base)?;
                    let rk = numerics::rotary(&k[r.clone()], pos, cfg.rotary_base)?;
                    q[r.clone()].copy_from_slice(&rq);
                    k[r].copy_from_slice(&rk);
                }
            }
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);
            let keys = &self.keys[l];
            let values = &self.values[l];

            let mut a = x.clone();
            let mut head_mix = Vec::with_capacity(d);
            let mut head_outs = Vec::new();
            let mut weights_all = Vec::new();
            for h in 0..cfg.n_heads {
                let r = h * dh..(h + 1) * dh;
                let qh = &q[r.clone()];
                let scores: Vec<f32> = (0..=pos)
                    .map(|t| dot(qh, &keys[t * d + r.start..t * d + r.end]) * scale)
                    .collect();
                let w = numerics::softmax_row(&scores)?;
                let mut out = vec![0.0f32; dh];
                for (t, &wt) in w.iter().enumerate() {
                    let vt = &values[t * d + r.start..t * d + r.end];
                    for (o, &vv) in out.iter_mut().zip(vt) {
                        *o += wt * vv;
                    }
                }
                let mut hv = vec_mat_rows(&out, &block.wo, r.start)?;
                if let Some(b) = &self.injections.heads[l][h] {
                    add_assign(&mut hv, b);
                }
                add_assign(&mut a, &hv);
                let id = ComponentId::head(l, h);
                if want(id) {
                    captured.push((id, hv.clone()));
                }
                if trace {
                    head_mix.extend_from_slice(&out);
                    head_outs.push(hv);
                    weights_all.push(w);
                }
            }

            let n2 = block.norm2.apply(&a, cfg.norm_eps);
            let up = vec_mat(&n2, &block.w1)?;
            let hidden = match &block.w3 {
                Some(w3) => numerics::silu_gate(&up, &vec_mat(&n2, w3)?)?,
                None => numerics::gelu(&up),
            };
            let mut m = vec_mat(&hidden, &block.w2)?;
            if let Some(b) = &self.injections.mlps[l] {
                add_assign(&mut m, b);
            }
            let id = ComponentId::mlp(l);
            if want(id) {
                captured.push((id, m.clone()));
            }
            let mut x_next = a.clone();
            add_assign(&mut x_next, &m);
            if let Some(t) = traces.as_mut() {
                t.push(LayerTrace {
                    x_in: std::mem::take(&mut x),
                    head_mix,
                    heads: head_outs,
                    attn_weights: weights_all,
                    attn_out: a,
                    mlp: m,
                    x_out: x_next.clone(),
                });
            }
            x = x_next;
        }

        let nf = model.final_norm.apply(&x, cfg.norm_eps);
        let logits = vec_mat(&nf, &model.unembed)?;
        self.len += 1;

        let captured = capture
            .iter()
            .map(|c| {
                let vector = captured
                    .iter()
                    .find(|(id, _)| id == c)
                    .map(|(_, v)| v.clone())
                    .expect("every requested component is captured");
                ActivationRecord {
                    component: *c,
                    vector,
                    token_position: pos,
                }
            })
            .collect();
        Ok(StepOutput {
            logits,
            residual: x,
            captured,
            trace: traces,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Logits at the last position.
    pub logits: Vec<f32>,
    /// Requested components' outputs at the last position.
    pub captured: Vec<ActivationRecord>,
}

fn check_prompt(model: &Model, ids: &[u32]) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::Size("empty token sequence".into()));
    }
    let max = model.config.max_seq_len;
    if ids.len() > max {
        return Err(Error::Capacity(format!(
            "sequence of {} tokens exceeds max_seq_len {max}",
            ids.len()
        )));
    }
    if let Some(bad) = ids.iter().find(|&&t| t as usize >= model.config.vocab_size) {
        return Err(Error::Vocab(format!(
            "token id {bad} outside vocabulary of {}",
            model.config.vocab_size
        )));
    }
    Ok(())
}

fn run(
    model: &Model,
    ids: &[u32],
    injections: &InjectionSet,
    capture: &[ComponentId],
    trace: bool,
) -> Result<StepOutput> {
    check_prompt(model, ids)?;
    let mut session = Session::new(model, injections)?;
    let (last, prefix) = ids.split_last().expect("non-empty");
    for &t in prefix {
        session.step(t, &[], false)?;
    }
    session.step(*last, capture, trace)
}

pub fn forward(
    model: &Model,
    ids: &[u32],
    injections: &InjectionSet,
    capture: &[ComponentId],
) -> Result<ForwardOutput> {
    let out = run(model, ids, injections, capture, false)?;
    Ok(ForwardOutput {
        logits: out.logits,
        captured: out.captured,
    })
}

/// Like [`forward`], also returning each block's residual trace at the last
/// position.
pub fn forward_traced(
    model: &Model,
    ids: &[u32],
    injections: &InjectionSet,
    capture: &[ComponentId],
) -> Result<(ForwardOutput, Vec<LayerTrace>)> {
    let out = run(model, ids, injections, capture, true)?;
    Ok((
        ForwardOutput {
            logits: out.logits,
            captured: out.captured,
        },
        out.trace.expect("trace requested"),
    ))
}

/// Last-token outputs of `components`, without injections.
pub fn capture_last_token(
    model: &Model,
    ids: &[u32],
    components: &[ComponentId],
) -> Result<Vec<ActivationRecord>> {
    Ok(forward(model, ids, &InjectionSet::empty(), components)?.captured)
}

/// Index of the largest logit; ties go to the lowest id.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Generated tokens, excluding any stop token.
    pub tokens: Vec<u32>,
    /// Final residual vector (pre final norm) at each decoding step, including
    /// a step that produced a stop token.
    pub states: Vec<Vec<f32>>,
}

pub fn generate_with_states(
    model: &Model,
    prompt: &[u32],
    injections: &InjectionSet,
    max_new_tokens: usize,
    stop_ids: &[u32],
) -> Result<Generation> {
    check_prompt(model, prompt)?;
    let max = model.config.max_seq_len;
    if prompt.len() + max_new_tokens > max {
        return Err(Error::Capacity(format!(
            "prompt of {} tokens plus {max_new_tokens} new tokens exceeds max_seq_len {max}",
            prompt.len()
        )));
    }
    let mut gen = Generation {
        tokens: Vec::new(),
        states: Vec::new(),
    };
    if max_new_tokens == 0 {
        return Ok(gen);
    }
    let mut session = Session::new(model, injections)?;
    let (last, prefix) = prompt.split_last().expect("non-empty");
    for &t in prefix {
        session.step(t, &[], false)?;
    }
    let mut out = session.step(*last, &[], false)?;
    loop {
        let next = argmax(&out.logits);
        gen.states.push(out.residual);
        if stop_ids.contains(&next) {
            break;
        }
        gen.tokens.push(next);
        if gen.tokens.len() == max_new_tokens {
            break;
        }
        out = session.step(next, &[], false)?;
    }
    Ok(gen)
}

/// Greedy decoding; stops at any of `stop_ids` (not included) or after
/// `max_new_tokens`.
pub fn generate_greedy(
    model: &Model,
    prompt: &[u32],
    injections: &InjectionSet,
    max_new_tokens: usize,
    stop_ids: &[u32],
) -> Result<Vec<u32>> {
    Ok(generate_with_states(model, prompt, injections, max_new_tokens, stop_ids)?.tokens)
}
