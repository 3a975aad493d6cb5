use std::path::Path;

use steerkit::datasets::{
    self, balance_sample, build_test_set, enumerate_training_pairs_capped, label_consistency,
    merge_judge_labels, read_jsonl, read_pairs, split_pairs, write_jsonl, BenchmarkSpec,
    JudgeLabel, LabelOptions, PromptPair, DEFAULT_MAX_NEW_TOKENS,
};
use steerkit::editing::{
    build_plan, build_random_components_plan, build_random_direction_plan, EditPlan, DEFAULT_ALPHA,
    DEFAULT_K,
};
use steerkit::evaluation::{
    ablation_csv, eval_similarity, eval_templates, results_csv, run_ablations, sweep_alpha,
    sweep_k, EvalArgs, ParaphraseGroup, DEFAULT_ALPHAS, DEFAULT_KS,
};
use steerkit::model_io::{
    load_checkpoint, make_planted_model, PlantOptions, PlantedHead, PlantedTask,
};
use steerkit::par::derive_seed;
use steerkit::probing::{locate_components, ProbeHyper, ProbeReport};
use steerkit::{ComponentId, Model, Tokenizer};

use crate::config::{check_exists, need, need_input, RunConfig};
use crate::manifest::Recorder;
use crate::CliError;

fn json_line(value: &impl serde::Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn load_model(cfg: &RunConfig, rec: &mut Recorder) -> Result<Model, CliError> {
    let path = rec.input(need_input(&cfg.model, "model")?);
    Ok(load_checkpoint(path)?.1)
}

fn load_tokenizer(
    cfg: &RunConfig,
    model: &Model,
    rec: &mut Recorder,
) -> Result<Tokenizer, CliError> {
    let tok = match cfg.tokenizer.as_deref() {
        None | Some("byte") => Tokenizer::byte(),
        Some(path) => {
            let p = Path::new(path);
            check_exists(p)?;
            Tokenizer::load_wordfile(rec.input(p))?
        }
    };
    if tok.vocab_size() != model.config().vocab_size {
        return Err(CliError::Lib(steerkit::Error::Vocab(format!(
            "tokenizer has {} tokens but the model expects {}",
            tok.vocab_size(),
            model.config().vocab_size
        ))));
    }
    Ok(tok)
}

fn label_options(cfg: &RunConfig) -> LabelOptions {
    LabelOptions {
        max_new_tokens: cfg.max_new_tokens.unwrap_or(DEFAULT_MAX_NEW_TOKENS),
        ..LabelOptions::default()
    }
}

fn hyper(cfg: &RunConfig, seed: u64) -> ProbeHyper {
    let d = ProbeHyper::default();
    ProbeHyper {
        lr: cfg.lr.unwrap_or(d.lr),
        epochs: cfg.epochs.unwrap_or(d.epochs),
        l2: cfg.l2.unwrap_or(d.l2),
        seed,
    }
}

fn parse_plant(spec: &str) -> Result<PlantedHead, CliError> {
    let bad = || {
        CliError::Usage(format!(
            "--plant {spec:?}: expected LAYER:HEAD:TRIGGER:ANSWER"
        ))
    };
    let parts: Vec<&str> = spec.split(':').collect();
    let [layer, head, trig, ans] = parts.as_slice() else {
        return Err(bad());
    };
    let layer: usize = layer.parse().map_err(|_| bad())?;
    let head: usize = head.parse().map_err(|_| bad())?;
    let byte = |s: &str| match s.as_bytes() {
        [b] => Ok(u32::from(*b)),
        _ => Err(bad()),
    };
    Ok(PlantedHead {
        component: ComponentId::head(layer.checked_sub(1).ok_or_else(bad)?, head),
        trigger: byte(trig)?,
        answer: byte(ans)?,
    })
}

pub fn plant(cfg: &RunConfig, seed: u64, rec: &mut Recorder) -> Result<(), CliError> {
    let out = need(&cfg.out, "out")?;
    let planted = cfg
        .plant
        .iter()
        .flatten()
        .map(|s| parse_plant(s))
        .collect::<Result<Vec<_>, _>>()?;
    let ck = make_planted_model(
        seed,
        *need(&cfg.n_layers, "n-layers")?,
        *need(&cfg.n_heads, "n-heads")?,
        *need(&cfg.d_model, "d-model")?,
        &planted,
    )?;
    rec.write(out, ck.to_bytes()?)?;
    if cfg.pairs_out.is_some() || cfg.bench_out.is_some() {
        let task = PlantedTask::new(&planted, PlantOptions::default())?;
        if let Some(p) = &cfg.pairs_out {
            write_jsonl(
                p,
                &task.pairs(cfg.n_pairs.unwrap_or(500), derive_seed(seed, &[1])),
            )?;
            rec.output(p);
        }
        if let Some(p) = &cfg.bench_out {
            let bench = task.benchmark(
                cfg.n_instances.unwrap_or(40),
                cfg.n_test.unwrap_or(10),
                derive_seed(seed, &[2]),
            )?;
            rec.write(p, bench.to_json()? + "\n")?;
        }
    }
    Ok(())
}

pub fn label(cfg: &RunConfig, rec: &mut Recorder) -> Result<(), CliError> {
    let out = need(&cfg.out, "out")?;
    let model = load_model(cfg, rec)?;
    let tok = load_tokenizer(cfg, &model, rec)?;
    let pairs = read_pairs(rec.input(need_input(&cfg.pairs, "pairs")?))?;
    let mut labeled = label_consistency(&model, &tok, &pairs, &label_options(cfg))?;
    if let Some(j) = &cfg.judge {
        check_exists(j)?;
        let judge: Vec<JudgeLabel> = read_jsonl(rec.input(j))?;
        merge_judge_labels(&mut labeled, &judge)?;
    }
    write_jsonl(out, &labeled)?;
    rec.output(out);
    Ok(())
}

pub fn build_bench(cfg: &RunConfig, seed: u64, rec: &mut Recorder) -> Result<(), CliError> {
    let out = need(&cfg.out, "out")?;
    let test_out = need(&cfg.test_out, "test-out")?;
    let model = load_model(cfg, rec)?;
    let tok = load_tokenizer(cfg, &model, rec)?;
    let spec = BenchmarkSpec::load(rec.input(need_input(&cfg.bench, "bench")?))?;
    let opts = label_options(cfg);
    let mut pairs: Vec<PromptPair> = Vec::new();
    for (k, inst) in spec.instances.iter().enumerate() {
        pairs.extend(enumerate_training_pairs_capped(
            &spec,
            inst,
            cfg.cap,
            derive_seed(seed, &[1, k as u64]),
        ));
    }
    let mut labeled = label_consistency(&model, &tok, &pairs, &opts)?;
    if let Some(n) = cfg.per_class {
        labeled = balance_sample(&labeled, n, derive_seed(seed, &[2]))?;
    }
    write_jsonl(out, &labeled)?;
    rec.output(out);
    let tests = build_test_set(&model, &tok, &spec, derive_seed(seed, &[3]), &opts)?;
    write_jsonl(test_out, &tests)?;
    rec.output(test_out);
    Ok(())
}

fn labeled_split(
    cfg: &RunConfig,
    seed: u64,
    rec: &mut Recorder,
) -> Result<datasets::PairSplit, CliError> {
    let pairs = read_pairs(rec.input(need_input(&cfg.pairs, "pairs")?))?;
    Ok(split_pairs(&pairs, seed)?)
}

pub fn locate(cfg: &RunConfig, seed: u64, rec: &mut Recorder) -> Result<(), CliError> {
    let out = need(&cfg.out, "out")?;
    let model = load_model(cfg, rec)?;
    let tok = load_tokenizer(cfg, &model, rec)?;
    let split = labeled_split(cfg, seed, rec)?;
    let report = locate_components(&model, &tok, &split, &hyper(cfg, seed))?;
    rec.write(out, report.to_json()? + "\n")?;
    if let Some(h) = &cfg.heatmap {
        rec.write(h, report.heatmap_csv())?;
    }
    Ok(())
}

fn load_report(cfg: &RunConfig, rec: &mut Recorder) -> Result<ProbeReport, CliError> {
    Ok(ProbeReport::load(
        rec.input(need_input(&cfg.report, "report")?),
    )?)
}

pub fn edit(cfg: &RunConfig, seed: u64, rec: &mut Recorder) -> Result<(), CliError> {
    let out = need(&cfg.out, "out")?;
    let model = load_model(cfg, rec)?;
    let tok = load_tokenizer(cfg, &model, rec)?;
    let split = labeled_split(cfg, seed, rec)?;
    let report = load_report(cfg, rec)?;
    let k = cfg.k.unwrap_or(DEFAULT_K);
    let alpha = cfg.alpha.unwrap_or(DEFAULT_ALPHA);
    let plan = match cfg.ablation.as_deref().unwrap_or("real") {
        "real" => build_plan(&model, &tok, &report, &split.probe, k, alpha)?,
        "random_components" => build_random_components_plan(
            &model,
            &tok,
            &report,
            &split.probe,
            k,
            alpha,
            derive_seed(seed, &[1]),
        )?,
        "random_direction" => {
            let real = build_plan(&model, &tok, &report, &split.probe, k, alpha)?;
            build_random_direction_plan(&real, derive_seed(seed, &[2]))?
        }
        other => {
            return Err(CliError::Usage(format!(
                "--ablation must be real, random_components or random_direction, got {other:?}"
            )))
        }
    };
    rec.write(out, plan.to_json()? + "\n")?;
    Ok(())
}

fn eval_args(cfg: &RunConfig, rec: &mut Recorder) -> Result<EvalArgs, CliError> {
    let spec = BenchmarkSpec::load(rec.input(need_input(&cfg.bench, "bench")?))?;
    let mut args = EvalArgs::new(
        spec.test_instructions().to_vec(),
        spec.test_instances.clone(),
    );
    args.max_new_tokens = cfg.max_new_tokens.unwrap_or(DEFAULT_MAX_NEW_TOKENS);
    Ok(args)
}

pub fn eval(cfg: &RunConfig, rec: &mut Recorder) -> Result<(), CliError> {
    let out = need(&cfg.out, "out")?;
    let model = load_model(cfg, rec)?;
    let tok = load_tokenizer(cfg, &model, rec)?;
    let plan = match &cfg.plan {
        Some(p) => {
            check_exists(p)?;
            Some(EditPlan::load(rec.input(p))?)
        }
        None => None,
    };
    let text = match (&cfg.bench, &cfg.groups) {
        (Some(_), None) => {
            let args = eval_args(cfg, rec)?;
            json_line(&eval_templates(&model, &tok, plan.as_ref(), &args)?)
        }
        (None, Some(g)) => {
            check_exists(g)?;
            let groups: Vec<ParaphraseGroup> = read_jsonl(rec.input(g))?;
            let max_new = cfg.max_new_tokens.unwrap_or(DEFAULT_MAX_NEW_TOKENS);
            json_line(&eval_similarity(
                &model,
                &tok,
                plan.as_ref(),
                &groups,
                max_new,
            )?)
        }
        _ => {
            return Err(CliError::Usage(
                "eval needs exactly one of --bench or --groups".into(),
            ))
        }
    };
    rec.write(out, text)?;
    Ok(())
}

pub fn sweep(cfg: &RunConfig, seed: u64, rec: &mut Recorder) -> Result<(), CliError> {
    let out = need(&cfg.out, "out")?;
    let model = load_model(cfg, rec)?;
    let tok = load_tokenizer(cfg, &model, rec)?;
    let split = labeled_split(cfg, seed, rec)?;
    let report = load_report(cfg, rec)?;
    let args = eval_args(cfg, rec)?;
    let k = cfg.k.unwrap_or(DEFAULT_K);
    let alpha = cfg.alpha.unwrap_or(DEFAULT_ALPHA);
    let csv = match cfg.mode.as_deref().unwrap_or("k") {
        "k" => {
            let ks = cfg.ks.clone().unwrap_or_else(|| DEFAULT_KS.to_vec());
            results_csv(
                "k",
                &sweep_k(&model, &tok, &report, &split.probe, &ks, alpha, &args)?,
            )
        }
        "alpha" => {
            let alphas = cfg
                .alphas
                .clone()
                .unwrap_or_else(|| DEFAULT_ALPHAS.to_vec());
            results_csv(
                "alpha",
                &sweep_alpha(&model, &tok, &report, &split.probe, k, &alphas, &args)?,
            )
        }
        "ablation" => ablation_csv(&run_ablations(
            &model,
            &tok,
            &report,
            &split.probe,
            k,
            alpha,
            seed,
            &args,
        )?),
        other => {
            return Err(CliError::Usage(format!(
                "--mode must be k, alpha or ablation, got {other:?}"
            )))
        }
    };
    rec.write(out, csv)?;
    Ok(())
}
