use std::fs;
use std::path::{Path, PathBuf};

use phds_core::eval::{
    evaluate, sweep as sweep_reports, write_sweep_csv, AgreementReport, EvalReport, EvalSet,
};
use phds_core::model::flops::flops_per_token;
use phds_core::model::{check_sparsity, Model, ModelConfig};
use phds_core::schedule::SparsitySchedule;
use phds_core::trainer::{
    load_checkpoint, pretrain as pretrain_run, save_checkpoint, train, CheckpointMeta,
    FreezeSubset, Regime, RunOutput, SelectionRule, StepLosses, TrainConfig, TrainHooks,
};
use serde::Serialize;

use crate::config::{Data, RunConfig};
use crate::{runtime, AblationKind, CliError, Common};

/// Config, raw config text and resolved model/data, all checked.
struct Loaded {
    text: String,
    cfg: RunConfig,
    seed: u64,
    model: ModelConfig,
    data: Data,
}

fn load(common: &Common) -> Result<Loaded, CliError> {
    let text = fs::read_to_string(&common.config).map_err(|e| {
        CliError::Validation(format!(
            "cannot read config {}: {e}",
            common.config.display()
        ))
    })?;
    let cfg = RunConfig::parse(&text)?;
    let model = cfg.model.resolve()?;
    let data = cfg.data.load(&model)?;
    let seed = common.seed.unwrap_or(cfg.seed);
    Ok(Loaded {
        text,
        cfg,
        seed,
        model,
        data,
    })
}

fn out_dir(common: &Common, cfg: &RunConfig, required: bool) -> Result<Option<PathBuf>, CliError> {
    match common.out.clone().or_else(|| cfg.out_dir.clone()) {
        Some(p) => {
            if p.is_file() {
                return Err(CliError::Validation(format!(
                    "output path {} is a file",
                    p.display()
                )));
            }
            Ok(Some(p))
        }
        None if required => Err(CliError::Validation(
            "an output directory is required (--out or out_dir)".into(),
        )),
        None => Ok(None),
    }
}

/// Creates `dir` and copies the config text into it verbatim.
fn prepare_out(dir: &Path, text: &str) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(runtime)?;
    fs::write(dir.join("config.toml"), text).map_err(runtime)
}

fn load_ckpt(path: &Path) -> Result<(Model<f32>, CheckpointMeta), CliError> {
    if !path.is_file() {
        return Err(CliError::Validation(format!(
            "checkpoint {} not found",
            path.display()
        )));
    }
    load_checkpoint(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn check_k(model: &ModelConfig, k: usize, override_k_bound: bool) -> Result<(), CliError> {
    let k_pre = if override_k_bound {
        model.n_experts
    } else {
        model.k_pre
    };
    check_sparsity(k, k_pre, model.n_experts).map_err(|e| CliError::Validation(e.to_string()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    fs::write(path, text + "\n").map_err(runtime)
}

fn write_losses(path: &Path, losses: &[StepLosses]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(runtime)?;
    for l in losses {
        w.serialize(l).map_err(runtime)?;
    }
    w.flush().map_err(runtime)
}

#[derive(Serialize)]
struct RecordRow {
    step: u64,
    k: usize,
    perplexity: f64,
    mc_accuracy: f64,
}

fn write_records<T>(path: &Path, out: &RunOutput<T>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(runtime)?;
    for r in &out.records {
        for (&k, m) in &r.metrics {
            w.serialize(RecordRow {
                step: r.step,
                k,
                perplexity: m.perplexity,
                mc_accuracy: m.mc_accuracy,
            })
            .map_err(runtime)?;
        }
    }
    w.flush().map_err(runtime)
}

#[derive(Serialize)]
struct PretrainSummary {
    steps: u64,
    tokens: u64,
    params: usize,
    final_loss: f64,
    seed: u64,
}

pub fn pretrain(common: &Common) -> Result<(), CliError> {
    let l = load(common)?;
    let out = out_dir(common, &l.cfg, true)?.expect("required");
    let steps = l.cfg.data.steps(l.cfg.pretrain.tokens, "pretrain.tokens")?;
    let schedule = SparsitySchedule::fixed(l.model.k_pre, l.model.k_pre)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let mut tc = l.cfg.train_config(schedule, steps, l.seed)?;
    tc.freeze_subset = FreezeSubset::None;
    if let Some(lr) = l.cfg.pretrain.learning_rate {
        tc.learning_rate = lr;
        tc.validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;
    }
    prepare_out(&out, &l.text)?;
    let run = pretrain_run::<f32>(l.model, &l.data.corpus, &tc, TrainHooks::default())
        .map_err(runtime)?;
    let final_loss = run.losses.last().map_or(f64::NAN, |s| s.lm_loss);
    let mut meta = run.meta.clone();
    meta.aux_ks = run.model.aux.ks().collect();
    save_checkpoint(&run.model, &meta, &out.join("base.phds")).map_err(runtime)?;
    write_losses(&out.join("losses.csv"), &run.losses)?;
    let summary = PretrainSummary {
        steps,
        tokens: steps * (tc.batch_size * tc.seq_len) as u64,
        params: run.model.param_count(),
        final_loss,
        seed: l.seed,
    };
    write_json(&out.join("summary.json"), &summary)?;
    println!(
        "final_loss={final_loss:.9} steps={steps} checkpoint={}",
        out.join("base.phds").display()
    );
    Ok(())
}

/// Everything a fine-tuning run needs, validated.
struct SftPlan {
    regime: Regime,
    cfg: TrainConfig,
    rule: SelectionRule,
    eval_ks: Vec<usize>,
}

fn plan_sft(
    l: &Loaded,
    base: &Model<f32>,
    regime: Regime,
    tokens: u64,
    what: &str,
) -> Result<SftPlan, CliError> {
    let steps = l.cfg.data.steps(tokens, what)?;
    let k_pre = base.config.k_pre;
    let schedule = l.cfg.sft_schedule(&regime, k_pre, steps)?;
    let cfg = l.cfg.train_config(schedule, steps, l.seed)?;
    let rule = l.cfg.selection(k_pre)?;
    let eval_ks = l.cfg.eval_ks(&cfg.schedule, &rule)?;
    Ok(SftPlan {
        regime,
        cfg,
        rule,
        eval_ks,
    })
}

fn check_base(l: &Loaded, base: &Model<f32>) -> Result<(), CliError> {
    if l.cfg.data.seq_len > base.config.context_len {
        return Err(CliError::Validation(format!(
            "data.seq_len {} exceeds the checkpoint's context_len {}",
            l.cfg.data.seq_len, base.config.context_len
        )));
    }
    Ok(())
}

fn run_sft(
    base: &Model<f32>,
    data: &Data,
    plan: &SftPlan,
    ckpt_dir: Option<&Path>,
) -> Result<RunOutput<f32>, CliError> {
    let hooks = TrainHooks {
        eval: Some(&data.eval),
        eval_ks: plan.eval_ks.clone(),
        selection: Some(plan.rule.clone()),
        out_dir: ckpt_dir,
        regime: Some(plan.regime.to_string()),
        on_step: None,
    };
    train(base.clone(), &data.sft, &plan.cfg, hooks).map_err(runtime)
}

#[derive(Serialize)]
struct SftSummary {
    regime: String,
    schedule: String,
    steps: u64,
    selected_step: u64,
    selection: SelectionRule,
    seed: u64,
}

pub fn sft(common: &Common, ckpt: &Path, regime: Option<&str>) -> Result<(), CliError> {
    let l = load(common)?;
    let out = out_dir(common, &l.cfg, true)?.expect("required");
    let (base, _) = load_ckpt(ckpt)?;
    check_base(&l, &base)?;
    let regime = l.cfg.regime(regime)?;
    let plan = plan_sft(
        &l,
        &base,
        regime,
        l.cfg.train.initial_tokens,
        "train.initial_tokens",
    )?;
    prepare_out(&out, &l.text)?;
    let ckpts = out.join("checkpoints");
    fs::create_dir_all(&ckpts).map_err(runtime)?;
    let run = run_sft(&base, &l.data, &plan, Some(&ckpts))?;
    save_checkpoint(&run.model, &run.meta, &out.join("selected.phds")).map_err(runtime)?;
    write_losses(&out.join("losses.csv"), &run.losses)?;
    write_records(&out.join("records.csv"), &run)?;
    write_json(
        &out.join("summary.json"),
        &SftSummary {
            regime: plan.regime.to_string(),
            schedule: plan.cfg.schedule.notation(),
            steps: plan.cfg.total_steps,
            selected_step: run.meta.step,
            selection: plan.rule.clone(),
            seed: l.seed,
        },
    )?;
    println!(
        "regime={} selected_step={} checkpoint={}",
        plan.regime,
        run.meta.step,
        out.join("selected.phds").display()
    );
    Ok(())
}

#[derive(Serialize)]
struct ReportLine<'a> {
    k: usize,
    perplexity: f64,
    mc_accuracy: f64,
    flops_per_token: u64,
    active_params: u64,
    answers: &'a [usize],
}

impl<'a> From<&'a EvalReport> for ReportLine<'a> {
    fn from(r: &'a EvalReport) -> Self {
        Self {
            k: r.k_ev,
            perplexity: r.perplexity,
            mc_accuracy: r.mc_accuracy,
            flops_per_token: r.flops_per_token,
            active_params: r.active_params,
            answers: &r.answers,
        }
    }
}

pub fn eval(
    common: &Common,
    ckpt: &Path,
    ks: Option<Vec<usize>>,
    override_k_bound: bool,
) -> Result<(), CliError> {
    let l = load(common)?;
    let out = out_dir(common, &l.cfg, false)?;
    let (model, _) = load_ckpt(ckpt)?;
    check_base(&l, &model)?;
    let ks = ks
        .or_else(|| l.cfg.eval.k_list.clone())
        .unwrap_or_else(|| (1..=model.config.k_pre).collect());
    for &k in &ks {
        check_k(&model.config, k, override_k_bound)?;
    }
    if let Some(dir) = &out {
        prepare_out(dir, &l.text)?;
    }
    let mut lines = Vec::new();
    for &k in &ks {
        let r = evaluate(&model, &l.data.eval, k, override_k_bound).map_err(runtime)?;
        let line = serde_json::to_string(&ReportLine::from(&r)).map_err(runtime)?;
        println!("{line}");
        lines.push(line);
    }
    if let Some(dir) = &out {
        fs::write(dir.join("eval.jsonl"), lines.join("\n") + "\n").map_err(runtime)?;
    }
    Ok(())
}

pub fn sweep(
    common: &Common,
    ckpt: &Path,
    ks: &[usize],
    override_k_bound: bool,
) -> Result<(), CliError> {
    let l = load(common)?;
    let out = out_dir(common, &l.cfg, false)?;
    let (model, _) = load_ckpt(ckpt)?;
    check_base(&l, &model)?;
    for &k in ks {
        check_k(&model.config, k, override_k_bound)?;
    }
    if let Some(dir) = &out {
        prepare_out(dir, &l.text)?;
    }
    let reports = sweep_reports(&model, &l.data.eval, ks, override_k_bound).map_err(runtime)?;
    match &out {
        Some(dir) => {
            let f = fs::File::create(dir.join("sweep.csv")).map_err(runtime)?;
            write_sweep_csv(&reports, f).map_err(runtime)?;
            println!("wrote {}", dir.join("sweep.csv").display());
        }
        None => write_sweep_csv(&reports, std::io::stdout().lock()).map_err(runtime)?,
    }
    Ok(())
}

pub fn agree(
    common: &Common,
    ckpts: &[PathBuf],
    ks: &[usize],
    override_k_bound: bool,
) -> Result<(), CliError> {
    let l = load(common)?;
    let pairs: Vec<(&PathBuf, usize)> = match (ckpts, ks) {
        ([a], [ka, kb]) => vec![(a, *ka), (a, *kb)],
        ([a, b], [k]) => vec![(a, *k), (b, *k)],
        ([a, b], [ka, kb]) => vec![(a, *ka), (b, *kb)],
        _ => {
            return Err(CliError::Validation(
                "agree takes one checkpoint with two --k values, or two checkpoints".into(),
            ))
        }
    };
    let mut models = Vec::new();
    for (path, k) in &pairs {
        let (m, _) = load_ckpt(path)?;
        check_base(&l, &m)?;
        check_k(&m.config, *k, override_k_bound)?;
        models.push(m);
    }
    let answers = |m: &Model<f32>, k: usize, set: &EvalSet| {
        evaluate(m, set, k, override_k_bound)
            .map(|r| r.answers)
            .map_err(runtime)
    };
    let a = answers(&models[0], pairs[0].1, &l.data.eval)?;
    let b = answers(&models[1], pairs[1].1, &l.data.eval)?;
    let name = |p: &Path| p.display().to_string();
    let report = AgreementReport::new(
        &name(pairs[0].0),
        pairs[0].1,
        &a,
        &name(pairs[1].0),
        pairs[1].1,
        &b,
    )
    .map_err(runtime)?;
    println!("{}", report.to_record());
    if let Some(dir) = out_dir(common, &l.cfg, false)? {
        prepare_out(&dir, &l.text)?;
        write_json(&dir.join("agreement.json"), &report)?;
    }
    Ok(())
}

pub fn flops(
    config: Option<&Path>,
    ckpt: Option<&Path>,
    ks: Option<Vec<usize>>,
) -> Result<(), CliError> {
    let model = match (config, ckpt) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| {
                CliError::Validation(format!("cannot read config {}: {e}", path.display()))
            })?;
            RunConfig::parse(&text)?.model.resolve()?
        }
        (None, Some(path)) => load_ckpt(path)?.0.config,
        (None, None) => return Err(CliError::Validation("pass --config or --ckpt".into())),
    };
    let ks = ks.unwrap_or_else(|| (1..=model.k_pre).collect());
    let rows = ks
        .iter()
        .map(|&k| flops_per_token(&model, k).map_err(|e| CliError::Validation(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let mut w = csv::Writer::from_writer(std::io::stdout().lock());
    for r in rows {
        w.serialize(r).map_err(runtime)?;
    }
    w.flush().map_err(runtime)
}

/// One row of an ablation table: a label plus per-k metrics.
struct AblationRun {
    label: String,
    plan: SftPlan,
    epsilon: Option<f64>,
}

fn ablation_runs(
    l: &Loaded,
    base: &Model<f32>,
    kind: AblationKind,
) -> Result<Vec<AblationRun>, CliError> {
    let tokens = l.cfg.train.ablation_tokens;
    let what = "train.ablation_tokens";
    let k_pre = base.config.k_pre;
    let configured = l.cfg.regime(None)?;
    let phds_set = |r: &Regime| match r {
        Regime::Phds { k_train_set, .. } if !k_train_set.is_empty() => Some(k_train_set.clone()),
        _ => None,
    };
    let default_set = || {
        phds_core::schedule::default_k_train_set(k_pre)
            .map_err(|e| CliError::Validation(e.to_string()))
    };
    let mut runs = Vec::new();
    match kind {
        AblationKind::Epsilon => {
            let regime = match &configured {
                Regime::Phds { .. } => configured.clone(),
                _ => Regime::Phds {
                    k_train_set: default_set()?,
                    anchor: None,
                },
            };
            let eps = l
                .cfg
                .ablate
                .epsilons
                .clone()
                .unwrap_or_else(|| (1..=8).map(|i| 10f64.powi(-i)).collect());
            for e in eps {
                if !(e >= 0.0 && e.is_finite()) {
                    return Err(CliError::Validation(format!(
                        "epsilon {e} must be finite and >= 0"
                    )));
                }
                runs.push(AblationRun {
                    label: format!("{e:e}"),
                    plan: plan_sft(l, base, regime.clone(), tokens, what)?,
                    epsilon: Some(e),
                });
            }
        }
        AblationKind::KtrainSets => {
            for set in l.cfg.ablation_sets(k_pre)? {
                let regime = Regime::Phds {
                    k_train_set: set,
                    anchor: None,
                };
                runs.push(AblationRun {
                    label: regime.to_string(),
                    plan: plan_sft(l, base, regime, tokens, what)?,
                    epsilon: None,
                });
            }
        }
        AblationKind::Curriculum => {
            let set = match &l.cfg.ablate.curriculum_set {
                Some(s) => s.clone(),
                None => phds_set(&configured).map_or_else(default_set, Ok)?,
            };
            let anchors = std::iter::once(None).chain(set.iter().map(|&k| Some(k)));
            for anchor in anchors {
                let regime = Regime::Phds {
                    k_train_set: set.clone(),
                    anchor,
                };
                runs.push(AblationRun {
                    label: regime.to_string(),
                    plan: plan_sft(l, base, regime, tokens, what)?,
                    epsilon: None,
                });
            }
        }
        AblationKind::Subset => {
            let subsets = l
                .cfg
                .ablate
                .subsets
                .clone()
                .unwrap_or_else(|| FreezeSubset::ALL.to_vec());
            for s in subsets {
                let mut plan = plan_sft(l, base, configured.clone(), tokens, what)?;
                plan.cfg.freeze_subset = s;
                runs.push(AblationRun {
                    label: s.to_string(),
                    plan,
                    epsilon: None,
                });
            }
        }
    }
    Ok(runs)
}

fn kind_name(kind: AblationKind) -> &'static str {
    match kind {
        AblationKind::Epsilon => "epsilon",
        AblationKind::KtrainSets => "ktrain_sets",
        AblationKind::Curriculum => "curriculum",
        AblationKind::Subset => "subset",
    }
}

pub fn ablate(common: &Common, ckpt: &Path, kind: AblationKind) -> Result<(), CliError> {
    let l = load(common)?;
    let out = out_dir(common, &l.cfg, true)?.expect("required");
    let (base, _) = load_ckpt(ckpt)?;
    check_base(&l, &base)?;
    let mut table_ks: Vec<usize> = l
        .cfg
        .eval
        .k_list
        .clone()
        .unwrap_or_else(|| (1..=base.config.k_pre).collect());
    table_ks.sort_unstable();
    table_ks.dedup();
    for &k in &table_ks {
        check_k(&base.config, k, false)?;
    }
    let runs = ablation_runs(&l, &base, kind)?;
    prepare_out(&out, &l.text)?;
    let path = out.join(format!("ablate_{}.csv", kind_name(kind)));
    let mut w = csv::Writer::from_path(&path).map_err(runtime)?;
    let mut header = vec![kind_name(kind).to_string(), "selected_step".into()];
    header.extend(table_ks.iter().map(|k| format!("acc_k{k}")));
    header.extend(table_ks.iter().map(|k| format!("ppl_k{k}")));
    w.write_record(&header).map_err(runtime)?;
    for run in runs {
        let mut start = base.clone();
        if let Some(e) = run.epsilon {
            start.config.epsilon = e;
        }
        let trained = run_sft(&start, &l.data, &run.plan, None)?;
        let mut row = vec![run.label.clone(), trained.meta.step.to_string()];
        let reports =
            sweep_reports(&trained.model, &l.data.eval, &table_ks, false).map_err(runtime)?;
        row.extend(reports.iter().map(|r| format!("{}", r.mc_accuracy)));
        row.extend(reports.iter().map(|r| format!("{}", r.perplexity)));
        w.write_record(&row).map_err(runtime)?;
        w.flush().map_err(runtime)?;
        println!("{}: {} done", kind_name(kind), run.label);
    }
    println!("wrote {}", path.display());
    Ok(())
}
