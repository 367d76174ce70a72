use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::json;
use trimlab::checkpoint::Checkpoint;
use trimlab::config::{ConfigError, Precision, RunConfig};
use trimlab::costbench::{self, CostReport};
use trimlab::data::{self, Dataset, Split, TaskKind, TaskSpec};
use trimlab::masking::MaskAssignment;
use trimlab::nn::{HeadSpec, ModelInstance};
use trimlab::training::{
    evaluate, run_downstream, run_pretrain, select_for_targets, write_history, BestEval, DownstreamOutcome, FinalEval, Mode,
    TaskData,
};
use trimlab::trimming::{apply_trim, plan_trim, verify_equivalence, TrimPlan};
use trimlab::Scalar;

use crate::{Command, VerificationFailed};

/// Final metrics of every training command.
#[derive(Debug, Serialize)]
struct RunMetrics {
    mode: Mode,
    task: TaskKind,
    seed: u64,
    steps: usize,
    params: usize,
    head_params: usize,
    lambda: Option<f64>,
    #[serde(rename = "final")]
    final_eval: FinalEval,
    best: Option<BestEval>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn prepare(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output).with_context(|| format!("creating {}", cfg.output.display()))?;
    fs::write(cfg.output.join("config.resolved.json"), cfg.resolved_json() + "\n")?;
    Ok(cfg.output.clone())
}

fn verify_tolerance<T: Scalar>() -> f64 {
    if T::DTYPE == "f64" {
        1e-10
    } else {
        1e-5
    }
}

fn precision_name(p: Precision) -> &'static str {
    match p {
        Precision::F32 => "f32",
        Precision::F64 => "f64",
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

/// Loads a frozen encoder and attaches the configured head shape.
fn load_encoder<T: Scalar>(cfg: &RunConfig, path: &Path) -> Result<ModelInstance<T>> {
    let ckpt = load_checkpoint(path)?;
    let mut model = ckpt.model::<T>()?;
    let want = cfg.model_spec()?;
    if model.spec.input != want.input || model.spec.backbone != want.backbone {
        return Err(ConfigError::Invalid(format!("model section does not describe the encoder in {}", path.display())).into());
    }
    let outputs = cfg.task.task.outputs().ok_or_else(|| ConfigError::Invalid("task.task must be a labeled task".into()))?;
    model.reset_head(Some(HeadSpec { hidden: cfg.model.head_hidden, outputs }), cfg.train.seed);
    Ok(model)
}

fn save_downstream<T: Scalar>(cfg: &RunConfig, dir: &Path, out: &DownstreamOutcome<T>) -> Result<()> {
    let mut ckpt = Checkpoint::from_model(&out.model);
    if let Some(m) = &out.masks {
        ckpt = ckpt.with_masks(m);
    }
    if let Some(s) = &out.ssf {
        ckpt = ckpt.with_ssf(s);
    }
    ckpt.meta.insert("mode".into(), json!(cfg.train.mode));
    ckpt.meta.insert("seed".into(), json!(cfg.train.seed));
    ckpt.meta.insert("precision".into(), json!(precision_name(cfg.precision)));
    ckpt.save(&dir.join("model.ckpt"))?;
    write_history(&dir.join("history.jsonl"), &out.history)?;
    let metrics = RunMetrics {
        mode: cfg.train.mode,
        task: cfg.task.task,
        seed: cfg.train.seed,
        steps: cfg.train.steps,
        params: out.model.encoder_param_count(),
        head_params: out.model.head_param_count(),
        lambda: out.lambda,
        final_eval: out.final_eval,
        best: out.best,
    };
    write_json(&dir.join("metrics.json"), &metrics)?;
    log::info!(
        "{:?}: val {:?}, test {:?}, trim ratio {:.3}",
        cfg.train.mode,
        out.final_eval.val_metric,
        out.final_eval.test_metric,
        out.final_eval.trim_ratio
    );
    Ok(())
}

fn downstream<T: Scalar>(mut cfg: RunConfig, mode: Mode, model: ModelInstance<T>) -> Result<()> {
    cfg.train.mode = mode;
    let dir = prepare(&cfg)?;
    let data = TaskData::<T>::build_threaded(&cfg.task, cfg.threads)?;
    let out = run_downstream(&model, &data, &cfg.train, &cfg.sparsity)?;
    save_downstream(&cfg, &dir, &out)
}

pub fn run<T: Scalar>(mut cfg: RunConfig, command: &Command) -> Result<()> {
    match command {
        Command::Pretrain => {
            cfg.train.mode = Mode::Pretrain;
            let dir = prepare(&cfg)?;
            let spec = cfg.model.build_spec(cfg.input_spec(), None)?;
            let model = ModelInstance::<T>::build(spec, cfg.train.seed)?;
            let task = TaskSpec { task: TaskKind::Pretext, ..cfg.task };
            let train = Dataset::<T>::build_threaded(&task, Split::Train, task.train_size, cfg.threads)?;
            let val = Dataset::<T>::build_threaded(&task, Split::Val, task.val_size, cfg.threads)?;
            let out = run_pretrain(&model, &train, Some(&val), &cfg.train)?;
            let mut ckpt = Checkpoint::from_model(&out.model);
            ckpt.meta.insert("mode".into(), json!(Mode::Pretrain));
            ckpt.meta.insert("seed".into(), json!(cfg.train.seed));
            ckpt.meta.insert("precision".into(), json!(precision_name(cfg.precision)));
            ckpt.save(&dir.join("encoder.ckpt"))?;
            write_history(&dir.join("history.jsonl"), &out.history)?;
            log::info!("pretrained encoder written to {}", dir.join("encoder.ckpt").display());
            Ok(())
        }
        Command::Probe { encoder } => {
            let m = load_encoder::<T>(&cfg, encoder)?;
            downstream(cfg, Mode::Probe, m)
        }
        Command::MaskTrain { encoder } => {
            let m = load_encoder::<T>(&cfg, encoder)?;
            downstream(cfg, Mode::Mask, m)
        }
        Command::Ssf { encoder } => {
            let m = load_encoder::<T>(&cfg, encoder)?;
            downstream(cfg, Mode::Ssf, m)
        }
        Command::Scratch { plan } => {
            let text = fs::read_to_string(plan).with_context(|| format!("reading {}", plan.display()))?;
            let plan: TrimPlan = serde_json::from_str(&text).with_context(|| format!("parsing {}", plan.display()))?;
            let want = cfg.model_spec()?;
            if plan.spec_before.input != want.input || plan.spec_before.backbone != want.backbone {
                return Err(ConfigError::Invalid("trim plan was made for a different model section".into()).into());
            }
            let mut spec = plan.spec_after;
            spec.head = want.head;
            let model = ModelInstance::<T>::build(spec, cfg.train.seed)?;
            downstream(cfg, Mode::Scratch, model)
        }
        Command::Trim { masked, probes } => trim::<T>(cfg, masked, *probes),
        Command::Sweep { encoder } => sweep::<T>(cfg, encoder),
        Command::Bench { base, trimmed } => bench::<T>(cfg, base, trimmed),
        Command::Eval { checkpoint, split } => {
            let dir = prepare(&cfg)?;
            let ckpt = load_checkpoint(checkpoint)?;
            let model = ckpt.model::<T>()?;
            let masks = ckpt.masks::<T>()?.map(|m| MaskAssignment::from_sites(&m));
            let ssf = ckpt.ssf::<T>()?;
            let split: Split = (*split).into();
            let data = Dataset::<T>::build_threaded(&cfg.task, split, cfg.task.split_size(split), cfg.threads)?;
            let metric = evaluate(&model, masks.as_ref(), ssf.as_ref(), &data)?;
            let trim_ratio = match &masks {
                Some(m) => trimlab::trimming::trim_ratio(&model.spec, m)?,
                None => 0.0,
            };
            write_json(&dir.join("eval.json"), &json!({ "split": format!("{split:?}").to_lowercase(), "metric": metric, "trim_ratio": trim_ratio }))?;
            println!("{}", metric.map_or("n/a".into(), |m| format!("{m:.4}")));
            Ok(())
        }
        Command::ExportWav { split, index, count } => {
            let dir = prepare(&cfg)?;
            let split: Split = (*split).into();
            for i in *index..index + count {
                let clip = data::generate(&cfg.task, split, i)?;
                let path = dir.join(format!("{}_{i:05}.wav", format!("{split:?}").to_lowercase()));
                data::export_wav(&path, &clip.waveform, cfg.task.sample_rate)?;
            }
            Ok(())
        }
    }
}

fn trim<T: Scalar>(cfg: RunConfig, masked: &Path, probes: usize) -> Result<()> {
    let dir = prepare(&cfg)?;
    let ckpt = load_checkpoint(masked)?;
    let model = ckpt.model::<T>()?;
    let Some(sites) = ckpt.masks::<T>()? else {
        bail!("{} carries no mask logits", masked.display());
    };
    let masks = MaskAssignment::from_sites(&sites);
    let plan = plan_trim(&model.spec, &masks)?;
    let (trimmed, mut report) = apply_trim(&model, &plan)?;
    let mut task = cfg.task;
    if task.task == TaskKind::Pretext {
        task.task = TaskKind::ToneClass;
    }
    let probe_set = Dataset::<T>::build_threaded(&task, Split::Test, probes.min(task.test_size), cfg.threads)?;
    let deviation = verify_equivalence(&model, &masks, &trimmed, &plan, &probe_set.features)?;
    report.max_abs_deviation = Some(deviation);
    let mut out = Checkpoint::from_model(&trimmed);
    out.meta = ckpt.meta.clone();
    out.meta.insert("trimmed".into(), json!(true));
    out.save(&dir.join("trimmed.ckpt"))?;
    write_json(&dir.join("trim_report.json"), &report)?;
    write_json(&dir.join("trim_plan.json"), &plan)?;
    log::info!(
        "trimmed {} -> {} encoder parameters (ratio {:.3}), max deviation {deviation:e}",
        report.params_before,
        report.params_after,
        report.trimming_ratio
    );
    let tolerance = verify_tolerance::<T>();
    if !(deviation <= tolerance) {
        return Err(VerificationFailed { deviation, tolerance }.into());
    }
    Ok(())
}

fn sweep<T: Scalar>(mut cfg: RunConfig, encoder: &Path) -> Result<()> {
    cfg.train.mode = Mode::Mask;
    let dir = prepare(&cfg)?;
    let model = load_encoder::<T>(&cfg, encoder)?;
    let data = TaskData::<T>::build_threaded(&cfg.task, cfg.threads)?;
    let mut rows = Vec::new();
    for &t in &cfg.sweep.t_grid {
        let mut run_cfg = cfg.clone();
        run_cfg.sparsity.t = t;
        run_cfg.output = dir.join(format!("t_{t:.2}"));
        fs::create_dir_all(&run_cfg.output)?;
        let out = run_downstream(&model, &data, &run_cfg.train, &run_cfg.sparsity)?;
        save_downstream(&run_cfg, &run_cfg.output, &out)?;
        let masks = MaskAssignment::from_sites(out.masks.as_deref().unwrap_or_default());
        let plan = plan_trim(&out.model.spec, &masks)?;
        let cost = costbench::count_costs(&plan.spec_after, 1)?;
        rows.push((t, out.final_eval.trim_ratio, out.final_eval.test_metric, cost.params, cost.macs));
    }
    let ratios: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let fmt_metric = |m: Option<f64>| m.map_or(String::new(), |v| format!("{v:.6}"));
    let mut csv = String::from("row,t,trim_ratio,metric,params,macs\n");
    for (t, r, m, p, macs) in &rows {
        csv.push_str(&format!("grid,{t},{r:.6},{},{p},{macs}\n", fmt_metric(*m)));
    }
    for (target, pick) in cfg.sweep.targets.iter().zip(select_for_targets(&ratios, &cfg.sweep.targets)) {
        match pick.map(|i| &rows[i]) {
            Some((t, r, m, p, macs)) => csv.push_str(&format!("target_{target},{t},{r:.6},{},{p},{macs}\n", fmt_metric(*m))),
            None => csv.push_str(&format!("target_{target},,,,,\n")),
        }
    }
    fs::write(dir.join("sweep.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn bench<T: Scalar>(cfg: RunConfig, base: &Path, trimmed: &Path) -> Result<()> {
    let dir = prepare(&cfg)?;
    let report = |path: &Path| -> Result<CostReport> {
        let model = load_checkpoint(path)?.model::<T>()?;
        let mut r = costbench::count_costs(&model.spec, cfg.bench.batch)?;
        r.bytes = Some(fs::metadata(path)?.len());
        let input = costbench::bench_input(&model.spec, cfg.bench.batch, cfg.train.seed);
        r.timing = Some(costbench::time_forward(&model, &input, cfg.bench.warmup, cfg.bench.reps)?);
        Ok(r)
    };
    let mut b = report(base)?;
    let mut t = report(trimmed)?;
    costbench::compare(&mut b, &mut t);
    write_json(&dir.join("bench.json"), &json!({ "base": b, "trimmed": t }))?;
    fs::write(dir.join("comparison.csv"), costbench::comparison_csv(&[("base", &b), ("trim", &t)]))?;
    for (label, r) in [("base", &b), ("trim", &t)] {
        let speed = r.speedup.map_or(String::new(), |s| format!(", x{s:.2}"));
        println!("{}{speed}", costbench::render_row(label, r.bytes.unwrap_or(0), r.macs));
    }
    Ok(())
}
