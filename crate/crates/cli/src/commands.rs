use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use falcon_core::data_io::{
    export_patients, export_source, ingest_dir, ingest_source, load_sealed, read_mask_native, synth_patients,
    synth_source, write_mask, IngestOptions, PatientVolume, Split,
};
use falcon_core::episodes::{build_inference_task, build_test_tasks};
use falcon_core::geometry::{compare_masks, HdSymmetry};
use falcon_core::inference_eval::{evaluate_tasks, infer_patient, run_ablation_suite, standard_variants, AblationTable, MetricsReport};
use falcon_core::network::count_params_flops;
use falcon_core::training::{baaf_finetune_until, meta_train_until, LogRecord, Validation};
use falcon_core::checkpoint::{load_checkpoint_for, save_checkpoint};
use falcon_core::{Error, FalconConfig, TrainState};
use serde_json::json;

use crate::{Cli, Command, Domain, GlobalArgs, SplitArg};

pub const CHECKPOINT: &str = "checkpoint.falcon";
pub const SNAPSHOT: &str = "config.resolved.toml";
pub const TRAIN_LOG: &str = "train_log.jsonl";

fn resolve(global: &GlobalArgs) -> Result<FalconConfig> {
    let cfg = FalconConfig::resolve(global.config.as_deref(), &global.overrides)?;
    Ok(match global.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Writes to stdout; a reader that closed the pipe early is not an error.
fn emit(text: &str) -> Result<()> {
    use std::io::Write;
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn snapshot(out: &Path, cfg: &FalconConfig) -> Result<()> {
    write(&out.join(SNAPSHOT), cfg.to_toml())
}

fn write_log(out: &Path, history: &[LogRecord]) -> Result<()> {
    let mut s = String::new();
    for r in history {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    write(&out.join(TRAIN_LOG), s)
}

fn ingest_opts(cfg: &FalconConfig) -> IngestOptions {
    IngestOptions {
        resize: cfg.network.input_size,
        ..cfg.ingest
    }
}

fn of_split(vols: &[PatientVolume], split: Split) -> Vec<PatientVolume> {
    vols.iter().filter(|v| v.split == split).cloned().collect()
}

pub fn run(cli: Cli) -> Result<()> {
    // eval-masks needs no config and writes nothing.
    if let Command::EvalMasks { pred, gt, mean_symmetry } = &cli.command {
        return eval_masks(pred, gt, *mean_symmetry);
    }
    let cfg = resolve(&cli.global)?;
    match cli.command {
        Command::Synth {
            domain,
            out,
            patients,
            slices,
            labeled_fraction,
            classes,
            samples_per_class,
            size,
        } => synth(cfg, domain, &out, patients, slices, labeled_fraction, classes, samples_per_class, size),
        Command::Train { source, out, resume } => train(&cfg, &source, &out, resume.as_deref()),
        Command::Finetune { data, init, out, resume } => finetune(&cfg, &data, init.as_deref(), &out, resume.as_deref()),
        Command::Infer {
            data,
            checkpoint,
            out,
            split,
        } => infer(&cfg, &data, &checkpoint, &out, split),
        Command::Eval { data, checkpoint, out } => eval(&cfg, &data, &checkpoint, &out),
        Command::Ablate { out } => ablate(&cfg, &out),
        Command::Report { run } => report(&run),
        Command::EvalMasks { .. } => unreachable!("handled above"),
    }
}

#[allow(clippy::too_many_arguments)]
fn synth(
    mut cfg: FalconConfig,
    domain: Domain,
    out: &Path,
    patients: Option<usize>,
    slices: Option<usize>,
    labeled_fraction: Option<f64>,
    classes: Option<usize>,
    samples_per_class: Option<usize>,
    size: Option<usize>,
) -> Result<()> {
    let size = size.unwrap_or(cfg.network.input_size[0]);
    match domain {
        Domain::Source => {
            cfg.source.classes = classes.unwrap_or(cfg.source.classes);
            cfg.source.samples_per_class = samples_per_class.unwrap_or(cfg.source.samples_per_class);
            let ds = synth_source(cfg.source.classes, cfg.source.samples_per_class, size, cfg.seed)?;
            export_source(out, &ds)?;
            eprintln!("wrote {} classes x {} samples to {}", cfg.source.classes, cfg.source.samples_per_class, out.display());
        }
        Domain::Target => {
            let spec = &mut cfg.target;
            spec.size = size;
            if let Some(n) = patients {
                let held_out = spec.n_val + spec.n_test;
                if n <= held_out {
                    return Err(Error::InvalidConfig(format!(
                        "{n} patients leave none for training after {} validation and {} test patients",
                        spec.n_val, spec.n_test
                    ))
                    .into());
                }
                spec.n_train = n - held_out;
            }
            spec.slices_per_patient = slices.unwrap_or(spec.slices_per_patient);
            spec.labeled_fraction = labeled_fraction.unwrap_or(spec.labeled_fraction);
            let cohort = synth_patients(spec)?;
            let manifest = export_patients(out, "synthetic-target", &cohort.volumes, Some(&cohort.sealed))?;
            eprintln!("wrote {} patients to {}", manifest.patients.len(), out.display());
        }
    }
    snapshot(out, &cfg)
}

fn train(cfg: &FalconConfig, source: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let ds = ingest_source(source, cfg.network.input_size)?;
    let state = match resume {
        Some(p) => load_checkpoint_for(p, &cfg.network)?,
        None => TrainState::new(cfg.network.clone(), cfg.meta.clone())?,
    };
    let state = meta_train_until(state, &ds, cfg.meta.episodes_or_epochs as u64, None)?;
    save_checkpoint(&state, &out.join(CHECKPOINT))?;
    write_log(out, &state.history)?;
    snapshot(out, cfg)?;
    if let Some(last) = state.history.last() {
        eprintln!("episode {}: loss {:.5}", last.step, last.total);
    }
    Ok(())
}

fn finetune(cfg: &FalconConfig, data: &Path, init: Option<&Path>, out: &Path, resume: Option<&Path>) -> Result<()> {
    let (vols, manifest) = ingest_dir(data, &ingest_opts(cfg))?;
    let train = of_split(&vols, Split::Train);
    let val = of_split(&vols, Split::Val);
    let sealed = load_sealed(data, &manifest, cfg.network.input_size)?;
    let validation = Validation {
        patients: &val,
        sealed: &sealed,
        eval: cfg.eval.clone(),
    };
    let state = match (resume, init) {
        (Some(p), _) => load_checkpoint_for(p, &cfg.network)?,
        (None, Some(p)) => {
            let meta = load_checkpoint_for(p, &cfg.network)?;
            TrainState::with_net(meta.best_model(), cfg.finetune.clone())?
        }
        (None, None) => unreachable!("clap requires --init or --resume"),
    };
    let val = (!val.is_empty()).then_some(&validation);
    let state = baaf_finetune_until(state, &train, val, cfg.finetune.episodes_or_epochs as u64, None)?;
    save_checkpoint(&state, &out.join(CHECKPOINT))?;
    write_log(out, &state.history)?;
    write(&out.join("validation.json"), serde_json::to_string_pretty(&state.val_history)? + "\n")?;
    snapshot(out, cfg)?;
    match state.best {
        Some((epoch, hd)) => eprintln!("best validation HD95 {hd:.3} at epoch {epoch}"),
        None => eprintln!("finished {} epochs without validation", state.counter),
    }
    Ok(())
}

fn infer(cfg: &FalconConfig, data: &Path, checkpoint: &Path, out: &Path, split: SplitArg) -> Result<()> {
    let net = load_checkpoint_for(checkpoint, &cfg.network)?.best_model();
    let (vols, _) = ingest_dir(data, &ingest_opts(cfg))?;
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    let k = cfg.network.support_size;
    let mut index = Vec::new();
    for p in vols.iter().filter(|v| v.split == split) {
        let task = build_inference_task(p, k)?;
        let result = infer_patient(&net, p, &task, cfg.eval.threshold)?;
        let mut written = Vec::with_capacity(result.masks.len());
        for (&pos, mask) in result.query.iter().zip(&result.masks) {
            let acq = p.indices[pos];
            write_mask(&out.join("masks").join(&p.id).join(format!("{acq:04}.png")), mask)?;
            written.push(json!({ "index": acq, "foreground": mask.count() }));
        }
        index.push(json!({
            "patient_id": p.id,
            "support": result.support.iter().map(|&s| p.indices[s]).collect::<Vec<_>>(),
            "threshold": result.threshold,
            "slices": written,
        }));
    }
    write(&out.join("inference.json"), serde_json::to_string_pretty(&index)? + "\n")?;
    snapshot(out, cfg)?;
    eprintln!("segmented {} patients", index.len());
    Ok(())
}

fn eval(cfg: &FalconConfig, data: &Path, checkpoint: &Path, out: &Path) -> Result<()> {
    let state = load_checkpoint_for(checkpoint, &cfg.network)?;
    let net = state.best_model();
    let (vols, manifest) = ingest_dir(data, &ingest_opts(cfg))?;
    let test = of_split(&vols, Split::Test);
    let sealed = load_sealed(data, &manifest, cfg.network.input_size)?;
    let refs: Vec<&PatientVolume> = test.iter().collect();
    let tasks = build_test_tasks(&refs, cfg.eval.n_tasks, cfg.network.support_size, cfg.eval.task_seed)?;
    let mut report = evaluate_tasks(&net, &test, &tasks, &sealed, &cfg.eval)?;
    let (params, flops) = count_params_flops(&cfg.network)?;
    report.meta.param_count = params;
    report.meta.flop_count = flops;
    report.meta.config_digest = cfg.digest();
    report.meta.seed = cfg.seed;
    report.meta.best_epoch = state.best.map(|b| b.0);
    write(&out.join("metrics.csv"), report.csv())?;
    write(&out.join("summary.json"), report.summary_json())?;
    snapshot(out, cfg)?;
    emit(&format!(
        "DSC {:.4} ± {:.4}  HD95 {:.3} ± {:.3}  ({} tasks)\n",
        report.dsc.mean,
        report.dsc.std,
        report.hd95.mean,
        report.hd95.std,
        report.tasks.len()
    ))?;
    Ok(())
}

fn eval_masks(pred: &Path, gt: &Path, mean_symmetry: bool) -> Result<()> {
    let p = read_mask_native(pred)?;
    let g = read_mask_native(gt)?;
    if p.shape() != g.shape() {
        return Err(Error::MaskShapeMismatch {
            path: pred.to_path_buf(),
            expected: g.shape(),
            actual: p.shape(),
        }
        .into());
    }
    let mode = if mean_symmetry { HdSymmetry::Mean } else { HdSymmetry::Max };
    let m = compare_masks(&p, &g, mode)?;
    let v = json!({
        "dsc": m.dsc,
        "hd_pred_to_gt": m.hd_pred_to_gt,
        "hd_gt_to_pred": m.hd_gt_to_pred,
        "hd95_pred_to_gt": m.hd95_pred_to_gt,
        "hd95_gt_to_pred": m.hd95_gt_to_pred,
        "hd95": m.hd95,
        "empty_prediction": m.empty_prediction,
        "both_empty": m.both_empty,
    });
    emit(&(serde_json::to_string_pretty(&v)? + "\n"))?;
    Ok(())
}

fn ablate(cfg: &FalconConfig, out: &Path) -> Result<()> {
    let mut progress = |line: &str| eprintln!("{line}");
    let table = run_ablation_suite(&cfg.suite(), &standard_variants(), Some(&mut progress))?;
    write(&out.join("ablation.md"), table.markdown())?;
    write(&out.join("ablation.csv"), table.csv())?;
    write(&out.join("ablation.json"), serde_json::to_string_pretty(&table)? + "\n")?;
    snapshot(out, cfg)?;
    emit(&table.markdown())?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(Some(v))
}

fn report(run: &Path) -> Result<()> {
    if !run.is_dir() {
        return Err(Error::MissingFile(run.to_path_buf()).into());
    }
    let mut md = String::from("# Run report\n\n");
    let mut sections = 0;
    if let Some(r) = read_json::<MetricsReport>(&run.join("summary.json"))? {
        sections += 1;
        let _ = writeln!(md, "## Evaluation\n");
        let _ = writeln!(
            md,
            "DSC {:.4} ± {:.4}, HD95 {:.3} ± {:.3} px over {} tasks (threshold {}, {:?} symmetry, {:?}).\n",
            r.dsc.mean,
            r.dsc.std,
            r.hd95.mean,
            r.hd95.std,
            r.tasks.len(),
            r.threshold,
            r.symmetry,
            r.aggregation
        );
        let _ = writeln!(
            md,
            "Parameters {}, FLOPs per query {}, seed {}, best epoch {}, config {}.\n",
            r.meta.param_count,
            r.meta.flop_count,
            r.meta.seed,
            r.meta.best_epoch.map_or_else(|| "n/a".to_string(), |e| e.to_string()),
            r.meta.config_digest
        );
        md.push_str("| Task | Patient | Slices | DSC | HD95 | Empty predictions |\n|---|---|---|---|---|---|\n");
        for t in &r.tasks {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {:.4} | {:.3} | {} |",
                t.task, t.patient_id, t.n_slices, t.dsc, t.hd95, t.empty_predictions
            );
        }
        md.push('\n');
    }
    if let Some(t) = read_json::<AblationTable>(&run.join("ablation.json"))? {
        sections += 1;
        md.push_str("## Ablation\n\n");
        md.push_str(&t.markdown());
        md.push('\n');
    }
    let log = run.join(TRAIN_LOG);
    if log.is_file() {
        sections += 1;
        md.push_str(&training_summary(&log)?);
    }
    if sections == 0 {
        return Err(Error::MissingFile(PathBuf::from(run).join("summary.json")).into());
    }
    write(&run.join("report.md"), &md)?;
    emit(&md)?;
    Ok(())
}

/// Loss at a handful of evenly spaced steps per record kind.
fn training_summary(log: &Path) -> Result<String> {
    let text = fs::read_to_string(log).map_err(|e| Error::io(log, e))?;
    let records: Vec<LogRecord> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<Result<_, _>>()
        .with_context(|| format!("parsing {}", log.display()))?;
    let mut md = String::from("## Training loss\n\n| Kind | Step | Loss |\n|---|---|---|\n");
    let mut kinds: Vec<&str> = records.iter().map(|r| r.kind.as_str()).collect();
    kinds.dedup();
    kinds.sort_unstable();
    kinds.dedup();
    for kind in kinds {
        let rs: Vec<&LogRecord> = records.iter().filter(|r| r.kind == kind).collect();
        let marks = 5.min(rs.len());
        for i in 0..marks {
            let r = rs[if marks == 1 { 0 } else { i * (rs.len() - 1) / (marks - 1) }];
            let _ = writeln!(md, "| {kind} | {} | {:.5} |", r.step, r.total);
        }
    }
    md.push('\n');
    Ok(md)
}
