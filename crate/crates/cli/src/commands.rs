use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, Context};
use clarify::checkpoint::Provenance;
use clarify::config::RunConfig;
use clarify::data::synth::{generate_synthetic_task, Grammar};
use clarify::data::{
    expand, load_instances, load_labels, load_scores, write_instances, write_labels, write_scores,
    FilledExample, Instance, Pattern, Vocabulary, FILLERS_PER_INSTANCE,
};
use clarify::ensemble::{pattern_aware_ensemble, standard_ensemble, AggregationMode, PredictionSet};
use clarify::evaluation::{per_pattern_report, render_table, Targets};
use clarify::heads::Task;
use clarify::rtd::{evaluate_rtd, generate_corpus, heldout_corpus, pretrain as run_pretrain, Corpus};
use clarify::training::{finetune as run_finetune, FinetuneResult};
use clarify::{Checkpoint, PlausibilityModel};
use log::info;
use serde_json::json;

use crate::rundir::{check_target, RunDir};

fn read(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn shown(path: &Path) -> String {
    path.display().to_string()
}

/// Example id → pattern for all five fillers of every instance.
fn patterns_of(instances: &[Instance]) -> BTreeMap<String, Pattern> {
    instances
        .iter()
        .flat_map(|inst| (1..=FILLERS_PER_INSTANCE).map(move |k| (inst.example_id(k), inst.pattern)))
        .collect()
}

fn model_id_of(path: &Path) -> anyhow::Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| anyhow!("cannot derive a model id from {}", path.display()))
}

fn gold_targets(task: Task, path: &Path) -> anyhow::Result<Targets> {
    Ok(match task {
        Task::Classification => Targets::Labels(load_labels(path)?),
        Task::Regression => Targets::Scores(load_scores(path)?),
    })
}

pub fn gen_synth(cfg: &RunConfig, out: &Path, force: bool) -> anyhow::Result<()> {
    let dir = RunDir::create(out, force)?;
    let corpus_cfg = cfg.corpus()?;
    corpus_cfg.validate(cfg.backbone()?.max_seq_len)?;
    let corpus = generate_corpus(&corpus_cfg)?;
    let heldout = heldout_corpus(&corpus_cfg, cfg.heldout_sentences()?)?;
    let ds = generate_synthetic_task(&cfg.synth_task()?, &Grammar::new())?;

    corpus.vocab.save(dir.file("vocab.txt"))?;
    corpus.save(dir.file("corpus.txt"))?;
    heldout.save(dir.file("heldout.txt"))?;
    let mut counts = serde_json::Map::new();
    for (name, split) in ds.splits() {
        write_instances(dir.file(&format!("{name}.tsv")), &split.instances)?;
        write_labels(
            dir.file(&format!("{name}_labels.tsv")),
            split.labels.iter().map(|(k, v)| (k.as_str(), *v)),
        )?;
        write_scores(
            dir.file(&format!("{name}_scores.tsv")),
            split.scores.iter().map(|(k, v)| (k.as_str(), *v)),
        )?;
        counts.insert(
            name.to_string(),
            json!({ "instances": split.instances.len(), "examples": split.labels.len() }),
        );
    }
    let manifest = json!({
        "seed": cfg.seed()?,
        "vocab_tokens": corpus.vocab.len(),
        "corpus_sentences": corpus.sentences.len(),
        "heldout_sentences": heldout.sentences.len(),
        "splits": counts,
    });
    dir.write("manifest.json", serde_json::to_string_pretty(&manifest)? + "\n")?;
    dir.echo(cfg, "gen-synth", json!({}))?;
    info!("wrote synthetic data to {}", out.display());
    Ok(())
}

pub fn pretrain(cfg: &RunConfig, data: &Path, out: &Path, force: bool) -> anyhow::Result<()> {
    let vocab = Vocabulary::load(data.join("vocab.txt"))?;
    let corpus = Corpus::parse(&read(&data.join("corpus.txt"))?, vocab.clone())?;
    let heldout = Corpus::parse(&read(&data.join("heldout.txt"))?, vocab)?;
    let dir = RunDir::create(out, force)?;
    let pc = cfg.pretrain()?;
    let provenance = Provenance {
        config_hash: cfg.hash(),
        seed: pc.seed,
        notes: BTreeMap::from([("stage".to_string(), "pretrain".to_string())]),
    };
    let result = run_pretrain::<f64>(&cfg.backbone()?, &cfg.generator()?, &corpus, &pc, provenance)?;
    let eval = evaluate_rtd(
        &result.discriminator,
        &result.generator,
        &heldout.sentences,
        pc.mask_rate,
        pc.seed,
    )?;
    info!(
        "held-out RTD accuracy {:.4}, loss {:.4} (majority bound {:.4})",
        eval.accuracy, eval.loss, eval.majority_bound
    );
    result.checkpoint.save(dir.file("model.ckpt"))?;
    dir.write("pretrain_log.tsv", result.log_tsv())?;
    dir.write("rtd_eval.json", serde_json::to_string_pretty(&eval)? + "\n")?;
    dir.echo(cfg, "pretrain", json!({ "data": shown(data) }))
}

fn load_split(
    data: &Path,
    name: &str,
    task: Task,
    vocab: &Vocabulary,
    max_len: usize,
    placeholder: &str,
) -> anyhow::Result<Vec<FilledExample>> {
    let instances = load_instances(data.join(format!("{name}.tsv")), placeholder)?;
    let (labels, scores) = match task {
        Task::Classification => (Some(load_labels(data.join(format!("{name}_labels.tsv")))?), None),
        Task::Regression => (None, Some(load_scores(data.join(format!("{name}_scores.tsv")))?)),
    };
    Ok(expand(&instances, vocab, max_len, placeholder, labels.as_ref(), scores.as_ref())?)
}

struct Job<'a> {
    ckpt: &'a Checkpoint,
    train: &'a [FilledExample],
    dev: &'a [FilledExample],
    inputs: serde_json::Value,
}

fn finetune_one(job: &Job, cfg: &RunConfig, dir: &RunDir) -> anyhow::Result<FinetuneResult<f64>> {
    let tc = cfg.finetune()?;
    let result = run_finetune(job.ckpt, job.train, job.dev, &tc)?;
    result.model.to_checkpoint().save(dir.file("model.ckpt"))?;
    dir.write("train_log.tsv", result.log_tsv())?;
    let summary = json!({
        "run": tc.run_name(),
        "task": tc.task.name(),
        "best_epoch": result.best_epoch,
        "best_dev_metric": result.best_metric(),
        "history": result.history,
    });
    dir.write("summary.json", serde_json::to_string_pretty(&summary)? + "\n")?;
    dir.echo(cfg, "finetune", job.inputs.clone())?;
    Ok(result)
}

pub fn finetune(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    grid: bool,
    jobs: usize,
    force: bool,
) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let backbone = cfg.backbone()?;
    ckpt.check_backbone(&backbone)?;
    let vocab = Vocabulary::from_tokens(&ckpt.meta.vocab)?;
    let task = cfg.finetune()?.task;
    let placeholder = cfg.placeholder()?;
    let train = load_split(data, "train", task, &vocab, backbone.max_seq_len, &placeholder)?;
    let dev = load_split(data, "dev", task, &vocab, backbone.max_seq_len, &placeholder)?;
    let job = Job {
        ckpt: &ckpt,
        train: &train,
        dev: &dev,
        inputs: json!({ "checkpoint": shown(checkpoint), "data": shown(data) }),
    };
    let top = RunDir::create(out, force)?;
    if !grid {
        finetune_one(&job, cfg, &top)?;
        return Ok(());
    }

    let mut cells = Vec::new();
    for lr in cfg.lr_grid()? {
        for bs in cfg.batch_grid()? {
            let mut c = cfg.clone();
            c.set("finetune.learning_rate", &format!("{lr:e}"))?;
            c.set("finetune.batch_size", &bs.to_string())?;
            cells.push(c);
        }
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<anyhow::Result<(String, usize, f64)>>>> =
        Mutex::new((0..cells.len()).map(|_| None).collect());
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(cell) = cells.get(i) else { break };
        let outcome = (|| {
            let name = cell.finetune()?.run_name();
            let dir = RunDir::create(&top.file(&name), force)?;
            let r = finetune_one(&job, cell, &dir)?;
            Ok((name, r.best_epoch, r.best_metric()))
        })();
        results.lock().expect("no worker panicked")[i] = Some(outcome);
    };
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, cells.len()) {
            s.spawn(worker);
        }
    });

    let metric = match task {
        Task::Classification => "accuracy",
        Task::Regression => "spearman",
    };
    let mut table = format!("run\tbest_epoch\tdev_{metric}\n");
    let mut first_err = None;
    for r in results.into_inner().expect("no worker panicked").into_iter().flatten() {
        match r {
            Ok((name, epoch, value)) => table.push_str(&format!("{name}\t{epoch}\t{value:?}\n")),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    top.write("grid.tsv", table)?;
    top.echo(cfg, "finetune --grid", job.inputs.clone())?;
    match first_err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

pub fn predict(
    cfg: &RunConfig,
    model_path: &Path,
    instances: &Path,
    out_dir: &Path,
    model_id: Option<String>,
    force: bool,
) -> anyhow::Result<()> {
    let model_id = match model_id {
        Some(id) => id,
        None => model_path
            .parent()
            .and_then(|p| p.file_name())
            .and_then(|s| s.to_str())
            .map(str::to_string)
            .ok_or_else(|| anyhow!("pass --model-id; cannot derive one from {}", model_path.display()))?,
    };
    let target = out_dir.join(format!("{model_id}.tsv"));
    check_target(&target, force)?;
    let model = PlausibilityModel::from_checkpoint(Checkpoint::load(model_path)?)?;
    let placeholder = cfg.placeholder()?;
    let instances = load_instances(instances, &placeholder)?;
    let examples = expand(
        &instances,
        &model.vocab,
        model.backbone_config().max_seq_len,
        &placeholder,
        None,
        None,
    )?;
    let preds = model.predict_all(&examples)?;
    let map = examples.iter().map(|e| e.example_id.clone()).zip(preds).collect();
    let set = PredictionSet::new(&model_id, model.task, map, &patterns_of(&instances))?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    set.save(&target)?;
    info!("wrote {} predictions to {}", set.len(), target.display());
    Ok(())
}

pub struct EnsembleInputs {
    pub dev: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
    pub dev_instances: PathBuf,
    pub test_instances: PathBuf,
    pub dev_gold: PathBuf,
    pub mode: String,
}

fn load_sets(files: &[PathBuf], patterns: &BTreeMap<String, Pattern>) -> anyhow::Result<Vec<PredictionSet>> {
    files
        .iter()
        .map(|f| Ok(PredictionSet::load(f, &model_id_of(f)?, patterns)?))
        .collect()
}

pub fn ensemble(cfg: &RunConfig, inp: &EnsembleInputs, out: &Path, force: bool) -> anyhow::Result<()> {
    let placeholder = cfg.placeholder()?;
    let mode = AggregationMode::parse(&inp.mode)
        .ok_or_else(|| anyhow!("unknown mode {:?}; use select_top1 or mean_topk(k)", inp.mode))?;
    let dev_patterns = patterns_of(&load_instances(&inp.dev_instances, &placeholder)?);
    let test_patterns = patterns_of(&load_instances(&inp.test_instances, &placeholder)?);
    let dev_sets = load_sets(&inp.dev, &dev_patterns)?;
    let test_sets = load_sets(&inp.test, &test_patterns)?;
    let gold = gold_targets(dev_sets[0].task, &inp.dev_gold)?;

    let (test_out, spec) = pattern_aware_ensemble(&dev_sets, &gold, &test_sets, mode)?;
    let (dev_out, _) = pattern_aware_ensemble(&dev_sets, &gold, &dev_sets, mode)?;
    let dir = RunDir::create(out, force)?;
    for (split, aware, sets) in [("dev", &dev_out, &dev_sets), ("test", &test_out, &test_sets)] {
        let sub = RunDir::create(&dir.file(split), true)?;
        aware.save(sub.file(&format!("{}.tsv", aware.model_id)))?;
        let std = standard_ensemble(sets)?;
        std.save(sub.file(&format!("{}.tsv", std.model_id)))?;
    }
    dir.write("ensemble_spec.txt", spec.render())?;
    dir.write("ensemble_spec.json", serde_json::to_string_pretty(&spec)? + "\n")?;
    let shown_all = |v: &[PathBuf]| v.iter().map(|p| shown(p)).collect::<Vec<_>>();
    dir.echo(
        cfg,
        "ensemble",
        json!({
            "dev": shown_all(&inp.dev),
            "test": shown_all(&inp.test),
            "dev_gold": shown(&inp.dev_gold),
            "mode": mode.name(),
        }),
    )
}

pub fn evaluate(
    cfg: &RunConfig,
    preds: &[PathBuf],
    gold: &Path,
    instances: &Path,
    out: Option<&Path>,
    force: bool,
) -> anyhow::Result<()> {
    let patterns = patterns_of(&load_instances(instances, &cfg.placeholder()?)?);
    let sets = load_sets(preds, &patterns)?;
    let gold = gold_targets(sets[0].task, gold)?;
    let mut rows = Vec::new();
    for set in &sets {
        let report = per_pattern_report(&set.to_targets(), &gold, &set.patterns).map_err(clarify::Error::from)?;
        rows.push((set.model_id.clone(), report));
    }
    let table = render_table(&rows);
    print!("{table}");
    if let Some(out) = out {
        let dir = RunDir::create(out, force)?;
        dir.write("report.txt", &table)?;
        for (id, report) in &rows {
            dir.write(&format!("{id}.report.tsv"), report.to_tsv())?;
        }
        let json_rows: BTreeMap<&str, _> = rows.iter().map(|(id, r)| (id.as_str(), r)).collect();
        dir.write("report.json", serde_json::to_string_pretty(&json_rows)? + "\n")?;
        dir.echo(cfg, "evaluate", json!({ "pred": preds.iter().map(|p| shown(p)).collect::<Vec<_>>() }))?;
    }
    Ok(())
}
