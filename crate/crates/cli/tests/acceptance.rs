//! End-to-end acceptance run. Prints one PASS/FAIL/INFO/SKIP line per
//! criterion and fails if any criterion fails.
//!
//! The synthetic pipeline runs at default scale, so this target takes several
//! minutes on one core. Set `CLARIFY_OFFICIAL_DIR` to a directory holding the
//! official `train.tsv`, `dev.tsv` and `test.tsv` to also check their totals.

use std::collections::BTreeMap;
use std::fs::File;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use clarify::backbone::BackboneConfig;
use clarify::data::{
    expand, load_instances, load_labels, load_scores, split_tokens, FilledExample, Instance,
    Label, Pattern, Vocabulary, DEFAULT_PLACEHOLDER, FILLERS_PER_INSTANCE,
};
use clarify::ensemble::{pattern_aware_ensemble, AggregationMode, PredictionSet};
use clarify::evaluation::{accuracy, spearman, Targets};
use clarify::heads::{span_pool, SpanIndex, Task};
use clarify::model::{HeadOptions, Prediction};
use clarify::rng::{stream, StreamRng};
use clarify::rtd::Discriminator;
use clarify::tensor::{Activation, Mode, Var};
use clarify::{Checkpoint, Graph, ParamStore, PlausibilityModel, TaskHead, Tensor};
use rand::Rng;

const CPU_BUDGET_S: f64 = 300.0;

/// Smaller grid than the default so the run fits a few minutes of CPU.
const PIPELINE_CONF: &str = "\
finetune.lr_grid = 1e-3,7e-4
finetune.batch_grid = 16
";

enum Outcome {
    Pass(String),
    Fail(String),
    Info(String),
    Skip(String),
}

type Check = Result<String, String>;

fn verdict(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn thread_cpu_seconds() -> f64 {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: `ts` is a valid, writable timespec.
    unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9
}

/// Runs the binary in `dir` and returns the child's user+system CPU seconds.
fn run_timed(dir: &Path, log: &str, args: &[&str]) -> f64 {
    let err = File::create(dir.join(log)).unwrap();
    let child = Command::new(env!("CARGO_BIN_EXE_clarify"))
        .current_dir(dir)
        .env("RUST_LOG", "info")
        .args(args)
        .stdout(Stdio::null())
        .stderr(err)
        .spawn()
        .expect("binary runs");
    let mut status = 0;
    // SAFETY: zeroed rusage is a valid value; wait4 reaps exactly this child.
    let mut usage: libc::rusage = unsafe { std::mem::zeroed() };
    let pid = unsafe { libc::wait4(child.id() as libc::pid_t, &mut status, 0, &mut usage) };
    assert_eq!(pid, child.id() as libc::pid_t, "wait4 failed");
    let ok = libc::WIFEXITED(status) && libc::WEXITSTATUS(status) == 0;
    assert!(
        ok,
        "{args:?} failed:\n{}",
        std::fs::read_to_string(dir.join(log)).unwrap_or_default()
    );
    let secs = |t: libc::timeval| t.tv_sec as f64 + t.tv_usec as f64 * 1e-6;
    secs(usage.ru_utime) + secs(usage.ru_stime)
}

/// Prepends the pipeline config to a command line.
fn with<'a>(args: &[&'a str]) -> Vec<&'a str> {
    [&["--config", "acc.conf"][..], args].concat()
}

const TINY: &[&str] = &[
    "--set", "corpus.n_sentences=60", "--set", "corpus.heldout_sentences=10", "--set", "pretrain.steps=5",
    "--set", "task.train_instances=8", "--set", "task.dev_instances=8", "--set", "task.test_instances=8",
    "--set", "finetune.epochs=1", "--set", "finetune.lr_grid=1e-3,5e-4",
];

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    with(&[&TINY[..], args].concat())
}

fn run(dir: &Path, args: &[&str]) {
    run_timed(dir, "last.log", args);
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn patterns_of(instances: &[Instance]) -> BTreeMap<String, Pattern> {
    instances
        .iter()
        .flat_map(|i| (1..=FILLERS_PER_INSTANCE).map(move |k| (i.example_id(k), i.pattern)))
        .collect()
}

fn argmax(p: &[f64; 3]) -> usize {
    (0..3).fold(0, |b, k| if p[k] > p[b] { k } else { b })
}

/// Correct predictions counted directly from probabilities.
fn brute_correct(set: &PredictionSet, gold: &BTreeMap<String, Label>) -> usize {
    gold.iter()
        .filter(|(id, g)| match set.predictions[*id] {
            Prediction::Probs(p) => argmax(&p) == g.index(),
            Prediction::Score(_) => false,
        })
        .count()
}

// ---------------------------------------------------------------------------
// Gradient suite

const H: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
const FD_SEEDS: u64 = 20;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn rand_tensor(rng: &mut StreamRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Var>;

fn op_error(inputs: &[Tensor], seed: u64, build: &Build) -> f64 {
    let forward = |g: &mut Graph, vals: &[Tensor]| {
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = build(g, &vars);
        let shape = g.shape(out).to_vec();
        let w = g.constant(rand_tensor(&mut stream(seed, "fd-w", 0), &shape, -1.0, 1.0));
        let prod = g.mul(out, w).unwrap();
        (g.sum(prod).unwrap(), vars)
    };
    let eval = |vals: &[Tensor]| {
        let mut g = Graph::new();
        let (l, _) = forward(&mut g, vals);
        g.value(l).item()
    };
    let mut g = Graph::new();
    let (loss, vars) = forward(&mut g, inputs);
    g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for i in 0..inputs[k].len() {
            let (mut plus, mut minus) = (inputs.to_vec(), inputs.to_vec());
            plus[k].data_mut()[i] += H;
            minus[k].data_mut()[i] -= H;
            worst = worst.max(rel_err(analytic[i], (eval(&plus) - eval(&minus)) / (2.0 * H)));
        }
    }
    worst
}

fn op_table() -> Vec<(&'static str, Vec<Vec<usize>>, (f64, f64), Build)> {
    fn b(f: impl Fn(&mut Graph, &[Var]) -> Var + 'static) -> Build {
        Box::new(f)
    }
    let s = |v: &[&[usize]]| v.iter().map(|x| x.to_vec()).collect::<Vec<_>>();
    let unit = (-1.0, 1.0);
    vec![
        ("matmul", s(&[&[3, 4], &[4, 2]]), unit, b(|g, v| g.matmul(v[0], v[1]).unwrap())),
        ("matmul_nt", s(&[&[3, 4], &[5, 4]]), unit, b(|g, v| g.matmul_nt(v[0], v[1]).unwrap())),
        ("add", s(&[&[2, 3], &[2, 3]]), unit, b(|g, v| g.add(v[0], v[1]).unwrap())),
        ("sub", s(&[&[2, 3], &[2, 3]]), unit, b(|g, v| g.sub(v[0], v[1]).unwrap())),
        ("mul", s(&[&[2, 3], &[2, 3]]), unit, b(|g, v| g.mul(v[0], v[1]).unwrap())),
        ("add_bias", s(&[&[3, 4], &[4]]), unit, b(|g, v| g.add_bias(v[0], v[1]).unwrap())),
        ("affine", s(&[&[2, 3]]), unit, b(|g, v| g.affine(v[0], 4.0, 1.0).unwrap())),
        ("scale", s(&[&[2, 3]]), unit, b(|g, v| g.scale(v[0], -0.7).unwrap())),
        ("transpose", s(&[&[2, 3]]), unit, b(|g, v| g.transpose(v[0]).unwrap())),
        ("tanh", s(&[&[3, 4]]), (-3.0, 3.0), b(|g, v| g.tanh(v[0]).unwrap())),
        ("sigmoid", s(&[&[3, 4]]), (-3.0, 3.0), b(|g, v| g.sigmoid(v[0]).unwrap())),
        ("gelu", s(&[&[3, 4]]), (-3.0, 3.0), b(|g, v| g.gelu(v[0]).unwrap())),
        ("softmax", s(&[&[3, 5]]), (-2.0, 2.0), b(|g, v| g.softmax(v[0]).unwrap())),
        ("log_softmax", s(&[&[3, 5]]), (-2.0, 2.0), b(|g, v| g.log_softmax(v[0]).unwrap())),
        (
            "layer_norm",
            s(&[&[3, 6], &[6], &[6]]),
            unit,
            b(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()),
        ),
        ("slice_cols", s(&[&[3, 6]]), unit, b(|g, v| g.slice_cols(v[0], 2, 5).unwrap())),
        (
            "concat_cols",
            s(&[&[3, 2], &[3, 4]]),
            unit,
            b(|g, v| g.concat_cols(&[v[0], v[1]]).unwrap()),
        ),
        ("gather_rows", s(&[&[5, 3]]), unit, b(|g, v| g.gather_rows(v[0], &[4, 0, 4, 2]).unwrap())),
        ("mean_rows", s(&[&[6, 3]]), unit, b(|g, v| g.mean_rows(v[0], 1, 4).unwrap())),
        ("sum", s(&[&[3, 3]]), unit, b(|g, v| g.sum(v[0]).unwrap())),
        ("mean", s(&[&[3, 3]]), unit, b(|g, v| g.mean(v[0]).unwrap())),
        ("pick", s(&[&[4, 3]]), unit, b(|g, v| g.pick(v[0], &[2, 0, 1, 2]).unwrap())),
        ("log_clamped", s(&[&[3, 3]]), (0.05, 1.0), b(|g, v| g.log_clamped(v[0], 1e-12).unwrap())),
        ("clamp", s(&[&[3, 3]]), (-0.9, 0.9), b(|g, v| g.clamp(v[0], -1.0, 1.0).unwrap())),
        (
            "bce_with_logits",
            s(&[&[5, 1]]),
            (-4.0, 4.0),
            b(|g, v| g.bce_with_logits(v[0], &[true, false, true, true, false]).unwrap()),
        ),
        (
            "dropout",
            s(&[&[4, 5]]),
            unit,
            b(|g, v| g.dropout(v[0], 0.3, Mode::Train, &mut stream(99, "fd-drop", 0)).unwrap()),
        ),
    ]
}

fn fd_backbone() -> BackboneConfig {
    BackboneConfig {
        vocab_size: 12,
        d_model: 4,
        n_layers: 2,
        n_heads: 2,
        d_ff: 8,
        max_seq_len: 10,
        dropout_p: 0.0,
    }
}

fn fd_tokens(n: usize) -> Vec<String> {
    let mut v: Vec<String> = ["[PAD]", "[UNK]", "[SEP]", "[MASK]"].map(String::from).to_vec();
    v.extend((4..n).map(|i| format!("w{i}")));
    v
}

fn perturb(store: &mut ParamStore, rng: &mut StreamRng) {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for w in store.get_mut(id).tensor.data_mut() {
            *w += rng.random_range(-0.5..0.5);
        }
    }
}

/// Worst relative error over every trainable parameter of the task loss.
fn model_error(seed: u64, task: Task, reuse: bool, dropout: f64, mode: Mode) -> f64 {
    let cfg = fd_backbone();
    let disc = Discriminator::<f64>::new(&cfg, Activation::Gelu, &mut stream(seed, "fd-m", 0))
        .unwrap();
    let ckpt = disc.to_checkpoint(&fd_tokens(cfg.vocab_size), Default::default());
    let opts = HeadOptions {
        task,
        lm_head_reuse: reuse,
        freeze_lm_head: false,
        dropout_p: dropout,
        head_dropout_p: dropout,
        seed,
    };
    let mut model = PlausibilityModel::from_pretrained(&ckpt, &opts).unwrap();
    let mut rng = stream(seed, "fd-scale", 0);
    perturb(&mut model.store, &mut rng);
    let ex = FilledExample {
        example_id: "x_1".into(),
        instance_id: "x".into(),
        filler_index: 1,
        filler: "w".into(),
        pattern: Pattern::ALL[(seed % 4) as usize],
        token_ids: (0..7).map(|_| rng.random_range(4..12)).collect(),
        span: SpanIndex::new(2, 5).unwrap(),
        label: Some(Label::ALL[(seed % 3) as usize]),
        score: Some(1.0 + 4.0 * rng.random::<f64>()),
    };
    let loss_of = |m: &PlausibilityModel, g: &mut Graph| {
        m.loss(g, &ex, mode, &mut stream(5, "fd-run", 0)).unwrap()
    };
    let mut g = Graph::new();
    let l = loss_of(&model, &mut g);
    g.backward(l).unwrap();
    let grads = g.param_grads(model.store.len()).unwrap();
    let ids: Vec<_> = model
        .store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let n = model.store.get(id).tensor.len();
        let analytic = grads.get(id).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        for i in 0..n {
            let orig = model.store.get(id).tensor.data()[i];
            let mut at = |x: f64| {
                model.store.get_mut(id).tensor.data_mut()[i] = x;
                let mut g = Graph::new();
                let l = loss_of(&model, &mut g);
                g.value(l).item()
            };
            let numeric = (at(orig + H) - at(orig - H)) / (2.0 * H);
            at(orig);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    worst
}

fn discriminator_error(seed: u64) -> f64 {
    let cfg = fd_backbone();
    let mut disc =
        Discriminator::<f64>::new(&cfg, Activation::Tanh, &mut stream(seed, "fd-d", 0)).unwrap();
    let mut rng = stream(seed, "fd-d-scale", 0);
    perturb(&mut disc.store, &mut rng);
    let tokens: Vec<usize> = (0..6).map(|_| rng.random_range(4..12)).collect();
    let flags: Vec<bool> = (0..6).map(|_| rng.random::<bool>()).collect();
    let loss_of = |d: &Discriminator<f64>, g: &mut Graph| {
        d.loss(g, &tokens, &flags, Mode::Eval, &mut stream(0, "e", 0)).unwrap()
    };
    let mut g = Graph::new();
    let l = loss_of(&disc, &mut g);
    g.backward(l).unwrap();
    let grads = g.param_grads(disc.store.len()).unwrap();
    let ids: Vec<_> = disc.store.iter().map(|(id, _)| id).collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let n = disc.store.get(id).tensor.len();
        let analytic = grads.get(id).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        for i in (0..n).step_by(3) {
            let orig = disc.store.get(id).tensor.data()[i];
            let mut at = |x: f64| {
                disc.store.get_mut(id).tensor.data_mut()[i] = x;
                let mut g = Graph::new();
                let l = loss_of(&disc, &mut g);
                g.value(l).item()
            };
            let numeric = (at(orig + H) - at(orig - H)) / (2.0 * H);
            at(orig);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    worst
}

fn gradient_suite() -> Check {
    let start = thread_cpu_seconds();
    let mut worst: Vec<(String, f64)> = Vec::new();
    for (name, shapes, (lo, hi), build) in op_table() {
        let mut w: f64 = 0.0;
        for seed in 0..FD_SEEDS {
            let mut rng = stream(seed, name, 0);
            let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s, lo, hi)).collect();
            w = w.max(op_error(&inputs, seed, &build));
        }
        worst.push((name.to_string(), w));
    }
    let graphs: [(&str, Task, bool, f64, Mode); 4] = [
        ("model:classification", Task::Classification, true, 0.2, Mode::Train),
        ("model:regression", Task::Regression, true, 0.2, Mode::Train),
        ("model:classification-no-reuse", Task::Classification, false, 0.0, Mode::Eval),
        ("model:regression-no-reuse", Task::Regression, false, 0.0, Mode::Eval),
    ];
    for (name, task, reuse, p, mode) in graphs {
        let w = (0..FD_SEEDS).map(|s| model_error(s, task, reuse, p, mode)).fold(0.0, f64::max);
        worst.push((name.to_string(), w));
    }
    let w = (0..FD_SEEDS).map(discriminator_error).fold(0.0, f64::max);
    worst.push(("discriminator".into(), w));
    let cpu = thread_cpu_seconds() - start;

    let (name, max) = worst
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .unwrap();
    let failing: Vec<&str> = worst.iter().filter(|w| !(w.1 < FD_TOL)).map(|w| w.0.as_str()).collect();
    verdict(
        failing.is_empty() && cpu < 60.0,
        format!(
            "{} checks x {FD_SEEDS} seeds, max rel err {max:.2e} ({name}) < {FD_TOL:e}, cpu {cpu:.1}s < 60s{}",
            worst.len(),
            if failing.is_empty() { String::new() } else { format!("; failing: {failing:?}") }
        ),
    )
}

// ---------------------------------------------------------------------------
// Metric oracles and head contracts

fn oracle_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&w| w < v).count() as f64;
            let equal = x.iter().filter(|&&w| w == v).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

fn oracle_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn metric_oracles() -> Check {
    let mut rng = stream(31, "acc-spearman", 0);
    let (mut checked, mut worst, mut tied) = (0, 0.0f64, 0);
    while checked < 100 {
        let n = rng.random_range(2..=50);
        let la = rng.random_range(2..8);
        let lb = rng.random_range(2..60);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0..la) as f64 * 0.5).collect();
        let b: Vec<f64> = (0..n).map(|_| 1.0 + rng.random_range(0..lb) as f64 / 7.0).collect();
        let (ra, rb) = (oracle_ranks(&a), oracle_ranks(&b));
        if ra.iter().all(|&v| v == ra[0]) || rb.iter().all(|&v| v == rb[0]) {
            continue;
        }
        if ra.iter().any(|r| r.fract() != 0.0) {
            tied += 1;
        }
        let got = spearman(&a, &b).map_err(|e| e.to_string())?;
        worst = worst.max((got - oracle_pearson(&ra, &rb)).abs());
        checked += 1;
    }
    let mut acc_ok = true;
    for _ in 0..100 {
        let n = rng.random_range(1..60);
        let p: Vec<Label> = (0..n).map(|_| Label::ALL[rng.random_range(0..3)]).collect();
        let g: Vec<Label> = (0..n).map(|_| Label::ALL[rng.random_range(0..3)]).collect();
        let hits = p.iter().zip(&g).filter(|(a, b)| a == b).count();
        acc_ok &= accuracy(&p, &g).unwrap() == hits as f64 / n as f64;
    }
    verdict(
        worst < 1e-12 && acc_ok,
        format!(
            "spearman max |diff| {worst:.1e} < 1e-12 over 100 cases ({tied} with ties); accuracy exact on 100 cases: {acc_ok}"
        ),
    )
}

fn head_contracts() -> Check {
    let mut store = ParamStore::new();
    let head = TaskHead::new(&mut store, 8, 0.1, &mut stream(3, "acc-head", 0)).unwrap();
    let mut rng = stream(4, "acc-head-inputs", 0);
    let wid = store.id("task_head.regressor.weight").unwrap();
    for w in store.get_mut(wid).tensor.data_mut() {
        *w = rng.random_range(-50.0..50.0);
    }
    let (mut lo, mut hi, mut worst_sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
    for _ in 0..10_000 {
        let scale = 10f64.powi(rng.random_range(-2..4));
        let row: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[row]).unwrap());
        let y = head.regress(&mut g, &store, x).unwrap();
        let y = g.value(y).item();
        lo = lo.min(y);
        hi = hi.max(y);
        let p = head.classify(&mut g, &store, x).unwrap();
        worst_sum = worst_sum.max((g.value(p).data().iter().sum::<f64>() - 1.0).abs());
    }
    let range_ok = lo > 1.0 && hi < 5.0;

    let mut g = Graph::new();
    let h = g.constant(
        Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0], vec![7.0, 9.0]])
            .unwrap(),
    );
    let cases = [((0, 2), [2.0, 3.0]), ((1, 4), [5.0, 19.0 / 3.0]), ((2, 3), [5.0, 6.0])];
    let pool_ok = cases.iter().all(|&((i, j), want)| {
        let p = span_pool(&mut g, h, SpanIndex::new(i, j).unwrap()).unwrap();
        g.value(p).data() == want
    });

    let mut delta_ok = true;
    for d in [4usize, 8, 16] {
        let cfg = BackboneConfig {
            vocab_size: 10,
            d_model: d,
            n_layers: 1,
            n_heads: 2,
            d_ff: 8,
            max_seq_len: 6,
            dropout_p: 0.0,
        };
        let disc = Discriminator::<f64>::new(&cfg, Activation::Gelu, &mut stream(1, "t", 0)).unwrap();
        let ckpt = disc.to_checkpoint(&fd_tokens(10), Default::default());
        let count = |reuse| {
            let opts = HeadOptions {
                task: Task::Classification,
                lm_head_reuse: reuse,
                freeze_lm_head: false,
                dropout_p: 0.0,
                head_dropout_p: 0.0,
                seed: 1,
            };
            PlausibilityModel::from_pretrained(&ckpt, &opts).unwrap().trainable_count()
        };
        delta_ok &= count(true) - count(false) == d * d + 3 * d;
    }
    verdict(
        range_ok && worst_sum < 1e-9 && pool_ok && delta_ok,
        format!(
            "regression range [{lo:?}, {hi:?}] inside (1,5); prob sum max err {worst_sum:.1e} < 1e-9; \
             span_pool hand cases exact: {pool_ok}; reuse-off removes d^2+3d for d=4,8,16: {delta_ok}"
        ),
    )
}

// ---------------------------------------------------------------------------
// Fixtures for ensembling

fn accuracy_table_selection() -> Check {
    const MODELS: [&str; 4] = ["LR1e-5_BSZ32", "LR9e-6_BSZ32", "LR1e-5_BSZ64", "LR9e-6_BSZ64"];
    let table = [
        (Pattern::ImplicitReference, [65.12, 64.96, 71.84, 72.32]),
        (Pattern::MetonymicReference, [67.36, 69.60, 69.28, 69.60]),
        (Pattern::FusedHead, [67.68, 71.84, 65.12, 64.96]),
        (Pattern::AddedCompound, [64.64, 63.20, 68.96, 69.28]),
    ];
    let mut patterns = BTreeMap::new();
    let mut gold = BTreeMap::new();
    let mut preds: Vec<BTreeMap<String, Prediction>> = vec![BTreeMap::new(); 4];
    for (pattern, accs) in table {
        let counts = accs.map(|a: f64| (a * 6.25).round() as usize);
        for i in 0..625 {
            let id = format!("{}-{i:03}", pattern.name());
            let label = Label::ALL[i % 3];
            patterns.insert(id.clone(), pattern);
            gold.insert(id.clone(), label);
            for m in 0..4 {
                let g = label.index();
                let p = if i < counts[m] {
                    let mut p = [0.05; 3];
                    p[g] = 0.9;
                    p
                } else {
                    let mut p = [0.2; 3];
                    p[(g + 1) % 3] = 0.6;
                    p
                };
                preds[m].insert(id.clone(), Prediction::Probs(p));
            }
        }
    }
    let sets: Vec<PredictionSet> = preds
        .into_iter()
        .zip(MODELS)
        .map(|(p, id)| PredictionSet::new(id, Task::Classification, p, &patterns).unwrap())
        .collect();
    let (_, spec) = pattern_aware_ensemble(&sets, &Targets::Labels(gold), &sets, AggregationMode::SelectTop1)
        .map_err(|e| e.to_string())?;
    let chosen = |p: Pattern| spec.per_pattern[&p].chosen.join(",");
    let got = [
        (Pattern::FusedHead, chosen(Pattern::FusedHead), "LR9e-6_BSZ32"),
        (Pattern::ImplicitReference, chosen(Pattern::ImplicitReference), "LR9e-6_BSZ64"),
        (Pattern::AddedCompound, chosen(Pattern::AddedCompound), "LR9e-6_BSZ64"),
    ];
    let ok = got.iter().all(|(_, c, w)| c == w);
    let detail = got
        .iter()
        .map(|(p, c, w)| format!("{} -> {c} (want {w})", p.name()))
        .collect::<Vec<_>>()
        .join("; ");
    verdict(ok, detail)
}

/// Returns how many fixtures were checked, or the first violation.
fn random_dominance() -> Result<usize, String> {
    for seed in 0..1000u64 {
        let mut rng = stream(seed, "acc-dominance", 0);
        let n_models = rng.random_range(1..=5);
        let n = rng.random_range(4..80);
        let mut patterns = BTreeMap::new();
        let mut gold = BTreeMap::new();
        for i in 0..n {
            let id = format!("e{i:03}");
            patterns.insert(id.clone(), Pattern::ALL[rng.random_range(0..4)]);
            gold.insert(id, Label::ALL[rng.random_range(0..3)]);
        }
        let sets: Vec<PredictionSet> = (0..n_models)
            .map(|m| {
                let preds = patterns
                    .keys()
                    .map(|id| {
                        let raw: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.01..1.0));
                        let s: f64 = raw.iter().sum();
                        (id.clone(), Prediction::Probs(raw.map(|x| x / s)))
                    })
                    .collect();
                PredictionSet::new(format!("m{m}"), Task::Classification, preds, &patterns).unwrap()
            })
            .collect();
        let targets = Targets::Labels(gold.clone());
        let (out, _) = pattern_aware_ensemble(&sets, &targets, &sets, AggregationMode::SelectTop1)
            .map_err(|e| e.to_string())?;
        let got = brute_correct(&out, &gold);
        let mut mean = BTreeMap::new();
        for id in patterns.keys() {
            let mut acc = [0.0; 3];
            for s in &sets {
                if let Prediction::Probs(p) = s.predictions[id] {
                    for k in 0..3 {
                        acc[k] += p[k] / n_models as f64;
                    }
                }
            }
            mean.insert(id.clone(), Prediction::Probs(acc));
        }
        let std = PredictionSet::new("mean", Task::Classification, mean, &patterns).unwrap();
        for s in sets.iter().chain([&std]) {
            let c = brute_correct(s, &gold);
            if got < c {
                return Err(format!("seed {seed}: {} has {c} correct, ensemble {got}", s.model_id));
            }
        }
    }
    Ok(1000)
}

// ---------------------------------------------------------------------------
// Data contracts

fn span_round_trip(examples: &[FilledExample], vocab: &Vocabulary) -> (usize, usize, usize) {
    let (mut ok, mut checked, mut unk) = (0, 0, 0);
    for e in examples {
        if e.span_has_unk() {
            unk += 1;
            continue;
        }
        checked += 1;
        let want: Vec<String> = split_tokens(&e.filler).into_iter().map(|t| t.text).collect();
        if vocab.decode(&e.token_ids[e.span.start..e.span.end]) == want {
            ok += 1;
        }
    }
    (ok, checked, unk)
}

fn data_contracts(data: &Path, ckpt: &Path) -> Check {
    let vocab = Vocabulary::from_tokens(&Checkpoint::load(ckpt).unwrap().meta.vocab).unwrap();
    let manifest = json(&data.join("manifest.json"));
    let mut parts = Vec::new();
    let mut ok = true;
    for split in ["train", "dev", "test"] {
        let inst = load_instances(data.join(format!("{split}.tsv")), DEFAULT_PLACEHOLDER).unwrap();
        let ex = expand(&inst, &vocab, 128, DEFAULT_PLACEHOLDER, None, None).unwrap();
        let declared = manifest["splits"][split]["examples"].as_u64().unwrap() as usize;
        let (rt, checked, unk) = span_round_trip(&ex, &vocab);
        ok &= ex.len() == 5 * inst.len() && ex.len() == declared && rt == checked;
        parts.push(format!("{split} {}->{} spans {rt}/{checked} (unk {unk})", inst.len(), ex.len()));
    }
    verdict(ok, parts.join("; "))
}

fn official_totals() -> Option<Check> {
    let dir = PathBuf::from(std::env::var_os("CLARIFY_OFFICIAL_DIR")?);
    let words: Vec<String> = ["train", "dev", "test"]
        .iter()
        .filter_map(|s| load_instances(dir.join(format!("{s}.tsv")), DEFAULT_PLACEHOLDER).ok())
        .flat_map(|inst| inst.into_iter().flat_map(|i| i.fillers))
        .collect();
    let vocab = Vocabulary::from_words(words.iter().map(String::as_str));
    let mut parts = Vec::new();
    let mut ok = true;
    for (split, want) in [("train", 19975), ("dev", 2500), ("test", 2500)] {
        let inst = match load_instances(dir.join(format!("{split}.tsv")), DEFAULT_PLACEHOLDER) {
            Ok(i) => i,
            Err(e) => return Some(Err(format!("{split}: {e}"))),
        };
        let ex = expand(&inst, &vocab, 256, DEFAULT_PLACEHOLDER, None, None).unwrap();
        ok &= ex.len() == want;
        let mut per: BTreeMap<&str, usize> = BTreeMap::new();
        for e in &ex {
            *per.entry(e.pattern.name()).or_default() += 1;
        }
        if split != "train" {
            ok &= per.len() == 4 && per.values().all(|&c| c == 625);
        }
        parts.push(format!("{split} {} (want {want}) {per:?}", ex.len()));
    }
    Some(verdict(ok, parts.join("; ")))
}

// ---------------------------------------------------------------------------
// Pipeline

struct Pipeline {
    root: PathBuf,
    pretrain_cpu: f64,
    finetune_cpu: Vec<(String, f64)>,
}

const MODELS_A: [&str; 2] = ["LR1e-3_BSZ16", "LR7e-4_BSZ16"];

fn run_pipeline(root: &Path) -> Pipeline {
    std::fs::write(root.join("acc.conf"), PIPELINE_CONF).unwrap();
    run(root, &with(&["gen-synth", "--out", "data"]));
    let pretrain_cpu = run_timed(root, "pretrain.log", &with(&["pretrain", "--data", "data", "--out", "pt"]));
    let mut finetune_cpu = Vec::new();
    for (m, lr) in MODELS_A.iter().zip(["1e-3", "7e-4"]) {
        let set = format!("finetune.learning_rate={lr}");
        let out = format!("ftA/{m}");
        let cpu = run_timed(
            root,
            &format!("ftA-{m}.log"),
            &with(&["--set", &set, "finetune", "--checkpoint", "pt/model.ckpt", "--data", "data", "--out", &out]),
        );
        finetune_cpu.push((format!("A/{m}"), cpu));
    }
    let cpu = run_timed(
        root,
        "ftB.log",
        &with(&[
            "--set", "finetune.task=regression", "finetune", "--checkpoint", "pt/model.ckpt", "--data", "data",
            "--out", "ftB/LR1e-3_BSZ16",
        ]),
    );
    finetune_cpu.push(("B/LR1e-3_BSZ16".into(), cpu));
    predict_and_combine(root, "preds", "ens", "eval");
    run(
        root,
        &with(&[
            "predict", "--model", "ftB/LR1e-3_BSZ16/model.ckpt", "--instances", "data/dev.tsv", "--out-dir",
            "predsB/dev",
        ]),
    );
    Pipeline {
        root: root.to_path_buf(),
        pretrain_cpu,
        finetune_cpu,
    }
}

/// predict, ensemble and evaluate for the classification models.
fn predict_and_combine(root: &Path, preds: &str, ens: &str, eval: &str) {
    for m in MODELS_A {
        let model = format!("ftA/{m}/model.ckpt");
        for split in ["dev", "test"] {
            let inst = format!("data/{split}.tsv");
            let out = format!("{preds}/{split}");
            run(root, &with(&["predict", "--model", &model, "--instances", &inst, "--out-dir", &out]));
        }
    }
    let files = |split: &str| MODELS_A.map(|m| format!("{preds}/{split}/{m}.tsv"));
    let (dev, test) = (files("dev"), files("test"));
    run(
        root,
        &with(&[
            "ensemble", "--dev", &dev[0], &dev[1], "--test", &test[0], &test[1], "--dev-instances",
            "data/dev.tsv", "--test-instances", "data/test.tsv", "--dev-gold", "data/dev_labels.tsv", "--out", ens,
        ]),
    );
    let aware = format!("{ens}/dev/pattern-aware-ensemble.tsv");
    let std = format!("{ens}/dev/standard-ensemble.tsv");
    run(
        root,
        &with(&[
            "evaluate", "--pred", &aware, &std, &dev[0], &dev[1], "--gold", "data/dev_labels.tsv", "--instances",
            "data/dev.tsv", "--out", eval,
        ]),
    );
}

fn rtd_quality(p: &Pipeline) -> Check {
    let e = json(&p.root.join("pt/rtd_eval.json"));
    let acc = e["accuracy"].as_f64().unwrap();
    let loss = e["loss"].as_f64().unwrap();
    let bound = e["majority_bound"].as_f64().unwrap();
    verdict(
        acc >= 0.95 && loss < bound && p.pretrain_cpu <= CPU_BUDGET_S,
        format!(
            "held-out RTD accuracy {acc:.4} >= 0.95 over {} tokens; loss {loss:.4} < majority bound {bound:.4}; cpu {:.0}s <= {CPU_BUDGET_S}s",
            e["tokens"], p.pretrain_cpu
        ),
    )
}

fn end_to_end(p: &Pipeline) -> Check {
    let root = &p.root;
    let dev_inst = load_instances(root.join("data/dev.tsv"), DEFAULT_PLACEHOLDER).unwrap();
    let patterns = patterns_of(&dev_inst);
    let labels = load_labels(root.join("data/dev_labels.tsv")).unwrap();
    let mut counts = [0usize; 3];
    for l in labels.values() {
        counts[l.index()] += 1;
    }
    let majority = *counts.iter().max().unwrap() as f64 / labels.len() as f64;

    let mut accs = Vec::new();
    for m in MODELS_A {
        let set = PredictionSet::load(root.join(format!("preds/dev/{m}.tsv")), m, &patterns).unwrap();
        accs.push((m, brute_correct(&set, &labels) as f64 / labels.len() as f64));
    }
    let default_acc = accs[0].1;

    let scores = load_scores(root.join("data/dev_scores.tsv")).unwrap();
    let set = PredictionSet::load(root.join("predsB/dev/LR1e-3_BSZ16.tsv"), "B", &patterns).unwrap();
    let (mut pred, mut gold) = (Vec::new(), Vec::new());
    for (id, s) in &scores {
        if let Prediction::Score(v) = set.predictions[id] {
            pred.push(v);
            gold.push(*s);
        }
    }
    let rho = spearman(&pred, &gold).map_err(|e| e.to_string())?;
    let worst_cpu = p.finetune_cpu.iter().map(|c| c.1).fold(0.0, f64::max);
    verdict(
        default_acc >= 0.90 && rho >= 0.80 && worst_cpu <= CPU_BUDGET_S && pred.len() == scores.len(),
        format!(
            "dev accuracy {default_acc:.4} >= 0.90 (default run; all {accs:?}; majority baseline {majority:.4} from dev counts {counts:?}); \
             dev spearman {rho:.4} >= 0.80; fine-tune cpu {:?} <= {CPU_BUDGET_S}s",
            p.finetune_cpu.iter().map(|(n, c)| format!("{n}={c:.0}s")).collect::<Vec<_>>()
        ),
    )
}

fn pipeline_dominance(p: &Pipeline) -> Check {
    let root = &p.root;
    let patterns = patterns_of(&load_instances(root.join("data/dev.tsv"), DEFAULT_PLACEHOLDER).unwrap());
    let labels = load_labels(root.join("data/dev_labels.tsv")).unwrap();
    let load = |path: String, id: &str| PredictionSet::load(root.join(path), id, &patterns).unwrap();
    let aware = brute_correct(&load("ens/dev/pattern-aware-ensemble.tsv".into(), "aware"), &labels);
    let mut others = vec![("standard-ensemble".to_string(), brute_correct(&load("ens/dev/standard-ensemble.tsv".into(), "std"), &labels))];
    for m in MODELS_A {
        others.push((m.to_string(), brute_correct(&load(format!("preds/dev/{m}.tsv"), m), &labels)));
    }
    let ok = others.iter().all(|o| aware >= o.1);
    let fixtures = random_dominance();
    verdict(
        ok && fixtures.is_ok(),
        format!(
            "(a) pipeline dev correct: pattern-aware {aware}/{} >= {others:?}; (b) random fixtures: {}",
            labels.len(),
            match &fixtures {
                Ok(n) => format!("{n}/1000 dominate"),
                Err(e) => e.clone(),
            }
        ),
    )
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// Names of files that differ between two trees, or that exist in only one.
fn tree_diff(a: &Path, b: &Path) -> Vec<String> {
    let (fa, fb) = (files_under(a), files_under(b));
    if fa != fb {
        return vec![format!("file lists differ: {fa:?} vs {fb:?}")];
    }
    fa.into_iter()
        .filter(|f| std::fs::read(a.join(f)).unwrap() != std::fs::read(b.join(f)).unwrap())
        .map(|f| f.display().to_string())
        .collect()
}

fn determinism(p: &Pipeline) -> Check {
    let root = &p.root;
    let mut diffs = Vec::new();
    let mut compared = 0;

    // Same command lines in a sibling root, sharing only the trained checkpoints.
    let again = root.join("again");
    std::fs::create_dir(&again).unwrap();
    std::fs::copy(root.join("acc.conf"), again.join("acc.conf")).unwrap();
    run(&again, &with(&["gen-synth", "--out", "data"]));
    for m in MODELS_A {
        let d = again.join("ftA").join(m);
        std::fs::create_dir_all(&d).unwrap();
        std::fs::copy(root.join("ftA").join(m).join("model.ckpt"), d.join("model.ckpt")).unwrap();
    }
    predict_and_combine(&again, "preds", "ens", "eval");
    for a in ["data", "preds", "ens", "eval"] {
        compared += files_under(&root.join(a)).len();
        diffs.extend(tree_diff(&root.join(a), &again.join(a)));
    }

    // Training commands again at reduced scale, each run twice.
    for r in ["r1", "r2"] {
        let d = root.join(r);
        std::fs::create_dir(&d).unwrap();
        std::fs::copy(root.join("acc.conf"), d.join("acc.conf")).unwrap();
        run(&d, &with_tiny(&["gen-synth", "--out", "data"]));
        run(&d, &with_tiny(&["pretrain", "--data", "data", "--out", "pt"]));
        run(&d, &with_tiny(&["finetune", "--checkpoint", "pt/model.ckpt", "--data", "data", "--out", "ft", "--grid"]));
        run(
            &d,
            &with_tiny(&[
                "--set", "finetune.task=regression", "finetune", "--checkpoint", "pt/model.ckpt", "--data", "data",
                "--out", "ftB",
            ]),
        );
        std::fs::remove_file(d.join("last.log")).unwrap();
    }
    compared += files_under(&root.join("r1")).len();
    diffs.extend(tree_diff(&root.join("r1"), &root.join("r2")));
    verdict(
        diffs.is_empty(),
        format!("{compared} artifacts from re-running every command compared byte for byte; differing: {diffs:?}"),
    )
}

fn guarded(f: impl FnOnce() -> Check) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(d)) => Outcome::Pass(d),
        Ok(Err(d)) => Outcome::Fail(d),
        Err(e) => Outcome::Fail(format!(
            "panicked: {}",
            e.downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default()
        )),
    }
}

#[test]
fn acceptance() {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    results.push((
        1,
        "large-scale scores",
        Outcome::Info(
            "absolute scores of large pretrained encoders are out of scope; criteria 2-10 are checked instead".into(),
        ),
    ));
    results.push((2, "gradient suite", guarded(gradient_suite)));
    results.push((3, "metric oracles", guarded(metric_oracles)));
    results.push((4, "head contracts", guarded(head_contracts)));

    let tmp = tempfile::tempdir().unwrap();
    let pipeline = catch_unwind(AssertUnwindSafe(|| run_pipeline(tmp.path())));
    match &pipeline {
        Ok(p) => {
            results.push((5, "RTD pre-training", guarded(|| rtd_quality(p))));
            results.push((6, "end-to-end learning", guarded(|| end_to_end(p))));
            results.push((7, "ensemble dominance", guarded(|| pipeline_dominance(p))));
        }
        Err(_) => {
            for (n, name) in [(5, "RTD pre-training"), (6, "end-to-end learning"), (7, "ensemble dominance")] {
                results.push((n, name, Outcome::Fail("pipeline did not complete".into())));
            }
        }
    }
    results.push((8, "selection fixture", guarded(accuracy_table_selection)));
    match &pipeline {
        Ok(p) => {
            results.push((9, "data contracts", guarded(|| data_contracts(&p.root.join("data"), &p.root.join("pt/model.ckpt")))));
            match official_totals() {
                Some(r) => results.push((9, "official totals", guarded(|| r))),
                None => results.push((9, "official totals", Outcome::Skip("CLARIFY_OFFICIAL_DIR not set".into()))),
            }
            results.push((10, "determinism", guarded(|| determinism(p))));
        }
        Err(_) => {
            for (n, name) in [(9, "data contracts"), (10, "determinism")] {
                results.push((n, name, Outcome::Fail("pipeline did not complete".into())));
            }
        }
    }

    let mut failed = Vec::new();
    println!();
    for (n, name, outcome) in &results {
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed.push(*n);
                ("FAIL", d)
            }
            Outcome::Info(d) => ("INFO", d),
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("[{tag}] {n:>2} {name}: {detail}");
    }
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
