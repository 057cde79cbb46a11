//! Expansion, span decoding, file round trips and label balance.

use clarify::data::synth::{generate_synthetic_task, Grammar, SynthTaskConfig};
use clarify::data::{
    expand, parse_instances, parse_labels, parse_scores, split_tokens, write_instances,
    write_labels, write_scores, Instance, Label, Pattern, Vocabulary, DEFAULT_PLACEHOLDER, UNK,
};
use clarify::evaluation::label_distribution;
use proptest::prelude::*;

fn task(skew: f64, n: usize) -> clarify::data::synth::SynthDataset {
    let cfg = SynthTaskConfig {
        train_instances: n,
        dev_instances: n,
        test_instances: n,
        skew,
        ..Default::default()
    };
    generate_synthetic_task(&cfg, &Grammar::new()).unwrap()
}

fn check_spans(instances: &[Instance], vocab: &Vocabulary, max_len: usize) -> (usize, usize) {
    let ex = expand(instances, vocab, max_len, DEFAULT_PLACEHOLDER, None, None).unwrap();
    assert_eq!(ex.len(), 5 * instances.len());
    let (mut checked, mut unk) = (0, 0);
    for e in &ex {
        assert!(e.token_ids.len() <= max_len);
        if e.span_has_unk() {
            unk += 1;
            continue;
        }
        let want: Vec<String> = split_tokens(&e.filler)
            .into_iter()
            .map(|t| t.text)
            .collect();
        let got = vocab.decode(&e.token_ids[e.span.start..e.span.end]);
        assert_eq!(got, want, "{}", e.example_id);
        checked += 1;
    }
    (checked, unk)
}

#[test]
fn synthetic_fillers_decode_back_from_their_spans() {
    let ds = task(0.5, 40);
    let vocab = Grammar::new().vocabulary();
    let (checked, unk) = check_spans(&ds.train.instances, &vocab, 128);
    assert_eq!((checked, unk), (200, 0));
    // Heavy truncation still keeps every span.
    check_spans(&ds.dev.instances, &vocab, 12);
}

#[test]
fn spans_decode_with_a_capped_vocabulary() {
    let ds = task(0.5, 40);
    let texts: Vec<String> = ds
        .train
        .instances
        .iter()
        .flat_map(|i| i.fillers.clone())
        .collect();
    let vocab = Vocabulary::build(texts.iter().map(String::as_str), 24);
    let (checked, unk) = check_spans(&ds.train.instances, &vocab, 64);
    assert!(unk > 0 && checked > 0);
}

#[test]
fn zero_skew_balances_labels_in_every_pattern() {
    let ds = task(0.0, 240);
    for split in [&ds.train, &ds.dev, &ds.test] {
        let dist = label_distribution(split.labels.iter().map(|(id, l)| {
            let inst = id.rsplit_once('_').unwrap().0;
            let p = split
                .instances
                .iter()
                .find(|i| i.id == inst)
                .unwrap()
                .pattern;
            (p, *l)
        }));
        assert_eq!(dist.len(), 4);
        for counts in dist.values() {
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1, "{counts:?}");
        }
    }
}

#[test]
fn full_skew_follows_the_pattern_profiles() {
    let ds = task(1.0, 400);
    let pattern_of = |id: &str| {
        let inst = id.rsplit_once('_').unwrap().0;
        ds.train
            .instances
            .iter()
            .find(|i| i.id == inst)
            .unwrap()
            .pattern
    };
    let dist = label_distribution(ds.train.labels.iter().map(|(id, l)| (pattern_of(id), *l)));
    let neutral = |p: Pattern| dist[&p][Label::Neutral.index()];
    assert!(Pattern::ALL
        .iter()
        .all(|&p| neutral(Pattern::FusedHead) <= neutral(p)));
    for p in [Pattern::AddedCompound, Pattern::ImplicitReference] {
        let c = dist[&p];
        assert!(c[Label::Plausible.index()] > c[0] + c[1], "{p:?} {c:?}");
    }
}

#[test]
fn scores_agree_with_labels() {
    let ds = task(0.5, 40);
    for (id, label) in &ds.train.labels {
        assert_eq!(Label::from_score(ds.train.scores[id]), *label, "{id}");
        assert!((1.0..=5.0).contains(&ds.train.scores[id]));
    }
}

#[test]
fn task_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = task(0.5, 12);
    let (pi, pl, ps) = (
        dir.path().join("i.tsv"),
        dir.path().join("l.tsv"),
        dir.path().join("s.tsv"),
    );
    write_instances(&pi, &ds.dev.instances).unwrap();
    write_labels(&pl, ds.dev.labels.iter().map(|(k, v)| (k.as_str(), *v))).unwrap();
    write_scores(&ps, ds.dev.scores.iter().map(|(k, v)| (k.as_str(), *v))).unwrap();
    let read = |p: &std::path::Path| std::fs::read_to_string(p).unwrap();
    assert_eq!(
        parse_instances(&read(&pi), "i.tsv", DEFAULT_PLACEHOLDER).unwrap(),
        ds.dev.instances
    );
    assert_eq!(parse_labels(&read(&pl), "l.tsv").unwrap(), ds.dev.labels);
    assert_eq!(parse_scores(&read(&ps), "s.tsv").unwrap(), ds.dev.scores);
}

fn word() -> impl Strategy<Value = String> {
    "[a-z]{1,6}"
}

fn phrase(max: usize) -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 1..=max).prop_map(|w| w.join(" "))
}

fn instance() -> impl Strategy<Value = Instance> {
    (
        phrase(4),
        phrase(8),
        phrase(3),
        phrase(6),
        prop::array::uniform5(phrase(3)),
        0usize..4,
    )
        .prop_map(|(title, previous, before, followup, fillers, p)| Instance {
            id: "x".into(),
            pattern: Pattern::ALL[p],
            title,
            section_header: String::new(),
            previous,
            target_with_placeholder: format!("{before} {DEFAULT_PLACEHOLDER} ends here."),
            followup,
            fillers,
        })
}

proptest! {
    #[test]
    fn expand_is_five_fold_and_spans_decode(
        mut instances in prop::collection::vec(instance(), 1..6),
        max_len in 3usize..40,
    ) {
        for (i, inst) in instances.iter_mut().enumerate() {
            inst.id = format!("i{i}");
        }
        let words: Vec<String> = instances
            .iter()
            .flat_map(|i| i.fillers.iter().chain([&i.title]).flat_map(|f| split_tokens(f)).map(|t| t.text))
            .collect();
        let vocab = Vocabulary::from_words(&words);
        let ex = expand(&instances, &vocab, max_len, DEFAULT_PLACEHOLDER, None, None).unwrap();
        prop_assert_eq!(ex.len(), 5 * instances.len());
        for e in &ex {
            prop_assert!(e.token_ids.len() <= max_len);
            prop_assert!(!e.token_ids[e.span.start..e.span.end].contains(&UNK));
            let want: Vec<String> = split_tokens(&e.filler).into_iter().map(|t| t.text).collect();
            prop_assert_eq!(vocab.decode(&e.token_ids[e.span.start..e.span.end]), want);
        }
    }
}
