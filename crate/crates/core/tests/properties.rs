use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use gmner::crf::CrfModel;
use gmner::dataset::{
    load_dataset, AnnotatedSample, DatasetFormat, EntityType, ImageRef, MentionSpan, Schema, Sentence,
};
use gmner::embedding::EmbeddingVector;
use gmner::gateway::{ChatRequest, FnTransport, Gateway, GatewayConfig, GatewayMode, TranscriptCache, TransportError};
use gmner::icl::{IclExample, Query, Selector, SelectorConfig};
use gmner::prompt::Templates;
use gmner::refine::{self, RefinementOutcome, Verdict};
use gmner::text::tokenize;
use gmner::Error;

fn model_and_seq(seed: u64, n: usize, labels: usize, dim: usize) -> (CrfModel, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = (0..CrfModel::param_count(labels, dim))
        .map(|_| rng.random_range(-3.0..3.0))
        .collect();
    let x = (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    (CrfModel::from_params(labels, dim, params).unwrap(), x)
}

const WORDS: &[&str] = &[
    "the", "F-35", "MG5", "flew", "USS", "Ford", "fired", "over", "a", "base",
];

fn sentence_text() -> impl Strategy<Value = String> {
    proptest::collection::vec(proptest::sample::select(WORDS), 1..8).prop_map(|w| w.join(" "))
}

fn image() -> ImageRef {
    ImageRef {
        path: "q.jpg".into(),
        width: 100,
        height: 80,
    }
}

/// Non-overlapping spans over `n` tokens, alternating types.
fn spans(sentence: &Sentence, cuts: &[(usize, bool)], schema: &Schema) -> Vec<MentionSpan> {
    let mut out = Vec::new();
    let mut i = 0;
    for (k, (len, take)) in cuts.iter().enumerate() {
        let len = (*len).max(1);
        if i + len > sentence.len() {
            break;
        }
        if *take {
            out.push(sentence.mention(i, i + len, &schema.types()[k % schema.len()]).unwrap());
        }
        i += len;
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn partition_dominates_every_path(seed in any::<u64>(), n in 1usize..6, labels in 1usize..4, dim in 1usize..4,
                                       path in proptest::collection::vec(0usize..4, 6)) {
        let (m, x) = model_and_seq(seed, n, labels, dim);
        let y: Vec<usize> = path[..n].iter().map(|l| l % labels).collect();
        let z = m.log_partition(&x).unwrap();
        let s = m.score(&x, &y).unwrap();
        prop_assert!(z >= s - 1e-12);
        let table = m.marginals(&x).unwrap();
        for row in table.rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn tokenization_is_deterministic_across_threads(text in sentence_text()) {
        let once = tokenize(&text).unwrap();
        let many: Vec<_> = (0..8).into_par_iter().map(|_| tokenize(&text).unwrap()).collect();
        for t in many {
            prop_assert_eq!(&t, &once);
        }
    }

    #[test]
    fn loader_accepts_valid_or_locates_the_error(
        text in sentence_text(),
        ents in proptest::collection::vec((0usize..40, 1usize..12, 0usize..3, proptest::option::of((-20i64..120, -20i64..100, 1i64..60, 1i64..60))), 0..4),
    ) {
        let types = ["AIRCRAFT", "WEAPON", "BOGUS"];
        let entities: Vec<_> = ents
            .iter()
            .map(|(s, l, t, b)| {
                json!({
                    "char_start": s, "char_end": s + l, "type": types[*t],
                    "box": b.map(|(x, y, w, h)| json!({"x_min": x, "y_min": y, "x_max": x + w, "y_max": y + h})),
                })
            })
            .collect();
        let line = json!({"id": "r1", "text": text, "image": {"path": "r1.jpg", "width": 100, "height": 80}, "entities": entities});
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(&path, format!("{line}\n")).unwrap();
        let schema = Schema::new(&["AIRCRAFT", "WEAPON"]).unwrap();
        match load_dataset(&path, DatasetFormat::JsonLines, &schema) {
            Ok(samples) => {
                prop_assert_eq!(samples.len(), 1);
                let s = &samples[0];
                prop_assert_eq!(s.triplets.len(), ents.len());
                for (i, t) in s.triplets.iter().enumerate() {
                    let m = &t.mention;
                    prop_assert!(m.token_start < m.token_end && m.token_end <= s.sentence.len());
                    prop_assert_eq!(&s.sentence.span_text(m.token_start, m.token_end), &m.surface);
                    prop_assert!(schema.get(&m.etype.name).is_some());
                    if let Some(b) = t.region {
                        prop_assert!(b.fits(100, 80) && b.area() > 0.0);
                    }
                    for u in &s.triplets[i + 1..] {
                        prop_assert!(!m.overlaps(&u.mention));
                    }
                }
            }
            Err(Error::Schema { line, .. }) | Err(Error::SpanAlignment { line, .. }) => prop_assert_eq!(line, 1),
            Err(e) => prop_assert!(false, "unlocated error {e}"),
        }
    }

    #[test]
    fn merge_is_idempotent_and_keeps_confident(
        text in sentence_text(),
        confident_cuts in proptest::collection::vec((1usize..3, any::<bool>()), 0..6),
        other_cuts in proptest::collection::vec((1usize..3, any::<bool>()), 0..6),
        verdicts in proptest::collection::vec(0u8..4, 6),
    ) {
        let schema = Schema::new(&["AIRCRAFT", "WEAPON"]).unwrap();
        let sentence = Sentence::new("s", text).unwrap();
        let confident = spans(&sentence, &confident_cuts, &schema);
        let others = spans(&sentence, &other_cuts, &schema);
        let outcomes: Vec<RefinementOutcome> = others
            .iter()
            .zip(&verdicts)
            .map(|(m, v)| RefinementOutcome {
                original: if *v == 3 { None } else { Some(m.clone()) },
                verdict: match v {
                    0 => Verdict::Confirm,
                    1 => Verdict::Delete,
                    2 => Verdict::Correct(m.clone()),
                    _ => Verdict::Add(m.clone()),
                },
                rationale: String::new(),
            })
            .collect();
        let merged = refine::merge(&confident, &outcomes);
        for c in &confident {
            prop_assert!(merged.contains(c));
        }
        for (i, a) in merged.iter().enumerate() {
            for b in &merged[i + 1..] {
                prop_assert!(!a.overlaps(b));
            }
        }
        prop_assert_eq!(refine::merge(&merged, &[]), merged);
    }

    #[test]
    fn grounding_returns_one_valid_region_per_entity(
        text in sentence_text(),
        cuts in proptest::collection::vec((1usize..3, any::<bool>()), 0..6),
        boxes in proptest::collection::vec(proptest::option::of((-50i64..150, -50i64..150, -50i64..150, -50i64..150)), 0..8),
        garbage in any::<bool>(),
    ) {
        let schema = Schema::new(&["AIRCRAFT", "WEAPON"]).unwrap();
        let sentence = Sentence::new("q", text).unwrap();
        let entities = spans(&sentence, &cuts, &schema);
        let reply = if garbage {
            "I cannot see the image.".to_string()
        } else {
            let items: Vec<_> = boxes
                .iter()
                .enumerate()
                .map(|(i, b)| json!({"id": i + 1, "box": b.map(|(a, b, c, d)| json!([a, b, c, d]))}))
                .collect();
            json!({"entities": items}).to_string()
        };
        let gateway = Gateway::new(
            GatewayConfig { mode: GatewayMode::Live, endpoint: Some("http://stub.invalid".into()), ..GatewayConfig::default() },
            TranscriptCache::in_memory(),
            Some(Box::new(FnTransport(move |_: &ChatRequest| -> Result<String, TransportError> { Ok(reply.clone()) }))),
        )
        .unwrap();
        let sample = AnnotatedSample { sentence, triplets: Vec::new(), image: image() };
        let out = refine::ground(&entities, &sample, &[], &gateway, &Templates::default()).unwrap();
        prop_assert_eq!(out.len(), entities.len());
        for (r, m) in out.iter().zip(&entities) {
            prop_assert_eq!(&r.mention, m);
            if let Some(b) = r.region {
                prop_assert!(b.fits(100, 80) && b.area() > 0.0);
            }
        }
    }

    #[test]
    fn entity_only_ranking_when_other_weights_are_zero(seed in any::<u64>(), pool_size in 3usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = EntityType { name: "AIRCRAFT".into(), id: 0 };
        let rv = |rng: &mut ChaCha8Rng| EmbeddingVector::new((0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let pool: Vec<IclExample> = (0..pool_size)
            .map(|i| IclExample {
                sample: AnnotatedSample {
                    sentence: Sentence::new(format!("c{i}"), "x").unwrap(),
                    triplets: Vec::new(),
                    image: image(),
                },
                sentence: rv(&mut rng),
                image: rv(&mut rng),
                entities: vec![(t.clone(), rv(&mut rng))],
            })
            .collect();
        let q = rv(&mut rng);
        let cosines: Vec<f64> = pool
            .iter()
            .map(|c| gmner::embedding::cosine(&q, &c.entities[0].1).unwrap())
            .collect();
        let query = Query { id: "q".into(), sentence: rv(&mut rng), image: Some(rv(&mut rng)), entities: vec![(t.clone(), q)] };
        let cfg = SelectorConfig { lambda2: 0.0, lambda3: 0.0, k: pool_size, ..SelectorConfig::default() };
        let sel = Selector::new(pool, cfg).unwrap().select_topk(&query).unwrap();
        let mut want: Vec<usize> = (0..pool_size).collect();
        want.sort_by(|&a, &b| cosines[b].total_cmp(&cosines[a]).then(a.cmp(&b)));
        prop_assert_eq!(sel.chosen, want);
    }
}

#[test]
fn tokenization_stable_over_fixture_texts() {
    let texts: HashSet<&str> = ["The USS Ford (CVN-78) sailed.", "\"MG5\" fired, twice!", "a  b\tc"].into();
    for t in texts {
        let a = tokenize(t).unwrap();
        let b = std::thread::spawn(move || tokenize(t).unwrap()).join().unwrap();
        assert_eq!(a, b);
    }
}
