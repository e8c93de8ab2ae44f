//! Regenerates the bundled test fixtures.
//!
//! ```text
//! cargo run --release --example build_fixtures [-- <fixtures dir>]
//! ```
//!
//! Writes the separable CRF fixture and the end-to-end fixture: datasets,
//! embedding stores, pipeline config and a transcript cache recorded by
//! running every ablation variant against a scripted oracle model.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use gmner::dataset::{Schema, Sentence};
use gmner::embedding::{entity_key, image_key, token_key, EmbeddingStore, StoreKind};
use gmner::gateway::{ChatRequest, ContentPart, FnTransport, Gateway, TranscriptCache, TransportError};
use gmner::pipeline::{Pipeline, PipelineConfig};

type Ent = (&'static str, &'static str, Option<[i64; 4]>);
type Item = (&'static str, &'static str, &'static [Ent]);

const WIDTH: u32 = 640;
const HEIGHT: u32 = 480;
const TYPES: [&str; 3] = ["AIRCRAFT", "WEAPON", "SHIP"];

const TRAIN: &[Item] = &[
    (
        "d01",
        "An F-35 refueled over the open sea.",
        &[("F-35", "AIRCRAFT", Some([120, 80, 420, 260]))],
    ),
    (
        "d02",
        "The F-15 fighter took off at dawn.",
        &[("F-15", "AIRCRAFT", Some([60, 140, 380, 300]))],
    ),
    (
        "d03",
        "Pilots flew the Su-30 in tight formation.",
        &[("Su-30", "AIRCRAFT", Some([200, 60, 520, 240]))],
    ),
    (
        "d04",
        "Soldiers tested the MG5 machine gun on the range.",
        &[("MG5", "WEAPON", Some([150, 220, 470, 330]))],
    ),
    (
        "d05",
        "The Nimitz carried a Rafale across the gulf.",
        &[
            ("Nimitz", "SHIP", Some([40, 180, 600, 420])),
            ("Rafale", "AIRCRAFT", Some([300, 90, 420, 150])),
        ],
    ),
    (
        "d06",
        "Troops aimed a Javelin at the old target.",
        &[("Javelin", "WEAPON", Some([220, 160, 480, 300]))],
    ),
    (
        "d07",
        "The Kuznetsov anchored near the northern coast.",
        &[("Kuznetsov", "SHIP", Some([80, 200, 560, 400]))],
    ),
    (
        "d08",
        "A B-2 dropped training rounds over the desert.",
        &[("B-2", "AIRCRAFT", None)],
    ),
    (
        "d09",
        "Gunners loaded the M249 before the Kirov arrived.",
        &[("M249", "WEAPON", Some([100, 250, 330, 360])), ("Kirov", "SHIP", None)],
    ),
    (
        "d10",
        "The HIMARS fired from the shore at night.",
        &[("HIMARS", "WEAPON", Some([180, 180, 500, 380]))],
    ),
];

const TEST: &[Item] = &[
    (
        "t01",
        "Two F-35 jets flew over the base.",
        &[("F-35", "AIRCRAFT", Some([140, 100, 460, 280]))],
    ),
    (
        "t02",
        "Soldiers fired the MG5 during the drill.",
        &[("MG5", "WEAPON", Some([160, 230, 450, 340]))],
    ),
    (
        "t03",
        "The USS Zumwalt left the harbor at noon.",
        &[("USS Zumwalt", "SHIP", Some([60, 190, 590, 410]))],
    ),
    (
        "t04",
        "A Phoenix missile was loaded onto the F-14.",
        &[
            ("Phoenix", "WEAPON", Some([250, 260, 400, 320])),
            ("F-14", "AIRCRAFT", None),
        ],
    ),
    (
        "t05",
        "The Type 052D destroyer escorted the Liaoning.",
        &[
            ("Type 052D", "SHIP", Some([90, 210, 540, 400])),
            ("Liaoning", "SHIP", None),
        ],
    ),
    (
        "t06",
        "Marines carried a Javelin past the J-20 hangar.",
        &[
            ("Javelin", "WEAPON", Some([200, 170, 470, 310])),
            ("J-20", "AIRCRAFT", None),
        ],
    ),
    (
        "t07",
        "The Kirov sailed past a Su-57 at sunset.",
        &[
            ("Kirov", "SHIP", Some([30, 220, 610, 430])),
            ("Su-57", "AIRCRAFT", Some([380, 60, 520, 140])),
        ],
    ),
    (
        "t08",
        "Crews inspected the Stinger launcher.",
        &[("Stinger", "WEAPON", Some([210, 200, 430, 320]))],
    ),
    (
        "t09",
        "A Rafale landed on the HMS Queen Elizabeth.",
        &[
            ("Rafale", "AIRCRAFT", Some([260, 90, 400, 160])),
            ("HMS Queen Elizabeth", "SHIP", Some([20, 200, 620, 440])),
        ],
    ),
    ("t10", "Officials said the drill ended without incident.", &[]),
];

const AIR_POOL: &[&str] = &["F-22", "J-10", "Tornado", "Gripen", "F-16", "Mirage"];
const WPN_POOL: &[&str] = &["M240", "TOW", "NLAW", "Spike", "Carl-Gustaf", "M4"];
const SHIP_POOL: &[&str] = &["USS Ford", "Type 055", "HMS Daring", "USS Carl Vinson"];

const AIR_WORDS: &[&str] = &[
    "F-35", "F-15", "Su-30", "Rafale", "B-2", "F-14", "J-20", "Su-57", "F-22", "J-10", "Tornado", "Gripen", "F-16",
    "Mirage",
];
const WPN_WORDS: &[&str] = &[
    "MG5",
    "Javelin",
    "M249",
    "HIMARS",
    "Stinger",
    "M240",
    "TOW",
    "NLAW",
    "Spike",
    "Carl-Gustaf",
    "M4",
];
const SHIP_HEAD: &[&str] = &["Nimitz", "Kuznetsov", "Kirov", "Liaoning", "USS", "Type", "HMS"];
const SHIP_TAIL: &[&str] = &[
    "Zumwalt",
    "052D",
    "Queen",
    "Elizabeth",
    "Ford",
    "055",
    "Daring",
    "Carl",
    "Vinson",
];
const GENERIC: &[&str] = &[
    "machine",
    "gun",
    "jets",
    "fighter",
    "destroyer",
    "missile",
    "launcher",
    "hangar",
    "harbor",
];

/// Token feature clusters: context, aircraft, weapon, ship head, ship tail,
/// generic military noun. The ambiguous `Phoenix` mixes three of them.
fn cluster(word: &str) -> [f64; 6] {
    let one = |i: usize| {
        let mut c = [0.0; 6];
        c[i] = 1.0;
        c
    };
    if word == "Phoenix" {
        return [0.15, 0.5, 0.45, 0.0, 0.0, 0.0];
    }
    if AIR_WORDS.contains(&word) {
        one(1)
    } else if WPN_WORDS.contains(&word) {
        one(2)
    } else if SHIP_HEAD.contains(&word) {
        one(3)
    } else if SHIP_TAIL.contains(&word) {
        one(4)
    } else if GENERIC.contains(&word) {
        one(5)
    } else {
        one(0)
    }
}

fn rng_for(tag: &str) -> ChaCha8Rng {
    let d = Sha256::digest(tag.as_bytes());
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(d[..8].try_into().unwrap()))
}

fn token_vector(word: &str) -> Vec<f64> {
    let mut rng = rng_for(&format!("tok:{word}"));
    let mut v: Vec<f64> = cluster(word)
        .iter()
        .map(|c| 3.0 * c + rng.random_range(-0.1..0.1))
        .collect();
    v.extend((0..6).map(|_| rng.random_range(-0.15..0.15)));
    v
}

fn random_unit(tag: &str, dim: usize) -> Vec<f64> {
    let mut rng = rng_for(tag);
    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn surface_type(surface: &str) -> Option<&'static str> {
    for (_, _, ents) in TRAIN.iter().chain(TEST) {
        if let Some((_, t, _)) = ents.iter().find(|(s, _, _)| *s == surface) {
            return Some(t);
        }
    }
    for (pool, t) in [(AIR_POOL, "AIRCRAFT"), (WPN_POOL, "WEAPON"), (SHIP_POOL, "SHIP")] {
        if pool.contains(&surface) {
            return Some(t);
        }
    }
    if !surface.contains(' ') {
        let c = cluster(surface);
        if c[1] == 1.0 {
            return Some("AIRCRAFT");
        }
        if c[2] == 1.0 {
            return Some("WEAPON");
        }
        if c[3] == 1.0 {
            return Some("SHIP");
        }
    }
    None
}

fn entity_vector(surface: &str) -> Vec<f64> {
    let mut rng = rng_for(&format!("ent:{surface}"));
    let mut v = vec![0.0; 4];
    match surface_type(surface) {
        Some(t) => v[TYPES.iter().position(|x| *x == t).unwrap()] = 1.0,
        None => v[3] = 1.0,
    }
    v.extend((0..4).map(|_| rng.random_range(-0.25..0.25)));
    v
}

fn char_offset(text: &str, surface: &str) -> (usize, usize) {
    let b = text.find(surface).unwrap_or_else(|| panic!("{surface} not in {text}"));
    let cs = text[..b].chars().count();
    (cs, cs + surface.chars().count())
}

fn image_path(id: &str) -> String {
    format!("{id}.jpg")
}

fn record(id: &str, text: &str, ents: &[Ent]) -> Value {
    let entities: Vec<Value> = ents
        .iter()
        .map(|(s, t, b)| {
            let (cs, ce) = char_offset(text, s);
            let region = b.map(|b| json!({"x_min": b[0], "y_min": b[1], "x_max": b[2], "y_max": b[3]}));
            json!({"char_start": cs, "char_end": ce, "type": t, "box": region, "text": s})
        })
        .collect();
    json!({
        "id": id,
        "text": text,
        "image": {"path": image_path(id), "width": WIDTH, "height": HEIGHT},
        "entities": entities,
    })
}

fn write_lines(path: &Path, lines: &[Value]) {
    let body: String = lines.iter().map(|v| format!("{v}\n")).collect();
    fs::write(path, body).unwrap();
}

fn lc_first(text: &str) -> String {
    let mut c = text.chars();
    match c.next() {
        Some(f) => f.to_lowercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn pool_for(t: &str) -> &'static [&'static str] {
    match t {
        "AIRCRAFT" => AIR_POOL,
        "WEAPON" => WPN_POOL,
        _ => SHIP_POOL,
    }
}

/// The samples the oracle writes for a seed; the second field of each entry
/// is its entity list as (text, type).
fn synth_outputs(seed: usize, substitution: bool, count: usize) -> Vec<(String, Vec<(String, String)>)> {
    let (id, text, ents) = TRAIN[seed];
    (0..count)
        .map(|j| {
            if substitution {
                let mut out = text.to_string();
                let mut entities = Vec::new();
                for (m, (s, t, _)) in ents.iter().enumerate() {
                    let pool = pool_for(t);
                    let mut pick = pool[(seed * 2 + j + m) % pool.len()];
                    if pick == *s {
                        pick = pool[(seed * 2 + j + m + 1) % pool.len()];
                    }
                    out = out.replacen(s, pick, 1);
                    let t = if id == "d07" && j == 1 { "VESSEL" } else { t };
                    entities.push((pick.to_string(), t.to_string()));
                }
                (out, entities)
            } else {
                let lead = if j == 0 {
                    "Reports confirmed that "
                } else {
                    "Earlier today, "
                };
                let out = format!("{lead}{}", lc_first(text));
                let mut entities: Vec<(String, String)> =
                    ents.iter().map(|(s, t, _)| (s.to_string(), t.to_string())).collect();
                if id == "d03" && j == 1 {
                    entities.clear();
                }
                if id == "d09" && j == 0 {
                    entities[0].0 = "M-249".into();
                }
                (out, entities)
            }
        })
        .collect()
}

fn line_after<'a>(prompt: &'a str, header: &str, last: bool) -> &'a str {
    section(prompt, header, last).lines().next().unwrap_or("")
}

fn section<'a>(prompt: &'a str, header: &str, last: bool) -> &'a str {
    let at = if last {
        prompt.rfind(header)
    } else {
        prompt.find(header)
    }
    .unwrap_or_else(|| panic!("no `{header}`"));
    let rest = &prompt[at + header.len()..];
    rest.split("\n\n").next().unwrap_or("").trim_end()
}

/// `1. "X" (T)` or `- "X" (T)` lines.
fn parse_listed(block: &str) -> Vec<(String, String)> {
    block
        .lines()
        .filter_map(|l| {
            let a = l.find('"')?;
            let b = l.rfind("\" (")?;
            let t = &l[b + 3..l[b..].find(')')? + b];
            Some((l[a + 1..b].to_string(), t.to_string()))
        })
        .collect()
}

fn item_by_text<'a>(items: &'a [Item], text: &str) -> Option<(usize, &'a Item)> {
    items.iter().enumerate().find(|(_, (_, t, _))| *t == text)
}

fn span_of(sentence: &Sentence, surface: &str) -> Option<(usize, usize)> {
    sentence.find_all(surface).into_iter().next()
}

fn oracle(request: &ChatRequest) -> Result<String, TransportError> {
    let prompt = request.messages[0]
        .content
        .iter()
        .find_map(|p| match p {
            ContentPart::Text { text } => Some(text.as_str()),
            _ => None,
        })
        .expect("text part");

    if prompt.contains("Step 1. Following the guideline strictly") {
        let sentence = line_after(prompt, "Sentence:\n", false);
        let (_, (id, _, ents)) = item_by_text(TRAIN, sentence).expect("guideline sentence");
        let mut predictions: Vec<Value> = ents.iter().map(|(s, t, _)| json!({"text": s, "type": t})).collect();
        let mut negatives = Vec::new();
        if *id == "d04" {
            predictions[0] = json!({"text": "MG5 machine gun", "type": "WEAPON"});
            negatives.push(json!({"type": "WEAPON", "description": "Do not extend a weapon mention over generic nouns such as \"machine gun\"."}));
        }
        if *id == "d02" {
            predictions.push(json!({"text": "fighter", "type": "AIRCRAFT"}));
        }
        return Ok(json!({"predictions": predictions, "negatives": negatives}).to_string());
    }
    if prompt.contains("update the description of each type") {
        let listed = parse_listed(section(prompt, "Entities:\n", false));
        let mut seen: Vec<String> = listed.into_iter().map(|(_, t)| t).collect();
        seen.dedup();
        let descriptions: Vec<Value> = seen
            .iter()
            .map(|t| {
                let d = match t.as_str() {
                    "AIRCRAFT" => "A specific aircraft model or designation, such as a fighter or bomber type, without generic nouns.",
                    "WEAPON" => "A specific weapon system or munition by its model name, excluding generic words like gun or missile.",
                    _ => "A named ship or ship class, including its prefix or class number, excluding generic vessel nouns.",
                };
                json!({"type": t, "description": d})
            })
            .collect();
        return Ok(json!({"descriptions": descriptions}).to_string());
    }
    if prompt.contains("Seed sentence:\n") {
        let sentence = line_after(prompt, "Seed sentence:\n", false);
        let (seed, _) = item_by_text(TRAIN, sentence).expect("seed sentence");
        let count: usize = prompt
            .split("Produce ")
            .nth(1)
            .and_then(|r| r.split_whitespace().next())
            .and_then(|n| n.parse().ok())
            .expect("count");
        let samples: Vec<Value> = synth_outputs(seed, prompt.contains("Entity-level substitution"), count)
            .into_iter()
            .map(|(s, es)| {
                let es: Vec<Value> = es.iter().map(|(x, t)| json!({"text": x, "type": t})).collect();
                json!({"sentence": s, "entities": es})
            })
            .collect();
        return Ok(format!("Here you go:\n```json\n{}\n```", json!({ "samples": samples })));
    }
    if prompt.contains("You are reviewing uncertain predictions") {
        let text = line_after(prompt, "Sentence:\n", false);
        let (_, (id, _, ents)) = item_by_text(TEST, text).expect("refine sentence");
        let sentence = Sentence::new(*id, text).unwrap();
        let gold: Vec<((usize, usize), &str, &str)> = ents
            .iter()
            .map(|(s, t, _)| (span_of(&sentence, s).unwrap(), *s, *t))
            .collect();
        let items: Vec<Value> = parse_listed(section(prompt, "Uncertain predictions:\n", false))
            .iter()
            .enumerate()
            .map(|(i, (s, t))| {
                let span = span_of(&sentence, s).unwrap();
                let exact = gold.iter().find(|(g, _, gt)| *g == span && gt == t);
                let overlap = gold.iter().find(|(g, _, _)| g.0 < span.1 && span.0 < g.1);
                match (exact, overlap) {
                    (Some(_), _) => json!({"id": i + 1, "verdict": "CONFIRM", "text": s, "type": t}),
                    (None, Some((_, gs, gt))) => json!({"id": i + 1, "verdict": "CORRECT", "text": gs, "type": gt}),
                    _ => json!({"id": i + 1, "verdict": "DELETE", "text": s, "type": t}),
                }
            })
            .collect();
        return Ok(json!({"reasoning": "Checked each mention against the sentence and the image.", "entities": items, "added": []}).to_string());
    }
    if prompt.starts_with("You locate named entities") {
        let text = line_after(prompt, "Sentence:\n", true);
        let (_, (_, _, ents)) = item_by_text(TEST, text).expect("ground sentence");
        let examples = &prompt[..prompt.find("Now the query.").unwrap()];
        let supported: Vec<String> = examples
            .lines()
            .filter(|l| l.starts_with("- \"") && !l.ends_with(": null"))
            .filter_map(|l| parse_listed(l).pop().map(|(_, t)| t))
            .collect();
        let boxes: Vec<Value> = parse_listed(section(prompt, "Entities:\n", true))
            .iter()
            .enumerate()
            .map(|(i, (s, t))| {
                let gold = ents.iter().find(|(gs, gt, _)| gs == s && gt == t);
                let b = match gold {
                    Some((_, _, Some(b))) if supported.contains(t) => json!(b),
                    Some((_, _, Some(b))) => {
                        let w = b[2] - b[0];
                        json!([b[0] + w, b[1], b[2] + w, b[3]])
                    }
                    _ => Value::Null,
                };
                json!({"id": i + 1, "box": b})
            })
            .collect();
        return Ok(json!({ "entities": boxes }).to_string());
    }
    Err(TransportError::Payload(format!(
        "oracle cannot answer: {}",
        &prompt[..prompt.len().min(80)]
    )))
}

const CONFIG: &str = r#"version = 1
seed = 13
work_dir = "work"

[paths]
train = "train.jsonl"
test = "test.jsonl"
image_root = "images"
token_embeddings = "emb/token.emb"
sentence_embeddings = "emb/sentence.emb"
entity_embeddings = "emb/entity.emb"
image_embeddings = "emb/image.emb"
transcripts = "transcripts.jsonl"

[schema]
types = ["AIRCRAFT", "WEAPON", "SHIP"]

[features]
token_keys = "surface"

[train]
epochs = 60
batch_size = 4
emission_lr = 0.01
crf_lr = 0.05

[gateway]
mode = "replay"
"#;

pub const VARIANTS: &[(&str, &[&str])] = &[
    ("overall", &[]),
    ("w/o stage1", &["stages.stage1=false"]),
    ("w/o stage2", &["stages.stage2=false"]),
    ("w/o stage3", &["stages.stage3=false"]),
    ("w/o mes", &["stages.mes=false"]),
];

fn words(text: &str) -> Vec<String> {
    Sentence::new("x", text)
        .unwrap()
        .tokens
        .into_iter()
        .map(|t| t.surface)
        .collect()
}

fn build_e2e(dir: &Path) -> BTreeMap<String, f64> {
    fs::create_dir_all(dir.join("emb")).unwrap();
    fs::create_dir_all(dir.join("images")).unwrap();
    fs::write(dir.join("images/.gitkeep"), "").unwrap();
    let lines = |items: &[Item]| items.iter().map(|(id, t, e)| record(id, t, e)).collect::<Vec<_>>();
    write_lines(&dir.join("train.jsonl"), &lines(TRAIN));
    write_lines(&dir.join("test.jsonl"), &lines(TEST));
    fs::write(dir.join("pipeline.toml"), CONFIG).unwrap();

    let mut texts: Vec<String> = TRAIN.iter().chain(TEST).map(|(_, t, _)| t.to_string()).collect();
    for seed in 0..TRAIN.len() {
        for sub in [true, false] {
            texts.extend(synth_outputs(seed, sub, 2).into_iter().map(|(t, _)| t));
        }
    }
    let mut tokens = EmbeddingStore::new(Some(StoreKind::Token), 12);
    let mut entities = EmbeddingStore::new(Some(StoreKind::Entity), 8);
    for text in &texts {
        let ws = words(text);
        for w in &ws {
            if !tokens.contains(w) {
                tokens.insert(w.clone(), token_vector(w)).unwrap();
            }
        }
        for n in 1..=4 {
            for win in ws.windows(n) {
                let surface = win.join(" ");
                let key = entity_key(&surface);
                if !entities.contains(&key) {
                    entities.insert(key, entity_vector(&surface)).unwrap();
                }
            }
        }
    }
    tokens.write_binary(&dir.join("emb/token.emb")).unwrap();
    entities.write_binary(&dir.join("emb/entity.emb")).unwrap();

    let mut sentences = EmbeddingStore::new(Some(StoreKind::Sentence), 8);
    let mut images = EmbeddingStore::new(Some(StoreKind::Image), 8);
    for (id, _, _) in TRAIN.iter().chain(TEST) {
        sentences.insert(*id, random_unit(&format!("sent:{id}"), 8)).unwrap();
        let p = image_path(id);
        images
            .insert(image_key(&p), random_unit(&format!("img:{p}"), 8))
            .unwrap();
    }
    sentences.write_binary(&dir.join("emb/sentence.emb")).unwrap();
    images.write_binary(&dir.join("emb/image.emb")).unwrap();

    let transcripts = dir.join("transcripts.jsonl");
    let _ = fs::remove_file(&transcripts);
    let scratch = std::env::temp_dir().join(format!("gmner-fixture-{}", std::process::id()));
    let mut f1 = BTreeMap::new();
    for (name, overrides) in VARIANTS {
        let mut o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        o.push("gateway.mode=\"record\"".into());
        o.push("gateway.endpoint=\"http://oracle.invalid\"".into());
        o.push(format!(
            "work_dir={:?}",
            scratch.join(name.replace(['/', ' '], "_")).display().to_string()
        ));
        let (config, hash) = PipelineConfig::load(&dir.join("pipeline.toml"), &o).unwrap();
        let cache = TranscriptCache::open(&transcripts).unwrap();
        let gateway = Gateway::new(config.gateway.clone(), cache, Some(Box::new(FnTransport(oracle)))).unwrap();
        let pipeline = Pipeline::with_gateway(config, hash, gateway).unwrap();
        let report = pipeline.run_all().unwrap();
        println!(
            "{name:<12} P {:.4} R {:.4} F1 {:.4}",
            report.precision, report.recall, report.f1
        );
        dump(&pipeline);
        f1.insert(name.to_string(), report.f1);
    }
    let _ = fs::remove_dir_all(&scratch);
    f1
}

fn dump(p: &Pipeline) {
    let refined = fs::read_to_string(p.path(gmner::pipeline::Artifact::Refined)).unwrap();
    for line in refined.lines().skip(1) {
        let v: Value = serde_json::from_str(line).unwrap();
        let ms: Vec<String> = v["mentions"]
            .as_array()
            .unwrap()
            .iter()
            .map(|m| format!("{}:{}", m["surface"].as_str().unwrap(), m["type"].as_str().unwrap()))
            .collect();
        println!("    {} {:?}", v["id"].as_str().unwrap(), ms);
    }
    if let Ok(r) = fs::read_to_string(p.path(gmner::pipeline::Artifact::Routing)) {
        for line in r.lines().skip(1) {
            let v: Value = serde_json::from_str(line).unwrap();
            if v["verdict"] == "REFINE" {
                println!(
                    "    routed {} {} u={:.3}",
                    v["sentence_id"],
                    v["surface"],
                    v["uncertainty"].as_f64().unwrap()
                );
            }
        }
    }
}

/// Ten sentences whose token features encode their gold label.
fn build_separable(dir: &Path) {
    fs::create_dir_all(dir).unwrap();
    let items: &[Item] = &[
        ("s01", "The F-35 landed.", &[("F-35", "AIRCRAFT", None)]),
        (
            "s02",
            "Crews loaded the Javelin quickly.",
            &[("Javelin", "WEAPON", None)],
        ),
        (
            "s03",
            "A Sea Harrier hovered near the ship.",
            &[("Sea Harrier", "AIRCRAFT", None)],
        ),
        ("s04", "Nothing moved on the runway.", &[]),
        (
            "s05",
            "The M777 howitzer fired twice.",
            &[("M777 howitzer", "WEAPON", None)],
        ),
        (
            "s06",
            "Two Gripen jets escorted a Tu-95.",
            &[("Gripen", "AIRCRAFT", None), ("Tu-95", "AIRCRAFT", None)],
        ),
        (
            "s07",
            "Troops carried the Stinger and the NLAW.",
            &[("Stinger", "WEAPON", None), ("NLAW", "WEAPON", None)],
        ),
        (
            "s08",
            "The Eurofighter Typhoon climbed fast.",
            &[("Eurofighter Typhoon", "AIRCRAFT", None)],
        ),
        (
            "s09",
            "Observers counted three HIMARS launchers.",
            &[("HIMARS", "WEAPON", None)],
        ),
        (
            "s10",
            "An MQ-9 Reaper tracked the convoy.",
            &[("MQ-9 Reaper", "AIRCRAFT", None)],
        ),
    ];
    let schema = Schema::new(&["AIRCRAFT", "WEAPON"]).unwrap();
    write_lines(
        &dir.join("train.jsonl"),
        &items.iter().map(|(id, t, e)| record(id, t, e)).collect::<Vec<_>>(),
    );
    let mut store = EmbeddingStore::new(Some(StoreKind::Token), 8);
    for (id, text, ents) in items {
        let sentence = Sentence::new(*id, *text).unwrap();
        let mut labels = vec![0usize; sentence.len()];
        for (s, t, _) in ents.iter() {
            let (a, b) = span_of(&sentence, s).unwrap();
            let k = schema.get(t).unwrap().id;
            labels[a] = 1 + 2 * k;
            for l in labels.iter_mut().take(b).skip(a + 1) {
                *l = 2 + 2 * k;
            }
        }
        for (i, l) in labels.iter().enumerate() {
            let mut rng = rng_for(&format!("sep:{id}#{i}"));
            let mut v: Vec<f64> = (0..5)
                .map(|j| if j == *l { 2.0 } else { 0.0 } + rng.random_range(-0.1..0.1))
                .collect();
            v.extend((0..3).map(|_| rng.random_range(-0.2..0.2)));
            store.insert(token_key(id, i), v).unwrap();
        }
    }
    store.write_binary(&dir.join("token.emb")).unwrap();
}

fn main() {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures"));
    build_separable(&root.join("separable"));
    let f1 = build_e2e(&root.join("e2e"));
    fs::write(
        root.join("e2e/expected.json"),
        serde_json::to_string_pretty(&f1).unwrap() + "\n",
    )
    .unwrap();
    let overall = f1["overall"];
    for (name, v) in &f1 {
        if name != "overall" && *v >= overall {
            eprintln!("warning: {name} ({v:.4}) does not fall below overall ({overall:.4})");
        }
    }
}
