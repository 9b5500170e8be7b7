//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs offline against the checked-in corpus.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tower::ServiceExt;

use streetlens_core::assess::{aggregate, parse_answer, Aggregation, ImageAnswer};
use streetlens_core::corpus::{AbstractEntry, AbstractsDoc, CodebookItem, OptionDef, RatingMatrix, TaskKind};
use streetlens_core::geo::{haversine_m, sample_segment, GeoPoint, RoadSegment};
use streetlens_core::pipeline::{ModuleId, RunConfig};
use streetlens_core::prompt::{
    build_classifier_request, build_rewrite_request, build_role_request, parse_classifier_response,
};
use streetlens_core::reliability::{icc, IccVariant};
use streetlens_service::http::router;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

const EARTH_RADIUS_M: f64 = 6_371_008.8;

fn sampling_geometry() -> Outcome {
    let started = Instant::now();
    let span_deg = (1000.0 / EARTH_RADIUS_M).to_degrees();
    let segment = RoadSegment::new(
        "equator",
        None,
        vec![GeoPoint { lat: 0.0, lon: 0.0 }, GeoPoint { lat: 0.0, lon: span_deg }],
    )
    .map_err(|e| e.to_string())?;
    let points = sample_segment(&segment, 5.0).map_err(|e| e.to_string())?;
    ensure(points.len() == 201, || format!("{} points", points.len()))?;
    let worst = points
        .windows(2)
        .map(|w| (haversine_m(w[0].position, w[1].position) - 5.0).abs() / 5.0)
        .fold(0.0, f64::max);
    ensure(worst <= 1e-6, || format!("spacing off by {worst:e} relative"))?;
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))?;
    Ok(format!("201 points, max spacing error {worst:.1e}, {elapsed:?}"))
}

fn geodesic_kernels() -> Outcome {
    // Arcs along a meridian or the equator: distance is R times the angle.
    let one_degree = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
    let quarter = EARTH_RADIUS_M * std::f64::consts::FRAC_PI_2;
    let a = haversine_m(GeoPoint { lat: 0.0, lon: 0.0 }, GeoPoint { lat: 0.0, lon: 1.0 });
    let b = haversine_m(GeoPoint { lat: 0.0, lon: 0.0 }, GeoPoint { lat: 90.0, lon: 0.0 });
    ensure((a - one_degree).abs() <= 0.01, || format!("(0,0)-(0,1) = {a}, oracle {one_degree}"))?;
    ensure((b - quarter).abs() <= 0.1, || format!("(0,0)-(90,0) = {b}, oracle {quarter}"))?;
    ensure((a - 111_195.08).abs() <= 0.01 && (b - 10_007_557.2).abs() <= 0.1, || {
        format!("published figures disagree: {a}, {b}")
    })?;
    Ok(format!("{a:.3} m, {b:.1} m"))
}

fn sidewalk() -> CodebookItem {
    CodebookItem {
        item_id: "sidewalk".into(),
        measure_name: "Sidewalk".into(),
        question_text: "Rate the condition of the sidewalk.".into(),
        options: ["Good", "Fair", "Poor"]
            .iter()
            .enumerate()
            .map(|(i, l)| OptionDef {
                ordinal: i as u32,
                label: (*l).into(),
                description: None,
            })
            .collect(),
        task_kind: TaskKind::Unknown,
    }
}

fn prompt_fidelity() -> Outcome {
    let golden = |text: &'static str| text.strip_suffix('\n').unwrap_or(text);
    let doc = AbstractsDoc {
        entries: vec![
            AbstractEntry {
                title: "Curb ramps and sidewalk gaps".into(),
                abstract_text: "We map curb ramps across a mid-sized city.".into(),
            },
            AbstractEntry {
                title: "Litter counts from imagery".into(),
                abstract_text: "Street images support counting litter.".into(),
            },
        ],
    };
    let cases = [
        (
            "role",
            build_role_request(&doc).map_err(|e| e.to_string())?,
            golden(include_str!("../../core/tests/golden/role_request.txt")),
            "You are an expert in the following fields",
        ),
        (
            "classifier",
            build_classifier_request(&sidewalk()),
            golden(include_str!("../../core/tests/golden/classifier_request.txt")),
            "You are a classifier of annotation tasks",
        ),
        (
            "rewrite",
            build_rewrite_request(&sidewalk()),
            golden(include_str!("../../core/tests/golden/rewrite_request.txt")),
            "Rewrite the question as a clear, self-contained sentence",
        ),
    ];
    for (name, request, expected, anchor) in cases {
        let text = request.messages.iter().map(|m| m.text()).collect::<Vec<_>>().join("\n");
        ensure(text == expected, || format!("{name} request differs from golden text"))?;
        ensure(text.contains(anchor), || format!("{name} request lacks anchor {anchor:?}"))?;
    }
    Ok("3 templates byte-identical to golden files".into())
}

fn reply_text() -> impl Strategy<Value = String> {
    prop_oneof![
        any::<String>(),
        "[ \t\n]{0,3}[01][ \t\n]{0,3}",
        "[ \t]{0,2}[-+]?[0-9]{1,3}[.,]?[ \t]{0,2}",
        "(Answer: )?[0-9](\\.| )?[a-z]{0,3}",
    ]
}

fn runner_config() -> Config {
    Config {
        failure_persistence: None,
        ..Config::with_cases(10_000)
    }
}

fn option_item(n: usize) -> CodebookItem {
    let mut item = sidewalk();
    item.options = (0..n)
        .map(|i| OptionDef {
            ordinal: i as u32,
            label: format!("o{i}"),
            description: None,
        })
        .collect();
    item
}

fn strict_parsing() -> Outcome {
    let mut runner = TestRunner::new(runner_config());
    runner
        .run(&reply_text(), |s| {
            let t = s.trim_matches(char::is_whitespace);
            prop_assert_eq!(parse_classifier_response(&s).is_ok(), t == "0" || t == "1", "{:?}", s);
            Ok(())
        })
        .map_err(|e| format!("classifier: {e}"))?;
    let mut runner = TestRunner::new(runner_config());
    runner
        .run(&(reply_text(), 2usize..6), |(s, n)| {
            let oracle = s
                .trim_matches(char::is_whitespace)
                .parse::<i64>()
                .ok()
                .filter(|v| (0..n as i64).contains(v))
                .map(|v| v as u32);
            prop_assert_eq!(parse_answer(&s, &option_item(n)).ok(), oracle, "{:?}", s);
            Ok(())
        })
        .map_err(|e| format!("answers: {e}"))?;
    Ok("10000 classifier replies, 10000 answers".into())
}

/// Two-way ANOVA via explicit residuals, independent of the crate's
/// subtraction route.
fn icc_oracle(x: &[Vec<f64>], average: bool) -> f64 {
    let (n, k) = (x.len() as f64, x[0].len() as f64);
    let grand = x.iter().flatten().sum::<f64>() / (n * k);
    let rows: Vec<f64> = x.iter().map(|r| r.iter().sum::<f64>() / k).collect();
    let cols: Vec<f64> = (0..x[0].len()).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut sse = 0.0;
    for (i, row) in x.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            sse += (v - rows[i] - cols[j] + grand).powi(2);
        }
    }
    let msr = k * rows.iter().map(|r| (r - grand).powi(2)).sum::<f64>() / (n - 1.0);
    let msc = n * cols.iter().map(|c| (c - grand).powi(2)).sum::<f64>() / (k - 1.0);
    let mse = sse / ((n - 1.0) * (k - 1.0));
    if average {
        (msr - mse) / (msr + (msc - mse) / n)
    } else {
        (msr - mse) / (msr + (k - 1.0) * mse + k * (msc - mse) / n)
    }
}

fn icc_of(cells: Vec<Vec<f64>>, variant: IccVariant) -> Result<f64, String> {
    let m = RatingMatrix::from_rows(cells)?;
    icc(&m, variant).map(|r| r.value).map_err(|e| e.to_string())
}

fn icc_correctness() -> Outcome {
    let started = Instant::now();
    let small = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
    let v = icc_of(small.clone(), IccVariant::Single)?;
    ensure(v == 0.8 && icc_oracle(&small, false) == 0.8, || format!("[[1,2],[3,4]] gave {v}"))?;
    let same = vec![vec![1.0, 1.0, 1.0], vec![3.0, 3.0, 3.0], vec![2.0, 2.0, 2.0]];
    let v = icc_of(same, IccVariant::Single)?;
    ensure(v == 1.0, || format!("identical columns gave {v}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(20_240_601);
    let mut checked = 0;
    while checked < 50 {
        let n = rng.random_range(3..=20);
        let k = rng.random_range(2..=6);
        let cells: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..k).map(|_| f64::from(rng.random_range(0u8..5))).collect())
            .collect();
        let (scale, shift) = (rng.random_range(0.1..10.0), rng.random_range(-50.0..50.0));
        // Degenerate draws are redrawn rather than counted.
        let mut compared = 0;
        for (variant, average) in [(IccVariant::Single, false), (IccVariant::Average, true)] {
            let Ok(got) = icc_of(cells.clone(), variant) else { continue };
            compared += 1;
            let want = icc_oracle(&cells, average);
            ensure((got - want).abs() <= 1e-9, || format!("{n}x{k} {variant}: {got} vs oracle {want}"))?;
            let moved = cells.iter().map(|r| r.iter().map(|x| x * scale + shift).collect()).collect();
            let again = icc_of(moved, variant)?;
            ensure((again - got).abs() <= 1e-9, || format!("affine change moved {variant} by {}", again - got))?;
        }
        if compared == 2 {
            checked += 1;
        }
    }
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))?;
    Ok(format!("0.8 exact, identical columns 1, 50 seeded matrices, {elapsed:?}"))
}

fn answers(ordinals: &[u32]) -> Vec<ImageAnswer> {
    ordinals
        .iter()
        .enumerate()
        .map(|(i, &o)| ImageAnswer {
            image_id: format!("i{i}"),
            item_id: "sidewalk".into(),
            answer_ordinal: o,
            raw_text: o.to_string(),
            attempt_count: 1,
        })
        .collect()
}

fn aggregation() -> Outcome {
    let item = option_item(5);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..1000 {
        let len = rng.random_range(1..24);
        let values: Vec<u32> = (0..len).map(|_| rng.random_range(0..5)).collect();
        let mut shuffled = values.clone();
        shuffled.shuffle(&mut rng);
        for rule in [Aggregation::Majority, Aggregation::MeanRound] {
            let a = aggregate(&answers(&values), &item, rule).map_err(|e| e.to_string())?;
            let b = aggregate(&answers(&shuffled), &item, rule).map_err(|e| e.to_string())?;
            ensure(a == b, || format!("{rule:?} changed under permutation of {values:?}"))?;
        }
    }
    for (values, want) in [(vec![2, 1, 1, 2], 1), (vec![3, 0], 0), (vec![4, 4, 2, 2, 3], 2)] {
        let got = aggregate(&answers(&values), &item, Aggregation::Majority).map_err(|e| e.to_string())?;
        ensure(got == want, || format!("tie {values:?} resolved to {got}"))?;
    }
    Ok("1000 multisets, ties to lowest".into())
}

/// File digests of a run directory. `report.json` loses its generation time
/// and transcripts lose timing fields; transcript lines are compared as a
/// multiset because concurrent requests finish in any order.
fn run_fingerprint(dir: &Path) -> BTreeMap<String, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
                continue;
            }
            let name = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            let bytes = std::fs::read(&path).unwrap();
            let normalized = match name.as_str() {
                "report.json" => {
                    let mut v: Value = serde_json::from_slice(&bytes).unwrap();
                    v.as_object_mut().unwrap().remove("generated_at");
                    v.to_string().into_bytes()
                }
                "transcripts.jsonl" => {
                    let mut lines: Vec<String> = String::from_utf8(bytes)
                        .unwrap()
                        .lines()
                        .map(|l| {
                            let mut v: Value = serde_json::from_str(l).unwrap();
                            let obj = v.as_object_mut().unwrap();
                            obj.remove("ts");
                            obj.remove("latency_ms");
                            v.to_string()
                        })
                        .collect();
                    lines.sort();
                    lines.join("\n").into_bytes()
                }
                _ => bytes,
            };
            let digest: String = Sha256::digest(&normalized).iter().map(|b| format!("{b:02x}")).collect();
            out.insert(name, digest);
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

async fn replay_once(root: &Path) -> Result<(BTreeMap<String, String>, usize), String> {
    let (service, transport) = common::offline_service(root);
    let config: RunConfig = serde_json::from_value(common::fixture_config_json()).map_err(|e| e.to_string())?;
    service.create_run(config, Some(&common::corpus())).map_err(|e| e.to_string())?;
    for m in [ModuleId::M1, ModuleId::M2, ModuleId::M3, ModuleId::M4, ModuleId::Reliability] {
        service.execute("demo", m).await.map_err(|e| e.to_string())?;
    }
    Ok((run_fingerprint(&service.run_dir("demo")), transport.calls()))
}

async fn end_to_end() -> Outcome {
    let started = Instant::now();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (first, calls_a) = replay_once(a.path()).await?;
    let (second, calls_b) = replay_once(b.path()).await?;
    let elapsed = started.elapsed();
    ensure(calls_a + calls_b == 0, || format!("{} network attempts", calls_a + calls_b))?;
    ensure(first.keys().eq(second.keys()), || "artifact sets differ".into())?;
    let differing: Vec<&String> = first.iter().filter(|(k, v)| second[*k] != **v).map(|(k, _)| k).collect();
    ensure(differing.is_empty(), || format!("differing artifacts: {differing:?}"))?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("{} files identical across 2 replays, {elapsed:?}", first.len()))
}

async fn send(app: &axum::Router, method: &str, uri: &str, body: Option<&Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn service_contract() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (service, _) = common::offline_service(dir.path());
    let app = router(common::app_state(service));
    let (status, _) = send(&app, "POST", "/runs", Some(&common::fixture_config_json())).await;
    ensure(status == StatusCode::CREATED, || format!("create returned {status}"))?;
    let (status, body) = send(&app, "POST", "/runs/demo/modules/m3:execute?wait=true", None).await;
    ensure(
        status == StatusCode::CONFLICT && body["error"]["code"] == "DependencyNotMet",
        || format!("m3 before m2 returned {status} {body}"),
    )?;
    for m in ["m1", "m2", "m3", "m4"] {
        let (status, body) = send(&app, "POST", &format!("/runs/demo/modules/{m}:execute?wait=true"), None).await;
        ensure(status == StatusCode::OK, || format!("{m} returned {status} {body}"))?;
    }
    let (_, mut prompts) = send(&app, "GET", "/runs/demo/prompts", None).await;
    prompts["role_prompt"] = json!("You are a municipal road inspector.");
    let (status, state) = send(&app, "PUT", "/runs/demo/prompts", Some(&prompts)).await;
    ensure(status == StatusCode::OK, || format!("prompt edit returned {status}"))?;
    ensure(
        state["modules"]["m3"]["status"] == "stale" && state["modules"]["m4"]["status"] == "stale",
        || format!("after prompt edit: {}", state["modules"]),
    )?;
    Ok("409 DependencyNotMet; prompt edit stales m3, m4; API only".into())
}

fn main() {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
    let results: Vec<(&str, Outcome)> = vec![
        ("sampling geometry", sampling_geometry()),
        ("geodesic kernels", geodesic_kernels()),
        ("prompt fidelity", prompt_fidelity()),
        ("strict parsing", strict_parsing()),
        ("ICC correctness", icc_correctness()),
        ("aggregation", aggregation()),
        ("end-to-end determinism", rt.block_on(end_to_end())),
        ("service contract", rt.block_on(service_contract())),
    ];
    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(reason) => {
                failed += 1;
                println!("FAIL  {name}: {reason}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
