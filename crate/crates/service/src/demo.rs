//! A small synthetic corpus with a recorded cassette, so the whole pipeline
//! can run offline. Everything here is deterministic: regenerating into an
//! empty directory reproduces the same bytes.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use base64::Engine;
use image::codecs::jpeg::JpegEncoder;
use image::{ExtendedColorType, Rgb, RgbImage};
use serde_json::{json, Value};
use streetlens_core::assess::{stride_select, AssessmentConfig, ANSWER_INSTRUCTION};
use streetlens_core::chat::sha256_hex;
use streetlens_core::corpus::{Codebook, CodebookItem, OptionDef, TaskKind};
use streetlens_core::feedback::EXPLAIN_INSTRUCTION;
use streetlens_core::gateway::{
    local_image_path, BackendConfig, GatewayMode, ImageryProvider, ScriptedTransport,
};
use streetlens_core::geo::{load_roads, plan_views, sample_segment, CameraDefaults, ViewMode};
use streetlens_core::pipeline::{
    Backends, ModeConfig, ModuleId, ReliabilityConfig, RunConfig, RunService, SamplingConfig,
};

pub const DEMO_RUN_ID: &str = "demo";
pub const CONFIG_FILE: &str = "run.json";

const ROLE_REPLY: &str = "You are an urban health researcher who audits street environments \
from imagery and studies how physical disorder and road upkeep relate to neighborhood wellbeing.";

struct DemoSegment {
    id: &'static str,
    name: &'static str,
    /// (lon, lat) vertices.
    line: &'static [(f64, f64)],
    decay: u32,
    graffiti: u32,
    decay_note: &'static str,
    graffiti_note: &'static str,
}

const SEGMENTS: &[DemoSegment] = &[
    DemoSegment {
        id: "281",
        name: "Maple St",
        line: &[(-83.74300, 42.28080), (-83.74300, 42.28094)],
        decay: 1,
        graffiti: 0,
        decay_note: "There are only slight cracks, and any potholes present have been fixed or covered.",
        graffiti_note: "Walls and signs along the block are clean with no painted tags.",
    },
    DemoSegment {
        id: "282",
        name: "Oak Ave",
        line: &[(-83.74280, 42.28100), (-83.74262, 42.28100)],
        decay: 0,
        graffiti: 0,
        decay_note: "The asphalt is smooth and evenly colored with no visible cracks or patches.",
        graffiti_note: "No markings are visible on the building faces or poles.",
    },
    DemoSegment {
        id: "283",
        name: "Cedar Ct",
        line: &[(-83.74250, 42.28060), (-83.74240, 42.28066), (-83.74232, 42.28075)],
        decay: 2,
        graffiti: 1,
        decay_note: "Several long cracks run across the lane and the surface is worn near the curb.",
        graffiti_note: "Spray-painted tags cover part of a wall beside the sidewalk.",
    },
    DemoSegment {
        id: "284",
        name: "Birch Rd",
        line: &[(-83.74320, 42.28120), (-83.74320, 42.28109)],
        decay: 3,
        graffiti: 1,
        decay_note: "Open potholes and broken pavement edges show up in most views.",
        graffiti_note: "A utility box and a fence panel carry visible tags.",
    },
    DemoSegment {
        id: "285",
        name: "Elm St",
        line: &[(-83.74350, 42.28070), (-83.74335, 42.28070)],
        decay: 1,
        graffiti: 0,
        decay_note: "Thin hairline cracks appear near the shoulder but the lane is otherwise intact.",
        graffiti_note: "The facades are plain and free of painted marks.",
    },
    DemoSegment {
        id: "286",
        name: "Pine St",
        line: &[(-83.74200, 42.28090), (-83.74190, 42.28101)],
        decay: 0,
        graffiti: 1,
        decay_note: "The pavement looks recently resurfaced with crisp lane markings.",
        graffiti_note: "Colorful tags are painted on the side of a storefront.",
    },
];

/// segment, item, coder ratings for c1, c2, c3.
const HUMAN_RATINGS: &[(&str, &str, [u32; 3])] = &[
    ("281", "decay_1", [1, 1, 2]),
    ("282", "decay_1", [0, 0, 0]),
    ("283", "decay_1", [2, 3, 2]),
    ("284", "decay_1", [3, 3, 3]),
    ("285", "decay_1", [1, 2, 1]),
    ("286", "decay_1", [0, 1, 0]),
    ("281", "disorder_3", [0, 0, 0]),
    ("282", "disorder_3", [0, 0, 1]),
    ("283", "disorder_3", [1, 1, 1]),
    ("284", "disorder_3", [1, 1, 0]),
    ("285", "disorder_3", [0, 0, 0]),
    ("286", "disorder_3", [1, 1, 1]),
];

const DECAY_REWRITE: &str = "Question: What is the overall condition of the road surface shown in the images?
0. The road surface shows no visible damage.
1. The road surface has slight cracks, or potholes that have been patched.
2. The road surface shows moderate cracking or visible wear.
3. The road surface is severely damaged with open potholes.";

const GRAFFITI_REWRITE: &str = "Question: Is graffiti present on any wall, sign or other surface shown in the images?
0. No graffiti is visible on any surface.
1. Graffiti is visible on at least one surface.";

fn option(ordinal: u32, label: &str) -> OptionDef {
    OptionDef {
        ordinal,
        label: label.into(),
        description: None,
    }
}

pub fn codebook() -> Codebook {
    Codebook {
        items: vec![
            CodebookItem {
                item_id: "decay_1".into(),
                measure_name: "Decay 1".into(),
                question_text: "Rate the overall condition of the road surface visible in the images.".into(),
                options: vec![
                    option(0, "No visible damage"),
                    option(1, "Slight cracks or patched potholes"),
                    option(2, "Moderate cracking or worn surface"),
                    option(3, "Severe damage with open potholes"),
                ],
                task_kind: TaskKind::Unknown,
            },
            CodebookItem {
                item_id: "disorder_3".into(),
                measure_name: "Disorder 3".into(),
                question_text: "Verify the presence of graffiti on walls, signs or other surfaces.".into(),
                options: vec![option(0, "No graffiti"), option(1, "Graffiti present")],
                task_kind: TaskKind::Unknown,
            },
        ],
    }
}

fn roads_geojson() -> Value {
    let features: Vec<Value> = SEGMENTS
        .iter()
        .map(|s| {
            let coords: Vec<Value> = s.line.iter().map(|(lon, lat)| json!([lon, lat])).collect();
            json!({
                "type": "Feature",
                "properties": {"id": s.id, "name": s.name},
                "geometry": {"type": "LineString", "coordinates": coords},
            })
        })
        .collect();
    json!({"type": "FeatureCollection", "features": features})
}

fn abstracts() -> Value {
    json!({"entries": [
        {
            "title": "Auditing sidewalks and roadways from panoramic street imagery",
            "abstract": "We compare in-person and image-based audits of pavement condition, litter and graffiti across two hundred urban blocks. Trained coders reached high agreement on road surface items, while small objects such as cigarette butts were harder to see in imagery. We describe a coding protocol with worked examples for each item."
        },
        {
            "title": "Neighborhood physical disorder and resident health",
            "abstract": "Using a validated observational scale of physical disorder, we relate block-level decay and vandalism to self-reported health among adults. Disorder scores derived from virtual street audits were associated with poorer mental health after adjustment for household income."
        }
    ]})
}

/// A tiny street scene: sky, facade, road. Cracks scale with `decay`,
/// a tag appears when `graffiti` is set, and `variant` shifts a marker so
/// every view encodes to distinct bytes.
fn scene(variant: u32, decay: u32, graffiti: bool) -> Vec<u8> {
    const W: u32 = 96;
    const H: u32 = 72;
    let marker = (variant * 7) % (W - 8);
    let img = RgbImage::from_fn(W, H, |x, y| {
        let crack = y > 48 && decay > 0 && (x + 3 * y + variant).is_multiple_of(13 - decay * 3);
        let tag = graffiti && (30..52).contains(&x) && (24..36).contains(&y) && (x + y) % 3 != 0;
        if y < 20 {
            Rgb([120 + (y * 3) as u8, 170, 230])
        } else if y < 44 {
            if tag {
                Rgb([220, 40, 180])
            } else if (marker..marker + 8).contains(&x) && y < 26 {
                Rgb([40, 90, 60])
            } else {
                Rgb([176, 150, 120])
            }
        } else if crack {
            Rgb([30, 30, 30])
        } else {
            Rgb([96, 96, 100])
        }
    });
    let mut out = Vec::new();
    JpegEncoder::new_with_quality(&mut out, 85)
        .encode(img.as_raw(), W, H, ExtendedColorType::Rgb8)
        .expect("in-memory JPEG encoding");
    out
}

/// Street-image digest to segment id, and the scripted replies.
struct Script {
    segment_of_image: HashMap<String, &'static str>,
}

impl Script {
    fn target_segment(&self, body: &Value) -> Option<&'static DemoSegment> {
        let messages = body.get("messages")?.as_array()?;
        let images: Vec<&str> = messages
            .iter()
            .rev()
            .find_map(|m| {
                let parts = m.get("content")?.as_array()?;
                let data: Vec<&str> = parts.iter().filter_map(|p| p.get("data")?.as_str()).collect();
                (!data.is_empty()).then_some(data)
            })?;
        let bytes = base64::engine::general_purpose::STANDARD.decode(images[0]).ok()?;
        let id = self.segment_of_image.get(&sha256_hex(&bytes))?;
        SEGMENTS.iter().find(|s| s.id == *id)
    }

    fn reply(&self, body: &Value) -> String {
        let texts = streetlens_core::gateway::transport::body_texts(body).join("\n");
        let n_messages = body["messages"].as_array().map_or(0, Vec::len);
        let graffiti = texts.contains("graffiti") || texts.contains("Graffiti");
        if texts.contains("You are an expert in the following fields") {
            return ROLE_REPLY.into();
        }
        if texts.contains("You are a classifier of annotation tasks") {
            return match (graffiti, n_messages) {
                // One malformed reply exercises the repair path.
                (true, 1) => "1.".into(),
                (true, _) => "1".into(),
                (false, _) => "0".into(),
            };
        }
        if texts.contains("Rewrite the question as a clear") {
            return if graffiti { GRAFFITI_REWRITE } else { DECAY_REWRITE }.into();
        }
        let Some(seg) = self.target_segment(body) else {
            return "unrecognized request".into();
        };
        if texts.contains(EXPLAIN_INSTRUCTION) {
            return if graffiti { seg.graffiti_note } else { seg.decay_note }.into();
        }
        if texts.contains(ANSWER_INSTRUCTION) {
            let score = if graffiti { seg.graffiti } else { seg.decay };
            // Segment 283 answers verbosely once before complying.
            if seg.id == "283" && !graffiti && !texts.contains("nothing else") {
                return format!("Answer: {score}");
            }
            return score.to_string();
        }
        "unrecognized request".into()
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes).with_context(|| path.display().to_string())
}

fn pretty(value: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(value).expect("JSON serializes") + "\n"
}

fn demo_config(out: &Path, mode: GatewayMode) -> RunConfig {
    let backend = |model: &str| BackendConfig {
        requests_per_minute: 600,
        ..BackendConfig::new("http://127.0.0.1:9/v1/chat/completions", model)
    };
    let rel = |p: &str| if out.as_os_str().is_empty() { PathBuf::from(p) } else { out.join(p) };
    RunConfig {
        run_id: DEMO_RUN_ID.into(),
        roads_path: rel("roads.geojson"),
        codebook_path: rel("codebook.json"),
        exemplars_path: rel("exemplars.json"),
        abstracts_path: rel("abstracts.json"),
        human_annotations_path: Some(rel("human_annotations.csv")),
        sampling: SamplingConfig::default(),
        imagery_provider: ImageryProvider::Local { root: rel("imagery") },
        backends: Backends {
            llm: backend("demo-llm"),
            vlm: backend("demo-vlm"),
        },
        assessment: AssessmentConfig::default(),
        reliability: ReliabilityConfig::default(),
        mode: ModeConfig {
            kind: mode,
            cassette_path: Some(rel("cassette.json")),
        },
        seed: 7,
    }
}

/// Writes the corpus, its street imagery and a recorded cassette into `out`,
/// plus `run.json`, a replay-mode run config with paths relative to `out`.
pub async fn generate(out: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out)?;
    let roads = pretty(&roads_geojson());
    write(&out.join("roads.geojson"), &roads)?;
    let codebook = codebook();
    write(&out.join("codebook.json"), codebook.to_json() + "\n")?;
    write(&out.join("abstracts.json"), pretty(&abstracts()))?;

    let exemplars = [
        ("decay_1", "exemplars/decay_intact.jpg", 0, scene(900, 0, false)),
        ("decay_1", "exemplars/decay_severe.jpg", 3, scene(901, 3, false)),
        ("disorder_3", "exemplars/graffiti_tagged.jpg", 1, scene(902, 0, true)),
    ];
    let mut manifest = Vec::new();
    for (item, rel, answer, bytes) in &exemplars {
        write(&out.join(rel), bytes)?;
        manifest.push(json!({"item_id": item, "images": [rel], "answer_ordinal": answer}));
    }
    write(&out.join("exemplars.json"), pretty(&json!({"exemplars": manifest})))?;

    let mut csv = String::from("segment_id,item_id,coder_id,rating\n");
    for (seg, item, ratings) in HUMAN_RATINGS {
        for (coder, r) in ["c1", "c2", "c3"].iter().zip(ratings) {
            csv.push_str(&format!("{seg},{item},{coder},{r}\n"));
        }
    }
    write(&out.join("human_annotations.csv"), csv)?;

    // Street imagery for exactly the views the sampler will select.
    let road_set = load_roads(&roads)?;
    let sampling = SamplingConfig::default();
    let cap = AssessmentConfig::default().image_cap;
    let imagery = out.join("imagery");
    let mut segment_of_image = HashMap::new();
    let mut variant = 0;
    for (segment, demo) in road_set.segments.iter().zip(SEGMENTS) {
        let views: Vec<_> = sample_segment(segment, sampling.interval_m)?
            .iter()
            .flat_map(|p| plan_views(p, ViewMode::default(), &CameraDefaults::default()))
            .collect();
        for view in stride_select(&views, cap) {
            let bytes = scene(variant, demo.decay, demo.graffiti == 1);
            variant += 1;
            segment_of_image.insert(sha256_hex(&bytes), demo.id);
            write(&local_image_path(&imagery, &view), bytes)?;
        }
    }

    // Record the cassette by running the pipeline against the script.
    let cassette = out.join("cassette.json");
    let _ = fs::remove_file(&cassette);
    let script = Arc::new(Script { segment_of_image });
    let transport = ScriptedTransport::replies(move |body| script.reply(body));
    let store = out.join(".record-store");
    let _ = fs::remove_dir_all(&store);
    let service = RunService::open_with(&store, Some(Arc::new(transport)))?;
    service.create_run(demo_config(out, GatewayMode::Record), None)?;
    for module in [ModuleId::M1, ModuleId::M2, ModuleId::M3, ModuleId::M4] {
        service.execute(DEMO_RUN_ID, module).await?;
    }
    fs::remove_dir_all(&store)?;

    write(&out.join(CONFIG_FILE), pretty(&demo_config(Path::new(""), GatewayMode::Replay)))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_distinct_jpegs() {
        let a = scene(0, 1, false);
        let b = scene(1, 1, false);
        assert_eq!(&a[..2], &[0xFF, 0xD8]);
        assert_ne!(a, b);
        assert_eq!(a, scene(0, 1, false));
    }

    #[test]
    fn codebook_kinds_match_keyword_rules() {
        use streetlens_core::prompt::heuristic_classify;
        let cb = codebook();
        assert_eq!(heuristic_classify(&cb.items[0]).unwrap(), TaskKind::Perception);
        assert_eq!(heuristic_classify(&cb.items[1]).unwrap(), TaskKind::ObjectDetection);
    }
}
