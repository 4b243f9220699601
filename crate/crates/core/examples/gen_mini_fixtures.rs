//! Regenerates the derived parts of `fixtures/mini`: frame features, stub
//! chat replies, and the frozen digest of the run1 run file.
//!
//! cargo run -p medvidqa-core --example gen_mini_fixtures

use std::fs;
use std::path::Path;

use medvidqa::clients::{stub_embed, StubChatBackend, EXPANSION_SYSTEM_PROMPT};
use medvidqa::corpus::{load_corpus, load_gold_steps, load_topics};
use medvidqa::pipeline::{execute, file_digest, run_path, Command, Overrides, PipelineConfig};
use medvidqa::retrieval::{write_frame_features, FrameFeatures, Strategy};
use medvidqa::stepcap::{
    build_step_prompt, load_generated_captions, merge_captions, subtitle_captions, FORMAT_REMINDER,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FRAMES_PER_SEGMENT: usize = 2;
const FEATURE_DIM: usize = 64;

const EXPANSIONS: &[(&str, &str)] = &[
    ("q1", "1. Wash your hands.\n2. Press a clean cloth or gauze firmly on the cut to stop the bleeding.\n3. Raise the finger above your heart.\n4. Rinse the cut with clean water and cover it with a sterile bandage."),
    ("q2", "1. Make sure the scene is safe and call emergency services.\n2. Place the heel of your hand in the center of the chest.\n3. Push hard and fast, about two chest compressions per second.\n4. Let the chest rise fully and keep going until help arrives."),
    ("q3", "1. Shake the inhaler.\n2. Breathe out fully.\n3. Press the inhaler once while breathing in slowly and deeply.\n4. Hold your breath for ten seconds, then breathe out."),
    ("q4", "1. Cool the burn under cool running water for twenty minutes.\n2. Remove rings near the burn.\n3. Cover it loosely with cling film.\n4. Do not put ice or butter on the burn."),
];

/// Replies per gold pair; a pair with two replies fails the first parse and
/// is answered on the re-prompt.
const STEP_REPLIES: &[(&str, &str, &[&str])] = &[
    (
        "q1",
        "v01",
        &[r#"[{"start": 18.5, "end": 31.0, "step": "Press gauze firmly on the cut"}, {"start": 29.0, "end": 42.0, "step": "Raise the finger above your heart and keep pressure on"}, {"start": 42.0, "end": 55.0, "step": "Rinse the cut under running water"}, {"start": 55.0, "end": 66.0, "step": "Cover with a sterile bandage"}]"#],
    ),
    (
        "q2",
        "v02",
        &["Here are the steps:\n```json\n[{\"start\": \"0:30\", \"end\": \"0:44\", \"step\": \"Put the heel of one hand in the center of the chest\"}, {\"start\": \"0:44\", \"end\": \"1:12\", \"step\": \"Push hard and fast at two compressions per second\"}]\n```"],
    ),
    (
        "q4",
        "v04",
        &[
            "The video explains burn care.",
            "0:09 - 0:22: Cool the burn under running water\n0:33 - 0:45: Take off rings near the burn\n0:45 - 1:15: Cover the burn loosely with cling film",
        ],
    ),
];

fn main() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/mini");
    let corpus = load_corpus(&root.join("corpus")).expect("mini corpus loads");
    let topics = load_topics(&root.join("topics.json")).expect("topics load");

    let mut rng = ChaCha8Rng::seed_from_u64(20240611);
    for video in corpus.videos() {
        let Some(path) = &video.frame_features_path else {
            continue;
        };
        let mut rows = Vec::new();
        for seg in &video.segments {
            let base = stub_embed(&seg.text, FEATURE_DIM).expect("segment text embeds");
            for _ in 0..FRAMES_PER_SEGMENT {
                let row = base
                    .values
                    .iter()
                    .map(|v| ((v + rng.gen_range(-0.05..0.05)) * 1e4).round() / 1e4)
                    .collect();
                rows.push(row);
            }
        }
        fs::write(
            path,
            write_frame_features(&FrameFeatures::new(rows).expect("rectangular")),
        )
        .expect("write features");
    }

    let stub_dir = root.join("stub");
    if stub_dir.exists() {
        fs::remove_dir_all(&stub_dir).expect("clear stub dir");
    }
    let backend = StubChatBackend::new(&stub_dir);
    for (qid, reply) in EXPANSIONS {
        let q = topics
            .iter()
            .find(|q| q.query_id == *qid)
            .expect("topic exists");
        backend
            .record(EXPANSION_SYSTEM_PROMPT, &q.text, reply)
            .expect("record expansion");
    }
    let gold = load_gold_steps(&root.join("gold_steps.json")).expect("gold steps load");
    for (qid, vid, replies) in STEP_REPLIES {
        assert!(
            gold.iter()
                .any(|g| g.query_id == *qid && g.video_id == *vid),
            "({qid}, {vid}) is a gold pair"
        );
        let q = topics
            .iter()
            .find(|q| q.query_id == *qid)
            .expect("topic exists");
        let video = corpus.get(vid).expect("video exists");
        let generated = video
            .captions_path
            .as_deref()
            .map(load_generated_captions)
            .transpose()
            .expect("captions")
            .unwrap_or_default();
        let merged = merge_captions(&generated, &subtitle_captions(video));
        let (system, user) =
            build_step_prompt(q, &merged, video.duration_s).expect("prompt builds");
        backend
            .record(&system, &user, replies[0])
            .expect("record reply");
        if let Some(second) = replies.get(1) {
            backend
                .record(&system, &format!("{user}\n\n{FORMAT_REMINDER}"), second)
                .expect("record re-prompt reply");
        }
    }

    let out = tempfile::tempdir().expect("temp dir");
    let mut cfg = PipelineConfig::load(&root.join("config.toml")).expect("config loads");
    cfg.output_dir = out.path().to_path_buf();
    cfg.retrieval.strategy = Strategy::Run1OrigMax;
    cfg.retrieval.k = 10;
    execute(Command::Retrieve, &cfg, &Overrides::default()).expect("retrieve runs");
    let digest = file_digest(
        &out.path().join(run_path(Strategy::Run1OrigMax.name())),
        "run file",
    )
    .expect("run file");
    fs::write(root.join("expected/run1_k10.sha256"), format!("{digest}\n")).expect("write digest");
    println!("run1 k=10 digest {digest}");
}
