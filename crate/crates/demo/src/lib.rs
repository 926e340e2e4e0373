//! Browser bindings. Each export takes plain numbers or strings and returns a
//! JSON document for the page script.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use cloudcond::env::{self, EnvConfig, HeightDist, ProbeSpec, IMAGE_SIZE};
use cloudcond::surgeon::{self, BlockImportanceReport};

fn probe(task: u8, height: f64, decoy: bool) -> ProbeSpec {
    ProbeSpec { task_id: Some(task % env::NUM_TASKS as u8), decoy, table_height: HeightDist::Fixed(height), ..Default::default() }
}

fn err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

#[derive(Serialize)]
struct Scene {
    size: usize,
    /// RGBA, row-major, `size * size * 4`.
    rgba: Vec<u8>,
    /// `[x, z]` side view of the cloud.
    side: Vec<[f32; 2]>,
    table_height: f64,
    object: Option<[f64; 3]>,
    /// Hash of the image tensor, to compare renders at a glance.
    image_digest: String,
}

fn rgba(pixels: &[f32]) -> Vec<u8> {
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    (0..plane)
        .flat_map(|i| {
            // Image row 0 is y = 0; flip so the far edge of the table is up.
            let (r, c) = (i / IMAGE_SIZE, i % IMAGE_SIZE);
            let j = (IMAGE_SIZE - 1 - r) * IMAGE_SIZE + c;
            [q(pixels[j + plane]), q(pixels[j]), q(pixels[j + 2 * plane]), 255]
        })
        .collect()
}

fn digest(pixels: &[f32]) -> String {
    // FNV-1a over the raw bits.
    let mut h: u64 = 0xcbf29ce484222325;
    for v in pixels {
        for b in v.to_bits().to_le_bytes() {
            h = (h ^ b as u64).wrapping_mul(0x100000001b3);
        }
    }
    format!("{h:016x}")
}

/// Camera image and point cloud at reset.
#[wasm_bindgen]
pub fn render_scene(seed: u32, task: u8, height: f64, decoy: bool) -> Result<String, JsValue> {
    let (state, image, cloud) = env::reset(seed as u64, &probe(task, height, decoy), &EnvConfig::default()).map_err(err)?;
    let scene = Scene {
        size: IMAGE_SIZE,
        rgba: rgba(&image.pixels),
        side: cloud.points.iter().map(|p| [p[0], p[2]]).collect(),
        table_height: state.table_height,
        object: state.object_pos,
        image_digest: digest(&image.pixels),
    };
    Ok(serde_json::to_string(&scene).expect("scene serialises"))
}

#[derive(Serialize)]
struct Rollout {
    /// Gripper `[x, y, z, grip]` per step.
    path: Vec<[f64; 4]>,
    success: bool,
    refused: bool,
    steps: usize,
}

/// Runs the scripted expert for one episode.
#[wasm_bindgen]
pub fn rollout_expert(seed: u32, task: u8, height: f64, decoy: bool) -> Result<String, JsValue> {
    let cfg = EnvConfig::default();
    let (mut state, _, _) = env::reset(seed as u64, &probe(task, height, decoy), &cfg).map_err(err)?;
    let mut path = Vec::new();
    let mut refused = true;
    while !state.done {
        let g = state.gripper_pos;
        path.push([g[0], g[1], g[2], state.grip]);
        refused &= state.grip <= 0.5;
        state = env::step(&state, &env::scripted_expert(&state, &cfg), &cfg).map_err(err)?.state;
    }
    let g = state.gripper_pos;
    path.push([g[0], g[1], g[2], state.grip]);
    refused &= state.grip <= 0.5;
    let r = Rollout { steps: state.step_count, success: state.success, refused: decoy && refused, path };
    Ok(serde_json::to_string(&r).expect("rollout serialises"))
}

#[derive(Serialize)]
struct Selection {
    degradations: Vec<f64>,
    blocks: Vec<usize>,
}

/// Injection sites for per-block skip scores (comma or space separated).
#[wasm_bindgen]
pub fn select_blocks(baseline: f64, scores: &str, epsilon: f64, max_count: usize) -> Result<String, JsValue> {
    let single: Vec<f64> = scores
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| err(format!("not a number: {s}"))))
        .collect::<Result<_, _>>()?;
    let report = BlockImportanceReport {
        n_blocks: single.len(),
        baseline_score: baseline,
        single_skip: single.iter().copied().enumerate().collect(),
        consecutive: Vec::new(),
        eval: None,
        evaluations: single.len() + 1,
    };
    let plan = surgeon::select_injection_blocks(&report, epsilon, max_count).map_err(err)?;
    let s = Selection { degradations: report.degradations().map_err(err)?, blocks: plan.block_ids };
    Ok(serde_json::to_string(&s).expect("selection serialises"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heights_and_decoys_share_an_image_but_not_a_cloud() {
        let parse = |s: String| serde_json::from_str::<serde_json::Value>(&s).unwrap();
        let lo = parse(render_scene(4, 1, 0.003, false).unwrap());
        let hi = parse(render_scene(4, 1, 0.052, false).unwrap());
        let fake = parse(render_scene(4, 1, 0.003, true).unwrap());
        assert_eq!(lo["rgba"], hi["rgba"]);
        assert_eq!(lo["image_digest"], fake["image_digest"]);
        assert_ne!(lo["side"], hi["side"]);
        assert!(fake["object"].is_null());
    }

    #[test]
    fn expert_succeeds_on_real_objects_and_refuses_decoys() {
        let real: serde_json::Value = serde_json::from_str(&rollout_expert(2, 0, 0.052, false).unwrap()).unwrap();
        let fake: serde_json::Value = serde_json::from_str(&rollout_expert(2, 0, 0.052, true).unwrap()).unwrap();
        assert_eq!(real["success"], true);
        assert_eq!(fake["refused"], true);
    }

    #[test]
    fn selection_follows_the_safe_suffix_rule() {
        let s: serde_json::Value =
            serde_json::from_str(&select_blocks(1.0, "0.5, 0.5, 0.99 0.99,0.99,0.99,0.99,0.99", 0.05, 5).unwrap()).unwrap();
        assert_eq!(s["blocks"], serde_json::json!([2, 3, 4, 5, 6]));
    }
}
