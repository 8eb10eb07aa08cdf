#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use cxr::checkpoint::Checkpoint;
use cxr::config::RunConfig;
use cxr::dataset::{write_synthetic, Dataset};
use cxr::review::{Origin, ReviewService};
use cxr_core::model::Model;
use cxr_core::synth::SynthConfig;
use cxr_core::train::Trainer;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

pub fn synth_dir(dir: &Path, n: usize, seed: u64, ratios: (f64, f64, f64)) -> Dataset {
    write_synthetic(dir, &SynthConfig::desk(n), seed, ratios).unwrap()
}

/// Desk-size config with a few epochs and the vocabulary threshold lowered
/// so small corpora keep their words.
pub fn small_config(epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.train.epochs = epochs;
    cfg.train.min_count = 1;
    cfg
}

/// Freshly initialized model over the dataset's training vocabulary.
pub fn untrained_checkpoint(ds: &Dataset, cfg: &RunConfig) -> Checkpoint {
    let vocab = ds.train_vocab(cfg.train.min_count).unwrap();
    let model = Model::new(cfg.model, vocab.len(), 0, cfg.train.seed).unwrap();
    Checkpoint {
        trainer: Trainer::new(model, cfg.train.clone()).unwrap(),
        vocab,
        history: Vec::new(),
    }
}

// ---------------------------------------------------------------------------
// Review service over in-process HTTP

pub async fn call_raw(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

pub async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = call_raw(app, method, uri, body).await;
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, v)
}

/// Corpus whose test split holds `n_test` images plus an untrained checkpoint,
/// laid out under `root` as `corpus/` and `model.ckpt`.
pub fn review_fixture(root: &Path, n: usize, ratios: (f64, f64, f64)) {
    let ds = synth_dir(&root.join("corpus"), n, 11, ratios);
    untrained_checkpoint(&ds, &small_config(1)).save(&root.join("model.ckpt")).unwrap();
}

pub fn session_request(n_model: usize, n_human: usize, seed: u64) -> Value {
    json!({ "n_model": n_model, "n_human": n_human, "seed": seed, "dataset": "corpus", "checkpoint": "model.ckpt" })
}

fn score_of(k: usize, mul: usize, add: usize) -> u8 {
    ((k * mul + add) % 5 + 1) as u8
}

/// Creates a session over HTTP, checks the rater payload carries no origin,
/// injects a fixed pattern of scores from two raters and compares the
/// distribution endpoint with counts taken directly from the injected
/// records. Returns every violation found.
pub async fn blind_protocol_violations(app: &Router, svc: &ReviewService, n_model: usize, n_human: usize, seed: u64) -> Vec<String> {
    let mut bad = Vec::new();
    let (status, created) = call(app, Method::POST, "/sessions", Some(session_request(n_model, n_human, seed))).await;
    if status != StatusCode::CREATED {
        return vec![format!("session creation returned {status}: {created}")];
    }
    let sid = created["session_id"].as_str().unwrap().to_string();

    let (status, raw) = call_raw(app, Method::GET, &format!("/sessions/{sid}/items"), None).await;
    if status != StatusCode::OK {
        return vec![format!("item listing returned {status}")];
    }
    let text = String::from_utf8(raw).unwrap();
    if text.contains("origin") {
        bad.push("rater payload mentions origin".into());
    }
    let listing: Value = serde_json::from_str(&text).unwrap();
    let items = listing["items"].as_array().unwrap();
    if items.len() != n_model + n_human {
        bad.push(format!("{} items, expected {}", items.len(), n_model + n_human));
    }
    let allowed: BTreeSet<&str> = ["item_id", "image_url", "report"].into();
    for it in items {
        let keys: BTreeSet<&str> = it.as_object().unwrap().keys().map(String::as_str).collect();
        if keys != allowed {
            bad.push(format!("rater item has fields {keys:?}"));
        }
    }

    // Server-side truth for the oracle.
    let ids: Vec<String> = items.iter().map(|i| i["item_id"].as_str().unwrap().to_string()).collect();
    let origin: BTreeMap<&str, Origin> = ids.iter().map(|id| (id.as_str(), svc.item(id).unwrap().origin)).collect();
    let count = |o| origin.values().filter(|&&x| x == o).count();
    if (count(Origin::Model), count(Origin::Human)) != (n_model, n_human) {
        bad.push(format!("origin counts {} model / {} human", count(Origin::Model), count(Origin::Human)));
    }
    let sources = |o| -> BTreeSet<String> {
        ids.iter()
            .map(|id| svc.item(id).unwrap())
            .filter(|it| it.origin == o)
            .map(|it| it.source_id)
            .collect()
    };
    if !sources(Origin::Model).is_disjoint(&sources(Origin::Human)) {
        bad.push("model and human draws share an image".into());
    }

    let (_, empty) = call(app, Method::GET, &format!("/sessions/{sid}/distribution"), None).await;
    if empty["pending"] != json!(ids.len()) || empty["records"] != json!(0) {
        bad.push(format!("fresh session distribution {empty}"));
    }

    // Rater r1 scores three items in four, r2 every third; r1 then revises every fifth.
    let mut injected: BTreeMap<(String, &str), u8> = BTreeMap::new();
    let mut plan: Vec<(usize, &str, u8)> = Vec::new();
    for k in 0..ids.len() {
        if k % 4 != 3 {
            plan.push((k, "r1", score_of(k, 7, 3)));
        }
        if k % 3 == 0 {
            plan.push((k, "r2", score_of(k, 11, 1)));
        }
    }
    for k in (0..ids.len()).step_by(5).filter(|k| k % 4 != 3) {
        plan.push((k, "r1", score_of(k, 3, 2)));
    }
    for (k, rater, score) in plan {
        let (status, _) = call(
            app,
            Method::POST,
            &format!("/items/{}/scores", ids[k]),
            Some(json!({ "rater": rater, "score": score })),
        )
        .await;
        if status != StatusCode::OK {
            bad.push(format!("score submission returned {status}"));
        }
        injected.insert((ids[k].clone(), rater), score);
    }

    let mut want: BTreeMap<(&str, Origin), [usize; 5]> = BTreeMap::new();
    for ((id, rater), score) in &injected {
        for key in ["pooled", *rater] {
            want.entry((key, origin[id.as_str()])).or_default()[*score as usize - 1] += 1;
        }
    }
    let scored: BTreeSet<&String> = injected.keys().map(|(id, _)| id).collect();
    let (_, dist) = call(app, Method::GET, &format!("/sessions/{sid}/distribution"), None).await;
    if dist["pending"] != json!(ids.len() - scored.len()) || dist["records"] != json!(injected.len()) {
        bad.push(format!("pending {} records {}", dist["pending"], dist["records"]));
    }
    for ((key, o), counts) in &want {
        let name = match o {
            Origin::Human => "human",
            Origin::Model => "model",
        };
        let h = match *key {
            "pooled" => &dist["by_origin"][name],
            r => &dist["by_rater"][r][name],
        };
        let total: usize = counts.iter().sum();
        let got: Vec<usize> = h["counts"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap() as usize).collect();
        if got != counts.to_vec() || h["total"] != json!(total) {
            bad.push(format!("{key}/{name}: counts {got:?}, expected {counts:?}"));
        }
        for (s, c) in counts.iter().enumerate() {
            let pct = h["percent"][s].as_f64().unwrap();
            if (pct - 100.0 * *c as f64 / total as f64).abs() > 1e-9 {
                bad.push(format!("{key}/{name}: score {} at {pct}%", s + 1));
            }
        }
        let acc = counts[3] + counts[4];
        if h["acceptable"] != json!(acc) || (h["acceptable_percent"].as_f64().unwrap() - 100.0 * acc as f64 / total as f64).abs() > 1e-9 {
            bad.push(format!("{key}/{name}: acceptable {}", h["acceptable"]));
        }
    }
    bad
}
