//! Blind review: mixed model/human report sessions, rubric scores and their
//! distribution by origin.
//!
//! Each session lives in `sessions/<id>.jsonl` under the data directory: a
//! `created` event holding every item, followed by one `score` event per
//! submission. The in-memory state is rebuilt from these logs on startup.
//! Writes go through one mutex and publish a fresh immutable snapshot; reads
//! only clone the current snapshot pointer.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State as AxState};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cxr_core::image::preprocess;
use cxr_core::train::epoch_order;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{Dataset, Split};
use crate::error::{io_err, Error, Result};
use crate::training::{beam_config, beam_reports};

pub const SESSIONS_DIR: &str = "sessions";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Human,
    Model,
}

/// Server-side item; never sent to raters as is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub item_id: String,
    pub session_id: String,
    pub image_path: PathBuf,
    pub source_id: String,
    pub report: String,
    pub origin: Origin,
}

/// What a rater sees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaterItem {
    pub item_id: String,
    pub image_url: String,
    pub report: String,
}

impl From<&ReviewItem> for RaterItem {
    fn from(i: &ReviewItem) -> Self {
        Self {
            item_id: i.item_id.clone(),
            image_url: format!("/items/{}/image", i.item_id),
            report: i.report.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub item_id: String,
    pub rater: String,
    pub score: u8,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRequest {
    pub n_model: usize,
    pub n_human: usize,
    pub seed: u64,
    /// Dataset directory; relative paths resolve against the service data directory.
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Event {
    Created { session_id: String, request: SessionRequest, items: Vec<ReviewItem> },
    Score(ScoreRecord),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub id: String,
    pub request: SessionRequest,
    pub items: Vec<ReviewItem>,
    /// Keyed by (item, rater).
    pub scores: BTreeMap<(String, String), ScoreRecord>,
}

#[derive(Debug, Clone, Default)]
struct Snapshot {
    sessions: BTreeMap<String, Arc<Session>>,
    /// item id -> (session id, position)
    items: BTreeMap<String, (String, usize)>,
}

impl Snapshot {
    fn insert_session(&mut self, s: Session) {
        for (k, it) in s.items.iter().enumerate() {
            self.items.insert(it.item_id.clone(), (s.id.clone(), k));
        }
        self.sessions.insert(s.id.clone(), Arc::new(s));
    }

    fn apply_score(&mut self, rec: ScoreRecord) -> Result<()> {
        let (sid, _) = self
            .items
            .get(&rec.item_id)
            .ok_or_else(|| Error::Invalid(format!("score for unknown item {}", rec.item_id)))?;
        let session = self.sessions.get_mut(sid).expect("indexed session exists");
        Arc::make_mut(session)
            .scores
            .insert((rec.item_id.clone(), rec.rater.clone()), rec);
        Ok(())
    }
}

/// One histogram over scores 1..=5.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: [usize; 5],
    pub total: usize,
    pub percent: [f64; 5],
    /// Records scored 4 or 5.
    pub acceptable: usize,
    pub acceptable_percent: f64,
}

impl Histogram {
    fn from_scores(scores: impl IntoIterator<Item = u8>) -> Self {
        let mut counts = [0usize; 5];
        for s in scores {
            counts[s as usize - 1] += 1;
        }
        let total: usize = counts.iter().sum();
        let pct = |c: usize| if total == 0 { 0.0 } else { 100.0 * c as f64 / total as f64 };
        let acceptable = counts[3] + counts[4];
        Self {
            counts,
            total,
            percent: counts.map(pct),
            acceptable,
            acceptable_percent: pct(acceptable),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OriginHistograms {
    pub human: Histogram,
    pub model: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub session_id: String,
    pub total_items: usize,
    /// Items without any score.
    pub pending: usize,
    pub records: usize,
    /// All raters pooled.
    pub by_origin: OriginHistograms,
    pub by_rater: BTreeMap<String, OriginHistograms>,
}

impl Session {
    pub fn distribution(&self) -> Distribution {
        let origin_of: BTreeMap<&str, Origin> = self.items.iter().map(|i| (i.item_id.as_str(), i.origin)).collect();
        let split = |recs: &[&ScoreRecord]| OriginHistograms {
            human: Histogram::from_scores(recs.iter().filter(|r| origin_of[r.item_id.as_str()] == Origin::Human).map(|r| r.score)),
            model: Histogram::from_scores(recs.iter().filter(|r| origin_of[r.item_id.as_str()] == Origin::Model).map(|r| r.score)),
        };
        let all: Vec<&ScoreRecord> = self.scores.values().collect();
        let mut per_rater: BTreeMap<&str, Vec<&ScoreRecord>> = BTreeMap::new();
        for r in &all {
            per_rater.entry(r.rater.as_str()).or_default().push(r);
        }
        let scored: std::collections::BTreeSet<&str> = all.iter().map(|r| r.item_id.as_str()).collect();
        Distribution {
            session_id: self.id.clone(),
            total_items: self.items.len(),
            pending: self.items.len() - scored.len(),
            records: all.len(),
            by_origin: split(&all),
            by_rater: per_rater.into_iter().map(|(k, v)| (k.to_string(), split(&v))).collect(),
        }
    }
}

pub struct ReviewService {
    data_dir: PathBuf,
    writer: Mutex<()>,
    snapshot: RwLock<Arc<Snapshot>>,
}

fn session_log(data_dir: &Path, id: &str) -> PathBuf {
    data_dir.join(SESSIONS_DIR).join(format!("{id}.jsonl"))
}

fn append_event(path: &Path, event: &Event, create: bool) -> Result<()> {
    let mut line = serde_json::to_string(event).map_err(|source| Error::Json {
        context: "review event".into(),
        source,
    })?;
    line.push('\n');
    let mut f = OpenOptions::new()
        .append(true)
        .create_new(create)
        .open(path)
        .map_err(io_err(path))?;
    f.write_all(line.as_bytes()).map_err(io_err(path))?;
    f.sync_data().map_err(io_err(path))
}

fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn replay(path: &Path) -> Result<Session> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let mut session: Option<Session> = None;
    for (n, line) in lines.iter().enumerate() {
        let event: Event = match serde_json::from_str(line) {
            Ok(e) => e,
            // A torn final line from an interrupted append was never acknowledged.
            Err(_) if n + 1 == lines.len() && !text.ends_with('\n') => break,
            Err(source) => {
                return Err(Error::Json {
                    context: format!("{} line {}", path.display(), n + 1),
                    source,
                })
            }
        };
        match (event, &mut session) {
            (Event::Created { session_id, request, items }, None) => {
                session = Some(Session {
                    id: session_id,
                    request,
                    items,
                    scores: BTreeMap::new(),
                })
            }
            (Event::Score(rec), Some(s)) => {
                s.scores.insert((rec.item_id.clone(), rec.rater.clone()), rec);
            }
            _ => return Err(Error::Invalid(format!("{}: malformed event order", path.display()))),
        }
    }
    session.ok_or_else(|| Error::Invalid(format!("{} holds no session", path.display())))
}

impl ReviewService {
    /// Opens (or creates) the data directory and replays every session log.
    pub fn open(data_dir: impl Into<PathBuf>) -> Result<Self> {
        let data_dir = data_dir.into();
        let dir = data_dir.join(SESSIONS_DIR);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut logs: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .map(|e| e.map(|e| e.path()).map_err(io_err(&dir)))
            .collect::<Result<_>>()?;
        logs.retain(|p| p.extension().is_some_and(|e| e == "jsonl"));
        logs.sort();
        let mut snap = Snapshot::default();
        for p in logs {
            snap.insert_session(replay(&p)?);
        }
        Ok(Self {
            data_dir,
            writer: Mutex::new(()),
            snapshot: RwLock::new(Arc::new(snap)),
        })
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    fn current(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    fn publish(&self, snap: Snapshot) {
        *self.snapshot.write().expect("snapshot lock") = Arc::new(snap);
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.data_dir.join(p)
        }
    }

    pub fn session(&self, id: &str) -> Option<Arc<Session>> {
        self.current().sessions.get(id).cloned()
    }

    pub fn session_ids(&self) -> Vec<String> {
        self.current().sessions.keys().cloned().collect()
    }

    pub fn item(&self, item_id: &str) -> Option<ReviewItem> {
        let snap = self.current();
        let (sid, k) = snap.items.get(item_id)?;
        Some(snap.sessions[sid].items[*k].clone())
    }

    /// Draws `n_model + n_human` distinct test images, generates reports for
    /// the first group, takes ground truth for the second, shuffles and
    /// persists. Slow; call from a blocking context.
    pub fn create_session(&self, req: SessionRequest) -> Result<Arc<Session>> {
        let items = self.draw_items(&req)?;
        let _guard = self.writer.lock().expect("writer lock");
        let snap = self.current();
        let id = (snap.sessions.len() + 1..)
            .map(|k| format!("s{k:04}"))
            .find(|id| !snap.sessions.contains_key(id) && !session_log(&self.data_dir, id).exists())
            .expect("unbounded id range");
        let items: Vec<ReviewItem> = items
            .into_iter()
            .enumerate()
            .map(|(k, it)| ReviewItem {
                item_id: format!("{id}-{:03}", k + 1),
                session_id: id.clone(),
                ..it
            })
            .collect();
        let event = Event::Created {
            session_id: id.clone(),
            request: req.clone(),
            items: items.clone(),
        };
        append_event(&session_log(&self.data_dir, &id), &event, true)?;
        let mut next = (*snap).clone();
        next.insert_session(Session {
            id: id.clone(),
            request: req,
            items,
            scores: BTreeMap::new(),
        });
        self.publish(next);
        Ok(self.session(&id).expect("just inserted"))
    }

    fn draw_items(&self, req: &SessionRequest) -> Result<Vec<ReviewItem>> {
        let total = req.n_model + req.n_human;
        if total == 0 {
            return Err(Error::Invalid("a session needs at least one item".into()));
        }
        let dataset = Dataset::load(self.resolve(&req.dataset))?;
        let test = dataset.split(Split::Test);
        if test.len() < total {
            return Err(Error::Invalid(format!(
                "test split has {} images but {total} were requested",
                test.len()
            )));
        }
        let draw = epoch_order(test.len(), req.seed, 0);
        let (model_recs, human_recs) = draw[..total].split_at(req.n_model);

        let model_items = if req.n_model > 0 {
            let ckpt = Checkpoint::load(&self.resolve(&req.checkpoint))?;
            let cfg = beam_config(&ckpt.run_config());
            let input = ckpt.model().config.encoder.input_size;
            model_recs
                .par_iter()
                .map(|&k| {
                    let rec = test[k];
                    let img = preprocess(&dataset.image(rec)?, input)?;
                    let report = beam_reports(ckpt.model(), &ckpt.vocab, &img, &cfg)?.into_iter().next().unwrap_or_default();
                    Ok((k, report, Origin::Model))
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let human_items = human_recs.iter().map(|&k| (k, test[k].report.clone(), Origin::Human));

        let mut items: Vec<ReviewItem> = model_items
            .into_iter()
            .chain(human_items)
            .map(|(k, report, origin)| ReviewItem {
                item_id: String::new(),
                session_id: String::new(),
                image_path: dataset.image_path(test[k]),
                source_id: test[k].id.clone(),
                report,
                origin,
            })
            .collect();
        let order = epoch_order(items.len(), req.seed, 1);
        let mut slots: Vec<Option<ReviewItem>> = items.drain(..).map(Some).collect();
        Ok(order.into_iter().map(|k| slots[k].take().expect("permutation")).collect())
    }

    /// Upserts the score of `rater` for `item_id`; durable before returning.
    pub fn submit_score(&self, item_id: &str, rater: &str, score: u8) -> std::result::Result<ScoreRecord, ApiError> {
        if !(1..=5).contains(&score) {
            return Err(ApiError::validation(format!("score must be between 1 and 5, got {score}")));
        }
        let rater = rater.trim();
        if rater.is_empty() {
            return Err(ApiError::validation("rater must be a non-empty token"));
        }
        let _guard = self.writer.lock().expect("writer lock");
        let snap = self.current();
        let (sid, _) = snap
            .items
            .get(item_id)
            .ok_or_else(|| ApiError::not_found(format!("no item {item_id}")))?;
        let rec = ScoreRecord {
            item_id: item_id.to_string(),
            rater: rater.to_string(),
            score,
            timestamp: now_millis(),
        };
        append_event(&session_log(&self.data_dir, sid), &Event::Score(rec.clone()), false).map_err(ApiError::internal)?;
        let mut next = (*snap).clone();
        next.apply_score(rec.clone()).map_err(ApiError::internal)?;
        self.publish(next);
        Ok(rec)
    }
}

/// JSON error body `{code, message}` with its HTTP status.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            code: "validation",
            message: message.into(),
        }
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            code: "not_found",
            message: message.into(),
        }
    }

    pub fn internal(e: impl std::fmt::Display) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            code: "internal",
            message: e.to_string(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Invalid(m) => Self::validation(m),
            Error::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => Self::not_found(e.to_string()),
            other => Self::internal(other),
        }
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    code: &'a str,
    message: &'a str,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code,
            message: &self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RubricLevel {
    pub score: u8,
    pub description: String,
}

/// Five-level quality scale shown to raters.
pub fn rubric() -> Vec<RubricLevel> {
    [
        (5, "Every abnormality present is reported and each is described correctly."),
        (4, "All important abnormalities are reported; a minor detail is missing or imprecise."),
        (3, "The main abnormality is reported but another is missed or misdescribed."),
        (2, "Most of the abnormalities are missed or described wrongly."),
        (1, "The report does not match the image."),
    ]
    .into_iter()
    .map(|(score, d)| RubricLevel {
        score,
        description: d.to_string(),
    })
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionItems {
    pub session_id: String,
    pub items: Vec<RaterItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub rater: String,
    pub score: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub n_items: usize,
}

type Shared = Arc<ReviewService>;

fn parse_body<T: serde::de::DeserializeOwned>(body: &[u8]) -> std::result::Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::validation(format!("malformed request body: {e}")))
}

async fn create_session(AxState(svc): AxState<Shared>, body: Bytes) -> std::result::Result<(StatusCode, Json<SessionCreated>), ApiError> {
    let req: SessionRequest = parse_body(&body)?;
    let session = tokio::task::spawn_blocking(move || svc.create_session(req))
        .await
        .map_err(ApiError::internal)??;
    Ok((
        StatusCode::CREATED,
        Json(SessionCreated {
            session_id: session.id.clone(),
            n_items: session.items.len(),
        }),
    ))
}

async fn list_items(AxState(svc): AxState<Shared>, UrlPath(id): UrlPath<String>) -> std::result::Result<Json<SessionItems>, ApiError> {
    let s = svc.session(&id).ok_or_else(|| ApiError::not_found(format!("no session {id}")))?;
    Ok(Json(SessionItems {
        session_id: s.id.clone(),
        items: s.items.iter().map(RaterItem::from).collect(),
    }))
}

async fn item_image(AxState(svc): AxState<Shared>, UrlPath(id): UrlPath<String>) -> std::result::Result<Response, ApiError> {
    let item = svc.item(&id).ok_or_else(|| ApiError::not_found(format!("no item {id}")))?;
    let bytes = tokio::fs::read(&item.image_path).await.map_err(ApiError::internal)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn submit_score(
    AxState(svc): AxState<Shared>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> std::result::Result<Json<ScoreRecord>, ApiError> {
    let req: ScoreRequest = parse_body(&body)?;
    let score = u8::try_from(req.score).map_err(|_| ApiError::validation(format!("score must be between 1 and 5, got {}", req.score)))?;
    let rec = tokio::task::spawn_blocking(move || svc.submit_score(&id, &req.rater, score))
        .await
        .map_err(ApiError::internal)??;
    Ok(Json(rec))
}

async fn distribution(AxState(svc): AxState<Shared>, UrlPath(id): UrlPath<String>) -> std::result::Result<Json<Distribution>, ApiError> {
    let s = svc.session(&id).ok_or_else(|| ApiError::not_found(format!("no session {id}")))?;
    Ok(Json(s.distribution()))
}

async fn get_rubric() -> Json<Vec<RubricLevel>> {
    Json(rubric())
}

async fn fallback() -> ApiError {
    ApiError::not_found("no such route")
}

pub fn router(service: Arc<ReviewService>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/items", get(list_items))
        .route("/sessions/{id}/distribution", get(distribution))
        .route("/items/{id}/image", get(item_image))
        .route("/items/{id}/scores", post(submit_score))
        .route("/rubric", get(get_rubric))
        .fallback(fallback)
        .with_state(service)
}

/// Serves the API on `addr` until the process is stopped.
pub async fn serve(service: Arc<ReviewService>, addr: std::net::SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::Invalid(format!("cannot bind {addr}: {e}")))?;
    axum::serve(listener, router(service))
        .await
        .map_err(|e| Error::Invalid(format!("server stopped: {e}")))
}
