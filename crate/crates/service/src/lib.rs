//! HTTP facade over a live run: hands out clip pairs to human raters,
//! accepts their ratings and reports progress.
//!
//! Frames travel as base64 PNG images next to the clip's fps, so the page
//! can animate them exactly as rendered.

use std::io::Cursor;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use clipmimic::feedback::RatingSource;
use clipmimic::orchestrator::{LiveRun, RaterKind, RunStatus, SubmitError};
use clipmimic::render::Frame;

const INDEX_HTML: &str = include_str!("../static/index.html");

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PendingPairView {
    pub pair_id: u64,
    pub fps: u32,
    pub demo_frames: Vec<String>,
    pub agent_frames: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RatingSubmission {
    pub pair_id: u64,
    pub rating: i64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RatingAck {
    pub pair_id: u64,
    pub rating: u8,
    pub annotations: usize,
}

/// Encodes a grayscale frame as PNG.
pub fn encode_png(frame: &Frame) -> Result<Vec<u8>, png::EncodingError> {
    let mut out = Cursor::new(Vec::new());
    {
        let mut enc = png::Encoder::new(&mut out, frame.width as u32, frame.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header()?;
        w.write_image_data(&frame.pixels)?;
    }
    Ok(out.into_inner())
}

fn encode_frames(frames: &[Frame]) -> Result<Vec<String>, png::EncodingError> {
    frames.iter().map(|f| encode_png(f).map(|b| BASE64.encode(b))).collect()
}

fn error(status: StatusCode, msg: impl std::fmt::Display) -> Response {
    (status, Json(serde_json::json!({ "error": msg.to_string() }))).into_response()
}

pub fn router(live: Arc<LiveRun>) -> Router {
    Router::new()
        .route("/", get(index))
        .route("/api/pairs/next", get(next_pair))
        .route("/api/ratings", post(submit_rating))
        .route("/api/status", get(status))
        .with_state(live)
}

async fn index() -> Html<&'static str> {
    Html(INDEX_HTML)
}

async fn status(State(live): State<Arc<LiveRun>>) -> Json<RunStatus> {
    Json(live.status())
}

async fn next_pair(State(live): State<Arc<LiveRun>>) -> Response {
    if live.rater != RaterKind::Human {
        return error(StatusCode::CONFLICT, "run uses the oracle rater");
    }
    let Some(pair) = live.queue.lease() else {
        return StatusCode::NO_CONTENT.into_response();
    };
    let view = live.pair_frames(&pair).map_err(|e| e.to_string()).and_then(|(demo, agent)| {
        Ok(PendingPairView {
            pair_id: pair.pair_id,
            fps: live.demo.fps,
            demo_frames: encode_frames(&demo).map_err(|e| e.to_string())?,
            agent_frames: encode_frames(&agent).map_err(|e| e.to_string())?,
        })
    });
    match view {
        Ok(v) => Json(v).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

async fn submit_rating(State(live): State<Arc<LiveRun>>, Json(sub): Json<RatingSubmission>) -> Response {
    match live.submit(sub.pair_id, sub.rating, RatingSource::Human) {
        Ok(r) => Json(RatingAck { pair_id: r.pair.pair_id, rating: r.rating, annotations: live.store.len() }).into_response(),
        Err(e @ SubmitError::OutOfRange(_)) => error(StatusCode::BAD_REQUEST, e),
        Err(e @ SubmitError::Gone(_)) => error(StatusCode::GONE, e),
        Err(e @ SubmitError::Internal(_)) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

/// Binds `addr`; the returned listener reports the actual port.
pub async fn bind(addr: SocketAddr) -> std::io::Result<tokio::net::TcpListener> {
    tokio::net::TcpListener::bind(addr).await
}

pub async fn serve(listener: tokio::net::TcpListener, live: Arc<LiveRun>) -> std::io::Result<()> {
    axum::serve(listener, router(live)).await
}
