//! Single-writer session actor and the HTTP/event-stream API on top of it.
//!
//! The session lives on its own thread. Every handler submits a job to the
//! actor's queue and awaits the answer, so no two requests ever interleave
//! inside the machine. While a run is active the actor alternates between
//! draining the queue and simulating one slice of cycles.

use std::convert::Infallible;
use std::sync::mpsc as std_mpsc;
use std::thread;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event as SseEvent, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use mcds_core::codec::TraceMessage;
use mcds_core::xcp::XcpFrame;
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, oneshot};

use crate::config::Addr;
use crate::export;
use crate::session::{Command, ControlError, Phase, Progress, Session, SessionState};

/// Cycles simulated between two looks at the command queue.
pub const SLICE: u64 = 1_000;
const EVENT_CAPACITY: usize = 1 << 16;

/// Records pushed to stream subscribers, in commit order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    State(SessionState),
    /// `index` is the message's position in the merged trace.
    Trace {
        index: usize,
        message: TraceMessage,
    },
    Daq {
        ctr: u16,
        payload: Vec<u8>,
    },
    /// The subscriber fell behind and missed this many records.
    Lagged {
        missed: u64,
    },
}

pub struct Actor {
    pub session: Session,
    events: broadcast::Sender<Event>,
    waiters: Vec<oneshot::Sender<SessionState>>,
}

impl Actor {
    pub fn state(&self) -> SessionState {
        SessionState { clients: self.events.receiver_count(), ..self.session.state() }
    }

    fn publish(&mut self, p: Progress, first_index: usize) {
        for (i, message) in p.messages.into_iter().enumerate() {
            let _ = self.events.send(Event::Trace { index: first_index + i, message });
        }
        for f in p.daq {
            let _ = self.events.send(Event::Daq { ctr: f.ctr, payload: f.payload });
        }
    }

    fn publish_state(&mut self) {
        let st = self.state();
        if st.phase != Phase::Running {
            for w in self.waiters.drain(..) {
                let _ = w.send(st.clone());
            }
        }
        let _ = self.events.send(Event::State(st));
    }

    /// Runs a control command and publishes what it produced.
    pub fn control(&mut self, c: &Command) -> Result<SessionState, ControlError> {
        let before = self.session.trace().len();
        let msgs = self.session.control(c)?;
        self.publish(Progress { messages: msgs, daq: Vec::new() }, before);
        self.publish_state();
        Ok(self.state())
    }

    fn slice(&mut self) {
        let before = self.session.trace().len();
        let p = self.session.advance(SLICE);
        self.publish(p, before);
        self.publish_state();
    }
}

type Job = Box<dyn FnOnce(&mut Actor) + Send>;

/// Cloneable handle to the session actor.
#[derive(Clone)]
pub struct SessionHandle {
    jobs: std_mpsc::Sender<Job>,
    events: broadcast::Sender<Event>,
}

impl SessionHandle {
    /// Moves the session onto its actor thread.
    pub fn spawn(session: Session) -> Self {
        let (jobs, rx) = std_mpsc::channel::<Job>();
        let (events, _) = broadcast::channel(EVENT_CAPACITY);
        let mut actor = Actor { session, events: events.clone(), waiters: Vec::new() };
        thread::Builder::new()
            .name("mcds-session".into())
            .spawn(move || loop {
                if actor.session.phase() == Phase::Running {
                    loop {
                        match rx.try_recv() {
                            Ok(job) => job(&mut actor),
                            Err(std_mpsc::TryRecvError::Empty) => break,
                            Err(std_mpsc::TryRecvError::Disconnected) => return,
                        }
                    }
                    actor.slice();
                } else {
                    match rx.recv() {
                        Ok(job) => job(&mut actor),
                        Err(_) => return,
                    }
                }
            })
            .expect("spawn session thread");
        SessionHandle { jobs, events }
    }

    /// Runs `f` on the actor thread and returns its result.
    pub async fn call<R, F>(&self, f: F) -> R
    where
        R: Send + 'static,
        F: FnOnce(&mut Actor) -> R + Send + 'static,
    {
        let (tx, rx) = oneshot::channel();
        self.jobs
            .send(Box::new(move |a: &mut Actor| {
                let _ = tx.send(f(a));
            }))
            .expect("session actor stopped");
        rx.await.expect("session actor dropped a job")
    }

    pub async fn state(&self) -> SessionState {
        self.call(|a| a.state()).await
    }

    /// Applies a command; with `wait`, resolves once the target has stopped again.
    pub async fn control(&self, c: Command, wait: bool) -> Result<SessionState, ControlError> {
        let (tx, rx) = oneshot::channel();
        let st = self
            .call(move |a| {
                let st = a.control(&c)?;
                if wait && st.phase == Phase::Running {
                    a.waiters.push(tx);
                }
                Ok::<_, ControlError>(st)
            })
            .await?;
        if wait && st.phase == Phase::Running {
            return Ok(rx.await.expect("session actor dropped a waiter"));
        }
        Ok(st)
    }

    /// Subscribes at a well-defined point: the returned state is current as
    /// of the subscription and the receiver sees every later record.
    pub async fn subscribe(&self) -> (SessionState, broadcast::Receiver<Event>) {
        let events = self.events.clone();
        self.call(move |a| {
            let rx = events.subscribe();
            (a.state(), rx)
        })
        .await
    }

    pub async fn xcp(&self, req: XcpFrame) -> XcpFrame {
        self.call(move |a| a.session.xcp(&req)).await
    }
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
}

fn error(status: StatusCode, msg: impl ToString) -> Response {
    (status, Json(ErrorBody { error: msg.to_string() })).into_response()
}

fn control_error(e: ControlError) -> Response {
    let status = match e {
        ControlError::Phase { .. } => StatusCode::CONFLICT,
        _ => StatusCode::BAD_REQUEST,
    };
    error(status, e)
}

fn parse<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, Box<Response>> {
    serde_json::from_slice(body).map_err(|e| Box::new(error(StatusCode::BAD_REQUEST, format!("malformed body: {e}"))))
}

pub fn router(handle: SessionHandle) -> Router {
    Router::new()
        .route("/api/state", get(get_state))
        .route("/api/control", post(post_control))
        .route("/api/trace", get(get_trace))
        .route("/api/trace.mtrc", get(get_mtrc))
        .route("/api/calibration", post(post_calibration).get(get_calibration))
        .route("/api/calibration/page", post(post_page).get(get_page))
        .route("/api/stream", get(stream))
        .with_state(handle)
}

async fn get_state(State(h): State<SessionHandle>) -> Json<SessionState> {
    Json(h.state().await)
}

#[derive(Debug, Deserialize)]
struct ControlQuery {
    #[serde(default)]
    wait: bool,
}

async fn post_control(State(h): State<SessionHandle>, Query(q): Query<ControlQuery>, body: Bytes) -> Response {
    let c: Command = match parse(&body) {
        Ok(c) => c,
        Err(r) => return *r,
    };
    match h.control(c, q.wait).await {
        Ok(st) => Json(st).into_response(),
        Err(e) => control_error(e),
    }
}

#[derive(Debug, Deserialize)]
struct TraceQuery {
    #[serde(default)]
    from: usize,
}

async fn get_trace(State(h): State<SessionHandle>, Query(q): Query<TraceQuery>) -> Json<Vec<TraceMessage>> {
    Json(h.call(move |a| a.session.trace().get(q.from..).unwrap_or_default().to_vec()).await)
}

async fn get_mtrc(State(h): State<SessionHandle>) -> Response {
    let bytes = h.call(|a| export::mtrc_bytes(a.session.trace())).await;
    ([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalWrite {
    addr: Addr,
    bytes: Vec<u8>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CalData {
    pub addr: u32,
    pub bytes: Vec<u8>,
}

async fn post_calibration(State(h): State<SessionHandle>, body: Bytes) -> Response {
    let w: CalWrite = match parse(&body) {
        Ok(w) => w,
        Err(r) => return *r,
    };
    match h.call(move |a| a.session.calibration_write(w.addr.0, &w.bytes)).await {
        Ok(()) => Json(serde_json::json!({ "ok": true })).into_response(),
        Err(e) => control_error(e),
    }
}

#[derive(Debug, Deserialize)]
struct CalRead {
    addr: Addr,
    len: u8,
}

async fn get_calibration(State(h): State<SessionHandle>, Query(q): Query<CalRead>) -> Response {
    match h.call(move |a| a.session.calibration_read(q.addr.0, q.len)).await {
        Ok(bytes) => Json(CalData { addr: q.addr.0, bytes }).into_response(),
        Err(e) => control_error(e),
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PageBody {
    pub page: u8,
}

async fn post_page(State(h): State<SessionHandle>, body: Bytes) -> Response {
    let p: PageBody = match parse(&body) {
        Ok(p) => p,
        Err(r) => return *r,
    };
    match h.call(move |a| a.session.calibration_page(p.page)).await {
        Ok(()) => Json(PageBody { page: p.page }).into_response(),
        Err(e) => control_error(e),
    }
}

async fn get_page(State(h): State<SessionHandle>) -> Response {
    match h.call(|a| a.session.calibration_get_page()).await {
        Ok(page) => Json(PageBody { page }).into_response(),
        Err(e) => control_error(e),
    }
}

fn sse(e: &Event) -> SseEvent {
    let name = match e {
        Event::State(_) => "state",
        Event::Trace { .. } => "trace",
        Event::Daq { .. } => "daq",
        Event::Lagged { .. } => "lagged",
    };
    SseEvent::default().event(name).data(serde_json::to_string(e).expect("events serialize"))
}

async fn stream(State(h): State<SessionHandle>) -> Sse<impl Stream<Item = Result<SseEvent, Infallible>>> {
    let (st, rx) = h.subscribe().await;
    let first = futures::stream::once(async move { Ok(sse(&Event::State(st))) });
    let rest = futures::stream::unfold(rx, |mut rx| async move {
        let e = match rx.recv().await {
            Ok(e) => e,
            Err(broadcast::error::RecvError::Lagged(missed)) => Event::Lagged { missed },
            Err(broadcast::error::RecvError::Closed) => return None,
        };
        Some((Ok(sse(&e)), rx))
    });
    use futures::StreamExt;
    Sse::new(first.chain(rest)).keep_alive(KeepAlive::new().interval(Duration::from_secs(15)))
}

/// Serves the HTTP API (and the XCP TCP transport, if given) until the process ends.
pub async fn serve(handle: SessionHandle, http: tokio::net::TcpListener, xcp: Option<tokio::net::TcpListener>) -> std::io::Result<()> {
    if let Some(l) = xcp {
        tokio::spawn(crate::xcp_tcp::serve(l, handle.clone()));
    }
    axum::serve(http, router(handle)).await
}
