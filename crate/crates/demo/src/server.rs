//! HTTP side: `GET /health` and the `GET /session` WebSocket.

use std::collections::VecDeque;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::ws::{Message as WsMessage, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::response::Response;
use axum::routing::get;
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use pinn_core::agents::Agent;
use pinn_core::envs::EnvConfig;
use pinn_core::numerics::SeededRng;
use serde::Deserialize;
use tokio::sync::Notify;

use crate::protocol::{parse_command, Command, Message};
use crate::session::Session;
use crate::VERSION;

/// Frames queued per client before the oldest are dropped.
pub const DEFAULT_BUFFER: usize = 64;

#[derive(Clone)]
pub struct ServedAgent {
    pub name: String,
    pub agent: Arc<Agent>,
    pub env: EnvConfig,
}

pub struct AppState {
    pub agents: Vec<ServedAgent>,
    pub seed: u64,
    pub buffer: usize,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(agents: Vec<ServedAgent>, seed: u64) -> Self {
        Self {
            agents,
            seed,
            buffer: DEFAULT_BUFFER,
            next_id: AtomicU64::new(1),
        }
    }

    pub fn with_buffer(mut self, buffer: usize) -> Self {
        self.buffer = buffer.max(1);
        self
    }
}

/// Outbound queue of one client. Control messages are never dropped; when the
/// queue already holds `capacity` frames, the oldest frame goes.
pub struct Outbox {
    inner: Mutex<OutboxInner>,
    notify: Notify,
    capacity: usize,
}

#[derive(Default)]
struct OutboxInner {
    queue: VecDeque<Message>,
    frames: usize,
    dropped: u64,
    closed: bool,
}

impl Outbox {
    pub fn new(capacity: usize) -> Self {
        Self {
            inner: Mutex::default(),
            notify: Notify::new(),
            capacity: capacity.max(1),
        }
    }

    pub fn push(&self, mut msg: Message) {
        let mut g = self.inner.lock().unwrap();
        if let Message::Frame(f) = &mut msg {
            if g.frames >= self.capacity {
                let oldest = g.queue.iter().position(Message::is_frame).unwrap();
                g.queue.remove(oldest);
                g.frames -= 1;
                g.dropped += 1;
            }
            f.dropped = g.dropped;
            g.frames += 1;
        }
        g.queue.push_back(msg);
        drop(g);
        self.notify.notify_one();
    }

    /// Everything queued so far, oldest first.
    pub fn drain(&self) -> Vec<Message> {
        let mut g = self.inner.lock().unwrap();
        g.frames = 0;
        g.queue.drain(..).collect()
    }

    pub fn pop(&self) -> Option<Message> {
        let mut g = self.inner.lock().unwrap();
        let msg = g.queue.pop_front()?;
        if msg.is_frame() {
            g.frames -= 1;
        }
        Some(msg)
    }

    pub fn dropped(&self) -> u64 {
        self.inner.lock().unwrap().dropped
    }

    pub fn close(&self) {
        self.inner.lock().unwrap().closed = true;
        self.notify.notify_one();
    }

    pub fn is_closed(&self) -> bool {
        self.inner.lock().unwrap().closed
    }

    async fn wait(&self) {
        self.notify.notified().await
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/session", get(session))
        .with_state(state)
}

/// Binds `addr` and serves in a background task; returns the bound address.
pub async fn spawn(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<SocketAddr> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, router(state)).await {
            log::error!("server stopped: {e}");
        }
    });
    Ok(local)
}

/// Binds `addr` and serves until the process ends.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let agents: Vec<_> = state
        .agents
        .iter()
        .map(|a| {
            serde_json::json!({
                "name": a.name,
                "variant": a.agent.variant(),
                "env": a.env.name(),
            })
        })
        .collect();
    Json(serde_json::json!({
        "status": "ok",
        "service": "pinn-demo",
        "version": VERSION,
        "build": if cfg!(debug_assertions) { "debug" } else { "release" },
        "agents": agents,
    }))
}

#[derive(Debug, Default, Deserialize)]
pub struct SessionQuery {
    /// Served agent name; the first one when absent.
    pub agent: Option<String>,
    /// Environment kind the client expects (`cartpole` or `minipong`).
    pub env: Option<String>,
    pub seed: Option<u64>,
}

async fn session(
    ws: WebSocketUpgrade,
    State(state): State<Arc<AppState>>,
    Query(query): Query<SessionQuery>,
) -> Response {
    ws.on_upgrade(move |socket| run_socket(socket, state, query))
}

fn open_session(state: &AppState, query: &SessionQuery) -> Result<Session, String> {
    let served = match &query.agent {
        Some(name) => state
            .agents
            .iter()
            .find(|a| &a.name == name)
            .ok_or_else(|| format!("no agent named `{name}`"))?,
        None => state.agents.first().ok_or("no agents loaded")?,
    };
    if let Some(kind) = &query.env {
        if kind != served.env.name() {
            return Err(format!(
                "agent `{}` ({}) plays {}, not {kind}",
                served.name,
                served.agent.variant(),
                served.env.name()
            ));
        }
    }
    let id = state.next_id.fetch_add(1, Ordering::Relaxed);
    let seed = query
        .seed
        .unwrap_or_else(|| SeededRng::new(state.seed).derive_seed("session", id));
    Session::open(id, &served.name, served.agent.clone(), served.env, seed)
}

async fn run_socket(socket: WebSocket, state: Arc<AppState>, query: SessionQuery) {
    let (mut sink, mut stream) = socket.split();
    let session = match open_session(&state, &query) {
        Ok(s) => s,
        Err(reason) => {
            log::info!("refused session: {reason}");
            let msg = Message::Refused { reason }.to_json();
            let _ = sink.send(WsMessage::Text(msg.into())).await;
            let _ = sink.send(WsMessage::Close(None)).await;
            return;
        }
    };
    let id = session.id;
    log::info!("session {id} opened");
    let outbox = Arc::new(Outbox::new(state.buffer));
    let (tx, rx) = mpsc::channel::<Command>();
    let driver = {
        let outbox = outbox.clone();
        std::thread::spawn(move || drive(session, rx, &outbox))
    };

    let writer = {
        let outbox = outbox.clone();
        tokio::spawn(async move {
            // one at a time, so frames wait in the outbox while the socket is slow
            loop {
                let Some(msg) = outbox.pop() else {
                    if outbox.is_closed() {
                        break;
                    }
                    outbox.wait().await;
                    continue;
                };
                if sink.send(WsMessage::Text(msg.to_json().into())).await.is_err() {
                    outbox.close();
                    return;
                }
            }
            let _ = sink.send(WsMessage::Close(None)).await;
        })
    };

    while let Some(Ok(msg)) = stream.next().await {
        match msg {
            WsMessage::Text(text) => match parse_command(text.as_str()) {
                Ok(cmd) => {
                    if tx.send(cmd).is_err() {
                        break;
                    }
                }
                Err(message) => outbox.push(Message::Error { message }),
            },
            WsMessage::Binary(_) => outbox.push(Message::Error {
                message: "binary messages are not supported".into(),
            }),
            WsMessage::Close(_) => break,
            _ => {}
        }
        if outbox.is_closed() {
            break;
        }
    }
    drop(tx);
    outbox.close();
    let _ = writer.await;
    let _ = tokio::task::spawn_blocking(move || driver.join()).await;
    log::info!("session {id} closed");
}

/// Episode loop of one session: commands apply between steps; steps are paced by
/// deadlines at the session's rate.
pub fn drive(mut session: Session, rx: Receiver<Command>, out: &Outbox) {
    out.push(session.hello());
    out.push(Message::Frame(session.initial_frame()));
    let mut next = Instant::now();
    loop {
        if out.is_closed() {
            return;
        }
        if session.paused {
            match rx.recv() {
                Ok(cmd) => apply(&mut session, cmd, out),
                Err(_) => return,
            }
            next = Instant::now();
            continue;
        }
        let now = Instant::now();
        if now < next {
            match rx.recv_timeout(next - now) {
                Ok(cmd) => {
                    apply(&mut session, cmd, out);
                    continue;
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => return,
            }
        }
        match session.advance() {
            Ok(f) => out.push(Message::Frame(f)),
            Err(message) => out.push(Message::Error { message }),
        }
        let period = Duration::from_secs_f64(1.0 / session.hz);
        next += period;
        let now = Instant::now();
        if next + period < now {
            // too far behind to catch up without a burst
            next = now;
        }
    }
}

fn apply(session: &mut Session, cmd: Command, out: &Outbox) {
    for msg in session.handle(cmd) {
        out.push(msg);
    }
}
