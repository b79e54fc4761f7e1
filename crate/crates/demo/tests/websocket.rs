use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use futures::{SinkExt, StreamExt};
use pinn_core::agents::{Agent, AgentConfig};
use pinn_core::envs::{CartpoleConfig, EnvConfig};
use pinn_core::numerics::SeededRng;
use pinn_demo::{spawn, AppState, Frame, Message, ServedAgent};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message as WsMessage;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

type Socket = WebSocketStream<MaybeTlsStream<TcpStream>>;

fn served(name: &str, seed: u64) -> ServedAgent {
    let cfg = AgentConfig::PiCartpole(Default::default());
    ServedAgent {
        name: name.into(),
        agent: Arc::new(Agent::random(&cfg, &mut SeededRng::new(seed)).unwrap()),
        env: EnvConfig::Cartpole(CartpoleConfig {
            x_limit: 1e9,
            max_steps: 1_000_000,
            ..Default::default()
        }),
    }
}

async fn server(buffer: usize) -> SocketAddr {
    let state = AppState::new(vec![served("alpha", 1), served("beta", 2)], 0).with_buffer(buffer);
    spawn(Arc::new(state), "127.0.0.1:0".parse().unwrap())
        .await
        .unwrap()
}

async fn connect(addr: SocketAddr, query: &str) -> Socket {
    let (ws, _) = connect_async(format!("ws://{addr}/session{query}")).await.unwrap();
    ws
}

async fn recv(ws: &mut Socket) -> Message {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(10), ws.next())
            .await
            .expect("server went quiet")
            .expect("socket closed")
            .unwrap();
        if let WsMessage::Text(t) = msg {
            return serde_json::from_str(t.as_str()).unwrap();
        }
    }
}

async fn recv_frame(ws: &mut Socket) -> Frame {
    match recv(ws).await {
        Message::Frame(f) => f,
        other => panic!("expected a frame, got {other:?}"),
    }
}

async fn send(ws: &mut Socket, json: &str) {
    ws.send(WsMessage::Text(json.to_string().into())).await.unwrap();
}

/// Hello and the step-0 frame.
async fn handshake(ws: &mut Socket) -> Frame {
    assert!(matches!(recv(ws).await, Message::Session { paused: true, .. }));
    recv_frame(ws).await
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn health_reports_version() {
    let addr = server(64).await;
    let mut tcp = TcpStream::connect(addr).await.unwrap();
    tcp.write_all(b"GET /health HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n")
        .await
        .unwrap();
    let mut raw = String::new();
    tcp.read_to_string(&mut raw).await.unwrap();
    assert!(raw.starts_with("HTTP/1.1 200"), "{raw}");
    let body = &raw[raw.find("\r\n\r\n").unwrap() + 4..];
    let v: serde_json::Value = serde_json::from_str(body).unwrap();
    assert_eq!(v["status"], "ok");
    assert_eq!(v["version"], pinn_demo::VERSION);
    assert!(v["build"].is_string());
    assert_eq!(v["agents"][1]["name"], "beta");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn session_round_trip() {
    let addr = server(64).await;
    let mut ws = connect(addr, "").await;
    let f = handshake(&mut ws).await;
    assert_eq!((f.step, f.action), (0, None));

    // paused: nothing arrives until asked
    assert!(tokio::time::timeout(Duration::from_millis(300), ws.next()).await.is_err());

    send(&mut ws, r#"{"type":"step_once"}"#).await;
    let f = recv_frame(&mut ws).await;
    assert_eq!(f.step, 1);
    assert!(f.action.is_some());
    assert_eq!(f.latent.len(), f.latent_shape[0] * f.latent_shape[1]);

    send(&mut ws, r#"{"type":"warp","factor":9}"#).await;
    assert!(matches!(recv(&mut ws).await, Message::Error { .. }));
    send(&mut ws, "{").await;
    assert!(matches!(recv(&mut ws).await, Message::Error { .. }));

    // the session survived the bad input
    send(&mut ws, r#"{"type":"shuffle"}"#).await;
    let Message::Ack { detail: a, .. } = recv(&mut ws).await else { panic!() };
    send(&mut ws, r#"{"type":"shuffle"}"#).await;
    let Message::Ack { detail: b, .. } = recv(&mut ws).await else { panic!() };
    assert_ne!(a["permutation"], b["permutation"]);
    send(&mut ws, r#"{"type":"step_once"}"#).await;
    let f = recv_frame(&mut ws).await;
    assert_eq!(f.step, 2);
    assert_eq!(serde_json::json!(f.permutation), b["permutation"]);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn frames_follow_the_set_rate_and_pause_stops_them() {
    let addr = server(1024).await;
    let mut ws = connect(addr, "").await;
    handshake(&mut ws).await;
    send(&mut ws, r#"{"type":"set_speed","hz":20}"#).await;
    assert!(matches!(recv(&mut ws).await, Message::Ack { .. }));
    send(&mut ws, r#"{"type":"resume"}"#).await;
    assert!(matches!(recv(&mut ws).await, Message::Ack { .. }));
    let start = Instant::now();
    let mut frames = 0;
    while start.elapsed() < Duration::from_secs(2) {
        if let Message::Frame(_) = recv(&mut ws).await {
            frames += 1;
        }
    }
    let rate = frames as f64 / start.elapsed().as_secs_f64();
    assert!((rate - 20.0).abs() <= 4.0, "{frames} frames: {rate:.1} Hz");

    send(&mut ws, r#"{"type":"pause"}"#).await;
    loop {
        if let Message::Ack { command, .. } = recv(&mut ws).await {
            assert_eq!(command, "pause");
            break;
        }
    }
    assert!(tokio::time::timeout(Duration::from_millis(300), ws.next()).await.is_err());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn mismatched_requests_are_refused() {
    let addr = server(64).await;
    for query in ["?env=minipong", "?agent=gamma"] {
        let mut ws = connect(addr, query).await;
        assert!(matches!(recv(&mut ws).await, Message::Refused { .. }), "{query}");
        let rest = tokio::time::timeout(Duration::from_secs(5), ws.next()).await.unwrap();
        assert!(matches!(rest, None | Some(Ok(WsMessage::Close(_))) | Some(Err(_))));
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_sessions_are_independent() {
    let addr = server(64).await;
    let mut a = connect(addr, "?agent=beta&seed=9").await;
    let mut b = connect(addr, "?agent=beta&seed=9&env=cartpole").await;
    assert_eq!(handshake(&mut a).await.raw, handshake(&mut b).await.raw);

    send(&mut a, r#"{"type":"occlude","indices":[0,1]}"#).await;
    recv(&mut a).await;
    for _ in 0..3 {
        send(&mut a, r#"{"type":"step_once"}"#).await;
        recv_frame(&mut a).await;
    }
    let mut solo = connect(addr, "?agent=beta&seed=9").await;
    handshake(&mut solo).await;
    for ws in [&mut b, &mut solo] {
        send(ws, r#"{"type":"step_once"}"#).await;
    }
    let fb = recv_frame(&mut b).await;
    let fs = recv_frame(&mut solo).await;
    assert_eq!(fb.step, 1);
    assert_eq!(fb.visible, vec![0, 1, 2, 3, 4]);
    assert_eq!((fb.action, fb.latent), (fs.action, fs.latent));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn slow_clients_lose_the_oldest_frames() {
    let addr = server(4).await;
    let mut ws = connect(addr, "").await;
    handshake(&mut ws).await;
    // wide frames fill the socket buffers sooner
    send(&mut ws, r#"{"type":"noise","count":100,"sigma":1.0}"#).await;
    send(&mut ws, r#"{"type":"set_speed","hz":1000}"#).await;
    send(&mut ws, r#"{"type":"resume"}"#).await;
    // stop reading until the socket buffers are full
    tokio::time::sleep(Duration::from_secs(5)).await;
    let mut last = None;
    let start = Instant::now();
    while start.elapsed() < Duration::from_secs(30) {
        if let Message::Frame(f) = recv(&mut ws).await {
            if f.dropped > 0 {
                last = Some(f);
                break;
            }
        }
    }
    let f = last.expect("no frame reported drops");
    assert!(f.step > f.dropped as usize);
}
