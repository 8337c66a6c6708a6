mod common;

use std::time::Duration;

use common::fixture_session;
use futures::StreamExt;
use mcds_core::codec::TraceMessage;
use mcds_core::xcp::{cmd, Transport, TransportError, TransportKind, XcpFrame, POSITIVE};
use mcds_host::api::{router, Event, SessionHandle};
use mcds_host::xcp_tcp::TcpChannel;
use mcds_host::{Phase, Session, SessionConfig, SessionState};
use reqwest::StatusCode;
use serde_json::json;

async fn start(s: Session) -> (String, SessionHandle) {
    let l = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", l.local_addr().unwrap());
    let h = SessionHandle::spawn(s);
    let app = router(h.clone());
    tokio::spawn(async move { axum::serve(l, app).await.unwrap() });
    (base, h)
}

fn spin_session(count: u32) -> (tempfile::TempDir, Session) {
    let dir = tempfile::tempdir().unwrap();
    let src = format!("LDI R14, 1\nLDI R15, {count:#x}\ntop: SUB R15, R15, R14\nBNE R15, R0, top\nHALT\n");
    std::fs::write(dir.path().join("spin.s"), src).unwrap();
    let cfg = SessionConfig::from_json(r#"{"images": [{"core": 0, "path": "spin.s", "base": 0}], "debug": {"blocks": [{"source": 0}]}}"#)
        .unwrap();
    let s = Session::new(&cfg, dir.path()).unwrap();
    (dir, s)
}

async fn state(c: &reqwest::Client, base: &str) -> SessionState {
    c.get(format!("{base}/api/state")).send().await.unwrap().json().await.unwrap()
}

#[tokio::test]
async fn fresh_session_state() {
    let (base, _h) = start(fixture_session("loop10.json")).await;
    let st = state(&reqwest::Client::new(), &base).await;
    assert_eq!(st.phase, Phase::Idle);
    assert_eq!(st.cycle, 0);
}

#[tokio::test]
async fn page_select_round_trip_and_errors() {
    let (base, _h) = start(fixture_session("cal.json")).await;
    let c = reqwest::Client::new();
    let r = c.post(format!("{base}/api/calibration/page")).json(&json!({"page": 1})).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    let got: serde_json::Value = c.get(format!("{base}/api/calibration/page")).send().await.unwrap().json().await.unwrap();
    assert_eq!(got["page"], 1);
    let r = c.post(format!("{base}/api/calibration/page")).body("{\"page\":").send().await.unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
    let body: serde_json::Value = r.json().await.unwrap();
    assert!(body["error"].as_str().unwrap().contains("malformed"));
    let r = c.post(format!("{base}/api/calibration/page")).json(&json!({"page": 4})).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn calibration_write_then_read_back() {
    let (base, _h) = start(fixture_session("cal.json")).await;
    let c = reqwest::Client::new();
    let r = c.post(format!("{base}/api/calibration")).json(&json!({"addr": "0xE0001000", "bytes": [7, 0, 0, 0]})).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    c.post(format!("{base}/api/calibration/page")).json(&json!({"page": 1})).send().await.unwrap();
    let got: serde_json::Value = c.get(format!("{base}/api/calibration?addr=0x8000&len=4")).send().await.unwrap().json().await.unwrap();
    assert_eq!(got["bytes"], json!([7, 0, 0, 0]));
    let r = c.post(format!("{base}/api/calibration")).json(&json!({"addr": 16, "bytes": [1]})).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn control_status_codes() {
    let (base, _h) = start(fixture_session("loop10.json")).await;
    let c = reqwest::Client::new();
    let url = format!("{base}/api/control");
    let r = c.post(&url).body("{\"cmd\": \"fly\"}").send().await.unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
    let r = c.post(&url).body("not json").send().await.unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
    let r = c.post(&url).json(&json!({"cmd": "resume"})).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::CONFLICT);
    let r = c.post(format!("{url}?wait=true")).json(&json!({"cmd": "run", "cycles": 1000})).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    let st: SessionState = r.json().await.unwrap();
    assert_eq!(st.phase, Phase::Done);
    assert!(st.cycle <= 1000);
    let r = c.post(&url).json(&json!({"cmd": "swbreak", "addr": 8, "on": true})).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn halt_interrupts_a_running_target() {
    let (_d, s) = spin_session(0x7fff);
    let (base, _h) = start(s).await;
    let c = reqwest::Client::new();
    let url = format!("{base}/api/control");
    let st: SessionState = c.post(&url).json(&json!({"cmd": "run"})).send().await.unwrap().json().await.unwrap();
    assert_eq!(st.phase, Phase::Running);
    let mut last = 0;
    for _ in 0..5 {
        let st = state(&c, &base).await;
        assert!(st.cycle >= last);
        last = st.cycle;
    }
    let r = c.post(&url).json(&json!({"cmd": "halt"})).send().await.unwrap();
    assert_eq!(r.status(), StatusCode::OK);
    let st: SessionState = r.json().await.unwrap();
    assert_eq!(st.phase, Phase::Broken);
    assert!(st.cycle < 0x7fff * 2);
    let st: SessionState = c.post(format!("{url}?wait=true")).json(&json!({"cmd": "resume"})).send().await.unwrap().json().await.unwrap();
    assert_eq!(st.phase, Phase::Done);
}

/// Reads SSE records until `done` says stop.
async fn read_stream(resp: reqwest::Response, mut done: impl FnMut(&Event) -> bool) -> Vec<Event> {
    let mut body = resp.bytes_stream();
    let mut buf = String::new();
    let mut out = Vec::new();
    loop {
        while let Some(end) = buf.find("\n\n") {
            let record: String = buf.drain(..end + 2).collect();
            let data: String = record.lines().filter_map(|l| l.strip_prefix("data:")).map(str::trim_start).collect();
            if data.is_empty() {
                continue;
            }
            let e: Event = serde_json::from_str(&data).unwrap();
            let stop = done(&e);
            out.push(e);
            if stop {
                return out;
            }
        }
        let chunk = tokio::time::timeout(Duration::from_secs(20), body.next()).await.expect("stream stalled").unwrap().unwrap();
        buf.push_str(std::str::from_utf8(&chunk).unwrap());
    }
}

#[tokio::test]
async fn stream_order_matches_trace_order() {
    let (_d, s) = spin_session(3000);
    let (base, _h) = start(s).await;
    let c = reqwest::Client::new();
    let resp = c.get(format!("{base}/api/stream")).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let reader = tokio::spawn(read_stream(resp, |e| matches!(e, Event::State(st) if st.phase == Phase::Done)));
    let st = state(&c, &base).await;
    assert_eq!(st.clients, 1);
    c.post(format!("{base}/api/control")).json(&json!({"cmd": "run"})).send().await.unwrap();
    let events = reader.await.unwrap();
    assert!(matches!(events[0], Event::State(ref st) if st.phase == Phase::Idle));
    let streamed: Vec<(usize, TraceMessage)> = events
        .iter()
        .filter_map(|e| match e {
            Event::Trace { index, message } => Some((*index, *message)),
            _ => None,
        })
        .collect();
    let trace: Vec<TraceMessage> = c.get(format!("{base}/api/trace?from=0")).send().await.unwrap().json().await.unwrap();
    assert!(!trace.is_empty());
    assert_eq!(streamed.iter().map(|x| x.1).collect::<Vec<_>>(), trace);
    assert!(streamed.iter().enumerate().all(|(i, x)| x.0 == i));
    let tail: Vec<TraceMessage> = c.get(format!("{base}/api/trace?from=3")).send().await.unwrap().json().await.unwrap();
    assert_eq!(tail, trace[3..]);
    let mtrc = c.get(format!("{base}/api/trace.mtrc")).send().await.unwrap().bytes().await.unwrap();
    assert_eq!(mcds_host::export::decode_mtrc(&mtrc).unwrap().messages, trace);
}

#[tokio::test]
async fn xcp_over_tcp_with_usb_latency() {
    let s = fixture_session("cal.json");
    let h = SessionHandle::spawn(s);
    let l = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = l.local_addr().unwrap();
    tokio::spawn(mcds_host::xcp_tcp::serve(l, h.clone()));
    let (elapsed, replies) = tokio::task::spawn_blocking(move || {
        let mut ch = TcpChannel::connect(addr).unwrap();
        let mut t = Transport::with_default_latency(TransportKind::UsbLike);
        let mut replies = Vec::new();
        let mut dl = vec![cmd::DOWNLOAD];
        dl.extend(0xE000_1000u32.to_le_bytes());
        dl.extend([0xAB, 0xCD, 0, 0]);
        let mut up = vec![cmd::SHORT_UPLOAD];
        up.extend(0x8000u32.to_le_bytes());
        up.push(2);
        for (ctr, p) in [vec![cmd::CONNECT], dl, vec![cmd::SET_CAL_PAGE, 1], up].into_iter().enumerate() {
            let (resp, dt) = t.roundtrip(&XcpFrame::new(ctr as u16, p), &mut ch).unwrap();
            assert_eq!(dt, 6_000_000);
            replies.push(resp.payload);
        }
        (t.elapsed_ns(), replies)
    })
    .await
    .unwrap();
    assert_eq!(elapsed, 4 * 6_000_000);
    assert_eq!(replies[3], vec![POSITIVE, 0xAB, 0xCD]);
    let st = h.state().await;
    assert_eq!(st.page, 1);
}

#[tokio::test]
async fn dropped_connection_reports_closed() {
    let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = l.local_addr().unwrap();
    let r = tokio::task::spawn_blocking(move || {
        let mut ch = TcpChannel::connect(addr).unwrap();
        drop(l.accept().unwrap());
        let mut t = Transport::with_default_latency(TransportKind::UsbLike);
        t.roundtrip(&XcpFrame::new(0, vec![cmd::CONNECT]), &mut ch)
    })
    .await
    .unwrap();
    assert_eq!(r.unwrap_err(), TransportError::Closed);
}
