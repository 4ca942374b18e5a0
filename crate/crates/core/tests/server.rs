use std::net::TcpStream;
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use tungstenite::stream::MaybeTlsStream;
use tungstenite::{connect, Message, WebSocket};

use wplc::service::{Scenario, ServeOptions, Server, ServerHandle, DEMO_SCENARIO};

type Client = WebSocket<MaybeTlsStream<TcpStream>>;

fn start(time_scale: f64) -> ServerHandle {
    let valid = Scenario::parse(DEMO_SCENARIO).unwrap().validate().unwrap();
    let options = ServeOptions {
        port: 0,
        time_scale,
        replay_stimuli: false,
    };
    Server::bind(&valid, options).unwrap().spawn().unwrap()
}

fn client(handle: &ServerHandle) -> Client {
    let (mut ws, _) = connect(handle.url()).unwrap();
    if let MaybeTlsStream::Plain(s) = ws.get_mut() {
        s.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    }
    let hello = recv(&mut ws);
    assert_eq!(hello["type"], "hello");
    assert_eq!(hello["versions"], json!([1]));
    ws
}

fn send(ws: &mut Client, value: Value) {
    ws.send(Message::text(value.to_string())).unwrap();
}

fn recv(ws: &mut Client) -> Value {
    loop {
        if let Message::Text(text) = ws.read().unwrap() {
            let value: Value = serde_json::from_str(&text).unwrap();
            assert_eq!(value["v"], 1);
            return value;
        }
    }
}

/// Reads until a reply carrying `id` arrives, collecting stream events.
fn reply(ws: &mut Client, id: u64, events: &mut Vec<Value>) -> Value {
    loop {
        let msg = recv(ws);
        if msg["type"] == "event" {
            events.push(msg);
        } else if msg["id"] == id {
            return msg;
        }
    }
}

#[test]
fn snapshot_then_switch_lights_y1() {
    let server = start(1.0);
    let mut ws = client(&server);
    let mut events = Vec::new();

    send(&mut ws, json!({"v":1,"id":1,"type":"snapshot"}));
    let first = reply(&mut ws, 1, &mut events);
    assert_eq!(first["type"], "snapshot");
    for image in ["switches", "inputs", "outputs", "internal"] {
        assert_eq!(first["snapshot"][image], 0, "{image}");
    }

    send(&mut ws, json!({"v":1,"id":2,"type":"subscribe"}));
    assert_eq!(reply(&mut ws, 2, &mut events)["type"], "subscribed");
    send(
        &mut ws,
        json!({"v":1,"id":3,"type":"set_switch","index":0,"on":true}),
    );
    let ack = reply(&mut ws, 3, &mut events);
    assert_eq!(ack["type"], "ack", "{ack}");

    let deadline = Instant::now() + Duration::from_secs(5);
    while !events.iter().any(|e| e["snapshot"]["outputs"] == 2) {
        assert!(Instant::now() < deadline, "Y1 never rose: {events:?}");
        let msg = recv(&mut ws);
        if msg["type"] == "event" {
            events.push(msg);
        }
    }
    let x0 = events
        .iter()
        .position(|e| e["snapshot"]["inputs"] == 1)
        .unwrap();
    let y1 = events
        .iter()
        .position(|e| e["snapshot"]["outputs"] == 2)
        .unwrap();
    assert!(x0 <= y1);
    let seqs: Vec<u64> = events.iter().map(|e| e["seq"].as_u64().unwrap()).collect();
    assert!(seqs.windows(2).all(|w| w[0] < w[1]), "{seqs:?}");
    let last = &events[y1]["snapshot"];
    assert!(last["link_stats"]["delivered"].as_u64().unwrap() >= 1);
    assert_eq!(last["link"], "paired");
    server.shutdown();
}

#[test]
fn rapid_toggle_produces_no_output_change() {
    let server = start(0.05);
    let mut ws = client(&server);
    let mut events = Vec::new();
    send(&mut ws, json!({"v":1,"id":1,"type":"subscribe"}));
    reply(&mut ws, 1, &mut events);
    // At 0.05x speed the 10 ms debounce spans 200 ms of wall time.
    send(
        &mut ws,
        json!({"v":1,"id":2,"type":"set_switch","index":3,"on":true}),
    );
    let on = reply(&mut ws, 2, &mut events)["applied_at_us"]
        .as_u64()
        .unwrap();
    send(
        &mut ws,
        json!({"v":1,"id":3,"type":"set_switch","index":3,"on":false}),
    );
    let off = reply(&mut ws, 3, &mut events)["applied_at_us"]
        .as_u64()
        .unwrap();
    assert!(
        off - on < 10_000,
        "toggles {on}..{off} were not within the debounce window"
    );

    std::thread::sleep(Duration::from_millis(1_500));
    send(&mut ws, json!({"v":1,"id":4,"type":"snapshot"}));
    let snap = reply(&mut ws, 4, &mut events);
    assert!(snap["snapshot"]["sim_time_us"].as_u64().unwrap() > off + 50_000);
    for e in events
        .iter()
        .map(|e| &e["snapshot"])
        .chain([&snap["snapshot"]])
    {
        assert_eq!(e["outputs"], 0);
        assert_eq!(e["inputs"], 0);
        assert_eq!(e["field_state"], 0);
    }
    server.shutdown();
}

#[test]
fn protocol_errors_are_replies_not_disconnects() {
    let server = start(1.0);
    let mut ws = client(&server);
    let mut events = Vec::new();
    ws.send(Message::text("garbage")).unwrap();
    assert_eq!(recv(&mut ws)["code"], "bad_request");
    send(&mut ws, json!({"v":2,"id":7,"type":"snapshot"}));
    let err = reply(&mut ws, 7, &mut events);
    assert_eq!(err["code"], "unsupported_version");
    send(
        &mut ws,
        json!({"v":1,"id":8,"type":"set_switch","index":8,"on":true}),
    );
    assert_eq!(reply(&mut ws, 8, &mut events)["code"], "rejected");
    send(&mut ws, json!({"v":1,"id":9,"type":"snapshot"}));
    assert_eq!(reply(&mut ws, 9, &mut events)["type"], "snapshot");
    server.shutdown();
}

#[test]
fn clients_share_one_simulation() {
    let server = start(1.0);
    let mut a = client(&server);
    let mut b = client(&server);
    let mut events = Vec::new();
    send(
        &mut a,
        json!({"v":1,"id":1,"type":"set_switch","index":0,"on":true}),
    );
    reply(&mut a, 1, &mut events);
    let deadline = Instant::now() + Duration::from_secs(5);
    loop {
        send(&mut b, json!({"v":1,"id":2,"type":"snapshot"}));
        let snap = reply(&mut b, 2, &mut events);
        if snap["snapshot"]["outputs"] == 2 {
            break;
        }
        assert!(Instant::now() < deadline);
        std::thread::sleep(Duration::from_millis(20));
    }
    server.shutdown();
}
