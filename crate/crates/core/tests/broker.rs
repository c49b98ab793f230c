use std::io::{BufReader, Write};
use std::net::TcpStream;
use std::time::{Duration, Instant};

use serde_json::json;

use shelfpipe::serve::protocol::{read_frame, write_frame, Frame, MAX_FRAME_BYTES};
use shelfpipe::serve::{broker_sim, BrokerClient};

const T: Duration = Duration::from_secs(5);

fn wait_until(mut f: impl FnMut() -> bool) -> bool {
    let end = Instant::now() + T;
    while Instant::now() < end {
        if f() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(5));
    }
    f()
}

#[test]
fn fan_out_preserves_order_per_subscriber() {
    let broker = broker_sim("127.0.0.1:0").unwrap();
    let subs: Vec<BrokerClient> = (0..2).map(|_| BrokerClient::connect(broker.local_addr()).unwrap()).collect();
    for s in &subs {
        s.subscribe("t").unwrap();
        s.barrier(T).unwrap();
    }
    let publisher = BrokerClient::connect(broker.local_addr()).unwrap();
    for i in 0..100 {
        publisher.publish("t", json!({ "i": i })).unwrap();
    }
    for s in &subs {
        for i in 0..100 {
            let d = s.recv_timeout(T).unwrap().expect("message");
            assert_eq!(d.topic, "t");
            assert_eq!(d.payload["i"], i);
        }
        assert!(s.recv_timeout(Duration::from_millis(50)).unwrap().is_none());
    }
    assert_eq!(broker.dropped(), 0);
    assert!(broker.delivered() >= 200);
}

#[test]
fn publish_without_subscribers_is_counted_as_dropped() {
    let broker = broker_sim("127.0.0.1:0").unwrap();
    let c = BrokerClient::connect(broker.local_addr()).unwrap();
    for _ in 0..3 {
        c.publish("nobody", json!(1)).unwrap();
    }
    c.barrier(T).unwrap();
    assert_eq!(broker.dropped(), 3);

    c.subscribe("other").unwrap();
    c.publish("other", json!(2)).unwrap();
    assert_eq!(c.recv_timeout(T).unwrap().unwrap().payload, json!(2));
    assert_eq!(broker.dropped(), 3);
}

#[test]
fn topics_are_isolated() {
    let broker = broker_sim("127.0.0.1:0").unwrap();
    let a = BrokerClient::connect(broker.local_addr()).unwrap();
    a.subscribe("a").unwrap();
    a.barrier(T).unwrap();
    let p = BrokerClient::connect(broker.local_addr()).unwrap();
    p.publish("b", json!("x")).unwrap();
    p.publish("a", json!("y")).unwrap();
    assert_eq!(a.recv_timeout(T).unwrap().unwrap().payload, json!("y"));
    assert!(a.recv_timeout(Duration::from_millis(50)).unwrap().is_none());
}

#[test]
fn oversized_frame_gets_error_and_close() {
    let broker = broker_sim("127.0.0.1:0").unwrap();
    let mut s = TcpStream::connect(broker.local_addr()).unwrap();
    s.set_read_timeout(Some(T)).unwrap();
    s.write_all(&((MAX_FRAME_BYTES as u32) + 1).to_be_bytes()).unwrap();
    let mut r = BufReader::new(s.try_clone().unwrap());
    match read_frame(&mut r).unwrap() {
        Some(Frame::Error { message }) => assert!(message.contains("16 MiB"), "{message}"),
        other => panic!("expected an error frame, got {other:?}"),
    }
    assert!(matches!(read_frame(&mut r), Ok(None) | Err(_)));

    // the broker keeps serving other connections
    let c = BrokerClient::connect(broker.local_addr()).unwrap();
    c.subscribe("t").unwrap();
    c.publish("t", json!(7)).unwrap();
    assert_eq!(c.recv_timeout(T).unwrap().unwrap().payload, json!(7));
}

#[test]
fn malformed_json_and_bad_ops_are_rejected() {
    let broker = broker_sim("127.0.0.1:0").unwrap();
    for body in [&b"{not json"[..], br#"{"op":"msg","topic":"t","payload":1}"#] {
        let mut s = TcpStream::connect(broker.local_addr()).unwrap();
        s.set_read_timeout(Some(T)).unwrap();
        s.write_all(&(body.len() as u32).to_be_bytes()).unwrap();
        s.write_all(body).unwrap();
        let mut r = BufReader::new(s);
        assert!(matches!(read_frame(&mut r).unwrap(), Some(Frame::Error { .. })));
    }
}

#[test]
fn disconnected_subscriber_is_forgotten() {
    let broker = broker_sim("127.0.0.1:0").unwrap();
    let mut raw = TcpStream::connect(broker.local_addr()).unwrap();
    write_frame(&mut raw, &Frame::Sub { topic: "t".into() }).unwrap();
    let p = BrokerClient::connect(broker.local_addr()).unwrap();
    // a delivered message proves the subscription landed
    assert!(wait_until(|| {
        p.publish("t", json!(0)).unwrap();
        p.barrier(T).unwrap();
        broker.delivered() > 0
    }));
    drop(raw);
    let before = broker.dropped();
    assert!(wait_until(|| {
        p.publish("t", json!(1)).unwrap();
        p.barrier(T).unwrap();
        broker.dropped() > before
    }));
}

#[test]
fn stop_closes_client_connections() {
    let broker = broker_sim("127.0.0.1:0").unwrap();
    let c = BrokerClient::connect(broker.local_addr()).unwrap();
    c.barrier(T).unwrap();
    broker.stop();
    assert!(wait_until(|| c.recv_timeout(Duration::from_millis(10)).is_err()));
}
