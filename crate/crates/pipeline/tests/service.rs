use std::sync::Arc;

use mmrec_pipeline::service::serve;
use mmrec_pipeline::{FnEncoder, Pipeline, PipelineConfig, VirtualClock};
use serde_json::{json, Value};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};

async fn call(
    reader: &mut BufReader<tokio::net::tcp::OwnedReadHalf>,
    writer: &mut tokio::net::tcp::OwnedWriteHalf,
    frame: &str,
) -> Value {
    writer.write_all(frame.as_bytes()).await.unwrap();
    writer.write_all(b"\n").await.unwrap();
    let mut line = String::new();
    reader.read_line(&mut line).await.unwrap();
    serde_json::from_str(&line).unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn frames_round_trip_over_tcp() {
    let encoder = Arc::new(FnEncoder::new(2, |x: &[f32]| {
        let n = (x[0] * x[0] + x[1] * x[1]).sqrt();
        Ok(vec![x[0] / n, x[1] / n])
    }));
    let pipeline = Arc::new(Pipeline::start(
        encoder,
        Arc::new(VirtualClock::new(0)),
        PipelineConfig::default(),
    ));
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(serve(listener, pipeline.clone()));

    let (r, mut w) = TcpStream::connect(addr).await.unwrap().into_split();
    let mut r = BufReader::new(r);

    let miss = call(&mut r, &mut w, r#"{"op":"get_rep","item_id":3}"#).await;
    assert_eq!(miss, json!({"ok": false, "error": "not_found"}));

    let put = call(&mut r, &mut w, r#"{"op":"put_item","item_id":3,"modal_feature":[3.0,4.0]}"#).await;
    assert_eq!(put, json!({"ok": true, "version": 1}));
    let put = call(&mut r, &mut w, r#"{"op":"put_item","item_id":3,"modal_feature":[0.0,2.0]}"#).await;
    assert_eq!(put["version"], 2);

    let p = pipeline.clone();
    tokio::task::spawn_blocking(move || p.wait_idle()).await.unwrap();
    let got = call(&mut r, &mut w, r#"{"op":"get_rep","item_id":3}"#).await;
    assert_eq!(got, json!({"ok": true, "version": 2, "rep": [0.0, 1.0]}));

    let bad = call(&mut r, &mut w, r#"{"op":"put_item","item_id":4,"modal_feature":[1.0]}"#).await;
    assert_eq!(bad["ok"], false);
    assert!(bad["error"].as_str().unwrap().contains("dim"));

    let junk = call(&mut r, &mut w, r#"{"op":"explode"}"#).await;
    assert_eq!(junk["ok"], false);

    let stats = call(&mut r, &mut w, r#"{"op":"stats"}"#).await;
    assert_eq!(stats["ok"], true);
    assert_eq!(stats["count"], 2);
    assert_eq!(stats["dead_letters"], 1);
}
