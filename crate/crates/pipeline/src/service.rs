//! Newline-delimited JSON over TCP. One request object per line, one
//! response object per line, in order.

use std::sync::Arc;

use log::{debug, info};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};

use crate::pipeline::Pipeline;

const MAX_FRAME: usize = 1 << 20;

#[derive(Debug, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Request {
    PutItem { item_id: u64, modal_feature: Vec<f32> },
    GetRep { item_id: u64 },
    Stats,
}

fn error(msg: impl Into<String>) -> Value {
    json!({"ok": false, "error": msg.into()})
}

/// Answers one frame. `put_item` may block on back-pressure, so call this
/// off the async executor.
pub fn handle_frame(pipeline: &Pipeline, line: &str) -> Value {
    let req: Request = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => return error(format!("bad request: {e}")),
    };
    match req {
        Request::PutItem {
            item_id,
            modal_feature,
        } => match pipeline.ingest(item_id, modal_feature) {
            Ok(version) => json!({"ok": true, "version": version}),
            Err(e) => error(e.to_string()),
        },
        Request::GetRep { item_id } => match pipeline.get(item_id) {
            Some(r) => json!({"ok": true, "version": r.version, "rep": r.rep}),
            None => error("not_found"),
        },
        Request::Stats => {
            let mut v = serde_json::to_value(pipeline.freshness(None)).expect("plain struct");
            v["ok"] = json!(true);
            v["dead_letters"] = json!(pipeline.dead_letters().len());
            v["pending"] = json!(pipeline.pending());
            v
        }
    }
}

/// Accepts connections until the listener fails.
pub async fn serve(listener: TcpListener, pipeline: Arc<Pipeline>) -> std::io::Result<()> {
    info!("listening on {}", listener.local_addr()?);
    loop {
        let (stream, peer) = listener.accept().await?;
        debug!("connection from {peer}");
        let p = pipeline.clone();
        tokio::spawn(async move {
            if let Err(e) = connection(stream, p).await {
                debug!("connection {peer} closed: {e}");
            }
        });
    }
}

async fn connection(stream: TcpStream, pipeline: Arc<Pipeline>) -> std::io::Result<()> {
    let (read, mut write) = stream.into_split();
    let mut reader = BufReader::new(read);
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line).await? == 0 {
            return Ok(());
        }
        let reply = if line.len() > MAX_FRAME {
            error("frame too large")
        } else if line.trim().is_empty() {
            continue;
        } else {
            let p = pipeline.clone();
            let frame = line.clone();
            tokio::task::spawn_blocking(move || handle_frame(&p, &frame))
                .await
                .unwrap_or_else(|e| error(format!("internal: {e}")))
        };
        let mut out = reply.to_string();
        out.push('\n');
        write.write_all(out.as_bytes()).await?;
    }
}
