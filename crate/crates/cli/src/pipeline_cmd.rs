use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Arc;

use mmrec_pipeline::sim::{read_events, simulate, SimReport};
use mmrec_pipeline::{service, ItemEvent, Pipeline, SclEncoder, WallClock};
use serde::Serialize;

use crate::artifacts::{read_rows, write_run, Layout};
use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

/// Reads an event log, with or without the artifact header line.
pub fn load_events(path: &Path) -> Result<Vec<ItemEvent>> {
    let open = || File::open(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())));
    let mut first = String::new();
    BufReader::new(open()?).read_line(&mut first)?;
    let has_header = serde_json::from_str::<serde_json::Value>(&first)
        .ok()
        .is_some_and(|v| v.get("kind").is_some());
    if has_header {
        Ok(read_rows(path, "events")?.1)
    } else {
        read_events(BufReader::new(open()?)).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }
}

#[derive(Serialize)]
struct SimDoc<'a> {
    encoder: String,
    events_file: String,
    #[serde(flatten)]
    report: &'a SimReport,
}

pub fn simulate_step(
    cfg: &ExperimentConfig,
    layout: &Layout,
    encoder_ckpt: &Path,
    events_path: &Path,
) -> Result<SimReport> {
    let encoder = SclEncoder::load(encoder_ckpt)?;
    let events = load_events(events_path)?;
    let outcome = simulate(&events, &encoder, &cfg.pipeline.engine);
    let report = outcome.report(events.len());
    let doc = SimDoc {
        encoder: crate::study::checkpoint_stem(encoder_ckpt),
        events_file: events_path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        report: &report,
    };
    write_run(&layout.run("pipeline_sim"), "pipeline_sim", cfg, &doc)?;
    Ok(report)
}

/// Runs the TCP service until the process is stopped.
pub fn serve_step(cfg: &ExperimentConfig, encoder_ckpt: &Path, addr: &str) -> Result<()> {
    let encoder = Arc::new(SclEncoder::load(encoder_ckpt)?);
    let pipeline = Arc::new(Pipeline::start(encoder, Arc::new(WallClock::new()), cfg.pipeline.engine.clone()));
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("{}", serde_json::json!({"listening": listener.local_addr()?.to_string()}));
        service::serve(listener, pipeline).await
    })?;
    Ok(())
}
