//! Aggregates run documents into summary tables and figure data.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use mmrec_core::ctr::Variant;
use mmrec_core::retrieval::{export_correlation, CheckpointAccuracy};
use serde::de::DeserializeOwned;
use serde_json::Value;

use crate::artifacts::{read_run, write_file};
use crate::error::{CliError, Result};
use crate::study::{Arm, BucketDoc, CtrRunDoc, CurveDoc, MakeRunDoc, RetrievalRun};

pub const FILES: [&str; 7] = [
    "table2.csv",
    "table3.csv",
    "fig3_curves.csv",
    "fig4a_correlation.csv",
    "fig4b_buckets.csv",
    "fig6_make_epochs.csv",
    "make_history.csv",
];

/// Runs sharing one config hash and seed.
#[derive(Default)]
struct Group {
    retrieval: Vec<RetrievalRun>,
    ctr: Vec<CtrRunDoc>,
    curves: Vec<CurveDoc>,
    buckets: Vec<BucketDoc>,
    make: Vec<MakeRunDoc>,
}

type Key = (String, u64);

pub struct Report {
    /// File name to contents, including `summary.md`.
    pub files: BTreeMap<String, String>,
    pub summary: String,
}

fn parse<T: DeserializeOwned>(path: &Path, v: Value) -> Result<T> {
    serde_json::from_value(v).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn load_groups(runs_dir: &Path, allow_mixed: bool) -> Result<BTreeMap<Key, Group>> {
    let mut paths: Vec<_> = match fs::read_dir(runs_dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect(),
        Err(_) => Vec::new(),
    };
    paths.sort();
    let mut groups: BTreeMap<Key, Group> = BTreeMap::new();
    for p in &paths {
        let v = read_run(p)?;
        let kind = v.get("kind").and_then(Value::as_str).unwrap_or_default().to_string();
        let hash = v.get("config_hash").and_then(Value::as_str);
        let seed = v.get("seed").and_then(Value::as_u64);
        let (Some(hash), Some(seed)) = (hash, seed) else {
            return Err(CliError::Input(format!("{}: missing config_hash or seed", p.display())));
        };
        let g = groups.entry((hash.to_string(), seed)).or_default();
        match kind.as_str() {
            "retrieval" => g.retrieval.push(parse(p, v)?),
            "ctr" => g.ctr.push(parse(p, v)?),
            "curve" => g.curves.push(parse(p, v)?),
            "buckets" => g.buckets.push(parse(p, v)?),
            "make_pretrain" => g.make.push(parse(p, v)?),
            _ => {}
        }
    }
    if groups.is_empty() {
        return Err(CliError::NoRuns(runs_dir.display().to_string()));
    }
    let hashes: BTreeSet<&String> = groups.keys().map(|k| &k.0).collect();
    if hashes.len() > 1 && !allow_mixed {
        return Err(CliError::MixedHashes(hashes.into_iter().cloned().collect()));
    }
    Ok(groups)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn ladder_rank(v: Variant) -> usize {
    Variant::LADDER.iter().position(|&l| l == v).unwrap_or(Variant::LADDER.len())
}

fn base_gauc(g: &Group) -> Option<f64> {
    g.ctr
        .iter()
        .find(|d| d.tag.is_empty() && d.report.variant == Variant::IdBase)
        .map(|d| d.report.gauc)
}

/// Reads every run document under `runs_dir` and renders the report files.
pub fn build(runs_dir: &Path, allow_mixed: bool) -> Result<Report> {
    let groups = load_groups(runs_dir, allow_mixed)?;
    let mut t2 = String::from("arm,checkpoint,n_queries,acc1,acc5,config_hash,seed\n");
    let mut t3 = String::from("variant,gauc,auc,logloss,gauc_lift,auc_lift,logloss_lift,epochs,config_hash,seed\n");
    let mut f3 = String::from("variant,epoch,train_loss,gauc,auc,logloss,config_hash,seed\n");
    let mut f4a = String::from("checkpoint,acc1,acc5,gauc_lift,spearman,config_hash,seed\n");
    let mut f4b = String::from(
        "variant,bucket,n_items,n_records,min_freq,max_freq,auc_id,auc_mm,logloss_id,logloss_mm,auc_lift,logloss_lift,config_hash,seed\n",
    );
    let mut f6 = String::from("make_epochs,variant,gauc,auc,logloss,gauc_lift,config_hash,seed\n");
    let mut mh = String::from("epoch,gauc,auc,logloss,config_hash,seed\n");
    let mut summary = String::from("# Study report\n");

    for ((hash, seed), g) in &groups {
        let _ = writeln!(summary, "\nconfig `{hash}`, seed {seed}\n");

        let mut arms: Vec<(Arm, &RetrievalRun)> = g
            .retrieval
            .iter()
            .filter_map(|r| Arm::ALL.into_iter().find(|a| a.stem() == r.checkpoint).map(|a| (a, r)))
            .collect();
        arms.sort_by_key(|(a, _)| *a);
        if !arms.is_empty() {
            summary.push_str("## Retrieval accuracy by pretraining arm\n\n| arm | Acc@1 | Acc@5 |\n|---|---|---|\n");
        }
        for (a, r) in &arms {
            let _ = writeln!(t2, "{a},{},{},{},{},{hash},{seed}", r.checkpoint, r.n_queries, r.acc1, r.acc5);
            let _ = writeln!(summary, "| {a} | {:.4} | {:.4} |", r.acc1, r.acc5);
        }

        let mut main: Vec<&CtrRunDoc> = g.ctr.iter().filter(|d| d.tag.is_empty()).collect();
        main.sort_by_key(|d| (ladder_rank(d.report.variant), d.report.variant));
        let base = base_gauc(g);
        if !main.is_empty() {
            summary.push_str("\n## CTR variants (held-out)\n\n| variant | GAUC | AUC | LogLoss | GAUC lift |\n|---|---|---|---|---|\n");
        }
        for d in &main {
            let r = &d.report;
            let l = r.lifts.as_ref();
            let _ = writeln!(
                t3,
                "{},{},{},{},{},{},{},{},{hash},{seed}",
                r.variant,
                r.gauc,
                r.auc,
                r.logloss,
                opt(l.map(|l| l.gauc)),
                opt(l.map(|l| l.auc)),
                opt(l.map(|l| l.logloss)),
                r.epochs
            );
            let lift = base.map(|b| format!("{:+.5}", r.gauc - b)).unwrap_or_default();
            let _ = writeln!(summary, "| {} | {:.5} | {:.5} | {:.5} | {lift} |", r.variant, r.gauc, r.auc, r.logloss);
        }

        let mut curves: Vec<&CurveDoc> = g.curves.iter().collect();
        curves.sort_by_key(|c| c.variant);
        for c in curves {
            for p in &c.points {
                let _ = writeln!(
                    f3,
                    "{},{},{},{},{},{},{hash},{seed}",
                    c.variant, p.epoch, p.train_loss, p.gauc, p.auc, p.logloss
                );
            }
        }

        if let Some(base) = base {
            correlation_rows(g, base, hash, *seed, &mut f4a)?;
        }

        let mut buckets: Vec<&BucketDoc> = g.buckets.iter().collect();
        buckets.sort_by(|a, b| a.tag.cmp(&b.tag));
        for b in buckets {
            for r in &b.rows {
                let _ = writeln!(
                    f4b,
                    "{},{},{},{},{},{},{},{},{},{},{},{},{hash},{seed}",
                    b.variant,
                    r.bucket,
                    r.n_items,
                    r.n_records,
                    r.min_freq,
                    r.max_freq,
                    opt(r.auc_id),
                    opt(r.auc_mm),
                    opt(r.logloss_id),
                    opt(r.logloss_mm),
                    opt(r.auc_lift),
                    opt(r.logloss_lift)
                );
            }
        }

        let mut sweep: Vec<&CtrRunDoc> = g
            .ctr
            .iter()
            .filter(|d| d.tag.starts_with("make_e") && d.make_epochs.is_some())
            .collect();
        sweep.sort_by_key(|d| (d.make_epochs, d.report.variant));
        for d in sweep {
            let r = &d.report;
            let lift = base.map(|b| r.gauc - b);
            let _ = writeln!(
                f6,
                "{},{},{},{},{},{},{hash},{seed}",
                d.make_epochs.unwrap_or_default(),
                r.variant,
                r.gauc,
                r.auc,
                r.logloss,
                opt(lift)
            );
        }

        for m in &g.make {
            for h in &m.history {
                let _ = writeln!(mh, "{},{},{},{},{hash},{seed}", h.epoch, opt(h.gauc), opt(h.auc), opt(h.logloss));
            }
        }
    }

    let files = BTreeMap::from([
        (FILES[0].to_string(), t2),
        (FILES[1].to_string(), t3),
        (FILES[2].to_string(), f3),
        (FILES[3].to_string(), f4a),
        (FILES[4].to_string(), f4b),
        (FILES[5].to_string(), f6),
        (FILES[6].to_string(), mh),
        ("summary.md".to_string(), summary.clone()),
    ]);
    Ok(Report { files, summary })
}

/// Pairs each encoder checkpoint's retrieval accuracy with the GAUC lift of
/// the CTR run that used it. Correlation runs are tagged with the checkpoint
/// they used; the main table's run of the same variant counts too.
fn correlation_rows(g: &Group, base: f64, hash: &str, seed: u64, out: &mut String) -> Result<()> {
    let tagged: Vec<&CtrRunDoc> = g
        .ctr
        .iter()
        .filter(|d| d.reps.as_deref().is_some_and(|r| r == d.tag))
        .collect();
    let Some(variant) = tagged.first().map(|d| d.report.variant) else {
        return Ok(());
    };
    let mut lifts: BTreeMap<String, f64> = BTreeMap::new();
    for d in g.ctr.iter().filter(|d| d.report.variant == variant) {
        if let Some(r) = d.reps.as_ref().filter(|r| d.tag.is_empty() || **r == d.tag) {
            lifts.entry(r.clone()).or_insert(d.report.gauc - base);
        }
    }
    let accs: Vec<CheckpointAccuracy> = g
        .retrieval
        .iter()
        .filter(|r| lifts.contains_key(&r.checkpoint))
        .map(|r| CheckpointAccuracy {
            checkpoint: r.checkpoint.clone(),
            acc1: r.acc1,
            acc5: r.acc5,
        })
        .collect();
    lifts.retain(|k, _| accs.iter().any(|a| &a.checkpoint == k));
    if accs.is_empty() {
        return Ok(());
    }
    let table = export_correlation(&accs, &lifts)?;
    let rho = opt(table.spearman);
    for r in &table.rows {
        let _ = writeln!(out, "{},{},{},{},{rho},{hash},{seed}", r.checkpoint, r.acc1, r.acc5, r.gauc_lift);
    }
    Ok(())
}

pub fn write(report: &Report, out_dir: &Path) -> Result<()> {
    for (name, body) in &report.files {
        write_file(&out_dir.join(name), body.as_bytes())?;
    }
    Ok(())
}
