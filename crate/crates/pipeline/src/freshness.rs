use serde::{Deserialize, Serialize};

use crate::pipeline::Commit;

/// Commits with `from_us <= t_ready < to_us`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub from_us: u64,
    pub to_us: u64,
}

/// Latency percentiles of `t_ready - t_introduced`, in microseconds. All
/// percentile fields are `None` when the window holds no commits.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FreshnessReport {
    pub count: usize,
    pub p50_us: Option<u64>,
    pub p95_us: Option<u64>,
    pub max_us: Option<u64>,
}

impl FreshnessReport {
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

/// Nearest-rank percentiles over the commits inside `window` (all commits when
/// `None`).
pub fn freshness_report(commits: &[Commit], window: Option<Window>) -> FreshnessReport {
    let mut lat: Vec<u64> = commits
        .iter()
        .filter(|c| window.is_none_or(|w| c.t_ready_us >= w.from_us && c.t_ready_us < w.to_us))
        .map(|c| c.t_ready_us.saturating_sub(c.t_introduced_us))
        .collect();
    if lat.is_empty() {
        return FreshnessReport::default();
    }
    lat.sort_unstable();
    let rank = |p: f64| {
        let k = ((p * lat.len() as f64).ceil() as usize).clamp(1, lat.len());
        lat[k - 1]
    };
    FreshnessReport {
        count: lat.len(),
        p50_us: Some(rank(0.50)),
        p95_us: Some(rank(0.95)),
        max_us: lat.last().copied(),
    }
}
