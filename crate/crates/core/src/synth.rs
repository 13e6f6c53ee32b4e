//! Synthetic catalog, search-purchase triplets and impression logs with a
//! known click model.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use mmrec_tensor::sigmoid;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::rng_for;
use crate::reps::{dot, Embeddings};

pub const DAY_SECONDS: u64 = 86_400;
pub const PAD: i64 = -1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CatalogConfig {
    pub n_items: usize,
    pub n_clusters: usize,
    pub d_lat: usize,
    pub d_raw: usize,
    pub zipf_exponent: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for CatalogConfig {
    fn default() -> Self {
        Self {
            n_items: 2000,
            n_clusters: 20,
            d_lat: 16,
            d_raw: 32,
            zipf_exponent: 1.0,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Item {
    pub item_id: u64,
    pub category_id: u64,
    pub modal_feature: Vec<f32>,
    pub frequency_weight: f64,
}

/// Ground-truth semantics of one item; written apart from the item file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentRecord {
    pub item_id: u64,
    pub latent: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct Catalog {
    pub items: Vec<Item>,
    /// Row `i` is the unit latent of item `i`.
    pub latents: Embeddings,
    pub centroids: Embeddings,
    pub n_clusters: usize,
}

impl Catalog {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Item ids per category.
    pub fn by_category(&self) -> Vec<Vec<usize>> {
        by_category(&self.items, self.n_clusters)
    }

    pub fn modal_features(&self) -> Embeddings {
        modal_features(&self.items)
    }

    pub fn latent_records(&self) -> Vec<LatentRecord> {
        self.items
            .iter()
            .map(|it| LatentRecord {
                item_id: it.item_id,
                latent: self.latents.row(it.item_id as usize).to_vec(),
            })
            .collect()
    }
}

pub fn by_category(items: &[Item], n_clusters: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); n_clusters];
    for it in items {
        out[it.category_id as usize].push(it.item_id as usize);
    }
    out
}

pub fn modal_features(items: &[Item]) -> Embeddings {
    let rows: Vec<Vec<f32>> = items.iter().map(|it| it.modal_feature.clone()).collect();
    Embeddings::from_rows(&rows).expect("all items share the feature width")
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; n];
    }
    let d = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| d.sample(rng)).collect()
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Zipf weight of a 1-based rank.
pub fn zipf_weight(rank: usize, exponent: f64) -> f64 {
    (rank as f64).powf(-exponent)
}

/// Items are assigned to categories round-robin and to Zipf ranks by a random
/// permutation, so popularity is independent of category.
pub fn gen_catalog(cfg: &CatalogConfig) -> Result<Catalog> {
    let CatalogConfig {
        n_items,
        n_clusters,
        d_lat,
        d_raw,
        zipf_exponent,
        noise_sigma,
        seed,
    } = *cfg;
    if n_items == 0 || n_clusters == 0 || n_clusters > n_items {
        return Err(CoreError::Config(format!(
            "need 1 <= n_clusters <= n_items, got {n_clusters} clusters for {n_items} items"
        )));
    }
    if d_lat < 2 || d_raw < 2 {
        return Err(CoreError::Config("d_lat and d_raw must be at least 2".into()));
    }
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) || !zipf_exponent.is_finite() {
        return Err(CoreError::Config("noise_sigma and zipf_exponent must be finite, noise_sigma >= 0".into()));
    }

    let mut rng = rng_for(seed, "catalog.centroids");
    let centroids: Vec<Vec<f64>> = (0..n_clusters)
        .map(|_| normalized(&gaussian(&mut rng, d_lat, 1.0)))
        .collect();

    let mut rng = rng_for(seed, "catalog.map");
    let map = gaussian(&mut rng, d_raw * d_lat, 1.0 / (d_lat as f64).sqrt());

    let mut rng = rng_for(seed, "catalog.ranks");
    let mut ranks: Vec<usize> = (1..=n_items).collect();
    ranks.shuffle(&mut rng);

    let mut rng = rng_for(seed, "catalog.items");
    let mut items = Vec::with_capacity(n_items);
    let mut latents = Vec::with_capacity(n_items * d_lat);
    for (i, &rank) in ranks.iter().enumerate() {
        let category = i % n_clusters;
        let c = &centroids[category];
        let latent = if noise_sigma == 0.0 {
            c.clone()
        } else {
            let noise = gaussian(&mut rng, d_lat, noise_sigma);
            normalized(&c.iter().zip(&noise).map(|(a, b)| a + b).collect::<Vec<_>>())
        };
        let noise = gaussian(&mut rng, d_raw, noise_sigma / 2.0);
        let modal_feature = (0..d_raw)
            .map(|r| {
                let row = &map[r * d_lat..(r + 1) * d_lat];
                (row.iter().zip(&latent).map(|(m, l)| m * l).sum::<f64>() + noise[r]) as f32
            })
            .collect();
        latents.extend(latent.iter().map(|&v| v as f32));
        items.push(Item {
            item_id: i as u64,
            category_id: category as u64,
            modal_feature,
            frequency_weight: zipf_weight(rank, zipf_exponent),
        });
    }
    let centroid_data = centroids.iter().flatten().map(|&v| v as f32).collect();
    Ok(Catalog {
        items,
        latents: Embeddings::new(d_lat, latents)?,
        centroids: Embeddings::new(d_lat, centroid_data)?,
        n_clusters,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletSample {
    pub query: Vec<f32>,
    pub positive: Vec<f32>,
    pub hard_negative: Vec<f32>,
    pub positive_item_id: u64,
    pub negative_item_id: u64,
}

#[derive(Clone, Debug, Default)]
pub struct TripletSet {
    pub samples: Vec<TripletSample>,
    /// Draws dropped because the purchased item's category had no other item.
    pub skipped: usize,
}

/// Purchases are drawn by item frequency; the query is a noisy view of the
/// purchased item's features and the hard negative another item of the same
/// category.
pub fn gen_triplets(items: &[Item], n_clusters: usize, n_samples: usize, query_noise: f64, seed: u64) -> Result<TripletSet> {
    if items.is_empty() {
        return Err(CoreError::Config("empty catalog".into()));
    }
    let cats = by_category(items, n_clusters);
    let weights = WeightedIndex::new(items.iter().map(|it| it.frequency_weight))
        .map_err(|e| CoreError::Config(format!("frequency weights: {e}")))?;
    let mut rng = rng_for(seed, "triplets");
    let mut out = TripletSet::default();
    for _ in 0..n_samples {
        let pos = &items[weights.sample(&mut rng)];
        let peers = &cats[pos.category_id as usize];
        if peers.len() < 2 {
            out.skipped += 1;
            continue;
        }
        let mut neg = peers[rng.random_range(0..peers.len() - 1)];
        if neg == pos.item_id as usize {
            neg = peers[peers.len() - 1];
        }
        let noise = gaussian(&mut rng, pos.modal_feature.len(), query_noise);
        let query = pos
            .modal_feature
            .iter()
            .zip(&noise)
            .map(|(&x, &e)| x + e as f32)
            .collect();
        out.samples.push(TripletSample {
            query,
            positive: pos.modal_feature.clone(),
            hard_negative: items[neg].modal_feature.clone(),
            positive_item_id: pos.item_id,
            negative_item_id: neg as u64,
        });
    }
    if out.skipped > 0 {
        warn!("skipped {} triplets from single-item categories", out.skipped);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImpressionConfig {
    pub n_users: usize,
    pub n_records: usize,
    pub l_max: usize,
    pub w_id: f64,
    pub w_sem: f64,
    pub bias: f64,
    /// Records are spread evenly over this many days; the last one is held out.
    pub n_days: usize,
    pub prefs_per_user: usize,
    /// Chance that a target comes from the user's preferred clusters rather
    /// than uniformly from the catalog.
    pub p_preferred: f64,
    /// Chance that a behavior is uniform over the catalog instead of preferred.
    pub behavior_noise: f64,
    /// Share of the catalog, lowest frequency first, treated as cold.
    pub cold_fraction: f64,
    /// Acceptance rate of cold items in training-day records.
    pub cold_train_rate: f64,
    pub seed: u64,
}

impl Default for ImpressionConfig {
    fn default() -> Self {
        Self {
            n_users: 1000,
            n_records: 250_000,
            l_max: 50,
            w_id: 1.0,
            w_sem: 1.0,
            bias: -3.3,
            n_days: 5,
            prefs_per_user: 3,
            p_preferred: 0.5,
            behavior_noise: 0.1,
            cold_fraction: 0.0,
            cold_train_rate: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImpressionRecord {
    pub user_id: u64,
    /// Oldest first; entries equal to `-1` are padding.
    pub behavior_seq: Vec<i64>,
    pub target_item_id: u64,
    pub label: u8,
    pub timestamp: u64,
}

impl ImpressionRecord {
    pub fn behaviors(&self) -> impl Iterator<Item = i64> + '_ {
        self.behavior_seq.iter().copied().filter(|&i| i != PAD)
    }

    pub fn day(&self) -> u64 {
        self.timestamp / DAY_SECONDS
    }
}

/// What the click model saw for one record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClickTruth {
    pub prob: f64,
    pub id_effect: f64,
    pub mean_sim: f64,
}

#[derive(Clone, Debug)]
pub struct ImpressionLog {
    pub records: Vec<ImpressionRecord>,
    pub truth: Vec<ClickTruth>,
    /// Per-item random click propensity.
    pub id_effects: Vec<f64>,
}

struct ClusterSampler {
    items: Vec<usize>,
    weights: WeightedIndex<f64>,
}

/// Labels follow `Bernoulli(sigmoid(bias + w_id * idEffect + w_sem * meanSim))`
/// with `meanSim` the mean latent dot product between target and behaviors
/// (0 for an empty sequence).
pub fn gen_impressions(catalog: &Catalog, cfg: &ImpressionConfig) -> Result<ImpressionLog> {
    for (name, v) in [
        ("w_id", cfg.w_id),
        ("w_sem", cfg.w_sem),
        ("bias", cfg.bias),
        ("p_preferred", cfg.p_preferred),
        ("behavior_noise", cfg.behavior_noise),
        ("cold_fraction", cfg.cold_fraction),
        ("cold_train_rate", cfg.cold_train_rate),
    ] {
        if !v.is_finite() {
            return Err(CoreError::Config(format!("{name} must be finite")));
        }
    }
    for (name, v) in [
        ("p_preferred", cfg.p_preferred),
        ("behavior_noise", cfg.behavior_noise),
        ("cold_fraction", cfg.cold_fraction),
        ("cold_train_rate", cfg.cold_train_rate),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(CoreError::Config(format!("{name} must lie in [0, 1]")));
        }
    }
    if cfg.n_users == 0 || cfg.n_days == 0 || catalog.is_empty() {
        return Err(CoreError::Config("need users, days and a non-empty catalog".into()));
    }
    let n_items = catalog.len();
    let n_clusters = catalog.n_clusters;
    let prefs = cfg.prefs_per_user.clamp(1, n_clusters);

    let mut rng = rng_for(cfg.seed, "impressions.id_effect");
    let id_effects = gaussian(&mut rng, n_items, 1.0);

    let samplers: Vec<Option<ClusterSampler>> = catalog
        .by_category()
        .into_iter()
        .map(|items| {
            let weights = WeightedIndex::new(items.iter().map(|&i| catalog.items[i].frequency_weight)).ok()?;
            Some(ClusterSampler { items, weights })
        })
        .collect();

    let mut cold = vec![false; n_items];
    let n_cold = (cfg.cold_fraction * n_items as f64).floor() as usize;
    let mut by_freq: Vec<usize> = (0..n_items).collect();
    by_freq.sort_by(|&a, &b| {
        catalog.items[a]
            .frequency_weight
            .total_cmp(&catalog.items[b].frequency_weight)
            .then(a.cmp(&b))
    });
    for &i in &by_freq[..n_cold] {
        cold[i] = true;
    }

    let mut rng = rng_for(cfg.seed, "impressions.users");
    let users: Vec<(Vec<usize>, WeightedIndex<f64>)> = (0..cfg.n_users)
        .map(|_| {
            let clusters: Vec<usize> = rand::seq::index::sample(&mut rng, n_clusters, prefs).into_vec();
            let w: Vec<f64> = (0..prefs).map(|_| rng.random_range(0.2..1.0)).collect();
            (clusters, WeightedIndex::new(w).expect("positive weights"))
        })
        .collect();

    let mut rng = rng_for(cfg.seed, "impressions.records");
    let draw_preferred = |rng: &mut ChaCha8Rng, user: usize| -> usize {
        loop {
            let (clusters, w) = &users[user];
            if let Some(s) = &samplers[clusters[w.sample(rng)]] {
                return s.items[s.weights.sample(rng)];
            }
        }
    };
    let draw = |rng: &mut ChaCha8Rng, user: usize, p_uniform: f64, train_day: bool| -> usize {
        loop {
            let item = if rng.random_bool(p_uniform) {
                rng.random_range(0..n_items)
            } else {
                draw_preferred(rng, user)
            };
            if !(train_day && cold[item]) || rng.random_bool(cfg.cold_train_rate) {
                return item;
            }
        }
    };

    let per_day = cfg.n_records.div_ceil(cfg.n_days).max(1);
    let mut records = Vec::with_capacity(cfg.n_records);
    let mut truth = Vec::with_capacity(cfg.n_records);
    for r in 0..cfg.n_records {
        let day = (r * cfg.n_days / cfg.n_records.max(1)) as u64;
        let train_day = day + 1 < cfg.n_days as u64;
        let within = (r % per_day) as u64;
        let timestamp = day * DAY_SECONDS + within * (DAY_SECONDS / per_day as u64).max(1);
        let user = rng.random_range(0..cfg.n_users);
        let len = rng.random_range(0..=cfg.l_max);
        let seq: Vec<usize> = (0..len)
            .map(|_| draw(&mut rng, user, cfg.behavior_noise, train_day))
            .collect();
        let target = draw(&mut rng, user, 1.0 - cfg.p_preferred, train_day);
        let tl = catalog.latents.row(target);
        let mean_sim = if seq.is_empty() {
            0.0
        } else {
            seq.iter()
                .map(|&i| dot(tl, catalog.latents.row(i)) as f64)
                .sum::<f64>()
                / seq.len() as f64
        };
        let id_effect = id_effects[target];
        let prob = sigmoid(cfg.bias + cfg.w_id * id_effect + cfg.w_sem * mean_sim);
        let label = rng.random_bool(prob) as u8;
        records.push(ImpressionRecord {
            user_id: user as u64,
            behavior_seq: seq.iter().map(|&i| i as i64).collect(),
            target_item_id: target as u64,
            label,
            timestamp,
        });
        truth.push(ClickTruth {
            prob,
            id_effect,
            mean_sim,
        });
    }
    Ok(ImpressionLog {
        records,
        truth,
        id_effects,
    })
}

/// Splits off the last day present in `records` as the evaluation set;
/// returns `(train_indices, eval_indices)`.
pub fn split_last_day(records: &[ImpressionRecord]) -> (Vec<usize>, Vec<usize>) {
    let last = records.iter().map(ImpressionRecord::day).max().unwrap_or(0);
    (0..records.len()).partition(|&i| records[i].day() < last)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r).map_err(|e| CoreError::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads one JSON value per line. Blank lines are ignored; a malformed line
/// fails with its 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| CoreError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(v);
    }
    Ok(out)
}
