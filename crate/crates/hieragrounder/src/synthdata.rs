//! Synthetic grounding episodes.
//!
//! Each episode is a feature track with a few planted events. Every event
//! class owns a fixed random signature vector; event frames carry that
//! signature plus noise, background frames carry noise alone. Queries are
//! the class signature pushed through a fixed projection into the query
//! space, and the ground truth is the planted interval. Same seed, same
//! bytes.
//!
//! All generated values are quantized to f32 precision up front so the
//! dataset file (which stores f32 payloads) round-trips losslessly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"HGDATA1\n";
pub const DATASET_VERSION: u32 = 1;

// ── configuration ───────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    /// Frames per episode and feature widths of the two modalities.
    pub l0: usize,
    pub d_v: usize,
    pub d_q: usize,
    pub n_event_classes: usize,
    /// Relative draw weights of the short/medium/long duration buckets.
    pub bucket_weights: [f64; 3],
    pub noise_std: f64,
    pub events_per_episode: usize,
    pub queries_per_episode: usize,
    /// Query embeddings are this many tokens long.
    pub query_len: usize,
    /// Seeds the class signature table and the query-space projection,
    /// shared by every episode of a dataset.
    pub class_seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            l0: 256,
            d_v: 32,
            d_q: 16,
            n_event_classes: 8,
            bucket_weights: [1.0, 1.0, 1.0],
            noise_std: 0.1,
            events_per_episode: 3,
            queries_per_episode: 3,
            query_len: 3,
            class_seed: 0xC1A55,
        }
    }
}

/// Duration bucket bounds in tokens, inclusive. Long runs to l0/3, which
/// needs l0 >= 39 to be well formed.
pub fn bucket_range(bucket: usize, l0: usize) -> (usize, usize) {
    match bucket {
        0 => (1, 3),
        1 => (4, 12),
        _ => (13, l0 / 3),
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_v == 0 || self.d_q == 0 || self.l0 == 0 {
            return Err(Error::Config("generator dims must be positive".into()));
        }
        if self.n_event_classes == 0 {
            return Err(Error::Config("need at least one event class".into()));
        }
        if self.d_v < 4 * self.n_event_classes {
            return Err(Error::Config(format!(
                "d_v {} too small for {} classes; want d_v >= 4x classes so signatures stay near-orthogonal",
                self.d_v, self.n_event_classes
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise std must be >= 0".into()));
        }
        if self.events_per_episode == 0 || self.queries_per_episode == 0 || self.query_len == 0 {
            return Err(Error::Config("events, queries and query length must be >= 1".into()));
        }
        let mut total = 0.0;
        for (b, &w) in self.bucket_weights.iter().enumerate() {
            if !(w >= 0.0) {
                return Err(Error::Config("bucket weights must be >= 0".into()));
            }
            let (lo, hi) = bucket_range(b, self.l0);
            if w > 0.0 && (lo > hi || hi > self.l0) {
                return Err(Error::Config(format!(
                    "l0 {} cannot hold bucket {b} durations; raise l0 or zero that weight",
                    self.l0
                )));
            }
            total += w;
        }
        if total <= 0.0 {
            return Err(Error::Config("bucket weights must not all be zero".into()));
        }
        Ok(())
    }
}

// ── episodes ────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventMeta {
    pub class: usize,
    /// Token interval [start, end).
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug)]
pub struct Query {
    /// [query_len, d_q].
    pub embedding: Tensor,
    /// Ground-truth segment in frame units.
    pub gt: (f64, f64),
    pub class: usize,
}

#[derive(Clone, Debug)]
pub struct Episode {
    /// [l0, d_v].
    pub features: Tensor,
    pub queries: Vec<Query>,
    pub events: Vec<EventMeta>,
    pub seed: u64,
}

/// The per-class signature table and the video-to-query-space projection,
/// both fixed functions of `class_seed`.
pub struct ClassTable {
    /// Row per class, [classes, d_v].
    pub signatures: Vec<Vec<f64>>,
    /// [d_v][d_q], scaled by 1/sqrt(d_v).
    pub projection: Vec<Vec<f64>>,
}

fn quantize(x: f64) -> f64 {
    x as f32 as f64
}

pub fn class_table(cfg: &GenConfig) -> ClassTable {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.class_seed);
    let signatures = (0..cfg.n_event_classes)
        .map(|_| (0..cfg.d_v).map(|_| quantize(rng.sample(StandardNormal))).collect())
        .collect();
    let scale = 1.0 / (cfg.d_v as f64).sqrt();
    let projection = (0..cfg.d_v)
        .map(|_| {
            (0..cfg.d_q)
                .map(|_| quantize(rng.sample::<f64, _>(StandardNormal) * scale))
                .collect()
        })
        .collect();
    ClassTable { signatures, projection }
}

fn overlaps(a: (usize, usize), b: (usize, usize)) -> bool {
    a.0 < b.1 && b.0 < a.1
}

const PLACEMENT_RETRIES: usize = 200;

/// Plain-data episode used inside the parallel generator; tensors hold
/// non-Send graph nodes, so threads exchange raw buffers instead.
struct RawEpisode {
    features: Vec<f64>,
    queries: Vec<(Vec<f64>, (f64, f64), usize)>,
    events: Vec<EventMeta>,
    seed: u64,
}

fn wrap(cfg: &GenConfig, raw: RawEpisode) -> Result<Episode> {
    Ok(Episode {
        features: Tensor::from_vec(raw.features, &[cfg.l0, cfg.d_v])?,
        queries: raw
            .queries
            .into_iter()
            .map(|(emb, gt, class)| {
                Ok(Query {
                    embedding: Tensor::from_vec(emb, &[cfg.query_len, cfg.d_q])?,
                    gt,
                    class,
                })
            })
            .collect::<Result<_>>()?,
        events: raw.events,
        seed: raw.seed,
    })
}

/// Generates one episode. Event placement re-draws bucket, duration and
/// start until the interval clears the existing ones; persistent failure
/// is an error rather than an overlapping dataset.
pub fn gen_episode(cfg: &GenConfig, seed: u64) -> Result<Episode> {
    cfg.validate()?;
    wrap(cfg, gen_episode_raw(cfg, seed)?)
}

fn gen_episode_raw(cfg: &GenConfig, seed: u64) -> Result<RawEpisode> {
    let table = class_table(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let weight_total: f64 = cfg.bucket_weights.iter().sum();
    let mut events: Vec<EventMeta> = Vec::with_capacity(cfg.events_per_episode);
    for _ in 0..cfg.events_per_episode {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let mut pick = rng.gen_range(0.0..weight_total);
            let mut bucket = 0;
            for (b, &w) in cfg.bucket_weights.iter().enumerate() {
                if pick < w {
                    bucket = b;
                    break;
                }
                pick -= w;
            }
            let (lo, hi) = bucket_range(bucket, cfg.l0);
            let dur = rng.gen_range(lo..=hi);
            let start = rng.gen_range(0..=cfg.l0 - dur);
            let cand = (start, start + dur);
            if events.iter().all(|e| !overlaps(cand, (e.start, e.end))) {
                events.push(EventMeta {
                    class: rng.gen_range(0..cfg.n_event_classes),
                    start: cand.0,
                    end: cand.1,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "could not place {} non-overlapping events in {} tokens; use fewer events or a longer episode",
                cfg.events_per_episode, cfg.l0
            )));
        }
    }

    let mut feat = vec![0.0f64; cfg.l0 * cfg.d_v];
    for v in feat.iter_mut() {
        *v = quantize(rng.sample::<f64, _>(StandardNormal) * cfg.noise_std);
    }
    for ev in &events {
        let sig = &table.signatures[ev.class];
        for t in ev.start..ev.end {
            for j in 0..cfg.d_v {
                feat[t * cfg.d_v + j] = quantize(sig[j] + feat[t * cfg.d_v + j]);
            }
        }
    }

    let mut queries = Vec::with_capacity(cfg.queries_per_episode);
    for q in 0..cfg.queries_per_episode {
        let ev = &events[q % events.len()];
        let sig = &table.signatures[ev.class];
        let mut projected = vec![0.0f64; cfg.d_q];
        for (j, p) in projected.iter_mut().enumerate() {
            *p = (0..cfg.d_v).map(|i| sig[i] * table.projection[i][j]).sum();
        }
        let mut emb = vec![0.0f64; cfg.query_len * cfg.d_q];
        for (k, e) in emb.iter_mut().enumerate() {
            let noise: f64 = rng.sample::<f64, _>(StandardNormal) * cfg.noise_std;
            *e = quantize(projected[k % cfg.d_q] + noise);
        }
        queries.push((emb, (ev.start as f64, ev.end as f64), ev.class));
    }

    Ok(RawEpisode { features: feat, queries, events, seed })
}

/// Episode i gets seed `master_seed + i`; generation runs in parallel and
/// the output order is by index, so the dataset is reproducible.
pub fn gen_dataset(cfg: &GenConfig, master_seed: u64, episodes: usize) -> Result<Vec<Episode>> {
    cfg.validate()?;
    let raw: Vec<RawEpisode> = (0..episodes)
        .into_par_iter()
        .map(|i| gen_episode_raw(cfg, master_seed.wrapping_add(i as u64)))
        .collect::<Result<_>>()?;
    raw.into_iter().map(|r| wrap(cfg, r)).collect()
}

// ── file format ─────────────────────────────────────────────────────────
//
// Byte layout, all integers little-endian:
//   magic  "HGDATA1\n"
//   u32    header length
//   bytes  header JSON: {"version", "config": GenConfig, "episodes": N}
//   then per episode:
//     u64  seed
//     u32  event count; per event: u32 class, u64 start, u64 end
//     u32  rows, u32 cols; rows*cols f32 feature payload
//     u32  query count; per query:
//       u32 class, f64 gt_start, f64 gt_end,
//       u32 rows, u32 cols; rows*cols f32 embedding payload

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    version: u32,
    config: GenConfig,
    episodes: usize,
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f32s(w: &mut impl Write, t: &Tensor) -> Result<()> {
    let shape = t.shape();
    write_u32(w, shape[0] as u32)?;
    write_u32(w, shape[1] as u32)?;
    for v in t.to_vec() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format(format!("dataset truncated while reading {what}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read, what: &str) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(f64::from_le_bytes(b))
}

fn read_f32s(r: &mut impl Read, what: &str) -> Result<Tensor> {
    let rows = read_u32(r, what)? as usize;
    let cols = read_u32(r, what)? as usize;
    let mut buf = vec![0u8; 4];
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        read_exact(r, &mut buf, what)?;
        data.push(f32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as f64);
    }
    Tensor::from_vec(data, &[rows, cols])
}

pub fn write_dataset(path: &Path, cfg: &GenConfig, episodes: &[Episode]) -> Result<()> {
    if episodes.is_empty() {
        return Err(Error::Config("refusing to write an empty dataset".into()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    let header = serde_json::to_vec(&DatasetHeader {
        version: DATASET_VERSION,
        config: *cfg,
        episodes: episodes.len(),
    })
    .map_err(|e| Error::Format(format!("dataset header: {e}")))?;
    write_u32(&mut w, header.len() as u32)?;
    w.write_all(&header)?;
    for ep in episodes {
        write_u64(&mut w, ep.seed)?;
        write_u32(&mut w, ep.events.len() as u32)?;
        for ev in &ep.events {
            write_u32(&mut w, ev.class as u32)?;
            write_u64(&mut w, ev.start as u64)?;
            write_u64(&mut w, ev.end as u64)?;
        }
        write_f32s(&mut w, &ep.features)?;
        write_u32(&mut w, ep.queries.len() as u32)?;
        for q in &ep.queries {
            write_u32(&mut w, q.class as u32)?;
            w.write_all(&q.gt.0.to_le_bytes())?;
            w.write_all(&q.gt.1.to_le_bytes())?;
            write_f32s(&mut w, &q.embedding)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<(GenConfig, Vec<Episode>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format(format!(
            "bad dataset magic {:?}; expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(DATASET_MAGIC)
        )));
    }
    let header_len = read_u32(&mut r, "header length")? as usize;
    let mut header = vec![0u8; header_len];
    read_exact(&mut r, &mut header, "header")?;
    let header: DatasetHeader = serde_json::from_slice(&header)
        .map_err(|e| Error::Format(format!("dataset header: {e}")))?;
    if header.version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "dataset version {} unsupported (expected {DATASET_VERSION})",
            header.version
        )));
    }
    if header.episodes == 0 {
        return Err(Error::Format("empty dataset".into()));
    }
    let mut episodes = Vec::with_capacity(header.episodes);
    for _ in 0..header.episodes {
        let seed = read_u64(&mut r, "episode seed")?;
        let n_events = read_u32(&mut r, "event count")? as usize;
        let mut events = Vec::with_capacity(n_events);
        for _ in 0..n_events {
            events.push(EventMeta {
                class: read_u32(&mut r, "event class")? as usize,
                start: read_u64(&mut r, "event start")? as usize,
                end: read_u64(&mut r, "event end")? as usize,
            });
        }
        let features = read_f32s(&mut r, "features")?;
        let n_queries = read_u32(&mut r, "query count")? as usize;
        let mut queries = Vec::with_capacity(n_queries);
        for _ in 0..n_queries {
            let class = read_u32(&mut r, "query class")? as usize;
            let gt = (read_f64(&mut r, "gt start")?, read_f64(&mut r, "gt end")?);
            queries.push(Query { embedding: read_f32s(&mut r, "query embedding")?, gt, class });
        }
        episodes.push(Episode { features, queries, events, seed });
    }
    Ok((header.config, episodes))
}
