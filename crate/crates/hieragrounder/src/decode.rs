//! Moment decoding and retrieval metrics.
//!
//! Head outputs become interval proposals, Gaussian soft suppression ranks
//! them across pyramid levels, and recall-k at tIoU thresholds scores the
//! ranked lists. Everything here is pure; callers parallelize per query.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One candidate moment in original frame units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub t_s: f64,
    pub t_e: f64,
    pub score: f64,
    /// Pyramid level and token index that produced it.
    pub level: usize,
    pub token: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub t_start: f64,
    pub t_end: f64,
}

/// Expands per-level token scores and boundary offsets into proposals.
///
/// Token t at a level with effective stride S proposes the interval
/// (S*(t - d_s), S*(t + d_e)), clamped to [0, l0]. Tokens scoring below
/// `score_floor` are skipped and intervals that collapse under clamping
/// are dropped.
pub fn make_proposals(
    scores: &[Tensor],
    offsets: &[Tensor],
    strides: &[usize],
    l0: usize,
    score_floor: f64,
) -> Result<Vec<Proposal>> {
    if scores.len() != offsets.len() || scores.len() != strides.len() {
        return Err(Error::Shape(format!(
            "make_proposals: {} score levels, {} offset levels, {} strides",
            scores.len(),
            offsets.len(),
            strides.len()
        )));
    }
    let mut out = Vec::new();
    for (level, ((p, d), &stride)) in scores.iter().zip(offsets).zip(strides).enumerate() {
        let l = p.rows();
        if p.shape() != [l, 1] || d.shape() != [l, 2] {
            return Err(Error::Shape(format!(
                "make_proposals: level {level} wants scores [L,1] and offsets [L,2], got {:?} and {:?}",
                p.shape(),
                d.shape()
            )));
        }
        let s = stride as f64;
        let pv = p.to_vec();
        let dv = d.to_vec();
        for t in 0..l {
            let score = pv[t];
            if score < score_floor {
                continue;
            }
            let t_s = (s * (t as f64 - dv[2 * t])).clamp(0.0, l0 as f64);
            let t_e = (s * (t as f64 + dv[2 * t + 1])).clamp(0.0, l0 as f64);
            if t_e > t_s {
                out.push(Proposal { t_s, t_e, score, level, token: t });
            }
        }
    }
    Ok(out)
}

/// Temporal intersection over union of two intervals.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    for (name, iv) in [("first", a), ("second", b)] {
        if !(iv.0 < iv.1) {
            return Err(Error::Numeric(format!(
                "tiou: degenerate {name} interval ({}, {})",
                iv.0, iv.1
            )));
        }
    }
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    Ok(inter / union)
}

/// Selection order for equal scores: earlier start, then lower level, then
/// lower token index. Keeps metric runs reproducible.
fn better(a: &Proposal, b: &Proposal) -> bool {
    if a.score != b.score {
        return a.score > b.score;
    }
    if a.t_s != b.t_s {
        return a.t_s < b.t_s;
    }
    (a.level, a.token) < (b.level, b.token)
}

/// Gaussian soft suppression over the multi-scale proposal set.
///
/// Repeatedly keeps the highest-scoring remaining proposal and decays every
/// other score by exp(-tiou^2 / sigma); the kept order, truncated to
/// `top_k`, is the ranking.
pub fn soft_nms(props: &[Proposal], sigma: f64, top_k: usize) -> Result<Vec<Proposal>> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("soft_nms: sigma must be positive, got {sigma}")));
    }
    let mut remaining = props.to_vec();
    let mut kept = Vec::with_capacity(remaining.len().min(top_k));
    while !remaining.is_empty() && kept.len() < top_k {
        let mut best = 0;
        for i in 1..remaining.len() {
            if better(&remaining[i], &remaining[best]) {
                best = i;
            }
        }
        let pick = remaining.swap_remove(best);
        for other in &mut remaining {
            let o = tiou((pick.t_s, pick.t_e), (other.t_s, other.t_e))?;
            other.score *= (-o * o / sigma).exp();
        }
        kept.push(pick);
    }
    Ok(kept)
}

/// Fraction of queries whose top-k ranked proposals contain one with
/// tiou >= theta against the ground truth. A query with no predictions
/// counts as a miss.
pub fn recall_at(preds: &[Vec<Proposal>], gt: &[GroundTruth], k: usize, theta: f64) -> Result<f64> {
    if preds.len() != gt.len() {
        return Err(Error::Shape(format!(
            "recall_at: {} prediction lists for {} ground truths",
            preds.len(),
            gt.len()
        )));
    }
    if k == 0 {
        return Err(Error::Config("recall_at: k must be >= 1".into()));
    }
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::Config(format!("recall_at: theta must be in (0,1), got {theta}")));
    }
    if gt.is_empty() {
        return Err(Error::Config("recall_at: no queries".into()));
    }
    let mut hits = 0usize;
    for (ranked, g) in preds.iter().zip(gt) {
        let hit = ranked.iter().take(k).try_fold(false, |acc, p| {
            Ok::<bool, Error>(acc || tiou((p.t_s, p.t_e), (g.t_start, g.t_end))? >= theta)
        })?;
        if hit {
            hits += 1;
        }
    }
    Ok(hits as f64 / gt.len() as f64)
}

/// The standard reporting grid: recall at k in {1, 5} and theta in
/// {0.3, 0.5}, plus their average.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RecallTable {
    pub r1_03: f64,
    pub r1_05: f64,
    pub r5_03: f64,
    pub r5_05: f64,
    pub average: f64,
}

pub fn recall_table(preds: &[Vec<Proposal>], gt: &[GroundTruth]) -> Result<RecallTable> {
    let r1_03 = recall_at(preds, gt, 1, 0.3)?;
    let r1_05 = recall_at(preds, gt, 1, 0.5)?;
    let r5_03 = recall_at(preds, gt, 5, 0.3)?;
    let r5_05 = recall_at(preds, gt, 5, 0.5)?;
    Ok(RecallTable {
        r1_03,
        r1_05,
        r5_03,
        r5_05,
        average: (r1_03 + r1_05 + r5_03 + r5_05) / 4.0,
    })
}

impl RecallTable {
    pub fn format_row(&self, label: &str) -> String {
        format!(
            "{label:<14} R1@0.3 {:.4}  R1@0.5 {:.4}  R5@0.3 {:.4}  R5@0.5 {:.4}  avg {:.4}",
            self.r1_03, self.r1_05, self.r5_03, self.r5_05, self.average
        )
    }
}

/// One dumped record per query: id plus the ranked (t_s, t_e, score) list.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub query: u64,
    pub moments: Vec<(f64, f64, f64)>,
}

impl PredictionRecord {
    pub fn from_ranked(query: u64, ranked: &[Proposal]) -> PredictionRecord {
        PredictionRecord {
            query,
            moments: ranked.iter().map(|p| (p.t_s, p.t_e, p.score)).collect(),
        }
    }
}

/// Writes one JSON record per line.
pub fn write_predictions(w: &mut impl Write, records: &[PredictionRecord]) -> Result<()> {
    for rec in records {
        let line = serde_json::to_string(rec)
            .map_err(|e| Error::Format(format!("prediction record: {e}")))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn level(scores: &[f64], offsets: &[(f64, f64)]) -> (Tensor, Tensor) {
        let l = scores.len();
        let s = Tensor::from_vec(scores.to_vec(), &[l, 1]).unwrap();
        let d = Tensor::from_vec(
            offsets.iter().flat_map(|&(a, b)| [a, b]).collect(),
            &[l, 2],
        )
        .unwrap();
        (s, d)
    }

    #[test]
    fn proposal_formula_matches_the_hand_case() {
        let (s, d) = level(
            &[0.5, 0.5, 0.5, 0.5, 0.9],
            &[(0.2, 0.2); 5].map(|_| (0.2, 0.2)),
        );
        let mut dv = d.to_vec();
        dv[8] = 1.0;
        dv[9] = 2.0;
        let d = Tensor::from_vec(dv, &[5, 2]).unwrap();
        let props = make_proposals(&[s], &[d], &[2], 20, 0.1).unwrap();
        let p = props.iter().find(|p| p.token == 4).unwrap();
        assert_eq!((p.t_s, p.t_e), (6.0, 12.0));
        assert_eq!(p.score, 0.9);
    }

    #[test]
    fn zero_length_and_low_score_proposals_are_dropped() {
        let (s, d) = level(&[0.5, 0.04], &[(0.0, 0.0), (0.5, 0.5)]);
        let props = make_proposals(&[s.clone(), s.clone()], &[d.clone(), d.clone()], &[1, 2], 10, 0.1).unwrap();
        // token 0 collapses to zero length on both levels; token 1 is under the floor
        assert!(props.is_empty());
        let props = make_proposals(&[s], &[d], &[1], 10, 1.0).unwrap();
        assert!(props.is_empty(), "floor 1.0 filters everything");
    }

    #[test]
    fn proposals_are_clamped_to_the_video() {
        let (s, d) = level(&[0.8], &[(5.0, 50.0)]);
        let props = make_proposals(&[s], &[d], &[2], 12, 0.1).unwrap();
        assert_eq!((props[0].t_s, props[0].t_e), (0.0, 12.0));
        // level count mismatch is a shape error
        let (s2, d2) = level(&[0.8], &[(1.0, 1.0)]);
        assert!(make_proposals(&[s2], &[d2], &[1, 2], 12, 0.1).is_err());
    }

    #[test]
    fn tiou_worked_cases() {
        assert_eq!(tiou((2.0, 5.0), (2.0, 5.0)).unwrap(), 1.0);
        assert_eq!(tiou((0.0, 1.0), (3.0, 4.0)).unwrap(), 0.0);
        assert!((tiou((0.0, 2.0), (1.0, 3.0)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(tiou((2.0, 2.0), (0.0, 1.0)).is_err());
        assert!(tiou((0.0, 1.0), (3.0, 2.0)).is_err());
    }

    #[test]
    fn disjoint_proposals_keep_their_scores_in_score_order() {
        let props: Vec<Proposal> = (0..4)
            .map(|i| Proposal {
                t_s: 10.0 * i as f64,
                t_e: 10.0 * i as f64 + 5.0,
                score: (i as f64 + 1.0) * 0.25,
                level: 0,
                token: i,
            })
            .collect();
        let ranked = soft_nms(&props, 0.5, 10).unwrap();
        let scores: Vec<f64> = ranked.iter().map(|p| p.score).collect();
        // zero overlap means a decay factor of exactly one
        assert_eq!(scores, vec![1.0, 0.75, 0.5, 0.25]);
    }

    #[test]
    fn identical_intervals_decay_by_the_worked_factor() {
        let a = Proposal { t_s: 1.0, t_e: 4.0, score: 0.9, level: 0, token: 0 };
        let b = Proposal { t_s: 1.0, t_e: 4.0, score: 0.8, level: 0, token: 1 };
        let ranked = soft_nms(&[a, b], 0.5, 5).unwrap();
        assert_eq!(ranked[0].score, 0.9);
        let want = 0.8 * (-2.0f64).exp();
        assert!((ranked[1].score - want).abs() < 1e-15, "{} vs {want}", ranked[1].score);
        assert!((want - 0.1083).abs() < 5e-5);
    }

    #[test]
    fn suppression_never_raises_a_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let props: Vec<Proposal> = (0..30)
            .map(|i| {
                let t_s = rng.gen_range(0.0..50.0);
                Proposal {
                    t_s,
                    t_e: t_s + rng.gen_range(0.5..20.0),
                    score: rng.gen_range(0.05..1.0),
                    level: i % 3,
                    token: i,
                }
            })
            .collect();
        let ranked = soft_nms(&props, 0.5, 30).unwrap();
        for kept in &ranked {
            let orig = props.iter().find(|p| p.token == kept.token).unwrap();
            assert!(kept.score <= orig.score + 1e-15);
        }
        assert_eq!(ranked.len(), 30);
    }

    #[test]
    fn ties_break_toward_earlier_starts_then_lower_levels() {
        let mk = |t_s: f64, level: usize, token: usize| Proposal {
            t_s,
            t_e: t_s + 10.0,
            score: 0.7,
            level,
            token,
        };
        // t_s 3 pair is picked before the disjoint t_s 50 one; within the
        // pair the lower level wins, and its twin is decayed below 0.7
        let ranked = soft_nms(&[mk(50.0, 0, 1), mk(3.0, 2, 2), mk(3.0, 0, 3)], 0.5, 3).unwrap();
        let order: Vec<usize> = ranked.iter().map(|p| p.token).collect();
        assert_eq!(order, vec![3, 1, 2]);
        // identical intervals, levels apart: token index is the last resort
        let ranked = soft_nms(&[mk(3.0, 1, 6), mk(3.0, 1, 4)], 0.5, 2).unwrap();
        let order: Vec<usize> = ranked.iter().map(|p| p.token).collect();
        assert_eq!(order, vec![4, 6]);
    }

    #[test]
    fn tiny_sigma_behaves_like_hard_nms() {
        let a = Proposal { t_s: 0.0, t_e: 10.0, score: 0.9, level: 0, token: 0 };
        let b = Proposal { t_s: 1.0, t_e: 11.0, score: 0.8, level: 0, token: 1 };
        let ranked = soft_nms(&[a, b], 1e-6, 5).unwrap();
        assert!(ranked[1].score < 1e-100, "overlap must be annihilated");
        assert!(soft_nms(&[a], 0.0, 5).is_err());
    }

    #[test]
    fn recall_worked_cases() {
        let gt = vec![GroundTruth { t_start: 0.0, t_end: 10.0 }; 3];
        let hit = |t_s: f64, t_e: f64| Proposal { t_s, t_e, score: 0.9, level: 0, token: 0 };
        // overlaps 1.0, 0.4, 0.2 against gt
        let preds = vec![
            vec![hit(0.0, 10.0)],
            vec![hit(0.0, 4.0)],
            vec![hit(8.0, 13.0)],
        ];
        assert!((recall_at(&preds, &gt, 1, 0.3).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        // perfect predictions hit every cell of the table
        let perfect = vec![vec![hit(0.0, 10.0)]; 3];
        let table = recall_table(&perfect, &gt).unwrap();
        assert_eq!(
            (table.r1_03, table.r1_05, table.r5_03, table.r5_05, table.average),
            (1.0, 1.0, 1.0, 1.0, 1.0)
        );
        // disjoint predictions and empty ones are misses
        let miss = vec![vec![hit(20.0, 30.0)], vec![], vec![hit(40.0, 44.0)]];
        assert_eq!(recall_at(&miss, &gt, 5, 0.3).unwrap(), 0.0);
        assert!(recall_at(&preds, &gt, 0, 0.3).is_err());
        assert!(recall_at(&preds, &gt, 1, 1.0).is_err());
    }

    #[test]
    fn recall_is_monotone_in_k_and_theta() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let queries = rng.gen_range(1..6);
            let gt: Vec<GroundTruth> = (0..queries)
                .map(|_| {
                    let s = rng.gen_range(0.0..40.0);
                    GroundTruth { t_start: s, t_end: s + rng.gen_range(1.0..15.0) }
                })
                .collect();
            let preds: Vec<Vec<Proposal>> = (0..queries)
                .map(|_| {
                    (0..rng.gen_range(0..8))
                        .map(|i| {
                            let t_s = rng.gen_range(0.0..45.0);
                            Proposal {
                                t_s,
                                t_e: t_s + rng.gen_range(0.5..15.0),
                                score: rng.gen_range(0.01..1.0),
                                level: 0,
                                token: i,
                            }
                        })
                        .collect()
                })
                .collect();
            let thetas = [0.2, 0.3, 0.5, 0.7];
            for w in thetas.windows(2) {
                for k in [1, 3, 5] {
                    let lo = recall_at(&preds, &gt, k, w[1]).unwrap();
                    let hi = recall_at(&preds, &gt, k, w[0]).unwrap();
                    assert!(hi >= lo, "recall must not rise with theta");
                }
            }
            for k in 1..7 {
                let a = recall_at(&preds, &gt, k, 0.3).unwrap();
                let b = recall_at(&preds, &gt, k + 1, 0.3).unwrap();
                assert!(b >= a, "recall must not fall with k");
            }
        }
    }

    #[test]
    fn exact_offsets_reconstruct_the_ground_truth() {
        // gt = [6, 12); token 4 at stride 2 has center 9 = gt center;
        // exact offsets are d_s = 4 - 6/2 = 1, d_e = 12/2 - 4 = 2
        let gt = (6.0, 12.0);
        let (s, _) = level(&[0.1, 0.1, 0.1, 0.1, 0.9, 0.1], &[(0.0, 0.0); 6]);
        let mut dv = vec![0.0; 12];
        dv[8] = 4.0 - gt.0 / 2.0;
        dv[9] = gt.1 / 2.0 - 4.0;
        let d = Tensor::from_vec(dv, &[6, 2]).unwrap();
        let props = make_proposals(&[s], &[d], &[2], 20, 0.5).unwrap();
        assert_eq!(props.len(), 1);
        assert_eq!(tiou((props[0].t_s, props[0].t_e), gt).unwrap(), 1.0);
    }

    #[test]
    fn prediction_dump_round_trips_as_json_lines() {
        let ranked = vec![
            Proposal { t_s: 1.0, t_e: 4.0, score: 0.9, level: 0, token: 2 },
            Proposal { t_s: 6.0, t_e: 9.0, score: 0.4, level: 1, token: 0 },
        ];
        let records = vec![
            PredictionRecord::from_ranked(0, &ranked),
            PredictionRecord::from_ranked(1, &ranked[..1]),
        ];
        let mut buf = Vec::new();
        write_predictions(&mut buf, &records).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let back: PredictionRecord = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(back.query, 0);
        assert_eq!(back.moments, vec![(1.0, 4.0, 0.9), (6.0, 9.0, 0.4)]);
    }
}
