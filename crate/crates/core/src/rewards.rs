//! On-line ranking reward computed inside a batch: each pair is its own
//! class, so every query has exactly one relevant gallery item.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Square matrix of similarities: rows are image embeddings, columns text
/// embeddings, and pair `k` sits on the diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    k: usize,
    data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// Image query against the text gallery (row `k`).
    ImageToText,
    /// Text query against the image gallery (column `k`).
    TextToImage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardMode {
    R1,
    Ap,
    #[serde(rename = "r1+ap")]
    R1Ap,
}

impl std::str::FromStr for RewardMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "r1" | "R@1" => Ok(Self::R1),
            "ap" | "AP" => Ok(Self::Ap),
            "r1+ap" | "R@1+AP" => Ok(Self::R1Ap),
            _ => Err(format!("unknown reward mode `{s}` (expected r1, ap, r1+ap)")),
        }
    }
}

impl std::fmt::Display for RewardMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::R1 => "r1",
            Self::Ap => "ap",
            Self::R1Ap => "r1+ap",
        })
    }
}

/// Per-instance reward bookkeeping. `r_at_1` and `ap` are averaged over the
/// two retrieval directions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub r_at_1: f64,
    pub ap: f64,
    pub reward: f64,
    pub baseline: f64,
    pub advantage: f64,
}

impl SimilarityMatrix {
    pub fn new(k: usize, data: Vec<f64>) -> Result<Self> {
        if k == 0 || data.len() != k * k {
            return invalid(format!(
                "similarity matrix needs {k}x{k} entries, got {}",
                data.len()
            ));
        }
        Ok(Self { k, data })
    }

    /// `S[i][j] = <img_i, txt_j>` for unit-normalized embeddings.
    pub fn from_embeddings(img: &[Vec<f64>], txt: &[Vec<f64>]) -> Result<Self> {
        if img.len() != txt.len() {
            return invalid(format!(
                "{} image embeddings vs {} text embeddings",
                img.len(),
                txt.len()
            ));
        }
        let k = img.len();
        let mut data = Vec::with_capacity(k * k);
        for a in img {
            for b in txt {
                if a.len() != b.len() {
                    return invalid("embedding dimensions differ");
                }
                data.push(a.iter().zip(b).map(|(x, y)| x * y).sum());
            }
        }
        Self::new(k, data)
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.k + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Scores of query `k` against its gallery.
    pub fn scores(&self, k: usize, dir: Direction) -> Vec<f64> {
        match dir {
            Direction::ImageToText => self.data[k * self.k..(k + 1) * self.k].to_vec(),
            Direction::TextToImage => (0..self.k).map(|i| self.get(i, k)).collect(),
        }
    }

    /// 1-based rank of the paired item for query `k`.
    pub fn rank(&self, k: usize, dir: Direction) -> usize {
        rank_of(&self.scores(k, dir), k)
    }
}

/// 1-based rank of `relevant` in descending order of `scores`; ties go to
/// the lower index.
pub fn rank_of(scores: &[f64], relevant: usize) -> usize {
    let s = scores[relevant];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < relevant))
        .count()
}

pub fn recall_at_1(s: &SimilarityMatrix, k: usize, dir: Direction) -> f64 {
    if s.rank(k, dir) == 1 {
        1.0
    } else {
        0.0
    }
}

/// Single-relevant average precision: `1 / rank`.
pub fn average_precision(s: &SimilarityMatrix, k: usize, dir: Direction) -> f64 {
    1.0 / s.rank(k, dir) as f64
}

fn combine(mode: RewardMode, r1: f64, ap: f64) -> f64 {
    match mode {
        RewardMode::R1 => r1,
        RewardMode::Ap => ap,
        RewardMode::R1Ap => r1 + ap,
    }
}

/// Rewards for every pair, averaged over both retrieval directions.
/// Baselines and advantages are left at zero / equal to the reward.
pub fn instance_rewards(s: &SimilarityMatrix, mode: RewardMode) -> Vec<RewardRecord> {
    (0..s.size())
        .map(|k| {
            let dirs = [Direction::ImageToText, Direction::TextToImage];
            let r1 = dirs.iter().map(|&d| recall_at_1(s, k, d)).sum::<f64>() / 2.0;
            let ap = dirs.iter().map(|&d| average_precision(s, k, d)).sum::<f64>() / 2.0;
            let reward = combine(mode, r1, ap);
            RewardRecord {
                r_at_1: r1,
                ap,
                reward,
                baseline: 0.0,
                advantage: reward,
            }
        })
        .collect()
}

/// Leave-one-out batch baseline `b_k = mean_{j≠k} R_j` and advantages
/// `R_k - β b_k`.
pub fn pg_baseline(rewards: &[f64], beta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = rewards.len();
    if k < 2 {
        return invalid(format!("pg_baseline needs at least 2 rewards, got {k}"));
    }
    let total: f64 = rewards.iter().sum();
    let baselines: Vec<f64> = rewards
        .iter()
        .map(|r| (total - r) / (k - 1) as f64)
        .collect();
    let advantages = rewards
        .iter()
        .zip(&baselines)
        .map(|(r, b)| r - beta * b)
        .collect();
    Ok((baselines, advantages))
}

/// Fills baseline and advantage into `records`.
pub fn apply_baseline(records: &mut [RewardRecord], beta: f64) -> Result<()> {
    let rewards: Vec<f64> = records.iter().map(|r| r.reward).collect();
    let (b, a) = pg_baseline(&rewards, beta)?;
    for ((rec, b), a) in records.iter_mut().zip(b).zip(a) {
        rec.baseline = b;
        rec.advantage = a;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn identity(k: usize) -> SimilarityMatrix {
        let mut d = vec![0.0; k * k];
        for i in 0..k {
            d[i * k + i] = 1.0;
        }
        SimilarityMatrix::new(k, d).unwrap()
    }

    #[test]
    fn from_embeddings_cases() {
        let e = vec![vec![1.0, 0.0], vec![0.6, 0.8]];
        let s = SimilarityMatrix::from_embeddings(&e, &e).unwrap();
        assert_eq!(s.get(0, 1), s.get(1, 0));
        assert_eq!((s.get(0, 0), s.get(1, 1)), (1.0, 1.0));
        let o = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(SimilarityMatrix::from_embeddings(&o, &o).unwrap(), identity(2));
        assert!(SimilarityMatrix::from_embeddings(&o, &o[..1]).is_err());
    }

    #[test]
    fn identity_is_perfect() {
        let s = identity(5);
        for k in 0..5 {
            assert_eq!(recall_at_1(&s, k, Direction::ImageToText), 1.0);
            assert_eq!(average_precision(&s, k, Direction::TextToImage), 1.0);
        }
        assert!(instance_rewards(&s, RewardMode::R1Ap)
            .iter()
            .all(|r| r.reward == 2.0));
    }

    #[test]
    fn off_diagonal_max_misses() {
        let s = SimilarityMatrix::new(2, vec![0.1, 0.9, 0.3, 0.2]).unwrap();
        assert_eq!(recall_at_1(&s, 0, Direction::ImageToText), 0.0);
        assert_eq!(average_precision(&s, 0, Direction::ImageToText), 0.5);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let s = SimilarityMatrix::new(2, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        assert_eq!(recall_at_1(&s, 0, Direction::ImageToText), 1.0);
        assert_eq!(recall_at_1(&s, 1, Direction::ImageToText), 0.0);
    }

    #[test]
    fn anti_diagonal_rewards() {
        let k = 4;
        let mut d = vec![0.0; 16];
        for i in 0..k {
            d[i * k + (k - 1 - i)] = 1.0;
        }
        let s = SimilarityMatrix::new(k, d).unwrap();
        for r in instance_rewards(&s, RewardMode::R1Ap) {
            assert_eq!(r.r_at_1, 0.0);
            assert!(r.ap < 1.0);
        }
    }

    #[test]
    fn baseline_examples() {
        let (b, a) = pg_baseline(&[1.0, 2.0, 3.0], 0.5).unwrap();
        assert_eq!(b, vec![2.5, 2.0, 1.5]);
        assert_eq!(a, vec![1.0 - 1.25, 2.0 - 1.0, 3.0 - 0.75]);
        let (b, a) = pg_baseline(&[0.7; 4], 0.5).unwrap();
        assert!(b.iter().all(|&x| (x - 0.7).abs() < 1e-15));
        assert!(a.iter().all(|&x| (x - 0.35).abs() < 1e-15));
        let (_, a) = pg_baseline(&[0.3, 1.9], 0.0).unwrap();
        assert_eq!(a, vec![0.3, 1.9]);
        assert!(pg_baseline(&[1.0], 0.5).is_err());
    }

    proptest! {
        #[test]
        fn rewards_bounded(k in 2usize..7, vals in proptest::collection::vec(-1.0f64..1.0, 36)) {
            let s = SimilarityMatrix::new(k, vals[..k * k].to_vec()).unwrap();
            for (i, r) in instance_rewards(&s, RewardMode::R1Ap).iter().enumerate() {
                prop_assert!((0.0..=2.0).contains(&r.reward));
                prop_assert_eq!(r.reward, r.r_at_1 + r.ap);
                let both = s.rank(i, Direction::ImageToText) == 1
                    && s.rank(i, Direction::TextToImage) == 1;
                prop_assert_eq!(r.reward == 2.0, both);
            }
        }

        #[test]
        fn unit_beta_advantages_center(rewards in proptest::collection::vec(0.0f64..2.0, 2..64)) {
            let (_, a) = pg_baseline(&rewards, 1.0).unwrap();
            prop_assert!(a.iter().sum::<f64>().abs() < 1e-12);
        }
    }
}
