//! Retrieval evaluation: R@1, R@5 and R@10 in both directions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Instance;
use super::model::Model;
use crate::attention::{RngNoise, SampleMode};
use crate::autodiff::Graph;
use crate::error::{invalid, Result};
use crate::rewards::{Direction, SimilarityMatrix};

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    /// R@1, R@5, R@10 with image queries.
    pub i2t: [f64; 3],
    /// R@1, R@5, R@10 with text queries.
    pub t2i: [f64; 3],
}

impl EvalReport {
    /// Model-selection score: R@1 image→text plus R@1 text→image.
    pub fn selection(&self) -> f64 {
        self.i2t[0] + self.t2i[0]
    }

    pub fn rsum(&self) -> f64 {
        self.i2t.iter().chain(&self.t2i).sum()
    }
}

/// Fraction of queries whose paired item ranks within the top `k`.
pub fn recall_at(s: &SimilarityMatrix, k: usize, dir: Direction) -> f64 {
    let n = s.size();
    (0..n).filter(|&q| s.rank(q, dir) <= k).count() as f64 / n as f64
}

pub fn report_from_similarity(s: &SimilarityMatrix) -> Result<EvalReport> {
    let n = s.size();
    if n < RECALL_KS[2] {
        return invalid(format!(
            "evaluation needs at least {} instances, got {n}",
            RECALL_KS[2]
        ));
    }
    let per = |dir| RECALL_KS.map(|k| recall_at(s, k, dir));
    Ok(EvalReport {
        n,
        i2t: per(Direction::ImageToText),
        t2i: per(Direction::TextToImage),
    })
}

/// Deterministic-rollout embeddings of both modalities.
/// Image and text embeddings, one row per instance.
pub type Embeddings = (Vec<Vec<f64>>, Vec<Vec<f64>>);

pub fn embed_split(model: &Model, items: &[Instance]) -> Result<Embeddings> {
    // deterministic rollouts ignore the noise values
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new();
    let mut img = Vec::with_capacity(items.len());
    let mut txt = Vec::with_capacity(items.len());
    for inst in items {
        g.clear();
        let a = model.encode_image(&mut g, inst, SampleMode::Deterministic, &mut RngNoise(&mut rng))?;
        img.push(g.value(a.emb).data().to_vec());
        let b = model.encode_text(&mut g, inst, SampleMode::Deterministic, &mut RngNoise(&mut rng))?;
        txt.push(g.value(b.emb).data().to_vec());
    }
    Ok((img, txt))
}

pub fn evaluate(model: &Model, items: &[Instance]) -> Result<EvalReport> {
    if items.len() < RECALL_KS[2] {
        return invalid(format!(
            "evaluation needs at least {} instances, got {}",
            RECALL_KS[2],
            items.len()
        ));
    }
    let (img, txt) = embed_split(model, items)?;
    report_from_similarity(&SimilarityMatrix::from_embeddings(&img, &txt)?)
}
