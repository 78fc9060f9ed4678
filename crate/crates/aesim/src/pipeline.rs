//! Three-stage serving pipeline: retrieval -> ranker -> re-ranker, plus the
//! dataset-preparation protocol that reproduces sample selection bias.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::MlpSpec;
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::{ParameterSet, Tensor};
use crate::world::{log_sessions, Catalog, DisplayServer, Item, OracleUserModel, SessionLog};

/// Feature vector a scorer sees for one (user, query, item) triple:
/// user vector, item features, query category rescaled to [-1, 1].
pub fn scorer_features(catalog: &Catalog, user_vec: &[f64], query: usize, item: &Item) -> Vec<f64> {
    let mut out = Vec::with_capacity(scorer_feature_width(catalog, user_vec.len()));
    out.extend_from_slice(user_vec);
    out.extend(catalog.item_features(item));
    let denom = (catalog.n_categories.max(2) - 1) as f64;
    out.push(2.0 * query as f64 / denom - 1.0);
    out
}

pub fn scorer_feature_width(catalog: &Catalog, user_dim: usize) -> usize {
    user_dim + catalog.feature_width() + 1
}

/// Point-wise item scorer. Implementations must be deterministic given
/// their parameters and produce finite scores.
pub trait Scorer {
    /// Scores for a slice of catalog item indices.
    fn score_candidates(
        &self,
        catalog: &Catalog,
        user_vec: &[f64],
        query: usize,
        candidates: &[usize],
    ) -> Result<Vec<f64>>;
}

/// Linear scorer with fixed random weights; stage-1 logging ranker.
#[derive(Debug, Clone)]
pub struct RandomLinearScorer {
    pub weights: Vec<f64>,
}

impl RandomLinearScorer {
    pub fn generate(catalog: &Catalog, user_dim: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let width = scorer_feature_width(catalog, user_dim);
        RandomLinearScorer {
            weights: (0..width).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }
}

impl Scorer for RandomLinearScorer {
    fn score_candidates(
        &self,
        catalog: &Catalog,
        user_vec: &[f64],
        query: usize,
        candidates: &[usize],
    ) -> Result<Vec<f64>> {
        candidates
            .iter()
            .map(|&idx| {
                let feats = scorer_features(catalog, user_vec, query, catalog.item_by_index(idx));
                if feats.len() != self.weights.len() {
                    return Err(Error::dim("linear scorer feature width".to_string()));
                }
                let mut acc = 0.0;
                for (w, f) in self.weights.iter().zip(&feats) {
                    acc += w * f;
                }
                Ok(acc)
            })
            .collect()
    }
}

/// MLP point-wise scorer (base ranker and the trained ranker families).
#[derive(Debug, Clone)]
pub struct MlpScorer {
    pub spec: MlpSpec,
    pub params: ParameterSet,
}

impl Scorer for MlpScorer {
    fn score_candidates(
        &self,
        catalog: &Catalog,
        user_vec: &[f64],
        query: usize,
        candidates: &[usize],
    ) -> Result<Vec<f64>> {
        if candidates.is_empty() {
            return Ok(Vec::new());
        }
        let width = self.spec.input_width();
        let mut data = Vec::with_capacity(candidates.len() * width);
        for &idx in candidates {
            let feats = scorer_features(catalog, user_vec, query, catalog.item_by_index(idx));
            if feats.len() != width {
                return Err(Error::dim(format!(
                    "scorer feature width {} vs spec input {width}",
                    feats.len()
                )));
            }
            data.extend(feats);
        }
        let input = Tensor::matrix(candidates.len(), width, data)?;
        let out = self.spec.forward(&self.params, &input)?;
        Ok(out.data().to_vec())
    }
}

/// Second-stage list reorderer. Output must be a permutation of the input.
pub trait Reranker {
    fn rerank(
        &self,
        catalog: &Catalog,
        user_vec: &[f64],
        query: usize,
        top_k: &[u64],
    ) -> Result<Vec<u64>>;
}

pub struct IdentityReranker;

impl Reranker for IdentityReranker {
    fn rerank(&self, _: &Catalog, _: &[f64], _: usize, top_k: &[u64]) -> Result<Vec<u64>> {
        Ok(top_k.to_vec())
    }
}

pub struct ReverseReranker;

impl Reranker for ReverseReranker {
    fn rerank(&self, _: &Catalog, _: &[f64], _: usize, top_k: &[u64]) -> Result<Vec<u64>> {
        Ok(top_k.iter().rev().copied().collect())
    }
}

/// Re-rank by a point-wise scorer (used when evaluating trained rankers as
/// re-rankers over a fixed display).
pub struct ScorerReranker<'a> {
    pub scorer: &'a dyn Scorer,
}

impl Reranker for ScorerReranker<'_> {
    fn rerank(
        &self,
        catalog: &Catalog,
        user_vec: &[f64],
        query: usize,
        top_k: &[u64],
    ) -> Result<Vec<u64>> {
        let idxs: Vec<usize> = top_k
            .iter()
            .map(|&id| catalog.index_of(id))
            .collect::<Result<_>>()?;
        let scores = self.scorer.score_candidates(catalog, user_vec, query, &idxs)?;
        Ok(rank_ids(top_k, &scores, top_k.len()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub retrieve_n: usize,
    pub rerank_n: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            retrieve_n: 1000,
            rerank_n: 50,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rerank_n > self.retrieve_n {
            return Err(Error::arg(format!(
                "rerank_n {} exceeds retrieve_n {}",
                self.rerank_n, self.retrieve_n
            )));
        }
        Ok(())
    }
}

/// Up to `n` items from the query's category bucket, uniform without
/// replacement under the seed. A bucket no larger than `n` is returned
/// whole, in ascending item-id order.
pub fn retrieve(catalog: &Catalog, query: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    let bucket = catalog.category_items(query)?;
    if n == 0 {
        return Ok(Vec::new());
    }
    if bucket.len() <= n {
        let mut all = bucket.to_vec();
        all.sort_by_key(|&idx| catalog.item_by_index(idx).item_id);
        return Ok(all);
    }
    let mut rng = rng_from_seed(seed);
    let mut pool = bucket.to_vec();
    // Partial Fisher-Yates: the first n entries are a uniform sample.
    for i in 0..n {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(n);
    Ok(pool)
}

/// Top-k by descending score, ties broken by ascending item id.
pub fn rank(
    scorer: &dyn Scorer,
    catalog: &Catalog,
    user_vec: &[f64],
    query: usize,
    candidates: &[usize],
    k: usize,
) -> Result<Vec<u64>> {
    if candidates.is_empty() {
        return Err(Error::arg("rank: empty candidate set"));
    }
    let scores = scorer.score_candidates(catalog, user_vec, query, candidates)?;
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("scorer produced {s}")));
    }
    let ids: Vec<u64> = candidates
        .iter()
        .map(|&idx| catalog.item_by_index(idx).item_id)
        .collect();
    Ok(rank_ids(&ids, &scores, k))
}

/// Shared ordering rule: descending score, ascending id on ties.
pub fn rank_ids(ids: &[u64], scores: &[f64], k: usize) -> Vec<u64> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(ids[a].cmp(&ids[b]))
    });
    order.truncate(k);
    order.into_iter().map(|i| ids[i]).collect()
}

/// The full serving pipeline.
pub struct Pipeline<'a> {
    pub config: PipelineConfig,
    pub ranker: &'a dyn Scorer,
    pub reranker: &'a dyn Reranker,
}

impl Pipeline<'_> {
    pub fn serve(
        &self,
        catalog: &Catalog,
        user_vec: &[f64],
        query: usize,
        seed: u64,
    ) -> Result<Vec<u64>> {
        self.config.validate()?;
        let candidates = retrieve(catalog, query, self.config.retrieve_n, seed)?;
        let top_k = rank(
            self.ranker,
            catalog,
            user_vec,
            query,
            &candidates,
            self.config.rerank_n,
        )?;
        let display = self
            .reranker
            .rerank(catalog, user_vec, query, &top_k)?;
        let mut a = top_k.clone();
        let mut b = display.clone();
        a.sort_unstable();
        b.sort_unstable();
        if a != b {
            return Err(Error::PipelineIntegrity(
                "re-ranker output is not a permutation of its input".into(),
            ));
        }
        Ok(display)
    }
}

impl DisplayServer for Pipeline<'_> {
    fn serve(
        &self,
        catalog: &Catalog,
        user_vec: &[f64],
        query: usize,
        seed: u64,
    ) -> Result<Vec<u64>> {
        Pipeline::serve(self, catalog, user_vec, query, seed)
    }
}

// ---------------------------------------------------------------------------
// Dataset preparation (random ranker -> base ranker -> biased final logs)

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub train: Vec<SessionLog>,
    pub test: Vec<SessionLog>,
    pub provenance: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub pipeline: PipelineConfig,
    /// Sessions served by the random-weight ranker to train the base ranker.
    pub n_stage1: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub base_ranker_hidden: Vec<usize>,
    pub base_ranker_epochs: usize,
    pub base_ranker_batch: usize,
    pub base_ranker_lr: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            pipeline: PipelineConfig::default(),
            n_stage1: 10_000,
            n_train: 50_000,
            n_test: 5_000,
            base_ranker_hidden: vec![128, 64, 32],
            base_ranker_epochs: 1,
            base_ranker_batch: 256,
            base_ranker_lr: 1e-3,
        }
    }
}

pub struct PreparedDataset {
    pub dataset: Dataset,
    pub base_ranker: MlpScorer,
    pub stage1: Vec<SessionLog>,
}

/// Three-stage protocol: a random-weight linear ranker logs stage-1
/// sessions, a base point-wise MLP ranker is trained on them, and the base
/// ranker then serves the final train/test sessions. Final displays are
/// biased toward base-ranker preferences.
pub fn prepare_dataset(
    oracle: &OracleUserModel,
    catalog: &Catalog,
    config: &DatasetConfig,
    seed: u64,
) -> Result<PreparedDataset> {
    config.pipeline.validate()?;
    if config.n_stage1 == 0 {
        return Err(Error::arg("prepare_dataset: n_stage1 must be positive"));
    }
    let user_dim = oracle.config.user_dim;
    let random_ranker = RandomLinearScorer::generate(catalog, user_dim, derive_seed(seed, "random-ranker"));
    let identity = IdentityReranker;
    let stage1_pipeline = Pipeline {
        config: config.pipeline.clone(),
        ranker: &random_ranker,
        reranker: &identity,
    };
    let stage1 = log_sessions(
        oracle,
        catalog,
        &stage1_pipeline,
        config.n_stage1,
        derive_seed(seed, "stage1"),
    )?;

    let base_ranker = crate::ltr::train_base_ranker(
        catalog,
        &stage1,
        user_dim,
        &config.base_ranker_hidden,
        config.base_ranker_epochs,
        config.base_ranker_batch,
        config.base_ranker_lr,
        derive_seed(seed, "base-ranker"),
    )?;

    let final_pipeline = Pipeline {
        config: config.pipeline.clone(),
        ranker: &base_ranker,
        reranker: &identity,
    };
    let train = log_sessions(
        oracle,
        catalog,
        &final_pipeline,
        config.n_train,
        derive_seed(seed, "train"),
    )?;
    let test = log_sessions(
        oracle,
        catalog,
        &final_pipeline,
        config.n_test,
        derive_seed(seed, "test"),
    )?;
    Ok(PreparedDataset {
        dataset: Dataset {
            train,
            test,
            provenance: "random-ranker -> base-ranker(pointwise click) -> base-ranker logs".into(),
            seed,
        },
        base_ranker,
        stage1,
    })
}
