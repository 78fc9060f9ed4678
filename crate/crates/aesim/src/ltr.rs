//! The five ranker families (point-wise, pair-wise, ListMLE, group-wise,
//! recurrent list-wise) plus inverse-propensity de-biasing weights.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{log_sigmoid, sigmoid, Activation, AdamConfig, AdamState, GruSpec, MlpSpec};
use crate::pipeline::{scorer_feature_width, scorer_features, MlpScorer};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::{ParameterSet, Tensor};
use crate::world::{Action, Catalog, SessionLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    PointwiseCe,
    PairwiseLogistic,
    Listmle,
    Gsf,
    Dlcm,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::PointwiseCe,
        LossKind::PairwiseLogistic,
        LossKind::Listmle,
        LossKind::Gsf,
        LossKind::Dlcm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::PointwiseCe => "pointwise",
            LossKind::PairwiseLogistic => "pairwise",
            LossKind::Listmle => "listmle",
            LossKind::Gsf => "gsf",
            LossKind::Dlcm => "dlcm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelTarget {
    Click,
    Purchase,
}

pub fn labels_for(trace: &[Action], target: LabelTarget) -> Vec<f64> {
    trace
        .iter()
        .map(|a| match target {
            LabelTarget::Click => a.is_click() as u8 as f64,
            LabelTarget::Purchase => a.is_purchase() as u8 as f64,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Propensities and IPS weights

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityTable {
    /// p(k) at index k-1; p(1) = 1 after normalization.
    pub p: Vec<f64>,
    pub clip_floor: f64,
    /// Positions whose probe estimate had a zero denominator.
    pub unreliable: Vec<usize>,
}

impl PropensityTable {
    pub fn new(mut p: Vec<f64>, clip_floor: f64) -> Result<Self> {
        if p.is_empty() || p[0] <= 0.0 {
            return Err(Error::arg("propensity table needs p(1) > 0"));
        }
        let p1 = p[0];
        for v in p.iter_mut() {
            *v /= p1;
        }
        Ok(PropensityTable {
            p,
            clip_floor,
            unreliable: Vec::new(),
        })
    }

    pub fn uniform(len: usize) -> Self {
        PropensityTable {
            p: vec![1.0; len],
            clip_floor: 0.1,
            unreliable: Vec::new(),
        }
    }

    pub fn propensity(&self, position: usize) -> Result<f64> {
        self.p
            .get(position - 1)
            .copied()
            .ok_or_else(|| Error::arg(format!("propensity table has no position {position}")))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut out = String::from("position,propensity,unreliable\n");
        for (i, &p) in self.p.iter().enumerate() {
            let flag = self.unreliable.contains(&(i + 1)) as u8;
            out.push_str(&format!("{},{:.12e},{}\n", i + 1, p, flag));
        }
        out.push_str(&format!("# clip_floor,{:.12e}\n", self.clip_floor));
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
        let mut p = Vec::new();
        let mut unreliable = Vec::new();
        let mut clip_floor = 0.1;
        for line in text.lines().skip(1) {
            if let Some(rest) = line.strip_prefix("# clip_floor,") {
                clip_floor = rest
                    .parse()
                    .map_err(|_| Error::Format("bad clip_floor".into()))?;
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::Format(format!("bad propensity row: {line}")));
            }
            p.push(
                parts[1]
                    .parse()
                    .map_err(|_| Error::Format("bad propensity value".into()))?,
            );
            if parts[2] == "1" {
                unreliable.push(p.len());
            }
        }
        let mut table = PropensityTable::new(p, clip_floor)?;
        table.unreliable = unreliable;
        Ok(table)
    }
}

/// weight(k) = 1 / max(p(k), clip_floor) for positive items, 1 otherwise.
pub fn ips_weights(labels: &[f64], table: &PropensityTable) -> Result<Vec<f64>> {
    labels
        .iter()
        .enumerate()
        .map(|(pos0, &y)| {
            if y > 0.0 {
                let p = table.propensity(pos0 + 1)?;
                Ok(1.0 / p.max(table.clip_floor))
            } else {
                Ok(1.0)
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Score-level losses: (loss, dloss/dscores)

fn check_binary(labels: &[f64]) -> Result<()> {
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::arg("labels must be binary"));
    }
    Ok(())
}

/// Weighted binary cross-entropy with sigmoid head, mean over items.
pub fn pointwise_loss(scores: &[f64], labels: &[f64], weights: &[f64]) -> Result<(f64, Vec<f64>)> {
    if scores.len() != labels.len() || scores.len() != weights.len() {
        return Err(Error::dim("pointwise: length mismatch".to_string()));
    }
    check_binary(labels)?;
    let n = scores.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; scores.len()];
    for i in 0..scores.len() {
        let (s, y, w) = (scores[i], labels[i], weights[i]);
        loss += -w * (y * log_sigmoid(s) + (1.0 - y) * log_sigmoid(-s)) / n;
        grad[i] = w * (sigmoid(s) - y) / n;
    }
    Ok((loss, grad))
}

/// RankNet-style logistic pair loss over (positive, negative) pairs within
/// one list; pair weight is the positive item's weight. Returns the pair
/// count so callers can count lists without valid pairs.
pub fn pairwise_loss(
    scores: &[f64],
    labels: &[f64],
    weights: &[f64],
) -> Result<(f64, Vec<f64>, usize)> {
    if scores.len() != labels.len() || scores.len() != weights.len() {
        return Err(Error::dim("pairwise: length mismatch".to_string()));
    }
    check_binary(labels)?;
    let mut grad = vec![0.0; scores.len()];
    let mut loss = 0.0;
    let mut pairs = 0usize;
    for i in 0..scores.len() {
        if labels[i] != 1.0 {
            continue;
        }
        for j in 0..scores.len() {
            if labels[j] != 0.0 {
                continue;
            }
            pairs += 1;
            let margin = scores[i] - scores[j];
            let w = weights[i];
            loss += -w * log_sigmoid(margin);
            let d = -w * sigmoid(-margin);
            grad[i] += d;
            grad[j] -= d;
        }
    }
    if pairs == 0 {
        return Ok((0.0, grad, 0));
    }
    let np = pairs as f64;
    loss /= np;
    grad.iter_mut().for_each(|g| *g /= np);
    Ok((loss, grad, pairs))
}

/// Permutation placing labels in descending order, ties broken by ascending
/// item id.
pub fn label_permutation(labels: &[f64], item_ids: &[u64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| {
        labels[b]
            .partial_cmp(&labels[a])
            .unwrap()
            .then(item_ids[a].cmp(&item_ids[b]))
    });
    order
}

/// Plackett-Luce negative log-likelihood of the given permutation,
/// stabilized by max-subtraction. `weights[perm[t]]` scales step t.
pub fn listmle_loss(
    scores: &[f64],
    perm: &[usize],
    weights: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if scores.is_empty() {
        return Err(Error::arg("listmle: empty list"));
    }
    if perm.len() != scores.len() || weights.len() != scores.len() {
        return Err(Error::dim("listmle: length mismatch".to_string()));
    }
    let n = scores.len();
    let mut loss = 0.0;
    let mut grad = vec![0.0; n];
    for t in 0..n {
        let tail = &perm[t..];
        let max = tail
            .iter()
            .map(|&i| scores[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &i in tail {
            z += (scores[i] - max).exp();
        }
        let log_z = max + z.ln();
        let w = weights[perm[t]];
        loss += -w * (scores[perm[t]] - log_z);
        grad[perm[t]] -= w;
        for &i in tail {
            grad[i] += w * (scores[i] - max).exp() / z;
        }
    }
    Ok((loss, grad))
}

// ---------------------------------------------------------------------------
// Group-wise scoring (GSF)

/// Sampled item groups for one list: each group is `m` item indices into the
/// list; short lists pad by cycling their items.
pub fn sample_groups(list_len: usize, m: usize, n_groups: usize, rng: &mut crate::rng::Rng) -> Vec<Vec<usize>> {
    let mut groups = Vec::with_capacity(n_groups);
    for _ in 0..n_groups {
        let mut g = Vec::with_capacity(m);
        if list_len >= m {
            let mut pool: Vec<usize> = (0..list_len).collect();
            pool.shuffle(rng);
            g.extend_from_slice(&pool[..m]);
        } else {
            for i in 0..m {
                g.push(i % list_len);
            }
        }
        groups.push(g);
    }
    groups
}

pub fn default_group_count(list_len: usize, m: usize) -> usize {
    2 * list_len.div_ceil(m)
}

/// Forward through the shared group MLP: per-item aggregated scores are the
/// mean of the item's group logits over every sampled group containing it.
pub struct GsfForward {
    pub item_scores: Vec<f64>,
    cache: crate::nn::MlpCache,
    groups: Vec<Vec<usize>>,
    counts: Vec<f64>,
    m: usize,
}

pub fn gsf_forward(
    spec: &MlpSpec,
    params: &ParameterSet,
    item_features: &Tensor,
    groups: &[Vec<usize>],
) -> Result<GsfForward> {
    let (n_items, width) = item_features.as_matrix_shape();
    if groups.is_empty() {
        return Err(Error::arg("gsf: no groups sampled"));
    }
    let m = groups[0].len();
    if spec.input_width() != m * width || spec.output_width() != m {
        return Err(Error::dim(format!(
            "gsf spec expects input {} output {m}, got {}x{}",
            m * width,
            spec.input_width(),
            spec.output_width()
        )));
    }
    let mut data = Vec::with_capacity(groups.len() * m * width);
    for g in groups {
        for &idx in g {
            data.extend_from_slice(item_features.row(idx));
        }
    }
    let input = Tensor::matrix(groups.len(), m * width, data)?;
    let cache = spec.forward_cached(params, &input)?;
    let logits = cache.output().clone();
    let mut sums = vec![0.0; n_items];
    let mut counts = vec![0.0; n_items];
    for (gi, g) in groups.iter().enumerate() {
        for (slot, &idx) in g.iter().enumerate() {
            sums[idx] += logits.row(gi)[slot];
            counts[idx] += 1.0;
        }
    }
    let item_scores = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| if c > 0.0 { s / c } else { 0.0 })
        .collect();
    Ok(GsfForward {
        item_scores,
        cache,
        groups: groups.to_vec(),
        counts,
        m,
    })
}

impl GsfForward {
    /// Backprop dL/d(item scores) to the shared-net parameters and return
    /// them (input features carry no parameters).
    pub fn backward(&self, params: &ParameterSet, dscores: &[f64]) -> Result<ParameterSet> {
        let mut dlogits = Tensor::zeros(vec![self.groups.len(), self.m]);
        for (gi, g) in self.groups.iter().enumerate() {
            for (slot, &idx) in g.iter().enumerate() {
                dlogits.data_mut()[gi * self.m + slot] = dscores[idx] / self.counts[idx];
            }
        }
        let (grads, _) = self.cache.backward(params, &dlogits)?;
        Ok(grads)
    }
}

// ---------------------------------------------------------------------------
// Recurrent list-wise re-ranker (DLCM stand-in)

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DlcmSpec {
    pub gru: GruSpec,
    pub head: MlpSpec,
}

impl DlcmSpec {
    pub fn new(feature_width: usize, gru_hidden: usize, head_hidden: &[usize]) -> Result<Self> {
        let gru = GruSpec::new(feature_width, gru_hidden)?;
        let mut widths = vec![gru_hidden + feature_width];
        widths.extend_from_slice(head_hidden);
        widths.push(1);
        let head = MlpSpec::new(widths, Activation::Relu, Activation::Identity)?;
        Ok(DlcmSpec { gru, head })
    }

    pub fn init_params(&self, rng: &mut crate::rng::Rng) -> ParameterSet {
        let mut params = self.gru.init_params(rng);
        for (name, t) in self.head.init_params(rng).iter() {
            params.insert(format!("head.{name}"), t.clone());
        }
        params
    }

    fn head_params(&self, params: &ParameterSet) -> ParameterSet {
        let mut out = ParameterSet::new();
        for (name, t) in params.iter() {
            if let Some(rest) = name.strip_prefix("head.") {
                out.insert(rest, t.clone());
            }
        }
        out
    }

    /// Scores conditioned on the whole list: a GRU encodes the list in its
    /// given order and a head scores [hidden_k, features_k] per position.
    pub fn score_list(&self, params: &ParameterSet, list_features: &Tensor) -> Result<Vec<f64>> {
        Ok(self.forward(params, list_features)?.0)
    }

    fn forward(
        &self,
        params: &ParameterSet,
        list_features: &Tensor,
    ) -> Result<(Vec<f64>, DlcmCache)> {
        let (n, width) = list_features.as_matrix_shape();
        let inputs: Vec<Tensor> = (0..n)
            .map(|i| Tensor::matrix(1, width, list_features.row(i).to_vec()))
            .collect::<Result<_>>()?;
        let h0 = Tensor::zeros(vec![1, self.gru.hidden_width]);
        let gru_cache = self.gru.sequence_cached(params, &inputs, &h0)?;
        let head_params = self.head_params(params);
        let mut scores = Vec::with_capacity(n);
        let mut head_caches = Vec::with_capacity(n);
        for i in 0..n {
            let mut row = gru_cache.hidden(i).data().to_vec();
            row.extend_from_slice(list_features.row(i));
            let input = Tensor::matrix(1, self.gru.hidden_width + width, row)?;
            let cache = self.head.forward_cached(&head_params, &input)?;
            scores.push(cache.output().data()[0]);
            head_caches.push(cache);
        }
        Ok((
            scores,
            DlcmCache {
                gru_cache,
                head_caches,
                head_params,
                width,
            },
        ))
    }

    /// Parameter gradients for dL/d(scores).
    pub fn backward(
        &self,
        params: &ParameterSet,
        list_features: &Tensor,
        dscores: &[f64],
    ) -> Result<(Vec<f64>, ParameterSet)> {
        let (scores, cache) = self.forward(params, list_features)?;
        let n = scores.len();
        if dscores.len() != n {
            return Err(Error::dim("dlcm: dscores length".to_string()));
        }
        let mut grads = ParameterSet::new();
        let mut grad_h: Vec<Tensor> = (0..n)
            .map(|_| Tensor::zeros(vec![1, self.gru.hidden_width]))
            .collect();
        for i in 0..n {
            let gout = Tensor::matrix(1, 1, vec![dscores[i]])?;
            let (head_grads, dinput) = cache.head_caches[i].backward(&cache.head_params, &gout)?;
            for (name, g) in head_grads.iter() {
                let key = format!("head.{name}");
                match grads.get_mut(&key) {
                    Some(t) => {
                        for (a, &b) in t.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => grads.insert(key, g.clone()),
                }
            }
            // First hidden_width entries of the head input gradient feed h_i.
            for (a, &b) in grad_h[i]
                .data_mut()
                .iter_mut()
                .zip(&dinput.data()[..self.gru.hidden_width])
            {
                *a += b;
            }
        }
        let (gru_grads, _, _) = cache.gru_cache.backward(params, &grad_h)?;
        for (name, g) in gru_grads.iter() {
            grads.insert(name.clone(), g.clone());
        }
        let _ = cache.width;
        Ok((scores, grads))
    }
}

struct DlcmCache {
    gru_cache: crate::nn::GruSeqCache,
    head_caches: Vec<crate::nn::MlpCache>,
    head_params: ParameterSet,
    width: usize,
}

// ---------------------------------------------------------------------------
// Ranker models and training

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub label_target: LabelTarget,
    pub use_ips: bool,
    pub epochs: usize,
    /// Lists per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// GSF group size.
    pub group_size: usize,
    pub hidden: Vec<usize>,
    pub gru_hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::PointwiseCe,
            label_target: LabelTarget::Purchase,
            use_ips: false,
            epochs: 1,
            batch_size: 64,
            learning_rate: 1e-3,
            group_size: 2,
            hidden: vec![128, 64, 32],
            gru_hidden: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.loss == LossKind::Gsf && self.group_size < 2 {
            return Err(Error::arg("gsf group size must be >= 2"));
        }
        if self.epochs > 0 && self.batch_size == 0 {
            return Err(Error::arg("batch size must be positive"));
        }
        Ok(())
    }
}

/// A trained ranker of any family, able to score a displayed list.
#[derive(Debug, Clone)]
pub enum RankerModel {
    /// Point-wise MLP scorer (pointwise / pairwise / listmle training).
    Mlp { spec: MlpSpec, params: ParameterSet },
    /// Group-wise shared net; items scored in replicated groups at inference.
    Gsf {
        spec: MlpSpec,
        params: ParameterSet,
        group_size: usize,
    },
    /// Recurrent list-wise model; scores depend on the whole list.
    Dlcm { spec: DlcmSpec, params: ParameterSet },
}

impl RankerModel {
    pub fn params(&self) -> &ParameterSet {
        match self {
            RankerModel::Mlp { params, .. }
            | RankerModel::Gsf { params, .. }
            | RankerModel::Dlcm { params, .. } => params,
        }
    }

    pub fn list_features(
        catalog: &Catalog,
        user_vec: &[f64],
        query: usize,
        display: &[u64],
    ) -> Result<Tensor> {
        let width = scorer_feature_width(catalog, user_vec.len());
        let mut data = Vec::with_capacity(display.len() * width);
        for &id in display {
            data.extend(scorer_features(catalog, user_vec, query, catalog.item(id)?));
        }
        Tensor::matrix(display.len(), width, data)
    }

    /// Scores for the items of one displayed list (list-conditioned for the
    /// recurrent family, per-item otherwise).
    pub fn score_list(
        &self,
        catalog: &Catalog,
        user_vec: &[f64],
        query: usize,
        display: &[u64],
    ) -> Result<Vec<f64>> {
        let feats = Self::list_features(catalog, user_vec, query, display)?;
        self.score_features(&feats)
    }

    pub fn score_features(&self, feats: &Tensor) -> Result<Vec<f64>> {
        let n = feats.rows();
        if n == 0 {
            return Ok(Vec::new());
        }
        match self {
            RankerModel::Mlp { spec, params } => {
                Ok(spec.forward(params, feats)?.data().to_vec())
            }
            RankerModel::Gsf {
                spec,
                params,
                group_size,
            } => {
                // Inference rule: each item scored in a group of itself
                // replicated group_size times; deterministic, no sampling.
                let groups: Vec<Vec<usize>> = (0..n).map(|i| vec![i; *group_size]).collect();
                let fwd = gsf_forward(spec, params, feats, &groups)?;
                Ok(fwd.item_scores)
            }
            RankerModel::Dlcm { spec, params } => spec.score_list(params, feats),
        }
    }
}

/// Per-epoch mean training loss curve plus diagnostics.
#[derive(Debug, Clone, Default)]
pub struct TrainCurve {
    pub steps: Vec<(u64, f64)>,
    pub epoch_means: Vec<f64>,
    pub lists_without_pairs: usize,
}

struct ListExample {
    features: Tensor,
    labels: Vec<f64>,
    item_ids: Vec<u64>,
    weights: Vec<f64>,
}

fn build_examples(
    catalog: &Catalog,
    sessions: &[SessionLog],
    config: &TrainConfig,
    propensity: Option<&PropensityTable>,
) -> Result<Vec<ListExample>> {
    let mut out = Vec::with_capacity(sessions.len());
    for s in sessions {
        if s.display.is_empty() {
            continue;
        }
        let labels = labels_for(&s.trace, config.label_target);
        let weights = if config.use_ips {
            let table = propensity.ok_or_else(|| {
                Error::MissingArtifact("IPS training requires a propensity table".into())
            })?;
            ips_weights(&labels, table)?
        } else {
            vec![1.0; labels.len()]
        };
        out.push(ListExample {
            features: RankerModel::list_features(catalog, &s.user_vec, s.query, &s.display)?,
            labels,
            item_ids: s.display.clone(),
            weights,
        });
    }
    Ok(out)
}

/// Mini-batch training of the configured loss over session logs.
pub fn train_ranker(
    catalog: &Catalog,
    sessions: &[SessionLog],
    user_dim: usize,
    config: &TrainConfig,
    propensity: Option<&PropensityTable>,
) -> Result<(RankerModel, TrainCurve)> {
    config.validate()?;
    if sessions.is_empty() {
        return Err(Error::arg("train_ranker: empty dataset"));
    }
    let width = scorer_feature_width(catalog, user_dim);
    let mut rng = rng_from_seed(derive_seed(config.seed, "ranker-init"));
    let mut model = match config.loss {
        LossKind::Gsf => {
            let m = config.group_size;
            let mut widths = vec![m * width];
            widths.extend_from_slice(&config.hidden);
            widths.push(m);
            let spec = MlpSpec::new(widths, Activation::Relu, Activation::Identity)?;
            let params = spec.init_params(&mut rng);
            RankerModel::Gsf {
                spec,
                params,
                group_size: m,
            }
        }
        LossKind::Dlcm => {
            let spec = DlcmSpec::new(width, config.gru_hidden, &[32])?;
            let params = spec.init_params(&mut rng);
            RankerModel::Dlcm { spec, params }
        }
        _ => {
            let mut widths = vec![width];
            widths.extend_from_slice(&config.hidden);
            widths.push(1);
            let spec = MlpSpec::new(widths, Activation::Relu, Activation::Identity)?;
            let params = spec.init_params(&mut rng);
            RankerModel::Mlp { spec, params }
        }
    };

    let examples = build_examples(catalog, sessions, config, propensity)?;
    if examples.is_empty() {
        return Err(Error::arg("train_ranker: no usable lists"));
    }
    let mut curve = TrainCurve::default();
    let adam_cfg = AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(adam_cfg, model.params());
    let mut shuffle_rng = rng_from_seed(derive_seed(config.seed, "ranker-shuffle"));
    let mut group_rng = rng_from_seed(derive_seed(config.seed, "ranker-groups"));
    let mut step = 0u64;
    for _epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let (loss, grads) =
                batch_loss_grads(&mut model, &examples, chunk, config, &mut group_rng, &mut curve)?;
            match &mut model {
                RankerModel::Mlp { params, .. }
                | RankerModel::Gsf { params, .. }
                | RankerModel::Dlcm { params, .. } => adam.step(params, &grads)?,
            }
            step += 1;
            curve.steps.push((step, loss));
            epoch_loss += loss;
            epoch_batches += 1;
        }
        curve.epoch_means.push(epoch_loss / epoch_batches.max(1) as f64);
    }
    Ok((model, curve))
}

fn batch_loss_grads(
    model: &mut RankerModel,
    examples: &[ListExample],
    chunk: &[usize],
    config: &TrainConfig,
    group_rng: &mut crate::rng::Rng,
    curve: &mut TrainCurve,
) -> Result<(f64, ParameterSet)> {
    let scale = 1.0 / chunk.len() as f64;
    match model {
        RankerModel::Mlp { spec, params } => {
            // One forward over all items of the batch.
            let width = spec.input_width();
            let mut data = Vec::new();
            let mut offsets = Vec::with_capacity(chunk.len() + 1);
            offsets.push(0usize);
            for &ei in chunk {
                data.extend_from_slice(examples[ei].features.data());
                offsets.push(offsets.last().unwrap() + examples[ei].features.rows());
            }
            let input = Tensor::matrix(*offsets.last().unwrap(), width, data)?;
            let cache = spec.forward_cached(params, &input)?;
            let scores = cache.output();
            let mut total = 0.0;
            let mut grad_out = Tensor::zeros(vec![scores.rows(), 1]);
            for (ci, &ei) in chunk.iter().enumerate() {
                let ex = &examples[ei];
                let s: Vec<f64> = (offsets[ci]..offsets[ci + 1])
                    .map(|r| scores.row(r)[0])
                    .collect();
                let (loss, dscores) = list_loss(config, &s, ex, curve)?;
                total += loss * scale;
                for (k, d) in dscores.iter().enumerate() {
                    grad_out.data_mut()[offsets[ci] + k] = d * scale;
                }
            }
            let (grads, _) = cache.backward(params, &grad_out)?;
            Ok((total, grads))
        }
        RankerModel::Gsf {
            spec,
            params,
            group_size,
        } => {
            let mut total = 0.0;
            let mut acc: Option<ParameterSet> = None;
            for &ei in chunk {
                let ex = &examples[ei];
                let n = ex.features.rows();
                let groups = sample_groups(
                    n,
                    *group_size,
                    default_group_count(n, *group_size),
                    group_rng,
                );
                let fwd = gsf_forward(spec, params, &ex.features, &groups)?;
                let (loss, mut dscores) = list_loss(config, &fwd.item_scores, ex, curve)?;
                total += loss * scale;
                dscores.iter_mut().for_each(|d| *d *= scale);
                let g = fwd.backward(params, &dscores)?;
                match &mut acc {
                    Some(a) => a.axpy(1.0, &g)?,
                    None => acc = Some(g),
                }
            }
            Ok((total, acc.unwrap()))
        }
        RankerModel::Dlcm { spec, params } => {
            let mut total = 0.0;
            let mut acc: Option<ParameterSet> = None;
            for &ei in chunk {
                let ex = &examples[ei];
                let scores = spec.score_list(params, &ex.features)?;
                let (loss, mut dscores) = list_loss(config, &scores, ex, curve)?;
                total += loss * scale;
                dscores.iter_mut().for_each(|d| *d *= scale);
                let (_, g) = spec.backward(params, &ex.features, &dscores)?;
                match &mut acc {
                    Some(a) => a.axpy(1.0, &g)?,
                    None => acc = Some(g),
                }
            }
            Ok((total, acc.unwrap()))
        }
    }
}

fn list_loss(
    config: &TrainConfig,
    scores: &[f64],
    ex: &ListExample,
    curve: &mut TrainCurve,
) -> Result<(f64, Vec<f64>)> {
    match config.loss {
        LossKind::PointwiseCe | LossKind::Gsf | LossKind::Dlcm => {
            pointwise_loss(scores, &ex.labels, &ex.weights)
        }
        LossKind::PairwiseLogistic => {
            let (loss, grad, pairs) = pairwise_loss(scores, &ex.labels, &ex.weights)?;
            if pairs == 0 {
                curve.lists_without_pairs += 1;
            }
            Ok((loss, grad))
        }
        LossKind::Listmle => {
            let perm = label_permutation(&ex.labels, &ex.item_ids);
            listmle_loss(scores, &perm, &ex.weights)
        }
    }
}

/// The base ranker for dataset preparation: point-wise MLP on click labels.
#[allow(clippy::too_many_arguments)]
pub fn train_base_ranker(
    catalog: &Catalog,
    sessions: &[SessionLog],
    user_dim: usize,
    hidden: &[usize],
    epochs: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<MlpScorer> {
    let config = TrainConfig {
        loss: LossKind::PointwiseCe,
        label_target: LabelTarget::Click,
        use_ips: false,
        epochs,
        batch_size: batch,
        learning_rate: lr,
        hidden: hidden.to_vec(),
        seed,
        ..TrainConfig::default()
    };
    let (model, _) = train_ranker(catalog, sessions, user_dim, &config, None)?;
    match model {
        RankerModel::Mlp { spec, params } => Ok(MlpScorer { spec, params }),
        _ => unreachable!("pointwise training yields an MLP"),
    }
}
