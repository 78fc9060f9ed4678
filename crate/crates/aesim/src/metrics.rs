//! Offline ranking metrics, the dynamic simulation score, the position-bias
//! probe, and the evaluation report table.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ltr::{labels_for, LabelTarget, PropensityTable, RankerModel};
use crate::pipeline::rank_ids;
use crate::world::{Catalog, ExpectedFeedback, OracleUserModel, SessionLog};

// ---------------------------------------------------------------------------
// Static metrics

/// ROC AUC by the rank statistic; tied scores contribute 0.5 per pair.
/// A single-class label vector is undefined and reported as such.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("auc: length mismatch".to_string()));
    }
    let pos = labels.iter().filter(|&&y| y > 0.0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::MetricUndefined(format!(
            "auc needs both classes (got {pos} positive, {neg} negative)"
        )));
    }
    let mut correct = 0.0;
    for i in 0..scores.len() {
        if labels[i] <= 0.0 {
            continue;
        }
        for j in 0..scores.len() {
            if labels[j] > 0.0 {
                continue;
            }
            correct += if scores[i] > scores[j] {
                1.0
            } else if scores[i] == scores[j] {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(correct / (pos * neg) as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GaucDiagnostics {
    pub groups_used: usize,
    pub groups_skipped: usize,
}

/// Grouped AUC: per-list AUC weighted by the list's positive count; lists
/// with a single label class are skipped and counted in the diagnostics.
pub fn gauc<'a, I>(groups: I) -> Result<(f64, GaucDiagnostics)>
where
    I: IntoIterator<Item = (&'a [f64], &'a [f64])>,
{
    let mut num = 0.0;
    let mut den = 0.0;
    let mut diag = GaucDiagnostics::default();
    for (scores, labels) in groups {
        match auc(scores, labels) {
            Ok(a) => {
                let w = labels.iter().filter(|&&y| y > 0.0).count() as f64;
                num += w * a;
                den += w;
                diag.groups_used += 1;
            }
            Err(Error::MetricUndefined(_)) => diag.groups_skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if den == 0.0 {
        return Err(Error::MetricUndefined(
            "gauc: no group had both label classes".into(),
        ));
    }
    Ok((num / den, diag))
}

/// NDCG@k with gain 2^rel - 1 and discount 1/log2(pos + 1). Items are
/// ordered by descending score (ties by original index); the ideal ordering
/// sorts labels descending. An all-zero list scores 0.
pub fn ndcg(scores: &[f64], labels: &[f64], k: usize) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("ndcg: length mismatch".to_string()));
    }
    if labels.iter().all(|&y| y == 0.0) {
        return Ok(0.0);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let dcg: f64 = order
        .iter()
        .take(k)
        .enumerate()
        .map(|(pos0, &i)| (2f64.powf(labels[i]) - 1.0) / ((pos0 as f64 + 2.0).log2()))
        .sum();
    let mut ideal = labels.to_vec();
    ideal.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(pos0, &y)| (2f64.powf(y) - 1.0) / ((pos0 as f64 + 2.0).log2()))
        .sum();
    Ok(dcg / idcg)
}

/// Average precision of one list under descending-score order (ties by
/// original index); lists with no positives score 0.
pub fn average_precision(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("map: length mismatch".to_string()));
    }
    let n_pos = labels.iter().filter(|&&y| y > 0.0).count();
    if n_pos == 0 {
        return Ok(0.0);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut hits = 0.0;
    let mut total = 0.0;
    for (pos0, &i) in order.iter().enumerate() {
        if labels[i] > 0.0 {
            hits += 1.0;
            total += hits / (pos0 as f64 + 1.0);
        }
    }
    Ok(total / n_pos as f64)
}

// ---------------------------------------------------------------------------
// Dynamic evaluation

/// An environment that yields per-position expected feedback for a displayed
/// list. The ground-truth oracle implements it exactly; a trained feedback
/// policy implements it with learned probabilities.
pub trait ListEnvironment {
    fn expected_list_feedback(
        &self,
        catalog: &Catalog,
        user_vec: &[f64],
        query: usize,
        display: &[u64],
    ) -> Result<ExpectedFeedback>;
}

impl ListEnvironment for OracleUserModel {
    fn expected_list_feedback(
        &self,
        catalog: &Catalog,
        user_vec: &[f64],
        query: usize,
        display: &[u64],
    ) -> Result<ExpectedFeedback> {
        let _ = query;
        self.expected_feedback(catalog, user_vec, display)
    }
}

/// Expected purchases per session when the model re-ranks each logged test
/// list and the environment reacts to the new order. Every model sees the
/// same (user, query, candidate) triples, so scores are paired.
pub fn dynamic_score(
    env: &dyn ListEnvironment,
    catalog: &Catalog,
    model: &RankerModel,
    sessions: &[SessionLog],
) -> Result<f64> {
    let per_session = session_dynamic_scores(env, catalog, model, sessions)?;
    Ok(per_session.iter().sum::<f64>() / per_session.len() as f64)
}

/// Per-session expected purchases after re-ranking, for paired comparisons
/// between models over the same sessions.
pub fn session_dynamic_scores(
    env: &dyn ListEnvironment,
    catalog: &Catalog,
    model: &RankerModel,
    sessions: &[SessionLog],
) -> Result<Vec<f64>> {
    if sessions.is_empty() {
        return Err(Error::arg("dynamic_score: no sessions"));
    }
    let mut out = Vec::with_capacity(sessions.len());
    for s in sessions {
        let scores = model.score_list(catalog, &s.user_vec, s.query, &s.display)?;
        let display = rank_ids(&s.display, &scores, s.display.len());
        let fb = env.expected_list_feedback(catalog, &s.user_vec, s.query, &display)?;
        out.push(fb.p_purchase.iter().sum());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Position-bias probe

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeMode {
    /// Exact expected click probabilities (deterministic).
    Expected,
    /// Bernoulli-sampled clicks under a seed.
    Sampled,
}

/// Position-swap propensity probe: for each position k, the item shown at k
/// is also evaluated at position 1 for the same user, and
/// p(k) = CR(item at k) / CR(same item swapped to 1), aggregated over
/// sessions. Positions with a zero denominator are flagged unreliable and
/// fall back to p(1).
pub fn bias_probe(
    env: &dyn ListEnvironment,
    catalog: &Catalog,
    sessions: &[SessionLog],
    max_k: usize,
    mode: ProbeMode,
    clip_floor: f64,
    seed: u64,
) -> Result<PropensityTable> {
    if sessions.is_empty() || max_k == 0 {
        return Err(Error::arg("bias_probe: need sessions and max_k > 0"));
    }
    let mut num = vec![0.0; max_k];
    let mut den = vec![0.0; max_k];
    let mut rng = crate::rng::rng_from_seed(crate::rng::derive_seed(seed, "bias-probe"));
    use rand::Rng as _;
    for s in sessions {
        let at_pos = env.expected_list_feedback(catalog, &s.user_vec, s.query, &s.display)?;
        for pos0 in 0..s.display.len().min(max_k) {
            // Swap the item at position k with the one at position 1 and
            // re-serve the same list, reading the item's rate at the top.
            let mut swapped = s.display.clone();
            swapped.swap(0, pos0);
            let swapped_fb =
                env.expected_list_feedback(catalog, &s.user_vec, s.query, &swapped)?;
            let (p_k, p_1) = (at_pos.p_click[pos0], swapped_fb.p_click[0]);
            match mode {
                ProbeMode::Expected => {
                    num[pos0] += p_k;
                    den[pos0] += p_1;
                }
                ProbeMode::Sampled => {
                    num[pos0] += (rng.gen_range(0.0..1.0) < p_k) as u8 as f64;
                    den[pos0] += (rng.gen_range(0.0..1.0) < p_1) as u8 as f64;
                }
            }
        }
    }
    let mut unreliable = Vec::new();
    let mut p = Vec::with_capacity(max_k);
    for k0 in 0..max_k {
        if den[k0] == 0.0 || num[k0] == 0.0 {
            unreliable.push(k0 + 1);
            p.push(1.0);
        } else {
            p.push(num[k0] / den[k0]);
        }
    }
    if unreliable.contains(&1) {
        return Err(Error::MetricUndefined(
            "bias_probe: no clicks observed at position 1".into(),
        ));
    }
    let mut table = PropensityTable::new(p, clip_floor)?;
    table.unreliable = unreliable;
    Ok(table)
}

// ---------------------------------------------------------------------------
// Whole-model evaluation and report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEval {
    pub model: String,
    pub auc: f64,
    pub gauc: f64,
    pub ndcg: f64,
    pub map: f64,
    /// Expected purchases per session after the model re-ranks test lists.
    pub dynamic: f64,
    pub gauc_diag: GaucDiagnostics,
}

/// Offline metrics on the logged test lists plus the dynamic score from
/// re-serving them through the environment.
pub fn evaluate_model(
    env: &dyn ListEnvironment,
    catalog: &Catalog,
    model: &RankerModel,
    sessions: &[SessionLog],
    target: LabelTarget,
    ndcg_k: usize,
    name: &str,
) -> Result<ModelEval> {
    if sessions.is_empty() {
        return Err(Error::arg("evaluate_model: no sessions"));
    }
    let mut all_scores = Vec::new();
    let mut all_labels = Vec::new();
    let mut lists: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(sessions.len());
    for s in sessions {
        let scores = model.score_list(catalog, &s.user_vec, s.query, &s.display)?;
        let labels = labels_for(&s.trace, target);
        all_scores.extend_from_slice(&scores);
        all_labels.extend_from_slice(&labels);
        lists.push((scores, labels));
    }
    let auc_v = auc(&all_scores, &all_labels)?;
    let (gauc_v, gauc_diag) =
        gauc(lists.iter().map(|(s, l)| (s.as_slice(), l.as_slice())))?;
    let mut ndcg_sum = 0.0;
    let mut map_sum = 0.0;
    for (s, l) in &lists {
        ndcg_sum += ndcg(s, l, ndcg_k)?;
        map_sum += average_precision(s, l)?;
    }
    let n = lists.len() as f64;
    let dynamic = dynamic_score(env, catalog, model, sessions)?;
    Ok(ModelEval {
        model: name.to_string(),
        auc: auc_v,
        gauc: gauc_v,
        ndcg: ndcg_sum / n,
        map: map_sum / n,
        dynamic,
        gauc_diag,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ModelEval>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "model,auc,gauc,ndcg,map,dynamic_score,gauc_groups_used,gauc_groups_skipped\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}\n",
                r.model,
                r.auc,
                r.gauc,
                r.ndcg,
                r.map,
                r.dynamic,
                r.gauc_diag.groups_used,
                r.gauc_diag.groups_skipped
            ));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12} {:>8} {:>8} {:>8} {:>8} {:>13}\n",
            "model", "AUC", "GAUC", "NDCG", "MAP", "dynamic score"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>13.6}\n",
                r.model, r.auc, r.gauc, r.ndcg, r.map, r.dynamic
            ));
        }
        out
    }

    pub fn save(&self, csv_path: &std::path::Path) -> Result<()> {
        std::fs::write(csv_path, self.to_csv())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ltr::{train_ranker, TrainConfig};
    use crate::world::{generate_catalog, DisplayServer, OracleConfig};

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn auc_matches_pair_counting_oracle() {
        // Perfect, inverted, and tied orderings.
        assert_close(auc(&[0.9, 0.8, 0.2, 0.1], &[1.0, 1.0, 0.0, 0.0]).unwrap(), 1.0, 1e-12);
        assert_close(auc(&[0.1, 0.2, 0.8, 0.9], &[1.0, 1.0, 0.0, 0.0]).unwrap(), 0.0, 1e-12);
        assert_close(auc(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), 0.5, 1e-12);
        // Hand case: scores [3,1,2], labels [1,0,1]: pairs (3>1)=1, (2>1)=1.
        assert_close(auc(&[3.0, 1.0, 2.0], &[1.0, 0.0, 1.0]).unwrap(), 1.0, 1e-12);
        // Mixed: scores [1,2,3,4], labels [0,1,0,1] -> pairs: (2>1)+(2<3=0)+(4>1)+(4>3) = 3/4.
        assert_close(auc(&[1.0, 2.0, 3.0, 4.0], &[0.0, 1.0, 0.0, 1.0]).unwrap(), 0.75, 1e-12);
        assert!(matches!(
            auc(&[1.0, 2.0], &[1.0, 1.0]),
            Err(Error::MetricUndefined(_))
        ));
    }

    #[test]
    fn gauc_weights_by_positive_count_and_skips_single_class() {
        let g1 = (vec![0.9, 0.1], vec![1.0, 0.0]); // AUC 1, one positive
        let g2 = (vec![0.1, 0.5, 0.9], vec![1.0, 1.0, 0.0]); // AUC 0, two positives
        let g3 = (vec![0.5, 0.6], vec![0.0, 0.0]); // skipped
        let groups = [g1, g2, g3];
        let (v, diag) = gauc(groups.iter().map(|(s, l)| (s.as_slice(), l.as_slice()))).unwrap();
        assert_close(v, (1.0 * 1.0 + 2.0 * 0.0) / 3.0, 1e-12);
        assert_eq!(diag.groups_used, 2);
        assert_eq!(diag.groups_skipped, 1);
    }

    #[test]
    fn ndcg_hand_values() {
        // Ideal order: ndcg 1; all-zero: 0.
        assert_close(ndcg(&[3.0, 2.0, 1.0], &[1.0, 1.0, 0.0], 3).unwrap(), 1.0, 1e-12);
        assert_eq!(ndcg(&[1.0, 2.0], &[0.0, 0.0], 2).unwrap(), 0.0);
        // Single positive at rank 2 of 2: dcg = 1/log2(3), idcg = 1.
        assert_close(
            ndcg(&[0.9, 0.1], &[0.0, 1.0], 2).unwrap(),
            1.0 / 3f64.log2(),
            1e-12,
        );
        // Depth cutoff hides a positive past k.
        assert_close(ndcg(&[0.9, 0.1], &[0.0, 1.0], 1).unwrap(), 0.0, 1e-12);
        // Graded gains: labels [2,1] in the wrong order.
        let got = ndcg(&[0.1, 0.9], &[2.0, 1.0], 2).unwrap();
        let want = (1.0 + 3.0 / 3f64.log2()) / (3.0 + 1.0 / 3f64.log2());
        assert_close(got, want, 1e-12);
    }

    #[test]
    fn average_precision_hand_values() {
        // Positives at ranks 1 and 3: (1/1 + 2/3) / 2.
        assert_close(
            average_precision(&[0.9, 0.5, 0.4], &[1.0, 0.0, 1.0]).unwrap(),
            (1.0 + 2.0 / 3.0) / 2.0,
            1e-12,
        );
        assert_eq!(average_precision(&[0.9, 0.5], &[0.0, 0.0]).unwrap(), 0.0);
        assert_close(average_precision(&[0.2, 0.8], &[0.0, 1.0]).unwrap(), 1.0, 1e-12);
    }

    struct FirstKServer(usize);
    impl DisplayServer for FirstKServer {
        fn serve(
            &self,
            catalog: &Catalog,
            _user_vec: &[f64],
            query: usize,
            _seed: u64,
        ) -> Result<Vec<u64>> {
            Ok(catalog
                .category_items(query)?
                .iter()
                .take(self.0)
                .map(|&idx| catalog.item_by_index(idx).item_id)
                .collect())
        }
    }

    fn tiny_world(seed: u64) -> (Catalog, OracleUserModel, Vec<SessionLog>) {
        let catalog = generate_catalog(60, 3, &[4], 4, seed).unwrap();
        let oracle = OracleUserModel::generate(
            &catalog,
            OracleConfig {
                user_dim: 4,
                seed,
                ..OracleConfig::default()
            },
        )
        .unwrap();
        let logs =
            crate::world::log_sessions(&oracle, &catalog, &FirstKServer(8), 50, seed).unwrap();
        (catalog, oracle, logs)
    }

    #[test]
    fn dynamic_score_matches_direct_expectation_for_identity_order() {
        // A model that preserves the display order must score exactly the
        // summed expected purchase probabilities of the logged lists.
        let (catalog, oracle, logs) = tiny_world(71);
        let mut expect = 0.0;
        for s in &logs {
            let fb = oracle
                .expected_feedback(&catalog, &s.user_vec, &s.display)
                .unwrap();
            expect += fb.p_purchase.iter().sum::<f64>();
        }
        expect /= logs.len() as f64;
        // Environment trait gives the same numbers as direct calls.
        let s0 = &logs[0];
        let via_trait = oracle
            .expected_list_feedback(&catalog, &s0.user_vec, s0.query, &s0.display)
            .unwrap();
        let direct = oracle
            .expected_feedback(&catalog, &s0.user_vec, &s0.display)
            .unwrap();
        assert_eq!(via_trait, direct);
        // And a trained model's dynamic score is finite and bounded by list
        // length.
        let config = TrainConfig {
            label_target: LabelTarget::Click,
            epochs: 1,
            batch_size: 16,
            hidden: vec![8],
            seed: 2,
            ..TrainConfig::default()
        };
        let (model, _) = train_ranker(&catalog, &logs, 4, &config, None).unwrap();
        let v = dynamic_score(&oracle, &catalog, &model, &logs).unwrap();
        assert!(v.is_finite() && v >= 0.0 && v <= 8.0);
        assert!(expect.is_finite() && expect >= 0.0);
    }

    #[test]
    fn bias_probe_recovers_examination_curve_in_expected_mode() {
        let (catalog, oracle, logs) = tiny_world(72);
        let table = bias_probe(&oracle, &catalog, &logs, 8, ProbeMode::Expected, 0.1, 0).unwrap();
        for k in 1..=8usize {
            let want = if k == 1 { 1.0 } else { 1.0 / ((k as f64) + 1.0).log2() };
            assert_close(table.propensity(k).unwrap(), want, 1e-9);
        }
        assert!(table.unreliable.is_empty());
    }

    #[test]
    fn sampled_probe_approaches_expected_probe() {
        let catalog = generate_catalog(60, 3, &[4], 4, 73).unwrap();
        let oracle = OracleUserModel::generate(
            &catalog,
            OracleConfig {
                user_dim: 4,
                seed: 73,
                ..OracleConfig::default()
            },
        )
        .unwrap();
        let logs =
            crate::world::log_sessions(&oracle, &catalog, &FirstKServer(4), 4000, 73).unwrap();
        let sampled =
            bias_probe(&oracle, &catalog, &logs, 4, ProbeMode::Sampled, 0.1, 5).unwrap();
        for k in 2..=4usize {
            let want = 1.0 / ((k as f64) + 1.0).log2();
            assert!(
                (sampled.propensity(k).unwrap() - want).abs() < 0.12,
                "position {k}: {} vs {want}",
                sampled.propensity(k).unwrap()
            );
        }
    }

    #[test]
    fn evaluate_model_produces_consistent_report() {
        let (catalog, oracle, logs) = tiny_world(74);
        let config = TrainConfig {
            label_target: LabelTarget::Click,
            epochs: 2,
            batch_size: 16,
            hidden: vec![8],
            seed: 4,
            ..TrainConfig::default()
        };
        let (model, _) = train_ranker(&catalog, &logs, 4, &config, None).unwrap();
        let eval = evaluate_model(
            &oracle,
            &catalog,
            &model,
            &logs,
            LabelTarget::Click,
            8,
            "pointwise",
        )
        .unwrap();
        assert!(eval.auc > 0.0 && eval.auc < 1.0);
        assert!(eval.gauc > 0.0 && eval.gauc <= 1.0);
        assert!(eval.ndcg >= 0.0 && eval.ndcg <= 1.0);
        assert!(eval.map >= 0.0 && eval.map <= 1.0);
        assert!(eval.dynamic.is_finite());
        // Evaluation is deterministic.
        let again = evaluate_model(
            &oracle,
            &catalog,
            &model,
            &logs,
            LabelTarget::Click,
            8,
            "pointwise",
        )
        .unwrap();
        assert_eq!(eval, again);
        let report = EvalReport { rows: vec![eval] };
        let csv = report.to_csv();
        assert!(csv.starts_with("model,auc,gauc"));
        assert_eq!(csv.lines().count(), 2);
        assert!(report.to_table().contains("pointwise"));
    }
}
