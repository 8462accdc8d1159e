//! Balanced accuracy, balanced one-vs-rest AUC, and the specialization /
//! generalization evaluation protocol.

use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::model::{predict_proba, ParamBlock};

/// Tolerance on row sums for [`PredictionBatch::probabilities`].
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// Row-major `n x C` class scores with true labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBatch {
    scores: Vec<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl PredictionBatch {
    /// Arbitrary real scores; only order within a column and argmax within
    /// a row matter to the metrics.
    pub fn new(scores: Vec<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 || scores.len() != labels.len() * num_classes {
            return Err(Error::shape(
                "prediction_batch",
                format!("{} scores for {} rows of {} classes", scores.len(), labels.len(), num_classes),
            ));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Metric(format!("label {} out of range for {} classes", y, num_classes)));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::Metric("NaN score".into()));
        }
        Ok(PredictionBatch {
            scores,
            labels,
            num_classes,
        })
    }

    /// Softmax outputs: every row must sum to one.
    pub fn probabilities(scores: Vec<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let batch = PredictionBatch::new(scores, labels, num_classes)?;
        for (i, row) in batch.scores.chunks(num_classes).enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::Metric(format!("row {} sums to {}", i, sum)));
            }
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Index of the first maximal score in each row.
    pub fn argmax(&self) -> Vec<usize> {
        self.scores
            .chunks(self.num_classes)
            .map(|row| {
                let mut best = 0;
                for (c, &s) in row.iter().enumerate().skip(1) {
                    if s > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

/// Mean per-class recall over the classes present in the labels.
pub fn balanced_accuracy(preds: &PredictionBatch) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Metric("balanced accuracy of an empty batch".into()));
    }
    let mut support = vec![0usize; preds.num_classes];
    let mut correct = vec![0usize; preds.num_classes];
    for (&y, p) in preds.labels.iter().zip(preds.argmax()) {
        support[y] += 1;
        if p == y {
            correct[y] += 1;
        }
    }
    let mut total = 0.0;
    let mut present = 0usize;
    for (&hit, &n) in correct.iter().zip(&support) {
        if n > 0 {
            total += hit as f64 / n as f64;
            present += 1;
        }
    }
    Ok(total / present as f64)
}

/// One-vs-rest AUC of every class, `None` where the class lacks positives
/// or negatives.
pub fn per_class_auc(preds: &PredictionBatch) -> Vec<Option<f64>> {
    let n = preds.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut ranks = vec![0.0; n];
    (0..preds.num_classes)
        .map(|c| {
            let score = |i: usize| preds.scores[i * preds.num_classes + c];
            let positives = preds.labels.iter().filter(|&&y| y == c).count();
            let negatives = n - positives;
            if positives == 0 || negatives == 0 {
                return None;
            }
            order.sort_by(|&a, &b| score(a).total_cmp(&score(b)));
            midranks(&order, &score, &mut ranks);
            let rank_sum: f64 = (0..n).filter(|&i| preds.labels[i] == c).map(|i| ranks[i]).sum();
            let p = positives as f64;
            let u = rank_sum - p * (p + 1.0) / 2.0;
            Some(u / (p * negatives as f64))
        })
        .collect()
}

/// 1-based ranks with tied scores sharing the mean of their positions.
fn midranks(order: &[usize], score: &dyn Fn(usize) -> f64, ranks: &mut [f64]) {
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && score(order[end]) == score(order[start]) {
            end += 1;
        }
        let mid = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = mid;
        }
        start = end;
    }
}

/// Mean one-vs-rest AUC (Mann-Whitney with midranks) over scoreable classes.
pub fn balanced_auc(preds: &PredictionBatch) -> Result<f64> {
    let aucs: Vec<f64> = per_class_auc(preds).into_iter().flatten().collect();
    if aucs.is_empty() {
        return Err(Error::Metric("no class has both positives and negatives".into()));
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub bacc: f64,
    pub bauc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub client_id: usize,
    pub bacc: f64,
    /// Absent when the client's test shard holds a single class.
    pub bauc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: usize,
    pub method: String,
    pub seed: u64,
    pub clients: Vec<ClientMetrics>,
    pub specialization: SplitMetrics,
    pub generalization: SplitMetrics,
    pub average: SplitMetrics,
}

impl MetricsRecord {
    pub fn new(
        round: usize,
        method: impl Into<String>,
        seed: u64,
        clients: Vec<ClientMetrics>,
        specialization: SplitMetrics,
        generalization: SplitMetrics,
    ) -> Self {
        MetricsRecord {
            round,
            method: method.into(),
            seed,
            clients,
            average: SplitMetrics {
                bacc: (specialization.bacc + generalization.bacc) / 2.0,
                bauc: (specialization.bauc + generalization.bauc) / 2.0,
            },
            specialization,
            generalization,
        }
    }
}

/// Extractor plus the head used for prediction.
#[derive(Clone, Copy, Debug)]
pub struct Predictor<'a> {
    pub extractor: &'a ParamBlock,
    pub head: &'a ParamBlock,
}

pub fn predict(dataset: &Dataset, indices: &[usize], model: Predictor<'_>) -> Result<PredictionBatch> {
    if indices.is_empty() {
        return Err(Error::Metric("empty test shard".into()));
    }
    let scores = predict_proba(model.extractor, model.head, &dataset.batch(indices))?;
    PredictionBatch::probabilities(scores, dataset.batch_labels(indices), dataset.num_classes())
}

pub fn evaluate_client(
    dataset: &Dataset,
    client_id: usize,
    test: &[usize],
    model: Predictor<'_>,
) -> Result<ClientMetrics> {
    let batch = predict(dataset, test, model)?;
    Ok(ClientMetrics {
        client_id,
        bacc: balanced_accuracy(&batch)?,
        bauc: balanced_auc(&batch).ok(),
    })
}

/// Each client scored on its own test shard with its own predictor;
/// unweighted means over clients. Clients whose shard holds a single class
/// have no AUC and are left out of the bAUC mean.
pub fn evaluate_specialization(
    dataset: &Dataset,
    clients: &[(usize, &[usize], Predictor<'_>)],
) -> Result<(SplitMetrics, Vec<ClientMetrics>)> {
    if clients.is_empty() {
        return Err(Error::Metric("no clients to evaluate".into()));
    }
    let per_client = clients
        .iter()
        .map(|(id, test, model)| evaluate_client(dataset, *id, test, *model))
        .collect::<Result<Vec<_>>>()?;
    let bacc = per_client.iter().map(|m| m.bacc).sum::<f64>() / per_client.len() as f64;
    let aucs: Vec<f64> = per_client.iter().filter_map(|m| m.bauc).collect();
    if aucs.is_empty() {
        return Err(Error::Metric("no client test shard is AUC-scoreable".into()));
    }
    let bauc = aucs.iter().sum::<f64>() / aucs.len() as f64;
    Ok((SplitMetrics { bacc, bauc }, per_client))
}

/// Every predictor scored on the aggregated test set, metrics averaged
/// over predictors (one predictor for a federated model, one per client
/// for local learning).
pub fn evaluate_generalization(
    dataset: &Dataset,
    aggregated_test: &[usize],
    models: &[Predictor<'_>],
) -> Result<SplitMetrics> {
    if models.is_empty() {
        return Err(Error::Metric("no model to evaluate".into()));
    }
    let mut bacc = 0.0;
    let mut bauc = 0.0;
    for model in models {
        let batch = predict(dataset, aggregated_test, *model)?;
        bacc += balanced_accuracy(&batch)?;
        bauc += balanced_auc(&batch)?;
    }
    let n = models.len() as f64;
    Ok(SplitMetrics {
        bacc: bacc / n,
        bauc: bauc / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Param;
    use crate::testing::{confusion_balanced_accuracy, pairwise_balanced_auc};
    use proptest::prelude::*;

    fn batch(scores: Vec<f64>, labels: Vec<usize>, c: usize) -> PredictionBatch {
        PredictionBatch::new(scores, labels, c).unwrap()
    }

    #[test]
    fn perfect_and_chance_accuracy() {
        let p = batch(vec![0.9, 0.1, 0.2, 0.8], vec![0, 1], 2);
        assert_eq!(balanced_accuracy(&p).unwrap(), 1.0);
        let one_class = batch(vec![0.9, 0.1, 0.9, 0.1], vec![0, 1], 2);
        assert_eq!(balanced_accuracy(&one_class).unwrap(), 0.5);
    }

    #[test]
    fn recalls_one_half_three_quarters() {
        // class 0: 1/1, class 1: 1/2, class 2: 3/4
        let rows = [(0, 0), (1, 1), (1, 0), (2, 2), (2, 2), (2, 2), (2, 1)];
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (y, pred) in rows {
            let mut row = vec![0.0; 3];
            row[pred] = 1.0;
            scores.extend(row);
            labels.push(y);
        }
        assert!((balanced_accuracy(&batch(scores, labels, 3)).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn auc_three_of_four_pairs() {
        let scores = vec![0.9, 0.1, 0.6, 0.4, 0.65, 0.35, 0.2, 0.8];
        let p = batch(scores, vec![0, 0, 1, 1], 2);
        assert_eq!(per_class_auc(&p)[1], Some(0.75));
        let sep = batch(vec![0.9, 0.1, 0.8, 0.2, 0.1, 0.9], vec![0, 0, 1], 2);
        assert_eq!(per_class_auc(&sep)[0], Some(1.0));
    }

    #[test]
    fn random_scores_have_chance_auc() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 4000;
        let scores: Vec<f64> = (0..n * 3).map(|_| rng.random()).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let auc = balanced_auc(&batch(scores, labels, 3)).unwrap();
        assert!((auc - 0.5).abs() < 0.05);
    }

    #[test]
    fn errors_and_exclusions() {
        assert!(balanced_accuracy(&batch(vec![], vec![], 2)).is_err());
        let single = batch(vec![0.3, 0.7, 0.4, 0.6], vec![1, 1], 2);
        assert!(balanced_auc(&single).is_err());
        assert!(PredictionBatch::new(vec![0.5; 3], vec![0, 1], 2).is_err());
        assert!(PredictionBatch::new(vec![0.5; 4], vec![0, 2], 2).is_err());
        assert!(PredictionBatch::probabilities(vec![0.5, 0.6], vec![0], 2).is_err());
        assert!(PredictionBatch::probabilities(vec![0.5, 0.5], vec![0], 2).is_ok());
    }

    #[test]
    fn record_average_is_exact_mean() {
        let s = SplitMetrics { bacc: 0.7, bauc: 0.9 };
        let g = SplitMetrics { bacc: 0.6, bauc: 0.8 };
        let r = MetricsRecord::new(3, "fca", 1, vec![], s, g);
        assert_eq!(r.average.bacc, (0.7 + 0.6) / 2.0);
        assert_eq!(r.average.bauc, (0.9 + 0.8) / 2.0);
    }

    fn fixed_head(bias: Vec<f64>, features: usize) -> ParamBlock {
        let c = bias.len();
        ParamBlock {
            params: vec![
                Param {
                    name: "head.weight".into(),
                    shape: vec![c, features],
                    values: vec![0.0; c * features],
                },
                Param {
                    name: "head.bias".into(),
                    shape: vec![c],
                    values: bias,
                },
            ],
        }
    }

    fn identity_extractor(d: usize) -> ParamBlock {
        let mut w = vec![0.0; d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        ParamBlock {
            params: vec![
                Param {
                    name: "extractor.0.weight".into(),
                    shape: vec![d, d],
                    values: w,
                },
                Param {
                    name: "extractor.0.bias".into(),
                    shape: vec![d],
                    values: vec![0.0; d],
                },
            ],
        }
    }

    #[test]
    fn majority_head_scores_one_on_single_class_shard() {
        let ds = Dataset::new(vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6], 2, vec![2, 2, 2], 3).unwrap();
        let ex = identity_extractor(2);
        let head = fixed_head(vec![0.0, 0.0, 5.0], 2);
        let only = evaluate_specialization(&ds, &[(0, &[0, 1, 2][..], Predictor { extractor: &ex, head: &head })]);
        assert!(matches!(only, Err(Error::Metric(_))));
        let m = evaluate_client(&ds, 0, &[0, 1, 2], Predictor { extractor: &ex, head: &head }).unwrap();
        assert_eq!(m.bacc, 1.0);
        assert_eq!(m.bauc, None);
    }

    #[test]
    fn single_client_specialization_equals_generalization() {
        let ds = Dataset::new(vec![1.0, 0.0, 0.0, 1.0, 2.0, 0.5, 0.3, 1.5], 2, vec![0, 1, 0, 1], 2).unwrap();
        let ex = identity_extractor(2);
        let head = ParamBlock {
            params: vec![
                Param {
                    name: "head.weight".into(),
                    shape: vec![2, 2],
                    values: vec![1.0, 0.0, 0.0, 1.0],
                },
                Param {
                    name: "head.bias".into(),
                    shape: vec![2],
                    values: vec![0.0, 0.0],
                },
            ],
        };
        let model = Predictor { extractor: &ex, head: &head };
        let test = [0usize, 1, 2, 3];
        let (spec, per_client) = evaluate_specialization(&ds, &[(0, &test[..], model)]).unwrap();
        let gen = evaluate_generalization(&ds, &test, &[model]).unwrap();
        assert_eq!(spec, gen);
        assert_eq!(per_client[0].bacc, spec.bacc);
        assert_eq!(spec.bacc, 1.0);
    }

    fn scores_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<usize>, usize)> {
        (2usize..5, 1usize..60).prop_flat_map(|(c, n)| {
            (
                prop::collection::vec((0u8..6).prop_map(|v| v as f64 / 5.0), n * c),
                prop::collection::vec(0..c, n),
                Just(c),
            )
        })
    }

    proptest! {
        #[test]
        fn matches_oracles((scores, labels, c) in scores_strategy()) {
            let p = batch(scores.clone(), labels.clone(), c);
            prop_assert_eq!(balanced_accuracy(&p).ok(), confusion_balanced_accuracy(&scores, &labels, c));
            prop_assert_eq!(balanced_auc(&p).ok(), pairwise_balanced_auc(&scores, &labels, c));
        }

        #[test]
        fn monotone_transform_invariance((scores, labels, c) in scores_strategy(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
            let mapped: Vec<f64> = scores.iter().map(|s| (a * s + b).exp()).collect();
            let p = batch(scores, labels.clone(), c);
            let q = batch(mapped, labels, c);
            prop_assert_eq!(balanced_accuracy(&p).ok(), balanced_accuracy(&q).ok());
            prop_assert_eq!(balanced_auc(&p).ok(), balanced_auc(&q).ok());
        }

        #[test]
        fn absent_class_changes_nothing((scores, labels, c) in scores_strategy()) {
            let p = batch(scores.clone(), labels.clone(), c);
            let widened: Vec<f64> = scores.chunks(c).flat_map(|row| row.iter().copied().chain([-1.0])).collect();
            let q = batch(widened, labels, c + 1);
            prop_assert_eq!(balanced_accuracy(&p).ok(), balanced_accuracy(&q).ok());
            prop_assert_eq!(balanced_auc(&p).ok(), balanced_auc(&q).ok());
        }

        #[test]
        fn metrics_in_unit_interval((scores, labels, c) in scores_strategy()) {
            let p = batch(scores, labels, c);
            let acc = balanced_accuracy(&p).unwrap();
            prop_assert!((0.0..=1.0).contains(&acc));
            if let Ok(auc) = balanced_auc(&p) {
                prop_assert!((0.0..=1.0).contains(&auc));
            }
        }
    }
}
