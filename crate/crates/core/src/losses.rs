//! Training objectives: cross-entropy, focal, balanced softmax, the KL
//! consistency term between the federated and personalized heads, their
//! weighted combination, and the FedProx proximal penalty.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::Param;

/// Probability used in place of an exact zero when taking `log π`.
pub const ZERO_PRIOR_FLOOR: f64 = 1e-12;

/// Empirical class frequencies of one client's training shard.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPrior {
    pub client_id: usize,
    pub counts: Vec<u64>,
    pub pi: Vec<f64>,
}

impl ClassPrior {
    pub fn from_counts(client_id: usize, counts: Vec<u64>) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::Contract(format!(
                "client {} has an empty training shard",
                client_id
            )));
        }
        let pi = counts.iter().map(|&c| c as f64 / total as f64).collect();
        Ok(ClassPrior {
            client_id,
            counts,
            pi,
        })
    }

    pub fn uniform(classes: usize) -> Self {
        ClassPrior::from_counts(usize::MAX, vec![1; classes]).expect("non-empty")
    }

    pub fn num_classes(&self) -> usize {
        self.pi.len()
    }

    /// `ln π`, with zero-count classes clamped to `ln ZERO_PRIOR_FLOOR`.
    pub fn log_prior(&self) -> Vec<f64> {
        self.pi.iter().map(|&p| p.max(ZERO_PRIOR_FLOOR).ln()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyDirection {
    /// Detached personalized head guides the federated head.
    PersonalizedGuidesFederated,
    /// Detached federated head guides the personalized head.
    FederatedGuidesPersonalized,
    /// Both of the above, summed.
    Bidirectional,
}

impl ConsistencyDirection {
    pub const ALL: [ConsistencyDirection; 3] = [
        ConsistencyDirection::PersonalizedGuidesFederated,
        ConsistencyDirection::FederatedGuidesPersonalized,
        ConsistencyDirection::Bidirectional,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ConsistencyDirection::PersonalizedGuidesFederated => "personalized_guides_federated",
            ConsistencyDirection::FederatedGuidesPersonalized => "federated_guides_personalized",
            ConsistencyDirection::Bidirectional => "bidirectional",
        }
    }

    /// Whether the consistency term sends gradient into the personalized head.
    pub fn trains_personal_head(self) -> bool {
        !matches!(self, ConsistencyDirection::PersonalizedGuidesFederated)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub direction: ConsistencyDirection,
    /// Include the consistency term at all.
    pub consistency: bool,
    /// Compare prior-shifted rather than raw logits in the consistency term.
    pub calibrated_consistency: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 1.0,
            direction: ConsistencyDirection::PersonalizedGuidesFederated,
            consistency: true,
            calibrated_consistency: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{} must be finite and >= 0, got {}", name, v)));
            }
        }
        Ok(())
    }

    /// Whether the personalized head receives any gradient under these weights.
    pub fn trains_personal_head(&self) -> bool {
        self.lambda2 > 0.0 || (self.consistency && self.direction.trains_personal_head())
    }
}

fn check_labels(g: &Graph, logits: Var, labels: &[usize]) -> Result<usize> {
    let shape = g.value(logits).shape();
    let (rows, classes) = match shape {
        [r, c] => (*r, *c),
        s => return Err(Error::shape("loss", format!("logits must be a matrix, got {:?}", s))),
    };
    if rows != labels.len() || rows == 0 {
        return Err(Error::shape("loss", format!("{} labels for {} logit rows", labels.len(), rows)));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Contract(format!("label {} out of range for {} classes", bad, classes)));
    }
    Ok(classes)
}

/// Mean negative log-likelihood of the labelled class.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    check_labels(g, logits, labels)?;
    let lsm = g.log_softmax(logits)?;
    let picked = g.gather(lsm, labels)?;
    let mean = g.mean(picked);
    Ok(g.scale(mean, -1.0))
}

/// Mean of `-(1 - p_t)^γ · ln p_t`.
pub fn focal_loss(g: &mut Graph, logits: Var, labels: &[usize], gamma: f64) -> Result<Var> {
    if !(gamma >= 0.0) {
        return Err(Error::Config(format!("focal gamma must be >= 0, got {}", gamma)));
    }
    check_labels(g, logits, labels)?;
    let lsm = g.log_softmax(logits)?;
    let log_pt = g.gather(lsm, labels)?;
    let pt = g.exp(log_pt);
    let neg = g.scale(pt, -1.0);
    let one_minus = g.add_scalar(neg, 1.0);
    let modulation = g.powf(one_minus, gamma)?;
    let weighted = g.mul(modulation, log_pt)?;
    let mean = g.mean(weighted);
    Ok(g.scale(mean, -1.0))
}

/// `logits + ln π` broadcast over rows.
pub fn calibrate(g: &mut Graph, logits: Var, prior: &ClassPrior) -> Result<Var> {
    let shift = g.constant(Tensor::vector(prior.log_prior()));
    g.add(logits, shift)
}

/// Cross-entropy on prior-shifted logits.
pub fn balanced_softmax(g: &mut Graph, logits: Var, labels: &[usize], prior: &ClassPrior) -> Result<Var> {
    let classes = check_labels(g, logits, labels)?;
    if prior.num_classes() != classes {
        return Err(Error::shape(
            "balanced_softmax",
            format!("prior over {} classes, logits over {}", prior.num_classes(), classes),
        ));
    }
    if let Some(&y) = labels.iter().find(|&&y| prior.counts[y] == 0) {
        return Err(Error::Contract(format!(
            "label {} has zero count in the prior of client {}",
            y, prior.client_id
        )));
    }
    let shifted = calibrate(g, logits, prior)?;
    cross_entropy(g, shifted, labels)
}

/// Batch-mean `KL(softmax(guide) ‖ softmax(pred))` with the guide detached.
fn guided_kl(g: &mut Graph, guide: Var, pred: Var) -> Result<Var> {
    let rows = g.value(pred).shape()[0];
    let fixed = g.stop_gradient(guide);
    let log_guide = g.log_softmax(fixed)?;
    let log_pred = g.log_softmax(pred)?;
    let guide_p = g.exp(log_guide);
    let gap = g.sub(log_guide, log_pred)?;
    let terms = g.mul(guide_p, gap)?;
    let total = g.sum(terms);
    Ok(g.scale(total, 1.0 / rows as f64))
}

pub fn kl_consistency(
    g: &mut Graph,
    fed_logits: Var,
    personal_logits: Var,
    direction: ConsistencyDirection,
) -> Result<Var> {
    let (a, b) = (g.value(fed_logits).shape(), g.value(personal_logits).shape());
    if a != b || a.len() != 2 {
        return Err(Error::shape("kl_consistency", format!("{:?} vs {:?}", a, b)));
    }
    match direction {
        ConsistencyDirection::PersonalizedGuidesFederated => guided_kl(g, personal_logits, fed_logits),
        ConsistencyDirection::FederatedGuidesPersonalized => guided_kl(g, fed_logits, personal_logits),
        ConsistencyDirection::Bidirectional => {
            let to_fed = guided_kl(g, personal_logits, fed_logits)?;
            let to_personal = guided_kl(g, fed_logits, personal_logits)?;
            g.add(to_fed, to_personal)
        }
    }
}

/// The client objective and its parts, all nodes of the same graph.
#[derive(Clone, Copy, Debug)]
pub struct FcaLoss {
    pub total: Var,
    pub federated: Var,
    pub personal: Var,
    pub consistency: Option<Var>,
}

/// `λ1·BSM(fed) + λ2·BSM(personal) + KL`, one graph for all three heads' paths.
pub fn fca_client_loss(
    g: &mut Graph,
    fed_logits: Var,
    personal_logits: Var,
    labels: &[usize],
    prior: &ClassPrior,
    weights: &LossWeights,
) -> Result<FcaLoss> {
    let federated = balanced_softmax(g, fed_logits, labels, prior)?;
    let personal = balanced_softmax(g, personal_logits, labels, prior)?;
    let a = g.scale(federated, weights.lambda1);
    let b = g.scale(personal, weights.lambda2);
    let mut total = g.add(a, b)?;
    let consistency = if weights.consistency {
        let (f, p) = if weights.calibrated_consistency {
            (calibrate(g, fed_logits, prior)?, calibrate(g, personal_logits, prior)?)
        } else {
            (fed_logits, personal_logits)
        };
        let con = kl_consistency(g, f, p, weights.direction)?;
        total = g.add(total, con)?;
        Some(con)
    } else {
        None
    };
    Ok(FcaLoss {
        total,
        federated,
        personal,
        consistency,
    })
}

/// `(μ/2)·Σ‖current − anchor‖²` over paired parameters.
pub fn proximal_term(g: &mut Graph, current: &[Var], anchor: &[&Param], mu: f64) -> Result<Var> {
    if current.len() != anchor.len() {
        return Err(Error::shape(
            "proximal_term",
            format!("{} parameters vs {} anchors", current.len(), anchor.len()),
        ));
    }
    let mut total: Option<Var> = None;
    for (&v, p) in current.iter().zip(anchor) {
        let a = g.constant(Tensor::new(p.shape.clone(), p.values.clone())?);
        let diff = g.sub(v, a)?;
        let sq = g.mul(diff, diff)?;
        let s = g.sum(sq);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    };
    Ok(g.scale(total, mu / 2.0))
}
