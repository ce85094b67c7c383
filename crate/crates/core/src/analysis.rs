//! Numerical checks on recorded runs: the FedAvg = FedSGD + Σ FOMAML
//! decomposition, the first-order MAML gap, rounds-to-threshold statistics,
//! and replica aggregation.
//!
//! Sign convention: trajectories store raw gradients `∇L(θ_{j−1}, b_j)`; the
//! step size `−β` is applied only when an update vector is built. Under that
//! convention a client's FedAvg delta is exactly `−β Σ_j ∇L(θ_{j−1}, b_j)`,
//! so splitting the sum into its first term (FedSGD) and the remaining terms
//! (FOMAML(j), j ≥ 1) is an identity on every recorded trajectory.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{fomaml_update, EvalSnapshot, RoundTrace};
use crate::model::{self, gradient, maml_gradient_oracle, sgd_trajectory, Batch, Gradient, ModelSpec, ParamVector};
use crate::personalization::mean_std;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub round: usize,
    pub clients: usize,
    pub steps: usize,
    pub g_fedavg: Vec<f64>,
    pub g_fedsgd: Vec<f64>,
    /// `g_FOMAML(j)` for `j = 1..K−1`.
    pub g_fomaml_by_j: Vec<Vec<f64>>,
    pub residual_norm: f64,
}

impl DecompositionReport {
    pub fn fomaml_norms(&self) -> Vec<f64> {
        self.g_fomaml_by_j.iter().map(|g| model::norm(g)).collect()
    }
}

impl fmt::Display for DecompositionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "round: {}", self.round)?;
        writeln!(f, "clients: {}", self.clients)?;
        writeln!(f, "steps: {}", self.steps)?;
        writeln!(f, "norm g_fedavg: {:.6e}", model::norm(&self.g_fedavg))?;
        writeln!(f, "norm g_fedsgd: {:.6e}", model::norm(&self.g_fedsgd))?;
        for (j, n) in self.fomaml_norms().iter().enumerate() {
            writeln!(f, "norm g_fomaml({}): {:.6e}", j + 1, n)?;
        }
        write!(f, "residual: {:.3e}", self.residual_norm)
    }
}

/// Splits a traced round's aggregated update into its FedSGD and FOMAML(j)
/// parts and reports the norm of what is left over.
///
/// Requires per-step gradients for every client, a common step count, and
/// equal client weights.
pub fn decompose_round(trace: &RoundTrace, beta: f64) -> Result<DecompositionReport> {
    if trace.clients.is_empty() {
        return Err(Error::Precondition("round has no client updates".into()));
    }
    if !trace.is_traced() {
        return Err(Error::Precondition(format!(
            "round {} was not recorded with step gradients",
            trace.round
        )));
    }
    let k = trace.clients[0].step_gradients.len();
    if trace.clients.iter().any(|c| c.step_gradients.len() != k) {
        return Err(Error::Precondition(
            "clients took different numbers of local steps".into(),
        ));
    }
    let w0 = trace.clients[0].weight;
    if trace.clients.iter().any(|c| c.weight != w0) {
        return Err(Error::Precondition("decomposition needs equal client weights".into()));
    }
    if trace
        .clients
        .iter()
        .any(|c| c.delta.len() != trace.aggregated.len() || c.step_gradients.iter().any(|g| g.dim() != c.delta.len()))
    {
        return Err(Error::contract("trace dimensions are inconsistent"));
    }

    let trajectories: Vec<&[Gradient]> = trace.clients.iter().map(|c| c.step_gradients.as_slice()).collect();
    let g_fedsgd = fomaml_update(&trajectories, 0, beta)?;
    let g_fomaml_by_j = (1..k)
        .map(|j| fomaml_update(&trajectories, j, beta))
        .collect::<Result<Vec<_>>>()?;

    let mut residual = trace.aggregated.clone();
    for (r, s) in residual.iter_mut().zip(&g_fedsgd) {
        *r -= s;
    }
    for g in &g_fomaml_by_j {
        for (r, s) in residual.iter_mut().zip(g) {
            *r -= s;
        }
    }
    Ok(DecompositionReport {
        round: trace.round,
        clients: trace.clients.len(),
        steps: k,
        g_fedavg: trace.aggregated.clone(),
        g_fedsgd,
        g_fomaml_by_j,
        residual_norm: model::norm(&residual),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MamlGap {
    /// `‖g_MAML − g_FOMAML‖₂`.
    pub gap_norm: f64,
    pub cosine: f64,
}

/// Compares the finite-difference MAML gradient with the first-order
/// approximation for one client: `K = batches.len()` adaptation steps, both
/// gradients taken on `eval_batch` (default: the union of `batches`).
pub fn fomaml_maml_gap(
    spec: &ModelSpec,
    params: &ParamVector,
    batches: &[Batch],
    eval_batch: Option<&Batch>,
    beta: f64,
    fd_step: f64,
) -> Result<MamlGap> {
    let maml = maml_gradient_oracle(spec, params, batches, eval_batch, beta, fd_step)?;
    let default_eval;
    let eval = match eval_batch {
        Some(b) => b,
        None => {
            default_eval = Batch::union(batches);
            &default_eval
        }
    };
    let (adapted, _) = sgd_trajectory(spec, params, batches, beta)?;
    let fomaml = gradient(spec, &adapted, eval)?;

    let a = maml.as_slice();
    let b = fomaml.as_slice();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let denom = maml.norm() * fomaml.norm();
    Ok(MamlGap {
        gap_norm: model::norm(&diff),
        cosine: if denom > 0.0 { dot / denom } else { f64::NAN },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Initial,
    Personalized,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Initial => "initial",
            Metric::Personalized => "personalized",
        }
    }
}

/// `(round, mean accuracy)` pairs for one metric.
pub fn metric_series(snapshots: &[EvalSnapshot], metric: Metric) -> Vec<(usize, f64)> {
    snapshots
        .iter()
        .map(|s| {
            let v = match metric {
                Metric::Initial => s.summary.mean_initial_acc,
                Metric::Personalized => s.summary.mean_personalized_acc,
            };
            (s.round, v)
        })
        .collect()
}

/// First round whose value reaches `threshold`, or `None` if none does.
pub fn rounds_to_threshold(series: &[(usize, f64)], threshold: f64) -> Result<Option<usize>> {
    if series.is_empty() {
        return Err(Error::contract("rounds_to_threshold needs at least one snapshot"));
    }
    Ok(series.iter().find(|(_, v)| *v >= threshold).map(|(r, _)| *r))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdStats {
    pub threshold: f64,
    pub per_replica: Vec<Option<usize>>,
    /// Mean over replicas that reached the threshold.
    pub mean: Option<f64>,
    pub reached_count: usize,
}

impl ThresholdStats {
    pub fn from_replicas(series: &[Vec<(usize, f64)>], threshold: f64) -> Result<Self> {
        let per_replica = series
            .iter()
            .map(|s| rounds_to_threshold(s, threshold))
            .collect::<Result<Vec<_>>>()?;
        let reached: Vec<f64> = per_replica.iter().flatten().map(|&r| r as f64).collect();
        let mean = if reached.is_empty() {
            None
        } else {
            Some(mean_std(&reached).0)
        };
        Ok(Self {
            threshold,
            reached_count: reached.len(),
            per_replica,
            mean,
        })
    }
}

impl fmt::Display for ThresholdStats {
    /// `"137.5(9)"`: mean round over reaching replicas and how many reached;
    /// `"Never"` when none did.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.mean {
            Some(m) => write!(f, "{:.1}({})", m, self.reached_count),
            None => f.write_str("Never"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaStats {
    pub metric: String,
    pub values: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub count: usize,
}

impl ReplicaStats {
    pub fn new(metric: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::contract("replica statistics need at least one value"));
        }
        let (mean, std) = mean_std(&values);
        Ok(Self {
            metric: metric.into(),
            count: values.len(),
            values,
            mean,
            std,
        })
    }
}

impl fmt::Display for ReplicaStats {
    /// `"0.8000 (0.0163)"`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", format_mean_std(self.mean, self.std))
    }
}

pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.4} ({std:.4})")
}

/// Per-round statistics across replicas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaAggregate {
    pub rounds: Vec<usize>,
    pub per_round: Vec<ReplicaStats>,
}

impl ReplicaAggregate {
    pub fn last(&self) -> &ReplicaStats {
        self.per_round.last().expect("aggregate has at least one round")
    }
}

/// Aggregates one metric over replicas. Every replica must have been
/// evaluated at the same rounds.
pub fn aggregate_replicas(series: &[Vec<(usize, f64)>], metric: &str) -> Result<ReplicaAggregate> {
    let first = series
        .first()
        .ok_or_else(|| Error::contract("aggregate_replicas needs at least one replica"))?;
    if first.is_empty() {
        return Err(Error::contract("replica has no snapshots"));
    }
    let rounds: Vec<usize> = first.iter().map(|(r, _)| *r).collect();
    for (i, s) in series.iter().enumerate() {
        if s.len() != rounds.len() || s.iter().zip(&rounds).any(|((r, _), q)| r != q) {
            return Err(Error::contract(format!(
                "replica {i} was evaluated on a different round schedule"
            )));
        }
    }
    let per_round = (0..rounds.len())
        .map(|k| ReplicaStats::new(metric, series.iter().map(|s| s[k].1).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok(ReplicaAggregate { rounds, per_round })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ClientId;
    use crate::federation::ClientUpdateResult;
    use crate::model::{Activation, Example, LossKind};
    use crate::rng::{Purpose, Streams};
    use proptest::prelude::*;

    fn client(id: u64, grads: Vec<Vec<f64>>, beta: f64, weight: f64) -> ClientUpdateResult {
        let dim = grads[0].len();
        let mut delta = vec![0.0; dim];
        for g in &grads {
            for (d, v) in delta.iter_mut().zip(g) {
                *d -= beta * v;
            }
        }
        ClientUpdateResult {
            client: ClientId(id),
            delta,
            weight,
            step_gradients: grads.into_iter().map(Gradient::new).collect(),
        }
    }

    fn trace(clients: Vec<ClientUpdateResult>) -> RoundTrace {
        let dim = clients[0].delta.len();
        let mut agg = vec![0.0; dim];
        let w: f64 = clients.iter().map(|c| c.weight).sum();
        for c in &clients {
            for (a, d) in agg.iter_mut().zip(&c.delta) {
                *a += c.weight * d;
            }
        }
        RoundTrace {
            round: 1,
            stage: 1,
            beta: 0.1,
            sampled: clients.iter().map(|c| c.client).collect(),
            aggregated: agg.into_iter().map(|a| a / w).collect(),
            clients,
        }
    }

    #[test]
    fn single_step_is_fedsgd_only() {
        let t = trace(vec![
            client(0, vec![vec![1.0, 2.0]], 0.1, 1.0),
            client(1, vec![vec![3.0, -1.0]], 0.1, 1.0),
        ]);
        let r = decompose_round(&t, 0.1).unwrap();
        assert!(r.g_fomaml_by_j.is_empty());
        assert_eq!(r.residual_norm, 0.0);
    }

    #[test]
    fn zero_step_size_gives_zero_terms() {
        let t = trace(vec![client(0, vec![vec![1.0], vec![2.0], vec![4.0]], 0.0, 1.0)]);
        let r = decompose_round(&t, 0.0).unwrap();
        assert_eq!(r.residual_norm, 0.0);
        assert!(r
            .g_fedsgd
            .iter()
            .chain(r.g_fomaml_by_j.iter().flatten())
            .all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_unequal_steps_and_weights() {
        let t = trace(vec![
            client(0, vec![vec![1.0], vec![2.0]], 0.1, 1.0),
            client(1, vec![vec![1.0]], 0.1, 1.0),
        ]);
        assert!(matches!(decompose_round(&t, 0.1), Err(Error::Precondition(_))));
        let t = trace(vec![
            client(0, vec![vec![1.0]], 0.1, 1.0),
            client(1, vec![vec![1.0]], 0.1, 2.0),
        ]);
        assert!(matches!(decompose_round(&t, 0.1), Err(Error::Precondition(_))));
        let mut t = trace(vec![client(0, vec![vec![1.0]], 0.1, 1.0)]);
        t.clients[0].step_gradients.clear();
        assert!(matches!(decompose_round(&t, 0.1), Err(Error::Precondition(_))));
    }

    #[test]
    fn gap_vanishes_without_adaptation() {
        let spec = ModelSpec::new(3, vec![4, 2], Activation::Tanh, LossKind::SoftmaxCrossEntropy).unwrap();
        let params = spec.init_params(&mut Streams::new(1).stream(Purpose::Test, &[]));
        let b = Batch::new(vec![
            Example::new(vec![0.1, -0.3, 0.5], 1),
            Example::new(vec![0.7, 0.2, -0.1], 0),
        ]);
        let g = fomaml_maml_gap(&spec, &params, &[], Some(&b), 0.1, 1e-5).unwrap();
        assert!(g.gap_norm < 1e-8, "{}", g.gap_norm);
        assert!((g.cosine - 1.0).abs() < 1e-9);
        let g = fomaml_maml_gap(&spec, &params, &[b.clone(), b.clone()], Some(&b), 0.0, 1e-5).unwrap();
        assert!(g.gap_norm < 1e-8);
    }

    #[test]
    fn threshold_semantics() {
        let s = vec![(10, 0.5), (20, 0.79), (30, 0.81), (40, 0.78)];
        assert_eq!(rounds_to_threshold(&s, 0.8).unwrap(), Some(30));
        assert_eq!(rounds_to_threshold(&s, 0.4).unwrap(), Some(10));
        assert_eq!(rounds_to_threshold(&s, 0.9).unwrap(), None);
        assert!(rounds_to_threshold(&[], 0.9).is_err());
        let crossing: Vec<(usize, f64)> = (1..=12).map(|r| (r, r as f64 / 10.0)).collect();
        assert_eq!(rounds_to_threshold(&crossing, 0.65).unwrap(), Some(7));
    }

    #[test]
    fn threshold_stats_format() {
        let reps = vec![vec![(1, 0.9)], vec![(1, 0.1), (2, 0.85)], vec![(1, 0.1), (2, 0.1)]];
        let s = ThresholdStats::from_replicas(&reps, 0.8).unwrap();
        assert_eq!(s.per_replica, vec![Some(1), Some(2), None]);
        assert_eq!(s.reached_count, 2);
        assert_eq!(s.to_string(), "1.5(2)");
        let never = ThresholdStats::from_replicas(&reps[2..], 0.8).unwrap();
        assert_eq!(never.to_string(), "Never");
    }

    #[test]
    fn replica_stats_arithmetic() {
        let one = ReplicaStats::new("x", vec![0.7]).unwrap();
        assert_eq!(one.std, 0.0);
        let two = ReplicaStats::new("x", vec![0.8, 0.8]).unwrap();
        assert_eq!((two.mean, two.std), (0.8, 0.0));
        let three = ReplicaStats::new("x", vec![0.78, 0.80, 0.82]).unwrap();
        assert!((three.mean - 0.80).abs() < 1e-12);
        assert!((three.std - (0.0008f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(three.to_string(), "0.8000 (0.0163)");
    }

    #[test]
    fn schedule_mismatch_is_rejected() {
        let a = vec![(1, 0.5), (2, 0.6)];
        let b = vec![(1, 0.5), (3, 0.6)];
        assert!(aggregate_replicas(&[a.clone(), b], "m").is_err());
        assert!(aggregate_replicas(&[], "m").is_err());
        let agg = aggregate_replicas(&[a.clone(), a], "m").unwrap();
        assert_eq!(agg.rounds, vec![1, 2]);
        assert_eq!(agg.last().std, 0.0);
    }

    proptest! {
        #[test]
        fn threshold_is_monotone(values in prop::collection::vec(0.0f64..1.0, 1..30), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let s: Vec<(usize, f64)> = values.iter().enumerate().map(|(i, v)| (i + 1, *v)).collect();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let r_lo = rounds_to_threshold(&s, lo).unwrap();
            let r_hi = rounds_to_threshold(&s, hi).unwrap();
            match (r_lo, r_hi) {
                (Some(x), Some(y)) => prop_assert!(x <= y),
                (None, Some(_)) => prop_assert!(false),
                _ => {}
            }
        }

        #[test]
        fn aggregation_is_permutation_invariant(values in prop::collection::vec(0.0f64..1.0, 1..12), rot in 0usize..12) {
            let series: Vec<Vec<(usize, f64)>> = values.iter().map(|v| vec![(5, *v)]).collect();
            let mut rotated = series.clone();
            rotated.rotate_left(rot % series.len());
            rotated.reverse();
            let a = aggregate_replicas(&series, "m").unwrap();
            let b = aggregate_replicas(&rotated, "m").unwrap();
            prop_assert_eq!(a.last().mean, b.last().mean);
            prop_assert_eq!(a.last().std, b.last().std);
        }
    }
}
