//! Client SGD batching and server optimizers over aggregated client deltas.
//!
//! The server receives `Δ`, the weighted mean of client deltas `θ_i − θ`,
//! which already points downhill. Plain SGD and heavy-ball momentum add it;
//! Adam treats `−Δ` as its gradient.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::model::{Batch, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientOptimizerConfig {
    /// Client step size `β`.
    pub lr: f64,
    pub batch_size: usize,
}

impl ClientOptimizerConfig {
    pub fn new(lr: f64, batch_size: usize) -> Result<Self> {
        let cfg = Self { lr, batch_size };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::contract(format!(
                "client lr must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("client batch_size must be positive"));
        }
        Ok(())
    }
}

impl Default for ClientOptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.02,
            batch_size: 20,
        }
    }
}

/// `epochs` shuffled passes over the client's train split, each chunked into
/// batches of `batch_size` with the short remainder kept.
pub fn make_client_batches<R: Rng + ?Sized>(
    client: &ClientDataset,
    epochs: usize,
    cfg: &ClientOptimizerConfig,
    rng: &mut R,
) -> Result<Vec<Batch>> {
    if client.train.is_empty() {
        return Err(Error::contract("client has no training examples"));
    }
    cfg.validate()?;
    let mut out = Vec::with_capacity(epochs * client.train.len().div_ceil(cfg.batch_size));
    let mut order: Vec<usize> = (0..client.train.len()).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            out.push(Batch::new(chunk.iter().map(|&i| client.train[i].clone()).collect()));
        }
    }
    Ok(out)
}

/// First `steps` batches of the client's epoch sequence, running as many
/// epochs as needed.
pub fn make_client_steps<R: Rng + ?Sized>(
    client: &ClientDataset,
    steps: usize,
    cfg: &ClientOptimizerConfig,
    rng: &mut R,
) -> Result<Vec<Batch>> {
    if client.train.is_empty() {
        return Err(Error::contract("client has no training examples"));
    }
    cfg.validate()?;
    let per_epoch = client.train.len().div_ceil(cfg.batch_size);
    let mut batches = make_client_batches(client, steps.div_ceil(per_epoch), cfg, rng)?;
    batches.truncate(steps);
    Ok(batches)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ServerOptimizerKind {
    Sgd,
    /// Heavy-ball momentum: `v ← μv + Δ`, `θ ← θ + αv`.
    Momentum {
        momentum: f64,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl ServerOptimizerKind {
    pub fn default_adam() -> Self {
        ServerOptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ServerOptimizerKind::Sgd => "sgd",
            ServerOptimizerKind::Momentum { .. } => "momentum",
            ServerOptimizerKind::Adam { .. } => "adam",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServerOptimizerConfig {
    #[serde(flatten)]
    pub kind: ServerOptimizerKind,
    pub lr: f64,
}

impl ServerOptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: ServerOptimizerKind::Sgd,
            lr,
        }
    }

    pub fn momentum(lr: f64, momentum: f64) -> Self {
        Self {
            kind: ServerOptimizerKind::Momentum { momentum },
            lr,
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            kind: ServerOptimizerKind::default_adam(),
            lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::contract(format!("server lr must be positive, got {}", self.lr)));
        }
        match self.kind {
            ServerOptimizerKind::Sgd => Ok(()),
            ServerOptimizerKind::Momentum { momentum } if (0.0..1.0).contains(&momentum) => Ok(()),
            ServerOptimizerKind::Momentum { momentum } => {
                Err(Error::contract(format!("momentum must be in [0, 1), got {momentum}")))
            }
            ServerOptimizerKind::Adam { beta1, beta2, eps }
                if (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0 =>
            {
                Ok(())
            }
            ServerOptimizerKind::Adam { .. } => Err(Error::contract("adam needs beta1, beta2 in [0, 1) and eps > 0")),
        }
    }
}

/// Bias-corrected Adam moments for a parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamMoments {
    pub fn zeros(dim: usize) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
        }
    }

    /// Advances the moments with gradient `g` at step `t` (1-based) and
    /// returns `θ − lr·m̂/(√v̂ + ε)`.
    pub fn step(&mut self, params: &[f64], g: &[f64], t: u64, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Vec<f64> {
        let bc1 = 1.0 - beta1.powi(t as i32);
        let bc2 = 1.0 - beta2.powi(t as i32);
        params
            .iter()
            .zip(g)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .map(|((p, &gi), (m, v))| {
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                p - lr * m_hat / (v_hat.sqrt() + eps)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Buffers {
    None,
    Velocity(Vec<f64>),
    Adam(AdamMoments),
}

/// Server optimizer state. Transitions are pure: [`ServerOptimizerState::apply`]
/// returns the next state instead of mutating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerOptimizerState {
    config: ServerOptimizerConfig,
    buffers: Buffers,
    step: u64,
}

impl ServerOptimizerState {
    pub fn new(config: ServerOptimizerConfig, dim: usize) -> Result<Self> {
        config.validate()?;
        let buffers = match config.kind {
            ServerOptimizerKind::Sgd => Buffers::None,
            ServerOptimizerKind::Momentum { .. } => Buffers::Velocity(vec![0.0; dim]),
            ServerOptimizerKind::Adam { .. } => Buffers::Adam(AdamMoments::zeros(dim)),
        };
        Ok(Self {
            config,
            buffers,
            step: 0,
        })
    }

    pub fn config(&self) -> &ServerOptimizerConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn apply(&self, params: &ParamVector, delta: &[f64]) -> Result<(ParamVector, ServerOptimizerState)> {
        server_apply(self, params, delta)
    }
}

/// One server update with the aggregated client delta `Δ`.
pub fn server_apply(
    state: &ServerOptimizerState,
    params: &ParamVector,
    delta: &[f64],
) -> Result<(ParamVector, ServerOptimizerState)> {
    if delta.len() != params.dim() {
        return Err(Error::contract(format!(
            "update has {} entries, parameters have {}",
            delta.len(),
            params.dim()
        )));
    }
    if delta.iter().any(|d| !d.is_finite()) {
        return Err(Error::Numeric("aggregated update is not finite".into()));
    }
    let lr = state.config.lr;
    let step = state.step + 1;
    let (new_params, buffers) = match (&state.config.kind, &state.buffers) {
        (ServerOptimizerKind::Sgd, Buffers::None) => (params.axpy(lr, delta), Buffers::None),
        (ServerOptimizerKind::Momentum { momentum }, Buffers::Velocity(v)) => {
            if v.len() != delta.len() {
                return Err(Error::contract("velocity buffer dimension mismatch"));
            }
            let v: Vec<f64> = v.iter().zip(delta).map(|(vi, d)| momentum * vi + d).collect();
            (params.axpy(lr, &v), Buffers::Velocity(v))
        }
        (ServerOptimizerKind::Adam { beta1, beta2, eps }, Buffers::Adam(moments)) => {
            if moments.m.len() != delta.len() {
                return Err(Error::contract("adam buffer dimension mismatch"));
            }
            let mut moments = moments.clone();
            let g: Vec<f64> = delta.iter().map(|d| -d).collect();
            let p = moments.step(params.as_slice(), &g, step, lr, *beta1, *beta2, *eps);
            (ParamVector::new(p), Buffers::Adam(moments))
        }
        _ => unreachable!("buffers always match the optimizer kind"),
    };
    if !new_params.is_finite() {
        return Err(Error::Numeric("server update produced non-finite parameters".into()));
    }
    Ok((
        new_params,
        ServerOptimizerState {
            config: state.config,
            buffers,
            step,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Example;
    use crate::rng::{Purpose, Streams};
    use proptest::prelude::*;

    fn client(n: usize) -> ClientDataset {
        ClientDataset {
            train: (0..n).map(|i| Example::new(vec![i as f64], 0)).collect(),
            test: vec![],
        }
    }

    fn sizes(b: &[Batch]) -> Vec<usize> {
        b.iter().map(Batch::len).collect()
    }

    #[test]
    fn batch_chunking() {
        let cfg = ClientOptimizerConfig::new(0.1, 20).unwrap();
        let mut rng = Streams::new(0).stream(Purpose::Test, &[]);
        assert_eq!(
            sizes(&make_client_batches(&client(20), 1, &cfg, &mut rng).unwrap()),
            vec![20]
        );
        assert_eq!(
            sizes(&make_client_batches(&client(20), 10, &cfg, &mut rng).unwrap()),
            vec![20; 10]
        );
        assert_eq!(
            sizes(&make_client_batches(&client(45), 2, &cfg, &mut rng).unwrap()),
            vec![20, 20, 5, 20, 20, 5]
        );
        assert!(make_client_batches(&client(0), 1, &cfg, &mut rng).is_err());
    }

    #[test]
    fn epochs_cover_every_example_once() {
        let cfg = ClientOptimizerConfig::new(0.1, 7).unwrap();
        let mut rng = Streams::new(1).stream(Purpose::Test, &[]);
        let batches = make_client_batches(&client(30), 3, &cfg, &mut rng).unwrap();
        for epoch in batches.chunks(5) {
            let mut seen: Vec<i64> = epoch
                .iter()
                .flat_map(|b| b.examples().iter().map(|e| e.features[0] as i64))
                .collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..30).collect::<Vec<_>>());
        }
    }

    #[test]
    fn steps_prefix_of_epoch_sequence() {
        let cfg = ClientOptimizerConfig::new(0.1, 4).unwrap();
        let s = Streams::new(5);
        let all = make_client_batches(&client(10), 3, &cfg, &mut s.stream(Purpose::Test, &[])).unwrap();
        let some = make_client_steps(&client(10), 7, &cfg, &mut s.stream(Purpose::Test, &[])).unwrap();
        assert_eq!(&all[..7], &some[..]);
    }

    #[test]
    fn sgd_unit_rate_adds_delta() {
        let st = ServerOptimizerState::new(ServerOptimizerConfig::sgd(1.0), 3).unwrap();
        let p = ParamVector::new(vec![1.0, 2.0, 3.0]);
        let (out, st) = st.apply(&p, &[0.5, -1.0, 0.0]).unwrap();
        assert_eq!(out.as_slice(), &[1.5, 1.0, 3.0]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn momentum_first_step_and_accumulation() {
        let st = ServerOptimizerState::new(ServerOptimizerConfig::momentum(0.5, 0.9), 2).unwrap();
        let p = ParamVector::new(vec![0.0, 0.0]);
        let (p1, st) = st.apply(&p, &[1.0, -2.0]).unwrap();
        assert_eq!(p1.as_slice(), &[0.5, -1.0]);
        let (p2, st) = st.apply(&p1, &[1.0, -2.0]).unwrap();
        // v = 0.9·Δ + Δ
        assert!((p2.as_slice()[0] - (0.5 + 0.5 * 1.9)).abs() < 1e-15);
        assert_eq!(st.step_count(), 2);
    }

    #[test]
    fn adam_first_step_magnitude() {
        let st = ServerOptimizerState::new(ServerOptimizerConfig::adam(0.01), 3).unwrap();
        let p = ParamVector::new(vec![0.0; 3]);
        let delta = [0.3, -2.0, 1e-3];
        let (out, _) = st.apply(&p, &delta).unwrap();
        for (o, d) in out.as_slice().iter().zip(&delta) {
            let expected = 0.01 * d / (d.abs() + 1e-8);
            assert!((o - expected).abs() < 1e-12, "{o} vs {expected}");
            assert!(o.abs() <= 0.01 * (1.0 + 1e-9));
        }
    }

    #[test]
    fn rejects_bad_updates() {
        let st = ServerOptimizerState::new(ServerOptimizerConfig::sgd(1.0), 2).unwrap();
        let p = ParamVector::new(vec![0.0; 2]);
        assert!(matches!(st.apply(&p, &[f64::NAN, 0.0]), Err(Error::Numeric(_))));
        assert!(matches!(st.apply(&p, &[0.0]), Err(Error::Contract(_))));
        assert!(ServerOptimizerState::new(ServerOptimizerConfig::momentum(1.0, 1.0), 2).is_err());
        assert!(ServerOptimizerState::new(ServerOptimizerConfig::sgd(0.0), 2).is_err());
    }

    proptest! {
        #[test]
        fn zero_momentum_is_sgd(
            lr in 0.01f64..2.0,
            steps in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 1..6),
            init in prop::collection::vec(-5.0f64..5.0, 4),
        ) {
            let mut a = ServerOptimizerState::new(ServerOptimizerConfig::sgd(lr), 4).unwrap();
            let mut b = ServerOptimizerState::new(ServerOptimizerConfig::momentum(lr, 0.0), 4).unwrap();
            let mut pa = ParamVector::new(init.clone());
            let mut pb = ParamVector::new(init);
            for d in &steps {
                let (na, sa) = a.apply(&pa, d).unwrap();
                let (nb, sb) = b.apply(&pb, d).unwrap();
                prop_assert_eq!(&na, &nb);
                pa = na; pb = nb; a = sa; b = sb;
            }
        }

        #[test]
        fn adam_first_step_bounded(lr in 1e-4f64..1.0, delta in prop::collection::vec(-100.0f64..100.0, 1..8)) {
            let st = ServerOptimizerState::new(ServerOptimizerConfig::adam(lr), delta.len()).unwrap();
            let p = ParamVector::new(vec![0.0; delta.len()]);
            let (out, st) = st.apply(&p, &delta).unwrap();
            prop_assert_eq!(st.step_count(), 1);
            for o in out.as_slice() {
                prop_assert!(o.abs() <= lr * (1.0 + 1e-9));
            }
        }

        #[test]
        fn apply_is_pure(delta in prop::collection::vec(-1.0f64..1.0, 3)) {
            let st = ServerOptimizerState::new(ServerOptimizerConfig::adam(0.1), 3).unwrap();
            let p = ParamVector::new(vec![0.1, 0.2, 0.3]);
            let first = st.apply(&p, &delta).unwrap();
            let second = st.apply(&p, &delta).unwrap();
            prop_assert_eq!(first, second);
        }
    }
}
