//! Server round loop.
//!
//! Every strategy except the two-exchange variant runs through one code path:
//!
//! 1. perturb the global model along the previous pseudo-gradient
//!    (`rho(t) * prev / |prev|`, zero for strategies without server SAM);
//! 2. broadcast the (perturbed) model to the sampled clients and train;
//! 3. form the pseudo-gradient against the broadcast model;
//! 4. descend from the *unperturbed* model, with the ADMM dual term when the
//!    strategy carries one: `w' = w - eta_s * pg - beta * sigma'`.
//!
//! With a zero perturbation and no dual term this is FedOpt with SGD on the
//! server, so FedAvg, FedProx and FedSAM only differ in their local rule.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::flatness::delta_eps;
use crate::localopt::{
    client_train, sam_perturbation, ClientAdmmState, Correction, LocalHyper, LocalMode,
    LocalOptimizer,
};
use crate::numcore::{Objective, ParamVector};
use crate::seed::rng_for;
use crate::{Error, Result};

/// Bits per transmitted parameter (f64).
pub const BITS_PER_PARAM: u64 = 64;

/// Global model norm beyond which a run counts as diverged.
pub const DIVERGENCE_NORM: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StrategyKind {
    FedAvg,
    FedProx,
    #[serde(rename = "FedSAM")]
    FedSam,
    FedDyn,
    #[serde(rename = "FedDynSAM")]
    FedDynSam,
    #[serde(rename = "NaiveFedGloSS")]
    NaiveFedGloss,
    #[serde(rename = "FedGloSS")]
    FedGloss,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 7] = [
        StrategyKind::FedAvg,
        StrategyKind::FedProx,
        StrategyKind::FedSam,
        StrategyKind::FedDyn,
        StrategyKind::FedDynSam,
        StrategyKind::NaiveFedGloss,
        StrategyKind::FedGloss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::FedAvg => "FedAvg",
            StrategyKind::FedProx => "FedProx",
            StrategyKind::FedSam => "FedSAM",
            StrategyKind::FedDyn => "FedDyn",
            StrategyKind::FedDynSam => "FedDynSAM",
            StrategyKind::NaiveFedGloss => "NaiveFedGloSS",
            StrategyKind::FedGloss => "FedGloSS",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name().eq_ignore_ascii_case(name))
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    /// Server learning rate.
    #[serde(default = "one")]
    pub server_lr: f64,
    /// Server SAM radius reached after warm-up.
    #[serde(default)]
    pub rho: f64,
    /// Starting radius of the warm-up.
    #[serde(default = "default_rho0")]
    pub rho0: f64,
    /// Warm-up length in rounds; 0 keeps `rho` constant.
    #[serde(default)]
    pub rho_warmup: usize,
    /// FedGloSS only: run the ADMM dual terms.
    #[serde(default = "yes")]
    pub admm: bool,
    /// Local optimizer for the server-SAM strategies (default SAM).
    #[serde(default)]
    pub local_optimizer: Option<LocalOptimizer>,
    #[serde(default)]
    pub local: LocalHyper,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

fn default_rho0() -> f64 {
    0.001
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind, local: LocalHyper) -> Self {
        StrategyConfig {
            kind,
            server_lr: 1.0,
            rho: 0.0,
            rho0: default_rho0(),
            rho_warmup: 0,
            admm: true,
            local_optimizer: None,
            local,
        }
    }

    pub fn uses_server_sam(&self) -> bool {
        matches!(self.kind, StrategyKind::FedGloss | StrategyKind::NaiveFedGloss)
    }

    pub fn uses_admm(&self) -> bool {
        match self.kind {
            StrategyKind::FedDyn | StrategyKind::FedDynSam => true,
            StrategyKind::FedGloss => self.admm,
            _ => false,
        }
    }

    /// Number of model exchanges with the sampled clients per round.
    pub fn exchanges_per_round(&self) -> u64 {
        if self.kind == StrategyKind::NaiveFedGloss {
            2
        } else {
            1
        }
    }

    pub fn local_mode(&self) -> LocalMode {
        let optimizer = match self.kind {
            StrategyKind::FedAvg | StrategyKind::FedProx | StrategyKind::FedDyn => LocalOptimizer::Sgd,
            StrategyKind::FedSam | StrategyKind::FedDynSam => LocalOptimizer::Sam,
            StrategyKind::NaiveFedGloss | StrategyKind::FedGloss => {
                self.local_optimizer.unwrap_or(LocalOptimizer::Sam)
            }
        };
        let correction = if self.uses_admm() {
            Correction::Admm
        } else if self.kind == StrategyKind::FedProx {
            Correction::Prox
        } else {
            Correction::None
        };
        LocalMode {
            optimizer,
            correction,
        }
    }

    pub fn rho_at(&self, t: usize) -> f64 {
        if self.uses_server_sam() {
            rho_schedule(t, self.rho0, self.rho, self.rho_warmup)
        } else {
            0.0
        }
    }

    pub fn violations(&self, prefix: &str) -> Vec<String> {
        let mut v = self.local.violations(&format!("{prefix}.local"));
        if !(self.server_lr > 0.0 && self.server_lr.is_finite()) {
            v.push(format!("{prefix}.server_lr: must be > 0, got {}", self.server_lr));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            v.push(format!("{prefix}.rho: must be >= 0, got {}", self.rho));
        }
        if !(self.rho0 >= 0.0 && self.rho0.is_finite()) {
            v.push(format!("{prefix}.rho0: must be >= 0, got {}", self.rho0));
        }
        v
    }
}

/// Linear warm-up of the server radius: `rho0 + (rho - rho0) * t / warmup`
/// for `t <= warmup`, then `rho`. A zero warm-up keeps `rho` throughout.
pub fn rho_schedule(t: usize, rho0: f64, rho: f64, warmup: usize) -> f64 {
    if warmup == 0 || t >= warmup {
        return rho;
    }
    rho0 + (rho - rho0) / warmup as f64 * t as f64
}

/// Uniform sample of `m` distinct clients out of `num_clients`, ascending.
pub fn sample_clients<R: Rng + ?Sized>(num_clients: usize, m: usize, rng: &mut R) -> Result<Vec<usize>> {
    if m == 0 || m > num_clients {
        return Err(Error::config(format!(
            "cannot sample {m} clients out of {num_clients}"
        )));
    }
    let mut ids = rand::seq::index::sample(rng, num_clients, m).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// `sum_k (N_k / N) * (w_ref - w_k)` with `N = sum_k N_k`.
pub fn pseudo_gradient(w_ref: &ParamVector, updates: &[(&ParamVector, usize)]) -> Result<ParamVector> {
    if updates.is_empty() {
        return Err(Error::InvalidArgument("no client updates to aggregate".into()));
    }
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("client updates carry no samples".into()));
    }
    let mut out = ParamVector::zeros(w_ref.len());
    for (w_k, n_k) in updates {
        w_k.check_len(w_ref.len(), "client update")?;
        let weight = *n_k as f64 / total as f64;
        for ((o, r), k) in out.as_mut_slice().iter_mut().zip(w_ref.iter()).zip(w_k.iter()) {
            *o += weight * (r - k);
        }
    }
    Ok(out)
}

/// `w - eta_s * pg`
pub fn fedavg_update(w: &ParamVector, pseudo_grad: &ParamVector, eta_s: f64) -> ParamVector {
    let mut out = w.clone();
    out.axpy(-eta_s, pseudo_grad);
    out
}

/// `w + rho * prev / |prev|`; `w` itself while `prev` is zero.
pub fn server_perturb(w: &ParamVector, prev_pseudo_grad: &ParamVector, rho: f64) -> ParamVector {
    w.add(&sam_perturbation(prev_pseudo_grad, rho))
}

/// `sigma - (1 / (beta * m)) * sum_k (w_k - w)` over the `m` given models.
pub fn global_dual_update(
    sigma: &ParamVector,
    client_models: &[&ParamVector],
    w: &ParamVector,
    beta: f64,
) -> ParamVector {
    let scale = 1.0 / (beta * client_models.len() as f64);
    let mut sum = ParamVector::zeros(w.len());
    for w_k in client_models {
        for ((s, k), g) in sum.as_mut_slice().iter_mut().zip(w_k.iter()).zip(w.iter()) {
            *s += k - g;
        }
    }
    let mut out = sigma.clone();
    out.axpy(-scale, &sum);
    out
}

/// `w - eta_s * pg - beta * sigma'`
pub fn fedgloss_descent(
    w: &ParamVector,
    pseudo_grad: &ParamVector,
    sigma_next: &ParamVector,
    eta_s: f64,
    beta: f64,
) -> ParamVector {
    let mut out = fedavg_update(w, pseudo_grad, eta_s);
    out.axpy(-beta, sigma_next);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub w: ParamVector,
    pub sigma: ParamVector,
    pub prev_pseudo_grad: ParamVector,
    /// Number of completed rounds.
    pub round: usize,
    pub seed: u64,
}

impl ServerState {
    pub fn new(w: ParamVector, seed: u64) -> Self {
        let d = w.len();
        ServerState {
            w,
            sigma: ParamVector::zeros(d),
            prev_pseudo_grad: ParamVector::zeros(d),
            round: 0,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundComm {
    pub downlink_bits: u64,
    pub uplink_bits: u64,
}

/// Transmitted bits, assuming every exchange sends the full model down to and
/// back from each sampled client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommLedger {
    pub param_count: usize,
    pub clients_per_round: usize,
    pub rounds: Vec<RoundComm>,
    pub total_downlink: u64,
    pub total_uplink: u64,
}

impl CommLedger {
    pub fn new(param_count: usize, clients_per_round: usize) -> Self {
        CommLedger {
            param_count,
            clients_per_round,
            rounds: Vec::new(),
            total_downlink: 0,
            total_uplink: 0,
        }
    }

    /// FedAvg's per-round cost: one model down and one up per sampled client.
    pub fn fedavg_round_bits(&self) -> u64 {
        2 * self.clients_per_round as u64 * self.param_count as u64 * BITS_PER_PARAM
    }

    pub fn charge_round(&mut self, exchanges: u64) {
        let one_way = exchanges * self.clients_per_round as u64 * self.param_count as u64 * BITS_PER_PARAM;
        self.rounds.push(RoundComm {
            downlink_bits: one_way,
            uplink_bits: one_way,
        });
        self.total_downlink += one_way;
        self.total_uplink += one_way;
    }

    pub fn total_bits(&self) -> u64 {
        self.total_downlink + self.total_uplink
    }

    /// Cumulative bits relative to FedAvg over the same number of rounds.
    pub fn multiplier(&self) -> f64 {
        if self.rounds.is_empty() {
            return 0.0;
        }
        self.total_bits() as f64 / (self.fedavg_round_bits() * self.rounds.len() as u64) as f64
    }
}

/// What happened in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    /// Zero-based index of the round just completed.
    pub round: usize,
    pub sampled: Vec<usize>,
    pub rho: f64,
    /// `|w_broadcast - w|`.
    pub perturbation_norm: f64,
    /// Alignment between the perturbation used and the pseudo-gradient of
    /// this round; only for server-SAM strategies once a previous
    /// pseudo-gradient exists.
    pub delta_eps: Option<f64>,
    pub pseudo_grad_norm: f64,
    pub w_norm: f64,
    pub bits_round: u64,
    pub bits_cum: u64,
}

/// Everything needed to resume a federation exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationState {
    pub server: ServerState,
    pub clients: Vec<ClientAdmmState>,
    pub ledger: CommLedger,
    /// Models returned by the clients of the most recent round.
    pub last_client_models: Vec<(usize, ParamVector)>,
}

/// A running simulation over a fixed set of client objectives.
pub struct Federation<'a, O: Objective> {
    clients: &'a [O],
    strategy: StrategyConfig,
    clients_per_round: usize,
    parallel: bool,
    state: FederationState,
}

impl<'a, O: Objective> Federation<'a, O> {
    pub fn new(
        clients: &'a [O],
        strategy: StrategyConfig,
        clients_per_round: usize,
        w0: ParamVector,
        seed: u64,
    ) -> Result<Self> {
        let d = w0.len();
        let state = FederationState {
            server: ServerState::new(w0, seed),
            clients: vec![ClientAdmmState::zeros(d); clients.len()],
            ledger: CommLedger::new(d, clients_per_round),
            last_client_models: Vec::new(),
        };
        Self::resume(clients, strategy, clients_per_round, state)
    }

    pub fn resume(
        clients: &'a [O],
        strategy: StrategyConfig,
        clients_per_round: usize,
        state: FederationState,
    ) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::config("federation needs at least one client"));
        }
        if clients_per_round == 0 || clients_per_round > clients.len() {
            return Err(Error::config(format!(
                "clients_per_round = {clients_per_round} must lie in 1..={}",
                clients.len()
            )));
        }
        let violations = strategy.violations("strategy");
        if !violations.is_empty() {
            return Err(Error::Validation(violations));
        }
        let d = state.server.w.len();
        for (k, c) in clients.iter().enumerate() {
            if c.dim() != d {
                return Err(Error::config(format!(
                    "client {k} has dimension {}, model has {d}",
                    c.dim()
                )));
            }
            if c.num_samples() == 0 {
                return Err(Error::config(format!("client {k} has an empty shard")));
            }
        }
        if state.clients.len() != clients.len() {
            return Err(Error::config("client state count does not match clients"));
        }
        Ok(Federation {
            clients,
            strategy,
            clients_per_round,
            parallel: false,
            state,
        })
    }

    /// Train sampled clients on the rayon pool. Results are reduced in
    /// ascending client order either way.
    pub fn with_parallel(mut self, parallel: bool) -> Self {
        self.parallel = parallel;
        self
    }

    pub fn strategy(&self) -> &StrategyConfig {
        &self.strategy
    }

    pub fn server(&self) -> &ServerState {
        &self.state.server
    }

    pub fn state(&self) -> &FederationState {
        &self.state
    }

    pub fn into_state(self) -> FederationState {
        self.state
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.state.ledger
    }

    pub fn model(&self) -> &ParamVector {
        &self.state.server.w
    }

    pub fn last_client_models(&self) -> &[(usize, ParamVector)] {
        &self.state.last_client_models
    }

    fn train_clients(
        &self,
        ids: &[usize],
        broadcast: &ParamVector,
        tag: &str,
        states: &mut [ClientAdmmState],
    ) -> Result<Vec<ParamVector>> {
        let mode = self.strategy.local_mode();
        let hyper = &self.strategy.local;
        let seed = self.state.server.seed;
        let round = self.state.server.round as u64;
        let mut jobs: Vec<(usize, ClientAdmmState)> =
            ids.iter().map(|&k| (k, states[k].clone())).collect();
        let run = |job: &mut (usize, ClientAdmmState)| -> Result<ParamVector> {
            let mut rng = rng_for(seed, tag, &[round, job.0 as u64]);
            client_train(&self.clients[job.0], broadcast, hyper, mode, &mut job.1, &mut rng)
        };
        let results: Vec<Result<ParamVector>> = if self.parallel {
            jobs.par_iter_mut().map(run).collect()
        } else {
            jobs.iter_mut().map(run).collect()
        };
        let models = results.into_iter().collect::<Result<Vec<_>>>()?;
        for (k, st) in jobs {
            states[k] = st;
        }
        Ok(models)
    }

    fn weighted<'m>(&self, ids: &[usize], models: &'m [ParamVector]) -> Vec<(&'m ParamVector, usize)> {
        ids.iter()
            .zip(models)
            .map(|(&k, w)| (w, self.clients[k].num_samples()))
            .collect()
    }

    fn check_divergence(&self, w: &ParamVector) -> Result<()> {
        let round = self.state.server.round;
        if !w.is_finite() {
            return Err(Error::Diverged {
                round,
                reason: "non-finite parameters".into(),
            });
        }
        let norm = w.norm();
        if norm > DIVERGENCE_NORM {
            return Err(Error::Diverged {
                round,
                reason: format!("parameter norm {norm:.3e} exceeds {DIVERGENCE_NORM:e}"),
            });
        }
        Ok(())
    }

    /// Run one round. On error the federation state is left untouched.
    pub fn run_round(&mut self) -> Result<RoundReport> {
        let t = self.state.server.round;
        let mut rng = rng_for(self.state.server.seed, "sample", &[t as u64]);
        let ids = sample_clients(self.clients.len(), self.clients_per_round, &mut rng)?;
        if self.strategy.kind == StrategyKind::NaiveFedGloss {
            self.naive_round(ids)
        } else {
            self.server_sam_round(ids)
        }
    }

    fn server_sam_round(&mut self, ids: Vec<usize>) -> Result<RoundReport> {
        let t = self.state.server.round;
        let strategy = &self.strategy;
        let server = &self.state.server;
        let rho = strategy.rho_at(t);
        let w = &server.w;
        let broadcast = server_perturb(w, &server.prev_pseudo_grad, rho);
        let perturbation_norm = broadcast.sub(w).norm();

        let mut client_states = self.state.clients.clone();
        let models = self.train_clients(&ids, &broadcast, "client", &mut client_states)?;
        let pg = pseudo_gradient(&broadcast, &self.weighted(&ids, &models))?;

        let (w_next, sigma_next) = if strategy.uses_admm() {
            let refs: Vec<&ParamVector> = models.iter().collect();
            let sigma = global_dual_update(&server.sigma, &refs, w, strategy.local.beta);
            let w_next = fedgloss_descent(w, &pg, &sigma, strategy.server_lr, strategy.local.beta);
            (w_next, sigma)
        } else {
            (fedavg_update(w, &pg, strategy.server_lr), server.sigma.clone())
        };
        self.check_divergence(&w_next)?;

        let delta = if strategy.uses_server_sam() {
            delta_eps(&server.prev_pseudo_grad, &pg, rho)
        } else {
            None
        };
        let report_base = (t, rho, perturbation_norm, delta, pg.norm());
        self.commit(ids, models, client_states, w_next, sigma_next, pg, report_base)
    }

    /// Two exchanges with the same client set: the first measures the current
    /// pseudo-gradient at `w`, the second trains from `w + rho * pg / |pg|`.
    fn naive_round(&mut self, ids: Vec<usize>) -> Result<RoundReport> {
        let t = self.state.server.round;
        let rho = self.strategy.rho_at(t);
        let w = self.state.server.w.clone();

        let mut client_states = self.state.clients.clone();
        let first = self.train_clients(&ids, &w, "naive-ascent", &mut client_states)?;
        let pg_now = pseudo_gradient(&w, &self.weighted(&ids, &first))?;
        let broadcast = w.add(&sam_perturbation(&pg_now, rho));
        let perturbation_norm = broadcast.sub(&w).norm();

        let models = self.train_clients(&ids, &broadcast, "client", &mut client_states)?;
        let pg = pseudo_gradient(&broadcast, &self.weighted(&ids, &models))?;
        let w_next = fedavg_update(&w, &pg, self.strategy.server_lr);
        self.check_divergence(&w_next)?;

        // Error the one-exchange approximation would have made this round.
        let delta = delta_eps(&self.state.server.prev_pseudo_grad, &pg_now, rho);
        let sigma = self.state.server.sigma.clone();
        let report_base = (t, rho, perturbation_norm, delta, pg.norm());
        self.commit(ids, models, client_states, w_next, sigma, pg, report_base)
    }

    #[allow(clippy::too_many_arguments)]
    fn commit(
        &mut self,
        ids: Vec<usize>,
        models: Vec<ParamVector>,
        client_states: Vec<ClientAdmmState>,
        w_next: ParamVector,
        sigma_next: ParamVector,
        pg: ParamVector,
        (t, rho, perturbation_norm, delta, pg_norm): (usize, f64, f64, Option<f64>, f64),
    ) -> Result<RoundReport> {
        let exchanges = self.strategy.exchanges_per_round();
        let st = &mut self.state;
        st.clients = client_states;
        st.server.w = w_next;
        st.server.sigma = sigma_next;
        st.server.prev_pseudo_grad = pg;
        st.server.round += 1;
        st.ledger.charge_round(exchanges);
        st.last_client_models = ids.iter().copied().zip(models).collect();
        let bits_round = st.ledger.rounds.last().map_or(0, |r| r.downlink_bits + r.uplink_bits);
        Ok(RoundReport {
            round: t,
            sampled: ids,
            rho,
            perturbation_norm,
            delta_eps: delta,
            pseudo_grad_norm: pg_norm,
            w_norm: st.server.w.norm(),
            bits_round,
            bits_cum: st.ledger.total_bits(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Quadratic;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec())
    }

    #[test]
    fn sampling_edges_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_clients(4, 4, &mut rng).unwrap(), vec![0, 1, 2, 3]);
        assert!(sample_clients(3, 4, &mut rng).is_err());
        let a: Vec<_> = (0..5)
            .map(|_| sample_clients(50, 5, &mut ChaCha8Rng::seed_from_u64(11)).unwrap())
            .collect();
        assert!(a.windows(2).all(|p| p[0] == p[1]));
    }

    #[test]
    fn sampling_frequencies_are_uniform() {
        // Each client appears with p = 0.05 per draw; 3 sigma of a binomial(10k, p).
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = 10_000;
        let mut counts = [0usize; 100];
        for _ in 0..draws {
            for k in sample_clients(100, 5, &mut rng).unwrap() {
                counts[k] += 1;
            }
        }
        let p: f64 = 0.05;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        let outside = counts.iter().filter(|&&c| (c as f64 - mean).abs() > 3.0 * sd).count();
        // 0.27% tail mass per client: allow at most two of a hundred.
        assert!(outside <= 2, "{outside} clients outside 3 sigma: {counts:?}");
    }

    #[test]
    fn pseudo_gradient_examples() {
        let w = pv(&[1.0, 1.0]);
        let (a, b) = (pv(&[0.0, 2.0]), pv(&[2.0, 0.0]));
        assert_eq!(pseudo_gradient(&w, &[(&a, 5), (&b, 5)]).unwrap(), pv(&[0.0, 0.0]));
        assert_eq!(pseudo_gradient(&w, &[(&a, 3)]).unwrap(), w.sub(&a));
        let r = pv(&[4.0]);
        let (c, d) = (pv(&[0.0]), pv(&[4.0]));
        assert_eq!(pseudo_gradient(&r, &[(&c, 3), (&d, 1)]).unwrap(), pv(&[3.0]));
        assert!(pseudo_gradient(&r, &[]).is_err());
        assert!(pseudo_gradient(&r, &[(&w, 1)]).is_err());
    }

    #[test]
    fn fedavg_update_examples() {
        let w = pv(&[1.0, -1.0]);
        let (a, b) = (pv(&[3.0, 0.0]), pv(&[0.0, 2.0]));
        let pg = pseudo_gradient(&w, &[(&a, 2), (&b, 2)]).unwrap();
        assert_eq!(fedavg_update(&w, &pg, 1.0), pv(&[1.5, 1.0]));
        assert_eq!(fedavg_update(&w, &ParamVector::zeros(2), 1.0), w);
        let half = fedavg_update(&w, &pg, 0.5).sub(&w);
        let full = fedavg_update(&w, &pg, 1.0).sub(&w);
        assert!(half.max_abs_diff(&full.scaled(0.5)) < 1e-15);
    }

    #[test]
    fn server_perturb_examples() {
        let w = pv(&[1.0, 1.0]);
        assert_eq!(server_perturb(&w, &ParamVector::zeros(2), 0.3), w);
        let p = server_perturb(&w, &pv(&[0.0, 3.0]), 0.1);
        assert!(p.max_abs_diff(&pv(&[1.0, 1.1])) < 1e-15);
        let q = server_perturb(&w, &pv(&[-2.0, 5.0]), 0.25);
        assert!((q.sub(&w).norm() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn global_dual_examples() {
        let w = pv(&[1.0, 2.0]);
        let s = pv(&[0.3, -0.2]);
        assert_eq!(global_dual_update(&s, &[&w, &w], &w, 3.0), s);
        let s0 = pv(&[0.5]);
        assert_eq!(global_dual_update(&s0, &[&pv(&[3.0])], &pv(&[1.0]), 1.0), pv(&[-1.5]));
        let k = pv(&[2.0, -1.0]);
        let d1 = global_dual_update(&s, &[&k], &w, 1.0).sub(&s);
        let d10 = global_dual_update(&s, &[&k], &w, 10.0).sub(&s);
        assert!(d10.max_abs_diff(&d1.scaled(0.1)) < 1e-15);
    }

    #[test]
    fn fedgloss_descent_examples() {
        let w = pv(&[1.0, 2.0]);
        let pg = pv(&[0.5, -0.5]);
        assert_eq!(
            fedgloss_descent(&w, &pg, &ParamVector::zeros(2), 1.0, 7.0),
            fedavg_update(&w, &pg, 1.0)
        );
        let s = pv(&[0.1, 0.2]);
        let out = fedgloss_descent(&w, &ParamVector::zeros(2), &s, 1.0, 2.0);
        assert!(out.max_abs_diff(&pv(&[0.8, 1.6])) < 1e-15);
    }

    #[test]
    fn rho_schedule_endpoints() {
        assert_eq!(rho_schedule(0, 0.001, 0.15, 100), 0.001);
        assert_eq!(rho_schedule(100, 0.001, 0.15, 100), 0.15);
        assert_eq!(rho_schedule(250, 0.001, 0.15, 100), 0.15);
        assert!((rho_schedule(50, 0.001, 0.15, 100) - (0.001 + 0.15) / 2.0).abs() < 1e-15);
        assert_eq!(rho_schedule(0, 0.001, 0.15, 0), 0.15);
    }

    #[test]
    fn ledger_counts_exchanges() {
        let mut l = CommLedger::new(484, 5);
        l.charge_round(1);
        assert_eq!(l.total_bits(), 2 * 5 * 484 * 64);
        l.charge_round(2);
        assert_eq!(l.total_bits(), 3 * 2 * 5 * 484 * 64);
        assert!((l.multiplier() - 1.5).abs() < 1e-15);
    }

    fn flat_clients(n: usize, d: usize) -> Vec<Quadratic> {
        (0..n).map(|_| Quadratic::diagonal(&vec![0.0; d])).collect()
    }

    #[test]
    fn admm_consensus_is_a_fixed_point() {
        // Zero gradients everywhere: every client returns the broadcast model.
        let clients = flat_clients(4, 3);
        let mut s = StrategyConfig::new(StrategyKind::FedDyn, LocalHyper::default());
        s.local.batch_size = 1;
        let w0 = pv(&[0.2, -0.4, 1.0]);
        let mut fed = Federation::new(&clients, s, 2, w0.clone(), 3).unwrap();
        for _ in 0..3 {
            fed.run_round().unwrap();
            assert_eq!(fed.model(), &w0);
            assert!(fed.server().sigma.is_zero());
            assert!(fed.state().clients.iter().all(|c| c.sigma.is_zero()));
        }
    }

    #[test]
    fn naive_charges_two_exchanges() {
        let clients = flat_clients(3, 2);
        let s = StrategyConfig::new(StrategyKind::NaiveFedGloss, LocalHyper::default());
        let mut fed = Federation::new(&clients, s, 2, pv(&[1.0, 1.0]), 0).unwrap();
        for _ in 0..4 {
            fed.run_round().unwrap();
        }
        assert_eq!(fed.ledger().total_bits(), 2 * 4 * fed.ledger().fedavg_round_bits());
    }

    #[test]
    fn divergence_is_reported_and_state_kept() {
        // Negative curvature with a large step explodes quickly.
        let clients: Vec<Quadratic> = (0..2).map(|_| Quadratic::diagonal(&[-50.0])).collect();
        let local = LocalHyper {
            eta: 1.0,
            batch_size: 1,
            epochs: 5,
            ..LocalHyper::default()
        };
        let s = StrategyConfig::new(StrategyKind::FedAvg, local);
        let mut fed = Federation::new(&clients, s, 2, pv(&[1.0]), 0).unwrap();
        let err = loop {
            let before = fed.model().clone();
            match fed.run_round() {
                Ok(_) => continue,
                Err(e) => {
                    assert_eq!(fed.model(), &before);
                    break e;
                }
            }
        };
        assert!(matches!(err, Error::Diverged { round: 0, .. }));
    }

    #[test]
    fn strategy_names_round_trip() {
        for k in StrategyKind::ALL {
            assert_eq!(StrategyKind::from_name(k.name()), Some(k));
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.name()));
        }
        assert_eq!(StrategyKind::from_name("fedgloss"), Some(StrategyKind::FedGloss));
        assert_eq!(StrategyKind::from_name("SCAFFOLD"), None);
    }
}
