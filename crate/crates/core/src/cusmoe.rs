//! Mixture-of-experts feedforward with two expert groups. The lingual group
//! routes on the token plus a language embedding, the stylistic group on the
//! token plus a projection of the global prompt vector. Training uses a soft
//! Gumbel-Softmax mixture whose temperature anneals; inference routes each
//! token to its argmax expert.

use cantus_grad::{softmax_in_place, Graph, ParamStore, Tensor, Var};
use rand::Rng as _;

use crate::config::MoeConfig;
use crate::error::{Error, Result};
use crate::nn::{Embedding, Linear};
use crate::rng::Rng;
use crate::score::N_LANGUAGES;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupKind {
    Lingual,
    Stylistic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RouteMode {
    Train,
    Infer,
}

/// Per-token routing scores plus the batch statistics used by the balance
/// loss: `dispatch[i]` is the fraction of tokens whose top expert is `i`,
/// `mean_prob[i]` the mean score of expert `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision {
    pub scores: Tensor,
    pub selected: Vec<usize>,
    pub dispatch: Vec<f64>,
    pub mean_prob: Vec<f64>,
}

impl RoutingDecision {
    fn from_scores(scores: Tensor) -> Self {
        let (t, n) = scores.shape();
        let selected: Vec<usize> = (0..t).map(|r| argmax(scores.row_slice(r))).collect();
        let mut dispatch = vec![0.0; n];
        for s in &selected {
            dispatch[*s] += 1.0 / t as f64;
        }
        let mean_prob = scores.mean_rows().into_data();
        Self {
            scores,
            selected,
            dispatch,
            mean_prob,
        }
    }
}

/// First index of the maximum.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// One standard Gumbel draw, `−ln(−ln U)`.
pub fn gumbel(rng: &mut Rng) -> f64 {
    let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    -(-u.ln()).ln()
}

pub fn gumbel_noise(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| gumbel(rng)).collect();
    Tensor::from_vec(rows, cols, data)
}

/// Routing from precomputed router logits. `noise` is added before the
/// temperature (train mode only); in infer mode it is ignored.
pub fn route_logits(logits: &Tensor, tau: f64, mode: RouteMode, noise: Option<&Tensor>) -> Result<RoutingDecision> {
    if !(tau > 0.0) {
        return Err(Error::contract(format!("routing temperature must be positive, got {tau}")));
    }
    let mut scores = logits.clone();
    if let (RouteMode::Train, Some(z)) = (mode, noise) {
        if z.shape() != logits.shape() {
            return Err(Error::contract("gumbel noise shape differs from the logits"));
        }
        scores.add_assign(z);
    }
    scores.scale_in_place(1.0 / tau);
    for r in 0..scores.rows() {
        softmax_in_place(scores.row_slice_mut(r));
    }
    Ok(RoutingDecision::from_scores(scores))
}

/// `α · N · Σ f_i P_i`.
pub fn balance_loss(dispatch: &[f64], mean_prob: &[f64], alpha: f64) -> Result<f64> {
    check_stats(dispatch, mean_prob)?;
    let n = dispatch.len() as f64;
    Ok(alpha * n * dispatch.iter().zip(mean_prob).map(|(f, p)| f * p).sum::<f64>())
}

fn check_stats(dispatch: &[f64], mean_prob: &[f64]) -> Result<()> {
    if dispatch.len() != mean_prob.len() || dispatch.is_empty() {
        return Err(Error::contract("dispatch and probability statistics differ in length"));
    }
    let sum: f64 = dispatch.iter().sum();
    if (sum - 1.0).abs() > 1e-6 || dispatch.iter().any(|f| *f < 0.0) {
        return Err(Error::contract(format!("dispatch fractions must sum to 1, got {sum}")));
    }
    Ok(())
}

/// Linear from `tau_start` to `tau_end` over the first `anneal_fraction`
/// of `total_steps`, then constant.
pub fn anneal_tau(step: usize, total_steps: usize, schedule: &MoeConfig) -> f64 {
    let window = schedule.anneal_fraction * total_steps as f64;
    if window <= 0.0 {
        return schedule.tau_end;
    }
    let p = (step as f64 / window).min(1.0);
    schedule.tau_start + (schedule.tau_end - schedule.tau_start) * p
}

/// Two-layer GELU feedforward.
#[derive(Clone, Debug)]
pub struct Expert {
    pub up: Linear,
    pub down: Linear,
}

impl Expert {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, expansion: usize, rng: &mut Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d, d * expansion, rng),
            down: Linear::new(store, &format!("{name}.down"), d * expansion, d, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, h: Var) -> Var {
        let x = self.up.forward(g, h);
        let x = g.gelu(x);
        self.down.forward(g, x)
    }
}

#[derive(Clone, Debug)]
enum Condition {
    Language(Embedding),
    Global(Linear),
}

/// What the router sees besides the token itself.
#[derive(Clone, Copy, Debug)]
pub enum RouterInput {
    Language(usize),
    Global(Var),
}

#[derive(Clone, Debug)]
pub struct ExpertGroup {
    pub kind: GroupKind,
    pub experts: Vec<Expert>,
    pub router: Linear,
    condition: Condition,
}

/// Graph nodes and statistics produced by one group on one sequence.
pub struct MoeOutput {
    pub out: Var,
    /// Routing scores, `T × N`.
    pub scores: Var,
    /// `α · N · Σ f_i P_i` with `f` held constant.
    pub balance: Var,
    pub decision: RoutingDecision,
}

impl ExpertGroup {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kind: GroupKind,
        d: usize,
        cfg: &MoeConfig,
        rng: &mut Rng,
    ) -> Self {
        let experts = (0..cfg.n_experts)
            .map(|i| Expert::new(store, &format!("{name}.expert{i}"), d, cfg.expansion, rng))
            .collect();
        let router = Linear::no_bias(store, &format!("{name}.router"), d, cfg.n_experts, rng);
        let condition = match kind {
            GroupKind::Lingual => Condition::Language(Embedding::new(store, &format!("{name}.lang"), N_LANGUAGES, d, rng)),
            GroupKind::Stylistic => Condition::Global(Linear::no_bias(store, &format!("{name}.cond"), d, d, rng)),
        };
        Self {
            kind,
            experts,
            router,
            condition,
        }
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    /// Router logits `T × N` for tokens `h` under `input`.
    pub fn logits(&self, g: &mut Graph, h: Var, input: RouterInput) -> Result<Var> {
        let c = match (&self.condition, input) {
            (Condition::Language(e), RouterInput::Language(l)) => {
                if l >= N_LANGUAGES {
                    return Err(Error::contract(format!("language index {l} out of range")));
                }
                e.forward(g, &[l])
            }
            (Condition::Global(p), RouterInput::Global(z)) => p.forward(g, z),
            _ => return Err(Error::contract("router input does not match the expert group")),
        };
        let x = g.add_row(h, c);
        Ok(self.router.forward(g, x))
    }

    /// Soft mixture in train mode (noise given by `noise`, may be `None`
    /// for a noiseless soft mixture); argmax expert per token in infer mode.
    pub fn forward(
        &self,
        g: &mut Graph,
        h: Var,
        input: RouterInput,
        tau: f64,
        mode: RouteMode,
        noise: Option<&Tensor>,
        alpha: f64,
    ) -> Result<MoeOutput> {
        let logits = self.logits(g, h, input)?;
        let decision = route_logits(g.value(logits), tau, mode, noise)?;
        let mut x = logits;
        if let (RouteMode::Train, Some(z)) = (mode, noise) {
            let z = g.constant(z.clone());
            x = g.add(x, z);
        }
        let x = g.scale(x, 1.0 / tau);
        let scores = g.softmax_rows(x);
        let n = self.n_experts();
        let weights = match mode {
            RouteMode::Train => scores,
            RouteMode::Infer => {
                let (t, _) = decision.scores.shape();
                let mut onehot = Tensor::zeros(t, n);
                for (r, s) in decision.selected.iter().enumerate() {
                    onehot.set(r, *s, 1.0);
                }
                g.constant(onehot)
            }
        };
        let mut out = None;
        for (i, e) in self.experts.iter().enumerate() {
            let y = e.forward(g, h);
            let w = g.slice_cols(weights, i, 1);
            let y = g.mul_col(y, w);
            out = Some(match out {
                None => y,
                Some(acc) => g.add(acc, y),
            });
        }
        let out = out.expect("expert group has at least one expert");
        let mean_p = g.mean_rows(scores);
        let f = g.constant(Tensor::row(&decision.dispatch));
        let fp = g.mul(mean_p, f);
        let fp = g.sum_all(fp);
        let balance = g.scale(fp, alpha * n as f64);
        Ok(MoeOutput {
            out,
            scores,
            balance,
            decision,
        })
    }
}
