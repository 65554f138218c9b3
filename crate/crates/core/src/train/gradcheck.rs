use cantus_grad::{Graph, ParamStore, Tensor, Var};
use rand::Rng as _;

use super::svs_stage::{PreparedSample, SvsModel, SvsTrainer};
use crate::bbc::log_durations;
use crate::codec::{disc_loss_graph, gen_loss_graph, total_contrastive_graph};
use crate::config::{Config, CorpusConfig, MoeConfig};
use crate::cusmoe::{gumbel_noise, ExpertGroup, GroupKind, RouteMode, RouterInput};
use crate::error::Result;
use crate::flowformer::{f0_loss_graph, flow_loss_graph, FrameCues};
use crate::nn::normal;
use crate::rng::{self, stream, Rng};
use crate::score::{gen_corpus, DOWNSAMPLE};

pub const STEP: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

/// Worst relative error between autodiff gradients and central differences
/// on `n_probes` random coordinates. A probe picks a parameter tensor
/// uniformly among those with a nonzero gradient, then a coordinate inside
/// it. The relative error of one probe
/// is `|a − n| / max(|a|, |n|, 1e-6)`.
///
/// `loss_fn` must be deterministic and return a scalar.
pub fn gradcheck<F>(loss_fn: F, store: &ParamStore, n_probes: usize, seed: u64) -> f64
where
    F: Fn(&mut Graph) -> Var,
{
    if store.is_empty() || n_probes == 0 {
        return 0.0;
    }
    let analytic = {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g);
        g.backward(loss).into_params()
    };
    let eval = |s: &ParamStore| {
        let mut g = Graph::new(s);
        let loss = loss_fn(&mut g);
        g.value(loss).item()
    };
    let ids: Vec<_> = store
        .ids()
        .filter(|id| analytic.get(*id).is_some_and(|t| t.data().iter().any(|v| *v != 0.0)))
        .collect();
    if ids.is_empty() {
        return 0.0;
    }
    let mut r = rng::rng(seed, rng::stream::EVAL);
    let mut work = store.clone();
    let mut worst = 0.0f64;
    for _ in 0..n_probes {
        let id = ids[r.random_range(0..ids.len())];
        let k = r.random_range(0..store.get(id).len());
        let x = store.get(id).data()[k];
        work.get_mut(id).data_mut()[k] = x + STEP;
        let up = eval(&work);
        work.get_mut(id).data_mut()[k] = x - STEP;
        let down = eval(&work);
        work.get_mut(id).data_mut()[k] = x;
        let numeric = (up - down) / (2.0 * STEP);
        let a = analytic.get(id).map_or(0.0, |t| t.data()[k]);
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
        worst = worst.max(err);
    }
    worst
}

/// Named loss with its worst relative gradient error.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckEntry {
    pub loss: &'static str,
    pub max_rel_error: f64,
}

/// Losses covered by [`suite`], in report order.
pub const SUITE: [&str; 7] = ["flow", "contrastive", "lsgan", "duration", "pitch", "balance", "end_to_end"];

fn random(r: &mut Rng, rows: usize, cols: usize) -> Tensor {
    normal(r, rows, cols, 1.0)
}

/// A short training example with random latent and prompt rows over an
/// oracle score, for checking the model's losses without a codec.
pub fn synthetic_sample(cfg: &Config, seed: u64) -> Result<PreparedSample> {
    let corpus = gen_corpus(
        &CorpusConfig {
            n_singers: 1,
            n_scores: 2,
            min_units: 3,
            max_units: 4,
            ..cfg.corpus.clone()
        },
        seed,
    )?;
    let s = &corpus.samples[0];
    let mut r = rng::rng(seed, stream::EVAL);
    let t = s.score.total_frames();
    let (c, d) = (cfg.codec.latent_channels, cfg.flow.d_model);
    Ok(PreparedSample {
        index: 0,
        singer: s.singer.id,
        score: s.score.clone(),
        latent: random(&mut r, t, c),
        f0: s.singing_f0.pool(DOWNSAMPLE),
        singing_prompt: random(&mut r, 5, d),
        speech_prompt: random(&mut r, 3, d),
        text_prompt: random(&mut r, t, d),
        cues: FrameCues::from_score(&s.score),
    })
}

/// Finite-difference check of every differentiable loss. The flow, pitch,
/// contrastive and LSGAN terms are checked on random inputs; duration and
/// the end-to-end SVS objective on the given model parameters; balance on a
/// fresh expert group built from `cfg`.
pub fn suite(cfg: &Config, model: &SvsModel, store: &ParamStore, probes: usize, seed: u64) -> Result<Vec<GradcheckEntry>> {
    let mut r = rng::rng(seed, stream::EVAL);
    let sample = synthetic_sample(cfg, seed)?;
    let mut out = Vec::with_capacity(SUITE.len());
    let mut push = |loss: &'static str, e: f64| out.push(GradcheckEntry { loss, max_rel_error: e });

    let mut s = ParamStore::new();
    let v = s.add("v", random(&mut r, 6, 4));
    let (x0, x1) = (random(&mut r, 6, 4), random(&mut r, 6, 4));
    push(
        "flow",
        gradcheck(|g| {
            let v = g.param(v);
            flow_loss_graph(g, v, &x0, &x1).expect("shapes agree")
        }, &s, probes, seed),
    );

    let mut s = ParamStore::new();
    let n = 4;
    let si = s.add("si", random(&mut r, n, 6));
    let sp = s.add("sp", random(&mut r, n, 6));
    let te = s.add("te", random(&mut r, n, 6));
    let it = s.add("inv_tau", Tensor::scalar(2.5));
    push(
        "contrastive",
        gradcheck(|g| {
            let (a, b, c, t) = (g.param(si), g.param(sp), g.param(te), g.param(it));
            total_contrastive_graph(g, a, b, c, t)
        }, &s, probes, seed),
    );

    let mut s = ParamStore::new();
    let real = s.add("real", random(&mut r, 5, 1));
    let fake = s.add("fake", random(&mut r, 5, 1));
    push(
        "lsgan",
        gradcheck(|g| {
            let (a, b) = (g.param(real), g.param(fake));
            let d = disc_loss_graph(g, a, b);
            let gl = gen_loss_graph(g, b);
            g.add(d, gl)
        }, &s, probes, seed),
    );

    let durations = sample.score.durations();
    let gt_dur = Tensor::column(&log_durations(&durations));
    push(
        "duration",
        gradcheck(|g| {
            let emb = model.bbc.embed(g, &sample.score).expect("score fits the tables");
            let p = model.bbc.log_durations(g, emb);
            let t = g.constant(gt_dur.clone());
            g.mse(p, t)
        }, store, probes, seed),
    );

    let mut s = ParamStore::new();
    let head = s.add("head", random(&mut r, sample.f0.len(), 2));
    push(
        "pitch",
        gradcheck(|g| {
            let h = g.param(head);
            f0_loss_graph(g, h, &sample.f0).expect("lengths agree")
        }, &s, probes, seed),
    );

    let mut s = ParamStore::new();
    let moe = MoeConfig {
        n_experts: cfg.moe.n_experts.max(2),
        ..cfg.moe.clone()
    };
    let grp = ExpertGroup::new(&mut s, "group", GroupKind::Stylistic, 8, &moe, &mut r);
    let h = random(&mut r, 5, 8);
    let z = random(&mut r, 1, 8);
    let noise = gumbel_noise(&mut r, 5, moe.n_experts);
    push(
        "balance",
        gradcheck(|g| {
            let (h, z) = (g.constant(h.clone()), g.constant(z.clone()));
            let o = grp
                .forward(g, h, RouterInput::Global(z), moe.tau_start, RouteMode::Train, Some(&noise), moe.alpha)
                .expect("shapes agree");
            o.balance
        }, &s, probes, seed),
    );

    let w = &cfg.train;
    push(
        "end_to_end",
        gradcheck(|g| {
            let mut rr = rng::rng(seed, stream::EVAL);
            let (l, _) = SvsTrainer::sample_losses(model, cfg, g, &sample, Some(&sample.singing_prompt), cfg.moe.tau_start, &mut rr)
                .expect("sample fits the model");
            let terms = [(l.dur, w.w_dur), (l.pitch, w.w_pitch), (l.balance, w.w_balance), (l.flow, w.w_flow)];
            let mut acc = g.scale(terms[0].0, terms[0].1);
            for (v, k) in &terms[1..] {
                let s = g.scale(*v, *k);
                acc = g.add(acc, s);
            }
            acc
        }, store, probes, seed),
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use cantus_grad::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::from_vec(1, 5, vec![0.3, -1.2, 2.0, 0.7, -0.1]));
        let err = gradcheck(
            |g| {
                let v = g.param(x);
                let s = g.square(v);
                let s = g.sum_all(s);
                g.scale(s, 0.5)
            },
            &store,
            20,
            3,
        );
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::from_vec(1, 3, vec![0.5, 1.0, 1.5]));
        // the analytic graph ignores the second term's dependence on x
        let err = gradcheck(
            |g| {
                let v = g.param(x);
                let c = g.constant(g.value(v).clone());
                let p = g.mul(v, c);
                g.sum_all(p)
            },
            &store,
            10,
            0,
        );
        assert!(err > 0.1);
    }

    #[test]
    fn suite_passes_on_random_init() {
        let cfg = Config::default();
        let mut store = ParamStore::new();
        let model = SvsModel::new(&mut store, &cfg, &mut rng::rng(3, stream::SVS_INIT));
        let report = suite(&cfg, &model, &store, 20, 1).unwrap();
        let names: Vec<_> = report.iter().map(|e| e.loss).collect();
        assert_eq!(names, SUITE);
        for e in &report {
            assert!(e.max_rel_error < 1e-4, "{e:?}");
        }
    }
}
