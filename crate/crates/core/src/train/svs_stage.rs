use std::collections::BTreeMap;
use std::path::Path;

use cantus_grad::{Adam, Graph, ParamStore, Tensor, Var};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::archive::{store_from_archive, store_to_archive};
use super::codec_stage::CodecCheckpoint;
use super::{adam_config, clip_grads, get_config, put_config, scheduled_lr, LossReport, Stage, TensorArchive};
use crate::bbc::{blur_mask, log_durations, BbcEncoder};
use crate::codec::{encode_audio, encode_text, AudioKind, PromptKind};
use crate::config::Config;
use crate::cusmoe::{anneal_tau, RouteMode};
use crate::error::{Error, Result};
use crate::flowformer::{f0_loss_graph, FrameCues, flow_loss_graph, interpolate, FieldOutput, FlowFormer, Routing};
use crate::rng::{self, stream, Rng};
use crate::score::{CorpusSample, F0Track, MusicScore, DOWNSAMPLE};

const PREFIX: &str = "svs.";

/// Content encoder plus field estimator.
#[derive(Clone, Debug)]
pub struct SvsModel {
    pub bbc: BbcEncoder,
    pub flow: FlowFormer,
}

impl SvsModel {
    pub fn new(store: &mut ParamStore, cfg: &Config, rng: &mut Rng) -> Self {
        Self {
            bbc: BbcEncoder::new(store, "svs.bbc", cfg.flow.d_model, rng),
            flow: FlowFormer::new(store, "svs.flow", cfg, rng),
        }
    }
}

/// A training sample with everything the frozen codec contributes.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub index: usize,
    pub singer: u32,
    pub score: MusicScore,
    /// Normalized codec latent of the singing mel, `T × C`.
    pub latent: Tensor,
    /// Ground-truth F0 pooled to the latent frame rate.
    pub f0: F0Track,
    pub singing_prompt: Tensor,
    pub speech_prompt: Tensor,
    pub text_prompt: Tensor,
    pub cues: FrameCues,
}

impl PreparedSample {
    pub fn new(s: &CorpusSample, codec: &CodecCheckpoint) -> Result<Self> {
        let (c, store) = (&codec.codec, &codec.store);
        let (lat, sp) = encode_audio(&s.singing_mel, AudioKind::Singing, c, store)?;
        let (_, pp) = encode_audio(&s.speech_mel, AudioKind::Speech, c, store)?;
        let tp = encode_text(&s.textual_prompt_tokens, &s.score, c, store)?;
        let latent = codec.stats.normalize(&lat.values);
        if latent.rows() != s.score.total_frames() {
            return Err(Error::contract(format!(
                "sample {}: latent has {} frames, score {}",
                s.index,
                latent.rows(),
                s.score.total_frames()
            )));
        }
        Ok(Self {
            index: s.index,
            singer: s.singer.id,
            score: s.score.clone(),
            latent,
            f0: s.singing_f0.pool(DOWNSAMPLE),
            singing_prompt: sp.vectors,
            speech_prompt: pp.vectors,
            text_prompt: tp.vectors,
            cues: FrameCues::from_score(&s.score),
        })
    }

    pub fn prompt(&self, kind: PromptKind) -> &Tensor {
        match kind {
            PromptKind::Singing => &self.singing_prompt,
            PromptKind::Speech => &self.speech_prompt,
            PromptKind::Text => &self.text_prompt,
        }
    }
}

/// Graph nodes of one training example.
pub struct SampleLosses {
    pub dur: Var,
    pub pitch: Var,
    pub balance: Var,
    pub flow: Var,
}

pub struct SvsTrainer {
    pub cfg: Config,
    pub codec: CodecCheckpoint,
    pub model: SvsModel,
    pub store: ParamStore,
    opt: Adam,
    pub step: usize,
    data: Vec<PreparedSample>,
    by_singer: BTreeMap<u32, Vec<usize>>,
}

impl SvsTrainer {
    pub fn new(cfg: &Config, codec: CodecCheckpoint, train: &[CorpusSample]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::contract("SVS training needs at least one sample"));
        }
        let data = train
            .iter()
            .map(|s| PreparedSample::new(s, &codec))
            .collect::<Result<Vec<_>>>()?;
        let mut by_singer: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, d) in data.iter().enumerate() {
            by_singer.entry(d.singer).or_default().push(i);
        }
        let mut store = ParamStore::new();
        let model = SvsModel::new(&mut store, cfg, &mut rng::rng(cfg.train.seed, stream::SVS_INIT));
        let opt = Adam::new(&store, adam_config(cfg));
        Ok(Self {
            cfg: cfg.clone(),
            codec,
            model,
            store,
            opt,
            step: 0,
            data,
            by_singer,
        })
    }

    pub fn data(&self) -> &[PreparedSample] {
        &self.data
    }

    /// Prompt for `target`, of a uniformly chosen kind. Audio prompts come
    /// from another sample by the same singer when one exists; a textual
    /// prompt describes the target itself. `None` with the dropout
    /// probability.
    fn draw_prompt(&self, target: usize, r: &mut Rng) -> Option<Tensor> {
        let kind = [PromptKind::Singing, PromptKind::Speech, PromptKind::Text][r.random_range(0..3)];
        let same = &self.by_singer[&self.data[target].singer];
        let others: Vec<usize> = same.iter().copied().filter(|i| *i != target).collect();
        let src = if others.is_empty() || kind == PromptKind::Text {
            target
        } else {
            others[r.random_range(0..others.len())]
        };
        let drop = r.random::<f64>() < self.cfg.train.prompt_dropout_p;
        (!drop).then(|| self.data[src].prompt(kind).clone())
    }

    /// Builds the loss nodes for one example; all randomness comes from `r`.
    pub fn sample_losses(
        model: &SvsModel,
        cfg: &Config,
        g: &mut Graph,
        d: &PreparedSample,
        prompt: Option<&Tensor>,
        tau: f64,
        r: &mut Rng,
    ) -> Result<(SampleLosses, FieldOutput)> {
        let grid = cfg.flow.train_timesteps;
        let t = r.random_range(0..grid) as f64 / (grid - 1) as f64;
        let (rows, cols) = d.latent.shape();
        let x0 = Tensor::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| StandardNormal.sample(&mut *r)).collect(),
        );
        let xt = interpolate(&x0, &d.latent, t)?;
        let durations = d.score.durations();
        let mask = blur_mask(&durations, cfg.bbc.mask_m, r);

        let emb = model.bbc.embed(g, &d.score)?;
        let pred = model.bbc.log_durations(g, emb);
        let gt = g.constant(Tensor::column(&log_durations(&durations)));
        let dur = g.mse(pred, gt);
        let z_c = model.bbc.frames(g, emb, &durations, &mask);

        let xt = g.constant(xt);
        let p = prompt.map(|p| g.constant(p.clone()));
        let mut routing = Routing {
            tau,
            mode: RouteMode::Train,
            noise: Some(r),
            alpha: cfg.moe.alpha,
        };
        let lang = d.score.language().index();
        let out = model.flow.forward(g, xt, t, z_c, Some(&d.cues), p, lang, &mut routing)?;
        let flow = flow_loss_graph(g, out.v, &x0, &d.latent)?;
        let pitch = f0_loss_graph(g, out.f0, &d.f0)?;
        Ok((
            SampleLosses {
                dur,
                pitch,
                balance: out.balance,
                flow,
            },
            out,
        ))
    }

    pub fn sample_batch(&self, r: &mut Rng) -> Vec<usize> {
        let n = self.cfg.train.svs_batch.clamp(1, self.data.len());
        let mut chosen = Vec::with_capacity(n);
        while chosen.len() < n {
            let p = r.random_range(0..self.data.len());
            if !chosen.contains(&p) {
                chosen.push(p);
            }
        }
        chosen
    }

    pub fn train_step(&mut self) -> Result<LossReport> {
        let mut r = rng::rng(rng::derive_seed(self.cfg.train.seed, self.step as u64), stream::SVS_STEP);
        let batch = self.sample_batch(&mut r);
        let prompts: Vec<Option<Tensor>> = batch.iter().map(|i| self.draw_prompt(*i, &mut r)).collect();
        let t = &self.cfg.train;
        let lr = scheduled_lr(t.svs_lr, self.step, t.warmup_steps, t.svs_steps);
        let tau = anneal_tau(self.step, t.svs_steps, &self.cfg.moe);

        let (report, mut grads) = {
            let mut g = Graph::new(&self.store);
            let mut parts = Vec::with_capacity(batch.len());
            for (i, p) in batch.iter().zip(&prompts) {
                let (l, _) = Self::sample_losses(&self.model, &self.cfg, &mut g, &self.data[*i], p.as_ref(), tau, &mut r)?;
                parts.push(l);
            }
            let k = 1.0 / parts.len() as f64;
            let sum = |g: &mut Graph, f: fn(&SampleLosses) -> Var| {
                let mut acc = f(&parts[0]);
                for p in &parts[1..] {
                    acc = g.add(acc, f(p));
                }
                g.scale(acc, k)
            };
            let dur = sum(&mut g, |p| p.dur);
            let pitch = sum(&mut g, |p| p.pitch);
            let balance = sum(&mut g, |p| p.balance);
            let flow = sum(&mut g, |p| p.flow);
            let mut total = None;
            for (v, w) in [(dur, t.w_dur), (pitch, t.w_pitch), (balance, t.w_balance), (flow, t.w_flow)] {
                let s = g.scale(v, w);
                total = Some(match total {
                    None => s,
                    Some(acc) => g.add(acc, s),
                });
            }
            let total = total.expect("four loss terms");
            let report = LossReport {
                stage: Stage::Svs,
                step: self.step,
                terms: vec![
                    ("dur", g.value(dur).item()),
                    ("pitch", g.value(pitch).item()),
                    ("balance", g.value(balance).item()),
                    ("flow", g.value(flow).item()),
                ],
                total: g.value(total).item(),
                extra: vec![("tau", tau), ("lr", lr)],
            };
            report.check_finite()?;
            (report, g.backward(total).into_params())
        };
        clip_grads(&mut grads, self.cfg.train.grad_clip);
        self.opt.step(&mut self.store, &grads, lr);
        self.step += 1;
        Ok(report)
    }

    pub fn run(&mut self, steps: usize, log: &mut dyn FnMut(&LossReport)) -> Result<()> {
        let every = self.cfg.train.log_every.max(1);
        for _ in 0..steps {
            let report = self.train_step()?;
            if report.step % every == 0 || report.step + 1 == steps {
                log(&report);
            }
        }
        Ok(())
    }

    pub fn finish(self) -> SvsCheckpoint {
        SvsCheckpoint {
            cfg: self.cfg,
            codec: self.codec,
            model: self.model,
            store: self.store,
        }
    }
}

/// Self-contained synthesis checkpoint: config, frozen codec with latent
/// statistics, and the SVS parameters.
#[derive(Clone, Debug)]
pub struct SvsCheckpoint {
    pub cfg: Config,
    pub codec: CodecCheckpoint,
    pub model: SvsModel,
    pub store: ParamStore,
}

impl SvsCheckpoint {
    /// Untrained model over `codec`, seeded from the config.
    pub fn untrained(cfg: &Config, codec: CodecCheckpoint) -> Self {
        let mut store = ParamStore::new();
        let model = SvsModel::new(&mut store, cfg, &mut rng::rng(cfg.train.seed, stream::SVS_INIT));
        Self {
            cfg: cfg.clone(),
            codec,
            model,
            store,
        }
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut a = TensorArchive::new();
        put_config(&mut a, &self.cfg)?;
        self.codec.write_into(&mut a)?;
        store_to_archive(&self.store, PREFIX, &mut a)?;
        Ok(a)
    }

    pub fn from_archive(archive: &TensorArchive) -> Result<Self> {
        let cfg = get_config(archive)?;
        let codec = CodecCheckpoint::read_from(archive, &cfg)?;
        let mut store = ParamStore::new();
        let model = SvsModel::new(&mut store, &cfg, &mut rng::rng(0, stream::INIT));
        store_from_archive(&mut store, PREFIX, archive)?;
        Ok(Self { cfg, codec, model, store })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(super::save_archive(path, &self.to_archive()?)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&super::load_archive(path)?)
    }
}
