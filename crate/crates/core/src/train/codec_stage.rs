use std::collections::HashMap;
use std::path::Path;

use cantus_grad::{Adam, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng as _;

use super::archive::{store_from_archive, store_to_archive};
use super::{adam_config, clip_grads, get_config, put_config, scheduled_lr, ArchiveTensor, LossReport, Stage, TensorArchive};
use crate::codec::{
    disc_loss_graph, encode_audio, gen_loss_graph, total_contrastive_graph, AudioKind, Codec, LatentStats,
};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::score::CorpusSample;

const PREFIX: &str = "codec.";

pub struct CodecTrainer {
    pub cfg: Config,
    pub codec: Codec,
    pub store: ParamStore,
    gen_opt: Adam,
    disc_opt: Adam,
    pub step: usize,
}

struct Forward {
    contras: Var,
    rec: Var,
    adv: Var,
    decoded: Vec<Tensor>,
}

impl CodecTrainer {
    pub fn new(cfg: &Config) -> Self {
        let mut store = ParamStore::new();
        let codec = Codec::new(&mut store, cfg, &mut rng::rng(cfg.train.seed, stream::INIT));
        let gen_opt = Adam::new(&store, adam_config(cfg));
        let disc_opt = Adam::new(&store, adam_config(cfg));
        Self {
            cfg: cfg.clone(),
            codec,
            store,
            gen_opt,
            disc_opt,
            step: 0,
        }
    }

    fn forward(&self, g: &mut Graph, batch: &[&CorpusSample]) -> Result<Forward> {
        let c = &self.codec;
        let mut si = Vec::with_capacity(batch.len());
        let mut sp = Vec::with_capacity(batch.len());
        let mut te = Vec::with_capacity(batch.len());
        let mut recs = Vec::with_capacity(batch.len());
        let mut advs = Vec::with_capacity(batch.len());
        let mut decoded = Vec::with_capacity(batch.len());
        for s in batch {
            let mel = g.constant(s.singing_mel.to_tensor());
            let (lat, p) = c.singing.forward(g, mel);
            si.push(g.mean_rows(p));
            let speech = g.constant(s.speech_mel.to_tensor());
            let (_, q) = c.speech.forward(g, speech);
            sp.push(g.mean_rows(q));
            let t = c.text.forward(g, &s.textual_prompt_tokens, &s.score)?;
            te.push(g.mean_rows(t));
            let dec = c.decoder.forward(g, lat);
            let frames = s.singing_mel.frames();
            let dec = if g.shape(dec).0 != frames { g.slice_rows(dec, 0, frames) } else { dec };
            decoded.push(g.value(dec).clone());
            recs.push(g.mse(dec, mel));
            let d_fake = c.disc.forward(g, dec);
            advs.push(gen_loss_graph(g, d_fake));
        }
        let (si, sp, te) = (g.concat_rows(&si), g.concat_rows(&sp), g.concat_rows(&te));
        let inv_tau = c.inv_tau(g, &self.store);
        let contras = total_contrastive_graph(g, si, sp, te, inv_tau);
        let rec = mean_of(g, &recs);
        let adv = mean_of(g, &advs);
        Ok(Forward {
            contras,
            rec,
            adv,
            decoded,
        })
    }

    /// One generator update followed by one discriminator update.
    pub fn train_step(&mut self, batch: &[&CorpusSample]) -> Result<LossReport> {
        if batch.len() < 2 {
            return Err(Error::contract("codec batches need at least two samples"));
        }
        let w = &self.cfg.codec;
        let (wc, wr, wa) = (w.w_contras, w.w_recon, w.w_adv);
        let t = &self.cfg.train;
        let lr = scheduled_lr(t.codec_lr, self.step, t.warmup_steps, t.codec_steps);

        let (report, mut grads, decoded) = {
            let mut g = Graph::new(&self.store);
            let f = self.forward(&mut g, batch)?;
            let a = g.scale(f.contras, wc);
            let b = g.scale(f.rec, wr);
            let c = g.scale(f.adv, wa);
            let ab = g.add(a, b);
            let total = g.add(ab, c);
            let report = LossReport {
                stage: Stage::Codec,
                step: self.step,
                terms: vec![
                    ("contras", g.value(f.contras).item()),
                    ("rec", g.value(f.rec).item()),
                    ("adv", g.value(f.adv).item()),
                ],
                total: g.value(total).item(),
                extra: vec![],
            };
            report.check_finite()?;
            (report, g.backward(total).into_params(), f.decoded)
        };
        let store = &self.store;
        grads.retain(|id| !Codec::is_disc_param(store, id));
        clip_grads(&mut grads, self.cfg.train.grad_clip);
        self.gen_opt.step(&mut self.store, &grads, lr);

        let mut report = report;
        let disc = {
            let mut g = Graph::new(&self.store);
            let mut parts = Vec::with_capacity(batch.len());
            for (s, fake) in batch.iter().zip(decoded) {
                let real = g.constant(s.singing_mel.to_tensor());
                let fake = g.constant(fake);
                let dr = self.codec.disc.forward(&mut g, real);
                let df = self.codec.disc.forward(&mut g, fake);
                parts.push(disc_loss_graph(&mut g, dr, df));
            }
            let loss = mean_of(&mut g, &parts);
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: self.step,
                    term: "disc".into(),
                });
            }
            let mut grads = g.backward(loss).into_params();
            let store = &self.store;
            grads.retain(|id| Codec::is_disc_param(store, id));
            clip_grads(&mut grads, self.cfg.train.grad_clip);
            (value, grads)
        };
        if wa > 0.0 {
            self.disc_opt.step(&mut self.store, &disc.1, lr);
        }
        report.extra.push(("disc", disc.0));
        report.extra.push(("tau", (-self.store.get(self.codec.log_inv_tau).item()).exp()));
        self.step += 1;
        Ok(report)
    }

    /// Batch of distinct positions into `train`. About a quarter of the
    /// batch is spent on same-content pairs sung by different singers.
    pub fn sample_batch(&self, train: &[CorpusSample]) -> Vec<usize> {
        let n = self.cfg.train.codec_batch.min(train.len());
        let mut r = rng::rng(rng::derive_seed(self.cfg.train.seed, self.step as u64), stream::CODEC_STEP);
        let pos: HashMap<usize, usize> = train.iter().enumerate().map(|(p, s)| (s.index, p)).collect();
        let mut pairs: Vec<(usize, usize)> = train
            .iter()
            .enumerate()
            .filter(|(_, s)| s.content_source != s.index)
            .filter_map(|(p, s)| pos.get(&s.content_source).map(|q| (p, *q)))
            .collect();
        pairs.shuffle(&mut r);
        let mut chosen = Vec::with_capacity(n);
        for (a, b) in pairs {
            if chosen.len() + 2 > n / 4 * 2 {
                break;
            }
            if !chosen.contains(&a) && !chosen.contains(&b) {
                chosen.push(a);
                chosen.push(b);
            }
        }
        while chosen.len() < n {
            let p = r.random_range(0..train.len());
            if !chosen.contains(&p) {
                chosen.push(p);
            }
        }
        chosen
    }

    pub fn run(
        &mut self,
        train: &[CorpusSample],
        steps: usize,
        log: &mut dyn FnMut(&LossReport),
    ) -> Result<()> {
        let every = self.cfg.train.log_every.max(1);
        for _ in 0..steps {
            let idx = self.sample_batch(train);
            let batch: Vec<&CorpusSample> = idx.iter().map(|i| &train[*i]).collect();
            let report = self.train_step(&batch)?;
            if report.step % every == 0 || report.step + 1 == steps {
                log(&report);
            }
        }
        Ok(())
    }

    /// Freezes the codec, fitting latent statistics on `train`.
    pub fn finish(self, train: &[CorpusSample]) -> Result<CodecCheckpoint> {
        let mut latents = Vec::with_capacity(train.len());
        for s in train {
            latents.push(encode_audio(&s.singing_mel, AudioKind::Singing, &self.codec, &self.store)?.0.values);
        }
        let stats = if latents.is_empty() {
            LatentStats::identity(self.codec.latent_channels)
        } else {
            LatentStats::fit(&latents.iter().collect::<Vec<_>>())
        };
        Ok(CodecCheckpoint {
            cfg: self.cfg,
            codec: self.codec,
            store: self.store,
            stats,
        })
    }
}

fn mean_of(g: &mut Graph, parts: &[Var]) -> Var {
    let mut acc = parts[0];
    for p in &parts[1..] {
        acc = g.add(acc, *p);
    }
    g.scale(acc, 1.0 / parts.len() as f64)
}

/// Trained, frozen codec with the statistics used to whiten its latents.
#[derive(Clone, Debug)]
pub struct CodecCheckpoint {
    pub cfg: Config,
    pub codec: Codec,
    pub store: ParamStore,
    pub stats: LatentStats,
}

impl CodecCheckpoint {
    pub fn write_into(&self, archive: &mut TensorArchive) -> Result<()> {
        store_to_archive(&self.store, PREFIX, archive)?;
        let c = self.stats.mean.len() as u32;
        archive.insert("codec_stats.mean", ArchiveTensor::f64(vec![c], self.stats.mean.clone()))?;
        archive.insert("codec_stats.std", ArchiveTensor::f64(vec![c], self.stats.std.clone()))?;
        Ok(())
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut a = TensorArchive::new();
        put_config(&mut a, &self.cfg)?;
        self.write_into(&mut a)?;
        Ok(a)
    }

    /// Reads the codec part of an archive, building the architecture from `cfg`.
    pub fn read_from(archive: &TensorArchive, cfg: &Config) -> Result<Self> {
        let mut store = ParamStore::new();
        let codec = Codec::new(&mut store, cfg, &mut rng::rng(0, stream::INIT));
        store_from_archive(&mut store, PREFIX, archive)?;
        let stats = LatentStats {
            mean: archive.get("codec_stats.mean")?.values(),
            std: archive.get("codec_stats.std")?.values(),
        };
        if stats.mean.len() != codec.latent_channels || stats.std.len() != codec.latent_channels {
            return Err(Error::Validation("latent statistics do not match the codec".into()));
        }
        Ok(Self {
            cfg: cfg.clone(),
            codec,
            store,
            stats,
        })
    }

    pub fn from_archive(archive: &TensorArchive) -> Result<Self> {
        let cfg = get_config(archive)?;
        Self::read_from(archive, &cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(super::save_archive(path, &self.to_archive()?)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&super::load_archive(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::CorpusConfig;
    use crate::score::gen_corpus;

    fn tiny() -> (Config, Vec<CorpusSample>) {
        let mut cfg = Config::default();
        cfg.codec.hidden = 16;
        cfg.codec.disc_channels = 8;
        cfg.flow.d_model = 16;
        cfg.codec.text_heads = 2;
        cfg.corpus = CorpusConfig {
            n_singers: 2,
            n_scores: 6,
            min_units: 2,
            max_units: 3,
            ..CorpusConfig::default()
        };
        let corpus = gen_corpus(&cfg.corpus, 1).unwrap();
        (cfg, corpus.samples)
    }

    #[test]
    fn zero_adversarial_weight_drops_the_term() {
        let (mut cfg, samples) = tiny();
        cfg.codec.w_adv = 0.0;
        let mut t = CodecTrainer::new(&cfg);
        let batch: Vec<&CorpusSample> = samples.iter().take(3).collect();
        let r = t.train_step(&batch).unwrap();
        let sum = r.term("contras").unwrap() + r.term("rec").unwrap();
        assert!((r.total - sum).abs() < 1e-12);
        assert!(r.term("adv").unwrap() > 0.0);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (mut cfg, samples) = tiny();
        cfg.train.codec_lr = 0.0;
        let mut t = CodecTrainer::new(&cfg);
        let before = t.store.clone();
        let batch: Vec<&CorpusSample> = samples.iter().take(3).collect();
        for _ in 0..3 {
            t.train_step(&batch).unwrap();
        }
        assert_eq!(before, t.store);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (cfg, samples) = tiny();
        let mut t = CodecTrainer::new(&cfg);
        t.run(&samples, 2, &mut |_| {}).unwrap();
        let ck = t.finish(&samples).unwrap();
        let a = ck.to_archive().unwrap();
        let back = CodecCheckpoint::from_archive(&a).unwrap();
        assert_eq!(back.store, ck.store);
        assert_eq!(back.stats, ck.stats);
        assert!(back.to_archive().unwrap().bitwise_eq(&a));
    }

    #[test]
    fn batches_are_distinct_and_deterministic() {
        let (mut cfg, samples) = tiny();
        cfg.train.codec_batch = 4;
        let t = CodecTrainer::new(&cfg);
        let b = t.sample_batch(&samples);
        assert_eq!(b.len(), 4);
        let mut d = b.clone();
        d.sort();
        d.dedup();
        assert_eq!(d.len(), 4);
        assert_eq!(b, t.sample_batch(&samples));
    }
}
