//! Optimization loops for the codec and SVS stages, loss reports, gradient
//! checking and checkpoints.

pub mod archive;
pub mod codec_stage;
pub mod gradcheck;
pub mod svs_stage;

use std::fmt;

use cantus_grad::{AdamConfig, ParamGrads};

pub use archive::{load_archive, save_archive, ArchiveError, ArchiveTensor, TensorArchive};
pub use codec_stage::{CodecCheckpoint, CodecTrainer};
pub use gradcheck::gradcheck;
pub use svs_stage::{SvsCheckpoint, SvsTrainer};

use crate::config::Config;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Codec,
    Svs,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Codec => "codec",
            Stage::Svs => "svs",
        })
    }
}

/// Named loss terms of one step. `total` is the weighted sum of `terms`;
/// `extra` holds quantities reported but not optimized jointly with them.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub stage: Stage,
    pub step: usize,
    pub terms: Vec<(&'static str, f64)>,
    pub total: f64,
    pub extra: Vec<(&'static str, f64)>,
}

impl LossReport {
    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms
            .iter()
            .chain(&self.extra)
            .find(|(n, _)| *n == name)
            .map(|(_, v)| *v)
    }

    fn check_finite(&self) -> Result<()> {
        for (name, v) in self.terms.iter().chain(&self.extra) {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: self.step,
                    term: name.to_string(),
                });
            }
        }
        if !self.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                term: "total".into(),
            });
        }
        Ok(())
    }
}

/// `stage=svs step=10 dur=... total=...`
impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage={} step={}", self.stage, self.step)?;
        for (n, v) in &self.terms {
            write!(f, " {n}={v:.6e}")?;
        }
        write!(f, " total={:.6e}", self.total)?;
        for (n, v) in &self.extra {
            write!(f, " {n}={v:.6e}")?;
        }
        Ok(())
    }
}

/// Linear warmup to `lr` over `warmup` steps, then cosine decay towards 0
/// at step `total`.
pub fn scheduled_lr(lr: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return lr * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return lr;
    }
    let p = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    0.5 * lr * (1.0 + (std::f64::consts::PI * p).cos())
}

/// Rescales `grads` so the global norm is at most `max_norm` (no-op when
/// `max_norm ≤ 0`). Returns the norm before clipping.
pub fn clip_grads(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

pub(crate) fn adam_config(cfg: &Config) -> AdamConfig {
    AdamConfig {
        beta1: cfg.train.beta1,
        beta2: cfg.train.beta2,
        ..AdamConfig::default()
    }
}

/// Stores the config text inside an archive, one byte per binary32 value.
pub(crate) fn put_config(archive: &mut TensorArchive, cfg: &Config) -> Result<()> {
    let bytes: Vec<f32> = cfg.to_toml().bytes().map(|b| b as f32).collect();
    archive.insert("meta.config", ArchiveTensor::f32(vec![bytes.len() as u32], bytes))?;
    Ok(())
}

pub(crate) fn get_config(archive: &TensorArchive) -> Result<Config> {
    let t = archive.get("meta.config")?;
    let bytes: Vec<u8> = t.values().iter().map(|v| *v as u8).collect();
    let text = String::from_utf8(bytes).map_err(|_| Error::Validation("checkpoint config is not UTF-8".into()))?;
    Ok(Config::from_str_with_keys(&text)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        for s in 0..10 {
            assert_eq!(scheduled_lr(1e-3, s, 10, 110), 1e-3 * s as f64 / 10.0);
        }
        assert_eq!(scheduled_lr(1e-3, 10, 10, 110), 1e-3);
        assert!((scheduled_lr(1e-3, 60, 10, 110) - 5e-4).abs() < 1e-15);
        assert!(scheduled_lr(1e-3, 110, 10, 110).abs() < 1e-15);
        assert!(scheduled_lr(1e-3, 500, 10, 110).abs() < 1e-15);
        assert_eq!(scheduled_lr(1e-3, 0, 0, 0), 1e-3);
    }

    #[test]
    fn report_line_is_key_value() {
        let r = LossReport {
            stage: Stage::Svs,
            step: 3,
            terms: vec![("dur", 0.5), ("flow", 2.0)],
            total: 2.5,
            extra: vec![("tau", 1.5)],
        };
        let line = r.to_string();
        assert!(line.starts_with("stage=svs step=3 dur=5.000000e-1 flow=2.000000e0 total=2.500000e0"));
        for kv in line.split(' ') {
            assert_eq!(kv.split('=').count(), 2);
        }
        assert_eq!(r.term("tau"), Some(1.5));
    }

    #[test]
    fn config_survives_archive() {
        let mut cfg = Config::default();
        cfg.flow.cfg_scale = 2.5;
        cfg.corpus.language_mix = vec![0.1, 0.2, 0.3, 0.4];
        let mut a = TensorArchive::new();
        put_config(&mut a, &cfg).unwrap();
        assert_eq!(get_config(&a).unwrap(), cfg);
    }
}
