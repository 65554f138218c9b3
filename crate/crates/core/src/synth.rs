//! Inference: score and prompt to mel spectrogram and F0.

use std::fmt;
use std::str::FromStr;

use cantus_grad::Tensor;
use rand_distr::{Distribution, StandardNormal};

use crate::bbc::{encode_content, expand_frames};
use crate::codec::{decode_audio, encode_audio, encode_text, AudioKind, LatentMel};
use crate::error::{Error, Result};
use crate::flowformer::{euler_sample_cfg, head_to_track, FrameCues};
use crate::rng::{self, stream};
use crate::score::disk::audio_to_archive;
use crate::score::{F0Track, LabelToken, Language, MelSpectrogram, MusicScore, DOWNSAMPLE};
use crate::train::{ArchiveTensor, SvsCheckpoint, TensorArchive};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    /// Sing the score in the voice of a singing prompt.
    Transfer,
    /// Like `Transfer`, with a prompt in another language than the score.
    CrossLingual,
    /// Style given by label tokens.
    Control,
    /// Sing the score in the voice of a speech prompt.
    Sts,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::Transfer, TaskKind::CrossLingual, TaskKind::Control, TaskKind::Sts];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Transfer => "transfer",
            TaskKind::CrossLingual => "cross_lingual",
            TaskKind::Control => "control",
            TaskKind::Sts => "sts",
        }
    }

    /// Encoder used for an audio prompt of this task.
    pub fn audio_kind(self) -> AudioKind {
        match self {
            TaskKind::Sts => AudioKind::Speech,
            _ => AudioKind::Singing,
        }
    }

    /// Checks the prompt against the task.
    pub fn validate(self, prompt: &Prompt, target: Language) -> Result<()> {
        let bad = |msg: String| Err(Error::Validation(msg));
        match (self, prompt) {
            (TaskKind::Control, Prompt::Text(_)) => Ok(()),
            (TaskKind::Control, Prompt::Audio { .. }) => bad("task `control` needs a textual prompt".into()),
            (TaskKind::Transfer | TaskKind::Sts, Prompt::Audio { .. }) => Ok(()),
            (TaskKind::Transfer | TaskKind::Sts | TaskKind::CrossLingual, Prompt::Text(_)) => {
                bad(format!("task `{self}` needs an audio prompt"))
            }
            (TaskKind::CrossLingual, Prompt::Audio { language: None, .. }) => {
                bad("task `cross_lingual` needs the prompt language".into())
            }
            (TaskKind::CrossLingual, Prompt::Audio { language: Some(l), .. }) if *l == target => bad(format!(
                "task `cross_lingual` needs a prompt language other than the score language {target}"
            )),
            (TaskKind::CrossLingual, Prompt::Audio { .. }) => Ok(()),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown task `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Prompt {
    Audio {
        mel: MelSpectrogram,
        language: Option<Language>,
    },
    Text(Vec<LabelToken>),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthOptions {
    pub steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synthesis {
    pub mel: MelSpectrogram,
    /// F0 head output at the latent frame rate.
    pub f0: F0Track,
    /// Sampled latent after denormalization, `T × C`.
    pub latent: Tensor,
}

impl Synthesis {
    /// F0 repeated to the mel frame rate.
    pub fn f0_mel_rate(&self) -> F0Track {
        let hz = self
            .f0
            .f0_hz()
            .iter()
            .zip(self.f0.voiced())
            .flat_map(|(f, v)| std::iter::repeat_n(if *v { *f } else { 0.0 }, DOWNSAMPLE))
            .collect();
        F0Track::from_hz(hz)
    }

    /// Binary32 archive with `mel` and the sampled `latent`.
    pub fn mel_archive(&self) -> Result<TensorArchive> {
        let mut a = audio_to_archive(&self.mel, None, true)?;
        a.insert("latent", ArchiveTensor::from_tensor_f32(&self.latent))?;
        Ok(a)
    }

    /// Binary32 archive with `f0_hz` and `voiced` at the latent rate.
    pub fn f0_archive(&self) -> Result<TensorArchive> {
        let n = self.f0.len();
        let mut a = TensorArchive::new();
        a.insert("f0_hz", ArchiveTensor::from_tensor_f32(&Tensor::from_vec(1, n, self.f0.f0_hz().to_vec())))?;
        let v = self.f0.voiced().iter().map(|v| if *v { 1.0 } else { 0.0 }).collect();
        a.insert("voiced", ArchiveTensor::from_tensor_f32(&Tensor::from_vec(1, n, v)))?;
        Ok(a)
    }
}

/// Prompt rows for the field estimator.
pub fn encode_prompt(ck: &SvsCheckpoint, task: TaskKind, prompt: &Prompt, score: &MusicScore) -> Result<Tensor> {
    let (c, store) = (&ck.codec.codec, &ck.codec.store);
    Ok(match prompt {
        Prompt::Audio { mel, .. } => encode_audio(mel, task.audio_kind(), c, store)?.1.vectors,
        Prompt::Text(tokens) => encode_text(tokens, score, c, store)?.vectors,
    })
}

/// Content without masking, durations from the score, then guided Euler
/// sampling from seeded noise and codec decoding. The F0 head is read from
/// one more field evaluation at `t = 1`.
pub fn synthesize(
    ck: &SvsCheckpoint,
    task: TaskKind,
    score: &MusicScore,
    prompt: &Prompt,
    opts: &SynthOptions,
) -> Result<Synthesis> {
    task.validate(prompt, score.language())?;
    if opts.steps == 0 {
        return Err(Error::Validation("synthesis needs at least one step".into()));
    }
    let p = encode_prompt(ck, task, prompt, score)?;
    synthesize_with_prompt(ck, score, Some(&p), opts)
}

/// [`synthesize`] over already encoded prompt rows; `None` samples
/// unconditionally.
pub fn synthesize_with_prompt(
    ck: &SvsCheckpoint,
    score: &MusicScore,
    prompt: Option<&Tensor>,
    opts: &SynthOptions,
) -> Result<Synthesis> {
    let (model, store, cfg) = (&ck.model, &ck.store, &ck.cfg);
    let emb = encode_content(score, &model.bbc, store)?;
    let z_c = expand_frames(&emb, &score.durations())?.frames;
    let lang = score.language().index();
    let cues = FrameCues::from_score(score);
    let (rows, cols) = (z_c.rows(), cfg.codec.latent_channels);
    let mut r = rng::rng(opts.seed, stream::SYNTH);
    let x0 = Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(&mut r)).collect());
    let field = |x: &Tensor, t: f64, conditional: bool| {
        let p = if conditional { prompt } else { None };
        Ok(model.flow.estimate_field(store, x, t, &z_c, Some(&cues), p, lang, &cfg.moe)?.0)
    };
    let x1 = euler_sample_cfg(field, &x0, opts.steps, opts.cfg_scale)?;
    let (_, head) = model.flow.estimate_field(store, &x1, 1.0, &z_c, Some(&cues), prompt, lang, &cfg.moe)?;
    let latent = ck.codec.stats.denormalize(&x1);
    let mel = decode_audio(
        &LatentMel {
            values: latent.clone(),
        },
        &ck.codec.codec,
        &ck.codec.store,
    )?;
    Ok(Synthesis {
        mel,
        f0: head_to_track(&head),
        latent,
    })
}
