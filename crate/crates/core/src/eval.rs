use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::codec::{decode_tensor, encode_audio, AudioKind};
use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::synth::{synthesize, Prompt, SynthOptions, TaskKind};
use crate::train::{CodecCheckpoint, SvsCheckpoint};
use crate::score::{Corpus, CorpusSample, LabelToken, Technique, DOWNSAMPLE, hz_to_mel, mel_bin_center_hz, render_singing, F0Track, MelSpectrogram, MusicScore, SingerProfile, N_MEL};

/// Relative deviation above which a voiced frame counts as a pitch error.
pub const FFE_THRESHOLD: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FfeResult {
    pub total_frames: usize,
    pub voicing_errors: usize,
    pub pitch_errors: usize,
    pub ffe: f64,
}

/// F0 frame error: voicing disagreements plus voiced frames off by more
/// than 20%.
pub fn ffe(pred: &F0Track, gt: &F0Track) -> Result<FfeResult> {
    if pred.len() != gt.len() {
        return Err(Error::contract(format!(
            "ffe over tracks of {} and {} frames",
            pred.len(),
            gt.len()
        )));
    }
    let (mut voicing, mut pitch) = (0, 0);
    for i in 0..gt.len() {
        let (vp, vg) = (pred.voiced()[i], gt.voiced()[i]);
        if vp != vg {
            voicing += 1;
        } else if vg {
            let (p, g) = (pred.f0_hz()[i], gt.f0_hz()[i]);
            if (p - g).abs() > FFE_THRESHOLD * g {
                pitch += 1;
            }
        }
    }
    let total = gt.len();
    Ok(FfeResult {
        total_frames: total,
        voicing_errors: voicing,
        pitch_errors: pitch,
        ffe: if total == 0 { 0.0 } else { (voicing + pitch) as f64 / total as f64 },
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityResult {
    pub cos: f64,
}

pub fn cos_sim(a: &[f64], b: &[f64]) -> Result<SimilarityResult> {
    if a.len() != b.len() {
        return Err(Error::contract(format!("cos_sim over lengths {} and {}", a.len(), b.len())));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(SimilarityResult {
        cos: (dot / (na * nb)).clamp(-1.0, 1.0),
    })
}

/// One generation to judge: the mel, the score it sings and the singer
/// whose timbre it should carry.
#[derive(Clone, Copy, Debug)]
pub struct TimbreCase<'a> {
    pub generated: &'a MelSpectrogram,
    pub score: &'a MusicScore,
    pub prompt_singer: u32,
}

/// Mean-energy-per-bin vector of an oracle rendering of `score` by `singer`.
pub fn oracle_timbre(score: &MusicScore, singer: &SingerProfile, seed: u64) -> Vec<f64> {
    render_singing(score, singer, seed).0.mean_energy()
}

/// Fraction of cases whose mean energy per bin is strictly closer in cosine
/// to the prompt singer's oracle rendering of the same score than to a
/// randomly drawn other singer's. Cases naming an unknown singer, or a
/// corpus with a single singer, count as misses.
pub fn timbre_match_rate(cases: &[TimbreCase], singers: &[SingerProfile], seed: u64) -> f64 {
    if cases.is_empty() {
        return 0.0;
    }
    let mut r = rng::rng(seed, stream::EVAL);
    let mut hits = 0;
    for (k, c) in cases.iter().enumerate() {
        let Some(own) = singers.iter().find(|s| s.id == c.prompt_singer) else {
            continue;
        };
        let others: Vec<&SingerProfile> = singers.iter().filter(|s| s.id != c.prompt_singer).collect();
        if others.is_empty() {
            continue;
        }
        let other = others[r.random_range(0..others.len())];
        let render_seed = rng::derive_seed(seed, k as u64);
        let e = c.generated.mean_energy();
        let sim = |v: Vec<f64>| cos_sim(&e, &v).map_or(f64::NEG_INFINITY, |s| s.cos);
        if sim(oracle_timbre(c.score, own, render_seed)) > sim(oracle_timbre(c.score, other, render_seed)) {
            hits += 1;
        }
    }
    hits as f64 / cases.len() as f64
}

/// Metrics of one synthesis task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskMetrics {
    pub ffe: f64,
    pub cos: f64,
    pub timbre_match_rate: f64,
    pub pairs: usize,
}

/// Metric report keyed by task name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EvalReport {
    pub tasks: BTreeMap<String, TaskMetrics>,
}

impl EvalReport {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: "report".into(),
            message: e.to_string(),
        })
    }
}

const ROW_PX: usize = 3;
const COL_PX: usize = 2;
const CONTOUR: [u8; 3] = [255, 255, 255];

/// Dark-to-bright heat colour for `v ∈ [0, 1]`.
fn heat(v: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 4] = [[0.0, 0.0, 0.0], [90.0, 20.0, 120.0], [220.0, 70.0, 40.0], [250.0, 220.0, 90.0]];
    let x = v.clamp(0.0, 1.0) * (STOPS.len() - 1) as f64;
    let i = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (STOPS[i][c] + f * (STOPS[i + 1][c] - STOPS[i][c])).round() as u8;
    }
    out
}

/// Fractional mel-bin position of a frequency, clamped to the bin range.
fn hz_to_bin(hz: f64) -> f64 {
    let m = hz_to_mel(hz);
    let lo = hz_to_mel(mel_bin_center_hz(0));
    let hi = hz_to_mel(mel_bin_center_hz(N_MEL - 1));
    ((m - lo) / (hi - lo) * (N_MEL - 1) as f64).clamp(0.0, (N_MEL - 1) as f64)
}

/// RGB pixels of the mel heatmap with the F0 contour drawn over it. The F0
/// track may run at any frame rate; it is stretched across the width.
pub fn render_mel_f0(mel: &MelSpectrogram, f0: &F0Track) -> (u32, u32, Vec<u8>) {
    let (w, h) = ((mel.frames() * COL_PX).max(1), N_MEL * ROW_PX);
    let vals = mel.values();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut px = vec![0u8; w * h * 3];
    for x in 0..mel.frames() * COL_PX {
        let frame = mel.frame(x / COL_PX);
        for y in 0..h {
            let bin = N_MEL - 1 - y / ROW_PX;
            let v = if span > 0.0 { (frame[bin] - lo) / span } else { 0.0 };
            px[(y * w + x) * 3..][..3].copy_from_slice(&heat(v));
        }
    }
    if !f0.is_empty() && mel.frames() > 0 {
        for x in 0..w {
            let i = x * f0.len() / w;
            if !f0.voiced()[i] {
                continue;
            }
            let yc = (h as f64 - 1.0) - hz_to_bin(f0.f0_hz()[i]) * ROW_PX as f64 - (ROW_PX / 2) as f64;
            let yc = yc.round().clamp(0.0, h as f64 - 1.0) as usize;
            for y in yc.saturating_sub(1)..=(yc + 1).min(h - 1) {
                px[(y * w + x) * 3..][..3].copy_from_slice(&CONTOUR);
            }
        }
    }
    (w as u32, h as u32, px)
}

/// Writes the mel/F0 figure as an RGB PNG.
pub fn plot_mel_f0(mel: &MelSpectrogram, f0: &F0Track, out_path: &Path) -> Result<()> {
    let (w, h, px) = render_mel_f0(mel, f0);
    let file = File::create(out_path).map_err(|e| Error::io(out_path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w, h);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let image = |e: png::EncodingError| match e {
        png::EncodingError::IoError(io) => Error::io(out_path, io),
        other => Error::Image(other.to_string()),
    };
    let mut writer = enc.write_header().map_err(image)?;
    writer.write_image_data(&px).map_err(image)?;
    writer.finish().map_err(image)
}

/// Population standard deviation of voiced F0 inside each unit with at
/// least two voiced frames. `durations` are in track frames.
pub fn per_unit_f0_std(f0: &F0Track, durations: &[usize]) -> Vec<f64> {
    let mut out = Vec::new();
    let mut start = 0;
    for d in durations {
        let end = (start + d).min(f0.len());
        let v: Vec<f64> = (start..end).filter(|i| f0.voiced()[*i]).map(|i| f0.f0_hz()[i]).collect();
        if v.len() >= 2 {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            out.push((v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt());
        }
        start = end;
    }
    out
}

/// One evaluation case: sing corpus sample `target`'s score with the
/// prompt taken from sample `prompt`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalPair {
    pub target: usize,
    pub prompt: usize,
}

/// `n_pairs` cases cycling over the last `heldout` samples. Audio-prompt
/// tasks draw the prompt from a different singer (and, for cross-lingual,
/// a different language); control prompts with the target's own labels.
pub fn eval_pairs(corpus: &Corpus, task: TaskKind, heldout: usize, n_pairs: usize, seed: u64) -> Result<Vec<EvalPair>> {
    let n = corpus.samples.len();
    if heldout == 0 || heldout > n {
        return Err(Error::Validation(format!("{heldout} held-out samples from a corpus of {n}")));
    }
    let mut r = rng::rng(rng::derive_seed(seed, 1), stream::EVAL);
    let mut out = Vec::with_capacity(n_pairs);
    for k in 0..n_pairs {
        let target = n - heldout + k % heldout;
        let t = &corpus.samples[target];
        let prompt = if task == TaskKind::Control {
            target
        } else {
            let ok: Vec<usize> = (0..n)
                .filter(|i| {
                    let s = &corpus.samples[*i];
                    s.singer.id != t.singer.id
                        && (task != TaskKind::CrossLingual || s.score.language() != t.score.language())
                })
                .collect();
            if ok.is_empty() {
                return Err(Error::Validation(format!("no prompt source for task `{task}` and sample {target}")));
            }
            ok[r.random_range(0..ok.len())]
        };
        out.push(EvalPair { target, prompt });
    }
    Ok(out)
}

/// Prompt of `pair` for `task`.
pub fn pair_prompt(corpus: &Corpus, task: TaskKind, pair: EvalPair) -> Prompt {
    let s = &corpus.samples[pair.prompt];
    match task {
        TaskKind::Control => Prompt::Text(s.textual_prompt_tokens.clone()),
        TaskKind::Sts => Prompt::Audio {
            mel: s.speech_mel.clone(),
            language: Some(s.score.language()),
        },
        TaskKind::Transfer | TaskKind::CrossLingual => Prompt::Audio {
            mel: s.singing_mel.clone(),
            language: Some(s.score.language()),
        },
    }
}

/// Source of the generations being scored.
#[derive(Clone, Copy, Debug)]
pub enum Generator<'a> {
    Model(&'a SvsCheckpoint, SynthOptions),
    /// Oracle renderings of the target score by the prompt singer, with the
    /// reference seed; scores perfectly by construction.
    Oracle,
}

fn pooled_embedding(ck: &SvsCheckpoint, mel: &MelSpectrogram) -> Result<Vec<f64>> {
    Ok(encode_audio(mel, AudioKind::Singing, &ck.codec.codec, &ck.codec.store)?.1.pooled)
}

/// FFE, singer cosine similarity and timbre match rate of `task` over
/// `pairs`. References are oracle renderings of the target score by the
/// prompt singer; FFE compares the generated F0 at the latent rate.
pub fn evaluate_task(
    ck: &SvsCheckpoint,
    corpus: &Corpus,
    task: TaskKind,
    pairs: &[EvalPair],
    generator: Generator,
    seed: u64,
) -> Result<TaskMetrics> {
    if pairs.is_empty() {
        return Err(Error::Validation("evaluation needs at least one pair".into()));
    }
    let mut frames = 0;
    let mut errors = 0;
    let mut cos = 0.0;
    let mut mels = Vec::with_capacity(pairs.len());
    for (k, pair) in pairs.iter().enumerate() {
        let target = &corpus.samples[pair.target];
        let singer = &corpus.samples[pair.prompt].singer;
        let ref_seed = rng::derive_seed(seed, k as u64);
        let (ref_mel, ref_f0) = render_singing(&target.score, singer, ref_seed);
        let gt_f0 = ref_f0.pool(DOWNSAMPLE);
        let (mel, f0) = match generator {
            Generator::Oracle => (ref_mel.clone(), gt_f0.clone()),
            Generator::Model(model, opts) => {
                let opts = SynthOptions {
                    seed: rng::derive_seed(opts.seed, k as u64),
                    ..opts
                };
                let out = synthesize(model, task, &target.score, &pair_prompt(corpus, task, *pair), &opts)?;
                (out.mel, out.f0)
            }
        };
        let f = ffe(&f0, &gt_f0)?;
        frames += f.total_frames;
        errors += f.voicing_errors + f.pitch_errors;
        cos += cos_sim(&pooled_embedding(ck, &mel)?, &pooled_embedding(ck, &ref_mel)?)?.cos;
        mels.push(mel);
    }
    let cases: Vec<TimbreCase> = pairs
        .iter()
        .zip(&mels)
        .map(|(p, m)| TimbreCase {
            generated: m,
            score: &corpus.samples[p.target].score,
            prompt_singer: corpus.samples[p.prompt].singer.id,
        })
        .collect();
    Ok(TaskMetrics {
        ffe: errors as f64 / frames.max(1) as f64,
        cos: cos / pairs.len() as f64,
        timbre_match_rate: timbre_match_rate(&cases, &corpus.singers, seed),
        pairs: pairs.len(),
    })
}

/// Held-out codec quality: singing-to-speech top-1 retrieval over the
/// batch and reconstruction MSE relative to the pooled mel variance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CodecAlignment {
    pub retrieval_top1: f64,
    pub recon_ratio: f64,
}

pub fn codec_alignment(samples: &[CorpusSample], ck: &CodecCheckpoint) -> Result<CodecAlignment> {
    if samples.is_empty() {
        return Err(Error::Validation("codec alignment needs at least one sample".into()));
    }
    let (codec, store) = (&ck.codec, &ck.store);
    let count: usize = samples.iter().map(|s| s.singing_mel.values().len()).sum();
    let mean = samples.iter().flat_map(|s| s.singing_mel.values()).sum::<f64>() / count as f64;
    let (mut se, mut var) = (0.0, 0.0);
    let mut sing = Vec::with_capacity(samples.len());
    let mut speech = Vec::with_capacity(samples.len());
    for s in samples {
        let (latent, p) = encode_audio(&s.singing_mel, AudioKind::Singing, codec, store)?;
        let (_, q) = encode_audio(&s.speech_mel, AudioKind::Speech, codec, store)?;
        sing.push(p.normalized()?);
        speech.push(q.normalized()?);
        let v = s.singing_mel.values();
        se += decode_tensor(&latent, codec, store).data().iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        var += v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>();
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let hits = sing
        .iter()
        .enumerate()
        .filter(|(i, a)| {
            let best = (0..speech.len())
                .max_by(|x, y| dot(a, &speech[*x]).total_cmp(&dot(a, &speech[*y])))
                .expect("non-empty");
            best == *i
        })
        .count();
    Ok(CodecAlignment {
        retrieval_top1: hits as f64 / samples.len() as f64,
        recon_ratio: if var > 0.0 { se / var } else { f64::INFINITY },
    })
}

/// Mean per-unit F0 std of a vibrato-labeled synthesis against the same
/// scores without techniques, both under the control task with prompts
/// built from the score labels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VibratoContrast {
    pub vibrato_std: f64,
    pub plain_std: f64,
}

impl VibratoContrast {
    pub fn ratio(&self) -> f64 {
        self.vibrato_std / self.plain_std
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

pub fn vibrato_contrast(ck: &SvsCheckpoint, scores: &[MusicScore], opts: &SynthOptions) -> Result<VibratoContrast> {
    let mut stds = [Vec::new(), Vec::new()];
    for (k, score) in scores.iter().enumerate() {
        let opts = SynthOptions {
            seed: rng::derive_seed(opts.seed, k as u64),
            ..*opts
        };
        for (slot, t) in [Technique::Vibrato, Technique::None].into_iter().enumerate() {
            let sc = score.with_technique(t);
            let prompt = Prompt::Text(LabelToken::encode(sc.labels()));
            let out = synthesize(ck, TaskKind::Control, &sc, &prompt, &opts)?;
            stds[slot].extend(per_unit_f0_std(&out.f0, &sc.durations()));
        }
    }
    Ok(VibratoContrast {
        vibrato_std: mean(&stds[0]),
        plain_std: mean(&stds[1]),
    })
}
