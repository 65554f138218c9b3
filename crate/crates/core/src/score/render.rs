//! Harmonic-comb mel oracle.

use cantus_grad::Tensor;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::{MusicScore, SingerProfile, Technique, DOWNSAMPLE, FRAME_RATE, MEL_FMAX, N_MEL};
use crate::error::{Error, Result};
use crate::rng::{self, stream, Rng};

const AMPLITUDE: f64 = 10.0;
const BREATH_FLOOR: f64 = 0.05;
/// Relative spread of the breath noise around its level.
const NOISE_SPREAD: f64 = 0.3;
const F0_MIN: f64 = 60.0;
const F0_MAX: f64 = 1500.0;

pub fn midi_to_hz(midi: f64) -> f64 {
    440.0 * 2f64.powf((midi - 69.0) / 12.0)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

fn mel_spacing() -> f64 {
    hz_to_mel(MEL_FMAX) / (N_MEL + 1) as f64
}

/// Center frequency of triangular filter `bin`.
pub fn mel_bin_center_hz(bin: usize) -> f64 {
    mel_to_hz((bin + 1) as f64 * mel_spacing())
}

/// Adds a spectral line at `hz` through the triangular filterbank.
fn add_line(row: &mut [f64], hz: f64, weight: f64, spacing: f64) {
    let pos = hz_to_mel(hz) / spacing - 1.0;
    if pos <= -1.0 || pos >= N_MEL as f64 {
        return;
    }
    let lo = pos.floor();
    let frac = pos - lo;
    let lo = lo as isize;
    if lo >= 0 {
        row[lo as usize] += weight * (1.0 - frac);
    }
    if lo + 1 < N_MEL as isize {
        row[(lo + 1) as usize] += weight * frac;
    }
}

/// Log-compressed mel matrix, stored frame-major (`T × 80`).
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    frames: usize,
    values: Vec<f64>,
}

impl MelSpectrogram {
    pub fn new(frames: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != frames * N_MEL {
            return Err(Error::Validation(format!(
                "mel has {} values, expected {frames}×{N_MEL}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Validation(format!("mel value {} at {i} is not a finite non-negative", values[i])));
        }
        Ok(Self { frames, values })
    }

    /// From a `T × 80` tensor; negative entries are clamped to zero.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.cols() != N_MEL {
            return Err(Error::contract(format!("mel tensor has {} columns", t.cols())));
        }
        Self::new(t.rows(), t.data().iter().map(|v| v.max(0.0)).collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.frames, N_MEL, self.values.clone())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * N_MEL..(t + 1) * N_MEL]
    }

    /// Per-bin mean of the linear (decompressed) energy.
    pub fn mean_energy(&self) -> Vec<f64> {
        let mut out = vec![0.0; N_MEL];
        for t in 0..self.frames {
            for (o, v) in out.iter_mut().zip(self.frame(t)) {
                *o += v.exp_m1();
            }
        }
        let n = self.frames.max(1) as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }

    pub fn variance(&self) -> f64 {
        let n = self.values.len() as f64;
        let mean = self.values.iter().sum::<f64>() / n;
        self.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct F0Track {
    f0_hz: Vec<f64>,
    voiced: Vec<bool>,
}

impl F0Track {
    pub fn new(f0_hz: Vec<f64>, voiced: Vec<bool>) -> Result<Self> {
        if f0_hz.len() != voiced.len() {
            return Err(Error::Validation("f0 and voicing lengths differ".into()));
        }
        for (i, (f, v)) in f0_hz.iter().zip(&voiced).enumerate() {
            let ok = if *v { (F0_MIN..=F0_MAX).contains(f) } else { *f == 0.0 };
            if !ok {
                return Err(Error::Validation(format!("frame {i}: f0 {f} with voiced={v}")));
            }
        }
        Ok(Self { f0_hz, voiced })
    }

    /// Voicing inferred from `f0 > 0`; voiced values clamped into the legal band.
    pub fn from_hz(f0_hz: Vec<f64>) -> Self {
        let voiced: Vec<bool> = f0_hz.iter().map(|f| *f > 0.0).collect();
        let f0_hz = f0_hz
            .iter()
            .map(|f| if *f > 0.0 { f.clamp(F0_MIN, F0_MAX) } else { 0.0 })
            .collect();
        Self { f0_hz, voiced }
    }

    pub fn len(&self) -> usize {
        self.f0_hz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0_hz.is_empty()
    }

    pub fn f0_hz(&self) -> &[f64] {
        &self.f0_hz
    }

    pub fn voiced(&self) -> &[bool] {
        &self.voiced
    }

    /// Downsamples by `factor`: a block is voiced when at least half its
    /// frames are, with f0 the mean over its voiced frames.
    pub fn pool(&self, factor: usize) -> F0Track {
        let n = self.len().div_ceil(factor);
        let mut f0 = Vec::with_capacity(n);
        for b in 0..n {
            let range = b * factor..((b + 1) * factor).min(self.len());
            let width = range.len();
            let (mut sum, mut count) = (0.0, 0usize);
            for i in range {
                if self.voiced[i] {
                    sum += self.f0_hz[i];
                    count += 1;
                }
            }
            f0.push(if count > 0 && 2 * count >= width { sum / count as f64 } else { 0.0 });
        }
        F0Track::from_hz(f0)
    }
}

#[derive(Clone, Copy, Debug)]
struct FrameSpec {
    f0: f64,
    /// Multiplier on harmonics k ≥ 3.
    upper: f64,
    pharyngeal: bool,
    breath: f64,
}

fn f32_round(x: f64) -> f64 {
    x as f32 as f64
}

fn render_frames(specs: &[FrameSpec], singer: &SingerProfile, rng: &mut Rng) -> (MelSpectrogram, F0Track) {
    let spacing = mel_spacing();
    let mut values = Vec::with_capacity(specs.len() * N_MEL);
    let mut f0 = Vec::with_capacity(specs.len());
    let mut row = [0.0; N_MEL];
    for spec in specs {
        row.fill(0.0);
        let hz = if spec.f0 > 0.0 { f32_round(spec.f0.clamp(F0_MIN, F0_MAX)) } else { 0.0 };
        if hz > 0.0 {
            let mut k = 1usize;
            while (k as f64) * hz < MEL_FMAX {
                let fk = k as f64 * hz;
                let mut w = 1.0 / k as f64;
                if k >= 3 {
                    w *= spec.upper;
                }
                if spec.pharyngeal && (2000.0..=4000.0).contains(&fk) {
                    w *= 2.0;
                }
                add_line(&mut row, fk, w, spacing);
                k += 1;
            }
        }
        for (b, r) in row.iter_mut().enumerate() {
            let noise = spec.breath * (1.0 + NOISE_SPREAD * (rng.random::<f64>() - 0.5));
            let energy = singer.timbre_gain[b] * AMPLITUDE * (*r + noise);
            values.push(f32_round(energy.ln_1p()));
        }
        f0.push(hz);
    }
    let frames = specs.len();
    (
        MelSpectrogram { frames, values },
        F0Track::from_hz(f0),
    )
}

fn technique_spec(t: Technique, singer: &SingerProfile) -> (f64, bool, f64) {
    let base_breath = BREATH_FLOOR + singer.breathiness * 0.5;
    match t {
        Technique::Falsetto => (10f64.powf(-0.6), false, base_breath),
        Technique::MixedVoice => (10f64.powf(-0.3), false, base_breath),
        Technique::Pharyngeal => (1.0, true, base_breath),
        Technique::Breathy => (1.0, false, base_breath + 0.3),
        _ => (1.0, false, base_breath),
    }
}

/// Mel at `FRAME_RATE` plus frame-level F0. Every latent frame of the score
/// spans `DOWNSAMPLE` mel frames.
pub fn render_singing(score: &MusicScore, singer: &SingerProfile, seed: u64) -> (MelSpectrogram, F0Track) {
    let mut rng = rng::rng(seed, stream::RENDER_SINGING);
    let mut specs = Vec::with_capacity(score.total_frames() * DOWNSAMPLE);
    let mut prev_hz: Option<f64> = None;
    for (unit, tech) in score.units().iter().zip(&score.labels().techniques) {
        let n = unit.duration_frames as usize * DOWNSAMPLE;
        let (upper, pharyngeal, breath) = technique_spec(*tech, singer);
        let Some(note_hz) = unit.note.hz() else {
            let rest_breath = BREATH_FLOOR + singer.breathiness * 0.5;
            specs.extend((0..n).map(|_| FrameSpec { f0: 0.0, upper: 1.0, pharyngeal: false, breath: rest_breath }));
            continue;
        };
        for i in 0..n {
            let tau = i as f64 / FRAME_RATE;
            let f0 = match tech {
                Technique::Vibrato => {
                    let phase = std::f64::consts::TAU * singer.vibrato_rate_hz * tau;
                    note_hz * 2f64.powf(singer.vibrato_depth_semitones * phase.sin() / 12.0)
                }
                Technique::Glissando => match prev_hz {
                    Some(p) if i < n / 2 => {
                        let a = i as f64 / (n / 2) as f64;
                        p * (note_hz / p).powf(a)
                    }
                    _ => note_hz,
                },
                _ => note_hz,
            };
            specs.push(FrameSpec { f0, upper, pharyngeal, breath });
        }
        prev_hz = Some(note_hz);
    }
    render_frames(&specs, singer, &mut rng)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpeechStyle {
    /// Standard deviation of the multiplicative per-frame F0 jitter.
    pub jitter: f64,
}

impl Default for SpeechStyle {
    fn default() -> Self {
        Self { jitter: 0.02 }
    }
}

/// Speech durations in latent frames.
pub fn speech_durations(score: &MusicScore) -> Vec<usize> {
    score.durations().iter().map(|d| (d / 2).max(1)).collect()
}

pub fn render_speech(score: &MusicScore, singer: &SingerProfile, seed: u64) -> (MelSpectrogram, F0Track) {
    render_speech_with(score, singer, seed, SpeechStyle::default())
}

/// Same lyrics and timbre as the sung score, halved durations and a falling
/// declination contour in place of the melody.
pub fn render_speech_with(
    score: &MusicScore,
    singer: &SingerProfile,
    seed: u64,
    style: SpeechStyle,
) -> (MelSpectrogram, F0Track) {
    let mut rng = rng::rng(seed, stream::RENDER_SPEECH);
    let mut notes: Vec<f64> = score.units().iter().filter_map(|u| u.note.hz()).collect();
    notes.sort_by(f64::total_cmp);
    let median = match notes.len() {
        0 => 0.0,
        n if n % 2 == 1 => notes[n / 2],
        n => 0.5 * (notes[n / 2 - 1] + notes[n / 2]),
    };
    let durations = speech_durations(score);
    let total: usize = durations.iter().sum::<usize>() * DOWNSAMPLE;
    let denom = (total.max(2) - 1) as f64;
    let breath = BREATH_FLOOR + singer.breathiness * 0.5;
    let mut specs = Vec::with_capacity(total);
    for (unit, d) in score.units().iter().zip(&durations) {
        for _ in 0..d * DOWNSAMPLE {
            let i = specs.len() as f64;
            let f0 = if unit.note.is_rest() {
                0.0
            } else {
                let line = median * (1.3 - 0.5 * i / denom);
                let z: f64 = StandardNormal.sample(&mut rng);
                line * (1.0 + style.jitter * z.clamp(-3.0, 3.0))
            };
            specs.push(FrameSpec { f0, upper: 1.0, pharyngeal: false, breath });
        }
    }
    render_frames(&specs, singer, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::{
        cosine, Emotion, Gender, Language, Method, Note, Phoneme, ScoreUnit, StyleLabels, VocalRange,
    };

    fn score(pitches: &[(i64, bool, u32)], tech: Technique) -> MusicScore {
        let units: Vec<ScoreUnit> = pitches
            .iter()
            .enumerate()
            .map(|(i, (p, rest, d))| ScoreUnit {
                phoneme: Phoneme::of(Language::B, i % 8),
                note: Note::new(*p, *rest).unwrap(),
                duration_frames: *d,
            })
            .collect();
        let labels = StyleLabels {
            gender: Gender::Female,
            vocal_range: VocalRange::Alto,
            method: Method::Pop,
            emotion: Emotion::Happy,
            techniques: pitches.iter().map(|(_, r, _)| if *r { Technique::None } else { tech }).collect(),
        };
        MusicScore::new(units, labels, Language::B).unwrap()
    }

    fn singer(id: u32) -> SingerProfile {
        SingerProfile::new(id, Gender::Female, VocalRange::Alto)
    }

    #[test]
    fn a4_is_exactly_440() {
        let (mel, f0) = render_singing(&score(&[(69, false, 4)], Technique::None), &singer(1), 0);
        assert_eq!(mel.frames(), 32);
        assert_eq!(f0.len(), 32);
        assert!(f0.voiced().iter().all(|v| *v));
        assert!(f0.f0_hz().iter().all(|f| *f == 440.0));
    }

    #[test]
    fn vibrato_stays_within_depth_and_swings_both_ways() {
        let mut s = singer(1);
        s.vibrato_depth_semitones = 0.5;
        let (_, f0) = render_singing(&score(&[(69, false, 10)], Technique::Vibrato), &s, 0);
        let (lo, hi) = (440.0 * 2f64.powf(-0.5 / 12.0), 440.0 * 2f64.powf(0.5 / 12.0));
        // stored values are rounded to binary32
        let slack = 1e-6;
        assert!(f0.f0_hz().iter().all(|f| *f >= lo * (1.0 - slack) && *f <= hi * (1.0 + slack)));
        assert!(f0.f0_hz().iter().any(|f| *f > 440.0));
        assert!(f0.f0_hz().iter().any(|f| *f < 440.0));
    }

    #[test]
    fn rests_are_unvoiced() {
        let (_, f0) = render_singing(&score(&[(60, false, 2), (60, true, 3)], Technique::None), &singer(2), 5);
        assert!(f0.voiced()[..16].iter().all(|v| *v));
        assert!(f0.voiced()[16..].iter().all(|v| !*v));
        assert!(F0Track::new(f0.f0_hz().to_vec(), f0.voiced().to_vec()).is_ok());
    }

    #[test]
    fn rendering_is_deterministic_per_seed() {
        let sc = score(&[(62, false, 3), (65, false, 2)], Technique::Breathy);
        let a = render_singing(&sc, &singer(4), 9);
        assert_eq!(a, render_singing(&sc, &singer(4), 9));
        assert_ne!(a.0, render_singing(&sc, &singer(4), 10).0);
        let b = render_speech(&sc, &singer(4), 9);
        assert_eq!(b, render_speech(&sc, &singer(4), 9));
    }

    #[test]
    fn mean_energy_ratio_tracks_gain_ratio() {
        let sc = score(&[(57, false, 5), (60, false, 5), (64, false, 5), (67, false, 5)], Technique::None);
        let (a, b) = (singer(3), singer(8));
        let (ma, _) = render_singing(&sc, &a, 1);
        let (mb, _) = render_singing(&sc, &b, 1);
        assert_ne!(ma, mb);
        let ratio: Vec<f64> = ma.mean_energy().iter().zip(mb.mean_energy()).map(|(x, y)| x / y).collect();
        let gain: Vec<f64> = a.timbre_gain.iter().zip(&b.timbre_gain).map(|(x, y)| x / y).collect();
        let r = pearson(&ratio, &gain);
        assert!(r > 0.9, "r = {r}");
    }

    fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn speech_halves_durations() {
        let sc = score(&[(60, false, 1), (62, false, 2), (64, false, 5), (65, true, 4)], Technique::Vibrato);
        let (mel, f0) = render_speech(&sc, &singer(0), 3);
        let expect: usize = [1usize, 2, 5, 4].iter().map(|d| (d / 2).max(1)).sum();
        assert_eq!(mel.frames(), expect * DOWNSAMPLE);
        assert_eq!(f0.len(), expect * DOWNSAMPLE);
    }

    #[test]
    fn speech_declines_without_jitter() {
        let sc = score(&[(60, false, 6), (60, false, 6)], Technique::None);
        let (_, f0) = render_speech_with(&sc, &singer(0), 3, SpeechStyle { jitter: 0.0 });
        let voiced: Vec<f64> = f0.f0_hz().iter().copied().filter(|f| *f > 0.0).collect();
        assert!(voiced.windows(2).all(|w| w[1] < w[0]));
        let median = midi_to_hz(60.0);
        assert!((voiced[0] / median - 1.3).abs() < 1e-6);
        assert!((voiced[voiced.len() - 1] / median - 0.8).abs() < 1e-6);
    }

    #[test]
    fn falsetto_attenuates_upper_harmonics() {
        let s = singer(6);
        let plain = render_singing(&score(&[(57, false, 2)], Technique::None), &s, 0).0;
        let fals = render_singing(&score(&[(57, false, 2)], Technique::Falsetto), &s, 0).0;
        // bins around the 4th harmonic lose energy, the fundamental's bins do not
        let spacing = mel_spacing();
        let bin_of = |hz: f64| (hz_to_mel(hz) / spacing - 1.0).round() as usize;
        let f = midi_to_hz(57.0);
        let (e_plain, e_fals) = (plain.mean_energy(), fals.mean_energy());
        // same seed, same noise: only the comb differs
        assert!(e_fals[bin_of(4.0 * f)] < 0.9 * e_plain[bin_of(4.0 * f)]);
        assert!((e_fals[bin_of(f)] / e_plain[bin_of(f)] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn singing_and_speech_share_timbre() {
        for id in 0..20 {
            let s = singer(id);
            let sc = score(&[(55, false, 4), (59, false, 3), (62, false, 5), (60, false, 4)], Technique::None);
            let (sing, _) = render_singing(&sc, &s, id as u64);
            let (speech, _) = render_speech(&sc, &s, id as u64);
            let c = cosine(&sing.mean_energy(), &speech.mean_energy());
            assert!(c > 0.8, "singer {id}: cosine {c}");
        }
    }

    #[test]
    fn pooling_rules() {
        let t = F0Track::from_hz(vec![100.0, 200.0, 0.0, 0.0, 0.0, 0.0, 0.0, 300.0, 300.0]);
        let p = t.pool(4);
        assert_eq!(p.f0_hz(), &[150.0, 0.0, 300.0]);
        let q = t.pool(3);
        assert_eq!(q.f0_hz(), &[150.0, 0.0, 300.0]);
        assert_eq!(t.pool(8).f0_hz(), &[0.0, 300.0]);
    }

    #[test]
    fn bad_tracks_rejected() {
        assert!(F0Track::new(vec![50.0], vec![true]).is_err());
        assert!(F0Track::new(vec![100.0], vec![false]).is_err());
        assert!(MelSpectrogram::new(1, vec![0.0; 79]).is_err());
        assert!(MelSpectrogram::new(1, vec![f64::NAN; 80]).is_err());
    }
}
