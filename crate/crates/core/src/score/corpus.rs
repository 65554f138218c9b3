use rand::seq::SliceRandom;
use rand::Rng as _;

use super::render::{render_singing, render_speech_with, SpeechStyle};
use super::{
    Emotion, F0Track, Gender, LabelToken, Language, MelSpectrogram, Method, MusicScore, Note, Phoneme, ScoreUnit,
    SingerProfile, StyleLabels, Technique, VocalRange, PHONEMES_PER_LANGUAGE,
};
use crate::config::CorpusConfig;
use crate::error::{Error, Result};
use crate::rng::{self, stream};

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSample {
    pub index: usize,
    pub score: MusicScore,
    pub singer: SingerProfile,
    pub singing_mel: MelSpectrogram,
    pub singing_f0: F0Track,
    pub speech_mel: MelSpectrogram,
    pub speech_f0: F0Track,
    pub textual_prompt_tokens: Vec<LabelToken>,
    /// Sample whose lyrics and notes this one reuses; its own index otherwise.
    pub content_source: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub singers: Vec<SingerProfile>,
    pub samples: Vec<CorpusSample>,
}

impl Corpus {
    pub fn singer(&self, id: u32) -> Option<&SingerProfile> {
        self.singers.iter().find(|s| s.id == id)
    }
}

/// Singer `id`: even ids are female, odd male; ranges alternate high/low.
pub fn singer_for(id: u32) -> SingerProfile {
    let high = (id / 2) % 2 == 0;
    let (gender, range) = if id % 2 == 0 {
        (Gender::Female, if high { VocalRange::Soprano } else { VocalRange::Alto })
    } else {
        (Gender::Male, if high { VocalRange::Tenor } else { VocalRange::Bass })
    };
    SingerProfile::new(id, gender, range)
}

/// Largest-remainder apportionment of `n` items over `weights`.
pub fn language_quotas(weights: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let short = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

fn check(config: &CorpusConfig) -> Result<()> {
    let bad = |key: &str, message: String| {
        Err(Error::Config {
            key: format!("corpus.{key}"),
            message,
        })
    };
    if config.n_singers == 0 {
        return bad("n_singers", "need at least one singer".into());
    }
    if config.n_scores < 2 * config.n_singers {
        return bad(
            "n_scores",
            format!(
                "{} scores cannot give each of {} singers two samples",
                config.n_scores, config.n_singers
            ),
        );
    }
    if config.min_units == 0 || config.min_units > config.max_units {
        return bad("min_units", "need 1 <= min_units <= max_units".into());
    }
    if config.min_duration == 0 || config.min_duration > config.max_duration {
        return bad("min_duration", "need 1 <= min_duration <= max_duration".into());
    }
    for (key, p) in [
        ("rest_prob", config.rest_prob),
        ("technique_prob", config.technique_prob),
        ("shared_content_fraction", config.shared_content_fraction),
    ] {
        if !(0.0..=1.0).contains(&p) {
            return bad(key, "must lie in [0, 1]".into());
        }
    }
    if config.language_mix.len() != Language::ALL.len()
        || config.language_mix.iter().any(|w| !(*w >= 0.0))
        || config.language_mix.iter().sum::<f64>() <= 0.0
    {
        return bad("language_mix", "need 4 non-negative weights with positive sum".into());
    }
    if !(config.speech_jitter >= 0.0) {
        return bad("speech_jitter", "must be non-negative".into());
    }
    Ok(())
}

/// Deterministic synthetic corpus. Sample `k` is sung by singer
/// `k mod n_singers` and rendered with seed `hash(seed, k)`.
pub fn gen_corpus(config: &CorpusConfig, seed: u64) -> Result<Corpus> {
    check(config)?;
    let mut r = rng::rng(seed, stream::CORPUS);
    let singers: Vec<SingerProfile> = (0..config.n_singers as u32).map(singer_for).collect();

    let quotas = language_quotas(&config.language_mix, config.n_scores);
    let mut languages: Vec<Language> = quotas
        .iter()
        .enumerate()
        .flat_map(|(i, c)| std::iter::repeat_n(Language::ALL[i], *c))
        .collect();
    languages.shuffle(&mut r);

    let mut scores: Vec<(MusicScore, usize)> = Vec::with_capacity(config.n_scores);
    for (k, &language) in languages.iter().enumerate() {
        let singer = &singers[k % config.n_singers];
        let technique = if r.random::<f64>() < config.technique_prob {
            Technique::ACTIVE[r.random_range(0..Technique::ACTIVE.len())]
        } else {
            Technique::None
        };
        let method = if r.random::<bool>() { Method::BelCanto } else { Method::Pop };
        let emotion = if r.random::<bool>() { Emotion::Happy } else { Emotion::Sad };

        let mut source = k;
        let mut units = None;
        if r.random::<f64>() < config.shared_content_fraction {
            let candidates: Vec<usize> = scores
                .iter()
                .enumerate()
                .filter(|(j, (s, src))| {
                    *src == *j
                        && s.language() == language
                        && s.labels().vocal_range == singer.vocal_range
                        && singers[j % config.n_singers].id != singer.id
                })
                .map(|(j, _)| j)
                .collect();
            if !candidates.is_empty() {
                source = candidates[r.random_range(0..candidates.len())];
                units = Some(scores[source].0.units().to_vec());
            }
        }
        let units = match units {
            Some(u) => u,
            None => random_units(config, language, singer.vocal_range, &mut r)?,
        };
        let labels = StyleLabels {
            gender: singer.gender,
            vocal_range: singer.vocal_range,
            method,
            emotion,
            techniques: units
                .iter()
                .map(|u| if u.note.is_rest() { Technique::None } else { technique })
                .collect(),
        };
        scores.push((MusicScore::new(units, labels, language)?, source));
    }

    let style = SpeechStyle {
        jitter: config.speech_jitter,
    };
    let samples = scores
        .into_iter()
        .enumerate()
        .map(|(k, (score, content_source))| {
            let singer = singers[k % config.n_singers].clone();
            let sample_seed = rng::derive_seed(seed, k as u64);
            let (singing_mel, singing_f0) = render_singing(&score, &singer, sample_seed);
            let (speech_mel, speech_f0) = render_speech_with(&score, &singer, sample_seed, style);
            CorpusSample {
                index: k,
                textual_prompt_tokens: score.prompt_tokens(),
                score,
                singer,
                singing_mel,
                singing_f0,
                speech_mel,
                speech_f0,
                content_source,
            }
        })
        .collect();
    Ok(Corpus { singers, samples })
}

fn random_units(
    config: &CorpusConfig,
    language: Language,
    range: VocalRange,
    r: &mut rng::Rng,
) -> Result<Vec<ScoreUnit>> {
    let (lo, hi) = range.midi_span();
    let n = r.random_range(config.min_units..=config.max_units);
    let mut pitch = r.random_range(lo..=hi) as i64;
    let mut units = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 {
            pitch = (pitch + r.random_range(-4..=4)).clamp(lo as i64, hi as i64);
        }
        let rest = i > 0 && r.random::<f64>() < config.rest_prob;
        units.push(ScoreUnit {
            phoneme: Phoneme::of(language, r.random_range(0..PHONEMES_PER_LANGUAGE)),
            note: Note::new(pitch, rest)?,
            duration_frames: r.random_range(config.min_duration..=config.max_duration),
        });
    }
    Ok(units)
}
