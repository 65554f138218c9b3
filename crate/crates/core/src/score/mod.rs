//! Music scores, style labels, and the synthetic singer/corpus oracle.

mod corpus;
pub mod disk;
mod document;
mod render;

pub use corpus::{gen_corpus, language_quotas, singer_for, Corpus, CorpusSample};
pub use document::{canonicalize, parse_score, serialize_score};
pub use render::{
    hz_to_mel, mel_bin_center_hz, midi_to_hz, render_singing, render_speech, render_speech_with, speech_durations,
    F0Track, MelSpectrogram, SpeechStyle,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const N_MEL: usize = 80;
/// Mel frames per latent frame.
pub const DOWNSAMPLE: usize = 8;
pub const SAMPLE_RATE: f64 = 24_000.0;
pub const HOP: usize = 128;
pub const FRAME_RATE: f64 = SAMPLE_RATE / HOP as f64;
pub const MEL_FMAX: f64 = 12_000.0;

pub const N_LANGUAGES: usize = 4;
pub const PHONEMES_PER_LANGUAGE: usize = 8;
pub const N_PHONEMES: usize = N_LANGUAGES * PHONEMES_PER_LANGUAGE;
pub const MIDI_MIN: u8 = 36;
pub const MIDI_MAX: u8 = 84;
pub const N_PITCHES: usize = (MIDI_MAX - MIDI_MIN + 1) as usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Language {
    A,
    B,
    C,
    D,
}

impl Language {
    pub const ALL: [Language; N_LANGUAGES] = [Language::A, Language::B, Language::C, Language::D];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Language> {
        Self::ALL.get(i).copied()
    }

    fn letter(self) -> char {
        (b'a' + self as u8) as char
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for Language {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(Language::A),
            "b" => Ok(Language::B),
            "c" => Ok(Language::C),
            "d" => Ok(Language::D),
            _ => Err(Error::Lookup(format!("unknown language `{s}`"))),
        }
    }
}

/// One of the 32 synthetic phoneme symbols; language `L` owns symbols
/// `L*8 .. L*8+8`, written `a0`..`d7`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Phoneme {
    symbol: u8,
}

impl Phoneme {
    pub fn new(symbol: usize) -> Result<Self> {
        if symbol < N_PHONEMES {
            Ok(Self { symbol: symbol as u8 })
        } else {
            Err(Error::Lookup(format!("phoneme symbol {symbol} outside the inventory")))
        }
    }

    pub fn of(language: Language, k: usize) -> Self {
        assert!(k < PHONEMES_PER_LANGUAGE);
        Self {
            symbol: (language.index() * PHONEMES_PER_LANGUAGE + k) as u8,
        }
    }

    pub fn symbol(self) -> usize {
        self.symbol as usize
    }

    pub fn language(self) -> Language {
        Language::ALL[self.symbol as usize / PHONEMES_PER_LANGUAGE]
    }
}

impl fmt::Display for Phoneme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.language(), self.symbol as usize % PHONEMES_PER_LANGUAGE)
    }
}

impl FromStr for Phoneme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut chars = s.chars();
        let (Some(l), Some(d), None) = (chars.next(), chars.next(), chars.next()) else {
            return Err(Error::Lookup(format!("unknown phoneme `{s}`")));
        };
        let language: Language = l.to_string().parse()?;
        match d.to_digit(10) {
            Some(k) if (k as usize) < PHONEMES_PER_LANGUAGE => Ok(Phoneme::of(language, k as usize)),
            _ => Err(Error::Lookup(format!("unknown phoneme `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Note {
    midi_pitch: u8,
    is_rest: bool,
}

impl Note {
    pub fn new(midi_pitch: i64, is_rest: bool) -> Result<Self> {
        if !(MIDI_MIN as i64..=MIDI_MAX as i64).contains(&midi_pitch) {
            return Err(Error::Validation(format!(
                "midi_pitch {midi_pitch} outside [{MIDI_MIN}, {MIDI_MAX}]"
            )));
        }
        Ok(Self {
            midi_pitch: midi_pitch as u8,
            is_rest,
        })
    }

    pub fn midi_pitch(self) -> u8 {
        self.midi_pitch
    }

    pub fn is_rest(self) -> bool {
        self.is_rest
    }

    /// Row in a pitch embedding table; rests share the final row.
    pub fn table_row(self) -> usize {
        if self.is_rest {
            N_PITCHES
        } else {
            (self.midi_pitch - MIDI_MIN) as usize
        }
    }

    pub fn hz(self) -> Option<f64> {
        (!self.is_rest).then(|| midi_to_hz(self.midi_pitch as f64))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ScoreUnit {
    pub phoneme: Phoneme,
    pub note: Note,
    pub duration_frames: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Female,
    Male,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocalRange {
    Soprano,
    Alto,
    Tenor,
    Bass,
}

impl VocalRange {
    /// Inclusive MIDI range the corpus generator draws notes from.
    pub fn midi_span(self) -> (u8, u8) {
        match self {
            VocalRange::Soprano => (60, 79),
            VocalRange::Alto => (55, 74),
            VocalRange::Tenor => (48, 67),
            VocalRange::Bass => (40, 60),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    BelCanto,
    Pop,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Emotion {
    Happy,
    Sad,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Technique {
    None,
    MixedVoice,
    Falsetto,
    Breathy,
    Vibrato,
    Glissando,
    Pharyngeal,
}

impl Technique {
    pub const ACTIVE: [Technique; 6] = [
        Technique::MixedVoice,
        Technique::Falsetto,
        Technique::Breathy,
        Technique::Vibrato,
        Technique::Glissando,
        Technique::Pharyngeal,
    ];
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct StyleLabels {
    pub gender: Gender,
    pub vocal_range: VocalRange,
    pub method: Method,
    pub emotion: Emotion,
    /// One entry per score unit.
    pub techniques: Vec<Technique>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MusicScore {
    units: Vec<ScoreUnit>,
    labels: StyleLabels,
    language: Language,
}

impl MusicScore {
    pub fn new(units: Vec<ScoreUnit>, labels: StyleLabels, language: Language) -> Result<Self> {
        if units.is_empty() {
            return Err(Error::Validation("score has no units".into()));
        }
        if labels.techniques.len() != units.len() {
            return Err(Error::Validation(format!(
                "{} techniques for {} units",
                labels.techniques.len(),
                units.len()
            )));
        }
        for (i, u) in units.iter().enumerate() {
            if u.duration_frames == 0 {
                return Err(Error::Validation(format!("unit {i} has zero duration")));
            }
            if u.phoneme.language() != language {
                return Err(Error::Validation(format!(
                    "unit {i}: phoneme {} is not in language {language}",
                    u.phoneme
                )));
            }
        }
        Ok(Self {
            units,
            labels,
            language,
        })
    }

    pub fn units(&self) -> &[ScoreUnit] {
        &self.units
    }

    pub fn labels(&self) -> &StyleLabels {
        &self.labels
    }

    pub fn language(&self) -> Language {
        self.language
    }

    pub fn durations(&self) -> Vec<usize> {
        self.units.iter().map(|u| u.duration_frames as usize).collect()
    }

    /// Total length in latent frames.
    pub fn total_frames(&self) -> usize {
        self.units.iter().map(|u| u.duration_frames as usize).sum()
    }

    /// Same content and labels, every unit carrying `technique` (rests keep none).
    pub fn with_technique(&self, technique: Technique) -> MusicScore {
        let mut labels = self.labels.clone();
        labels.techniques = self
            .units
            .iter()
            .map(|u| if u.note.is_rest() { Technique::None } else { technique })
            .collect();
        MusicScore {
            units: self.units.clone(),
            labels,
            language: self.language,
        }
    }

    pub fn with_labels(&self, labels: StyleLabels) -> Result<MusicScore> {
        MusicScore::new(self.units.clone(), labels, self.language)
    }

    pub fn prompt_tokens(&self) -> Vec<LabelToken> {
        LabelToken::encode(&self.labels)
    }
}

/// Fixed vocabulary of textual style-prompt tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelToken(u8);

const TOKEN_NAMES: [&str; 16] = [
    "female",
    "male",
    "soprano",
    "alto",
    "tenor",
    "bass",
    "bel_canto",
    "pop",
    "happy",
    "sad",
    "mixed_voice",
    "falsetto",
    "breathy",
    "vibrato",
    "glissando",
    "pharyngeal",
];

impl LabelToken {
    pub const VOCAB_SIZE: usize = TOKEN_NAMES.len();

    pub fn id(self) -> usize {
        self.0 as usize
    }

    pub fn from_id(id: usize) -> Result<Self> {
        if id < Self::VOCAB_SIZE {
            Ok(LabelToken(id as u8))
        } else {
            Err(Error::Lookup(format!("label token id {id} outside the vocabulary")))
        }
    }

    pub fn gender(g: Gender) -> Self {
        LabelToken(g as u8)
    }

    pub fn range(r: VocalRange) -> Self {
        LabelToken(2 + r as u8)
    }

    pub fn method(m: Method) -> Self {
        LabelToken(6 + m as u8)
    }

    pub fn emotion(e: Emotion) -> Self {
        LabelToken(8 + e as u8)
    }

    pub fn technique(t: Technique) -> Option<Self> {
        (t != Technique::None).then(|| LabelToken(10 + t as u8 - 1))
    }

    /// Four global tokens followed by each distinct technique in order of
    /// first appearance.
    pub fn encode(labels: &StyleLabels) -> Vec<LabelToken> {
        let mut out = vec![
            Self::gender(labels.gender),
            Self::range(labels.vocal_range),
            Self::method(labels.method),
            Self::emotion(labels.emotion),
        ];
        for t in &labels.techniques {
            if let Some(tok) = Self::technique(*t) {
                if !out.contains(&tok) {
                    out.push(tok);
                }
            }
        }
        out
    }

    /// Whitespace-separated token names.
    pub fn parse_list(text: &str) -> Result<Vec<LabelToken>> {
        text.split_whitespace().map(str::parse).collect()
    }

    pub fn format_list(tokens: &[LabelToken]) -> String {
        tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
    }
}

impl fmt::Display for LabelToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(TOKEN_NAMES[self.0 as usize])
    }
}

impl FromStr for LabelToken {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TOKEN_NAMES
            .iter()
            .position(|n| *n == s)
            .map(|i| LabelToken(i as u8))
            .ok_or_else(|| Error::Lookup(format!("unknown prompt token `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingerProfile {
    pub id: u32,
    pub gender: Gender,
    pub vocal_range: VocalRange,
    /// Per-mel-bin multiplicative gain in `[0.25, 4]`.
    pub timbre_gain: Vec<f64>,
    pub vibrato_rate_hz: f64,
    pub vibrato_depth_semitones: f64,
    pub breathiness: f64,
}

impl SingerProfile {
    /// Deterministic in `(id, gender, vocal_range)`.
    pub fn new(id: u32, gender: Gender, vocal_range: VocalRange) -> Self {
        use rand::Rng;
        let tag = (gender as u64) << 8 | vocal_range as u64;
        let mut r = rng::rng(id as u64, 0x5199_0000 | tag);
        // log2 gain: a few random low-order cosines over the bin axis
        let comps: Vec<(f64, f64)> = (1..=6)
            .map(|_| (r.random_range(-1.5..1.5), r.random_range(0.0..std::f64::consts::TAU)))
            .collect();
        let timbre_gain = (0..N_MEL)
            .map(|b| {
                let x = b as f64 / (N_MEL - 1) as f64;
                let lg: f64 = comps
                    .iter()
                    .enumerate()
                    .map(|(j, (a, ph))| a * (std::f64::consts::PI * (j + 1) as f64 * x + ph).cos())
                    .sum();
                2f64.powf(lg.clamp(-2.0, 2.0))
            })
            .collect();
        Self {
            id,
            gender,
            vocal_range,
            timbre_gain,
            vibrato_rate_hz: r.random_range(4.0..7.0),
            vibrato_depth_semitones: r.random_range(0.2..0.8),
            breathiness: r.random_range(0.0..0.3),
        }
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phoneme_names_round_trip() {
        for s in 0..N_PHONEMES {
            let p = Phoneme::new(s).unwrap();
            assert_eq!(p.to_string().parse::<Phoneme>().unwrap(), p);
        }
        assert_eq!(Phoneme::of(Language::C, 3).to_string(), "c3");
        assert!("e1".parse::<Phoneme>().is_err());
        assert!("a8".parse::<Phoneme>().is_err());
        assert!(Phoneme::new(32).is_err());
    }

    #[test]
    fn note_range_enforced() {
        assert!(Note::new(120, false).is_err());
        assert!(Note::new(35, false).is_err());
        assert_eq!(Note::new(84, false).unwrap().table_row(), N_PITCHES - 1);
        assert_eq!(Note::new(60, true).unwrap().table_row(), N_PITCHES);
    }

    #[test]
    fn tokens_cover_vocabulary_once() {
        let mut seen = std::collections::HashSet::new();
        for g in [Gender::Female, Gender::Male] {
            seen.insert(LabelToken::gender(g));
        }
        for r in [VocalRange::Soprano, VocalRange::Alto, VocalRange::Tenor, VocalRange::Bass] {
            seen.insert(LabelToken::range(r));
        }
        seen.insert(LabelToken::method(Method::BelCanto));
        seen.insert(LabelToken::method(Method::Pop));
        seen.insert(LabelToken::emotion(Emotion::Happy));
        seen.insert(LabelToken::emotion(Emotion::Sad));
        for t in Technique::ACTIVE {
            seen.insert(LabelToken::technique(t).unwrap());
        }
        assert_eq!(seen.len(), LabelToken::VOCAB_SIZE);
        assert!(LabelToken::technique(Technique::None).is_none());
        for t in seen {
            assert_eq!(t.to_string().parse::<LabelToken>().unwrap(), t);
        }
    }

    #[test]
    fn encode_lists_globals_then_distinct_techniques() {
        let labels = StyleLabels {
            gender: Gender::Male,
            vocal_range: VocalRange::Bass,
            method: Method::Pop,
            emotion: Emotion::Sad,
            techniques: vec![Technique::None, Technique::Vibrato, Technique::Vibrato, Technique::Breathy],
        };
        let names = LabelToken::format_list(&LabelToken::encode(&labels));
        assert_eq!(names, "male bass pop sad vibrato breathy");
    }

    #[test]
    fn singer_profiles_are_deterministic_and_bounded() {
        let a = SingerProfile::new(3, Gender::Female, VocalRange::Alto);
        assert_eq!(a, SingerProfile::new(3, Gender::Female, VocalRange::Alto));
        assert!(a.timbre_gain.iter().all(|g| (0.25..=4.0).contains(g)));
        assert!((4.0..=7.0).contains(&a.vibrato_rate_hz));
        assert!((0.2..=0.8).contains(&a.vibrato_depth_semitones));
        assert!((0.0..=0.3).contains(&a.breathiness));
    }

    #[test]
    fn distinct_singers_have_distinct_timbre() {
        let ranges = [VocalRange::Soprano, VocalRange::Alto, VocalRange::Tenor, VocalRange::Bass];
        let singers: Vec<SingerProfile> = (0..60u32)
            .map(|id| {
                let g = if id % 2 == 0 { Gender::Female } else { Gender::Male };
                SingerProfile::new(id, g, ranges[(id as usize) % 4])
            })
            .collect();
        for i in 0..singers.len() {
            for j in i + 1..singers.len() {
                let c = cosine(&singers[i].timbre_gain, &singers[j].timbre_gain);
                assert!(c < 0.99, "singers {i} and {j}: cosine {c}");
            }
        }
    }
}
