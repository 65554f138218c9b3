//! Score file format: JSON with top-level `language`, `labels`, `units`.

use serde::{Deserialize, Serialize};

use super::{Emotion, Gender, Language, Method, MusicScore, Note, Phoneme, ScoreUnit, StyleLabels, Technique, VocalRange};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreDocument {
    language: Language,
    labels: LabelsDocument,
    units: Vec<UnitDocument>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelsDocument {
    gender: Gender,
    vocal_range: VocalRange,
    method: Method,
    emotion: Emotion,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UnitDocument {
    phoneme: String,
    midi_pitch: i64,
    is_rest: bool,
    duration_frames: i64,
    technique: Technique,
}

fn read_document(text: &str) -> Result<ScoreDocument> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

fn write_document(doc: &ScoreDocument) -> String {
    let mut s = serde_json::to_string_pretty(doc).expect("score documents always serialize");
    s.push('\n');
    s
}

pub fn parse_score(text: &str) -> Result<MusicScore> {
    let doc = read_document(text)?;
    let mut units = Vec::with_capacity(doc.units.len());
    let mut techniques = Vec::with_capacity(doc.units.len());
    for (i, u) in doc.units.into_iter().enumerate() {
        let phoneme: Phoneme = u.phoneme.parse().map_err(|_| Error::Parse {
            path: format!("units[{i}].phoneme"),
            message: format!("unknown phoneme `{}`", u.phoneme),
        })?;
        let note = Note::new(u.midi_pitch, u.is_rest)
            .map_err(|e| Error::Validation(format!("units[{i}].midi_pitch: {e}")))?;
        if u.duration_frames < 1 || u.duration_frames > u32::MAX as i64 {
            return Err(Error::Validation(format!(
                "units[{i}].duration_frames: {} is not a positive frame count",
                u.duration_frames
            )));
        }
        units.push(ScoreUnit {
            phoneme,
            note,
            duration_frames: u.duration_frames as u32,
        });
        techniques.push(u.technique);
    }
    let labels = StyleLabels {
        gender: doc.labels.gender,
        vocal_range: doc.labels.vocal_range,
        method: doc.labels.method,
        emotion: doc.labels.emotion,
        techniques,
    };
    MusicScore::new(units, labels, doc.language)
}

pub fn serialize_score(score: &MusicScore) -> String {
    let labels = score.labels();
    let doc = ScoreDocument {
        language: score.language(),
        labels: LabelsDocument {
            gender: labels.gender,
            vocal_range: labels.vocal_range,
            method: labels.method,
            emotion: labels.emotion,
        },
        units: score
            .units()
            .iter()
            .zip(&labels.techniques)
            .map(|(u, t)| UnitDocument {
                phoneme: u.phoneme.to_string(),
                midi_pitch: u.note.midi_pitch() as i64,
                is_rest: u.note.is_rest(),
                duration_frames: u.duration_frames as i64,
                technique: *t,
            })
            .collect(),
    };
    write_document(&doc)
}

/// Canonical layout of a score document: fixed key order, two-space
/// indentation, trailing newline. Does not validate values.
pub fn canonicalize(text: &str) -> Result<String> {
    Ok(write_document(&read_document(text)?))
}
