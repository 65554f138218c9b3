//! Corpus directories: a JSON manifest, one score file and two audio
//! archives per sample.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{parse_score, serialize_score, Corpus, CorpusSample, F0Track, LabelToken, MelSpectrogram, SingerProfile};
use crate::error::{Error, Result};
use crate::train::archive::{load_archive, save_archive, ArchiveTensor, TensorArchive};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub index: usize,
    pub singer: u32,
    pub score: String,
    pub singing: String,
    pub speech: String,
    pub prompt_tokens: String,
    pub content_source: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub singers: Vec<SingerProfile>,
    pub samples: Vec<ManifestEntry>,
    /// Every file of the corpus relative to its root, manifest excluded.
    pub files: Vec<String>,
}

/// Mel and F0 as an archive: `mel` (frames × 80), `f0_hz` and `voiced`
/// (1 × frames, voiced as 0/1). `f32` selects binary32 storage.
pub fn audio_to_archive(mel: &MelSpectrogram, f0: Option<&F0Track>, f32: bool) -> Result<TensorArchive> {
    let enc = |t: &cantus_grad::Tensor| {
        if f32 {
            ArchiveTensor::from_tensor_f32(t)
        } else {
            ArchiveTensor::from_tensor(t)
        }
    };
    let mut a = TensorArchive::new();
    a.insert("mel", enc(&mel.to_tensor()))?;
    if let Some(f0) = f0 {
        let n = f0.len();
        a.insert("f0_hz", enc(&cantus_grad::Tensor::from_vec(1, n, f0.f0_hz().to_vec())))?;
        let v = f0.voiced().iter().map(|v| if *v { 1.0 } else { 0.0 }).collect();
        a.insert("voiced", enc(&cantus_grad::Tensor::from_vec(1, n, v)))?;
    }
    Ok(a)
}

pub fn mel_from_archive(a: &TensorArchive) -> Result<MelSpectrogram> {
    MelSpectrogram::from_tensor(&a.get("mel")?.to_tensor())
}

pub fn f0_from_archive(a: &TensorArchive) -> Result<F0Track> {
    let hz = a.get("f0_hz")?.values();
    let voiced = a.get("voiced")?.values().iter().map(|v| *v != 0.0).collect();
    F0Track::new(hz, voiced)
}

/// Mel spectrogram stored under `mel` in the archive at `path`.
pub fn load_mel(path: &Path) -> Result<MelSpectrogram> {
    mel_from_archive(&load_archive(path)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `corpus` under `dir` and returns the manifest it wrote.
pub fn write_corpus(corpus: &Corpus, seed: u64, dir: &Path) -> Result<Manifest> {
    create_dir(&dir.join("scores"))?;
    create_dir(&dir.join("audio"))?;
    let mut samples = Vec::with_capacity(corpus.samples.len());
    let mut files = Vec::new();
    for s in &corpus.samples {
        let score = format!("scores/{:04}.json", s.index);
        let singing = format!("audio/{:04}_singing.tca", s.index);
        let speech = format!("audio/{:04}_speech.tca", s.index);
        write_text(&dir.join(&score), &serialize_score(&s.score))?;
        save_archive(&dir.join(&singing), &audio_to_archive(&s.singing_mel, Some(&s.singing_f0), false)?)?;
        save_archive(&dir.join(&speech), &audio_to_archive(&s.speech_mel, Some(&s.speech_f0), false)?)?;
        files.extend([score.clone(), singing.clone(), speech.clone()]);
        samples.push(ManifestEntry {
            index: s.index,
            singer: s.singer.id,
            score,
            singing,
            speech,
            prompt_tokens: LabelToken::format_list(&s.textual_prompt_tokens),
            content_source: s.content_source,
        });
    }
    let manifest = Manifest {
        seed,
        singers: corpus.singers.clone(),
        samples,
        files,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write_text(&dir.join(MANIFEST), &text)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = read_text(&path)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        path: format!("{}: {}", path.display(), e.path()),
        message: e.inner().to_string(),
    })
}

/// Loads a corpus written by [`write_corpus`].
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let m = read_manifest(dir)?;
    let path = |rel: &str| -> PathBuf { dir.join(rel) };
    let mut samples = Vec::with_capacity(m.samples.len());
    for e in &m.samples {
        let singer = m
            .singers
            .iter()
            .find(|s| s.id == e.singer)
            .ok_or_else(|| Error::Lookup(format!("sample {}: unknown singer {}", e.index, e.singer)))?
            .clone();
        let score = parse_score(&read_text(&path(&e.score))?)?;
        let sing = load_archive(&path(&e.singing))?;
        let speech = load_archive(&path(&e.speech))?;
        samples.push(CorpusSample {
            index: e.index,
            score,
            singer,
            singing_mel: mel_from_archive(&sing)?,
            singing_f0: f0_from_archive(&sing)?,
            speech_mel: mel_from_archive(&speech)?,
            speech_f0: f0_from_archive(&speech)?,
            textual_prompt_tokens: LabelToken::parse_list(&e.prompt_tokens)?,
            content_source: e.content_source,
        });
    }
    Ok(Corpus {
        singers: m.singers,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::CorpusConfig;
    use crate::score::gen_corpus;

    #[test]
    fn corpus_round_trips_through_disk() {
        let cfg = CorpusConfig {
            n_singers: 3,
            n_scores: 6,
            ..CorpusConfig::default()
        };
        let corpus = gen_corpus(&cfg, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = write_corpus(&corpus, 11, dir.path()).unwrap();
        assert_eq!(m.files.len(), 18);
        for f in &m.files {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        assert_eq!(read_corpus(dir.path()).unwrap(), corpus);
    }

    #[test]
    fn missing_manifest_is_io() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_corpus(dir.path()), Err(Error::Io { .. })));
    }
}
