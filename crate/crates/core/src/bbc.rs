//! Blurred-boundary content encoder: lyric and note embeddings, a duration
//! head, frame expansion, and boundary masking.

use cantus_grad::{Graph, ParamStore, Tensor, Var};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::nn::{normal, Embedding, Linear};
use crate::rng::{self, stream, Rng};
use crate::score::{MusicScore, N_PHONEMES, N_PITCHES};

/// Mean log-duration the head starts from (corpus durations are 2..=5).
pub const INITIAL_LOG_DURATION: f64 = 1.2;

#[derive(Clone, Debug)]
pub struct BbcEncoder {
    pub lyric: Embedding,
    pub note: Embedding,
    /// The learned null vector written into blurred frames.
    pub null: cantus_grad::ParamId,
    pub duration: Linear,
    pub d_model: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContentEmbedding {
    /// `units × d_model`.
    pub vectors: Tensor,
}

impl ContentEmbedding {
    pub fn unit_count(&self) -> usize {
        self.vectors.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DurationPrediction {
    pub log_durations: Vec<f64>,
    pub realized: Vec<usize>,
}

impl DurationPrediction {
    pub fn from_log(log_durations: Vec<f64>) -> Self {
        let realized = log_durations
            .iter()
            .map(|l| {
                let d = l.exp().round();
                if d.is_finite() && d >= 1.0 { d.min(1e6) as usize } else { 1 }
            })
            .collect();
        Self {
            log_durations,
            realized,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameContent {
    /// `T × d_model`.
    pub frames: Tensor,
    /// `true` where the frame holds the null vector.
    pub mask: Vec<bool>,
    /// Interior unit boundaries (cumulative durations, excluding the total).
    pub boundaries: Vec<usize>,
    pub durations: Vec<usize>,
}

impl FrameContent {
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    /// Unit index of every frame.
    pub fn frame_units(&self) -> Vec<usize> {
        frame_units(&self.durations)
    }
}

pub fn frame_units(durations: &[usize]) -> Vec<usize> {
    durations
        .iter()
        .enumerate()
        .flat_map(|(i, d)| std::iter::repeat_n(i, *d))
        .collect()
}

fn boundaries(durations: &[usize]) -> Vec<usize> {
    let mut acc = 0;
    let mut out = Vec::with_capacity(durations.len().saturating_sub(1));
    for d in &durations[..durations.len().saturating_sub(1)] {
        acc += d;
        out.push(acc);
    }
    out
}

impl BbcEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, d_model: usize, rng: &mut Rng) -> Self {
        let lyric = Embedding::new(store, &format!("{prefix}.lyric"), N_PHONEMES, d_model, rng);
        let note = Embedding::new(store, &format!("{prefix}.note"), N_PITCHES + 1, d_model, rng);
        let null = store.add(format!("{prefix}.null"), normal(rng, 1, d_model, 1.0 / (d_model as f64).sqrt()));
        let duration = Linear::from_weights(
            store,
            &format!("{prefix}.duration"),
            Tensor::zeros(d_model, 1),
            Some(Tensor::scalar(INITIAL_LOG_DURATION)),
        );
        Self {
            lyric,
            note,
            null,
            duration,
            d_model,
        }
    }

    fn indices(score: &MusicScore) -> (Vec<usize>, Vec<usize>) {
        score
            .units()
            .iter()
            .map(|u| (u.phoneme.symbol(), u.note.table_row()))
            .unzip()
    }

    /// `units × d_model` embedding node.
    pub fn embed(&self, g: &mut Graph, score: &MusicScore) -> Result<Var> {
        let (lyr, notes) = Self::indices(score);
        if let Some(i) = lyr.iter().position(|s| *s >= self.lyric.rows) {
            return Err(Error::Lookup(format!("unit {i}: phoneme outside the lyric table")));
        }
        if let Some(i) = notes.iter().position(|s| *s >= self.note.rows) {
            return Err(Error::Lookup(format!("unit {i}: pitch outside the note table")));
        }
        let a = self.lyric.forward(g, &lyr);
        let b = self.note.forward(g, &notes);
        Ok(g.add(a, b))
    }

    /// Per-unit log-duration node, `units × 1`.
    pub fn log_durations(&self, g: &mut Graph, emb: Var) -> Var {
        self.duration.forward(g, emb)
    }

    /// Frame-level content `z_c` node: unit rows repeated by `durations`,
    /// masked rows replaced by the null vector.
    pub fn frames(&self, g: &mut Graph, emb: Var, durations: &[usize], mask: &[bool]) -> Var {
        let rows = g.gather_rows(emb, &frame_units(durations));
        if mask.iter().any(|m| *m) {
            let null = g.param(self.null);
            g.select_rows(rows, null, mask)
        } else {
            rows
        }
    }

    pub fn null_vector<'a>(&self, store: &'a ParamStore) -> &'a [f64] {
        store.get(self.null).data()
    }
}

pub fn encode_content(score: &MusicScore, enc: &BbcEncoder, store: &ParamStore) -> Result<ContentEmbedding> {
    let mut g = Graph::new(store);
    let v = enc.embed(&mut g, score)?;
    Ok(ContentEmbedding {
        vectors: g.value(v).clone(),
    })
}

pub fn predict_durations(emb: &ContentEmbedding, enc: &BbcEncoder, store: &ParamStore) -> DurationPrediction {
    let mut g = Graph::new(store);
    let x = g.constant(emb.vectors.clone());
    let l = enc.log_durations(&mut g, x);
    DurationPrediction::from_log(g.value(l).data().to_vec())
}

/// Mean squared error between predicted and ground-truth log-durations.
pub fn duration_loss(pred_log: &[f64], gt_log: &[f64]) -> Result<f64> {
    if pred_log.len() != gt_log.len() || pred_log.is_empty() {
        return Err(Error::contract(format!(
            "duration loss over {} predictions and {} targets",
            pred_log.len(),
            gt_log.len()
        )));
    }
    Ok(pred_log.iter().zip(gt_log).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred_log.len() as f64)
}

pub fn log_durations(durations: &[usize]) -> Vec<f64> {
    durations.iter().map(|d| (*d as f64).ln()).collect()
}

pub fn expand_frames(emb: &ContentEmbedding, durations: &[usize]) -> Result<FrameContent> {
    if durations.len() != emb.unit_count() {
        return Err(Error::contract(format!(
            "{} durations for {} units",
            durations.len(),
            emb.unit_count()
        )));
    }
    if durations.contains(&0) {
        return Err(Error::contract("durations must be positive"));
    }
    let units = frame_units(durations);
    Ok(FrameContent {
        frames: emb.vectors.select_rows(&units),
        mask: vec![false; units.len()],
        boundaries: boundaries(durations),
        durations: durations.to_vec(),
    })
}

/// Blur mask for explicit window offsets, one per boundary (`offsets[i] ≤ m`
/// frames of the window fall left of boundary `i`). Each unit gives up at
/// most `⌊len/2⌋` frames across both of its boundaries; boundaries are
/// handled left to right.
pub fn blur_mask_with_offsets(durations: &[usize], m: usize, offsets: &[usize]) -> Vec<bool> {
    let total: usize = durations.iter().sum();
    let mut mask = vec![false; total];
    let mut budget: Vec<usize> = durations.iter().map(|d| d / 2).collect();
    let bounds = boundaries(durations);
    assert_eq!(bounds.len(), offsets.len(), "one offset per boundary");
    for (i, (&b, &j)) in bounds.iter().zip(offsets).enumerate() {
        let j = j.min(m);
        let left = j.min(budget[i]);
        let right = (m - j).min(budget[i + 1]);
        budget[i] -= left;
        budget[i + 1] -= right;
        mask[b - left..b + right].iter_mut().for_each(|x| *x = true);
    }
    mask
}

pub fn blur_mask(durations: &[usize], m: usize, rng: &mut Rng) -> Vec<bool> {
    let offsets: Vec<usize> = (0..durations.len().saturating_sub(1))
        .map(|_| rng.random_range(0..=m))
        .collect();
    blur_mask_with_offsets(durations, m, &offsets)
}

/// Masks a window around every boundary; masked frames take `null`.
pub fn blur_boundaries(fc: &FrameContent, m: usize, seed: u64, null: &[f64]) -> FrameContent {
    assert_eq!(null.len(), fc.frames.cols(), "null vector width");
    let mut r = rng::rng(seed, stream::MASK);
    let fresh = blur_mask(&fc.durations, m, &mut r);
    let mut out = fc.clone();
    for (t, (old, new)) in out.mask.iter_mut().zip(fresh).enumerate() {
        if new {
            *old = true;
        }
        if *old {
            out.frames.row_slice_mut(t).copy_from_slice(null);
        }
    }
    out
}
