//! Audio codec: singing/speech encoders to a compact latent, a mel decoder,
//! a patch discriminator, and a label-token text encoder. Prompt embeddings
//! from all three sources are aligned with a contrastive objective.

use cantus_grad::{Graph, ParamId, ParamStore, Tensor, Var};

use crate::bbc::frame_units;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::{Attention, Conv1d, Embedding, Linear};
use crate::rng::Rng;
use crate::score::{LabelToken, MelSpectrogram, MusicScore, DOWNSAMPLE, N_MEL, N_PHONEMES, N_PITCHES};

const SLOPE: f64 = 0.2;
const NORM_EPS: f64 = 1e-6;
/// Fixed affine map of log-mel values into roughly unit scale.
const MEL_CENTER: f64 = 1.2;
const MEL_SCALE: f64 = 0.65;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AudioKind {
    Singing,
    Speech,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PromptKind {
    Singing,
    Speech,
    Text,
}

impl From<AudioKind> for PromptKind {
    fn from(k: AudioKind) -> Self {
        match k {
            AudioKind::Singing => PromptKind::Singing,
            AudioKind::Speech => PromptKind::Speech,
        }
    }
}

/// Codec latent, `frames × channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentMel {
    pub values: Tensor,
}

impl LatentMel {
    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbedding {
    /// `frames × d_model`.
    pub vectors: Tensor,
    pub kind: PromptKind,
    pub pooled: Vec<f64>,
}

impl PromptEmbedding {
    pub fn new(vectors: Tensor, kind: PromptKind) -> Self {
        let pooled = vectors.mean_rows().into_data();
        Self { vectors, kind, pooled }
    }

    pub fn frames(&self) -> usize {
        self.vectors.rows()
    }

    /// Unit-norm copy of the pooled vector.
    pub fn normalized(&self) -> Result<Vec<f64>> {
        unit(&self.pooled)
    }
}

pub fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ContrastType {
    SameContentDiffStyle,
    SameStyleDiffContent,
    DiffBoth,
}

/// Pooled embeddings of `N` aligned (singing, speech, text) triples.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletBatch {
    pub singing: Tensor,
    pub speech: Tensor,
    pub text: Tensor,
    pub singer_ids: Vec<u32>,
    pub content_ids: Vec<usize>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.singing.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.singing.rows() == 0
    }

    /// Contrast type of every unordered pair `(i, j)`, `i < j`.
    pub fn pair_tags(&self) -> Vec<(usize, usize, ContrastType)> {
        let n = self.singer_ids.len();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let same_singer = self.singer_ids[i] == self.singer_ids[j];
                let same_content = self.content_ids[i] == self.content_ids[j];
                let tag = match (same_content, same_singer) {
                    (true, false) => ContrastType::SameContentDiffStyle,
                    (false, true) => ContrastType::SameStyleDiffContent,
                    _ => ContrastType::DiffBoth,
                };
                out.push((i, j, tag));
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct AudioEncoder {
    pub convs: [Conv1d; 3],
    pub prompt_hidden: Linear,
    pub prompt_out: Linear,
}

impl AudioEncoder {
    fn new(store: &mut ParamStore, name: &str, cfg: &Config, rng: &mut Rng) -> Self {
        let (h, k, c) = (cfg.codec.hidden, cfg.codec.kernel, cfg.codec.latent_channels);
        let d = cfg.flow.d_model;
        Self {
            convs: [
                Conv1d::new(store, &format!("{name}.conv0"), N_MEL, h, k, 2, rng),
                Conv1d::new(store, &format!("{name}.conv1"), h, h, k, 2, rng),
                Conv1d::new(store, &format!("{name}.conv2"), h, c, k, 2, rng),
            ],
            prompt_hidden: Linear::new(store, &format!("{name}.prompt0"), c, h, rng),
            prompt_out: Linear::new(store, &format!("{name}.prompt1"), h, d, rng),
        }
    }

    /// `(latent, per-frame prompt)` from a `T × 80` mel node.
    pub fn forward(&self, g: &mut Graph, mel: Var) -> (Var, Var) {
        let x = g.add_scalar(mel, -MEL_CENTER);
        let mut x = g.scale(x, 1.0 / MEL_SCALE);
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(g, x);
            if i < 2 {
                x = g.leaky_relu(x, SLOPE);
            }
        }
        let p = self.prompt(g, x);
        (x, p)
    }

    pub fn prompt(&self, g: &mut Graph, latent: Var) -> Var {
        let p = self.prompt_hidden.forward(g, latent);
        let p = g.gelu(p);
        self.prompt_out.forward(g, p)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub input: Conv1d,
    pub ups: [Conv1d; 3],
    pub output: Conv1d,
}

impl Decoder {
    fn new(store: &mut ParamStore, name: &str, cfg: &Config, rng: &mut Rng) -> Self {
        let (h, k, c) = (cfg.codec.hidden, cfg.codec.kernel, cfg.codec.latent_channels);
        Self {
            input: Conv1d::new(store, &format!("{name}.in"), c, h, k, 1, rng),
            ups: [
                Conv1d::new(store, &format!("{name}.up0"), h, h, k, 1, rng),
                Conv1d::new(store, &format!("{name}.up1"), h, h, k, 1, rng),
                Conv1d::new(store, &format!("{name}.up2"), h, h, k, 1, rng),
            ],
            output: Conv1d::new(store, &format!("{name}.out"), h, N_MEL, k, 1, rng),
        }
    }

    /// `8T × 80` mel node from a `T × C` latent node.
    pub fn forward(&self, g: &mut Graph, latent: Var) -> Var {
        let x = self.input.forward(g, latent);
        let mut x = g.leaky_relu(x, SLOPE);
        for conv in &self.ups {
            let t = g.shape(x).0;
            let idx: Vec<usize> = (0..2 * t).map(|i| i / 2).collect();
            x = g.gather_rows(x, &idx);
            x = conv.forward(g, x);
            x = g.leaky_relu(x, SLOPE);
        }
        let y = self.output.forward(g, x);
        let y = g.scale(y, MEL_SCALE);
        g.add_scalar(y, MEL_CENTER)
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub convs: [Conv1d; 4],
}

impl Discriminator {
    fn new(store: &mut ParamStore, name: &str, cfg: &Config, rng: &mut Rng) -> Self {
        let (h, k) = (cfg.codec.disc_channels, cfg.codec.kernel);
        Self {
            convs: [
                Conv1d::new(store, &format!("{name}.conv0"), N_MEL, h, k, 2, rng),
                Conv1d::new(store, &format!("{name}.conv1"), h, h, k, 2, rng),
                Conv1d::new(store, &format!("{name}.conv2"), h, h, k, 2, rng),
                Conv1d::new(store, &format!("{name}.conv3"), h, 1, k, 1, rng),
            ],
        }
    }

    /// Per-patch scores, `patches × 1`.
    pub fn forward(&self, g: &mut Graph, mel: Var) -> Var {
        let mut x = mel;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(g, x);
            if i < 3 {
                x = g.leaky_relu(x, SLOPE);
            }
        }
        x
    }
}

#[derive(Clone, Debug)]
struct TextLayer {
    attn: Attention,
    ff0: Linear,
    ff1: Linear,
}

/// Frame-rate queries from the score attend to label-token embeddings.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    tokens: Embedding,
    lyric: Embedding,
    note: Embedding,
    layers: Vec<TextLayer>,
}

impl TextEncoder {
    fn new(store: &mut ParamStore, name: &str, cfg: &Config, rng: &mut Rng) -> Self {
        let d = cfg.flow.d_model;
        let layers = (0..cfg.codec.text_layers)
            .map(|i| TextLayer {
                attn: Attention::new(store, &format!("{name}.layer{i}.attn"), d, cfg.codec.text_heads, rng),
                ff0: Linear::new(store, &format!("{name}.layer{i}.ff0"), d, 2 * d, rng),
                ff1: Linear::new(store, &format!("{name}.layer{i}.ff1"), 2 * d, d, rng),
            })
            .collect();
        Self {
            tokens: Embedding::new(store, &format!("{name}.tokens"), LabelToken::VOCAB_SIZE, d, rng),
            lyric: Embedding::new(store, &format!("{name}.lyric"), N_PHONEMES, d, rng),
            note: Embedding::new(store, &format!("{name}.note"), N_PITCHES + 1, d, rng),
            layers,
        }
    }

    /// `frames × d_model` node at the score's latent frame rate.
    pub fn forward(&self, g: &mut Graph, tokens: &[LabelToken], score: &MusicScore) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::contract("text prompt has no tokens"));
        }
        let ids: Vec<usize> = tokens.iter().map(|t| t.id()).collect();
        let kv = self.tokens.forward(g, &ids);
        let units = frame_units(&score.durations());
        let lyr: Vec<usize> = units.iter().map(|u| score.units()[*u].phoneme.symbol()).collect();
        let notes: Vec<usize> = units.iter().map(|u| score.units()[*u].note.table_row()).collect();
        let a = self.lyric.forward(g, &lyr);
        let b = self.note.forward(g, &notes);
        let mut h = g.add(a, b);
        for layer in &self.layers {
            let q = g.rms_norm_rows(h, NORM_EPS);
            let att = layer.attn.forward(g, q, kv, None);
            h = g.add(h, att);
            let n = g.rms_norm_rows(h, NORM_EPS);
            let f = layer.ff0.forward(g, n);
            let f = g.gelu(f);
            let f = layer.ff1.forward(g, f);
            h = g.add(h, f);
        }
        Ok(h)
    }
}

/// Per-channel statistics used to whiten latents for the flow model.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn fit(latents: &[&Tensor]) -> Self {
        let c = latents[0].cols();
        let n: usize = latents.iter().map(|t| t.rows()).sum();
        let mut mean = vec![0.0; c];
        for t in latents {
            for r in 0..t.rows() {
                for (m, v) in mean.iter_mut().zip(t.row_slice(r)) {
                    *m += v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for t in latents {
            for r in 0..t.rows() {
                for ((s, v), m) in var.iter_mut().zip(t.row_slice(r)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let std = var.iter().map(|s| (s / n as f64).sqrt().max(1e-3)).collect();
        Self { mean, std }
    }

    pub fn normalize(&self, t: &Tensor) -> Tensor {
        let mut out = t.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_slice_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        out
    }

    pub fn denormalize(&self, t: &Tensor) -> Tensor {
        let mut out = t.clone();
        for r in 0..out.rows() {
            for ((v, m), s) in out.row_slice_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = *v * s + m;
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Codec {
    pub singing: AudioEncoder,
    pub speech: AudioEncoder,
    pub decoder: Decoder,
    pub disc: Discriminator,
    pub text: TextEncoder,
    /// `ln(1/τ_c)`.
    pub log_inv_tau: ParamId,
    pub learn_tau: bool,
    pub latent_channels: usize,
    pub d_model: usize,
}

pub const DISC_PREFIX: &str = "disc.";

impl Codec {
    pub fn new(store: &mut ParamStore, cfg: &Config, rng: &mut Rng) -> Self {
        let singing = AudioEncoder::new(store, "enc_sing", cfg, rng);
        let speech = AudioEncoder::new(store, "enc_speech", cfg, rng);
        let decoder = Decoder::new(store, "dec", cfg, rng);
        let text = TextEncoder::new(store, "text", cfg, rng);
        let log_inv_tau = store.add("log_inv_tau", Tensor::scalar((1.0 / cfg.codec.tau_c).ln()));
        let disc = Discriminator::new(store, "disc", cfg, rng);
        Self {
            singing,
            speech,
            decoder,
            disc,
            text,
            log_inv_tau,
            learn_tau: cfg.codec.learn_tau,
            latent_channels: cfg.codec.latent_channels,
            d_model: cfg.flow.d_model,
        }
    }

    pub fn encoder(&self, kind: AudioKind) -> &AudioEncoder {
        match kind {
            AudioKind::Singing => &self.singing,
            AudioKind::Speech => &self.speech,
        }
    }

    pub fn is_disc_param(store: &ParamStore, id: ParamId) -> bool {
        store.name(id).starts_with(DISC_PREFIX)
    }

    /// Inverse temperature node; a constant when the temperature is frozen.
    pub fn inv_tau(&self, g: &mut Graph, store: &ParamStore) -> Var {
        let l = if self.learn_tau {
            g.param(self.log_inv_tau)
        } else {
            g.constant(store.get(self.log_inv_tau).clone())
        };
        g.exp(l)
    }
}

fn check_mel(mel: &MelSpectrogram) -> Result<()> {
    if mel.frames() < DOWNSAMPLE {
        return Err(Error::InputTooShort {
            frames: mel.frames(),
            min: DOWNSAMPLE,
        });
    }
    Ok(())
}

pub fn encode_audio(
    mel: &MelSpectrogram,
    kind: AudioKind,
    codec: &Codec,
    store: &ParamStore,
) -> Result<(LatentMel, PromptEmbedding)> {
    check_mel(mel)?;
    let mut g = Graph::new(store);
    let x = g.constant(mel.to_tensor());
    let (lat, p) = codec.encoder(kind).forward(&mut g, x);
    Ok((
        LatentMel {
            values: g.value(lat).clone(),
        },
        PromptEmbedding::new(g.value(p).clone(), kind.into()),
    ))
}

/// Raw decoder output (`8T × 80`), unclamped.
pub fn decode_tensor(latent: &LatentMel, codec: &Codec, store: &ParamStore) -> Tensor {
    let mut g = Graph::new(store);
    let x = g.constant(latent.values.clone());
    let y = codec.decoder.forward(&mut g, x);
    g.value(y).clone()
}

pub fn decode_audio(latent: &LatentMel, codec: &Codec, store: &ParamStore) -> Result<MelSpectrogram> {
    MelSpectrogram::from_tensor(&decode_tensor(latent, codec, store))
}

pub fn encode_text(
    tokens: &[LabelToken],
    score: &MusicScore,
    codec: &Codec,
    store: &ParamStore,
) -> Result<PromptEmbedding> {
    let mut g = Graph::new(store);
    let h = codec.text.forward(&mut g, tokens, score)?;
    Ok(PromptEmbedding::new(g.value(h).clone(), PromptKind::Text))
}

/// Graph form of one symmetric contrastive term: the sum over `i` of the
/// row-wise and column-wise log-probabilities of the matched pair `(a_i, b_i)`.
pub fn contrastive_pair_graph(g: &mut Graph, a: Var, b: Var, inv_tau: Var) -> Var {
    let d = g.shape(a).1 as f64;
    let an = g.rms_norm_rows(a, NORM_EPS);
    let bn = g.rms_norm_rows(b, NORM_EPS);
    // rms-normalized rows have squared norm d
    let sim = g.matmul_t(an, bn);
    let sim = g.scale(sim, 1.0 / d);
    let (n, _) = g.shape(sim);
    let ones = g.constant(Tensor::filled(n, 1, 1.0));
    let logits = {
        let col = g.matmul(ones, inv_tau);
        g.mul_col(sim, col)
    };
    let row_lp = g.log_softmax_rows(logits);
    let lt = g.transpose(logits);
    let col_lp = g.log_softmax_rows(lt);
    let eye = g.constant(identity(n));
    let both = g.add(row_lp, col_lp);
    let diag = g.mul(both, eye);
    g.sum_all(diag)
}

fn identity(n: usize) -> Tensor {
    let mut t = Tensor::zeros(n, n);
    for i in 0..n {
        t.set(i, i, 1.0);
    }
    t
}

/// `−1/(6N) Σ` over the (singing, speech), (speech, text) and
/// (singing, text) pairings.
pub fn total_contrastive_graph(g: &mut Graph, si: Var, sp: Var, te: Var, inv_tau: Var) -> Var {
    let n = g.shape(si).0 as f64;
    let a = contrastive_pair_graph(g, si, sp, inv_tau);
    let b = contrastive_pair_graph(g, sp, te, inv_tau);
    let c = contrastive_pair_graph(g, si, te, inv_tau);
    let ab = g.add(a, b);
    let s = g.add(ab, c);
    g.scale(s, -1.0 / (6.0 * n))
}

fn check_batch(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!("batch shapes {:?} and {:?}", a.shape(), b.shape())));
    }
    if a.rows() < 2 {
        return Err(Error::contract("contrastive loss needs at least two pairs"));
    }
    for t in [a, b] {
        for r in 0..t.rows() {
            if t.row_slice(r).iter().all(|v| *v == 0.0) {
                return Err(Error::ZeroVector);
            }
        }
    }
    Ok(())
}

pub fn contrastive_pair_loss(a: &Tensor, b: &Tensor, tau_c: f64) -> Result<f64> {
    check_batch(a, b)?;
    let mut g = Graph::detached();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let it = g.constant(Tensor::scalar(1.0 / tau_c));
    let l = contrastive_pair_graph(&mut g, av, bv, it);
    Ok(g.value(l).item())
}

pub fn total_contrastive_loss(batch: &TripletBatch, tau_c: f64) -> Result<f64> {
    check_batch(&batch.singing, &batch.speech)?;
    check_batch(&batch.speech, &batch.text)?;
    let mut g = Graph::detached();
    let si = g.constant(batch.singing.clone());
    let sp = g.constant(batch.speech.clone());
    let te = g.constant(batch.text.clone());
    let it = g.constant(Tensor::scalar(1.0 / tau_c));
    let l = total_contrastive_graph(&mut g, si, sp, te, it);
    Ok(g.value(l).item())
}

pub fn reconstruction_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::contract(format!(
            "reconstruction of shape {:?} against {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(pred.zip_map(target, |p, t| (p - t) * (p - t)).mean())
}

/// LSGAN discriminator loss `½E[(D(real)−1)²] + ½E[D(fake)²]`.
pub fn disc_loss_graph(g: &mut Graph, real: Var, fake: Var) -> Var {
    let r = g.add_scalar(real, -1.0);
    let r = g.square(r);
    let r = g.mean_all(r);
    let f = g.square(fake);
    let f = g.mean_all(f);
    let s = g.add(r, f);
    g.scale(s, 0.5)
}

/// LSGAN generator loss `½E[(D(fake)−1)²]`.
pub fn gen_loss_graph(g: &mut Graph, fake: Var) -> Var {
    let f = g.add_scalar(fake, -1.0);
    let f = g.square(f);
    let f = g.mean_all(f);
    g.scale(f, 0.5)
}

/// `(gen_loss, disc_loss)` from discriminator scores.
pub fn adversarial_losses(real: &Tensor, fake: &Tensor) -> (f64, f64) {
    let mut g = Graph::detached();
    let r = g.constant(real.clone());
    let f = g.constant(fake.clone());
    let gl = gen_loss_graph(&mut g, f);
    let dl = disc_loss_graph(&mut g, r, f);
    (g.value(gl).item(), g.value(dl).item())
}
