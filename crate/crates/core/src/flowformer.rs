//! Vector-field transformer for rectified flow matching over codec latents,
//! with an F0 head, classifier-free guidance and an Euler sampler.

use cantus_grad::{Graph, ParamId, ParamStore, Tensor, Var};

use crate::config::{Config, MoeConfig};
use crate::cusmoe::{gumbel_noise, ExpertGroup, GroupKind, RouteMode, RouterInput, RoutingDecision};
use crate::error::{Error, Result};
use crate::nn::{Attention, Linear};
use crate::rng::Rng;
use crate::score::{F0Track, MusicScore, Technique, DOWNSAMPLE, FRAME_RATE};

pub const NORM_EPS: f64 = 1e-6;
const ROPE_BASE: f64 = 10_000.0;
/// Log-F0 head outputs are offsets from `ln(LOG_F0_CENTER)`.
const LOG_F0_CENTER: f64 = 220.0;

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!(
            "{what}: shape {:?} differs from {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `(1 − t)·x0 + t·x1`.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f64) -> Result<Tensor> {
    same_shape(x0, x1, "interpolate")?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::contract(format!("flow time {t} outside [0, 1]")));
    }
    Ok(x0.zip_map(x1, |a, b| (1.0 - t) * a + t * b))
}

/// `x1 − x0`.
pub fn flow_target(x0: &Tensor, x1: &Tensor) -> Result<Tensor> {
    same_shape(x0, x1, "flow_target")?;
    Ok(x1.zip_map(x0, |a, b| a - b))
}

pub fn flow_loss(v: &Tensor, x0: &Tensor, x1: &Tensor) -> Result<f64> {
    let u = flow_target(x0, x1)?;
    same_shape(v, &u, "flow_loss")?;
    Ok(v.zip_map(&u, |a, b| (a - b) * (a - b)).mean())
}

pub fn flow_loss_graph(g: &mut Graph, v: Var, x0: &Tensor, x1: &Tensor) -> Result<Var> {
    let u = flow_target(x0, x1)?;
    same_shape(g.value(v), &u, "flow_loss")?;
    let u = g.constant(u);
    Ok(g.mse(v, u))
}

fn f0_targets(f0: &F0Track) -> (Vec<f64>, Vec<f64>) {
    let log = f0
        .f0_hz()
        .iter()
        .zip(f0.voiced())
        .map(|(hz, v)| if *v { hz.ln() } else { 0.0 })
        .collect();
    let y = f0.voiced().iter().map(|v| if *v { 1.0 } else { 0.0 }).collect();
    (log, y)
}

/// Log-F0 MSE over voiced frames plus mean voicing cross-entropy over all
/// frames. `log_f0` is in natural-log Hz; `logits` are voicing logits.
pub fn f0_loss(log_f0: &[f64], logits: &[f64], gt: &F0Track) -> Result<f64> {
    if log_f0.len() != gt.len() || logits.len() != gt.len() {
        return Err(Error::contract(format!(
            "F0 head covers {} frames, target has {}",
            log_f0.len(),
            gt.len()
        )));
    }
    let (target, y) = f0_targets(gt);
    let voiced = gt.voiced().iter().filter(|v| **v).count();
    let pitch = if voiced == 0 {
        0.0
    } else {
        log_f0
            .iter()
            .zip(&target)
            .zip(gt.voiced())
            .filter(|(_, v)| **v)
            .map(|((p, t), _)| (p - t) * (p - t))
            .sum::<f64>()
            / voiced as f64
    };
    let bce = logits
        .iter()
        .zip(&y)
        .map(|(z, y)| cantus_grad::softplus(*z) - y * z)
        .sum::<f64>()
        / gt.len().max(1) as f64;
    Ok(pitch + bce)
}

/// Graph form of [`f0_loss`] over an F0 head node (`T × 2`: log-F0 offset,
/// voicing logit).
pub fn f0_loss_graph(g: &mut Graph, head: Var, gt: &F0Track) -> Result<Var> {
    let (t, c) = g.shape(head);
    if t != gt.len() || c != 2 {
        return Err(Error::contract(format!("F0 head is {t}×{c}, target has {} frames", gt.len())));
    }
    let (target, y) = f0_targets(gt);
    let voiced: Vec<f64> = y.clone();
    let n_voiced = voiced.iter().sum::<f64>();
    let logf0 = head_log_f0(g, head);
    let target = g.constant(Tensor::column(&target));
    let d = g.sub(logf0, target);
    let d = g.square(d);
    let m = g.constant(Tensor::column(&voiced));
    let d = g.mul(d, m);
    let pitch = g.sum_all(d);
    let pitch = g.scale(pitch, if n_voiced > 0.0 { 1.0 / n_voiced } else { 0.0 });
    let z = g.slice_cols(head, 1, 1);
    let sp = g.softplus(z);
    let yv = g.constant(Tensor::column(&y));
    let yz = g.mul(yv, z);
    let b = g.sub(sp, yz);
    let bce = g.mean_all(b);
    Ok(g.add(pitch, bce))
}

fn head_log_f0(g: &mut Graph, head: Var) -> Var {
    let off = g.slice_cols(head, 0, 1);
    g.add_scalar(off, LOG_F0_CENTER.ln())
}

/// Onset-phase frequencies (Hz) of the within-unit timing features.
pub const CUE_HZ: [f64; 3] = [4.0, 5.5, 7.0];
pub const N_CUE_FEATURES: usize = 2 * CUE_HZ.len();

/// Score-derived per-frame side information.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameCues {
    /// Log ratio of the active note to the F0 centre; zero on rests. Added to
    /// the F0 head's log-F0 column so the head learns deviations from the
    /// written pitch.
    pub log_f0: Vec<f64>,
    /// `frames × N_CUE_FEATURES`: sine and cosine of the time since the unit
    /// onset at each cue frequency on units labeled vibrato, zero elsewhere.
    /// Fed to the content projection.
    pub phase: Tensor,
}

impl FrameCues {
    pub fn from_score(score: &MusicScore) -> Self {
        let secs_per_frame = DOWNSAMPLE as f64 / FRAME_RATE;
        let mut log_f0 = Vec::with_capacity(score.total_frames());
        let mut phase = Vec::with_capacity(score.total_frames() * N_CUE_FEATURES);
        let techniques = &score.labels().techniques;
        for (i, u) in score.units().iter().enumerate() {
            let v = u.note.hz().map_or(0.0, |hz| (hz / LOG_F0_CENTER).ln());
            let gate = if techniques.get(i) == Some(&Technique::Vibrato) { 1.0 } else { 0.0 };
            for k in 0..u.duration_frames as usize {
                log_f0.push(v);
                let tau = (k as f64 + 0.5) * secs_per_frame;
                for hz in CUE_HZ {
                    let a = std::f64::consts::TAU * hz * tau;
                    phase.extend([gate * a.sin(), gate * a.cos()]);
                }
            }
        }
        let frames = log_f0.len();
        Self {
            log_f0,
            phase: Tensor::from_vec(frames, N_CUE_FEATURES, phase),
        }
    }

    pub fn len(&self) -> usize {
        self.log_f0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_f0.is_empty()
    }
}

/// Voicing and frequency read from F0 head values.
pub fn head_to_track(head: &Tensor) -> F0Track {
    let hz = (0..head.rows())
        .map(|r| {
            if head.get(r, 1) > 0.0 {
                (head.get(r, 0) + LOG_F0_CENTER.ln()).exp()
            } else {
                0.0
            }
        })
        .collect();
    F0Track::from_hz(hz)
}

/// `v_u + γ·(v_c − v_u)`, returning `v_c` itself at `γ = 1`.
pub fn cfg_field(v_cond: &Tensor, v_uncond: &Tensor, gamma: f64) -> Result<Tensor> {
    same_shape(v_cond, v_uncond, "cfg_field")?;
    if gamma == 1.0 {
        return Ok(v_cond.clone());
    }
    Ok(v_uncond.zip_map(v_cond, |u, c| u + gamma * (c - u)))
}

/// Euler integration of `dx/dt = field(x, t)` on a uniform grid from
/// `t = 0` to `t = 1`.
pub fn euler_sample<F>(mut field: F, x0: &Tensor, n_steps: usize) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64, usize) -> Result<Tensor>,
{
    if n_steps == 0 {
        return Err(Error::contract("the sampler needs at least one step"));
    }
    let dt = 1.0 / n_steps as f64;
    let mut x = x0.clone();
    for k in 0..n_steps {
        let t = k as f64 * dt;
        let v = field(&x, t, k)?;
        same_shape(&v, &x, "field output")?;
        for (xi, vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi += dt * vi;
        }
        if !x.is_finite() {
            return Err(Error::Divergence { step: k });
        }
    }
    Ok(x)
}

/// Guided Euler sampling: `field(x, t, conditional)` evaluates the model
/// with or without the prompt. The unconditional pass is skipped at `γ = 1`.
pub fn euler_sample_cfg<F>(mut field: F, x0: &Tensor, n_steps: usize, gamma: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64, bool) -> Result<Tensor>,
{
    euler_sample(
        |x, t, _| {
            let vc = field(x, t, true)?;
            if gamma == 1.0 {
                return Ok(vc);
            }
            let vu = field(x, t, false)?;
            cfg_field(&vc, &vu, gamma)
        },
        x0,
        n_steps,
    )
}

/// `x / rms(x) · gain`, rows independently.
pub fn rmsnorm(x: &Tensor, gain: &[f64]) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_slice_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (ms + NORM_EPS).sqrt();
        for (v, g) in row.iter_mut().zip(gain) {
            *v *= inv * g;
        }
    }
    out
}

/// RoPE angle tables `(cos, sin)`, `positions × (head_dim / 2)`. Rows with
/// `rotate[i] == false` get the identity rotation.
pub fn rope_tables(positions: &[f64], rotate: &[bool], head_dim: usize) -> (Tensor, Tensor) {
    let half = head_dim / 2;
    let mut cos = Tensor::zeros(positions.len(), half);
    let mut sin = Tensor::zeros(positions.len(), half);
    for (r, (p, on)) in positions.iter().zip(rotate).enumerate() {
        for i in 0..half {
            let theta = if *on { p * ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64) } else { 0.0 };
            cos.set(r, i, theta.cos());
            sin.set(r, i, theta.sin());
        }
    }
    (cos, sin)
}

/// Rotates every head of `x` (`rows × d`) by its row's position.
pub fn rope_apply(x: &Tensor, positions: &[f64], n_heads: usize) -> Tensor {
    let (cos, sin) = rope_tables(positions, &vec![true; positions.len()], x.cols() / n_heads);
    cantus_grad::rotate_pairs(x, &cos, &sin, n_heads, false)
}

/// Sinusoidal features of `t` scaled to the training grid, width `d`.
fn time_features(t: f64, d: usize, scale: f64) -> Tensor {
    let half = d / 2;
    let mut row = vec![0.0; d];
    for i in 0..half {
        let freq = (-(ROPE_BASE.ln()) * i as f64 / half as f64).exp();
        row[i] = (t * scale * freq).sin();
        row[half + i] = (t * scale * freq).cos();
    }
    Tensor::row(&row)
}

/// `γ(c)·LayerNorm(h) + β(c)` with the `γ` head initialized to zero.
#[derive(Clone, Debug)]
pub struct AdaLn {
    pub gamma: Linear,
    pub beta: Linear,
}

impl AdaLn {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut Rng) -> Self {
        Self {
            gamma: Linear::zeros(store, &format!("{name}.gamma"), d, d),
            beta: Linear::new(store, &format!("{name}.beta"), d, d, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, h: Var, c: Var) -> Var {
        let n = g.layer_norm_rows(h, NORM_EPS);
        let gam = self.gamma.forward(g, c);
        let bet = self.beta.forward(g, c);
        let y = g.mul_row(n, gam);
        g.add_row(y, bet)
    }
}

#[derive(Clone, Debug)]
pub struct Block {
    pub norm: ParamId,
    pub attn: Attention,
    pub ada_ling: AdaLn,
    pub lingual: ExpertGroup,
    pub ada_sty: AdaLn,
    pub stylistic: ExpertGroup,
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, cfg: &Config, rng: &mut Rng) -> Self {
        let d = cfg.flow.d_model;
        Self {
            norm: store.add(format!("{name}.norm"), Tensor::filled(1, d, 1.0)),
            attn: Attention::new(store, &format!("{name}.attn"), d, cfg.flow.n_heads, rng),
            ada_ling: AdaLn::new(store, &format!("{name}.ada_ling"), d, rng),
            lingual: ExpertGroup::new(store, &format!("{name}.ling"), GroupKind::Lingual, d, &cfg.moe, rng),
            ada_sty: AdaLn::new(store, &format!("{name}.ada_sty"), d, rng),
            stylistic: ExpertGroup::new(store, &format!("{name}.sty"), GroupKind::Stylistic, d, &cfg.moe, rng),
        }
    }
}

/// Router temperature, mode and noise source for one forward pass.
pub struct Routing<'r> {
    pub tau: f64,
    pub mode: RouteMode,
    /// Gumbel noise source; `None` gives a noiseless soft mixture in train
    /// mode.
    pub noise: Option<&'r mut Rng>,
    pub alpha: f64,
}

impl Routing<'_> {
    pub fn infer(cfg: &MoeConfig) -> Routing<'static> {
        Routing {
            tau: cfg.tau_end,
            mode: RouteMode::Infer,
            noise: None,
            alpha: cfg.alpha,
        }
    }
}

pub struct FieldOutput {
    /// Field over content positions, `T × C`.
    pub v: Var,
    /// F0 head over content positions, `T × 2`.
    pub f0: Var,
    /// Sum of the balance losses of every expert group.
    pub balance: Var,
    pub decisions: Vec<RoutingDecision>,
}

#[derive(Clone, Debug)]
pub struct FlowFormer {
    pub prompt_in: Linear,
    pub null_prompt: ParamId,
    pub content_in: Linear,
    pub time0: Linear,
    pub time1: Linear,
    pub blocks: Vec<Block>,
    pub f0_head: Linear,
    pub f0_embed: Linear,
    pub final_norm: ParamId,
    pub out: Linear,
    pub d_model: usize,
    pub n_heads: usize,
    pub latent_channels: usize,
    pub rope_on_prompt: bool,
    pub time_scale: f64,
}

impl FlowFormer {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &Config, rng: &mut Rng) -> Self {
        let d = cfg.flow.d_model;
        let c = cfg.codec.latent_channels;
        let blocks = (0..cfg.flow.n_blocks)
            .map(|i| Block::new(store, &format!("{prefix}.block{i}"), cfg, rng))
            .collect();
        Self {
            prompt_in: Linear::new(store, &format!("{prefix}.prompt_in"), d, d, rng),
            null_prompt: store.add(
                format!("{prefix}.null_prompt"),
                crate::nn::normal(rng, 1, d, 1.0 / (d as f64).sqrt()),
            ),
            content_in: Linear::new(store, &format!("{prefix}.content_in"), c + d + N_CUE_FEATURES, d, rng),
            time0: Linear::new(store, &format!("{prefix}.time0"), d, d, rng),
            time1: Linear::new(store, &format!("{prefix}.time1"), d, d, rng),
            blocks,
            f0_head: Linear::new(store, &format!("{prefix}.f0_head"), d, 2, rng),
            f0_embed: Linear::new(store, &format!("{prefix}.f0_embed"), 2, d, rng),
            final_norm: store.add(format!("{prefix}.final_norm"), Tensor::filled(1, d, 1.0)),
            out: Linear::zeros(store, &format!("{prefix}.out"), d, c),
            d_model: d,
            n_heads: cfg.flow.n_heads,
            latent_channels: c,
            rope_on_prompt: cfg.flow.rope_on_prompt,
            time_scale: cfg.flow.train_timesteps as f64,
        }
    }

    /// Evaluates the field on content frames. `prompt` is `P × d`; `None`
    /// selects the learned null prompt.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        x_t: Var,
        t: f64,
        z_c: Var,
        cues: Option<&FrameCues>,
        prompt: Option<Var>,
        language: usize,
        routing: &mut Routing<'_>,
    ) -> Result<FieldOutput> {
        let (frames, c) = g.shape(x_t);
        let (zf, zd) = g.shape(z_c);
        if c != self.latent_channels || zf != frames || zd != self.d_model {
            return Err(Error::contract(format!(
                "field input {frames}×{c} with content {zf}×{zd} does not match the model"
            )));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::contract(format!("flow time {t} outside [0, 1]")));
        }
        if let Some(c) = cues {
            if c.len() != frames || c.phase.shape() != (frames, N_CUE_FEATURES) {
                return Err(Error::contract(format!("frame cues cover {} of {frames} frames", c.len())));
            }
        }
        let p = match prompt {
            Some(p) => {
                if g.shape(p).1 != self.d_model || g.shape(p).0 == 0 {
                    return Err(Error::contract("prompt width differs from d_model"));
                }
                self.prompt_in.forward(g, p)
            }
            None => g.param(self.null_prompt),
        };
        let plen = g.shape(p).0;
        let phase = g.constant(match cues {
            Some(c) => c.phase.clone(),
            None => Tensor::zeros(frames, N_CUE_FEATURES),
        });
        let xc = g.concat_cols(&[x_t, z_c, phase]);
        let content = self.content_in.forward(g, xc);

        let tf = g.constant(time_features(t, self.d_model, self.time_scale));
        let zt = self.time0.forward(g, tf);
        let zt = g.silu(zt);
        let zt = self.time1.forward(g, zt);
        let zp = g.mean_rows(p);
        let z_g = g.add(zp, zt);

        let positions: Vec<f64> = (0..plen)
            .map(|i| i as f64 - plen as f64)
            .chain((0..frames).map(|i| i as f64))
            .collect();
        let rotate: Vec<bool> = (0..plen + frames).map(|i| i >= plen || self.rope_on_prompt).collect();
        let (cos, sin) = rope_tables(&positions, &rotate, self.d_model / self.n_heads);
        let rot = crate::nn::Rotation {
            cos_q: cos.clone(),
            sin_q: sin.clone(),
            cos_k: cos,
            sin_k: sin,
        };

        let mut h = g.concat_rows(&[p, content]);
        let mut balance = None;
        let mut decisions = Vec::with_capacity(2 * self.blocks.len());
        let mut f0 = None;
        let n = plen + frames;
        for (b, block) in self.blocks.iter().enumerate() {
            let gain = g.param(block.norm);
            let x = g.rms_norm_rows(h, NORM_EPS);
            let x = g.mul_row(x, gain);
            let a = block.attn.forward(g, x, x, Some(&rot));
            h = g.add(h, a);
            for (ada, group, input) in [
                (&block.ada_ling, &block.lingual, RouterInput::Language(language)),
                (&block.ada_sty, &block.stylistic, RouterInput::Global(z_g)),
            ] {
                let u = ada.forward(g, h, z_g);
                let noise = match (routing.mode, routing.noise.as_deref_mut()) {
                    (RouteMode::Train, Some(r)) => Some(gumbel_noise(r, n, group.n_experts())),
                    _ => None,
                };
                let o = group.forward(g, u, input, routing.tau, routing.mode, noise.as_ref(), routing.alpha)?;
                h = g.add(h, o.out);
                balance = Some(match balance {
                    None => o.balance,
                    Some(acc) => g.add(acc, o.balance),
                });
                decisions.push(o.decision);
            }
            if b == 0 {
                let hc = g.slice_rows(h, plen, frames);
                let mut head = self.f0_head.forward(g, hc);
                if let Some(c) = cues {
                    let base: Vec<f64> = c.log_f0.iter().flat_map(|v| [*v, 0.0]).collect();
                    let base = g.constant(Tensor::from_vec(frames, 2, base));
                    head = g.add(head, base);
                }
                f0 = Some(head);
                if self.blocks.len() > 1 {
                    let e = self.f0_embed.forward(g, head);
                    let zeros = g.constant(Tensor::zeros(plen, self.d_model));
                    let e = g.concat_rows(&[zeros, e]);
                    h = g.add(h, e);
                }
            }
        }
        let hc = g.slice_rows(h, plen, frames);
        let gain = g.param(self.final_norm);
        let y = g.rms_norm_rows(hc, NORM_EPS);
        let y = g.mul_row(y, gain);
        let v = self.out.forward(g, y);
        let (f0, balance) = match (f0, balance) {
            (Some(f), Some(b)) => (f, b),
            _ => return Err(Error::contract("the field model needs at least one block")),
        };
        Ok(FieldOutput {
            v,
            f0,
            balance,
            decisions,
        })
    }

    /// Inference-mode field and F0 head values.
    pub fn estimate_field(
        &self,
        store: &ParamStore,
        x_t: &Tensor,
        t: f64,
        z_c: &Tensor,
        cues: Option<&FrameCues>,
        prompt: Option<&Tensor>,
        language: usize,
        moe: &MoeConfig,
    ) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new(store);
        let x = g.constant(x_t.clone());
        let z = g.constant(z_c.clone());
        let p = prompt.map(|p| g.constant(p.clone()));
        let o = self.forward(&mut g, x, t, z, cues, p, language, &mut Routing::infer(moe))?;
        Ok((g.value(o.v).clone(), g.value(o.f0).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::normal;
    use crate::rng::rng;
    use crate::train::gradcheck;

    fn t(rows: usize, cols: usize, seed: u64) -> Tensor {
        normal(&mut rng(seed, 0), rows, cols, 1.0)
    }

    #[test]
    fn interpolation_endpoints_and_target() {
        let (a, b) = (t(3, 4, 1), t(3, 4, 2));
        assert_eq!(interpolate(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate(&a, &b, 1.0).unwrap(), b);
        let z = interpolate(&Tensor::zeros(1, 1), &Tensor::filled(1, 1, 2.0), 0.25).unwrap();
        assert_eq!(z.item(), 0.5);
        let u = flow_target(&a, &b).unwrap();
        let w = flow_target(&b, &a).unwrap();
        assert!(u.zip_map(&w, |x, y| x + y).data().iter().all(|v| *v == 0.0));
        assert!(flow_target(&Tensor::filled(1, 1, 1.0), &Tensor::filled(1, 1, 3.0)).unwrap().item() == 2.0);
        assert!(interpolate(&a, &t(2, 4, 3), 0.5).is_err());
        assert!(interpolate(&a, &b, 1.5).is_err());
    }

    #[test]
    fn flow_loss_values() {
        let (a, b) = (t(3, 4, 1), t(3, 4, 2));
        assert_eq!(flow_loss(&flow_target(&a, &b).unwrap(), &a, &b).unwrap(), 0.0);
        let x0 = Tensor::zeros(3, 4);
        let x1 = Tensor::filled(3, 4, 2.0);
        assert_eq!(flow_loss(&Tensor::zeros(3, 4), &x0, &x1).unwrap(), 4.0);
    }

    #[test]
    fn flow_loss_gradient() {
        let mut store = ParamStore::new();
        let v = store.add("v", t(3, 4, 5));
        let (x0, x1) = (t(3, 4, 6), t(3, 4, 7));
        let err = gradcheck(
            |g| {
                let v = g.param(v);
                flow_loss_graph(g, v, &x0, &x1).unwrap()
            },
            &store,
            12,
            0,
        );
        assert!(err < 1e-4, "{err}");
    }

    fn track() -> F0Track {
        F0Track::new(vec![200.0, 210.0, 0.0, 190.0], vec![true, true, false, true]).unwrap()
    }

    #[test]
    fn f0_loss_values() {
        let gt = track();
        let logf0: Vec<f64> = gt.f0_hz().iter().map(|h| if *h > 0.0 { h.ln() } else { 0.0 }).collect();
        let sure = [40.0, 40.0, -40.0, 40.0];
        assert!(f0_loss(&logf0, &sure, &gt).unwrap() < 1e-15);
        let off: Vec<f64> = logf0.iter().map(|v| v + 0.1).collect();
        let bce = f0_loss(&logf0, &sure, &gt).unwrap();
        assert!((f0_loss(&off, &sure, &gt).unwrap() - bce - 0.01).abs() < 1e-12);
        let silent = F0Track::new(vec![0.0; 3], vec![false; 3]).unwrap();
        let l = f0_loss(&[5.0; 3], &[0.0; 3], &silent).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert!(f0_loss(&[0.0], &[0.0], &gt).is_err());
    }

    #[test]
    fn f0_graph_matches_and_differentiates() {
        let gt = track();
        let mut store = ParamStore::new();
        let h = store.add("h", t(4, 2, 9));
        let mut g = Graph::new(&store);
        let v = g.param(h);
        let l = f0_loss_graph(&mut g, v, &gt).unwrap();
        let head = store.get(h);
        let logf0: Vec<f64> = (0..4).map(|r| head.get(r, 0) + LOG_F0_CENTER.ln()).collect();
        let logits: Vec<f64> = (0..4).map(|r| head.get(r, 1)).collect();
        assert!((g.value(l).item() - f0_loss(&logf0, &logits, &gt).unwrap()).abs() < 1e-12);
        let err = gradcheck(
            |g| {
                let v = g.param(h);
                f0_loss_graph(g, v, &gt).unwrap()
            },
            &store,
            8,
            1,
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn cfg_identities() {
        let (c, u) = (t(3, 4, 1), t(3, 4, 2));
        assert_eq!(cfg_field(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_field(&c, &c, 3.0).unwrap(), c);
        let v = cfg_field(&Tensor::filled(1, 1, 2.0), &Tensor::filled(1, 1, 1.0), 3.0).unwrap();
        assert_eq!(v.item(), 4.0);
    }

    #[test]
    fn euler_basics() {
        let x0 = t(3, 4, 3);
        let out = euler_sample(|x, _, _| Ok(Tensor::zeros(x.rows(), x.cols())), &x0, 7).unwrap();
        assert_eq!(out, x0);
        let c = t(3, 4, 4);
        let out = euler_sample(|_, _, _| Ok(c.clone()), &x0, 8).unwrap();
        assert!(out.max_abs_diff(&x0.zip_map(&c, |a, b| a + b)) < 1e-12);
        assert!(euler_sample(|x, _, _| Ok(x.clone()), &x0, 0).is_err());
        let err = euler_sample(|x, _, _| Ok(x.map(|_| f64::INFINITY)), &x0, 3).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 0 }));
    }

    #[test]
    fn euler_reaches_the_point_mass() {
        let x1 = t(3, 4, 8);
        for n in [1, 5, 25] {
            for s in 0..5 {
                let x0 = t(3, 4, 100 + s);
                let out = euler_sample(
                    |x, tt, _| Ok(x1.zip_map(x, |a, b| (a - b) / (1.0 - tt))),
                    &x0,
                    n,
                )
                .unwrap();
                assert!(out.max_abs_diff(&x1) < 1e-6);
            }
        }
    }

    #[test]
    fn rmsnorm_and_rope() {
        let x = Tensor::row(&[1.0, -1.0, 1.0, -1.0]);
        let y = rmsnorm(&x, &[1.0; 4]);
        assert!(y.max_abs_diff(&x) < 1e-6);
        let q = t(1, 8, 1);
        let k = t(1, 8, 2);
        let dot = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
        for s in [1.0, 5.0, -3.0, 17.0] {
            let a = dot(&rope_apply(&q, &[2.0], 2), &rope_apply(&k, &[7.0], 2));
            let b = dot(&rope_apply(&q, &[2.0 + s], 2), &rope_apply(&k, &[7.0 + s], 2));
            assert!((a - b).abs() < 1e-6);
        }
        let r = rope_apply(&q, &[3.0], 2);
        assert!((r.sum_squares() - q.sum_squares()).abs() < 1e-9);
    }

    fn tiny_cfg() -> Config {
        let mut cfg = Config::default();
        cfg.flow.d_model = 8;
        cfg.flow.n_heads = 2;
        cfg.codec.latent_channels = 3;
        cfg.moe.n_experts = 2;
        cfg.moe.expansion = 2;
        cfg
    }

    fn model(cfg: &Config) -> (ParamStore, FlowFormer) {
        let mut store = ParamStore::new();
        let m = FlowFormer::new(&mut store, "flow", cfg, &mut rng(3, 0));
        (store, m)
    }

    #[test]
    fn adaln_starts_at_beta() {
        let mut store = ParamStore::new();
        let a = AdaLn::new(&mut store, "a", 4, &mut rng(0, 0));
        let mut g = Graph::new(&store);
        let c = g.constant(t(1, 4, 1));
        let h1 = g.constant(t(3, 4, 2));
        let h2 = g.constant(t(3, 4, 3));
        let y1 = a.forward(&mut g, h1, c);
        let y2 = a.forward(&mut g, h2, c);
        assert_eq!(g.value(y1), g.value(y2));
        let b = a.beta.forward(&mut g, c);
        assert_eq!(g.value(y1).row_slice(0), g.value(b).row_slice(0));
    }

    #[test]
    fn field_shapes_and_zero_output() {
        let cfg = tiny_cfg();
        let (store, m) = model(&cfg);
        let (v, f0) = m
            .estimate_field(&store, &t(5, 3, 1), 0.3, &t(5, 8, 2), None, Some(&t(4, 8, 3)), 1, &cfg.moe)
            .unwrap();
        assert_eq!(v.shape(), (5, 3));
        assert_eq!(f0.shape(), (5, 2));
        assert!(v.data().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn null_prompt_ignores_prompt_content() {
        let cfg = tiny_cfg();
        let (mut store, m) = model(&cfg);
        let mut r = rng(5, 0);
        let w = store.get(m.out.w).shape();
        *store.get_mut(m.out.w) = normal(&mut r, w.0, w.1, 0.5);
        let a = m.estimate_field(&store, &t(5, 3, 1), 0.3, &t(5, 8, 2), None, None, 0, &cfg.moe).unwrap();
        let b = m.estimate_field(&store, &t(5, 3, 1), 0.3, &t(5, 8, 2), None, None, 0, &cfg.moe).unwrap();
        assert_eq!(a.0, b.0);
        let c = m
            .estimate_field(&store, &t(5, 3, 1), 0.3, &t(5, 8, 2), None, Some(&t(2, 8, 4)), 0, &cfg.moe)
            .unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn prompt_order_matters_only_with_rope() {
        for rope in [false, true] {
            let mut cfg = tiny_cfg();
            cfg.flow.rope_on_prompt = rope;
            let (mut store, m) = model(&cfg);
            let w = store.get(m.out.w).shape();
            *store.get_mut(m.out.w) = normal(&mut rng(6, 0), w.0, w.1, 0.5);
            let p = t(3, 8, 4);
            let mut q = p.clone();
            let (r0, r2) = (p.row_slice(0).to_vec(), p.row_slice(2).to_vec());
            q.row_slice_mut(0).copy_from_slice(&r2);
            q.row_slice_mut(2).copy_from_slice(&r0);
            let (x, z) = (t(4, 3, 1), t(4, 8, 2));
            let a = m.estimate_field(&store, &x, 0.5, &z, None, Some(&p), 2, &cfg.moe).unwrap().0;
            let b = m.estimate_field(&store, &x, 0.5, &z, None, Some(&q), 2, &cfg.moe).unwrap().0;
            let diff = a.max_abs_diff(&b);
            if rope {
                assert!(diff > 1e-6, "{diff}");
            } else {
                assert!(diff < 1e-10, "{diff}");
            }
        }
    }

    #[test]
    fn end_to_end_gradient() {
        let cfg = tiny_cfg();
        let (mut store, m) = model(&cfg);
        let w = store.get(m.out.w).shape();
        *store.get_mut(m.out.w) = normal(&mut rng(7, 0), w.0, w.1, 0.3);
        for blk in &m.blocks {
            for a in [&blk.ada_ling, &blk.ada_sty] {
                let s = store.get(a.gamma.w).shape();
                *store.get_mut(a.gamma.w) = normal(&mut rng(8, 0), s.0, s.1, 0.3);
            }
        }
        let (x0, x1, z, p) = (t(4, 3, 1), t(4, 3, 2), t(4, 8, 3), t(3, 8, 4));
        let gt = F0Track::new(vec![200.0, 0.0, 180.0, 190.0], vec![true, false, true, true]).unwrap();
        let err = gradcheck(
            |g| {
                let xt = g.constant(interpolate(&x0, &x1, 0.4).unwrap());
                let zc = g.constant(z.clone());
                let pp = g.constant(p.clone());
                let mut noise = rng(11, 0);
                let mut routing = Routing {
                    tau: 1.2,
                    mode: RouteMode::Train,
                    noise: Some(&mut noise),
                    alpha: 0.1,
                };
                let o = m.forward(g, xt, 0.4, zc, None, Some(pp), 1, &mut routing).unwrap();
                let fl = flow_loss_graph(g, o.v, &x0, &x1).unwrap();
                let pl = f0_loss_graph(g, o.f0, &gt).unwrap();
                let s = g.add(fl, pl);
                g.add(s, o.balance)
            },
            &store,
            80,
            2,
        );
        assert!(err < 1e-4, "{err}");
    }
}
