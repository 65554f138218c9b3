//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Trains the codec and SVS model at desk scale, so expect tens of
//! minutes on one core.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use cantus_core::bbc::blur_mask_with_offsets;
use cantus_core::cusmoe::{balance_loss, route_logits, ExpertGroup, GroupKind, RouteMode, RouterInput};
use cantus_core::eval::{codec_alignment, eval_pairs, evaluate_task, plot_mel_f0, vibrato_contrast, Generator};
use cantus_core::flowformer::{euler_sample, euler_sample_cfg};
use cantus_core::score::{gen_corpus, parse_score, serialize_score, Corpus, LabelToken, Technique};
use cantus_core::synth::{synthesize, synthesize_with_prompt, Prompt, SynthOptions, TaskKind};
use cantus_core::train::gradcheck::suite;
use cantus_core::train::svs_stage::SvsModel;
use cantus_core::train::{ArchiveTensor, CodecCheckpoint, CodecTrainer, SvsCheckpoint, SvsTrainer, TensorArchive};
use cantus_core::{rng, Config};
use cantus_grad::{Graph, ParamStore, Tensor};
use rand::Rng as _;

const SEED: u64 = 0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn normal_tensor(r: &mut rng::Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, r))
        .collect();
    Tensor::from_vec(rows, cols, data)
}

fn gradient_suite() -> Outcome {
    let cfg = Config::default();
    let start = Instant::now();
    let mut store = ParamStore::new();
    let model = SvsModel::new(&mut store, &cfg, &mut rng::rng(SEED, rng::stream::SVS_INIT));
    let entries = match suite(&cfg, &model, &store, 40, SEED) {
        Ok(e) => e,
        Err(e) => return outcome(false, format!("suite error: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let worst = entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
    let list: Vec<String> = entries.iter().map(|e| format!("{}={:.1e}", e.loss, e.max_rel_error)).collect();
    outcome(
        worst < 1e-4 && secs < 60.0 && entries.len() == 7,
        format!("{} n_blocks={} in {secs:.1}s", list.join(" "), cfg.flow.n_blocks),
    )
}

fn flow_oracle() -> Outcome {
    let mut r = rng::rng(SEED, rng::stream::EVAL);
    let mut worst = 0.0f64;
    for n in [1, 5, 25] {
        for _ in 0..20 {
            let x0 = normal_tensor(&mut r, 6, 4);
            let x1 = normal_tensor(&mut r, 6, 4);
            let field = |x: &Tensor, t: f64, _: usize| Ok(x1.zip_map(x, |a, b| (a - b) / (1.0 - t)));
            match euler_sample(field, &x0, n) {
                Ok(x) => worst = worst.max(x.max_abs_diff(&x1)),
                Err(e) => return outcome(false, format!("n_steps={n}: {e}")),
            }
        }
    }
    outcome(worst < 1e-6, format!("max |x - x1| = {worst:.2e} over n_steps 1/5/25 x 20"))
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn cfg_identity(ck: &SvsCheckpoint, corpus: &Corpus) -> Outcome {
    let mut r = rng::rng(SEED, rng::stream::EVAL);
    let x0 = normal_tensor(&mut r, 7, 3);
    let w = normal_tensor(&mut r, 3, 3);
    let cond = |x: &Tensor, t: f64| x.matmul(&w).map(|v| (v * (1.0 + t)).tanh());
    let unguided = euler_sample(|x, t, _| Ok(cond(x, t)), &x0, 25).unwrap();
    let g1 = euler_sample_cfg(|x, t, c| Ok(if c { cond(x, t) } else { x.map(|v| -v) }), &x0, 25, 1.0).unwrap();
    let g3 = euler_sample_cfg(|x, t, _| Ok(cond(x, t)), &x0, 25, 3.0).unwrap();
    let analytic = bits(&g1) == bits(&unguided) && bits(&g3) == bits(&unguided);

    // Without a prompt both passes see the null prompt.
    let score = &corpus.samples[corpus.samples.len() - 1].score;
    let opts = |cfg_scale| SynthOptions {
        steps: 5,
        cfg_scale,
        seed: 3,
    };
    let a = synthesize_with_prompt(ck, score, None, &opts(1.0)).unwrap();
    let b = synthesize_with_prompt(ck, score, None, &opts(3.0)).unwrap();
    let model = bits(&a.latent) == bits(&b.latent);
    outcome(analytic && model, format!("analytic field identical={analytic}, model null-prompt identical={model}"))
}

fn moe_suite(ck: &SvsCheckpoint, corpus: &Corpus) -> Outcome {
    let mut r = rng::rng(SEED, rng::stream::EVAL);
    let logits = normal_tensor(&mut r, 64, 4);
    let soft = route_logits(&logits, 1.0, RouteMode::Train, None).unwrap();
    let sum_err = (0..64)
        .map(|i| (soft.scores.row_slice(i).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    let sharp = route_logits(&logits, 1e-3, RouteMode::Train, None).unwrap();
    let min_max = (0..64)
        .map(|i| sharp.scores.row_slice(i).iter().copied().fold(0.0, f64::max))
        .fold(1.0, f64::min);

    let mut store = ParamStore::new();
    let grp = ExpertGroup::new(&mut store, "g", GroupKind::Lingual, 8, &ck.cfg.moe, &mut r);
    let h = normal_tensor(&mut r, 10, 8);
    let run = || {
        let mut g = Graph::new(&store);
        let hv = g.constant(h.clone());
        let o = grp.forward(&mut g, hv, RouterInput::Language(1), 1e-3, RouteMode::Infer, None, 0.1).unwrap();
        (o.decision.selected.clone(), bits(g.value(o.out)))
    };
    let group_det = run() == run();
    let score = &corpus.samples[corpus.samples.len() - 2].score;
    let prompt = Prompt::Text(LabelToken::encode(score.labels()));
    let opts = SynthOptions {
        steps: 4,
        cfg_scale: 3.0,
        seed: 1,
    };
    let s1 = synthesize(ck, TaskKind::Control, score, &prompt, &opts).unwrap();
    let s2 = synthesize(ck, TaskKind::Control, score, &prompt, &opts).unwrap();
    let synth_det = bits(&s1.latent) == bits(&s2.latent);

    let uniform = balance_loss(&[0.25; 4], &[0.25; 4], 0.1).unwrap();
    let collapse = balance_loss(&[1.0, 0.0, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0], 0.1).unwrap();
    let bal = (uniform - 0.1).abs() <= 1e-12 && (collapse - 0.4).abs() <= 1e-12;
    outcome(
        sum_err < 1e-6 && min_max > 0.999 && group_det && synth_det && bal,
        format!(
            "sum err {sum_err:.1e}, min max-score at tau 1e-3 {min_max:.6}, deterministic {}, balance {uniform} / {collapse}",
            group_det && synth_det
        ),
    )
}

/// Masked frames around boundary `b`: the masked run ending at `b` inside
/// the left unit plus the run starting at `b` inside the right unit.
fn boundary_count(mask: &[bool], left_start: usize, b: usize, right_end: usize) -> usize {
    let left = (left_start..b).rev().take_while(|i| mask[*i]).count();
    let right = (b..right_end).take_while(|i| mask[*i]).count();
    left + right
}

fn bbc_suite() -> Outcome {
    let mut r = rng::rng(SEED, rng::stream::MASK);
    let mut failures = 0;
    for case in 0..1000 {
        let n_units = r.random_range(1..12);
        // Every fourth score is all one- and two-frame units.
        let max_d = if case % 4 == 0 { 2 } else { 12 };
        let durations: Vec<usize> = (0..n_units).map(|_| r.random_range(1..=max_d)).collect();
        let m = if case % 10 == 0 { 0 } else { r.random_range(1..=6) };
        let offsets: Vec<usize> = (1..n_units).map(|_| r.random_range(0..=m)).collect();
        let mask = blur_mask_with_offsets(&durations, m, &offsets);
        let mut starts = vec![0];
        for d in &durations {
            starts.push(starts.last().unwrap() + d);
        }
        let mut ok = mask.len() == starts[n_units];
        if m == 0 {
            ok &= mask.iter().all(|x| !x);
        }
        for u in 0..n_units {
            let masked = mask[starts[u]..starts[u + 1]].iter().filter(|x| **x).count();
            ok &= masked <= durations[u] / 2;
        }
        for i in 1..n_units {
            ok &= boundary_count(&mask, starts[i - 1], starts[i], starts[i + 1]) <= m;
        }
        if !ok {
            failures += 1;
        }
    }
    outcome(failures == 0, format!("{failures} of 1000 random scores violate a mask property"))
}

fn codec_alignment_check(codec: &CodecCheckpoint, corpus: &Corpus, heldout: usize, secs: f64) -> Outcome {
    let n = corpus.samples.len();
    let batch = &corpus.samples[n - heldout..n - heldout + 16];
    match codec_alignment(batch, codec) {
        Ok(a) => outcome(
            a.retrieval_top1 >= 0.8 && a.recon_ratio < 0.1 && secs <= 900.0,
            format!(
                "retrieval {:.3} (16 pairs), recon/var {:.4}, training {secs:.0}s, corpus {n}",
                a.retrieval_top1, a.recon_ratio
            ),
        ),
        Err(e) => outcome(false, format!("{e}")),
    }
}

fn end_to_end(ck: &SvsCheckpoint, corpus: &Corpus, flow: (f64, f64), secs: f64) -> Outcome {
    let heldout = ck.cfg.train.heldout;
    let opts = SynthOptions {
        steps: ck.cfg.flow.infer_steps,
        cfg_scale: ck.cfg.flow.cfg_scale,
        seed: SEED,
    };
    let pairs = eval_pairs(corpus, TaskKind::Transfer, heldout, 40, SEED).unwrap();
    let trained = evaluate_task(ck, corpus, TaskKind::Transfer, &pairs, Generator::Model(ck, opts), SEED).unwrap();
    let blank = SvsCheckpoint::untrained(&ck.cfg, ck.codec.clone());
    let untrained = evaluate_task(&blank, corpus, TaskKind::Transfer, &pairs, Generator::Model(&blank, opts), SEED).unwrap();
    let a = flow.1 < 0.5 * flow.0;
    let b = trained.ffe < 0.5 && trained.ffe < untrained.ffe;
    let c = trained.timbre_match_rate >= 0.7;
    outcome(
        a && b && c && secs <= 1800.0,
        format!(
            "(a) flow {:.4} -> {:.4}: {}; (b) FFE {:.4} vs untrained {:.4}: {}; (c) timbre_match_rate {:.3} over {}: {}; training {secs:.0}s",
            flow.0, flow.1, a, trained.ffe, untrained.ffe, b, trained.timbre_match_rate, trained.pairs, c
        ),
    )
}

fn cantus(dir: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_cantus"))
        .args(args)
        .current_dir(dir)
        .output()
        .is_ok_and(|o| o.status.success())
}

fn pipeline(dir: &Path) -> bool {
    let cfg = "[corpus]\nn_singers = 4\nn_scores = 12\n\n[train]\nheldout = 4\ncodec_batch = 4\nsvs_batch = 2\n";
    if std::fs::write(dir.join("c.toml"), cfg).is_err() {
        return false;
    }
    let steps: [&[&str]; 4] = [
        &["gen-corpus", "--config", "c.toml", "--out", "corp", "--seed", "5"],
        &["train", "--stage", "codec", "--config", "c.toml", "--corpus", "corp", "--out", "codec.tca", "--steps", "30"],
        &[
            "train", "--stage", "svs", "--config", "c.toml", "--corpus", "corp", "--codec-ckpt", "codec.tca", "--out",
            "svs.tca", "--steps", "30",
        ],
        &[
            "synth", "--task", "transfer", "--score", "corp/scores/0011.json", "--prompt-audio",
            "corp/audio/0002_singing.tca", "--ckpt", "svs.tca", "--steps", "10", "--seed", "4", "--out", "out",
        ],
    ];
    steps.iter().all(|a| cantus(dir, a))
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    if !pipeline(a.path()) || !pipeline(b.path()) {
        return outcome(false, "pipeline command failed");
    }
    let files = ["codec.tca", "svs.tca", "out/mel.tca", "out/f0.tca", "corp/manifest.json"];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(a.path().join(f)).ok() != std::fs::read(b.path().join(f)).ok())
        .collect();
    outcome(differing.is_empty(), format!("compared {files:?}; differing {differing:?}"))
}

fn format_conformance(corpus: &Corpus) -> Outcome {
    let mut r = rng::rng(SEED, rng::stream::EVAL);
    let mut archive = TensorArchive::new();
    archive.insert("a", ArchiveTensor::from_tensor(&normal_tensor(&mut r, 5, 7))).unwrap();
    archive.insert("b", ArchiveTensor::from_tensor_f32(&normal_tensor(&mut r, 3, 2))).unwrap();
    archive.insert("c", ArchiveTensor::f64(vec![2, 0, 3], vec![])).unwrap();
    let bytes = archive.to_bytes().unwrap();
    let archive_rt = TensorArchive::from_bytes(&bytes).is_ok_and(|x| x.bitwise_eq(&archive) && x.to_bytes().unwrap() == bytes);
    let score_rt = corpus.samples.iter().all(|s| {
        let text = serialize_score(&s.score);
        parse_score(&text).is_ok_and(|p| p == s.score && serialize_score(&p) == text)
    });

    let mut crashes = 0;
    let mut accepted_truncations = 0;
    for i in 0..1000 {
        let mut b = bytes.clone();
        let truncated = i % 2 == 0;
        if truncated {
            b.truncate(r.random_range(0..bytes.len()));
        } else {
            for _ in 0..r.random_range(1..4) {
                let k = r.random_range(0..b.len());
                b[k] = r.random();
            }
        }
        match catch_unwind(AssertUnwindSafe(|| TensorArchive::from_bytes(&b).is_ok())) {
            Err(_) => crashes += 1,
            Ok(true) if truncated => accepted_truncations += 1,
            Ok(_) => {}
        }
        let text = serialize_score(&corpus.samples[i % corpus.samples.len()].score);
        let mut t = text.into_bytes();
        let k = r.random_range(0..t.len());
        t[k] = r.random_range(0x20..0x7f);
        t.truncate(r.random_range(k..=t.len()));
        let t = String::from_utf8_lossy(&t).into_owned();
        if catch_unwind(AssertUnwindSafe(|| parse_score(&t).is_ok())).is_err() {
            crashes += 1;
        }
    }
    outcome(
        archive_rt && score_rt && crashes == 0 && accepted_truncations == 0,
        format!(
            "archive round trip {archive_rt}, score round trip {score_rt} ({} scores), fuzz panics {crashes}, truncations accepted {accepted_truncations}",
            corpus.samples.len()
        ),
    )
}

fn vibrato_contrast_check(ck: &SvsCheckpoint, corpus: &Corpus) -> Outcome {
    let n = corpus.samples.len();
    let scores: Vec<_> = corpus.samples[n - ck.cfg.train.heldout..].iter().map(|s| s.score.clone()).collect();
    let opts = SynthOptions {
        steps: ck.cfg.flow.infer_steps,
        cfg_scale: ck.cfg.flow.cfg_scale,
        seed: SEED,
    };
    let c = match vibrato_contrast(ck, &scores, &opts) {
        Ok(c) => c,
        Err(e) => return outcome(false, format!("{e}")),
    };
    let out = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::create_dir_all(&out);
    for (name, t) in [("vibrato", Technique::Vibrato), ("plain", Technique::None)] {
        let sc = scores[0].with_technique(t);
        let p = Prompt::Text(LabelToken::encode(sc.labels()));
        if let Ok(s) = synthesize(ck, TaskKind::Control, &sc, &p, &opts) {
            let _ = plot_mel_f0(&s.mel, &s.f0_mel_rate(), &out.join(format!("{name}.png")));
        }
    }
    outcome(
        c.ratio() > 2.0,
        format!(
            "per-unit F0 std {:.3} Hz vs {:.3} Hz, ratio {:.2} over {} scores; plots in {}",
            c.vibrato_std,
            c.plain_std,
            c.ratio(),
            scores.len(),
            out.display()
        ),
    )
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn main() {
    let cfg = Config::default();
    let corpus = gen_corpus(&cfg.corpus, SEED).expect("default corpus");
    let n = corpus.samples.len();
    let train = &corpus.samples[..n - cfg.train.heldout];

    let start = Instant::now();
    let mut ct = CodecTrainer::new(&cfg);
    ct.run(train, cfg.train.codec_steps, &mut |_| {}).expect("codec training");
    let codec = ct.finish(train).expect("codec checkpoint");
    let codec_secs = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let svs_steps = cfg.train.svs_steps;
    let mut flow = Vec::with_capacity(svs_steps);
    let mut st = SvsTrainer::new(&cfg, codec.clone(), train).expect("svs trainer");
    for _ in 0..svs_steps {
        let rep = st.train_step().expect("svs step");
        flow.push(rep.term("flow").expect("flow term"));
    }
    let ck = st.finish();
    let svs_secs = start.elapsed().as_secs_f64();
    let window = 100.min(svs_steps);
    let flow_ends = (mean(&flow[..window]), mean(&flow[svs_steps - window..]));

    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("1 gradient suite", Box::new(gradient_suite)),
        ("2 flow oracle", Box::new(flow_oracle)),
        ("3 cfg identity", Box::new(|| cfg_identity(&ck, &corpus))),
        ("4 moe suite", Box::new(|| moe_suite(&ck, &corpus))),
        ("5 bbc suite", Box::new(bbc_suite)),
        ("6 codec alignment", Box::new(|| codec_alignment_check(&codec, &corpus, cfg.train.heldout, codec_secs))),
        ("7 end-to-end smoke", Box::new(|| end_to_end(&ck, &corpus, flow_ends, svs_secs))),
        ("8 determinism", Box::new(determinism)),
        ("9 format conformance", Box::new(|| format_conformance(&corpus))),
        ("10 vibrato contrast", Box::new(|| vibrato_contrast_check(&ck, &corpus))),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let t = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| outcome(false, "panicked"));
        let took: Duration = t.elapsed();
        println!("{} {name}: {} [{:.1}s]", if o.pass { "PASS" } else { "FAIL" }, o.detail, took.as_secs_f64());
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
