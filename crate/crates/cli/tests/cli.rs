use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "[corpus]\nn_singers = 3\nn_scores = 8\n\n[train]\nheldout = 4\ncodec_batch = 4\nsvs_batch = 2\n";

fn cantus(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cantus"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = cantus(dir, args);
    assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

/// Tiny corpus, zero-step codec and a two-step SVS checkpoint.
fn pipeline(dir: &Path) {
    std::fs::write(dir.join("c.toml"), TINY).unwrap();
    ok(dir, &["gen-corpus", "--config", "c.toml", "--out", "corp"]);
    ok(dir, &["train", "--stage", "codec", "--config", "c.toml", "--corpus", "corp", "--out", "codec.tca", "--steps", "0"]);
    ok(
        dir,
        &[
            "train", "--stage", "svs", "--config", "c.toml", "--corpus", "corp", "--codec-ckpt", "codec.tca", "--out",
            "svs.tca", "--steps", "2",
        ],
    );
}

#[test]
fn gen_corpus_requires_corpus_keys() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("c.toml"), "[corpus]\nn_singers = 3\n").unwrap();
    let o = cantus(d.path(), &["gen-corpus", "--config", "c.toml", "--out", "corp"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("corpus.n_scores"));
}

#[test]
fn missing_config_is_io_error() {
    let d = tempfile::tempdir().unwrap();
    let o = cantus(d.path(), &["gen-corpus", "--config", "nope.toml", "--out", "corp"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn unknown_config_key_is_usage_error() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("c.toml"), "[corpus]\nn_singers = 3\nn_scores = 8\nsingers = 2\n").unwrap();
    let o = cantus(d.path(), &["gen-corpus", "--config", "c.toml", "--out", "corp"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn bad_arguments_are_usage_errors() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&cantus(d.path(), &["train", "--stage", "vocoder"])), 2);
    assert_eq!(code(&cantus(d.path(), &["fly"])), 2);
}

#[test]
fn pipeline_outputs_and_contracts() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    pipeline(p);
    assert!(p.join("corp/manifest.json").is_file());

    let o = cantus(p, &["train", "--stage", "svs", "--corpus", "corp", "--out", "x.tca", "--steps", "1"]);
    assert_eq!(code(&o), 2, "svs without a codec checkpoint");

    let out = ok(
        p,
        &[
            "synth", "--task", "transfer", "--score", "corp/scores/0007.json", "--prompt-audio",
            "corp/audio/0001_singing.tca", "--ckpt", "svs.tca", "--steps", "2", "--out", "out", "--plot",
        ],
    );
    assert!(out.starts_with("frames="));
    for f in ["mel.tca", "f0.tca", "plot.png"] {
        assert!(p.join("out").join(f).is_file(), "{f}");
    }

    let control_audio = cantus(
        p,
        &[
            "synth", "--task", "control", "--score", "corp/scores/0007.json", "--prompt-audio",
            "corp/audio/0001_singing.tca", "--ckpt", "svs.tca", "--out", "o2",
        ],
    );
    assert_eq!(code(&control_audio), 2);
    let cross_no_lang = cantus(
        p,
        &[
            "synth", "--task", "cross_lingual", "--score", "corp/scores/0007.json", "--prompt-audio",
            "corp/audio/0001_singing.tca", "--ckpt", "svs.tca", "--out", "o3",
        ],
    );
    assert_eq!(code(&cross_no_lang), 2);
    let missing_ckpt = cantus(
        p,
        &["synth", "--task", "control", "--score", "corp/scores/0007.json", "--prompt-text", "", "--ckpt", "no.tca", "--out", "o4"],
    );
    assert_eq!(code(&missing_ckpt), 1);

    ok(p, &["eval", "--ckpt", "svs.tca", "--corpus", "corp", "--task", "transfer", "--pairs", "2", "--steps", "1", "--report", "r.toml"]);
    let report = std::fs::read_to_string(p.join("r.toml")).unwrap();
    assert!(report.contains("[transfer]") && report.contains("timbre_match_rate"));

    ok(p, &["gradcheck", "--ckpt", "svs.tca", "--probes", "4", "--report", "g.toml"]);
    assert!(std::fs::read_to_string(p.join("g.toml")).unwrap().contains("pass = true"));
}

#[test]
fn zero_step_training_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        pipeline(d);
    }
    for f in ["codec.tca", "svs.tca", "corp/manifest.json", "corp/audio/0003_singing.tca"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}
