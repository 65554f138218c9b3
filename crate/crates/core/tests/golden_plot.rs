use std::path::Path;

use cantus_core::eval::{plot_mel_f0, render_mel_f0};
use cantus_core::score::{parse_score, render_singing, Gender, SingerProfile, VocalRange};

const GOLDEN: &str = "tests/data/vibrato_oracle.png";

const SCORE: &str = r#"{
  "language": "a",
  "labels": {"gender": "female", "vocal_range": "soprano", "method": "pop", "emotion": "happy"},
  "units": [
    {"phoneme": "a1", "midi_pitch": 76, "is_rest": false, "duration_frames": 60, "technique": "vibrato"},
    {"phoneme": "a0", "midi_pitch": 76, "is_rest": true, "duration_frames": 4, "technique": "none"}
  ]
}"#;

fn decode(bytes: &[u8]) -> (u32, u32, Vec<u8>) {
    let mut r = png::Decoder::new(std::io::Cursor::new(bytes)).read_info().unwrap();
    let mut buf = vec![0; r.output_buffer_size().unwrap()];
    let info = r.next_frame(&mut buf).unwrap();
    buf.truncate(info.buffer_size());
    (info.width, info.height, buf)
}

#[test]
fn vibrato_oracle_plot_matches_golden() {
    let score = parse_score(SCORE).unwrap();
    let mut singer = SingerProfile::new(0, Gender::Female, VocalRange::Soprano);
    singer.vibrato_rate_hz = 5.5;
    singer.vibrato_depth_semitones = 0.8;
    singer.breathiness = 0.0;
    let (mel, f0) = render_singing(&score, &singer, 0);

    let (w, h, px) = render_mel_f0(&mel, &f0);
    // The contour centre wanders up and down more than once.
    let centres: Vec<usize> = (0..w as usize)
        .filter_map(|x| (0..h as usize).find(|y| px[(y * w as usize + x) * 3..][..3] == [255, 255, 255]))
        .collect();
    let turns = centres.windows(2).filter(|p| p[0] != p[1]).count();
    assert!(turns >= 4, "contour changes row {turns} times");

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("plot.png");
    plot_mel_f0(&mel, &f0, &out).unwrap();
    let got = std::fs::read(&out).unwrap();
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join(GOLDEN);
    if std::env::var_os("CANTUS_BLESS").is_some() {
        std::fs::write(&golden, &got).unwrap();
    }
    let want = std::fs::read(&golden).expect("golden image present; regenerate with CANTUS_BLESS=1");
    assert_eq!(decode(&got), decode(&want));
}
