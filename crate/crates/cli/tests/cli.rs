use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use jhcodec::{wav, Real};

fn jhcodec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jhcodec")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn write_tone(p: &Path, len: usize) {
    let x: Vec<Real> = (0..len).map(|i| 0.3 * (i as Real * 0.07).sin()).collect();
    wav::write_wav(p, &x, 16_000).unwrap();
}

#[test]
fn exit_codes_separate_usage_from_runtime_errors() {
    assert_eq!(code(&jhcodec(&[])), 1);
    assert_eq!(code(&jhcodec(&["encode", "--bogus"])), 1);
    assert_eq!(code(&jhcodec(&["--help"])), 0);
    assert_eq!(code(&jhcodec(&["gradcheck", "--module", "nope"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let missing = path(dir.path(), "missing.wav");
    let out = path(dir.path(), "x.jhc");
    let o = jhcodec(&["encode", "--in", s(&missing), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn encode_decode_and_inspect_a_wav() {
    let dir = tempfile::tempdir().unwrap();
    let (wav_in, jhc, wav_out) = (path(dir.path(), "in.wav"), path(dir.path(), "x.jhc"), path(dir.path(), "out.wav"));
    write_tone(&wav_in, 1000);

    let o = jhcodec(&["encode", "--seed", "3", "--k", "2", "--in", s(&wav_in), "--out", s(&jhc)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    // 1000 samples pad to 16 frames of 64; 2 levels of 6 bits each.
    let bytes = std::fs::read(&jhc).unwrap();
    assert_eq!(bytes.len() - jhcodec::bitstream::HEADER_LEN, (16 * 2 * 6usize).div_ceil(8));

    let o = jhcodec(&["inspect", "--in", s(&jhc)]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("levels         2 of 4"), "{text}");
    assert!(text.contains("pad samples    24"), "{text}");
    assert!(text.contains("bitrate        3000 bit/s"), "{text}");

    let o = jhcodec(&["decode", "--seed", "3", "--in", s(&jhc), "--out", s(&wav_out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let y = wav::read_wav(&wav_out, 16_000).unwrap();
    assert_eq!(y.len(), 1000);

    let short = path(dir.path(), "short.wav");
    assert_eq!(code(&jhcodec(&["decode", "--seed", "3", "--k", "1", "--in", s(&jhc), "--out", s(&short)])), 0);
    assert_ne!(wav::read_wav(&short, 16_000).unwrap(), y);

    // A stream made for the toy model does not decode with the full-size one.
    let o = jhcodec(&["decode", "--preset", "paper", "--in", s(&jhc), "--out", s(&wav_out)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_and_distill_write_checkpoints_that_load_back() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, csv, student) = (path(dir.path(), "c.jhck"), path(dir.path(), "c.csv"), path(dir.path(), "s.jhsw"));
    let o = jhcodec(&["train", "--steps", "3", "--log-every", "0", "--out", s(&ckpt), "--csv", s(&csv)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 4);
    let text = stdout(&jhcodec(&["inspect", "--in", s(&ckpt)]));
    assert!(text.starts_with("codec checkpoint"), "{text}");
    assert!(text.contains("frame_size=64"), "{text}");

    let (wav_in, jhc) = (path(dir.path(), "in.wav"), path(dir.path(), "x.jhc"));
    write_tone(&wav_in, 640);
    assert_eq!(code(&jhcodec(&["encode", "--ckpt", s(&ckpt), "--in", s(&wav_in), "--out", s(&jhc)])), 0);

    let o = jhcodec(&["distill", "--steps", "3", "--eval-clips", "2", "--out", s(&student)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("held-out mean cosine similarity"));
    let text = stdout(&jhcodec(&["inspect", "--in", s(&student)]));
    assert!(text.starts_with("feature extractor checkpoint"), "{text}");

    let garbage = path(dir.path(), "g.bin");
    std::fs::write(&garbage, b"nothing here").unwrap();
    assert_eq!(code(&jhcodec(&["inspect", "--in", s(&garbage)])), 2);
}

#[test]
fn gradcheck_passes_for_the_quantizer() {
    let o = jhcodec(&["gradcheck", "--module", "rvq", "--seed", "7"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
}

fn mac_line(o: &Output) -> f64 {
    let text = stdout(o);
    let line = text.lines().find(|l| l.starts_with("MAC (G)")).unwrap();
    line.split_whitespace().last().unwrap().parse().unwrap()
}

#[test]
fn full_size_mac_count_is_about_thirteen_and_a_half_giga() {
    let preset = jhcodec(&["bench", "--macs-only", "--preset", "paper"]);
    assert_eq!(code(&preset), 0);
    let g = mac_line(&preset);
    assert!((g - 13.6).abs() <= 1.36, "{g}");
    let cfg = configs().join("paper.cfg");
    let from_file = jhcodec(&["bench", "--macs-only", "--preset", "toy", "--config", s(&cfg)]);
    assert_eq!(mac_line(&from_file), g);
}

#[test]
fn config_files_match_the_presets() {
    use jhcodec::CodecConfig;
    let read = |name: &str| std::fs::read_to_string(configs().join(name)).unwrap();
    assert_eq!(CodecConfig::parse_with_base(&read("paper.cfg"), CodecConfig::toy()).unwrap(), CodecConfig::paper());
    assert_eq!(CodecConfig::parse_with_base(&read("toy.cfg"), CodecConfig::paper()).unwrap(), CodecConfig::toy());
}

#[test]
fn bench_reports_a_cost_table() {
    let dir = tempfile::tempdir().unwrap();
    let csv = path(dir.path(), "b.csv");
    let o = jhcodec(&["bench", "--latency-frames", "5", "--rtf-seconds", "1", "--csv", s(&csv)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!stdout(&o).is_empty());
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 2);
    let rtf_total: f64 = rows[1].rsplit(',').next().unwrap().parse().unwrap();
    assert!(rtf_total > 0.0 && rtf_total < 1.0, "toy codec should run faster than real time: {rtf_total}");
    // Shorter than one second of audio is refused.
    assert_eq!(code(&jhcodec(&["bench", "--rtf-seconds", "0.2"])), 2);
}
