use jointep::corpus::{label_frames, read_corpus, write_corpus, Corpus, SynthConfig};
use jointep::Error;

#[test]
fn generated_speech_fraction_tracks_target() {
    let cfg = SynthConfig { num_utterances: 1000, ..SynthConfig::default() };
    let c = Corpus::from_synth(&cfg, 17).unwrap();
    let mean: f64 = c
        .records
        .iter()
        .map(|u| label_frames(u).unwrap().speech_frames() as f64 / u.num_frames() as f64)
        .sum::<f64>()
        / c.records.len() as f64;
    assert!((mean - 0.73).abs() <= 0.05, "mean speech fraction {mean}");
}

#[test]
fn continuous_preset_keeps_the_silence_budget() {
    let c = Corpus::from_synth(&SynthConfig { num_utterances: 300, ..SynthConfig::continuous() }, 3).unwrap();
    let speech: usize = c.records.iter().map(|u| label_frames(u).unwrap().speech_frames()).sum();
    let total: usize = c.records.iter().map(|u| u.num_frames()).sum();
    let frac = speech as f64 / total as f64;
    assert!((frac - 0.73).abs() <= 0.02, "{frac}");
}

#[test]
fn file_round_trip_and_errors() {
    let t = tempfile::tempdir().unwrap();
    let c = Corpus::from_synth(&SynthConfig { num_utterances: 5, ..SynthConfig::default() }, 9).unwrap();
    let p = t.path().join("c.jsonl");
    write_corpus(&c, &p).unwrap();
    let back = read_corpus(&p).unwrap();
    assert_eq!(back.header, c.header);
    assert_eq!(back.records, c.records);

    let text = std::fs::read_to_string(&p).unwrap();
    let bumped = text.replacen("\"version\":1", "\"version\":99", 1);
    std::fs::write(&p, bumped).unwrap();
    assert!(matches!(read_corpus(&p), Err(Error::Version { found: 99, .. })));

    let mut lines: Vec<&str> = text.lines().collect();
    lines[3] = "{\"id\": 3}";
    std::fs::write(&p, lines.join("\n")).unwrap();
    assert!(matches!(read_corpus(&p), Err(Error::Parse { line: 4, .. })));

    assert!(matches!(read_corpus(&t.path().join("absent")), Err(Error::Io { .. })));
}
