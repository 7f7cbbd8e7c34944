//! Utterance data model, frame labelling from word timings, the synthetic
//! corpus generator and the JSON-lines corpus format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CORPUS_VERSION: u32 = 1;

/// Per-frame speech class. The discriminant is the softmax index used by the
/// endpointer head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SpeechClass {
    Speech = 0,
    InitialSilence = 1,
    IntermediateSilence = 2,
    FinalSilence = 3,
}

impl SpeechClass {
    pub const COUNT: usize = 4;
    pub const ALL: [SpeechClass; 4] = [
        SpeechClass::Speech,
        SpeechClass::InitialSilence,
        SpeechClass::IntermediateSilence,
        SpeechClass::FinalSilence,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn is_speech(self) -> bool {
        self == SpeechClass::Speech
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFrame {
    pub t_index: usize,
    pub t_ms: u64,
    pub features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_id: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordSegment {
    pub start_ms: u64,
    pub end_ms: u64,
    pub token_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub frame_period_ms: u32,
    pub frames: Vec<FeatureFrame>,
    pub segments: Vec<WordSegment>,
    pub target_tokens: Vec<usize>,
}

impl UtteranceRecord {
    /// Builds a record from raw feature rows, deriving frame times and the
    /// flattened target sequence.
    pub fn from_parts(
        id: impl Into<String>,
        frame_period_ms: u32,
        features: Vec<Vec<f64>>,
        segments: Vec<WordSegment>,
    ) -> Self {
        let frames = features
            .into_iter()
            .enumerate()
            .map(|(t, features)| FeatureFrame {
                t_index: t,
                t_ms: t as u64 * frame_period_ms as u64,
                features,
                domain_id: None,
            })
            .collect();
        let target_tokens = segments.iter().flat_map(|s| s.token_ids.iter().copied()).collect();
        UtteranceRecord {
            id: id.into(),
            frame_period_ms,
            frames,
            segments,
            target_tokens,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn duration_ms(&self) -> u64 {
        self.frames.len() as u64 * self.frame_period_ms as u64
    }

    /// End of the last word, i.e. the ground-truth end of query.
    pub fn speech_end_ms(&self) -> Option<u64> {
        self.segments.last().map(|s| s.end_ms)
    }

    pub fn feature_rows(&self) -> Vec<&[f64]> {
        self.frames.iter().map(|f| f.features.as_slice()).collect()
    }

    /// Checks every record invariant. `d_in` and `vocab_size`, when given,
    /// are checked against each frame and token.
    pub fn validate(&self, d_in: Option<usize>, vocab_size: Option<usize>) -> Result<()> {
        if self.frame_period_ms == 0 {
            return Err(Error::Validation(format!("{}: frame_period_ms must be positive", self.id)));
        }
        let period = self.frame_period_ms as u64;
        let dim = d_in.or_else(|| self.frames.first().map(|f| f.features.len()));
        for (t, frame) in self.frames.iter().enumerate() {
            if frame.t_index != t || frame.t_ms != t as u64 * period {
                return Err(Error::Validation(format!(
                    "{}: frame {t} has t_index {} / t_ms {} (expected {t} / {})",
                    self.id,
                    frame.t_index,
                    frame.t_ms,
                    t as u64 * period
                )));
            }
            if let Some(d) = dim {
                if frame.features.len() != d {
                    return Err(Error::Validation(format!(
                        "{}: frame {t} has {} features, expected {d}",
                        self.id,
                        frame.features.len()
                    )));
                }
            }
            if frame.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("{} frame {t}", self.id)));
            }
        }
        check_segments(&self.id, &self.segments, self.duration_ms())?;
        let flat: Vec<usize> = self.segments.iter().flat_map(|s| s.token_ids.iter().copied()).collect();
        if flat != self.target_tokens {
            return Err(Error::Validation(format!(
                "{}: target_tokens do not match the concatenated segment tokens",
                self.id
            )));
        }
        if let Some(v) = vocab_size {
            if let Some(bad) = self.target_tokens.iter().find(|&&tok| tok >= v) {
                return Err(Error::Validation(format!(
                    "{}: token {bad} outside vocabulary of size {v}",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

fn check_segments(id: &str, segments: &[WordSegment], duration_ms: u64) -> Result<()> {
    for (i, seg) in segments.iter().enumerate() {
        if seg.start_ms >= seg.end_ms {
            return Err(Error::Validation(format!(
                "{id}: segment {i} [{}, {}) is empty or reversed",
                seg.start_ms, seg.end_ms
            )));
        }
        if seg.end_ms > duration_ms {
            return Err(Error::Validation(format!(
                "{id}: segment {i} [{}, {}) extends past the utterance end {duration_ms}",
                seg.start_ms, seg.end_ms
            )));
        }
    }
    for (i, pair) in segments.windows(2).enumerate() {
        let (a, b) = (&pair[0], &pair[1]);
        if b.start_ms < a.end_ms {
            return Err(Error::Validation(format!(
                "{id}: segments {i} [{}, {}) and {} [{}, {}) overlap or are unsorted",
                a.start_ms,
                a.end_ms,
                i + 1,
                b.start_ms,
                b.end_ms
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameLabelSeq {
    pub labels: Vec<SpeechClass>,
}

impl FrameLabelSeq {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn speech_frames(&self) -> usize {
        self.labels.iter().filter(|l| l.is_speech()).count()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.id()).collect()
    }
}

/// Labels every frame from the word segments.
///
/// A frame `[f·Δ, (f+1)·Δ)` is speech when it overlaps some segment by a
/// positive duration. Non-speech frames before the first speech frame are
/// initial silence, after the last one final silence, and everything in
/// between intermediate silence. Utterances without speech are entirely
/// initial silence.
pub fn label_frames(utt: &UtteranceRecord) -> Result<FrameLabelSeq> {
    let period = utt.frame_period_ms as u64;
    if period == 0 {
        return Err(Error::Validation(format!("{}: frame_period_ms must be positive", utt.id)));
    }
    check_segments(&utt.id, &utt.segments, utt.duration_ms())?;

    let n = utt.num_frames();
    let mut speech = vec![false; n];
    for seg in &utt.segments {
        // frames with f·Δ < end and (f+1)·Δ > start
        let first = (seg.start_ms / period) as usize;
        let last = seg.end_ms.div_ceil(period) as usize;
        for flag in speech.iter_mut().take(last.min(n)).skip(first) {
            *flag = true;
        }
    }

    let first_speech = speech.iter().position(|&s| s);
    let last_speech = speech.iter().rposition(|&s| s);
    let labels = match (first_speech, last_speech) {
        (Some(first), Some(last)) => speech
            .iter()
            .enumerate()
            .map(|(f, &s)| {
                if s {
                    SpeechClass::Speech
                } else if f < first {
                    SpeechClass::InitialSilence
                } else if f > last {
                    SpeechClass::FinalSilence
                } else {
                    SpeechClass::IntermediateSilence
                }
            })
            .collect(),
        _ => vec![SpeechClass::InitialSilence; n],
    };
    Ok(FrameLabelSeq { labels })
}

/// Parameters of the synthetic corpus generator.
///
/// Token means are drawn from `acoustic_seed`, not from the corpus seed, so
/// corpora generated with different seeds share one "language".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_utterances: usize,
    pub d_in: usize,
    pub vocab_size: usize,
    pub frame_period_ms: u32,
    pub min_words: usize,
    pub max_words: usize,
    pub min_word_frames: usize,
    pub max_word_frames: usize,
    pub tokens_per_word: usize,
    /// Target fraction of non-speech frames per utterance.
    pub silence_fraction: f64,
    pub initial_silence_share: f64,
    pub final_silence_share: f64,
    pub min_initial_silence_frames: usize,
    pub min_final_silence_frames: usize,
    /// Probability that a word boundary carries a pause.
    pub pause_prob: f64,
    /// Size of the token subset reserved for the last token of a query
    /// (a lexical end-of-query cue). Zero disables the cue.
    pub final_tokens: usize,
    pub class_separation: f64,
    pub noise_level: f64,
    pub acoustic_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_utterances: 256,
            d_in: 8,
            vocab_size: 8,
            frame_period_ms: 30,
            min_words: 3,
            max_words: 7,
            min_word_frames: 5,
            max_word_frames: 10,
            tokens_per_word: 1,
            silence_fraction: 0.27,
            initial_silence_share: 0.3,
            final_silence_share: 0.4,
            min_initial_silence_frames: 1,
            min_final_silence_frames: 2,
            pause_prob: 0.4,
            final_tokens: 2,
            class_separation: 2.0,
            noise_level: 0.6,
            acoustic_seed: 20_240,
        }
    }
}

impl SynthConfig {
    /// Short voice-search style queries with a long trailing silence.
    pub fn short_queries() -> Self {
        SynthConfig {
            min_words: 1,
            max_words: 4,
            silence_fraction: 0.5,
            initial_silence_share: 0.15,
            final_silence_share: 0.6,
            min_initial_silence_frames: 2,
            min_final_silence_frames: 12,
            ..SynthConfig::default()
        }
    }

    /// Dictation-style segments: longer, with fewer but longer pauses.
    pub fn continuous() -> Self {
        SynthConfig {
            min_words: 8,
            max_words: 16,
            pause_prob: 0.2,
            initial_silence_share: 0.25,
            final_silence_share: 0.3,
            ..SynthConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.d_in == 0 {
            return bad("d_in must be positive");
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive");
        }
        if self.frame_period_ms == 0 {
            return bad("frame_period_ms must be positive");
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return bad("need 1 <= min_words <= max_words");
        }
        if self.tokens_per_word == 0 {
            return bad("tokens_per_word must be positive");
        }
        if self.min_word_frames < self.tokens_per_word || self.min_word_frames > self.max_word_frames {
            return bad("need tokens_per_word <= min_word_frames <= max_word_frames");
        }
        if !(0.0..1.0).contains(&self.silence_fraction) {
            return bad("silence_fraction must lie in [0, 1)");
        }
        let shares = [self.initial_silence_share, self.final_silence_share];
        if shares.iter().any(|s| !(0.0..=1.0).contains(s)) || shares.iter().sum::<f64>() > 1.0 {
            return bad("silence shares must be in [0, 1] and sum to at most 1");
        }
        if !(0.0..=1.0).contains(&self.pause_prob) {
            return bad("pause_prob must lie in [0, 1]");
        }
        if self.final_tokens >= self.vocab_size && self.final_tokens > 0 {
            return bad("final_tokens must leave at least one ordinary token");
        }
        if !(self.noise_level >= 0.0 && self.class_separation >= 0.0) {
            return bad("noise_level and class_separation must be non-negative");
        }
        Ok(())
    }

    fn token_means(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.acoustic_seed);
        (0..self.vocab_size)
            .map(|_| {
                let v: Vec<f64> = (0..self.d_in).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x / norm * self.class_separation).collect()
            })
            .collect()
    }
}

/// Deterministically generates `cfg.num_utterances` labelled utterances.
pub fn generate_synthetic_corpus(cfg: &SynthConfig, seed: u64) -> Result<Vec<UtteranceRecord>> {
    cfg.validate()?;
    let means = cfg.token_means();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.num_utterances)
        .map(|i| synth_utterance(cfg, &means, &mut rng, format!("utt-{seed}-{i:05}")))
        .collect()
}

fn synth_utterance(
    cfg: &SynthConfig,
    means: &[Vec<f64>],
    rng: &mut ChaCha8Rng,
    id: String,
) -> Result<UtteranceRecord> {
    let n_words = rng.gen_range(cfg.min_words..=cfg.max_words);
    let durations: Vec<usize> = (0..n_words)
        .map(|_| rng.gen_range(cfg.min_word_frames..=cfg.max_word_frames))
        .collect();
    let ordinary = cfg.vocab_size - cfg.final_tokens;
    let mut words: Vec<Vec<usize>> = (0..n_words)
        .map(|_| (0..cfg.tokens_per_word).map(|_| rng.gen_range(0..ordinary)).collect())
        .collect();
    if cfg.final_tokens > 0 {
        let last = words.last_mut().and_then(|w| w.last_mut()).expect("at least one word");
        *last = rng.gen_range(ordinary..cfg.vocab_size);
    }

    // silence budget
    let speech_frames: usize = durations.iter().sum();
    let s = cfg.silence_fraction;
    let target = (speech_frames as f64 * s / (1.0 - s)).round() as usize;
    let fixed = cfg.min_initial_silence_frames + cfg.min_final_silence_frames;
    let total_silence = target.max(fixed);
    let extra = total_silence - fixed;

    let mut slots: Vec<usize> = (0..n_words.saturating_sub(1))
        .filter(|_| rng.gen_bool(cfg.pause_prob))
        .collect();
    let jitter = |rng: &mut ChaCha8Rng, share: f64| share * rng.gen_range(0.5..1.5);
    let a_init = jitter(rng, cfg.initial_silence_share);
    let a_final = jitter(rng, cfg.final_silence_share);
    let a_pause = if slots.is_empty() {
        0.0
    } else {
        jitter(rng, 1.0 - cfg.initial_silence_share - cfg.final_silence_share)
    };
    let norm = a_init + a_final + a_pause;
    let (a_init, a_pause) = if norm > 0.0 {
        (a_init / norm, a_pause / norm)
    } else {
        (0.0, 0.0)
    };
    let initial = cfg.min_initial_silence_frames + (extra as f64 * a_init).floor() as usize;
    let pause_total = (extra as f64 * a_pause).floor() as usize;
    slots.shuffle(rng);
    slots.truncate(pause_total);
    slots.sort_unstable();
    let final_sil = total_silence - initial - if slots.is_empty() { 0 } else { pause_total };
    let mut pauses = vec![0usize; n_words];
    if !slots.is_empty() {
        for &slot in &slots {
            pauses[slot] += 1;
        }
        for _ in slots.len()..pause_total {
            let slot = slots[rng.gen_range(0..slots.len())];
            pauses[slot] += 1;
        }
    }

    // frame layout: None = silence, Some(token) = speech
    let period = cfg.frame_period_ms as u64;
    let mut layout: Vec<Option<usize>> = vec![None; initial];
    let mut segments = Vec::with_capacity(n_words);
    for (w, (tokens, &dur)) in words.iter().zip(&durations).enumerate() {
        let start = layout.len();
        let per_token = dur / tokens.len();
        for (k, &tok) in tokens.iter().enumerate() {
            let len = if k + 1 == tokens.len() { dur - per_token * k } else { per_token };
            layout.extend(std::iter::repeat_n(Some(tok), len));
        }
        segments.push(WordSegment {
            start_ms: start as u64 * period,
            end_ms: layout.len() as u64 * period,
            token_ids: tokens.clone(),
        });
        layout.extend(std::iter::repeat_n(None, pauses[w]));
    }
    layout.extend(std::iter::repeat_n(None, final_sil));

    let zero = vec![0.0; cfg.d_in];
    let mean_of = |slot: Option<usize>| slot.map_or(zero.as_slice(), |t| means[t].as_slice());
    let features = layout
        .iter()
        .enumerate()
        .map(|(t, &slot)| {
            let cur = mean_of(slot);
            let prev = if t > 0 && layout[t - 1] != slot { Some(mean_of(layout[t - 1])) } else { None };
            (0..cfg.d_in)
                .map(|d| {
                    let mu = prev.map_or(cur[d], |p| 0.5 * (cur[d] + p[d]));
                    let eps: f64 = StandardNormal.sample(rng);
                    mu + cfg.noise_level * eps
                })
                .collect()
        })
        .collect();

    let utt = UtteranceRecord::from_parts(id, cfg.frame_period_ms, features, segments);
    utt.validate(Some(cfg.d_in), Some(cfg.vocab_size))?;
    Ok(utt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusHeader {
    pub version: u32,
    pub d_in: usize,
    pub vocab_size: usize,
    pub frame_period_ms: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub header: CorpusHeader,
    pub records: Vec<UtteranceRecord>,
}

impl Corpus {
    pub fn new(d_in: usize, vocab_size: usize, frame_period_ms: u32, records: Vec<UtteranceRecord>) -> Self {
        Corpus {
            header: CorpusHeader {
                version: CORPUS_VERSION,
                d_in,
                vocab_size,
                frame_period_ms,
            },
            records,
        }
    }

    pub fn from_synth(cfg: &SynthConfig, seed: u64) -> Result<Self> {
        let records = generate_synthetic_corpus(cfg, seed)?;
        Ok(Corpus::new(cfg.d_in, cfg.vocab_size, cfg.frame_period_ms, records))
    }

    pub fn get(&self, id: &str) -> Option<&UtteranceRecord> {
        self.records.iter().find(|r| r.id == id)
    }
}

pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    serde_json::to_writer(&mut out, &corpus.header)?;
    out.write_all(b"\n").map_err(io)?;
    for rec in &corpus.records {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = BufReader::new(file).lines();
    let header: CorpusHeader = match lines.next() {
        None => return Err(parse_err(1, "missing corpus header".into())),
        Some(line) => {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| parse_err(1, format!("bad header: {e}")))?
        }
    };
    if header.version != CORPUS_VERSION {
        return Err(Error::Version {
            found: header.version,
            expected: CORPUS_VERSION,
        });
    }
    let mut records = Vec::new();
    for (idx, line) in lines.enumerate() {
        let lineno = idx + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: UtteranceRecord = serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        if rec.frame_period_ms != header.frame_period_ms {
            return Err(parse_err(
                lineno,
                format!(
                    "frame_period_ms {} does not match header {}",
                    rec.frame_period_ms, header.frame_period_ms
                ),
            ));
        }
        rec.validate(Some(header.d_in), Some(header.vocab_size))
            .map_err(|e| parse_err(lineno, e.to_string()))?;
        records.push(rec);
    }
    Ok(Corpus { header, records })
}
