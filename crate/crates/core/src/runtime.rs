//! Streaming inference: the endpointer-driven state machines, frame
//! filtering, greedy transducer decoding and end-of-query fusion.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{FeatureFrame, SpeechClass, UtteranceRecord};
use crate::error::{Error, Result};
use crate::models::{argmax, EpState, JointModel, SharedState, SwitchSource, TrunkState};
use crate::netkit::{log_softmax, ParamStore};
use crate::trainer::EpRouting;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    ShortQuery,
    Continuous,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "short" | "short-query" | "shortquery" => Ok(Mode::ShortQuery),
            "continuous" => Ok(Mode::Continuous),
            _ => Err(Error::Config(format!("unknown mode {s:?}; expected short-query or continuous"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FsmState {
    EpOnly,
    AsrPlusEp,
    End,
}

impl FsmState {
    pub fn as_str(self) -> &'static str {
        match self {
            FsmState::EpOnly => "EpOnly",
            FsmState::AsrPlusEp => "AsrPlusEp",
            FsmState::End => "End",
        }
    }
}

/// Decision thresholds. All comparisons are strict.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    /// speech iff `P(speech) > vad`
    pub vad: f64,
    /// acoustic end-of-query iff `P(final silence) > eoq`
    pub eoq: f64,
    /// decoder end-of-query iff `−log P(</s>) < eos`
    pub eos: f64,
    pub wait_ms: u64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            vad: 0.5,
            eoq: 0.8,
            eos: 0.7,
            wait_ms: 60,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("vad", self.vad), ("eoq", self.eoq)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("threshold {name} = {v} outside [0, 1]")));
            }
        }
        if !(self.eos >= 0.0 && self.eos.is_finite()) {
            return Err(Error::Config(format!("threshold eos = {} must be non-negative", self.eos)));
        }
        Ok(())
    }

    /// Same VAD threshold, end-of-query signals disabled.
    pub fn never_ending(vad: f64) -> Self {
        Thresholds {
            vad,
            eoq: 1.0,
            eos: 0.0,
            wait_ms: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EoqSource {
    Acoustic,
    Decoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EoqEvent {
    pub source: EoqSource,
    pub fire_ms: u64,
    pub endpoint_ms: u64,
}

/// Outcome of [`declare_endpoint`] for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EoqDecision {
    pub pending: Option<EoqEvent>,
    pub fired_acoustic: bool,
    pub fired_decoder: bool,
    pub endpoint: bool,
}

/// Fuses the acoustic and decoder signals. The first signal to fire starts
/// the mandatory wait; a later signal never restarts it.
pub fn declare_endpoint(
    posterior: &[f64; 4],
    decoder_cost: Option<f64>,
    th: &Thresholds,
    now_ms: u64,
    pending: Option<EoqEvent>,
) -> EoqDecision {
    let fired_acoustic = posterior[SpeechClass::FinalSilence.id()] > th.eoq;
    let fired_decoder = decoder_cost.is_some_and(|c| c < th.eos);
    let pending = pending.or_else(|| {
        let source = if fired_acoustic {
            EoqSource::Acoustic
        } else if fired_decoder {
            EoqSource::Decoder
        } else {
            return None;
        };
        Some(EoqEvent {
            source,
            fire_ms: now_ms,
            endpoint_ms: now_ms + th.wait_ms,
        })
    });
    EoqDecision {
        pending,
        fired_acoustic,
        fired_decoder,
        endpoint: pending.is_some_and(|e| now_ms >= e.endpoint_ms),
    }
}

/// Models driven by a streaming session.
pub trait StreamingModel {
    type State: Clone;

    fn start(&self) -> Self::State;

    /// Endpointer posterior for `frame`; `asr_active` is the state machine's
    /// state when the frame arrived.
    fn endpoint(&self, st: &mut Self::State, frame: &FeatureFrame, asr_active: bool) -> Result<(SwitchSource, [f64; 4])>;

    /// Feeds `frame` to the recogniser. Returns the end-of-query cost when a
    /// decoder step ran on this frame.
    fn recognise(&self, st: &mut Self::State, frame: &FeatureFrame) -> Result<Option<f64>>;

    /// Drains buffered recogniser input at end of stream.
    fn finish(&self, st: &mut Self::State) -> Result<()>;

    fn hypothesis<'s>(&self, st: &'s Self::State) -> &'s [usize];
}

/// One record per processed frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t_ms: u64,
    /// State when the frame arrived.
    pub fsm_state: FsmState,
    pub source: SwitchSource,
    pub posterior: [f64; 4],
    pub eos_cost: Option<f64>,
    pub filtered: bool,
    pub fired_acoustic: bool,
    pub fired_decoder: bool,
    pub endpoint: bool,
    /// Hypothesis length after this frame.
    #[serde(default)]
    pub hyp_len: usize,
}

/// Streaming session state, independent of the model it runs on.
#[derive(Debug, Clone)]
pub struct SessionState<S> {
    pub mode: Mode,
    pub thresholds: Thresholds,
    pub fsm: FsmState,
    pub model: S,
    pub pending: Option<EoqEvent>,
    eos_cost: Option<f64>,
    last_t: Option<(usize, u64)>,
    prepend: usize,
    held: VecDeque<FeatureFrame>,
}

impl<S> SessionState<S> {
    /// End-of-query cost of the current best hypothesis; absent while only
    /// the endpointer runs.
    pub fn decoder_eoq_cost(&self) -> Option<f64> {
        match self.fsm {
            FsmState::EpOnly => None,
            _ => self.eos_cost,
        }
    }
}

pub fn start_session<M: StreamingModel>(model: &M, mode: Mode, th: Thresholds) -> Result<SessionState<M::State>> {
    th.validate()?;
    Ok(SessionState {
        mode,
        thresholds: th,
        fsm: FsmState::EpOnly,
        model: model.start(),
        pending: None,
        eos_cost: None,
        last_t: None,
        prepend: 0,
        held: VecDeque::new(),
    })
}

impl<S> SessionState<S> {
    /// Replays up to `k` filtered frames into the recogniser at speech onset.
    pub fn with_prepend(mut self, k: usize) -> Self {
        self.prepend = k;
        self
    }
}

/// Processes one frame.
pub fn step<M: StreamingModel>(model: &M, s: &mut SessionState<M::State>, frame: &FeatureFrame) -> Result<TraceRow> {
    if s.fsm == FsmState::End {
        return Err(Error::SessionEnded);
    }
    if let Some((ti, tm)) = s.last_t {
        if frame.t_index <= ti || frame.t_ms < tm {
            return Err(Error::Invalid(format!(
                "frame {} at {} ms does not follow frame {ti} at {tm} ms",
                frame.t_index, frame.t_ms
            )));
        }
    }
    s.last_t = Some((frame.t_index, frame.t_ms));

    let arrival = s.fsm;
    let (source, posterior) = model.endpoint(&mut s.model, frame, arrival == FsmState::AsrPlusEp)?;
    let p_speech = posterior[SpeechClass::Speech.id()];
    let th = s.thresholds;
    let mut row = TraceRow {
        t_ms: frame.t_ms,
        fsm_state: arrival,
        source,
        posterior,
        eos_cost: None,
        filtered: false,
        fired_acoustic: false,
        fired_decoder: false,
        endpoint: false,
        hyp_len: 0,
    };
    match arrival {
        FsmState::EpOnly => {
            if p_speech > th.vad {
                s.fsm = FsmState::AsrPlusEp;
                for held in std::mem::take(&mut s.held) {
                    if let Some(c) = model.recognise(&mut s.model, &held)? {
                        s.eos_cost = Some(c);
                    }
                }
                if let Some(c) = model.recognise(&mut s.model, frame)? {
                    s.eos_cost = Some(c);
                }
                row.eos_cost = s.eos_cost;
            } else {
                row.filtered = true;
                if s.prepend > 0 {
                    if s.held.len() == s.prepend {
                        s.held.pop_front();
                    }
                    s.held.push_back(frame.clone());
                }
            }
        }
        FsmState::AsrPlusEp => {
            if let Some(c) = model.recognise(&mut s.model, frame)? {
                s.eos_cost = Some(c);
            }
            row.eos_cost = s.eos_cost;
            match s.mode {
                Mode::ShortQuery => {
                    let d = declare_endpoint(&posterior, s.eos_cost, &th, frame.t_ms, s.pending);
                    s.pending = d.pending;
                    row.fired_acoustic = d.fired_acoustic;
                    row.fired_decoder = d.fired_decoder;
                    if d.endpoint {
                        row.endpoint = true;
                        s.fsm = FsmState::End;
                    }
                }
                Mode::Continuous => {
                    if p_speech < th.vad {
                        s.fsm = FsmState::EpOnly;
                    }
                }
            }
        }
        FsmState::End => unreachable!("checked above"),
    }
    row.hyp_len = model.hypothesis(&s.model).len();
    Ok(row)
}

/// Result of streaming one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionTrace {
    pub mode: Mode,
    pub thresholds: Thresholds,
    pub rows: Vec<TraceRow>,
    pub event: Option<EoqEvent>,
    pub ended: bool,
    /// Decoded tokens, end-of-query excluded.
    pub hypothesis: Vec<usize>,
}

impl SessionTrace {
    /// Time the session was closed: the fused event's endpoint, even if the
    /// stream ran out during the wait.
    pub fn endpoint_ms(&self) -> Option<u64> {
        self.event.map(|e| e.endpoint_ms)
    }

    pub fn unfiltered_frames(&self) -> usize {
        self.rows.iter().filter(|r| !r.filtered).count()
    }
}

/// Streams every frame of `frames` until the stream ends or the session
/// reaches `End`.
pub fn run_frames<M: StreamingModel>(
    model: &M,
    frames: &[FeatureFrame],
    mode: Mode,
    th: Thresholds,
    prepend: usize,
) -> Result<SessionTrace> {
    let mut s = start_session(model, mode, th)?.with_prepend(prepend);
    let mut rows = Vec::with_capacity(frames.len());
    for f in frames {
        let row = step(model, &mut s, f)?;
        rows.push(row);
        if s.fsm == FsmState::End {
            break;
        }
    }
    let ended = s.fsm == FsmState::End;
    if !ended {
        model.finish(&mut s.model)?;
    }
    Ok(SessionTrace {
        mode,
        thresholds: th,
        rows,
        event: s.pending,
        ended,
        hypothesis: model.hypothesis(&s.model).to_vec(),
    })
}

pub fn run_session<M: StreamingModel>(model: &M, utt: &UtteranceRecord, mode: Mode, th: Thresholds) -> Result<SessionTrace> {
    utt.validate(None, None)?;
    run_frames(model, &utt.frames, mode, th, 0)
}

/// Re-derives a short-query session under new end-of-query thresholds from a
/// trace recorded with those signals disabled. Exact, because nothing before
/// `End` depends on `eoq`, `eos` or `wait_ms`.
pub fn replay(full: &SessionTrace, th: &Thresholds) -> Result<SessionTrace> {
    if full.mode != Mode::ShortQuery {
        return Err(Error::Invalid("replay needs a short-query trace".into()));
    }
    if full.ended || full.event.is_some() {
        return Err(Error::Invalid("replay needs a trace recorded without end-of-query".into()));
    }
    if full.thresholds.vad != th.vad {
        return Err(Error::Invalid(format!(
            "trace was recorded with vad {} but replay asks for {}",
            full.thresholds.vad, th.vad
        )));
    }
    th.validate()?;
    let mut rows = Vec::with_capacity(full.rows.len());
    let mut pending = None;
    let mut ended = false;
    for r in &full.rows {
        let mut row = r.clone();
        if r.fsm_state == FsmState::AsrPlusEp {
            let d = declare_endpoint(&r.posterior, r.eos_cost, th, r.t_ms, pending);
            pending = d.pending;
            row.fired_acoustic = d.fired_acoustic;
            row.fired_decoder = d.fired_decoder;
            row.endpoint = d.endpoint;
            ended = d.endpoint;
        }
        rows.push(row);
        if ended {
            break;
        }
    }
    let hypothesis = if ended {
        full.hypothesis[..rows.last().map_or(0, |r| r.hyp_len)].to_vec()
    } else {
        full.hypothesis.clone()
    };
    Ok(SessionTrace {
        mode: full.mode,
        thresholds: *th,
        rows,
        event: pending,
        ended,
        hypothesis,
    })
}

/// Emission cap per encoder step for the greedy decoder.
pub const MAX_SYMBOLS_PER_STEP: usize = 3;

/// A trained joint model wired for streaming.
#[derive(Debug, Clone)]
pub struct StreamingSystem {
    pub model: JointModel,
    pub store: ParamStore,
    pub routing: EpRouting,
}

#[derive(Debug, Clone)]
pub struct SystemState {
    shared: SharedState,
    latents: VecDeque<(usize, Vec<f64>)>,
    trunk: TrunkState,
    ep: EpState,
    history: Vec<usize>,
}

const LATENT_CACHE: usize = 64;

impl StreamingSystem {
    pub fn new(model: JointModel, store: ParamStore, routing: EpRouting) -> Self {
        StreamingSystem { model, store, routing }
    }

    fn encode(&self, st: &mut SystemState, frame: &FeatureFrame) -> Result<Vec<f64>> {
        if let Some(i) = st.latents.iter().position(|(t, _)| *t == frame.t_index) {
            return Ok(st.latents[i].1.clone());
        }
        let lat = self.model.shared.step(&self.store, &frame.features, &mut st.shared)?;
        if st.latents.len() == LATENT_CACHE {
            st.latents.pop_front();
        }
        st.latents.push_back((frame.t_index, lat.clone()));
        Ok(lat)
    }

    /// Greedy decoding of one encoder vector; returns the end-of-query cost
    /// under the last joint distribution.
    fn decode(&self, st: &mut SystemState, enc: &[f64]) -> Result<f64> {
        let tr = &self.model.transducer;
        let ev = tr.enc_vector(&self.store, enc)?;
        let mut cost = f64::INFINITY;
        for _ in 0..MAX_SYMBOLS_PER_STEP {
            let pv = tr.pred_vector(&self.store, tr.context(&st.history)?)?;
            let lp = log_softmax(&tr.joint_from_vectors(&self.store, &ev, &pv)?)?;
            cost = -lp[tr.eos_id()];
            let k = argmax(&lp);
            if k == tr.blank_id() || k == tr.eos_id() {
                break;
            }
            st.history.push(k);
        }
        Ok(cost)
    }
}

impl StreamingModel for StreamingSystem {
    type State = SystemState;

    fn start(&self) -> SystemState {
        SystemState {
            shared: self.model.shared.start(),
            latents: VecDeque::new(),
            trunk: self.model.trunk.start(),
            ep: self.model.ep.start(),
            history: Vec::new(),
        }
    }

    fn endpoint(&self, st: &mut SystemState, frame: &FeatureFrame, asr_active: bool) -> Result<(SwitchSource, [f64; 4])> {
        let source = match self.routing {
            EpRouting::AudioOnly => SwitchSource::AudioFrames,
            EpRouting::LatentOnly => SwitchSource::SharedLatent,
            EpRouting::Switch if asr_active => SwitchSource::SharedLatent,
            EpRouting::Switch => SwitchSource::AudioFrames,
        };
        let p = match source {
            SwitchSource::AudioFrames => self.model.ep.step(&self.store, &frame.features, source, &mut st.ep)?,
            SwitchSource::SharedLatent => {
                let lat = self.encode(st, frame)?;
                self.model.ep.step(&self.store, &lat, source, &mut st.ep)?
            }
        };
        Ok((source, p))
    }

    fn recognise(&self, st: &mut SystemState, frame: &FeatureFrame) -> Result<Option<f64>> {
        let lat = self.encode(st, frame)?;
        // frames up to this one will not be asked for again
        while st.latents.front().is_some_and(|(t, _)| *t <= frame.t_index) {
            st.latents.pop_front();
        }
        match self.model.trunk.push(&self.store, &lat, &mut st.trunk)? {
            Some(enc) => self.decode(st, &enc).map(Some),
            None => Ok(None),
        }
    }

    fn finish(&self, st: &mut SystemState) -> Result<()> {
        if let Some(enc) = self.model.trunk.flush(&self.store, &mut st.trunk)? {
            self.decode(st, &enc)?;
        }
        Ok(())
    }

    fn hypothesis<'s>(&self, st: &'s SystemState) -> &'s [usize] {
        &st.history
    }
}

/// Scripted outputs for one frame of a [`ScriptedModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptFrame {
    /// Posterior when fed audio.
    pub audio: [f64; 4],
    /// Posterior when fed latents; defaults to `audio`.
    #[serde(default)]
    pub latent: Option<[f64; 4]>,
    /// Decoder cost reported if the recogniser sees this frame.
    #[serde(default)]
    pub eos_cost: Option<f64>,
    /// Tokens decoded if the recogniser sees this frame.
    #[serde(default)]
    pub emit: Vec<usize>,
}

/// Test double that replays per-frame posteriors and decoder outputs, routed
/// like the switch connection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedModel {
    pub frames: Vec<ScriptFrame>,
}

#[derive(Debug, Clone, Default)]
pub struct ScriptState {
    hypothesis: Vec<usize>,
    /// Frame indices the recogniser consumed, in order.
    pub recognised: Vec<usize>,
}

impl ScriptedModel {
    fn frame(&self, f: &FeatureFrame) -> Result<&ScriptFrame> {
        self.frames
            .get(f.t_index)
            .ok_or_else(|| Error::Invalid(format!("script has no frame {}", f.t_index)))
    }

    /// Feature frames at `period_ms` matching the script length.
    pub fn feature_frames(&self, period_ms: u64) -> Vec<FeatureFrame> {
        (0..self.frames.len())
            .map(|t| FeatureFrame {
                t_index: t,
                t_ms: t as u64 * period_ms,
                features: Vec::new(),
                domain_id: None,
            })
            .collect()
    }
}

impl StreamingModel for ScriptedModel {
    type State = ScriptState;

    fn start(&self) -> ScriptState {
        ScriptState::default()
    }

    fn endpoint(&self, _: &mut ScriptState, frame: &FeatureFrame, asr_active: bool) -> Result<(SwitchSource, [f64; 4])> {
        let f = self.frame(frame)?;
        Ok(if asr_active {
            (SwitchSource::SharedLatent, f.latent.unwrap_or(f.audio))
        } else {
            (SwitchSource::AudioFrames, f.audio)
        })
    }

    fn recognise(&self, st: &mut ScriptState, frame: &FeatureFrame) -> Result<Option<f64>> {
        let f = self.frame(frame)?;
        st.recognised.push(frame.t_index);
        st.hypothesis.extend(&f.emit);
        Ok(f.eos_cost)
    }

    fn finish(&self, _: &mut ScriptState) -> Result<()> {
        Ok(())
    }

    fn hypothesis<'s>(&self, st: &'s ScriptState) -> &'s [usize] {
        &st.hypothesis
    }
}

pub const TRACE_COLUMNS: [&str; 12] = [
    "t_ms",
    "fsm_state",
    "source",
    "p_speech",
    "p_initial",
    "p_intermediate",
    "p_final",
    "eos_cost",
    "filtered",
    "fired_acoustic",
    "fired_decoder",
    "endpoint",
];

/// Formats `x` with 9 significant digits, switching to exponent notation
/// outside `[1e-5, 1e9)`.
pub fn fmt_sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { format!("{x}") };
    }
    let sci = format!("{x:.8e}");
    let exp: i32 = sci[sci.find('e').expect("exponent") + 1..].parse().expect("exponent digits");
    if (-5..9).contains(&exp) {
        let s = format!("{:.*}", (8 - exp) as usize, x);
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        sci
    }
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = TRACE_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let p = r.posterior;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.t_ms,
            r.fsm_state.as_str(),
            match r.source {
                SwitchSource::AudioFrames => "AudioFrames",
                SwitchSource::SharedLatent => "SharedLatent",
            },
            fmt_sig9(p[0]),
            fmt_sig9(p[1]),
            fmt_sig9(p[2]),
            fmt_sig9(p[3]),
            r.eos_cost.map(fmt_sig9).unwrap_or_default(),
            flag(r.filtered),
            flag(r.fired_acoustic),
            flag(r.fired_decoder),
            flag(r.endpoint),
        );
    }
    out
}

pub fn export_trace(trace: &SessionTrace, path: &Path) -> Result<()> {
    std::fs::write(path, trace_csv(&trace.rows)).map_err(|e| Error::io(path, e))
}

/// Parses a trace CSV. `hyp_len` is not exported and reads back as zero.
pub fn parse_trace_csv(text: &str, path: &Path) -> Result<Vec<TraceRow>> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| perr(1, "missing header".into()))?;
    if header != TRACE_COLUMNS.join(",") {
        return Err(perr(1, format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let c: Vec<&str> = line.split(',').collect();
        if c.len() != TRACE_COLUMNS.len() {
            return Err(perr(n, format!("expected {} fields, found {}", TRACE_COLUMNS.len(), c.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| perr(n, format!("bad number {s:?}: {e}")));
        let bit = |s: &str| match s {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(perr(n, format!("bad flag {s:?}"))),
        };
        rows.push(TraceRow {
            t_ms: c[0].parse().map_err(|e| perr(n, format!("bad t_ms: {e}")))?,
            fsm_state: match c[1] {
                "EpOnly" => FsmState::EpOnly,
                "AsrPlusEp" => FsmState::AsrPlusEp,
                "End" => FsmState::End,
                s => return Err(perr(n, format!("bad fsm_state {s:?}"))),
            },
            source: match c[2] {
                "AudioFrames" => SwitchSource::AudioFrames,
                "SharedLatent" => SwitchSource::SharedLatent,
                s => return Err(perr(n, format!("bad source {s:?}"))),
            },
            posterior: [num(c[3])?, num(c[4])?, num(c[5])?, num(c[6])?],
            eos_cost: if c[7].is_empty() { None } else { Some(num(c[7])?) },
            filtered: bit(c[8])?,
            fired_acoustic: bit(c[9])?,
            fired_decoder: bit(c[10])?,
            endpoint: bit(c[11])?,
            hyp_len: 0,
        });
    }
    Ok(rows)
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trace_csv(&text, path)
}
