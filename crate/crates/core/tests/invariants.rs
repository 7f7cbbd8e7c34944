use jointep::corpus::{label_frames, SpeechClass, UtteranceRecord, WordSegment};
use jointep::evalkit::{edit_counts, pareto_envelope, speech_pct, wer};
use jointep::runtime::{replay, run_frames, FsmState, Mode, ScriptFrame, ScriptedModel, Thresholds};
use proptest::prelude::*;

fn posterior() -> impl Strategy<Value = [f64; 4]> {
    prop::array::uniform4(0.0f64..1.0).prop_map(|w| {
        let s: f64 = w.iter().sum::<f64>() + 1e-9;
        [w[0] / s, w[1] / s, w[2] / s, w[3] / s]
    })
}

fn script_frame() -> impl Strategy<Value = ScriptFrame> {
    (
        posterior(),
        prop::option::of(posterior()),
        prop::option::of(0.0f64..4.0),
        prop::collection::vec(0usize..6, 0..2),
    )
        .prop_map(|(audio, latent, eos_cost, emit)| ScriptFrame { audio, latent, eos_cost, emit })
}

fn script() -> impl Strategy<Value = ScriptedModel> {
    prop::collection::vec(script_frame(), 1..40).prop_map(|frames| ScriptedModel { frames })
}

fn thresholds() -> impl Strategy<Value = Thresholds> {
    (0.0f64..1.0, 0.0f64..=1.0, 0.0f64..3.0, prop::sample::select(vec![0u64, 30, 60, 90, 150]))
        .prop_map(|(vad, eoq, eos, wait_ms)| Thresholds { vad, eoq, eos, wait_ms })
}

/// Segments on a 10 ms grid inside `frames` frames of 30 ms.
fn record() -> impl Strategy<Value = UtteranceRecord> {
    (1usize..25).prop_flat_map(|frames| {
        let dur = frames as u64 * 30;
        prop::collection::vec((0..dur / 10, 1u64..9), 0..4).prop_map(move |raw| {
            let mut segs: Vec<WordSegment> = Vec::new();
            let mut cursor = 0;
            let mut starts: Vec<_> = raw.iter().map(|&(s, l)| (s * 10, l * 10)).collect();
            starts.sort();
            for (s, l) in starts {
                let s = s.max(cursor);
                let e = (s + l).min(dur);
                if e > s {
                    segs.push(WordSegment { start_ms: s, end_ms: e, token_ids: vec![0] });
                    cursor = e;
                }
            }
            UtteranceRecord::from_parts("p", 30, vec![vec![0.0]; frames], segs)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn filtered_iff_arrived_in_ep_only(s in script(), th in thresholds(), continuous in any::<bool>()) {
        let mode = if continuous { Mode::Continuous } else { Mode::ShortQuery };
        let frames = s.feature_frames(30);
        let tr = run_frames(&s, &frames, mode, th, 0).unwrap();
        prop_assert!(!tr.rows.is_empty() && tr.rows.len() <= frames.len());
        if !tr.ended {
            prop_assert_eq!(tr.rows.len(), frames.len());
        }
        for r in &tr.rows {
            prop_assert_eq!(r.filtered, r.fsm_state == FsmState::EpOnly && !(r.posterior[0] > th.vad));
            prop_assert!(r.fsm_state != FsmState::End);
            if mode == Mode::Continuous {
                prop_assert!(!r.fired_acoustic && !r.fired_decoder && !r.endpoint);
            }
        }
        let sp = speech_pct(std::slice::from_ref(&tr)).unwrap();
        prop_assert!((0.0..=1.0).contains(&sp));
        // the recogniser saw exactly the unfiltered frames
        let want: Vec<usize> = tr
            .rows
            .iter()
            .enumerate()
            .filter(|(_, r)| !r.filtered)
            .flat_map(|(i, _)| s.frames[i].emit.clone())
            .collect();
        prop_assert_eq!(tr.hypothesis, want);
    }

    #[test]
    fn replay_equals_direct_run(s in script(), th in thresholds()) {
        let frames = s.feature_frames(30);
        let direct = run_frames(&s, &frames, Mode::ShortQuery, th, 0).unwrap();
        let full = run_frames(&s, &frames, Mode::ShortQuery, Thresholds::never_ending(th.vad), 0).unwrap();
        let replayed = replay(&full, &th).unwrap();
        prop_assert_eq!(replayed, direct);
    }

    #[test]
    fn label_sequence_invariants(u in record()) {
        let labels = label_frames(&u).unwrap().labels;
        prop_assert_eq!(labels.len(), u.num_frames());
        let speech: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == SpeechClass::Speech).collect();
        for (f, l) in labels.iter().enumerate() {
            let (lo, hi) = (f as u64 * 30, (f as u64 + 1) * 30);
            let overlaps = u.segments.iter().any(|s| s.start_ms < hi && s.end_ms > lo);
            prop_assert_eq!(*l == SpeechClass::Speech, overlaps);
            let want = match (speech.first(), speech.last()) {
                _ if overlaps => SpeechClass::Speech,
                (None, _) => SpeechClass::InitialSilence,
                (Some(&a), _) if f < a => SpeechClass::InitialSilence,
                (_, Some(&b)) if f > b => SpeechClass::FinalSilence,
                _ => SpeechClass::IntermediateSilence,
            };
            prop_assert_eq!(*l, want);
        }
    }

    #[test]
    fn wer_counts_are_consistent(r in prop::collection::vec(0u8..4, 1..12), h in prop::collection::vec(0u8..4, 0..12)) {
        let (d, i, s) = edit_counts(&r, &h);
        prop_assert_eq!(r.len() + i, h.len() + d);
        prop_assert!(d + i + s <= r.len().max(h.len()));
        let w = wer(&r, &h).unwrap();
        prop_assert!((w.wer - (w.del_rate + w.ins_rate + w.sub_rate)).abs() < 1e-9);
        prop_assert_eq!(wer(&r, &r).unwrap().errors(), 0);
    }

    #[test]
    fn envelope_is_monotone(pairs in prop::collection::vec((0u8..20, -100i64..500), 1..30)) {
        let pairs: Vec<(f64, i64)> = pairs.into_iter().map(|(w, e)| (w as f64 / 2.0, e)).collect();
        let env = pareto_envelope(&pairs);
        prop_assert!(!env.is_empty());
        for w in env.windows(2) {
            prop_assert!(w[0].wer < w[1].wer && w[0].ep50_ms > w[1].ep50_ms);
        }
        let best = pairs.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        prop_assert_eq!(env[0].wer, best);
    }
}
