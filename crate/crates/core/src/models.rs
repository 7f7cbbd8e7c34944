//! The endpointer, the shared encoder trunk, the ASR-only encoder layers and
//! the transducer prediction/joint networks.
//!
//! Output symbols are the `V` vocabulary tokens, then the end-of-query token
//! at index `V`, then blank at `V + 1`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::RnntLattice;
use crate::netkit::{
    log_softmax, softmax, CausalBlock, CausalBlockCache, CausalBlockState, Dense, Lstm, LstmCache, LstmState, ParamId,
    ParamStore,
};

/// Dimensions of the joint model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_in: usize,
    pub d_enc: usize,
    pub ep_hidden: usize,
    pub ep_layers: usize,
    pub vocab_size: usize,
    pub d_embed: usize,
    pub d_joint: usize,
    pub conv_kernel: usize,
    pub shared_blocks: usize,
    pub asr_blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_in: 8,
            d_enc: 32,
            ep_hidden: 32,
            ep_layers: 3,
            vocab_size: 8,
            d_embed: 16,
            d_joint: 32,
            conv_kernel: 3,
            shared_blocks: 2,
            asr_blocks: 2,
        }
    }
}

/// Frames stacked per encoder step by the time-reduction layer.
pub const TIME_REDUCTION: usize = 2;

impl ModelConfig {
    pub fn eos_id(&self) -> usize {
        self.vocab_size
    }

    pub fn blank_id(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn num_outputs(&self) -> usize {
        self.vocab_size + 2
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_in", self.d_in),
            ("d_enc", self.d_enc),
            ("ep_hidden", self.ep_hidden),
            ("ep_layers", self.ep_layers),
            ("vocab_size", self.vocab_size),
            ("d_embed", self.d_embed),
            ("d_joint", self.d_joint),
            ("conv_kernel", self.conv_kernel),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("model {name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SwitchSource {
    AudioFrames,
    SharedLatent,
}

impl SwitchSource {
    pub fn as_str(self) -> &'static str {
        match self {
            SwitchSource::AudioFrames => "audio",
            SwitchSource::SharedLatent => "latent",
        }
    }
}

/// Draws the endpointer input source for one utterance with equal
/// probability.
pub fn sample_switch<R: Rng>(rng: &mut R) -> SwitchSource {
    sample_switch_with(rng, 0.5)
}

/// Draws `AudioFrames` with probability `p_audio`.
pub fn sample_switch_with<R: Rng>(rng: &mut R, p_audio: f64) -> SwitchSource {
    if rng.gen::<f64>() < p_audio {
        SwitchSource::AudioFrames
    } else {
        SwitchSource::SharedLatent
    }
}

/// Per-frame distribution over the four speech classes.
#[derive(Debug, Clone, PartialEq)]
pub struct EpPosterior {
    pub rows: Vec<[f64; 4]>,
}

impl EpPosterior {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn argmax(&self) -> Vec<usize> {
        self.rows.iter().map(|r| argmax(r)).collect()
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn check_dim(op: &'static str, xs: &[Vec<f64>], d: usize) -> Result<()> {
    if let Some((t, x)) = xs.iter().enumerate().find(|(_, x)| x.len() != d) {
        return Err(Error::shape(op, format!("frame {t} has {} features, expected {d}", x.len())));
    }
    Ok(())
}

/// Endpointer: one input projection per source feeding a shared LSTM stack
/// and a 4-way head.
#[derive(Debug, Clone)]
pub struct EpModel {
    pub proj_audio: Dense,
    pub proj_latent: Dense,
    pub lstm: Vec<Lstm>,
    pub head: Dense,
}

#[derive(Debug, Clone)]
pub struct EpState {
    layers: Vec<LstmState>,
}

pub struct EpCache {
    source: SwitchSource,
    inputs: Vec<Vec<f64>>,
    proj: Vec<Vec<f64>>,
    steps: Vec<Vec<LstmCache>>,
    tops: Vec<Vec<f64>>,
}

impl EpModel {
    fn init<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let h = cfg.ep_hidden;
        let proj_audio = Dense::init(store, "ep.proj_audio", cfg.d_in, h, rng)?;
        let proj_latent = Dense::init(store, "ep.proj_latent", cfg.d_enc, h, rng)?;
        let lstm = (0..cfg.ep_layers)
            .map(|l| Lstm::init(store, &format!("ep.lstm{l}"), h, h, rng))
            .collect::<Result<_>>()?;
        let head = Dense::init(store, "ep.head", h, 4, rng)?;
        Ok(EpModel {
            proj_audio,
            proj_latent,
            lstm,
            head,
        })
    }

    fn bind(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let h = cfg.ep_hidden;
        Ok(EpModel {
            proj_audio: Dense::bind(store, "ep.proj_audio", cfg.d_in, h)?,
            proj_latent: Dense::bind(store, "ep.proj_latent", cfg.d_enc, h)?,
            lstm: (0..cfg.ep_layers)
                .map(|l| Lstm::bind(store, &format!("ep.lstm{l}"), h, h))
                .collect::<Result<_>>()?,
            head: Dense::bind(store, "ep.head", h, 4)?,
        })
    }

    pub fn proj(&self, source: SwitchSource) -> &Dense {
        match source {
            SwitchSource::AudioFrames => &self.proj_audio,
            SwitchSource::SharedLatent => &self.proj_latent,
        }
    }

    pub fn input_dim(&self, source: SwitchSource) -> usize {
        self.proj(source).d_in
    }

    pub fn start(&self) -> EpState {
        EpState {
            layers: self.lstm.iter().map(|l| LstmState::zeros(l.hidden)).collect(),
        }
    }

    fn step_cached(
        &self,
        store: &ParamStore,
        input: &[f64],
        source: SwitchSource,
        st: &mut EpState,
    ) -> Result<([f64; 4], Vec<f64>, Vec<LstmCache>, Vec<f64>)> {
        let proj = self.proj(source);
        if input.len() != proj.d_in {
            return Err(Error::shape(
                "ep_forward",
                format!("{source:?} input expects {} features, got {}", proj.d_in, input.len()),
            ));
        }
        let p = proj.forward(store, input)?;
        let mut x = p.clone();
        let mut caches = Vec::with_capacity(self.lstm.len());
        for (layer, state) in self.lstm.iter().zip(st.layers.iter_mut()) {
            let (next, cache) = layer.step(store, &x, state)?;
            x = next.h.clone();
            *state = next;
            caches.push(cache);
        }
        let z = self.head.forward(store, &x)?;
        Ok(([z[0], z[1], z[2], z[3]], p, caches, x))
    }

    /// Streaming step: consumes one input vector and returns the posterior.
    pub fn step(&self, store: &ParamStore, input: &[f64], source: SwitchSource, st: &mut EpState) -> Result<[f64; 4]> {
        let (z, ..) = self.step_cached(store, input, source, st)?;
        let p = softmax(&z)?;
        Ok([p[0], p[1], p[2], p[3]])
    }

    /// Runs the whole sequence from a zero state.
    pub fn forward(&self, store: &ParamStore, inputs: &[Vec<f64>], source: SwitchSource) -> Result<(EpPosterior, EpCache)> {
        let mut st = self.start();
        let mut cache = EpCache {
            source,
            inputs: inputs.to_vec(),
            proj: Vec::with_capacity(inputs.len()),
            steps: Vec::with_capacity(inputs.len()),
            tops: Vec::with_capacity(inputs.len()),
        };
        let mut rows = Vec::with_capacity(inputs.len());
        for input in inputs {
            let (z, p, caches, top) = self.step_cached(store, input, source, &mut st)?;
            let s = softmax(&z)?;
            rows.push([s[0], s[1], s[2], s[3]]);
            cache.proj.push(p);
            cache.steps.push(caches);
            cache.tops.push(top);
        }
        Ok((EpPosterior { rows }, cache))
    }

    /// Backpropagation through time from head-logit gradients. Returns the
    /// gradient with respect to each input vector.
    pub fn backward(&self, store: &mut ParamStore, cache: &EpCache, dlogits: &[[f64; 4]]) -> Vec<Vec<f64>> {
        let n = cache.inputs.len();
        let layers = self.lstm.len();
        let mut dh_next: Vec<Vec<f64>> = self.lstm.iter().map(|l| vec![0.0; l.hidden]).collect();
        let mut dc_next = dh_next.clone();
        let proj = *self.proj(cache.source);
        let mut dinputs = vec![vec![0.0; proj.d_in]; n];
        for t in (0..n).rev() {
            let mut dh = vec![0.0; self.head.d_in];
            self.head.backward(store, &cache.tops[t], &dlogits[t], Some(&mut dh));
            for l in (0..layers).rev() {
                for (a, b) in dh.iter_mut().zip(&dh_next[l]) {
                    *a += b;
                }
                let (dx, dhp, dcp) = self.lstm[l].step_backward(store, &cache.steps[t][l], &dh, &dc_next[l]);
                dh_next[l] = dhp;
                dc_next[l] = dcp;
                dh = dx;
            }
            proj.backward(store, &cache.inputs[t], &dh, Some(&mut dinputs[t]));
        }
        dinputs
    }
}

/// Input projection followed by the causal blocks shared between the ASR
/// encoder and the endpointer.
#[derive(Debug, Clone)]
pub struct SharedEncoder {
    pub input: Dense,
    pub blocks: Vec<CausalBlock>,
}

pub struct StackCache {
    block_inputs: Vec<Vec<Vec<f64>>>,
    block_caches: Vec<CausalBlockCache>,
}

fn blocks_forward(blocks: &[CausalBlock], store: &ParamStore, xs: Vec<Vec<f64>>) -> Result<(Vec<Vec<f64>>, StackCache)> {
    let mut cache = StackCache {
        block_inputs: Vec::with_capacity(blocks.len()),
        block_caches: Vec::with_capacity(blocks.len()),
    };
    let mut cur = xs;
    for b in blocks {
        let (ys, c) = b.forward(store, &cur)?;
        cache.block_inputs.push(cur);
        cache.block_caches.push(c);
        cur = ys;
    }
    Ok((cur, cache))
}

fn blocks_backward(blocks: &[CausalBlock], store: &mut ParamStore, cache: &StackCache, dys: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let mut d = dys;
    for (i, b) in blocks.iter().enumerate().rev() {
        d = b.backward(store, &cache.block_inputs[i], &cache.block_caches[i], &d);
    }
    d
}

#[derive(Debug, Clone)]
pub struct SharedState {
    blocks: Vec<CausalBlockState>,
}

pub struct SharedCache {
    proj: Vec<Vec<f64>>,
    stack: StackCache,
}

impl SharedEncoder {
    fn init<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        Ok(SharedEncoder {
            input: Dense::init(store, "shared.in", cfg.d_in, cfg.d_enc, rng)?,
            blocks: (0..cfg.shared_blocks)
                .map(|i| CausalBlock::init(store, &format!("shared.block{i}"), cfg.d_enc, cfg.conv_kernel, rng))
                .collect::<Result<_>>()?,
        })
    }

    fn bind(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        Ok(SharedEncoder {
            input: Dense::bind(store, "shared.in", cfg.d_in, cfg.d_enc)?,
            blocks: (0..cfg.shared_blocks)
                .map(|i| CausalBlock::bind(store, &format!("shared.block{i}"), cfg.d_enc, cfg.conv_kernel))
                .collect::<Result<_>>()?,
        })
    }

    pub fn forward(&self, store: &ParamStore, frames: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, SharedCache)> {
        if frames.is_empty() {
            return Err(Error::Invalid("shared_encode on an empty sequence".into()));
        }
        check_dim("shared_encode", frames, self.input.d_in)?;
        let proj = frames
            .iter()
            .map(|x| self.input.forward(store, x))
            .collect::<Result<Vec<_>>>()?;
        let (lat, stack) = blocks_forward(&self.blocks, store, proj.clone())?;
        Ok((lat, SharedCache { proj, stack }))
    }

    pub fn backward(&self, store: &mut ParamStore, frames: &[Vec<f64>], cache: &SharedCache, dlat: Vec<Vec<f64>>) {
        let dproj = blocks_backward(&self.blocks, store, &cache.stack, dlat);
        debug_assert_eq!(cache.proj.len(), frames.len());
        for (x, d) in frames.iter().zip(&dproj) {
            self.input.backward(store, x, d, None);
        }
    }

    pub fn start(&self) -> SharedState {
        SharedState {
            blocks: vec![CausalBlockState::default(); self.blocks.len()],
        }
    }

    pub fn step(&self, store: &ParamStore, frame: &[f64], st: &mut SharedState) -> Result<Vec<f64>> {
        if frame.len() != self.input.d_in {
            return Err(Error::shape(
                "shared_encode",
                format!("frame has {} features, expected {}", frame.len(), self.input.d_in),
            ));
        }
        let mut x = self.input.forward(store, frame)?;
        for (b, s) in self.blocks.iter().zip(st.blocks.iter_mut()) {
            x = b.step(store, &x, s)?;
        }
        Ok(x)
    }
}

/// Frame-pair stacking followed by the ASR-only causal blocks.
#[derive(Debug, Clone)]
pub struct AsrTrunk {
    pub reduce: Dense,
    pub blocks: Vec<CausalBlock>,
    d_enc: usize,
}

pub struct TrunkCache {
    in_len: usize,
    stacked: Vec<Vec<f64>>,
    reduced: Vec<Vec<f64>>,
    stack: StackCache,
}

#[derive(Debug, Clone)]
pub struct TrunkState {
    pending: Option<Vec<f64>>,
    blocks: Vec<CausalBlockState>,
}

impl AsrTrunk {
    fn init<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        Ok(AsrTrunk {
            reduce: Dense::init(store, "trunk.reduce", TIME_REDUCTION * cfg.d_enc, cfg.d_enc, rng)?,
            blocks: (0..cfg.asr_blocks)
                .map(|i| CausalBlock::init(store, &format!("trunk.block{i}"), cfg.d_enc, cfg.conv_kernel, rng))
                .collect::<Result<_>>()?,
            d_enc: cfg.d_enc,
        })
    }

    fn bind(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        Ok(AsrTrunk {
            reduce: Dense::bind(store, "trunk.reduce", TIME_REDUCTION * cfg.d_enc, cfg.d_enc)?,
            blocks: (0..cfg.asr_blocks)
                .map(|i| CausalBlock::bind(store, &format!("trunk.block{i}"), cfg.d_enc, cfg.conv_kernel))
                .collect::<Result<_>>()?,
            d_enc: cfg.d_enc,
        })
    }

    fn stack_pair(&self, a: &[f64], b: Option<&[f64]>) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.d_enc);
        v.extend_from_slice(a);
        match b {
            Some(b) => v.extend_from_slice(b),
            None => v.extend(std::iter::repeat_n(0.0, self.d_enc)),
        }
        v
    }

    /// Output length is `ceil(T / 2)`; an odd tail is paired with zeros.
    pub fn forward(&self, store: &ParamStore, latents: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, TrunkCache)> {
        if latents.is_empty() {
            return Err(Error::Invalid("asr_encode on an empty sequence".into()));
        }
        check_dim("asr_encode", latents, self.d_enc)?;
        let stacked: Vec<Vec<f64>> = latents
            .chunks(TIME_REDUCTION)
            .map(|pair| self.stack_pair(&pair[0], pair.get(1).map(|v| v.as_slice())))
            .collect();
        let reduced = stacked
            .iter()
            .map(|x| self.reduce.forward(store, x))
            .collect::<Result<Vec<_>>>()?;
        let (enc, stack) = blocks_forward(&self.blocks, store, reduced.clone())?;
        Ok((
            enc,
            TrunkCache {
                in_len: latents.len(),
                stacked,
                reduced,
                stack,
            },
        ))
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &TrunkCache, denc: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
        let dred = blocks_backward(&self.blocks, store, &cache.stack, denc);
        debug_assert_eq!(dred.len(), cache.reduced.len());
        let mut dlat = Vec::with_capacity(cache.in_len + 1);
        for (x, d) in cache.stacked.iter().zip(&dred) {
            let mut dx = vec![0.0; x.len()];
            self.reduce.backward(store, x, d, Some(&mut dx));
            dlat.push(dx[..self.d_enc].to_vec());
            dlat.push(dx[self.d_enc..].to_vec());
        }
        dlat.truncate(cache.in_len);
        dlat
    }

    pub fn start(&self) -> TrunkState {
        TrunkState {
            pending: None,
            blocks: vec![CausalBlockState::default(); self.blocks.len()],
        }
    }

    fn emit(&self, store: &ParamStore, stacked: &[f64], st: &mut TrunkState) -> Result<Vec<f64>> {
        let mut x = self.reduce.forward(store, stacked)?;
        for (b, s) in self.blocks.iter().zip(st.blocks.iter_mut()) {
            x = b.step(store, &x, s)?;
        }
        Ok(x)
    }

    /// Streaming: returns an encoder vector every second latent.
    pub fn push(&self, store: &ParamStore, latent: &[f64], st: &mut TrunkState) -> Result<Option<Vec<f64>>> {
        if latent.len() != self.d_enc {
            return Err(Error::shape("asr_encode", format!("latent has {} values", latent.len())));
        }
        match st.pending.take() {
            None => {
                st.pending = Some(latent.to_vec());
                Ok(None)
            }
            Some(first) => {
                let stacked = self.stack_pair(&first, Some(latent));
                self.emit(store, &stacked, st).map(Some)
            }
        }
    }

    /// Emits a zero-padded encoder vector for a dangling odd latent.
    pub fn flush(&self, store: &ParamStore, st: &mut TrunkState) -> Result<Option<Vec<f64>>> {
        match st.pending.take() {
            None => Ok(None),
            Some(first) => {
                let stacked = self.stack_pair(&first, None);
                self.emit(store, &stacked, st).map(Some)
            }
        }
    }
}

/// Prediction network over the two most recent non-blank tokens plus the
/// joint network.
#[derive(Debug, Clone)]
pub struct Transducer {
    pub embed: ParamId,
    pub pred: Dense,
    pub enc: Dense,
    pub out: Dense,
    vocab_size: usize,
    d_embed: usize,
}

pub struct TransducerCache {
    contexts: Vec<(usize, usize)>,
    pred_in: Vec<Vec<f64>>,
    /// joint hidden activations, `(t, u)` row-major
    hidden: Vec<Vec<f64>>,
}

impl Transducer {
    fn init<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let embed = store.add_uniform("pred.embed", cfg.vocab_size + 2, cfg.d_embed, 1.0, rng)?;
        Ok(Transducer {
            embed,
            pred: Dense::init(store, "pred.proj", 2 * cfg.d_embed, cfg.d_joint, rng)?,
            enc: Dense::init(store, "joint.enc", cfg.d_enc, cfg.d_joint, rng)?,
            out: Dense::init(store, "joint.out", cfg.d_joint, cfg.num_outputs(), rng)?,
            vocab_size: cfg.vocab_size,
            d_embed: cfg.d_embed,
        })
    }

    fn bind(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        Ok(Transducer {
            embed: store.bind("pred.embed", cfg.vocab_size + 2, cfg.d_embed)?,
            pred: Dense::bind(store, "pred.proj", 2 * cfg.d_embed, cfg.d_joint)?,
            enc: Dense::bind(store, "joint.enc", cfg.d_enc, cfg.d_joint)?,
            out: Dense::bind(store, "joint.out", cfg.d_joint, cfg.vocab_size + 2)?,
            vocab_size: cfg.vocab_size,
            d_embed: cfg.d_embed,
        })
    }

    pub fn num_outputs(&self) -> usize {
        self.vocab_size + 2
    }

    pub fn blank_id(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn eos_id(&self) -> usize {
        self.vocab_size
    }

    /// `(older, newer)` embedding rows for the context after `history`.
    pub fn context(&self, history: &[usize]) -> Result<(usize, usize)> {
        let sos = self.vocab_size + 1;
        if let Some(&bad) = history.iter().rev().take(2).find(|&&t| t > self.vocab_size) {
            return Err(Error::Invalid(format!(
                "context token {bad} is not a vocabulary or end-of-query id"
            )));
        }
        let n = history.len();
        let newer = if n >= 1 { history[n - 1] } else { sos };
        let older = if n >= 2 { history[n - 2] } else { sos };
        Ok((older, newer))
    }

    fn pred_input(&self, store: &ParamStore, ctx: (usize, usize)) -> Vec<f64> {
        let e = store.value(self.embed);
        let mut v = Vec::with_capacity(2 * self.d_embed);
        v.extend_from_slice(e.row(ctx.0));
        v.extend_from_slice(e.row(ctx.1));
        v
    }

    pub fn pred_vector(&self, store: &ParamStore, ctx: (usize, usize)) -> Result<Vec<f64>> {
        self.pred.forward(store, &self.pred_input(store, ctx))
    }

    pub fn enc_vector(&self, store: &ParamStore, enc_u: &[f64]) -> Result<Vec<f64>> {
        if enc_u.len() != self.enc.d_in {
            return Err(Error::shape(
                "joint_logits",
                format!("encoder vector has {} values, expected {}", enc_u.len(), self.enc.d_in),
            ));
        }
        self.enc.forward(store, enc_u)
    }

    fn joint_hidden(enc_v: &[f64], pred_v: &[f64]) -> Vec<f64> {
        enc_v.iter().zip(pred_v).map(|(a, b)| (a + b).tanh()).collect()
    }

    /// Logits over `V + 2` symbols from projected encoder and prediction
    /// vectors.
    pub fn joint_from_vectors(&self, store: &ParamStore, enc_v: &[f64], pred_v: &[f64]) -> Result<Vec<f64>> {
        self.out.forward(store, &Self::joint_hidden(enc_v, pred_v))
    }

    /// Joint logits for one encoder vector and the last non-blank tokens.
    pub fn joint_logits(&self, store: &ParamStore, enc_u: &[f64], history: &[usize]) -> Result<Vec<f64>> {
        let ctx = self.context(history)?;
        let ev = self.enc_vector(store, enc_u)?;
        let pv = self.pred_vector(store, ctx)?;
        self.joint_from_vectors(store, &ev, &pv)
    }

    /// Builds the full `(T, U+1)` lattice of output log-distributions.
    pub fn lattice(&self, store: &ParamStore, enc: &[Vec<f64>], targets: &[usize]) -> Result<(RnntLattice, TransducerCache)> {
        let u_len = targets.len();
        let contexts = (0..=u_len)
            .map(|u| self.context(&targets[..u]))
            .collect::<Result<Vec<_>>>()?;
        let pred_in: Vec<Vec<f64>> = contexts.iter().map(|&c| self.pred_input(store, c)).collect();
        let pred_v = pred_in
            .iter()
            .map(|x| self.pred.forward(store, x))
            .collect::<Result<Vec<_>>>()?;
        let enc_v = enc
            .iter()
            .map(|e| self.enc_vector(store, e))
            .collect::<Result<Vec<_>>>()?;
        let k = self.num_outputs();
        let mut log_probs = Vec::with_capacity(enc.len() * (u_len + 1) * k);
        let mut hidden = Vec::with_capacity(enc.len() * (u_len + 1));
        for ev in &enc_v {
            for pv in &pred_v {
                let h = Self::joint_hidden(ev, pv);
                let z = self.out.forward(store, &h)?;
                log_probs.extend(log_softmax(&z)?);
                hidden.push(h);
            }
        }
        let lattice = RnntLattice::from_raw(enc.len(), u_len, k, self.blank_id(), Some(self.eos_id()), log_probs)?;
        Ok((
            lattice,
            TransducerCache {
                contexts,
                pred_in,
                hidden,
            },
        ))
    }

    /// Backward from `∂loss/∂log_probs`; returns gradients for the encoder
    /// vectors.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        enc: &[Vec<f64>],
        lattice: &RnntLattice,
        cache: &TransducerCache,
        dlog_probs: &[f64],
    ) -> Vec<Vec<f64>> {
        let k = self.num_outputs();
        let u1 = lattice.u_len() + 1;
        let dj = self.out.d_in;
        let mut d_enc_v = vec![vec![0.0; dj]; enc.len()];
        let mut d_pred_v = vec![vec![0.0; dj]; u1];
        for (node, (g, lp)) in dlog_probs
            .chunks_exact(k)
            .zip(lattice.log_probs().chunks_exact(k))
            .enumerate()
        {
            let gsum: f64 = g.iter().sum();
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            // through log-softmax
            let dz: Vec<f64> = g.iter().zip(lp).map(|(gi, li)| gi - li.exp() * gsum).collect();
            let h = &cache.hidden[node];
            let mut dh = vec![0.0; dj];
            self.out.backward(store, h, &dz, Some(&mut dh));
            let (t, u) = (node / u1, node % u1);
            for j in 0..dj {
                let dpre = dh[j] * (1.0 - h[j] * h[j]);
                d_enc_v[t][j] += dpre;
                d_pred_v[u][j] += dpre;
            }
        }
        let mut d_enc = vec![vec![0.0; self.enc.d_in]; enc.len()];
        for t in 0..enc.len() {
            self.enc.backward(store, &enc[t], &d_enc_v[t], Some(&mut d_enc[t]));
        }
        let de = self.d_embed;
        for u in 0..u1 {
            let mut dx = vec![0.0; 2 * de];
            self.pred.backward(store, &cache.pred_in[u], &d_pred_v[u], Some(&mut dx));
            let (older, newer) = cache.contexts[u];
            let g = store.grad_mut(self.embed);
            for j in 0..de {
                let o = g.get(older, j);
                g.set(older, j, o + dx[j]);
                let n = g.get(newer, j);
                g.set(newer, j, n + dx[de + j]);
            }
        }
        d_enc
    }
}

/// All networks of the joint model bound to one parameter store.
#[derive(Debug, Clone)]
pub struct JointModel {
    pub cfg: ModelConfig,
    pub shared: SharedEncoder,
    pub trunk: AsrTrunk,
    pub transducer: Transducer,
    pub ep: EpModel,
}

/// Parameter-name prefixes of each sub-network.
pub const EP_PREFIX: &str = "ep.";
pub const SHARED_PREFIX: &str = "shared.";
pub const ASR_ONLY_PREFIXES: [&str; 3] = ["trunk.", "pred.", "joint."];

impl JointModel {
    /// Initialises every parameter from `rng` in a fixed order.
    pub fn init<R: Rng>(cfg: ModelConfig, rng: &mut R) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let shared = SharedEncoder::init(&mut store, &cfg, rng)?;
        let trunk = AsrTrunk::init(&mut store, &cfg, rng)?;
        let transducer = Transducer::init(&mut store, &cfg, rng)?;
        let ep = EpModel::init(&mut store, &cfg, rng)?;
        Ok((
            JointModel {
                cfg,
                shared,
                trunk,
                transducer,
                ep,
            },
            store,
        ))
    }

    /// Binds to an existing store, failing with the first missing or
    /// mis-shaped parameter.
    pub fn bind(cfg: ModelConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        Ok(JointModel {
            shared: SharedEncoder::bind(store, &cfg)?,
            trunk: AsrTrunk::bind(store, &cfg)?,
            transducer: Transducer::bind(store, &cfg)?,
            ep: EpModel::bind(store, &cfg)?,
            cfg,
        })
    }

    /// Binds the endpointer to `ep` and everything else to `asr`.
    pub fn bind_split(cfg: ModelConfig, ep: &ParamStore, asr: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        Ok(JointModel {
            shared: SharedEncoder::bind(asr, &cfg)?,
            trunk: AsrTrunk::bind(asr, &cfg)?,
            transducer: Transducer::bind(asr, &cfg)?,
            ep: EpModel::bind(ep, &cfg)?,
            cfg,
        })
    }

    /// `ep_forward` over a whole utterance.
    pub fn ep_forward(&self, store: &ParamStore, inputs: &[Vec<f64>], source: SwitchSource) -> Result<EpPosterior> {
        Ok(self.ep.forward(store, inputs, source)?.0)
    }

    pub fn shared_encode(&self, store: &ParamStore, frames: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        Ok(self.shared.forward(store, frames)?.0)
    }

    pub fn asr_encode(&self, store: &ParamStore, latents: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        Ok(self.trunk.forward(store, latents)?.0)
    }

    pub fn joint_logits(&self, store: &ParamStore, enc_u: &[f64], history: &[usize]) -> Result<Vec<f64>> {
        self.transducer.joint_logits(store, enc_u, history)
    }
}

/// Splits a store into `(ep.*, everything else)`.
pub fn split_ep_store(store: &ParamStore) -> Result<(ParamStore, ParamStore)> {
    let mut ep = ParamStore::new();
    let mut asr = ParamStore::new();
    for p in store.iter() {
        let target = if p.name.starts_with(EP_PREFIX) { &mut ep } else { &mut asr };
        target.add(&p.name, p.value.clone())?;
    }
    Ok((ep, asr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> (JointModel, ParamStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        JointModel::init(ModelConfig::default(), &mut rng).unwrap()
    }

    fn frames(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn ep_is_causal() {
        let (m, store) = model();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs = frames(&mut rng, 12, 8);
        let a = m.ep_forward(&store, &xs, SwitchSource::AudioFrames).unwrap();
        let mut ys = xs.clone();
        ys[8] = frames(&mut rng, 1, 8).remove(0);
        let b = m.ep_forward(&store, &ys, SwitchSource::AudioFrames).unwrap();
        assert_eq!(a.rows[..8], b.rows[..8]);
        assert_ne!(a.rows[8], b.rows[8]);
        for r in &a.rows {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn ep_zero_params_uniform() {
        let (m, mut store) = model();
        for p in store.iter_mut() {
            p.value.fill(0.0);
        }
        let post = m.ep_forward(&store, &vec![vec![1.0; 8]; 5], SwitchSource::AudioFrames).unwrap();
        assert!(post.rows.iter().all(|r| *r == [0.25; 4]));
    }

    #[test]
    fn ep_rejects_wrong_dim_for_source() {
        let (m, store) = model();
        assert!(m.ep_forward(&store, &vec![vec![0.0; 8]; 3], SwitchSource::SharedLatent).is_err());
        assert!(m.ep_forward(&store, &vec![vec![0.0; 32]; 3], SwitchSource::SharedLatent).is_ok());
    }

    #[test]
    fn shared_encoder_causal_and_length_preserving() {
        let (m, store) = model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs = frames(&mut rng, 9, 8);
        let a = m.shared_encode(&store, &xs).unwrap();
        assert_eq!(a.len(), 9);
        assert_eq!(a, m.shared_encode(&store, &xs).unwrap());
        let mut ys = xs.clone();
        ys[4][0] += 1.0;
        let b = m.shared_encode(&store, &ys).unwrap();
        assert_eq!(a[..4], b[..4]);
        assert!(m.shared_encode(&store, &[]).is_err());
    }

    #[test]
    fn time_reduction_lengths_and_causality() {
        let (m, store) = model();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for t in 1..=9 {
            let lat = frames(&mut rng, t, 32);
            assert_eq!(m.asr_encode(&store, &lat).unwrap().len(), t.div_ceil(2));
        }
        let lat = frames(&mut rng, 8, 32);
        let a = m.asr_encode(&store, &lat).unwrap();
        let mut lat2 = lat.clone();
        lat2[5][3] += 1.0; // belongs to output 2
        let b = m.asr_encode(&store, &lat2).unwrap();
        assert_eq!(a[..2], b[..2]);
        assert_ne!(a[2], b[2]);
        assert!(m.asr_encode(&store, &[]).is_err());
    }

    #[test]
    fn streaming_matches_batch() {
        let (m, store) = model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs = frames(&mut rng, 7, 8);
        let lat = m.shared_encode(&store, &xs).unwrap();
        let enc = m.asr_encode(&store, &lat).unwrap();
        let mut sst = m.shared.start();
        let mut tst = m.trunk.start();
        let mut streamed = Vec::new();
        for (x, l) in xs.iter().zip(&lat) {
            let got = m.shared.step(&store, x, &mut sst).unwrap();
            assert_eq!(&got, l);
            if let Some(e) = m.trunk.push(&store, &got, &mut tst).unwrap() {
                streamed.push(e);
            }
        }
        streamed.extend(m.trunk.flush(&store, &mut tst).unwrap());
        assert_eq!(streamed, enc);

        let post = m.ep_forward(&store, &lat, SwitchSource::SharedLatent).unwrap();
        let mut est = m.ep.start();
        for (l, row) in lat.iter().zip(&post.rows) {
            assert_eq!(&m.ep.step(&store, l, SwitchSource::SharedLatent, &mut est).unwrap(), row);
        }
    }

    #[test]
    fn zero_joiner_is_uniform() {
        let (m, mut store) = model();
        for name in ["joint.out.w", "joint.out.b"] {
            let id = store.id(name).unwrap();
            store.value_mut(id).fill(0.0);
        }
        let z = m.joint_logits(&store, &[0.3; 32], &[1, 2]).unwrap();
        let p = softmax(&z).unwrap();
        assert_eq!(p.len(), 10);
        assert!(p.iter().all(|v| (v - 0.1).abs() < 1e-15));
        assert_eq!(z, m.joint_logits(&store, &[0.3; 32], &[1, 2]).unwrap());
    }

    #[test]
    fn joint_rejects_bad_context() {
        let (m, store) = model();
        assert!(m.joint_logits(&store, &[0.0; 32], &[9]).is_err(), "blank is never context");
        assert!(m.joint_logits(&store, &[0.0; 32], &[8]).is_ok(), "end-of-query may be context");
        assert!(m.joint_logits(&store, &[0.0; 31], &[]).is_err());
    }

    #[test]
    fn switch_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let draws: Vec<_> = (0..10_000).map(|_| sample_switch(&mut rng)).collect();
        let audio = draws.iter().filter(|&&s| s == SwitchSource::AudioFrames).count();
        assert!((4700..=5300).contains(&audio), "{audio}");
        let mut again = ChaCha8Rng::seed_from_u64(0);
        let replay: Vec<_> = (0..64).map(|_| sample_switch(&mut again)).collect();
        assert_eq!(replay[..], draws[..64]);
        assert!(replay.contains(&SwitchSource::AudioFrames) && replay.contains(&SwitchSource::SharedLatent));
        let mut r = ChaCha8Rng::seed_from_u64(0);
        assert!((0..100).all(|_| sample_switch_with(&mut r, 0.0) == SwitchSource::SharedLatent));
    }

    #[test]
    fn bind_names_first_mismatch() {
        let (_, store) = model();
        let cfg = ModelConfig {
            d_enc: 12,
            ..ModelConfig::default()
        };
        let err = JointModel::bind(cfg, &store).unwrap_err().to_string();
        assert!(err.contains("shared.in.w"), "{err}");
        let (ep, asr) = split_ep_store(&store).unwrap();
        assert!(ep.iter().all(|p| p.name.starts_with(EP_PREFIX)));
        assert_eq!(ep.len() + asr.len(), store.len());
    }
}
