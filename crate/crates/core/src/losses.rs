//! Frame cross-entropy for the endpointer, the transducer loss computed by
//! lattice dynamic programming (with a path-enumeration reference) and the
//! weighted multitask combination.

use crate::corpus::{FrameLabelSeq, SpeechClass};
use crate::error::{Error, Result};
use crate::models::EpPosterior;

/// Log-probabilities below this are clamped, so unreachable symbols never
/// inject `-inf` into the recursions.
pub const LOG_PROB_FLOOR: f64 = -60.0;

/// Mean frame cross-entropy and its gradient with respect to the head logits.
#[derive(Debug, Clone)]
pub struct CeLoss {
    pub value: f64,
    pub grad_logits: Vec<[f64; 4]>,
}

pub fn ce_loss(post: &EpPosterior, labels: &FrameLabelSeq) -> Result<CeLoss> {
    let n = post.rows.len();
    if n != labels.len() {
        return Err(Error::shape(
            "ce_loss",
            format!("{n} posterior rows vs {} labels", labels.len()),
        ));
    }
    if n == 0 {
        return Err(Error::Invalid("ce_loss on an empty sequence".into()));
    }
    let inv = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad_logits = Vec::with_capacity(n);
    for (row, label) in post.rows.iter().zip(&labels.labels) {
        let k = label.id();
        value -= row[k].ln().max(LOG_PROB_FLOOR);
        let mut g = *row;
        g[k] -= 1.0;
        g.iter_mut().for_each(|v| *v *= inv);
        grad_logits.push(g);
    }
    Ok(CeLoss {
        value: value * inv,
        grad_logits,
    })
}

/// Per-node output log-distributions of a transducer, indexed `(t, u, k)`
/// for `t < T`, `u <= U` and `k` over all output symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct RnntLattice {
    t_len: usize,
    u_len: usize,
    num_symbols: usize,
    blank: usize,
    eos: Option<usize>,
    log_probs: Vec<f64>,
}

impl RnntLattice {
    /// Builds a lattice whose node slices must each be normalised.
    pub fn new(
        t_len: usize,
        u_len: usize,
        num_symbols: usize,
        blank: usize,
        eos: Option<usize>,
        log_probs: Vec<f64>,
    ) -> Result<Self> {
        let lat = Self::from_raw(t_len, u_len, num_symbols, blank, eos, log_probs)?;
        for node in lat.log_probs.chunks_exact(num_symbols) {
            let lse = log_sum_exp(node);
            if (lse).abs() > 1e-6 {
                return Err(Error::Validation(format!(
                    "lattice node is not a log-distribution (log-sum-exp {lse})"
                )));
            }
        }
        Ok(lat)
    }

    /// Builds a lattice without the normalisation check. The loss is still
    /// well-defined, which is what finite-difference checks need.
    pub fn from_raw(
        t_len: usize,
        u_len: usize,
        num_symbols: usize,
        blank: usize,
        eos: Option<usize>,
        log_probs: Vec<f64>,
    ) -> Result<Self> {
        if log_probs.len() != t_len * (u_len + 1) * num_symbols {
            return Err(Error::shape(
                "RnntLattice",
                format!(
                    "{} values for T={t_len}, U={u_len}, K={num_symbols}",
                    log_probs.len()
                ),
            ));
        }
        if blank >= num_symbols || eos.is_some_and(|e| e >= num_symbols || e == blank) {
            return Err(Error::Invalid("reserved symbol index out of range".into()));
        }
        if log_probs.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("lattice log-probabilities".into()));
        }
        Ok(RnntLattice {
            t_len,
            u_len,
            num_symbols,
            blank,
            eos,
            log_probs,
        })
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    pub fn u_len(&self) -> usize {
        self.u_len
    }

    pub fn num_symbols(&self) -> usize {
        self.num_symbols
    }

    pub fn blank(&self) -> usize {
        self.blank
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    #[inline]
    pub fn index(&self, t: usize, u: usize, k: usize) -> usize {
        (t * (self.u_len + 1) + u) * self.num_symbols + k
    }

    #[inline]
    fn lp(&self, t: usize, u: usize, k: usize) -> f64 {
        self.log_probs[self.index(t, u, k)].max(LOG_PROB_FLOOR)
    }

    fn check_targets(&self, targets: &[usize]) -> Result<()> {
        if targets.len() != self.u_len {
            return Err(Error::shape(
                "rnnt",
                format!("{} targets for a lattice with U={}", targets.len(), self.u_len),
            ));
        }
        if self.t_len == 0 {
            return Err(Error::Invalid("transducer loss needs at least one encoder frame".into()));
        }
        for (i, &y) in targets.iter().enumerate() {
            if y >= self.num_symbols {
                return Err(Error::Invalid(format!("target {y} outside {} symbols", self.num_symbols)));
            }
            if y == self.blank {
                return Err(Error::Invalid(format!("target {i} is the blank symbol")));
            }
            // the end-of-query token may only close the sequence
            if Some(y) == self.eos && i + 1 != targets.len() {
                return Err(Error::Invalid(format!("end-of-query token at interior target position {i}")));
            }
        }
        Ok(())
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[inline]
fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

struct ForwardBackward {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    log_like: f64,
}

fn forward_backward(lat: &RnntLattice, y: &[usize]) -> ForwardBackward {
    let (tn, un) = (lat.t_len, lat.u_len);
    let w = un + 1;
    let blank = lat.blank;
    let mut alpha = vec![f64::NEG_INFINITY; tn * w];
    alpha[0] = 0.0;
    for t in 0..tn {
        for u in 0..=un {
            if t == 0 && u == 0 {
                continue;
            }
            let from_blank = if t > 0 {
                alpha[(t - 1) * w + u] + lat.lp(t - 1, u, blank)
            } else {
                f64::NEG_INFINITY
            };
            let from_emit = if u > 0 {
                alpha[t * w + u - 1] + lat.lp(t, u - 1, y[u - 1])
            } else {
                f64::NEG_INFINITY
            };
            alpha[t * w + u] = lse2(from_blank, from_emit);
        }
    }
    let mut beta = vec![f64::NEG_INFINITY; tn * w];
    for t in (0..tn).rev() {
        for u in (0..=un).rev() {
            beta[t * w + u] = if t == tn - 1 && u == un {
                lat.lp(t, u, blank)
            } else {
                let via_blank = if t + 1 < tn {
                    beta[(t + 1) * w + u] + lat.lp(t, u, blank)
                } else {
                    f64::NEG_INFINITY
                };
                let via_emit = if u < un {
                    beta[t * w + u + 1] + lat.lp(t, u, y[u])
                } else {
                    f64::NEG_INFINITY
                };
                lse2(via_blank, via_emit)
            };
        }
    }
    let log_like = alpha[(tn - 1) * w + un] + lat.lp(tn - 1, un, blank);
    ForwardBackward { alpha, beta, log_like }
}

/// `-log P(Y|X)` by the forward recursion over the `(T, U+1)` grid.
///
/// Grid convention: `α(t,u)` is the log-probability of having emitted the
/// first `u` targets when standing at frame `t`; emission probabilities are
/// read at the source node and the alignment terminates with a blank from
/// `(T−1, U)`.
pub fn rnnt_loss_dp(lattice: &RnntLattice, targets: &[usize]) -> Result<f64> {
    lattice.check_targets(targets)?;
    let fb = forward_backward(lattice, targets);
    Ok(-fb.log_like)
}

#[derive(Debug, Clone)]
pub struct RnntGrad {
    pub loss: f64,
    /// `∂loss/∂log_probs`, laid out like the lattice.
    pub grad: Vec<f64>,
    /// Posterior occupancy `exp(α+β−log P)` of every `(t,u)` node.
    pub occupancy: Vec<f64>,
}

/// Loss and its gradient with respect to every lattice log-probability, from
/// the α·β transition posteriors. Unreachable nodes get zero gradient.
pub fn rnnt_grad(lattice: &RnntLattice, targets: &[usize]) -> Result<RnntGrad> {
    lattice.check_targets(targets)?;
    let fb = forward_backward(lattice, targets);
    let (tn, un) = (lattice.t_len, lattice.u_len);
    let w = un + 1;
    let ll = fb.log_like;
    let mut grad = vec![0.0; lattice.log_probs.len()];
    let mut occupancy = vec![0.0; tn * w];
    let clamped = |i: usize| lattice.log_probs[i] < LOG_PROB_FLOOR;
    for t in 0..tn {
        for u in 0..=un {
            let a = fb.alpha[t * w + u];
            if a == f64::NEG_INFINITY {
                continue;
            }
            occupancy[t * w + u] = (a + fb.beta[t * w + u] - ll).exp();
            let bi = lattice.index(t, u, lattice.blank);
            let after_blank = if t == tn - 1 && u == un {
                Some(0.0)
            } else if t + 1 < tn {
                Some(fb.beta[(t + 1) * w + u])
            } else {
                None
            };
            if let Some(b) = after_blank {
                if !clamped(bi) {
                    grad[bi] = -(a + lattice.lp(t, u, lattice.blank) + b - ll).exp();
                }
            }
            if u < un {
                let ei = lattice.index(t, u, targets[u]);
                if !clamped(ei) {
                    grad[ei] = -(a + lattice.lp(t, u, targets[u]) + fb.beta[t * w + u + 1] - ll).exp();
                }
            }
        }
    }
    Ok(RnntGrad {
        loss: -ll,
        grad,
        occupancy,
    })
}

/// Largest `T + U` accepted by [`rnnt_loss_bruteforce`].
pub const BRUTEFORCE_MAX_STEPS: usize = 12;

fn enumerate_paths(lat: &RnntLattice, y: &[usize], t: usize, u: usize, acc: f64, out: &mut Vec<f64>) {
    let (tn, un) = (lat.t_len, lat.u_len);
    if t == tn - 1 && u == un {
        out.push(acc + lat.lp(t, u, lat.blank));
        return;
    }
    if u < un {
        enumerate_paths(lat, y, t, u + 1, acc + lat.lp(t, u, y[u]), out);
    }
    if t + 1 < tn {
        enumerate_paths(lat, y, t + 1, u, acc + lat.lp(t, u, lat.blank), out);
    }
}

/// Reference loss: enumerates every monotone alignment whose blank-stripped
/// output equals the targets and sums their probabilities.
pub fn rnnt_loss_bruteforce(lattice: &RnntLattice, targets: &[usize]) -> Result<f64> {
    lattice.check_targets(targets)?;
    if lattice.t_len + lattice.u_len > BRUTEFORCE_MAX_STEPS {
        return Err(Error::Invalid(format!(
            "T+U = {} exceeds the enumeration limit {BRUTEFORCE_MAX_STEPS}; use rnnt_loss_dp",
            lattice.t_len + lattice.u_len
        )));
    }
    let mut paths = Vec::new();
    enumerate_paths(lattice, targets, 0, 0, 0.0, &mut paths);
    Ok(-log_sum_exp(&paths))
}

/// Number of alignments enumerated by [`rnnt_loss_bruteforce`].
pub fn count_alignments(lattice: &RnntLattice, targets: &[usize]) -> Result<usize> {
    lattice.check_targets(targets)?;
    let mut paths = Vec::new();
    enumerate_paths(lattice, targets, 0, 0, 0.0, &mut paths);
    Ok(paths.len())
}

/// Weights applied to each task's gradient by the multitask objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskWeights {
    pub asr: f64,
    pub ep: f64,
}

impl TaskWeights {
    pub fn from_lambda(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
        }
        Ok(TaskWeights {
            asr: lambda,
            ep: 1.0 - lambda,
        })
    }
}

/// `λ·l_asr + (1−λ)·l_ep`
pub fn multitask_loss(l_asr: f64, l_ep: f64, lambda: f64) -> Result<f64> {
    let w = TaskWeights::from_lambda(lambda)?;
    if lambda == 1.0 {
        return Ok(l_asr);
    }
    if lambda == 0.0 {
        return Ok(l_ep);
    }
    Ok(w.asr * l_asr + w.ep * l_ep)
}

/// Frame labels as class ids, used when posteriors are scored in bulk.
pub fn label_ids(labels: &FrameLabelSeq) -> Vec<usize> {
    labels.labels.iter().map(|&c: &SpeechClass| c.id()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netkit::{grad_check, ParamStore, Tensor2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_lattice(t: usize, u: usize, k: usize) -> RnntLattice {
        let lp = (1.0 / k as f64).ln();
        RnntLattice::new(t, u, k, k - 1, None, vec![lp; t * (u + 1) * k]).unwrap()
    }

    fn random_lattice(rng: &mut ChaCha8Rng, t: usize, u: usize, k: usize) -> RnntLattice {
        let mut data = Vec::with_capacity(t * (u + 1) * k);
        for _ in 0..t * (u + 1) {
            let z: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect();
            data.extend(crate::netkit::log_softmax(&z).unwrap());
        }
        RnntLattice::new(t, u, k, k - 1, None, data).unwrap()
    }

    #[test]
    fn single_blank_path() {
        let lat = RnntLattice::new(1, 0, 2, 1, None, vec![0.1f64.ln(), 0.9f64.ln()]).unwrap();
        let loss = rnnt_loss_dp(&lat, &[]).unwrap();
        assert!((loss - 0.105_360_515_657_826_3).abs() < 1e-12);
        assert!((rnnt_loss_bruteforce(&lat, &[]).unwrap() - loss).abs() < 1e-12);
    }

    #[test]
    fn two_alignments_uniform() {
        let lat = uniform_lattice(2, 1, 2);
        assert_eq!(count_alignments(&lat, &[0]).unwrap(), 2);
        let dp = rnnt_loss_dp(&lat, &[0]).unwrap();
        assert!((dp - 4f64.ln()).abs() < 1e-12);
        assert!((rnnt_loss_bruteforce(&lat, &[0]).unwrap() - dp).abs() < 1e-12);
    }

    #[test]
    fn alignment_counts() {
        assert_eq!(count_alignments(&uniform_lattice(1, 1, 3), &[0]).unwrap(), 1);
        assert_eq!(count_alignments(&uniform_lattice(3, 0, 3), &[]).unwrap(), 1);
        // C(T-1+U, U)
        assert_eq!(count_alignments(&uniform_lattice(4, 3, 3), &[0, 1, 0]).unwrap(), 20);
    }

    #[test]
    fn dp_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let t = rng.gen_range(1..=4);
            let u = rng.gen_range(0..=3);
            let k = rng.gen_range(2..=4);
            let lat = random_lattice(&mut rng, t, u, k);
            let y: Vec<usize> = (0..u).map(|_| rng.gen_range(0..k - 1)).collect();
            let a = rnnt_loss_dp(&lat, &y).unwrap();
            let b = rnnt_loss_bruteforce(&lat, &y).unwrap();
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            assert!(a >= 0.0);
        }
    }

    #[test]
    fn target_errors() {
        let lat = uniform_lattice(2, 2, 3);
        assert!(rnnt_loss_dp(&lat, &[0, 2]).is_err(), "blank in targets");
        assert!(rnnt_loss_dp(&lat, &[0]).is_err(), "length mismatch");
        let lat = RnntLattice::from_raw(0, 1, 3, 2, None, vec![]).unwrap();
        assert!(rnnt_loss_dp(&lat, &[0]).is_err(), "T = 0");
        let lp = (1.0f64 / 4.0).ln();
        let lat = RnntLattice::new(3, 2, 4, 3, Some(2), vec![lp; 3 * 3 * 4]).unwrap();
        assert!(rnnt_loss_dp(&lat, &[2, 0]).is_err(), "interior end-of-query");
        assert!(rnnt_loss_dp(&lat, &[0, 2]).is_ok());
        let big = uniform_lattice(8, 5, 3);
        assert!(rnnt_loss_bruteforce(&big, &[0; 5]).is_err());
    }

    #[test]
    fn unnormalised_lattice_rejected() {
        assert!(RnntLattice::new(1, 0, 2, 1, None, vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lat = random_lattice(&mut rng, 3, 2, 3);
        let y = [0, 1];
        let mut store = ParamStore::new();
        let id = store.add("log_probs", Tensor2::column(lat.log_probs())).unwrap();
        let report = grad_check(
            &mut store,
            |s| {
                let lat = RnntLattice::from_raw(3, 2, 3, 2, None, s.value(id).data().to_vec())?;
                let g = rnnt_grad(&lat, &y)?;
                for (acc, v) in s.grad_mut(id).data_mut().iter_mut().zip(&g.grad) {
                    *acc += v;
                }
                Ok(g.loss)
            },
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{:?}", report.checks);
    }

    #[test]
    fn occupancy_is_a_distribution_per_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lat = random_lattice(&mut rng, 4, 3, 4);
        let y = [0, 2, 1];
        let g = rnnt_grad(&lat, &y).unwrap();
        // each alignment crosses every frame once via a blank ...
        for t in 0..4 {
            let s: f64 = (0..=3).map(|u| -g.grad[lat.index(t, u, 3)]).sum();
            assert!((s - 1.0).abs() < 1e-9, "t={t}: {s}");
        }
        // ... and emits every target exactly once
        for (u, &yu) in y.iter().enumerate() {
            let s: f64 = (0..4).map(|t| -g.grad[lat.index(t, u, yu)]).sum();
            assert!((s - 1.0).abs() < 1e-9, "u={u}: {s}");
        }
        // every path starts at (0,0) and ends at (T-1,U)
        assert!((g.occupancy[0] - 1.0).abs() < 1e-9);
        assert!((g.occupancy[3 * 4 + 3] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn unreachable_nodes_have_zero_gradient() {
        // T=1, U=2: the only path emits both targets at t=0 and ends with a
        // blank at (0,2); nothing else in the lattice is touched.
        let lat = uniform_lattice(1, 2, 3);
        let g = rnnt_grad(&lat, &[0, 1]).unwrap();
        let touched = [lat.index(0, 0, 0), lat.index(0, 1, 1), lat.index(0, 2, 2)];
        for (i, v) in g.grad.iter().enumerate() {
            if touched.contains(&i) {
                assert!((v + 1.0).abs() < 1e-12);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn order_matters() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let lat = random_lattice(&mut rng, 4, 3, 4);
        let a = rnnt_loss_dp(&lat, &[0, 1, 2]).unwrap();
        let b = rnnt_loss_dp(&lat, &[2, 1, 0]).unwrap();
        assert!((a - b).abs() > 1e-6);
    }

    #[test]
    fn multitask_endpoints() {
        assert!((multitask_loss(2.0, 1.0, 0.98).unwrap() - 1.98).abs() < 1e-12);
        assert_eq!(multitask_loss(2.0, 1.0, 1.0).unwrap(), 2.0);
        assert_eq!(multitask_loss(2.0, 1.0, 0.0).unwrap(), 1.0);
        assert!(matches!(multitask_loss(2.0, 1.0, 1.5), Err(Error::Config(_))));
        assert!(matches!(multitask_loss(2.0, 1.0, -0.1), Err(Error::Config(_))));
        assert_eq!(TaskWeights::from_lambda(1.0).unwrap().ep, 0.0);
    }

    #[test]
    fn ce_cases() {
        use crate::corpus::SpeechClass::*;
        let labels = FrameLabelSeq {
            labels: vec![Speech, FinalSilence],
        };
        let perfect = EpPosterior {
            rows: vec![[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0]],
        };
        assert_eq!(ce_loss(&perfect, &labels).unwrap().value, 0.0);
        let uniform = EpPosterior {
            rows: vec![[0.25; 4]; 2],
        };
        assert!((ce_loss(&uniform, &labels).unwrap().value - 4f64.ln()).abs() < 1e-12);
        let short = EpPosterior { rows: vec![[0.25; 4]] };
        assert!(ce_loss(&short, &labels).is_err());
    }
}
