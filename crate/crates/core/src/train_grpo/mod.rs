//! Group-relative policy optimization.
//!
//! Every step samples a group of completions for one prompt from the current policy,
//! scores them, standardizes the rewards within the group and takes one clipped,
//! KL-regularized policy-gradient step against a frozen reference policy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rewards::{RewardBreakdown, RewardError, RewardModels, RewardTarget};
use crate::synthdata::derive_seed;
use crate::tensor::{clip_global_norm, AdamConfig, AdamState, Tape, Tensor, TensorError, Var};
use crate::vocab_lm::{logprobs, parse_output, sample, LmError, SampleConfig, Task, TinyLM, Vocabulary};

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("invalid GRPO config: {0}")]
    Config(String),
    #[error("{what}: lengths {left} and {right} differ")]
    Length { what: &'static str, left: usize, right: usize },
    #[error("no prompts to train on")]
    Empty,
    #[error("non-finite loss {loss} at step {step} (record {record}, mean reward {mean_reward}, kl {kl})")]
    NonFinite {
        step: usize,
        record: usize,
        loss: f64,
        mean_reward: f64,
        kl: f64,
    },
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, GrpoError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub lr: f64,
    pub steps: usize,
    pub grad_clip: f64,
    pub temperature: f64,
    pub top_k: usize,
    pub max_new: usize,
    /// Probability that a step trains the text-to-motion task.
    pub t2m_prob: f64,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_eps: 0.2,
            kl_beta: 0.04,
            lr: 5e-5,
            steps: 2000,
            grad_clip: 0.1,
            temperature: 1.0,
            top_k: 50,
            max_new: 160,
            t2m_prob: 0.5,
            seed: 0,
        }
    }
}

impl GrpoConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GrpoError::Config(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must lie in (0, 1)");
        }
        if !(self.kl_beta >= 0.0) {
            return bad("kl_beta must be non-negative");
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) || self.steps == 0 {
            return bad("lr, grad_clip and steps must be positive");
        }
        if !(self.temperature > 0.0) || self.top_k == 0 || self.max_new == 0 {
            return bad("temperature, top_k and max_new must be positive");
        }
        if !(0.0..=1.0).contains(&self.t2m_prob) {
            return bad("t2m_prob must lie in [0, 1]");
        }
        Ok(())
    }

    fn sampling(&self) -> SampleConfig {
        SampleConfig {
            temperature: self.temperature,
            top_k: self.top_k,
            max_new: self.max_new,
        }
    }
}

const ADV_EPS: f64 = 1e-8;

/// `(r_i - mean) / (population std + 1e-8)`.
pub fn advantages(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    if rewards.iter().all(|r| *r == rewards[0]) {
        return vec![0.0; rewards.len()];
    }
    let std = var.sqrt();
    rewards.iter().map(|r| (r - mean) / (std + ADV_EPS)).collect()
}

/// Mean over tokens of `exp(ref - θ) - (ref - θ) - 1`.
pub fn kl_estimate(logp_policy: &[f64], logp_ref: &[f64]) -> Result<f64> {
    if logp_policy.len() != logp_ref.len() || logp_policy.is_empty() {
        return Err(GrpoError::Length {
            what: "policy and reference log-probabilities",
            left: logp_policy.len(),
            right: logp_ref.len(),
        });
    }
    let sum: f64 = logp_policy
        .iter()
        .zip(logp_ref)
        .map(|(p, r)| {
            let d = r - p;
            d.exp() - d - 1.0
        })
        .sum();
    Ok(sum / logp_policy.len() as f64)
}

/// `min(ρ Â, clip(ρ, 1 - ε, 1 + ε) Â)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// One completion with its sampling-time and reference log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub ids: Vec<usize>,
    pub old_logprobs: Vec<f64>,
    pub ref_logprobs: Vec<f64>,
    pub reward: RewardBreakdown,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub task: Task,
    pub prompt: Vec<usize>,
    pub rollouts: Vec<Rollout>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn rewards(&self) -> Vec<f64> {
        self.rollouts.iter().map(|r| r.reward.total).collect()
    }
}

/// Models a group is sampled from and regularized towards.
pub struct PolicyBundle<'a> {
    /// Snapshot that generates completions; its log-probabilities become the ratio denominators.
    pub old: &'a TinyLM,
    pub reference: &'a TinyLM,
}

/// Samples `group_size` completions of `prompt` in parallel; completion `i` uses seed `derive_seed(seed, i)`.
#[allow(clippy::too_many_arguments)]
pub fn rollout_group(
    policies: &PolicyBundle<'_>,
    vocab: &Vocabulary,
    rewards: &RewardModels<'_>,
    task: Task,
    prompt: &[usize],
    target: &RewardTarget,
    cfg: &GrpoConfig,
    seed: u64,
) -> Result<RolloutGroup> {
    cfg.validate()?;
    let sampling = cfg.sampling();
    let rollouts: Vec<Rollout> = (0..cfg.group_size)
        .into_par_iter()
        .map(|i| {
            let c = sample(policies.old, prompt, &sampling, derive_seed(seed, i as u64))?;
            let full: Vec<usize> = prompt.iter().chain(&c.ids).copied().collect();
            let ref_all = logprobs(policies.reference, &full)?;
            let ref_logprobs = ref_all[prompt.len() - 1..].to_vec();
            let parsed = parse_output(vocab, &c.ids, task);
            let reward = rewards.total_reward(task, &parsed, target)?;
            Ok(Rollout {
                ids: c.ids,
                old_logprobs: c.logprobs,
                ref_logprobs,
                reward,
                truncated: c.truncated,
            })
        })
        .collect::<Result<_>>()?;
    let totals: Vec<f64> = rollouts.iter().map(|r| r.reward.total).collect();
    Ok(RolloutGroup {
        task,
        prompt: prompt.to_vec(),
        advantages: advantages(&totals),
        rollouts,
    })
}

/// Loss terms of one group, as tape values.
pub struct GrpoLoss<'t> {
    /// Negated objective.
    pub loss: Var<'t>,
    /// Mean over completions of the per-token KL estimate.
    pub kl: Var<'t>,
    /// Mean over completions of the clipped surrogate.
    pub surrogate: Var<'t>,
}

/// Negated group objective: per completion, token-averaged clipped surrogate minus
/// `β` times the token-averaged KL estimate, then averaged over the group.
pub fn grpo_loss<'t>(policy: &TinyLM, tape: &'t Tape, group: &RolloutGroup, cfg: &GrpoConfig) -> Result<GrpoLoss<'t>> {
    let p = group.prompt.len();
    if group.advantages.len() != group.rollouts.len() || group.rollouts.is_empty() {
        return Err(GrpoError::Length {
            what: "advantages and rollouts",
            left: group.advantages.len(),
            right: group.rollouts.len(),
        });
    }
    let seqs: Vec<Vec<usize>> = group
        .rollouts
        .iter()
        .map(|r| group.prompt.iter().chain(&r.ids).copied().collect())
        .collect();
    let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
    let ranges: Vec<std::ops::Range<usize>> = seqs.iter().map(|s| p..s.len()).collect();
    let mut old = Vec::new();
    let mut reference = Vec::new();
    let mut adv = Vec::new();
    let mut segments = Vec::new();
    for (r, a) in group.rollouts.iter().zip(&group.advantages) {
        let n = r.ids.len();
        if r.old_logprobs.len() != n || r.ref_logprobs.len() != n {
            return Err(GrpoError::Length {
                what: "completion tokens and stored log-probabilities",
                left: n,
                right: r.old_logprobs.len().min(r.ref_logprobs.len()),
            });
        }
        segments.push((old.len(), n));
        old.extend(&r.old_logprobs);
        reference.extend(&r.ref_logprobs);
        adv.extend(std::iter::repeat_n(*a, n));
    }
    let total = old.len();
    let vec = |v: Vec<f64>| {
        tape.constant(Tensor {
            shape: vec![total],
            values: v,
        })
    };
    let lp = policy.token_logprobs(tape, &refs, &ranges)?;
    let ratio = lp.sub(vec(old))?.exp();
    let adv = vec(adv);
    let eps = cfg.clip_eps;
    let surrogate = ratio.mul(adv)?.minimum(ratio.clamp(1.0 - eps, 1.0 + eps).mul(adv)?)?;
    let d = vec(reference).sub(lp)?;
    let kl = d.exp().sub(d)?.add_scalar(-1.0);
    let per_seq = |v: Var<'t>| -> Result<Var<'t>> { Ok(v.reshape(&[total, 1])?.segment_mean(&segments)?.mean()) };
    let surrogate = per_seq(surrogate)?;
    let kl = per_seq(kl)?;
    let loss = surrogate.sub(kl.scale(cfg.kl_beta))?.scale(-1.0);
    Ok(GrpoLoss { loss, kl, surrogate })
}

/// A prompt and the ground truth its completions are scored against.
#[derive(Debug, Clone, PartialEq)]
pub struct GrpoPrompt {
    pub t2m: Vec<usize>,
    pub m2t: Vec<usize>,
    pub target: RewardTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoLogEntry {
    pub step: usize,
    pub task: Task,
    pub record: usize,
    pub rewards: Vec<f64>,
    pub mean_reward: f64,
    pub format_rate: f64,
    pub kl: f64,
    pub surrogate: f64,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Global gradient norm after clipping.
    pub clipped_norm: f64,
    pub mean_length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoReport {
    pub steps: usize,
    pub log: Vec<GrpoLogEntry>,
}

impl GrpoReport {
    /// Mean group reward over log entries `range`.
    pub fn mean_reward(&self, range: std::ops::Range<usize>) -> f64 {
        let e = &self.log[range];
        e.iter().map(|x| x.mean_reward).sum::<f64>() / e.len().max(1) as f64
    }
}

/// Trains `policy` in place; `reference` stays frozen. `on_step` sees every log entry as it is produced.
pub fn run_grpo(
    policy: &mut TinyLM,
    reference: &TinyLM,
    vocab: &Vocabulary,
    rewards: &RewardModels<'_>,
    prompts: &[GrpoPrompt],
    cfg: &GrpoConfig,
    mut on_step: impl FnMut(&GrpoLogEntry),
) -> Result<GrpoReport> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(GrpoError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&policy.params, AdamConfig::default());
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let record = rng.gen_range(0..prompts.len());
        let task = if rng.gen_bool(cfg.t2m_prob) { Task::T2M } else { Task::M2T };
        let prompt = match task {
            Task::T2M => &prompts[record].t2m,
            Task::M2T => &prompts[record].m2t,
        };
        let snapshot = policy.clone();
        let bundle = PolicyBundle { old: &snapshot, reference };
        let group = rollout_group(
            &bundle,
            vocab,
            rewards,
            task,
            prompt,
            &prompts[record].target,
            cfg,
            derive_seed(cfg.seed, step as u64 + 1),
        )?;
        let tape = Tape::new();
        let terms = grpo_loss(policy, &tape, &group, cfg)?;
        let (loss, kl, surrogate) = (terms.loss.item(), terms.kl.item(), terms.surrogate.item());
        let totals = group.rewards();
        let mean_reward = totals.iter().sum::<f64>() / totals.len() as f64;
        if !loss.is_finite() || !kl.is_finite() {
            return Err(GrpoError::NonFinite {
                step,
                record,
                loss,
                mean_reward,
                kl,
            });
        }
        tape.backward(terms.loss)?;
        policy.params.zero_grad();
        policy.params.absorb_grads(&tape)?;
        let grad_norm = clip_global_norm(&mut policy.params, cfg.grad_clip)?;
        let clipped_norm = policy.params.flat_grads().iter().map(|g| g * g).sum::<f64>().sqrt();
        adam.step(&mut policy.params, cfg.lr)?;
        let entry = GrpoLogEntry {
            step,
            task,
            record,
            mean_reward,
            format_rate: group.rollouts.iter().filter(|r| r.reward.format > 0.0).count() as f64 / totals.len() as f64,
            rewards: totals,
            kl,
            surrogate,
            loss,
            grad_norm,
            clipped_norm,
            mean_length: group.rollouts.iter().map(|r| r.ids.len()).sum::<usize>() as f64 / group.rollouts.len() as f64,
        };
        if step % 100 == 0 || step + 1 == cfg.steps {
            log::info!(
                "grpo step {step}: {} reward {:.3} format {:.2} kl {:.2e} grad {:.3}",
                task.name(),
                entry.mean_reward,
                entry.format_rate,
                kl,
                grad_norm
            );
        }
        on_step(&entry);
        log.push(entry);
    }
    Ok(GrpoReport { steps: cfg.steps, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab_lm::LmConfig;
    use proptest::prelude::*;

    #[test]
    fn advantage_examples() {
        let a = advantages(&[1.0, 2.0, 3.0]);
        for (x, y) in a.iter().zip([-1.2247, 0.0, 1.2247]) {
            assert!((x - y).abs() < 1e-4);
        }
        let a = advantages(&[0.0, 1.0]);
        assert!((a[0] + 1.0).abs() < 1e-6 && (a[1] - 1.0).abs() < 1e-6);
        assert_eq!(advantages(&[0.7; 8]), vec![0.0; 8]);
    }

    #[test]
    fn kl_and_clip_examples() {
        assert_eq!(kl_estimate(&[-1.0, -2.0], &[-1.0, -2.0]).unwrap(), 0.0);
        let two = 2f64.ln();
        let k = kl_estimate(&[-3.0, -1.0], &[-3.0 + two, -1.0 + two]).unwrap();
        assert!((k - (2.0 - two - 1.0)).abs() < 1e-12);
        assert!((k - 0.3069).abs() < 1e-4);
        assert!(kl_estimate(&[-1.0], &[]).is_err());
        assert_eq!(clipped_surrogate(1.5, 1.0, 0.2), 1.2);
        assert_eq!(clipped_surrogate(0.5, -1.0, 0.2), -0.8);
    }

    proptest! {
        #[test]
        fn advantages_are_standardized(r in prop::collection::vec(-5.0f64..5.0, 2..16)) {
            let a = advantages(&r);
            let mean = r.iter().sum::<f64>() / r.len() as f64;
            let spread = r.iter().map(|x| (x - mean).abs()).fold(0.0, f64::max);
            prop_assume!(spread > 1e-3);
            let am = a.iter().sum::<f64>() / a.len() as f64;
            let sd = (a.iter().map(|x| (x - am) * (x - am)).sum::<f64>() / a.len() as f64).sqrt();
            prop_assert!(am.abs() <= 1e-9);
            prop_assert!((sd - 1.0).abs() <= 1e-6);
        }

        #[test]
        fn kl_is_nonnegative(p in prop::collection::vec(-8.0f64..0.0, 1..20), shift in prop::collection::vec(-3.0f64..3.0, 20)) {
            let r: Vec<f64> = p.iter().zip(&shift).map(|(a, b)| a + b).collect();
            prop_assert!(kl_estimate(&p, &r).unwrap() >= 0.0);
        }

        #[test]
        fn clip_is_inactive_inside_the_band(ratio in 0.8f64..1.2, adv in -3.0f64..3.0) {
            prop_assert_eq!(clipped_surrogate(ratio, adv, 0.2), ratio * adv);
        }

        #[test]
        fn surrogate_is_monotone_for_positive_advantage(a in 0.0f64..3.0, b in 0.0f64..3.0, adv in 0.0f64..3.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(clipped_surrogate(lo, adv, 0.2) <= clipped_surrogate(hi, adv, 0.2));
        }
    }

    fn tiny_policy(seed: u64) -> TinyLM {
        let cfg = LmConfig {
            layers: 1,
            heads: 2,
            d_model: 4,
            d_ff: 8,
            context: 8,
        };
        TinyLM::new(cfg, 8, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn fixture_group(policy: &TinyLM, reference: &TinyLM) -> RolloutGroup {
        let prompt = vec![1, 4];
        let completions = [vec![5usize, 6, 2], vec![7, 3, 2]];
        let rollouts = completions
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let full: Vec<usize> = prompt.iter().chain(c).copied().collect();
                let own = logprobs(policy, &full).unwrap()[1..].to_vec();
                Rollout {
                    ids: c.clone(),
                    // a stale sampling policy so ratios differ from one
                    old_logprobs: own.iter().map(|v| v + 0.1 * (i as f64 + 1.0)).collect(),
                    ref_logprobs: logprobs(reference, &full).unwrap()[1..].to_vec(),
                    reward: RewardBreakdown::default(),
                    truncated: false,
                }
            })
            .collect();
        RolloutGroup {
            task: Task::T2M,
            prompt,
            rollouts,
            advantages: vec![0.8, -0.8],
        }
    }

    #[test]
    fn identical_policies_give_zero_loss() {
        let p = tiny_policy(1);
        let mut g = fixture_group(&p, &p);
        for r in &mut g.rollouts {
            r.old_logprobs = r.ref_logprobs.clone();
        }
        g.advantages = advantages(&[1.0, 3.0]);
        let tape = Tape::new();
        let t = grpo_loss(&p, &tape, &g, &GrpoConfig::default()).unwrap();
        assert!(t.loss.item().abs() < 1e-9);
        assert!(t.kl.item().abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let p = tiny_policy(2);
        let r = tiny_policy(3);
        let g = fixture_group(&p, &r);
        let cfg = GrpoConfig {
            kl_beta: 0.5,
            clip_eps: 0.05,
            ..GrpoConfig::default()
        };
        let mut m = p.clone();
        let tape = Tape::new();
        tape.backward(grpo_loss(&m, &tape, &g, &cfg).unwrap().loss).unwrap();
        m.params.zero_grad();
        m.params.absorb_grads(&tape).unwrap();
        let analytic = m.params.flat_grads();
        let base = m.params.flat_values();
        let h = 1e-5;
        let mut eval = |flat: &[f64]| {
            m.params.set_flat_values(flat);
            let tape = Tape::new();
            let v = grpo_loss(&m, &tape, &g, &cfg).unwrap().loss.item();
            v
        };
        let mut worst = 0.0f64;
        for c in (0..base.len()).step_by(3) {
            let mut flat = base.clone();
            flat[c] += h;
            let fp = eval(&flat);
            flat[c] -= 2.0 * h;
            let fm = eval(&flat);
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max((analytic[c] - numeric).abs() / numeric.abs().max(1e-6));
        }
        assert!(analytic.iter().any(|v| v.abs() > 1e-6));
        assert!(worst < 1e-4, "{worst}");
    }
}
