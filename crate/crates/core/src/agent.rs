//! DDPG agent with one continuous action in `[0, 1]` per decision.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::memory::Precision;
use crate::nn::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub hidden: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Soft target update rate.
    pub tau: f64,
    pub discount: f64,
    pub batch_size: usize,
    pub buffer_size: usize,
    pub noise_init: f64,
    /// Multiplicative noise decay per episode after warm-up.
    pub noise_decay: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            hidden: 64,
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            tau: 0.01,
            discount: 0.0,
            batch_size: 64,
            buffer_size: 2000,
            noise_init: 0.5,
            noise_decay: 0.99,
        }
    }
}

/// Map a continuous action to a bitwidth by equal thirds of `[0, 1]`.
pub fn discretize(a: f64) -> Precision {
    if a < 1.0 / 3.0 {
        Precision::Int2
    } else if a < 2.0 / 3.0 {
        Precision::Int4
    } else {
        Precision::Int8
    }
}

/// Center of the action interval that maps to `bits`.
pub fn action_center(bits: Precision) -> f64 {
    match bits {
        Precision::Int2 => 1.0 / 6.0,
        Precision::Int4 => 0.5,
        _ => 5.0 / 6.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    n_in: usize,
    n_out: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

impl Dense {
    fn new<R: Rng + ?Sized>(rng: &mut R, n_in: usize, n_out: usize, bound: f64) -> Self {
        Dense {
            n_in,
            n_out,
            w: (0..n_in * n_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect(),
            b: (0..n_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect(),
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_out)
            .map(|o| {
                self.b[o]
                    + self.w[o * self.n_in..(o + 1) * self.n_in]
                        .iter()
                        .zip(x)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Head {
    Sigmoid,
    Linear,
}

/// Two-hidden-layer ReLU perceptron with a scalar output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    head: Head,
}

struct MlpCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    out: f64,
}

impl Mlp {
    fn new<R: Rng + ?Sized>(rng: &mut R, n_in: usize, hidden: usize, head: Head) -> Self {
        let b = |n: usize| 1.0 / (n as f64).sqrt();
        Mlp {
            layers: vec![
                Dense::new(rng, n_in, hidden, b(n_in)),
                Dense::new(rng, hidden, hidden, b(hidden)),
                Dense::new(rng, hidden, 1, 3e-3),
            ],
            head,
        }
    }

    fn forward_cached(&self, x: &[f64]) -> MlpCache {
        let mut inputs = Vec::with_capacity(3);
        let mut pre = Vec::with_capacity(3);
        let mut h = x.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            let z = l.forward(&h);
            inputs.push(std::mem::take(&mut h));
            h = if i + 1 < self.layers.len() {
                z.iter().map(|v| v.max(0.0)).collect()
            } else {
                z.clone()
            };
            pre.push(z);
        }
        let out = match self.head {
            Head::Sigmoid => 1.0 / (1.0 + (-h[0]).exp()),
            Head::Linear => h[0],
        };
        MlpCache { inputs, pre, out }
    }

    pub fn forward(&self, x: &[f64]) -> f64 {
        self.forward_cached(x).out
    }

    /// Accumulate `dout · d(out)/d(params)` into `grad`, return `d(out)/d(input) · dout`.
    fn backward(&self, c: &MlpCache, dout: f64, grad: &mut Mlp) -> Vec<f64> {
        let mut d = vec![match self.head {
            Head::Sigmoid => dout * c.out * (1.0 - c.out),
            Head::Linear => dout,
        }];
        for i in (0..self.layers.len()).rev() {
            let l = &self.layers[i];
            if i + 1 < self.layers.len() {
                for (g, z) in d.iter_mut().zip(&c.pre[i]) {
                    if *z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let x = &c.inputs[i];
            let gl = &mut grad.layers[i];
            let mut dx = vec![0.0; l.n_in];
            for o in 0..l.n_out {
                if d[o] == 0.0 {
                    continue;
                }
                gl.b[o] += d[o];
                for j in 0..l.n_in {
                    gl.w[o * l.n_in + j] += d[o] * x[j];
                    dx[j] += d[o] * l.w[o * l.n_in + j];
                }
            }
            d = dx;
        }
        d
    }

    fn zeros_like(&self) -> Mlp {
        let mut z = self.clone();
        for v in z.values_mut() {
            *v = 0.0;
        }
        z
    }

    fn len(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.w.iter().chain(l.b.iter()))
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.w.iter_mut().chain(l.b.iter_mut()))
    }

    fn soft_update(&mut self, src: &Mlp, tau: f64) {
        for (t, s) in self.values_mut().zip(src.values()) {
            *t = (1.0 - tau) * *t + tau * s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: f64,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
}

/// Bounded FIFO of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    cap: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(cap: usize) -> Self {
        ReplayBuffer {
            cap: cap.max(1),
            items: VecDeque::new(),
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.cap {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }
}

#[derive(Debug, Clone)]
pub struct Agent {
    pub cfg: AgentConfig,
    pub actor: Mlp,
    pub critic: Mlp,
    actor_target: Mlp,
    critic_target: Mlp,
    actor_opt: Adam,
    critic_opt: Adam,
    pub buffer: ReplayBuffer,
}

/// Losses of one update step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub mean_q: f64,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, obs_dim: usize, cfg: AgentConfig) -> Self {
        let actor = Mlp::new(rng, obs_dim, cfg.hidden, Head::Sigmoid);
        let critic = Mlp::new(rng, obs_dim + 1, cfg.hidden, Head::Linear);
        let adam = |m: &Mlp, lr: f64| Adam::new(m.len(), lr, 0.9, 0.999, 1e-8);
        Agent {
            actor_opt: adam(&actor, cfg.actor_lr),
            critic_opt: adam(&critic, cfg.critic_lr),
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            buffer: ReplayBuffer::new(cfg.buffer_size),
            cfg,
        }
    }

    /// Exploration noise scale after `steps` post-warm-up episodes.
    pub fn noise_scale(&self, steps: usize) -> f64 {
        self.cfg.noise_init * self.cfg.noise_decay.powi(steps as i32)
    }

    /// Continuous action: uniform during warm-up, otherwise the actor output perturbed by
    /// normal noise truncated to `[0, 1]`.
    pub fn act<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        obs: &[f64],
        episode: usize,
        warmup: usize,
    ) -> f64 {
        if episode < warmup {
            return rng.random::<f64>();
        }
        let mu = self.actor.forward(obs);
        let sigma = self.noise_scale(episode - warmup);
        if sigma <= 0.0 {
            return mu;
        }
        let normal = Normal::new(mu, sigma).expect("positive finite sigma");
        for _ in 0..100 {
            let a = normal.sample(rng);
            if (0.0..=1.0).contains(&a) {
                return a;
            }
        }
        mu.clamp(0.0, 1.0)
    }

    fn critic_input(obs: &[f64], a: f64) -> Vec<f64> {
        let mut v = obs.to_vec();
        v.push(a);
        v
    }

    pub fn q(&self, obs: &[f64], a: f64) -> f64 {
        self.critic.forward(&Self::critic_input(obs, a))
    }

    /// One DDPG step on a random minibatch; `None` while the buffer is smaller than a batch.
    pub fn update<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Option<UpdateStats> {
        let n = self.cfg.batch_size;
        if n == 0 || self.buffer.len() < n {
            return None;
        }
        let idx = rand::seq::index::sample(rng, self.buffer.len(), n).into_vec();
        let batch: Vec<&Transition> = idx.iter().map(|&i| self.buffer.get(i)).collect();

        let mut cg = self.critic.zeros_like();
        let mut loss = 0.0;
        for t in &batch {
            let mut y = t.reward;
            if !t.done && self.cfg.discount != 0.0 {
                let a2 = self.actor_target.forward(&t.next_obs);
                y += self.cfg.discount
                    * self
                        .critic_target
                        .forward(&Self::critic_input(&t.next_obs, a2));
            }
            let c = self
                .critic
                .forward_cached(&Self::critic_input(&t.obs, t.action));
            let err = c.out - y;
            loss += err * err;
            self.critic.backward(&c, 2.0 * err / n as f64, &mut cg);
        }
        self.critic_opt.step(self.critic.values_mut(), cg.values());

        let mut ag = self.actor.zeros_like();
        let mut scratch = self.critic.zeros_like();
        let mut mean_q = 0.0;
        for t in &batch {
            let ac = self.actor.forward_cached(&t.obs);
            let c = self
                .critic
                .forward_cached(&Self::critic_input(&t.obs, ac.out));
            mean_q += c.out;
            let dq = self.critic.backward(&c, 1.0, &mut scratch);
            let da = *dq.last().expect("action input");
            // ascend Q: descend -Q
            self.actor.backward(&ac, -da / n as f64, &mut ag);
        }
        self.actor_opt.step(self.actor.values_mut(), ag.values());

        self.actor_target.soft_update(&self.actor, self.cfg.tau);
        self.critic_target.soft_update(&self.critic, self.cfg.tau);
        Some(UpdateStats {
            critic_loss: loss / n as f64,
            mean_q: mean_q / n as f64,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn thirds() {
        assert_eq!(discretize(0.0), Precision::Int2);
        assert_eq!(discretize(0.5), Precision::Int4);
        assert_eq!(discretize(0.99), Precision::Int8);
        for b in Precision::QUANTIZED {
            assert_eq!(discretize(action_center(b)), b);
        }
    }

    #[test]
    fn mlp_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = Mlp::new(&mut rng, 3, 5, Head::Sigmoid);
        for l in &mut m.layers {
            for w in &mut l.w {
                *w *= 50.0;
            }
        }
        let x = [0.3, -0.2, 0.9];
        let c = m.forward_cached(&x);
        let mut g = m.zeros_like();
        let dx = m.backward(&c, 1.0, &mut g);
        let h = 1e-6;
        for j in 0..3 {
            let mut xp = x;
            xp[j] += h;
            let mut xm = x;
            xm[j] -= h;
            let fd = (m.forward(&xp) - m.forward(&xm)) / (2.0 * h);
            assert!(
                (fd - dx[j]).abs() <= 1e-6 * fd.abs().max(1e-3),
                "{fd} vs {}",
                dx[j]
            );
        }
        let grads: Vec<f64> = g.values().copied().collect();
        for k in [0, 7, 20, grads.len() - 1] {
            let mut mp = m.clone();
            *mp.values_mut().nth(k).unwrap() += h;
            let mut mm = m.clone();
            *mm.values_mut().nth(k).unwrap() -= h;
            let fd = (mp.forward(&x) - mm.forward(&x)) / (2.0 * h);
            assert!(
                (fd - grads[k]).abs() <= 1e-6 * fd.abs().max(1e-3),
                "param {k}: {fd} vs {}",
                grads[k]
            );
        }
    }

    #[test]
    fn buffer_is_fifo() {
        let mut b = ReplayBuffer::new(2);
        for r in 0..3 {
            b.push(Transition {
                obs: vec![],
                action: 0.0,
                reward: r as f64,
                next_obs: vec![],
                done: true,
            });
        }
        assert_eq!(b.len(), 2);
        assert_eq!(b.get(0).reward, 1.0);
    }

    #[test]
    fn update_skips_small_buffer() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut a = Agent::new(&mut rng, 4, AgentConfig::default());
        assert!(a.update(&mut rng).is_none());
    }

    fn filled(seed: u64, cfg: AgentConfig, reward: impl Fn(usize) -> f64) -> (Agent, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = Agent::new(&mut rng, 4, cfg);
        for i in 0..200 {
            let obs: Vec<f64> = (0..4).map(|_| rng.random()).collect();
            let action = rng.random();
            a.buffer.push(Transition {
                obs: obs.clone(),
                action,
                reward: reward(i),
                next_obs: obs,
                done: true,
            });
        }
        (a, rng)
    }

    #[test]
    fn critic_learns_constant_reward() {
        let (mut a, mut rng) = filled(3, AgentConfig::default(), |_| 0.7);
        let first = a.update(&mut rng).unwrap().critic_loss;
        let mut last = first;
        for _ in 0..99 {
            last = a.update(&mut rng).unwrap().critic_loss;
        }
        assert!(last < first * 0.1, "critic loss {first} -> {last}");
        assert!(a.actor.is_finite() && a.critic.is_finite());
    }

    #[test]
    fn zero_learning_rates_freeze_parameters() {
        let cfg = AgentConfig {
            actor_lr: 0.0,
            critic_lr: 0.0,
            ..AgentConfig::default()
        };
        let (mut a, mut rng) = filled(4, cfg, |i| (i % 3) as f64);
        let (actor, critic) = (a.actor.clone(), a.critic.clone());
        for _ in 0..5 {
            a.update(&mut rng).unwrap();
        }
        assert_eq!(a.actor, actor);
        assert_eq!(a.critic, critic);
    }

    #[test]
    fn updates_are_deterministic() {
        let run = || {
            let (mut a, mut rng) = filled(5, AgentConfig::default(), |i| (i % 7) as f64 / 7.0);
            for _ in 0..10 {
                a.update(&mut rng);
            }
            (a.actor, a.critic)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn warmup_actions_are_uniform_over_bitwidths() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = Agent::new(&mut rng, 4, AgentConfig::default());
        let mut counts = [0usize; 3];
        for _ in 0..3000 {
            let bits = discretize(a.act(&mut rng, &[0.0; 4], 0, 1));
            counts[Precision::QUANTIZED
                .iter()
                .position(|&b| b == bits)
                .unwrap()] += 1;
        }
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - 1000.0).powi(2) / 1000.0)
            .sum();
        // 99th percentile of chi-squared with 2 degrees of freedom
        assert!(chi2 < 9.21, "counts {counts:?}, chi2 {chi2}");
    }

    #[test]
    fn noise_decays_geometrically() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Agent::new(&mut rng, 4, AgentConfig::default());
        assert_eq!(a.noise_scale(0), 0.5);
        assert!((a.noise_scale(10) - 0.5 * 0.99f64.powi(10)).abs() < 1e-15);
        for _ in 0..100 {
            let v = a.act(&mut rng, &[0.1; 4], 5, 1);
            assert!((0.0..=1.0).contains(&v));
        }
    }
}
