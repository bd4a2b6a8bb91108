"""Learned per-click payment policy for decoupled first-price runs.

A small Gaussian policy maps a nine-feature view of the payer's ledger to a
raw action g; the payment charged on a click is softplus(g) * bid * cvr.
Training is clipped-surrogate policy gradient with GAE, a squared-error
critic, and an entropy bonus. All gradients are written out by hand on top
of the numpy MLP so they can be checked against finite differences.

Episode structure mirrors the delayed-feedback environment: one rollout is
a full multi-stage run, each stage is one episode (the value bootstrap is
cut at stage boundaries), and when the stage's true conversions are
released the accuracy reward is recomputed with them and added to the
stage's final step.

RNG purposes (Philox key = [seed, purpose]): 11 parameter init, 12 action
sampling, 13 minibatch shuffling, 14 the per-update market seed sequence.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .agents import TruthfulAgent
from .errors import ConfigError, MissingInputError, NumericalFault, SchemaError
from .market import MarketConfig, generate_market
from .mechanisms import MechanismConfig, SimulationResult, run_auction
from .nets import MLP, Adam

FEATURE_DIM = 9
CURVES_CSV_HEADER = "update,mean_reward,mean_abs_ratio_err,actor_loss,critic_loss,entropy"
CHECKPOINT_MAGIC = "auctionlab-checkpoint 1"

_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
_ENTROPY_CONST = 0.5 * np.log(2.0 * np.pi * np.e)

# Relative scale of the target regularizer when xi is left unset.
XI_SCALE = 1e-3

# Floor inside the accuracy log so a perfect stage stays finite.
ACCURACY_FLOOR = 1e-12


@dataclass(frozen=True)
class RLConfig:
    """Hyperparameters for the payment-policy trainer."""

    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    zeta: float = 0.1
    xi: float | None = None
    alphas: tuple[float, float, float] = (1.0, 0.5, 0.01)
    lr: float = 3e-4
    epochs: int = 4
    minibatch: int = 128
    updates: int = 60
    hidden: tuple[int, ...] = (64, 64)
    sigma_floor: float = 1e-3
    adv_norm: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lam must lie in [0, 1], got {self.lam}")
        if not 0.0 < self.clip < 1.0:
            raise ConfigError(f"clip must lie in (0, 1), got {self.clip}")
        if self.zeta < 0.0:
            raise ConfigError(f"zeta must be nonnegative, got {self.zeta}")
        if self.xi is not None and self.xi <= 0.0:
            raise ConfigError(f"xi must be positive when given, got {self.xi}")
        if len(self.alphas) != 3 or any(a < 0.0 for a in self.alphas):
            raise ConfigError(f"alphas must be three nonnegative weights, got {self.alphas}")
        if self.lr <= 0.0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        for name in ("epochs", "minibatch", "updates"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1, got {getattr(self, name)}")
        if any(h < 1 for h in self.hidden):
            raise ConfigError(f"hidden sizes must be positive, got {self.hidden}")
        if self.sigma_floor <= 0.0:
            raise ConfigError(f"sigma_floor must be positive, got {self.sigma_floor}")


def resolve_xi(xi: float | None, tcpa: np.ndarray) -> np.ndarray:
    """Per-bidder target regularizer; defaults to a small multiple of tCPA."""
    tcpa = np.asarray(tcpa, dtype=np.float64)
    if xi is None:
        return XI_SCALE * tcpa
    return np.full(tcpa.shape, float(xi))


def build_state_features(
    clicks: float,
    visible_conversions: float,
    pending_conversions: float,
    paid_total: float,
    expected_paid: float,
    paid_stage: float,
    last_nonzero_payment: float,
    stage_progress: float,
    expected_stage_clicks: float,
    expected_stage_conversions: float,
    tcpa: float,
    xi: float,
) -> np.ndarray:
    """Nine-dimensional policy input built from one bidder's ledger.

    Counts are scaled by the stage's expected schedule and payments by the
    estimated conversion value (visible + pending) * tcpa + xi, so feature
    magnitudes stay comparable across configs. The final entry is a
    constant click indicator acting as a bias input.
    """
    click_scale = max(expected_stage_clicks, 1e-6)
    conv_scale = max(expected_stage_conversions, 1e-6)
    z_est = visible_conversions + pending_conversions
    pay_scale = z_est * tcpa + xi
    return np.array(
        [
            clicks / click_scale,
            visible_conversions / conv_scale,
            pending_conversions / conv_scale,
            paid_total / pay_scale,
            expected_paid / pay_scale,
            paid_stage / pay_scale,
            last_nonzero_payment / tcpa,
            stage_progress,
            1.0,
        ]
    )


def accuracy_reward(paid: np.ndarray, targets: np.ndarray, floor: float = ACCURACY_FLOOR) -> float:
    """Negative log of the summed absolute ratio error across active bidders.

    A total error of 1 maps to reward 0; smaller errors are rewarded on a
    log scale, floored so a perfect stage stays finite.
    """
    paid = np.asarray(paid, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if paid.shape != targets.shape:
        raise SchemaError(f"paid shape {paid.shape} does not match targets shape {targets.shape}")
    if np.any(targets <= 0.0):
        raise SchemaError("accuracy targets must be positive")
    total = float(np.sum(np.abs(paid / targets - 1.0)))
    return float(-np.log(max(total, floor)))


def smoothness_reward(payment: float, last_payment: float | None) -> float:
    """Relative change against the previous nonzero payment; 0 if none yet."""
    if last_payment is None or last_payment <= 0.0:
        return 0.0
    return -abs(payment - last_payment) / last_payment


def compute_reward(accuracy: float, smoothness: float, zeta: float) -> float:
    return accuracy + zeta * smoothness


def softplus(g: float | np.ndarray) -> float | np.ndarray:
    # logaddexp keeps large negative g from underflowing to log(0).
    return np.logaddexp(0.0, g)


def gaussian_log_prob(g: float | np.ndarray, mu: float | np.ndarray, sigma: float | np.ndarray) -> float | np.ndarray:
    z = (np.asarray(g) - mu) / sigma
    return -0.5 * z * z - np.log(sigma) - _HALF_LOG_2PI


class GaussianPolicy:
    """MLP head producing (mean, raw log stddev) for the raw action."""

    def __init__(self, net: MLP, sigma_floor: float = 1e-3):
        if net.sizes[-1] != 2:
            raise ConfigError(f"policy net must have two outputs, got {net.sizes[-1]}")
        self.net = net
        self.sigma_floor = float(sigma_floor)

    def head(self, features: np.ndarray) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
        """Batched (mu, raw log sigma, forward cache)."""
        out, acts = self.net.forward(features)
        return out[:, 0], out[:, 1], acts

    def act(
        self,
        features: np.ndarray,
        rng: np.random.Generator | None = None,
        deterministic: bool = False,
    ) -> tuple[float, float, float]:
        """Sample (or take the mean of) the raw action for one feature vector.

        Returns:
            (action, raw_action, log_prob) with action = softplus(raw).

        Raises:
            NumericalFault: if the network emits a non-finite head.
        """
        out, _ = self.net.forward(features.reshape(1, -1))
        mu = float(out[0, 0])
        log_sigma_raw = float(out[0, 1])
        if not (np.isfinite(mu) and np.isfinite(log_sigma_raw)):
            raise NumericalFault(f"policy head is not finite: mu={mu}, log_sigma_raw={log_sigma_raw}")
        sigma = max(float(np.exp(log_sigma_raw)), self.sigma_floor)
        if not np.isfinite(sigma):
            raise NumericalFault(f"policy stddev overflowed: log_sigma_raw={log_sigma_raw}")
        if deterministic:
            g = mu
        else:
            if rng is None:
                raise ConfigError("stochastic action sampling needs an rng")
            g = mu + sigma * float(rng.standard_normal())
        logp = float(gaussian_log_prob(g, mu, sigma))
        action = float(softplus(g))
        if not (np.isfinite(g) and np.isfinite(action) and np.isfinite(logp)):
            raise NumericalFault(f"action is not finite: g={g}")
        return action, g, logp


def value_estimate(critic: MLP, features: np.ndarray) -> float:
    out, _ = critic.forward(features.reshape(1, -1))
    v = float(out[0, 0])
    if not np.isfinite(v):
        raise NumericalFault(f"critic output is not finite: {v}")
    return v


def td_errors(rewards: np.ndarray, values: np.ndarray, gamma: float) -> np.ndarray:
    """One-step temporal-difference residuals with a zero terminal value."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.shape != values.shape or rewards.ndim != 1:
        raise SchemaError(f"rewards {rewards.shape} and values {values.shape} must be equal-length vectors")
    next_values = np.append(values[1:], 0.0)
    return rewards + gamma * next_values - values


def gae(deltas: np.ndarray, gamma: float, lam: float) -> np.ndarray:
    """Reverse-scan exponentially weighted advantage estimates."""
    deltas = np.asarray(deltas, dtype=np.float64)
    out = np.empty_like(deltas)
    acc = 0.0
    for t in range(deltas.size - 1, -1, -1):
        acc = deltas[t] + gamma * lam * acc
        out[t] = acc
    return out


def discounted_returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(rewards)
    acc = 0.0
    for t in range(rewards.size - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def ppo_clip_loss(ratios: np.ndarray, advantages: np.ndarray, clip: float) -> float:
    """Negated clipped-surrogate objective (lower is better for the actor)."""
    ratios = np.asarray(ratios, dtype=np.float64)
    advantages = np.asarray(advantages, dtype=np.float64)
    surr1 = ratios * advantages
    surr2 = np.clip(ratios, 1.0 - clip, 1.0 + clip) * advantages
    return float(-np.mean(np.minimum(surr1, surr2)))


def critic_loss(values: np.ndarray, returns: np.ndarray) -> float:
    values = np.asarray(values, dtype=np.float64)
    returns = np.asarray(returns, dtype=np.float64)
    return float(np.mean((values - returns) ** 2))


def policy_entropy(log_sigmas: np.ndarray) -> float:
    """Mean differential entropy of the Gaussian heads, from log stddevs."""
    log_sigmas = np.asarray(log_sigmas, dtype=np.float64)
    return float(np.mean(_ENTROPY_CONST + log_sigmas))


def combined_loss(actor: float, critic: float, entropy: float, alphas: tuple[float, float, float]) -> float:
    a1, a2, a3 = alphas
    return a1 * actor + a2 * critic - a3 * entropy


@dataclass
class Trajectory:
    """Per-step record of one full-run rollout, cut into stage episodes."""

    features: np.ndarray
    actions_raw: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    episode_lengths: list[int]

    @property
    def num_steps(self) -> int:
        return int(self.rewards.size)


@dataclass
class TrainingBatch:
    features: np.ndarray
    actions_raw: np.ndarray
    old_log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def subset(self, idx: np.ndarray) -> "TrainingBatch":
        return TrainingBatch(
            self.features[idx],
            self.actions_raw[idx],
            self.old_log_probs[idx],
            self.advantages[idx],
            self.returns[idx],
        )


def trajectory_targets(traj: Trajectory, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-episode GAE advantages and discounted-return critic targets."""
    advantages = np.empty(traj.num_steps)
    returns = np.empty(traj.num_steps)
    pos = 0
    for length in traj.episode_lengths:
        sl = slice(pos, pos + length)
        deltas = td_errors(traj.rewards[sl], traj.values[sl], gamma)
        advantages[sl] = gae(deltas, gamma, lam)
        returns[sl] = discounted_returns(traj.rewards[sl], gamma)
        pos += length
    if pos != traj.num_steps:
        raise SchemaError(f"episode lengths cover {pos} of {traj.num_steps} steps")
    return advantages, returns


@dataclass
class LossOutput:
    total: float
    actor: float
    critic: float
    entropy: float
    policy_grad: np.ndarray
    critic_grad: np.ndarray


def loss_and_grads(policy: GaussianPolicy, critic: MLP, batch: TrainingBatch, cfg: RLConfig) -> LossOutput:
    """Combined loss and analytic parameter gradients for one minibatch.

    The clipped-surrogate term passes gradient through whichever branch the
    elementwise min selects; the clipped branch contributes gradient only
    strictly inside the clip interval. Log-stddev gradients are masked
    wherever the stddev floor is active.
    """
    a1, a2, a3 = cfg.alphas
    B = batch.features.shape[0]

    mu, lsr, acts = policy.head(batch.features)
    sigma_exp = np.exp(lsr)
    sigma = np.maximum(sigma_exp, policy.sigma_floor)
    not_floored = (sigma_exp >= policy.sigma_floor).astype(np.float64)
    z = (batch.actions_raw - mu) / sigma
    logp = -0.5 * z * z - np.log(sigma) - _HALF_LOG_2PI
    rho = np.exp(logp - batch.old_log_probs)

    surr1 = rho * batch.advantages
    surr2 = np.clip(rho, 1.0 - cfg.clip, 1.0 + cfg.clip) * batch.advantages
    pick1 = surr1 <= surr2
    actor = float(-np.mean(np.minimum(surr1, surr2)))

    v_out, v_acts = critic.forward(batch.features)
    v = v_out[:, 0]
    crit = float(np.mean((v - batch.returns) ** 2))

    log_sigma = np.log(sigma)
    entropy = float(np.mean(_ENTROPY_CONST + log_sigma))
    total = combined_loss(actor, crit, entropy, cfg.alphas)

    # Actor backward: dtotal/dmin_i = -a1/B, then through the picked branch.
    inside = ((rho > 1.0 - cfg.clip) & (rho < 1.0 + cfg.clip)).astype(np.float64)
    dmin_drho = np.where(pick1, batch.advantages, batch.advantages * inside)
    dlogp = (-a1 / B) * dmin_drho * rho
    dmu = dlogp * (z / sigma)
    dlsr = dlogp * (z * z - 1.0) * not_floored
    # Entropy enters the total with weight -a3.
    dlsr = dlsr - (a3 / B) * not_floored
    policy_grads = policy.net.backward(acts, np.stack([dmu, dlsr], axis=1))

    dv = (a2 * 2.0 / B) * (v - batch.returns)
    critic_grads = critic.backward(v_acts, dv[:, None])

    return LossOutput(
        total=total,
        actor=actor,
        critic=crit,
        entropy=entropy,
        policy_grad=MLP.flatten_grads(policy_grads),
        critic_grad=MLP.flatten_grads(critic_grads),
    )


class RLPaymentController:
    """Online per-click payer driven by the Gaussian policy.

    Implements the engine's controller protocol. In collection mode every
    click appends one trajectory step; at the stage boundary the accuracy
    reward is recomputed with the released true conversions and added to
    the stage's last step, and the episode is closed.
    """

    def __init__(
        self,
        policy: GaussianPolicy,
        critic: MLP,
        tcpa: np.ndarray,
        zeta: float = 0.1,
        xi: float | None = None,
        rng: np.random.Generator | None = None,
        deterministic: bool = False,
        collect: bool = True,
    ):
        self.policy = policy
        self.critic = critic
        self.tcpa = np.asarray(tcpa, dtype=np.float64)
        self.zeta = float(zeta)
        self.xi = resolve_xi(xi, self.tcpa)
        self.rng = rng
        self.deterministic = deterministic
        self.collect = collect

        m = self.tcpa.size
        self.clicks = np.zeros(m)
        self.visible = np.zeros(m)
        self.stage_z_est = np.zeros(m)
        self.stage_clicks = np.zeros(m, dtype=np.int64)
        self.paid_stage = np.zeros(m)
        self.paid_total = np.zeros(m)
        self.last_nonzero_payment = np.zeros(m)
        self.expected_paid_completed = np.zeros(m)

        self.bids = np.zeros(m)
        self.expected_stage_clicks = np.zeros(m)
        self.expected_stage_conversions = np.zeros(m)
        self.stage_start = 0
        self.stage_len = 1

        self._feats: list[np.ndarray] = []
        self._gs: list[float] = []
        self._logps: list[float] = []
        self._values: list[float] = []
        self._rewards: list[float] = []
        self._episode_lengths: list[int] = []
        self._steps_this_stage = 0
        self.stage_true_errors: list[float] = []

    def begin_stage(self, stage: int, expected_clicks: np.ndarray, expected_conversions: np.ndarray,
                    bids: np.ndarray, stage_start: int, stage_len: int) -> None:
        self.bids = np.asarray(bids, dtype=np.float64).copy()
        self.expected_stage_clicks = np.asarray(expected_clicks, dtype=np.float64)
        self.expected_stage_conversions = np.asarray(expected_conversions, dtype=np.float64)
        self.stage_start = int(stage_start)
        self.stage_len = int(stage_len)
        self.stage_z_est[:] = 0.0
        self.stage_clicks[:] = 0
        self.paid_stage[:] = 0.0
        self._steps_this_stage = 0

    def on_click(self, bidder: int, round_index: int, cvr: float, expected_remaining_clicks: float) -> float:
        m = bidder
        self.stage_z_est[m] += cvr
        self.clicks[m] += 1.0
        self.stage_clicks[m] += 1
        progress = (round_index - self.stage_start + 1) / self.stage_len
        expected_paid = (
            self.expected_paid_completed[m]
            + self.bids[m] * self.expected_stage_conversions[m] * progress
        )
        feats = build_state_features(
            clicks=self.clicks[m],
            visible_conversions=self.visible[m],
            pending_conversions=self.stage_z_est[m],
            paid_total=self.paid_total[m],
            expected_paid=expected_paid,
            paid_stage=self.paid_stage[m],
            last_nonzero_payment=self.last_nonzero_payment[m],
            stage_progress=progress,
            expected_stage_clicks=self.expected_stage_clicks[m],
            expected_stage_conversions=self.expected_stage_conversions[m],
            tcpa=self.tcpa[m],
            xi=self.xi[m],
        )
        action, g, logp = self.policy.act(feats, rng=self.rng, deterministic=self.deterministic)
        payment = action * self.bids[m] * cvr
        self.paid_stage[m] += payment
        self.paid_total[m] += payment

        active = self.stage_clicks >= 1
        targets = self.stage_z_est[active] * self.tcpa[active] + self.xi[active]
        r1 = accuracy_reward(self.paid_stage[active], targets)
        r2 = smoothness_reward(payment, self.last_nonzero_payment[m])
        reward = compute_reward(r1, r2, self.zeta)

        if payment > 0.0:
            self.last_nonzero_payment[m] = payment
        if self.collect:
            self._feats.append(feats)
            self._gs.append(g)
            self._logps.append(logp)
            self._values.append(value_estimate(self.critic, feats))
            self._rewards.append(reward)
            self._steps_this_stage += 1
        return payment

    def end_stage(self, visible_conversions: np.ndarray) -> None:
        visible = np.asarray(visible_conversions, dtype=np.float64)
        stage_true = visible - self.visible
        active = self.stage_clicks >= 1
        if np.any(active):
            targets = stage_true[active] * self.tcpa[active] + self.xi[active]
            self.stage_true_errors.append(float(np.mean(np.abs(self.paid_stage[active] / targets - 1.0))))
            if self.collect and self._steps_this_stage > 0:
                # Feedback release: reward the stage's final step with the
                # accuracy score under the true conversion counts.
                self._rewards[-1] += accuracy_reward(self.paid_stage[active], targets)
        if self.collect and self._steps_this_stage > 0:
            self._episode_lengths.append(self._steps_this_stage)
        self.expected_paid_completed += self.bids * self.expected_stage_conversions
        self.visible = visible.copy()

    def trajectory(self) -> Trajectory:
        if not self._feats:
            return Trajectory(
                np.zeros((0, FEATURE_DIM)), np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0), []
            )
        return Trajectory(
            np.stack(self._feats),
            np.array(self._gs),
            np.array(self._logps),
            np.array(self._rewards),
            np.array(self._values),
            list(self._episode_lengths),
        )


class DFPTrainingEnv:
    """Full-run rollout wrapper around the auction engine."""

    def __init__(self, market_config: MarketConfig, rl: RLConfig):
        self.market_config = market_config
        self.rl = rl

    def rollout(
        self,
        policy: GaussianPolicy,
        critic: MLP,
        market_seed: int,
        rng: np.random.Generator | None,
        deterministic: bool = False,
        collect: bool = True,
    ) -> tuple[Trajectory, list[float], SimulationResult]:
        """Run one full market under the policy.

        Returns the trajectory, the per-stage true absolute ratio errors,
        and the simulation result.
        """
        market = generate_market(replace(self.market_config, seed=market_seed))
        controller = RLPaymentController(
            policy,
            critic,
            market.tcpa,
            zeta=self.rl.zeta,
            xi=self.rl.xi,
            rng=rng,
            deterministic=deterministic,
            collect=collect,
        )
        mech = MechanismConfig("DFP", controller="rl")
        agents: list = [TruthfulAgent() for _ in range(market.num_bidders)]
        result = run_auction(market, mech, agents, controller=controller)
        return controller.trajectory(), controller.stage_true_errors, result


@dataclass
class TrainResult:
    policy: GaussianPolicy
    critic: MLP
    curves: list[dict[str, float]]
    aborted_updates: int


def _curve_row(update: int, mean_reward: float, err: float, loss: LossOutput) -> dict[str, float]:
    return {
        "update": float(update),
        "mean_reward": mean_reward,
        "mean_abs_ratio_err": err,
        "actor_loss": loss.actor,
        "critic_loss": loss.critic,
        "entropy": loss.entropy,
    }


def train(market_config: MarketConfig, rl: RLConfig, seed: int = 0) -> TrainResult:
    """Train the payment policy on freshly generated markets.

    One update = one full-run rollout followed by epochs of minibatch
    clipped-surrogate steps. If any minibatch loss turns non-finite the
    whole update is rolled back (parameters and optimizer state) and
    counted in aborted_updates.
    """
    rng_init = np.random.Generator(np.random.Philox(key=[seed, 11]))
    policy = GaussianPolicy(MLP(FEATURE_DIM, rl.hidden, 2, rng_init), rl.sigma_floor)
    critic = MLP(FEATURE_DIM, rl.hidden, 1, rng_init)
    rng_act = np.random.Generator(np.random.Philox(key=[seed, 12]))
    rng_shuffle = np.random.Generator(np.random.Philox(key=[seed, 13]))
    market_seeds = np.random.Generator(np.random.Philox(key=[seed, 14])).integers(2**63, size=rl.updates)

    env = DFPTrainingEnv(market_config, rl)
    opt_policy = Adam(policy.net.num_params, lr=rl.lr)
    opt_critic = Adam(critic.num_params, lr=rl.lr)
    curves: list[dict[str, float]] = []
    aborted = 0

    for update in range(rl.updates):
        traj, errors, _ = env.rollout(policy, critic, int(market_seeds[update]), rng_act)
        if traj.num_steps == 0:
            curves.append(_curve_row(update, float("nan"), float("nan"),
                                     LossOutput(0.0, float("nan"), float("nan"), float("nan"),
                                                np.zeros(0), np.zeros(0))))
            continue
        advantages, returns = trajectory_targets(traj, rl.gamma, rl.lam)
        if rl.adv_norm:
            advantages = (advantages - advantages.mean()) / (advantages.std() + 1e-8)
        batch = TrainingBatch(traj.features, traj.actions_raw, traj.log_probs, advantages, returns)

        pre = loss_and_grads(policy, critic, batch, rl)
        err = float(np.mean(errors)) if errors else float("nan")
        curves.append(_curve_row(update, float(traj.rewards.mean()), err, pre))

        snap_policy = policy.net.get_flat()
        snap_critic = critic.get_flat()
        snap_state = (opt_policy.m.copy(), opt_policy.v.copy(), opt_policy.t,
                      opt_critic.m.copy(), opt_critic.v.copy(), opt_critic.t)
        ok = True
        n = traj.num_steps
        for _ in range(rl.epochs):
            perm = rng_shuffle.permutation(n)
            for start in range(0, n, rl.minibatch):
                sub = batch.subset(perm[start:start + rl.minibatch])
                out = loss_and_grads(policy, critic, sub, rl)
                if not np.isfinite(out.total):
                    ok = False
                    break
                policy.net.set_flat(opt_policy.step(policy.net.get_flat(), out.policy_grad))
                critic.set_flat(opt_critic.step(critic.get_flat(), out.critic_grad))
            if not ok:
                break
        if not ok:
            policy.net.set_flat(snap_policy)
            critic.set_flat(snap_critic)
            opt_policy.m, opt_policy.v, opt_policy.t = snap_state[0], snap_state[1], snap_state[2]
            opt_critic.m, opt_critic.v, opt_critic.t = snap_state[3], snap_state[4], snap_state[5]
            aborted += 1

    return TrainResult(policy=policy, critic=critic, curves=curves, aborted_updates=aborted)


def _write_param(fh, name: str, array: np.ndarray) -> None:
    if array.ndim == 1:
        fh.write(f"param {name} {array.size}\n")
        fh.write(" ".join(repr(float(x)) for x in array) + "\n")
    else:
        fh.write(f"param {name} {array.shape[0]} {array.shape[1]}\n")
        for row in array:
            fh.write(" ".join(repr(float(x)) for x in row) + "\n")


def save_checkpoint(policy: GaussianPolicy, critic: MLP, path: str) -> None:
    """Write both networks to a plain-text checkpoint.

    Layout: a magic header, the stddev floor, then one `param <name>
    <shape>` block per weight or bias with repr-formatted float64 rows,
    closed by `end`. repr round-trips every value bit for bit.
    """
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(CHECKPOINT_MAGIC + "\n")
        fh.write(f"sigma_floor {repr(policy.sigma_floor)}\n")
        for i, (w, b) in enumerate(zip(policy.net.weights, policy.net.biases)):
            _write_param(fh, f"policy.W{i}", w)
            _write_param(fh, f"policy.b{i}", b)
        for i, (w, b) in enumerate(zip(critic.weights, critic.biases)):
            _write_param(fh, f"critic.W{i}", w)
            _write_param(fh, f"critic.b{i}", b)
        fh.write("end\n")


def _rebuild_net(params: dict[str, np.ndarray], prefix: str) -> MLP:
    weights = []
    i = 0
    while f"{prefix}.W{i}" in params:
        w = params[f"{prefix}.W{i}"]
        b = params.get(f"{prefix}.b{i}")
        if b is None or b.shape != (w.shape[1],):
            raise SchemaError(f"checkpoint bias {prefix}.b{i} is missing or mis-shaped")
        weights.append((w, b))
        i += 1
    if not weights:
        raise SchemaError(f"checkpoint has no {prefix} layers")
    sizes = [weights[0][0].shape[0]] + [w.shape[1] for w, _ in weights]
    for (w, _), (a, b) in zip(weights, zip(sizes[:-1], sizes[1:])):
        if w.shape != (a, b):
            raise SchemaError(f"checkpoint {prefix} layer shapes do not chain: {w.shape} vs ({a}, {b})")
    net = MLP(sizes[0], tuple(sizes[1:-1]), sizes[-1])
    net.weights = [w.copy() for w, _ in weights]
    net.biases = [b.copy() for _, b in weights]
    return net


def load_checkpoint(path: str) -> tuple[GaussianPolicy, MLP]:
    """Reconstruct (policy, critic) from a text checkpoint."""
    if not os.path.exists(path):
        raise MissingInputError(f"checkpoint not found: {path}")
    with open(path, encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh]
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise SchemaError(f"not a checkpoint file: {path}")
    if len(lines) < 2 or not lines[1].startswith("sigma_floor "):
        raise SchemaError("checkpoint is missing the sigma_floor line")
    sigma_floor = float(lines[1].split(" ", 1)[1])

    params: dict[str, np.ndarray] = {}
    i = 2
    while i < len(lines) and lines[i] != "end":
        head = lines[i].split()
        if head[0] != "param" or len(head) not in (3, 4):
            raise SchemaError(f"malformed checkpoint line {i + 1}: {lines[i]!r}")
        name = head[1]
        if len(head) == 3:
            size = int(head[2])
            values = np.array([float(x) for x in lines[i + 1].split()])
            if values.size != size:
                raise SchemaError(f"checkpoint param {name} expected {size} values, got {values.size}")
            params[name] = values
            i += 2
        else:
            rows, cols = int(head[2]), int(head[3])
            block = [[float(x) for x in lines[i + 1 + r].split()] for r in range(rows)]
            values = np.array(block)
            if values.shape != (rows, cols):
                raise SchemaError(f"checkpoint param {name} expected shape ({rows}, {cols})")
            params[name] = values
            i += 1 + rows
    if i >= len(lines):
        raise SchemaError("checkpoint is missing the end marker")

    policy_net = _rebuild_net(params, "policy")
    critic = _rebuild_net(params, "critic")
    return GaussianPolicy(policy_net, sigma_floor), critic


def write_curves_csv(curves: list[dict[str, float]], path: str) -> None:
    cols = CURVES_CSV_HEADER.split(",")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(CURVES_CSV_HEADER + "\n")
        for row in curves:
            fh.write(",".join(repr(float(row[c])) if c != "update" else str(int(row[c])) for c in cols) + "\n")
