"""Joint value policies: per-agent Q networks plus a team mixer.

Each agent owns a small MLP mapping its local observation to five action
values and always acts greedily on them (ties to the lowest index).  The
team value q_total combines the per-agent chosen values either by summation
("vdn") or through a state-conditioned monotone mixer ("qmix_mono"): a
hypernetwork reads a global state encoding and emits one weight per agent
plus a bias; weights pass through abs() so raising any agent's value can
never lower the team value.

The trainer is standard TD learning on q_total with a replay buffer, a
periodically synced target network, and per-agent epsilon-greedy
exploration.  Training uses its own discount (default 0.99); certification
elsewhere evaluates undiscounted returns.  Everything is seeded: the same
TrainConfig produces bit-identical checkpoints.

A policy checkpoint is a directory: ``manifest.json`` describing shapes and
mixer kind, one ``agent_<i>.mlp`` network file per agent, and
``hypernet.mlp`` for the qmix_mono mixer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import nn
from .envs import (
    N_ACTIONS,
    EnvState,
    GridSpec,
    JointAction,
    observation_length,
    observe,
    reset,
    step,
)
from .errors import CheckpointError, ConfigError, MissingArtifactError, NumericalError
from .seeds import derive_seed

AGENT_HIDDEN = 64
HYPER_HIDDEN = 32
TRAIN_EVERY = 4  # env steps between gradient updates

MIXERS = ("vdn", "qmix_mono")

MANIFEST_NAME = "manifest.json"
_MANIFEST_FORMAT = "marlcert-policy"
_MANIFEST_VERSION = 1


@dataclass
class JointPolicy:
    agent_nets: tuple
    mixer: str
    hypernet: Optional[nn.Mlp]

    def __post_init__(self):
        if self.mixer not in MIXERS:
            raise ConfigError(f"unknown mixer {self.mixer!r}")
        if self.mixer == "qmix_mono" and self.hypernet is None:
            raise ConfigError("qmix_mono needs a hypernetwork")
        if self.mixer == "vdn" and self.hypernet is not None:
            raise ConfigError("vdn takes no hypernetwork")
        outs = {net.layer_dims[-1] for net in self.agent_nets}
        if outs != {N_ACTIONS}:
            raise ConfigError("agent nets must emit one value per action")

    @property
    def n_agents(self) -> int:
        return len(self.agent_nets)


@dataclass(frozen=True)
class TrainConfig:
    episodes: int
    seed: int
    batch_size: int = 32
    replay_capacity: int = 5000
    learning_rate: float = 1e-3
    gamma_train: float = 0.99
    target_sync: int = 200  # gradient updates between target-net refreshes
    eps_schedule: tuple = (1.0, 0.05, 0.6)  # (start, end, decay fraction)
    obs_noise: float = 0.0  # Gaussian augmentation applied to TD batches

    def __post_init__(self):
        if self.episodes < 0:
            raise ConfigError("episodes must be non-negative")
        for name in ("batch_size", "replay_capacity", "target_sync"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 < self.gamma_train <= 1.0:
            raise ConfigError("gamma_train must be in (0, 1]")
        if not (np.isfinite(self.obs_noise) and self.obs_noise >= 0):
            raise ConfigError("obs_noise must be finite and non-negative")
        start, end, frac = self.eps_schedule
        if not (0 <= end <= start <= 1 and 0 < frac <= 1):
            raise ConfigError("bad eps_schedule")

    def init_seed(self) -> int:
        return derive_seed(self.seed, "policy-init")


def global_encoding_length(spec: GridSpec) -> int:
    return 2 * spec.n_agents + len(spec.items)


def encode_global_state(spec: GridSpec, state: EnvState) -> np.ndarray:
    """Normalized agent positions followed by a remaining-item bitmap."""
    enc = np.empty(global_encoding_length(spec), dtype=np.float64)
    k = 0
    for x, y in state.agent_positions:
        enc[k] = x / max(spec.width - 1, 1)
        enc[k + 1] = y / max(spec.height - 1, 1)
        k += 2
    remaining = state.remaining_items
    for cell in sorted(spec.items):
        enc[k] = 1.0 if (cell, spec.items[cell]) in remaining else 0.0
        k += 1
    return enc


def new_policy(spec: GridSpec, mixer: str, rng) -> JointPolicy:
    """Randomly initialized policy for `spec`. Nets differ per agent."""
    obs_len = observation_length(spec)
    nets = tuple(
        nn.mlp_init((obs_len, AGENT_HIDDEN, N_ACTIONS), "relu", rng)
        for _ in range(spec.n_agents)
    )
    hyper = None
    if mixer == "qmix_mono":
        hyper = nn.mlp_init(
            (global_encoding_length(spec), HYPER_HIDDEN, spec.n_agents + 1),
            "relu",
            rng,
        )
    return JointPolicy(nets, mixer, hyper)


def agent_values(policy: JointPolicy, observation: np.ndarray, agent: int) -> np.ndarray:
    return nn.forward(policy.agent_nets[agent], observation)


def greedy_joint_action(policy: JointPolicy, spec: GridSpec, state: EnvState) -> JointAction:
    # np.argmax returns the first maximum: the lowest-index tie rule
    return tuple(
        int(np.argmax(agent_values(policy, observe(spec, state, n), n)))
        for n in range(policy.n_agents)
    )


def _chosen_values(policy, spec, state, action) -> np.ndarray:
    return np.array(
        [
            agent_values(policy, observe(spec, state, n), n)[action[n]]
            for n in range(policy.n_agents)
        ]
    )


def _mix(policy, spec, state, chosen: np.ndarray) -> float:
    if policy.mixer == "vdn":
        return float(np.sum(chosen))
    out = nn.forward(policy.hypernet, encode_global_state(spec, state))
    w = np.abs(out[:-1])
    return float(w @ chosen + out[-1])


def q_total(policy: JointPolicy, spec: GridSpec, state: EnvState, action: JointAction) -> float:
    if len(action) != policy.n_agents:
        raise ValueError("joint action length mismatch")
    return _mix(policy, spec, state, _chosen_values(policy, spec, state, action))


def counterfactual_values(
    policy: JointPolicy, spec: GridSpec, state: EnvState, action: JointAction, agent: int
) -> np.ndarray:
    """q_total with `agent`'s action replaced by each alternative in turn."""
    chosen = _chosen_values(policy, spec, state, action)
    own = agent_values(policy, observe(spec, state, agent), agent)
    if policy.mixer == "vdn":
        return (np.sum(chosen) - chosen[agent]) + own
    out = nn.forward(policy.hypernet, encode_global_state(spec, state))
    w = np.abs(out[:-1])
    rest = w @ chosen - w[agent] * chosen[agent] + out[-1]
    return rest + w[agent] * own


def _clone_net(net: nn.Mlp) -> nn.Mlp:
    return nn.Mlp(
        net.layer_dims,
        [w.copy() for w in net.weights],
        [b.copy() for b in net.biases],
        net.activation,
    )


def _snapshot(policy: JointPolicy) -> JointPolicy:
    hyper = _clone_net(policy.hypernet) if policy.hypernet is not None else None
    return JointPolicy(tuple(_clone_net(n) for n in policy.agent_nets), policy.mixer, hyper)


def _epsilon(cfg: TrainConfig, episode: int) -> float:
    start, end, frac = cfg.eps_schedule
    horizon = max(1, int(cfg.episodes * frac))
    t = min(1.0, episode / horizon)
    return start + (end - start) * t


def train(
    spec: GridSpec,
    cfg: TrainConfig,
    mixer: str,
    checkpoint_path=None,
) -> JointPolicy:
    """TD-train a policy on `spec`; optionally write its checkpoint."""
    policy = new_policy(spec, mixer, np.random.default_rng(cfg.init_seed()))
    target = _snapshot(policy)
    rng = np.random.default_rng(derive_seed(cfg.seed, "train"))

    adam = [nn.adam_init(net, cfg.learning_rate) for net in policy.agent_nets]
    adam_hyper = (
        nn.adam_init(policy.hypernet, cfg.learning_rate)
        if policy.hypernet is not None
        else None
    )

    n = policy.n_agents
    replay = []
    write_at = 0
    env_steps = 0
    updates = 0

    for episode in range(cfg.episodes):
        state = reset(spec)
        eps = _epsilon(cfg, episode)
        while not state.done:
            obs = np.stack([observe(spec, state, i) for i in range(n)])
            actions = []
            for i in range(n):
                if rng.random() < eps:
                    actions.append(int(rng.integers(0, N_ACTIONS)))
                else:
                    actions.append(int(np.argmax(nn.forward(policy.agent_nets[i], obs[i]))))
            actions = tuple(actions)
            out = step(spec, state, actions)
            nxt = out.next_state
            entry = (
                obs,
                actions,
                out.team_reward,
                np.stack([observe(spec, nxt, i) for i in range(n)]),
                encode_global_state(spec, state),
                encode_global_state(spec, nxt),
                out.done,
            )
            if len(replay) < cfg.replay_capacity:
                replay.append(entry)
            else:
                replay[write_at] = entry
                write_at = (write_at + 1) % cfg.replay_capacity
            env_steps += 1
            state = nxt

            if env_steps % TRAIN_EVERY or len(replay) < cfg.batch_size:
                continue
            picks = rng.integers(0, len(replay), cfg.batch_size)
            batch = [replay[int(i)] for i in picks]
            if cfg.obs_noise > 0:
                # fresh Gaussian augmentation per draw: values learned this
                # way stay decisive under smoothing noise of similar scale
                batch = [
                    (
                        o + rng.standard_normal(o.shape) * cfg.obs_noise,
                        a,
                        r,
                        no + rng.standard_normal(no.shape) * cfg.obs_noise,
                        gs,
                        gsn,
                        d,
                    )
                    for (o, a, r, no, gs, gsn, d) in batch
                ]
            _td_update(policy, target, adam, adam_hyper, batch, cfg, episode)
            updates += 1
            if updates % cfg.target_sync == 0:
                target = _snapshot(policy)

    if checkpoint_path is not None:
        save_policy(policy, checkpoint_path)
    return policy


def _td_update(policy, target, adam, adam_hyper, batch, cfg, episode):
    b = len(batch)
    n = policy.n_agents
    obs = np.stack([e[0] for e in batch])  # (b, n, obs)
    acts = np.array([e[1] for e in batch])  # (b, n)
    rewards = np.array([e[2] for e in batch])
    next_obs = np.stack([e[3] for e in batch])
    encs = np.stack([e[4] for e in batch])
    next_encs = np.stack([e[5] for e in batch])
    done = np.array([bool(e[6]) for e in batch])

    # bootstrapped target: each agent's greedy value under the target nets
    next_chosen = np.empty((b, n))
    for i in range(n):
        vals = nn.forward_batch(target.agent_nets[i], next_obs[:, i, :])
        next_chosen[:, i] = vals.max(axis=1)
    if policy.mixer == "vdn":
        next_q = next_chosen.sum(axis=1)
    else:
        hyper_out = nn.forward_batch(target.hypernet, next_encs)
        next_q = (
            np.abs(hyper_out[:, :-1]) * next_chosen
        ).sum(axis=1) + hyper_out[:, -1]
    y = rewards + cfg.gamma_train * next_q * (~done)

    chosen = np.empty((b, n))
    values = []
    for i in range(n):
        vals = nn.forward_batch(policy.agent_nets[i], obs[:, i, :])
        values.append(vals)
        chosen[:, i] = vals[np.arange(b), acts[:, i]]
    if policy.mixer == "vdn":
        q = chosen.sum(axis=1)
        weights = np.ones((b, n))
        hyper_out = None
    else:
        hyper_out = nn.forward_batch(policy.hypernet, encs)
        weights = np.abs(hyper_out[:, :-1])
        q = (weights * chosen).sum(axis=1) + hyper_out[:, -1]

    if not (np.isfinite(q).all() and np.isfinite(y).all()):
        raise NumericalError(
            f"training diverged (non-finite TD loss) at episode {episode}"
        )

    dq = 2.0 * (q - y) / b
    for i in range(n):
        grad_out = np.zeros((b, N_ACTIONS))
        grad_out[np.arange(b), acts[:, i]] = dq * weights[:, i]
        grads, _ = nn.backward_batch(policy.agent_nets[i], obs[:, i, :], grad_out)
        nn.adam_step(policy.agent_nets[i], grads, adam[i])
    if policy.mixer == "qmix_mono":
        grad_hyper = np.empty((b, n + 1))
        grad_hyper[:, :-1] = dq[:, None] * np.sign(hyper_out[:, :-1]) * chosen
        grad_hyper[:, -1] = dq
        grads, _ = nn.backward_batch(policy.hypernet, encs, grad_hyper)
        nn.adam_step(policy.hypernet, grads, adam_hyper)


def save_policy(policy: JointPolicy, path) -> None:
    """Write a checkpoint directory: manifest plus one file per network."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": _MANIFEST_FORMAT,
        "version": _MANIFEST_VERSION,
        "mixer": policy.mixer,
        "n_agents": policy.n_agents,
        "n_actions": N_ACTIONS,
        "obs_length": policy.agent_nets[0].layer_dims[0],
        "agent_nets": [f"agent_{i}.mlp" for i in range(policy.n_agents)],
        "hypernet": "hypernet.mlp" if policy.hypernet is not None else None,
    }
    for i, net in enumerate(policy.agent_nets):
        nn.checkpoint_save(net, path / manifest["agent_nets"][i])
    if policy.hypernet is not None:
        nn.checkpoint_save(policy.hypernet, path / "hypernet.mlp")
    with open(path / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_policy(path) -> JointPolicy:
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.is_file():
        raise MissingArtifactError(f"no policy checkpoint at {path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt policy manifest: {exc}") from exc
    if manifest.get("format") != _MANIFEST_FORMAT:
        raise CheckpointError("not a policy checkpoint manifest")
    if manifest.get("version") != _MANIFEST_VERSION:
        raise CheckpointError(
            f"unsupported manifest version {manifest.get('version')}"
        )
    nets = []
    for name in manifest["agent_nets"]:
        net_path = path / name
        if not net_path.is_file():
            raise MissingArtifactError(f"missing network file {net_path}")
        nets.append(nn.checkpoint_load(net_path))
    hyper = None
    if manifest.get("hypernet"):
        hyper_path = path / manifest["hypernet"]
        if not hyper_path.is_file():
            raise MissingArtifactError(f"missing network file {hyper_path}")
        hyper = nn.checkpoint_load(hyper_path)
    return JointPolicy(tuple(nets), manifest["mixer"], hyper)
