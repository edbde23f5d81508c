"""Batch front-end: train, certify, attack, and merge result tables.

Every run is driven by one RunConfig (from a YAML file, command-line
flags, or both; flags win) and writes into its output directory:

* ``result.json``: the full structured record, schema-versioned, with
  the run's config echoed verbatim.  Replaying that echo reproduces the
  record bit-for-bit (timings aside); one master seed derives every
  noise, training, and attack stream by name.
* flat CSV exports next to it: a per-step radius series for the
  certify-state mode, and one (env, mixer, sigma, epsilon_cert, r_min,
  attacked_reward) row for the reward and attack modes.  Report mode
  merges such rows from many result files into one sorted table.

Exit codes: 0 ok, 2 bad configuration, 3 missing file or checkpoint,
4 numerical failure (e.g. diverged training).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import subprocess
import sys
import time
from dataclasses import dataclass

import yaml

from . import __version__
from .attack import AttackConfig, attacked_rollout, validate_certificates
from .certify import certify_trajectory, tcrgr
from .envs import (
    builtin_spec,
    episode_reward,
    load_grid_config,
    state_to_dict,
)
from .errors import ConfigError, MissingArtifactError, NumericalError
from .policy import (
    MIXERS,
    TrainConfig,
    greedy_joint_action,
    load_policy,
    train,
)
from .seeds import derive_seed
from .smoothing import NoiseConfig

MODES = ("train", "certify-state", "certify-reward", "attack", "report")

_TABLE_HEADER = ("env", "mixer", "sigma", "epsilon_cert", "r_min", "attacked_reward")


def _as_float(name, value):
    if isinstance(value, bool) or not isinstance(value, (int, float, str)):
        raise ConfigError(f"{name} must be a number")
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"{name} must be a number, got {value!r}")


def _as_int(name, value):
    if isinstance(value, bool) or not isinstance(value, (int, str)):
        raise ConfigError(f"{name} must be an integer")
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{name} must be an integer, got {value!r}")


@dataclass(frozen=True)
class RunConfig:
    """All parameters of one invocation.

    ``env`` is a grid YAML path or a builtin grid name; ``checkpoint``
    is required by the certify and attack modes; ``inputs`` lists result
    files for report mode.  ``seed`` is the single master seed: training
    uses it directly, smoothing and attacks use sub-streams derived from
    it by name.
    """

    mode: str
    env: str = ""
    out: str = ""
    checkpoint: str | None = None
    sigma: float = 0.1
    samples: int = 1000
    alpha: float = 0.05
    seed: int = 0
    pruning: bool = True
    mixer: str = "vdn"
    episodes: int = 2000
    learning_rate: float = 1e-3
    attack_steps: int = 40
    attack_restarts: int = 5
    attack_trials: int = 20
    rollout_trials: int = 5
    inputs: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        # YAML 1.1 reads exponent forms like 1e280 as strings; coerce
        for name in ("sigma", "alpha", "learning_rate"):
            object.__setattr__(self, name, _as_float(name, getattr(self, name)))
        for name in (
            "samples",
            "seed",
            "episodes",
            "attack_steps",
            "attack_restarts",
            "attack_trials",
            "rollout_trials",
        ):
            object.__setattr__(self, name, _as_int(name, getattr(self, name)))
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "report":
            if not self.inputs:
                raise ConfigError("report mode needs at least one input result file")
        elif not self.env:
            raise ConfigError("env is required")
        if not self.out:
            raise ConfigError("out is required")
        if not 0 < self.sigma < float("inf"):
            raise ConfigError("sigma must be positive and finite")
        if self.samples < 2:
            raise ConfigError("samples must be an integer of at least 2")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must lie strictly between 0 and 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an integer in [0, 2**64)")
        if self.mixer not in MIXERS:
            raise ConfigError(f"mixer must be one of {MIXERS}")
        if self.episodes < 0:
            raise ConfigError("episodes must be a non-negative integer")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        for name in ("attack_steps", "attack_restarts", "attack_trials", "rollout_trials"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be an integer of at least 1")


@dataclass(frozen=True)
class ResultRecord:
    schema_version: int
    mode: str
    config: dict
    build: str
    results: dict
    timings: dict

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _config_echo(cfg: RunConfig) -> dict:
    echo = dataclasses.asdict(cfg)
    echo["inputs"] = list(cfg.inputs)
    return echo


def _build_id() -> str:
    base = f"marlcert-{__version__}"
    try:
        probe = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=os.path.dirname(os.path.abspath(__file__)),
            capture_output=True,
            text=True,
            timeout=10,
        )
    except OSError:
        return base
    if probe.returncode == 0:
        return f"{base}+{probe.stdout.strip()}"
    return base


def _load_spec(env: str):
    if os.path.exists(env):
        return load_grid_config(env)
    try:
        return builtin_spec(env)
    except ConfigError:
        raise MissingArtifactError(f"env is neither a file nor a builtin grid: {env}")


def _env_name(env: str) -> str:
    return os.path.splitext(os.path.basename(env))[0]


def _noise_config(cfg: RunConfig) -> NoiseConfig:
    return NoiseConfig(
        sigma=float(cfg.sigma),
        samples=cfg.samples,
        alpha=cfg.alpha,
        seed=derive_seed(cfg.seed, "smoothing"),
    )


def _attack_config(cfg: RunConfig, noise: NoiseConfig, epsilon: float = 0.0):
    return AttackConfig(
        epsilon=epsilon,
        noise=noise,
        steps=cfg.attack_steps,
        restarts=cfg.attack_restarts,
        seed=derive_seed(cfg.seed, "attack"),
    )


def _require_checkpoint(cfg: RunConfig):
    if not cfg.checkpoint:
        raise ConfigError(f"checkpoint is required for mode {cfg.mode!r}")
    return load_policy(cfg.checkpoint)


def _cert_dict(cert) -> dict:
    return {
        "step_index": cert.step_index,
        "state": state_to_dict(cert.state),
        "actions": list(cert.actions),
        "pvalues": list(cert.pvalues),
        "corrected_pvalues": list(cert.corrected_pvalues),
        "per_agent_radius": list(cert.per_agent_radius),
        "certified_set": sorted(cert.certified_set),
        "min_radius": cert.min_radius,
    }


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if v is None else v for v in row])


def _write_table_row(cfg: RunConfig, results: dict):
    row = [results[key] for key in _TABLE_HEADER]
    _write_csv(os.path.join(cfg.out, "reward_bound.csv"), _TABLE_HEADER, [row])


def _run_train(cfg: RunConfig, spec) -> dict:
    checkpoint = os.path.join(cfg.out, "checkpoint")
    policy = train(
        spec,
        TrainConfig(
            episodes=cfg.episodes, seed=cfg.seed, learning_rate=cfg.learning_rate
        ),
        cfg.mixer,
        checkpoint_path=checkpoint,
    )
    clean = episode_reward(
        spec, lambda s, state: greedy_joint_action(policy, s, state)
    )
    return {
        "checkpoint": checkpoint,
        "env": _env_name(cfg.env),
        "mixer": cfg.mixer,
        "episodes": cfg.episodes,
        "clean_greedy_reward": clean,
    }


def _run_certify_state(cfg: RunConfig, spec) -> dict:
    policy = _require_checkpoint(cfg)
    certificates = certify_trajectory(policy, spec, _noise_config(cfg))
    n = policy.n_agents
    header = ["step", "min_radius"] + [f"d_{i}" for i in range(n)]
    rows = [
        [c.step_index, c.min_radius] + [c.per_agent_radius[i] for i in range(n)]
        for c in certificates
    ]
    _write_csv(os.path.join(cfg.out, "state_series.csv"), header, rows)
    return {
        "env": _env_name(cfg.env),
        "mixer": policy.mixer,
        "sigma": cfg.sigma,
        "certificates": [_cert_dict(c) for c in certificates],
    }


def _run_certify_reward(cfg: RunConfig, spec) -> dict:
    policy = _require_checkpoint(cfg)
    noise = _noise_config(cfg)
    bound = tcrgr(policy, spec, noise, pruning=cfg.pruning)
    clean = attacked_rollout(policy, spec, _attack_config(cfg, noise)).attacked_reward
    results = {
        "env": _env_name(cfg.env),
        "mixer": policy.mixer,
        "sigma": cfg.sigma,
        "epsilon_cert": bound.epsilon_cert,
        "r_min": bound.r_min,
        "attacked_reward": None,
        "clean_reward": clean,
        "nodes_expanded": bound.nodes_expanded,
        "nodes_pruned": bound.nodes_pruned,
        "trajectories_completed": bound.trajectories_completed,
    }
    _write_table_row(cfg, results)
    return results


def _run_attack(cfg: RunConfig, spec) -> dict:
    policy = _require_checkpoint(cfg)
    noise = _noise_config(cfg)
    certificates = certify_trajectory(policy, spec, noise)
    bound = tcrgr(policy, spec, noise, pruning=cfg.pruning)
    report = validate_certificates(
        policy,
        spec,
        certificates,
        bound,
        _attack_config(cfg, noise),
        trials=cfg.attack_trials,
        rollout_trials=cfg.rollout_trials,
    )
    rewards = list(report.rollout_rewards)
    results = {
        "env": _env_name(cfg.env),
        "mixer": policy.mixer,
        "sigma": cfg.sigma,
        "epsilon_cert": bound.epsilon_cert,
        "r_min": bound.r_min,
        "attacked_reward": sum(rewards) / len(rewards),
        "clean_reward": attacked_rollout(
            policy, spec, _attack_config(cfg, noise)
        ).attacked_reward,
        "validation": {
            "states_checked": report.states_checked,
            "agents_checked": report.agents_checked,
            "in_ball_trials": report.in_ball_trials,
            "in_ball_flips": report.in_ball_flips,
            "contrast_trials": report.contrast_trials,
            "contrast_flips": report.contrast_flips,
            "rollout_rewards": rewards,
            "rmin_violated": report.rmin_violated,
        },
        "certificates": [_cert_dict(c) for c in certificates],
    }
    _write_table_row(cfg, results)
    return results


def _run_report(cfg: RunConfig) -> dict:
    rows = []
    for path in cfg.inputs:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                record = json.load(fh)
        except FileNotFoundError as exc:
            raise MissingArtifactError(f"result file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"result file is not valid JSON: {path}") from exc
        results = record.get("results", {})
        missing = [k for k in _TABLE_HEADER if k not in results]
        if missing:
            raise ConfigError(
                f"result file {path} lacks table fields {missing} "
                f"(mode {record.get('mode')!r} exports no reward bound)"
            )
        rows.append({key: results[key] for key in _TABLE_HEADER})
    rows.sort(key=lambda r: (r["env"], r["mixer"], r["sigma"]))
    _write_csv(
        os.path.join(cfg.out, "report.csv"),
        _TABLE_HEADER,
        [[row[k] for k in _TABLE_HEADER] for row in rows],
    )
    return {"rows": rows}


def run(cfg: RunConfig) -> ResultRecord:
    """Execute one configured run and write its artifacts."""
    started = time.perf_counter()
    os.makedirs(cfg.out, exist_ok=True)
    if cfg.mode == "report":
        results = _run_report(cfg)
    else:
        spec = _load_spec(cfg.env)
        handler = {
            "train": _run_train,
            "certify-state": _run_certify_state,
            "certify-reward": _run_certify_reward,
            "attack": _run_attack,
        }[cfg.mode]
        results = handler(cfg, spec)
    record = ResultRecord(
        schema_version=1,
        mode=cfg.mode,
        config=_config_echo(cfg),
        build=_build_id(),
        results=results,
        timings={"total_s": time.perf_counter() - started},
    )
    with open(os.path.join(cfg.out, "result.json"), "w", encoding="utf-8") as fh:
        json.dump(record.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return record


def _load_config_file(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = yaml.safe_load(fh.read())
    except FileNotFoundError as exc:
        raise MissingArtifactError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file is not valid YAML: {exc}") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a mapping of fields")
    valid = {f.name for f in dataclasses.fields(RunConfig)}
    for key in doc:
        if key not in valid:
            raise ConfigError(f"unknown config field {key!r}")
    return doc


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="marlcert",
        description="Certify and attack smoothed multi-agent policies.",
    )
    sub = parser.add_subparsers(dest="mode", required=True)
    for mode in MODES:
        p = sub.add_parser(mode)
        p.add_argument("--config", help="YAML file with all parameters")
        p.add_argument("--seed", type=int)
        p.add_argument("--sigma", type=float)
        p.add_argument("--samples", type=int)
        p.add_argument("--alpha", type=float)
        p.add_argument("--no-prune", action="store_true")
        p.add_argument("--out", help="output directory")
        if mode == "report":
            p.add_argument("inputs", nargs="*", help="result.json files to merge")
    return parser


def _config_from_args(args) -> RunConfig:
    fields = _load_config_file(args.config) if args.config else {}
    fields["mode"] = args.mode
    for name in ("seed", "sigma", "samples", "alpha", "out"):
        value = getattr(args, name)
        if value is not None:
            fields[name] = value
    if args.no_prune:
        fields["pruning"] = False
    if getattr(args, "inputs", None):
        fields["inputs"] = tuple(args.inputs)
    return RunConfig(**fields)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _config_from_args(args)
        run(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    print(f"{cfg.mode}: wrote {os.path.join(cfg.out, 'result.json')}")
    return 0
