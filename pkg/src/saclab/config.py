"""Strict JSON run configuration: one document describing data, environment,
agents, seeds, and output directory.

Loading validates everything before any work starts.  Unknown keys are
rejected, and every error message carries the dotted path of the offending
field so misconfigured runs fail fast and legibly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .agent import AgentConfig
from .data import synthesize_market
from .env import EnvConfig
from .traces import TraceKind, TraceSpec


class ConfigError(ValueError):
    """A run-configuration problem; message starts with the field path."""


def _check_keys(obj: dict, allowed: set, required: set, path: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected an object")
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}: unknown key")
    missing = required - set(obj)
    if missing:
        raise ConfigError(f"{path}.{sorted(missing)[0]}: missing required key")


def _number(obj: dict, key: str, path: str, default=None) -> float:
    if key not in obj:
        if default is None:
            raise ConfigError(f"{path}.{key}: missing required key")
        return default
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}.{key}: expected a number")
    return float(v)


def _integer(obj: dict, key: str, path: str, default=None) -> int:
    if key not in obj:
        if default is None:
            raise ConfigError(f"{path}.{key}: missing required key")
        return default
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{path}.{key}: expected an integer")
    return v


def _string(obj: dict, key: str, path: str, default=None) -> str:
    if key not in obj:
        if default is None:
            raise ConfigError(f"{path}.{key}: missing required key")
        return default
    v = obj[key]
    if not isinstance(v, str):
        raise ConfigError(f"{path}.{key}: expected a string")
    return v


@dataclass(frozen=True)
class SynthSpec:
    kind: str
    length: int
    seed: int
    params: dict


@dataclass(frozen=True)
class DataConfig:
    source: str  # "csv" | "synth"
    path: str | None
    synth: SynthSpec | None
    n_envs: int
    train_days: int
    minutes_per_day: int


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig
    env: EnvConfig
    agents: tuple  # one AgentConfig per trace kind, kinds distinct
    seeds: tuple
    out_dir: str
    raw: dict  # the exact document as loaded, for embedding in outputs


def _parse_trace(obj: dict, path: str) -> TraceSpec:
    _check_keys(obj, {"kind", "lam", "n", "gamma", "alpha_ent"}, {"kind"}, path)
    kind_name = _string(obj, "kind", path)
    try:
        kind = TraceKind(kind_name)
    except ValueError:
        valid = ", ".join(k.value for k in TraceKind)
        raise ConfigError(f"{path}.kind: {kind_name!r} is not one of {valid}") from None
    try:
        return TraceSpec(
            kind=kind,
            lam=_number(obj, "lam", path, 0.9),
            n=_integer(obj, "n", path, 5),
            gamma=_number(obj, "gamma", path, 0.99),
            alpha_ent=_number(obj, "alpha_ent", path, 0.1),
        )
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from None


def _parse_agent(obj: dict, path: str) -> AgentConfig:
    allowed = {
        "trace", "lr_actor", "lr_critic", "tau", "batch", "grad_steps_per_env_step",
        "policy_delay", "episodes", "validate_every", "lstm_hidden", "head_hidden",
        "buffer_capacity", "warmup",
    }
    if isinstance(obj, dict) and "seed" in obj:
        raise ConfigError(f"{path}.seed: set via the top-level 'seeds' list, not per agent")
    _check_keys(obj, allowed, {"trace"}, path)
    trace = _parse_trace(obj["trace"], f"{path}.trace")
    try:
        return AgentConfig(
            trace=trace,
            lr_actor=_number(obj, "lr_actor", path, 3e-4),
            lr_critic=_number(obj, "lr_critic", path, 3e-4),
            tau=_number(obj, "tau", path, 0.005),
            batch=_integer(obj, "batch", path, 64),
            grad_steps_per_env_step=_integer(obj, "grad_steps_per_env_step", path, 2),
            policy_delay=_integer(obj, "policy_delay", path, 2),
            episodes=_integer(obj, "episodes", path, 30),
            validate_every=_integer(obj, "validate_every", path, 5),
            seed=0,
            lstm_hidden=_integer(obj, "lstm_hidden", path, 64),
            head_hidden=_integer(obj, "head_hidden", path, 64),
            buffer_capacity=_integer(obj, "buffer_capacity", path, 100_000),
            warmup=_integer(obj, "warmup", path, 1_000),
        )
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from None


def _parse_env(obj: dict, path: str) -> EnvConfig:
    allowed = {"h_max", "lookback", "unit", "commission", "initial_balance", "mark_rule"}
    _check_keys(obj, allowed, set(), path)
    try:
        return EnvConfig(
            h_max=_number(obj, "h_max", path, 0.1),
            lookback=_integer(obj, "lookback", path, 3),
            unit=_number(obj, "unit", path, 0.01),
            commission=_number(obj, "commission", path, 0.0),
            initial_balance=_number(obj, "initial_balance", path, 10_000.0),
            mark_rule=_string(obj, "mark_rule", path, "bid_for_long"),
        )
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from None


def _parse_data(obj: dict, path: str) -> DataConfig:
    allowed = {"source", "path", "synth", "n_envs", "train_days", "minutes_per_day"}
    _check_keys(obj, allowed, {"source"}, path)
    source = _string(obj, "source", path)
    if source not in ("csv", "synth"):
        raise ConfigError(f"{path}.source: must be 'csv' or 'synth'")
    csv_path = None
    synth = None
    if source == "csv":
        csv_path = _string(obj, "path", path)
        if "synth" in obj:
            raise ConfigError(f"{path}.synth: not allowed when source is 'csv'")
    else:
        if "path" in obj:
            raise ConfigError(f"{path}.path: not allowed when source is 'synth'")
        sobj = obj.get("synth")
        if sobj is None:
            raise ConfigError(f"{path}.synth: missing required key")
        _check_keys(sobj, {"kind", "length", "seed", "params"}, {"kind", "length"}, f"{path}.synth")
        params = sobj.get("params", {})
        if not isinstance(params, dict):
            raise ConfigError(f"{path}.synth.params: expected an object")
        synth = SynthSpec(
            kind=_string(sobj, "kind", f"{path}.synth"),
            length=_integer(sobj, "length", f"{path}.synth"),
            seed=_integer(sobj, "seed", f"{path}.synth", 0),
            params=dict(params),
        )
        try:
            # length-2 dry run: same parameter checks as the real call
            synthesize_market(synth.kind, 2, synth.params, synth.seed)
        except ValueError as e:
            raise ConfigError(f"{path}.synth: {e}") from None
    data = DataConfig(
        source=source,
        path=csv_path,
        synth=synth,
        n_envs=_integer(obj, "n_envs", path, 4),
        train_days=_integer(obj, "train_days", path, 3),
        minutes_per_day=_integer(obj, "minutes_per_day", path, 1440),
    )
    if data.n_envs < 1:
        raise ConfigError(f"{path}.n_envs: must be >= 1")
    if data.train_days < 1:
        raise ConfigError(f"{path}.train_days: must be >= 1")
    if data.minutes_per_day < 2:
        raise ConfigError(f"{path}.minutes_per_day: must be >= 2")
    return data


def parse_run_config(doc: dict) -> RunConfig:
    _check_keys(doc, {"data", "env", "agents", "seeds", "out_dir"}, {"data", "agents", "seeds", "out_dir"}, "config")
    data = _parse_data(doc["data"], "config.data")
    env = _parse_env(doc.get("env", {}), "config.env")
    agents_obj = doc["agents"]
    if not isinstance(agents_obj, list) or not agents_obj:
        raise ConfigError("config.agents: expected a non-empty list")
    agents = tuple(_parse_agent(a, f"config.agents[{i}]") for i, a in enumerate(agents_obj))
    kinds = [a.trace.kind for a in agents]
    if len(set(kinds)) != len(kinds):
        raise ConfigError("config.agents: trace kinds must be distinct")
    seeds_obj = doc["seeds"]
    if (
        not isinstance(seeds_obj, list)
        or not seeds_obj
        or any(isinstance(s, bool) or not isinstance(s, int) for s in seeds_obj)
    ):
        raise ConfigError("config.seeds: expected a non-empty list of integers")
    if len(set(seeds_obj)) != len(seeds_obj):
        raise ConfigError("config.seeds: seeds must be distinct")
    out_dir = _string(doc, "out_dir", "config")
    return RunConfig(
        data=data, env=env, agents=agents, seeds=tuple(seeds_obj), out_dir=out_dir, raw=doc
    )


def load_run_config(path: str | Path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config: file not found: {p}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config: invalid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config: top level must be an object")
    return parse_run_config(doc)
