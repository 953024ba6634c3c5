"""Config handling for the benchmark CLI.

Settings come from three layers, later wins: a key=value file, environment
variables prefixed SELCC_, and explicit overrides (the CLI's --set).  Keys
are routed by name to either the cluster config or the workload spec, and
values are coerced to the type of the field's default.
"""

from __future__ import annotations

import dataclasses
import os

from selcc.api import ClusterConfig
from selcc.harness.workload import WorkloadSpec

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}
ENV_PREFIX = "SELCC_"


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if default is None:
            return None if raw.lower() in ("none", "null", "") else int(raw, 0)
        if isinstance(default, bool):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw, 0)
        if isinstance(default, float):
            return float(raw)            # accepts "inf"
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {e}") from None


def _defaults(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:    # type: ignore[misc]
            out[f.name] = f.default_factory()                 # type: ignore[misc]
    return out


def read_config_file(path: str) -> dict[str, str]:
    entries: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, raw = line.split("=", 1)
            entries[key.strip().lower().replace("-", "_")] = raw.strip()
    return entries


def env_entries(env=None) -> dict[str, str]:
    env = os.environ if env is None else env
    out = {}
    for key, raw in env.items():
        if key.startswith(ENV_PREFIX) and len(key) > len(ENV_PREFIX):
            out[key[len(ENV_PREFIX):].lower()] = raw
    return out


def build_settings(entries: dict[str, str]) -> tuple[ClusterConfig, WorkloadSpec]:
    cluster_defaults = _defaults(ClusterConfig)
    workload_defaults = _defaults(WorkloadSpec)
    cluster_kw: dict = {}
    workload_kw: dict = {}
    for key, raw in entries.items():
        if key in cluster_defaults:
            cluster_kw[key] = _coerce(key, raw, cluster_defaults[key])
        elif key in workload_defaults:
            workload_kw[key] = _coerce(key, raw, workload_defaults[key])
        else:
            known = sorted(cluster_defaults) + sorted(workload_defaults)
            raise ConfigError(f"unknown setting {key!r} (known: {', '.join(known)})")
    return ClusterConfig(**cluster_kw), WorkloadSpec(**workload_kw)


def load_settings(path: str | None = None, env=None,
                  overrides: dict[str, str] | None = None
                  ) -> tuple[ClusterConfig, WorkloadSpec]:
    entries: dict[str, str] = {}
    if path:
        entries.update(read_config_file(path))
    entries.update(env_entries(env))
    if overrides:
        entries.update({k.lower().replace("-", "_"): v
                        for k, v in overrides.items()})
    return build_settings(entries)
