"""Pipeline configuration: TOML file -> nested dataclasses, validated up front.

Sections mirror the stages::

    seed = 0
    [data]        files or a synthetic fixture, normalization
    [data.synth]  generator parameters
    [split]       query fraction
    [graph]       P, k, k_a, kernel bandwidths
    [mccsh]       L, alpha, lambda1, lambda2, ... (+ [mccsh.epm], [mccsh.al])
    [stage2]      gamma1, gamma2, optimizer settings
    [model]       arch = "linear" | "mlp", hidden sizes
    [eval]        Hamming radius, optional top-k

Unknown keys are errors.  Any key can be overridden from the environment as
``XMHASH_<SECTION>__<KEY>`` (double underscore between nesting levels), e.g.
``XMHASH_GRAPH__K_A=0`` or ``XMHASH_MCCSH__EPM__RHO0=0.01``; values are parsed
as TOML literals and fall back to plain strings.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .hashfn import Stage2Config
from .mccsh import AlConfig, EpmConfig, MccshConfig

ENV_PREFIX = "XMHASH_"
DESK_SCALE_ANCHORS = 32


class ConfigError(ValueError):
    pass


@dataclass
class SynthConfig:
    n_clusters: int = 3
    per_cluster: int = 200
    dims: list = field(default_factory=lambda: [32, 24])
    spread: float = 0.3
    separation: float = 1.0
    elongation: float = 1.0


@dataclass
class DataConfig:
    paths: list = field(default_factory=list)
    format: str = "csv"
    labels: Optional[str] = None
    normalize: bool = True
    synth: SynthConfig = field(default_factory=SynthConfig)


@dataclass
class SplitConfig:
    query_fraction: float = 0.1


@dataclass
class GraphConfig:
    P: int = 500
    k: int = 3
    k_a: int = 2
    sigma: object = "auto"
    sigma_anchor: object = "auto"
    kmeans_iters: int = 100


@dataclass
class ModelConfig:
    arch: str = "linear"
    hidden: list = field(default_factory=lambda: [1024, 512])


@dataclass
class EvalConfig:
    radius: int = 2
    top_k: Optional[int] = None


@dataclass
class PipelineConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    mccsh: MccshConfig = field(default_factory=MccshConfig)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    model: ModelConfig = field(default_factory=ModelConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def hidden(self) -> tuple:
        return tuple(self.model.hidden) if self.model.arch == "mlp" else ()

    @property
    def n_instances(self) -> Optional[int]:
        """Row count when it is known without reading files."""
        if self.data.paths:
            return None
        return self.data.synth.n_clusters * self.data.synth.per_cluster

    def to_dict(self) -> dict:
        return _to_plain(self)

    def section_hash(self, *names) -> str:
        """Content hash over the named sections (and the seed)."""
        d = self.to_dict()
        blob = json.dumps({"seed": self.seed, **{n: d[n] for n in names}}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# nested dataclass types per section, for building and key checking
_SECTION_TYPES = {
    "data": DataConfig, "data.synth": SynthConfig, "split": SplitConfig, "graph": GraphConfig,
    "mccsh": MccshConfig, "mccsh.epm": EpmConfig, "mccsh.al": AlConfig, "stage2": Stage2Config,
    "model": ModelConfig, "eval": EvalConfig,
}


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"[{where}] must be a table")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    kwargs = {}
    for key, val in values.items():
        sub = f"{where}.{key}" if where else key
        if sub in _SECTION_TYPES:
            val = _build(_SECTION_TYPES[sub], val, sub)
        kwargs[key] = val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where or 'top level'}] {exc}") from exc


def _parse_env_value(text):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_env_overrides(raw: dict, environ=None) -> dict:
    """Merge ``XMHASH_A__B=value`` variables into a nested raw config dict."""
    environ = os.environ if environ is None else environ
    out = json.loads(json.dumps(raw))
    for name, text in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        path = name[len(ENV_PREFIX):].split("__")
        keys = [p.lower() for p in path]
        if keys == ["graph", "p"]:
            keys[-1] = "P"
        node = out
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{name}: '{k}' is not a section")
        node[keys[-1]] = _parse_env_value(text)
    return out


def load_config(path=None, environ=None, desk_scale=False, seed=None) -> PipelineConfig:
    """Read (optional) TOML, apply env overrides and CLI-level switches, validate."""
    raw = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    raw = apply_env_overrides(raw, environ)
    if desk_scale:
        raw.setdefault("graph", {})["P"] = DESK_SCALE_ANCHORS
    if seed is not None:
        raw["seed"] = seed
    if "seed" in raw.get("stage2", {}) or "seed" in raw.get("mccsh", {}).get("epm", {}):
        raise ConfigError("per-stage seeds are derived from the top-level seed; set 'seed' instead")
    cfg = _build(PipelineConfig, raw, "")
    # one seed drives synthesis, k-means, the split and training shuffles
    cfg.stage2.seed = cfg.seed
    cfg.mccsh.epm.seed = cfg.seed
    if path is not None:
        base = Path(path).parent
        cfg.data.paths = [str(base / p) for p in cfg.data.paths]
        if cfg.data.labels is not None:
            cfg.data.labels = str(base / cfg.data.labels)
    validate(cfg)
    return cfg


def validate(cfg: PipelineConfig, n_instances=None):
    """Cross-field checks that must hold before any computation starts."""
    g = cfg.graph
    if not isinstance(cfg.seed, int) or cfg.seed < 0 or cfg.seed >= 2 ** 64:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {cfg.seed!r}")
    if cfg.data.format not in ("csv", "raw-f32"):
        raise ConfigError(f"data.format must be 'csv' or 'raw-f32', got {cfg.data.format!r}")
    if g.P < 1:
        raise ConfigError(f"graph.P must be >= 1, got {g.P}")
    if not 1 <= g.k <= g.P:
        raise ConfigError(f"graph.k must satisfy 1 <= k <= P={g.P}, got {g.k}")
    if not 0 <= g.k_a < g.P:
        raise ConfigError(f"graph.k_a must satisfy 0 <= k_a < P={g.P}, got {g.k_a}")
    for name in ("sigma", "sigma_anchor"):
        v = getattr(g, name)
        if v != "auto" and not (isinstance(v, (int, float)) and not isinstance(v, bool) and v > 0):
            raise ConfigError(f"graph.{name} must be 'auto' or a positive number, got {v!r}")
    if not 0.0 < cfg.split.query_fraction < 1.0:
        raise ConfigError(f"split.query_fraction must lie in (0, 1), got {cfg.split.query_fraction}")
    if cfg.model.arch not in ("linear", "mlp"):
        raise ConfigError(f"model.arch must be 'linear' or 'mlp', got {cfg.model.arch!r}")
    if cfg.model.arch == "mlp" and (not cfg.model.hidden or min(cfg.model.hidden) < 1):
        raise ConfigError("model.hidden must list positive layer sizes for the mlp architecture")
    if cfg.eval.radius < 0:
        raise ConfigError("eval.radius must be >= 0")
    if cfg.eval.top_k is not None and cfg.eval.top_k < 1:
        raise ConfigError("eval.top_k must be >= 1")
    s = cfg.data.synth
    if not cfg.data.paths:
        if s.n_clusters < 2 or s.per_cluster < 1 or not s.dims or min(s.dims) < 1 or not s.spread > 0:
            raise ConfigError("data.synth needs n_clusters >= 2, per_cluster >= 1, positive dims and spread > 0")
    n = n_instances if n_instances is not None else cfg.n_instances
    if n is not None:
        n_db = n - max(1, int(round(cfg.split.query_fraction * n)))
        if g.P > n_db:
            raise ConfigError(f"graph.P={g.P} exceeds the {n_db} database instances; try --desk-scale")
        if cfg.mccsh.L > n_db - 1:
            raise ConfigError(f"mccsh.L={cfg.mccsh.L} too large for {n_db} database instances")
