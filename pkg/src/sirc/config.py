"""Experiment configuration: one JSON file, overridable field by field.

Precedence is explicit overrides (CLI flags) > config file > defaults. The
file holds up to four sections plus a top-level ``seed`` that drives the
workload generator, the mock backend and the simulated latencies::

    {
      "seed": 0,
      "workload": {"n_seed_prompts": 500, "near_miss_rate": 0.1, ...},
      "pipeline": {"air_tau": 0.9, "vs_tau": 0.95, "capacity": 10000, ...},
      "backend": {"air_prompt_tokens": 3322.8, "cv": 0.2, ...},
      "output": {"dir": "runs"}
    }

Unknown keys are rejected with an error naming the offending field.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

from sirc.domain import ValidationError
from sirc.pipeline import AIR_COST, VS_COST, CostModel, LatencyModel, MockLlmSpec, PipelineConfig
from sirc.retrieval import RetrievalConfig
from sirc.store import StoreConfig
from sirc.workload import WorkloadSpec

CONFIG_DIR_ENV = "SIRC_CONFIG_DIR"
DEFAULT_CONFIG_NAME = "sirc.json"

PIPELINE_DEFAULTS: dict[str, Any] = {
    "air_tau": 0.90,
    "vs_tau": 0.95,
    "mono_tau": 0.90,
    "k_rrf": 60,
    "top_k": 10,
    "entity_guard": "hard_reject",
    "vs_semantic": True,
    "vs_render_guard": True,
    "embedding_dimension": 256,
    "capacity": 10_000,
    "admission_policy": "always",
    "exact_median_ms": 2.66,
    "exact_sigma": 0.4474,
    "semantic_median_ms": 414.2256,
    "semantic_sigma": 0.35,
}

BACKEND_DEFAULTS: dict[str, Any] = {
    "air_prompt_tokens": AIR_COST.prompt_tokens,
    "air_completion_tokens": AIR_COST.completion_tokens,
    "air_latency_ms": AIR_COST.latency_ms,
    "vs_prompt_tokens": VS_COST.prompt_tokens,
    "vs_completion_tokens": VS_COST.completion_tokens,
    "vs_latency_ms": VS_COST.latency_ms,
    "cv": AIR_COST.cv,
}

OUTPUT_DEFAULTS: dict[str, Any] = {"dir": "runs"}

_WORKLOAD_FIELDS = {f.name for f in dataclasses.fields(WorkloadSpec)} - {"seed"}


@dataclass
class ExperimentConfig:
    seed: int = 0
    workload: dict[str, Any] = field(default_factory=dict)
    pipeline: dict[str, Any] = field(default_factory=lambda: dict(PIPELINE_DEFAULTS))
    backend: dict[str, Any] = field(default_factory=lambda: dict(BACKEND_DEFAULTS))
    output: dict[str, Any] = field(default_factory=lambda: dict(OUTPUT_DEFAULTS))

    # -- builders -------------------------------------------------------

    def workload_spec(self) -> WorkloadSpec:
        kwargs = dict(self.workload)
        for key in ("namespaces", "metrics", "dimensions"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        try:
            return WorkloadSpec(seed=self.seed, **kwargs)
        except TypeError as exc:
            raise ValidationError(f"workload: {exc}") from exc

    def pipeline_config(self) -> PipelineConfig:
        p = self.pipeline

        def retrieval(tau_key: str, semantic: bool = True) -> RetrievalConfig:
            return RetrievalConfig(
                tau=float(p[tau_key]),
                k_rrf=int(p["k_rrf"]),
                top_k=int(p["top_k"]),
                entity_guard=str(p["entity_guard"]),
                semantic_enabled=semantic,
            )

        return PipelineConfig(
            air_retrieval=retrieval("air_tau"),
            vs_retrieval=retrieval("vs_tau", bool(p["vs_semantic"])),
            mono_retrieval=retrieval("mono_tau"),
            vs_render_guard=bool(p["vs_render_guard"]),
            latency=LatencyModel(
                float(p["exact_median_ms"]), float(p["exact_sigma"]),
                float(p["semantic_median_ms"]), float(p["semantic_sigma"]),
            ),
            store=StoreConfig(capacity=int(p["capacity"]), admission_policy=p["admission_policy"]),
            embedding_dimension=int(p["embedding_dimension"]),
            seed=self.seed,
        )

    def backend_spec(self) -> MockLlmSpec:
        b = self.backend
        cv = float(b["cv"])
        if not cv > 0:
            raise ValidationError("backend.cv must be > 0")
        for key, value in b.items():
            if key != "cv" and float(value) < 0:
                raise ValidationError(f"backend.{key} must be >= 0")
        return MockLlmSpec(
            seed=self.seed,
            air=CostModel(float(b["air_prompt_tokens"]), float(b["air_completion_tokens"]), float(b["air_latency_ms"]), cv),
            vs=CostModel(float(b["vs_prompt_tokens"]), float(b["vs_completion_tokens"]), float(b["vs_latency_ms"]), cv),
        )

    def validate(self) -> None:
        """Build every derived object once so bad values fail early."""
        self.workload_spec()
        self.pipeline_config()
        self.backend_spec()


def _merge_section(name: str, base: dict[str, Any], update: Mapping[str, Any], allowed: set[str]) -> dict[str, Any]:
    if not isinstance(update, Mapping):
        raise ValidationError(f"{name} must be an object")
    unknown = sorted(set(update) - allowed)
    if unknown:
        raise ValidationError(f"unknown field {name}.{unknown[0]}")
    merged = dict(base)
    merged.update(update)
    return merged


def apply_overrides(config: ExperimentConfig, doc: Mapping[str, Any]) -> ExperimentConfig:
    """Layer ``doc`` (same shape as the file) over ``config``; ``None`` values are skipped."""
    sections = {"seed", "workload", "pipeline", "backend", "output"}
    unknown = sorted(set(doc) - sections)
    if unknown:
        raise ValidationError(f"unknown field {unknown[0]}")
    out = replace(config)
    if doc.get("seed") is not None:
        if not isinstance(doc["seed"], int) or isinstance(doc["seed"], bool) or doc["seed"] < 0:
            raise ValidationError(f"seed must be a non-negative integer, got {doc['seed']!r}")
        out.seed = doc["seed"]
    allowed = {
        "workload": _WORKLOAD_FIELDS,
        "pipeline": set(PIPELINE_DEFAULTS),
        "backend": set(BACKEND_DEFAULTS),
        "output": set(OUTPUT_DEFAULTS),
    }
    for name, keys in allowed.items():
        if name in doc:
            update = {k: v for k, v in doc[name].items() if v is not None} if isinstance(doc[name], Mapping) else doc[name]
            setattr(out, name, _merge_section(name, getattr(out, name), update, keys))
    return out


def resolve_config_path(path: str | os.PathLike | None) -> Path | None:
    """Find the config file: an explicit path, else ``$SIRC_CONFIG_DIR/sirc.json`` when present.

    A relative explicit path that does not exist is also tried under the
    config directory.
    """
    config_dir = os.environ.get(CONFIG_DIR_ENV)
    if path is not None:
        p = Path(path)
        if not p.exists() and config_dir and not p.is_absolute() and (Path(config_dir) / p).exists():
            return Path(config_dir) / p
        return p
    if config_dir and (Path(config_dir) / DEFAULT_CONFIG_NAME).exists():
        return Path(config_dir) / DEFAULT_CONFIG_NAME
    return None


def load_config(path: str | os.PathLike | None = None, overrides: Mapping[str, Any] | None = None) -> ExperimentConfig:
    """Defaults, then the file (if any), then ``overrides``."""
    config = ExperimentConfig()
    resolved = resolve_config_path(path)
    if resolved is not None:
        with open(resolved, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{resolved}: not valid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ValidationError(f"{resolved}: top level must be an object")
        config = apply_overrides(config, doc)
    if overrides:
        config = apply_overrides(config, overrides)
    config.validate()
    return config
