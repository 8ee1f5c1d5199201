"""Declarative run configuration.

One JSON file describes models, strategies, document and ground-truth
locations, judging, and review policy. Credentials are never stored in the
file, only the names of environment variables that hold them.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from decimal import Decimal
from pathlib import Path
from typing import Optional

from .evaluation import ComparisonOptions
from .gateway import Backend, HttpBackend, MockBackend
from .jsontree import Strategy
from .review import TierPolicy


class ConfigInvalid(Exception):
    pass


class MissingCredential(ConfigInvalid):
    pass


@dataclass(frozen=True)
class ModelSpec:
    model_id: str
    provider: str  # "mock" | "openai"
    credential_env: Optional[str] = None
    base_url: Optional[str] = None
    script: Optional[Path] = None  # mock provider only

    def build_backend(self) -> Backend:
        if self.provider == "mock":
            if self.script is None:
                return MockBackend()
            return MockBackend.from_file(self.script)
        if self.provider == "openai":
            if not self.base_url or not self.credential_env:
                raise ConfigInvalid(
                    f"model {self.model_id}: openai provider needs "
                    "base_url and credential_env")
            if not os.environ.get(self.credential_env):
                raise MissingCredential(
                    f"model {self.model_id}: env var "
                    f"{self.credential_env} not set")
            return HttpBackend(self.base_url, self.credential_env)
        raise ConfigInvalid(f"unknown provider {self.provider!r}")


@dataclass(frozen=True)
class RunConfig:
    models: tuple[ModelSpec, ...]
    strategies: tuple[Strategy, ...]
    docs_dir: Path
    gt_dir: Optional[Path]
    profiles_dir: Optional[Path]
    judge: str  # "deterministic" | "llm"
    judge_model: Optional[str]
    merger_model: Optional[str]
    merge_mode: str  # "deterministic" | "llm"
    numeric_rel_tolerance: Decimal
    tier_policy: tuple[TierPolicy, ...]
    seed: int
    cache_dir: Path
    runs_dir: Path
    audit_per_stratum: int = 10

    def __post_init__(self) -> None:
        ids = [m.model_id for m in self.models]
        if len(set(ids)) != len(ids):
            raise ConfigInvalid("duplicate model ids")
        extraction_models = self.extraction_models()
        if Strategy.COMBINED_EXT in self.strategies and len(extraction_models) < 3:
            raise ConfigInvalid("combined_ext needs at least 3 extraction models")
        if Strategy.CUSTOMISED_EXT in self.strategies and self.profiles_dir is None:
            raise ConfigInvalid("customised_ext needs profiles_dir")
        if self.judge == "llm" and not self.judge_model:
            raise ConfigInvalid("llm judge needs judge_model")
        if self.judge not in ("deterministic", "llm"):
            raise ConfigInvalid(f"unknown judge {self.judge!r}")
        if self.merge_mode not in ("deterministic", "llm"):
            raise ConfigInvalid(f"unknown merge_mode {self.merge_mode!r}")
        if self.merge_mode == "llm" and not self.merger_model:
            raise ConfigInvalid("llm merge needs merger_model")

    def extraction_models(self) -> tuple[ModelSpec, ...]:
        """Models used for extraction; the judge/merger-only models excluded."""
        reserved = {self.judge_model, self.merger_model}
        return tuple(m for m in self.models if m.model_id not in reserved)

    def model(self, model_id: str) -> ModelSpec:
        for spec in self.models:
            if spec.model_id == model_id:
                return spec
        raise ConfigInvalid(f"unknown model {model_id!r}")

    def build_backends(self) -> dict[str, Backend]:
        return {m.model_id: m.build_backend() for m in self.models}

    def comparison_options(self) -> ComparisonOptions:
        return ComparisonOptions.load_default(
            numeric_rel_tolerance=self.numeric_rel_tolerance,
            semantic_judge="llm" if self.judge == "llm" else "off")

    def snapshot(self) -> dict:
        """Canonical, path-independent form hashed into the run id."""
        return {
            "models": [
                {"model_id": m.model_id, "provider": m.provider,
                 "script": m.script.name if m.script else None}
                for m in self.models
            ],
            "strategies": [s.value for s in self.strategies],
            "judge": self.judge,
            "judge_model": self.judge_model,
            "merger_model": self.merger_model,
            "merge_mode": self.merge_mode,
            "numeric_rel_tolerance": str(self.numeric_rel_tolerance),
            "tier_policy": [p.to_json() for p in self.tier_policy],
            "seed": self.seed,
        }

    @classmethod
    def from_file(cls, path: Path) -> "RunConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text("utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
        base = path.parent

        def resolve_path(key: str, required: bool = False) -> Optional[Path]:
            value = data.get(key)
            if value is None:
                if required:
                    raise ConfigInvalid(f"config missing {key}")
                return None
            return (base / value).resolve()

        try:
            models = tuple(
                ModelSpec(
                    model_id=m["model_id"],
                    provider=m.get("provider", "mock"),
                    credential_env=m.get("credential_env"),
                    base_url=m.get("base_url"),
                    script=(base / m["script"]).resolve() if m.get("script") else None,
                )
                for m in data["models"])
            strategies = tuple(Strategy(s) for s in data["strategies"])
            policies = tuple(TierPolicy.from_json(p)
                             for p in data.get("tier_policy", []))
        except (KeyError, ValueError) as exc:
            raise ConfigInvalid(f"bad config: {exc}") from exc
        return cls(
            models=models,
            strategies=strategies,
            docs_dir=resolve_path("docs_dir", required=True),
            gt_dir=resolve_path("gt_dir"),
            profiles_dir=resolve_path("profiles_dir"),
            judge=data.get("judge", "deterministic"),
            judge_model=data.get("judge_model"),
            merger_model=data.get("merger_model"),
            merge_mode=data.get("merge_mode", "deterministic"),
            numeric_rel_tolerance=Decimal(
                str(data.get("numeric_rel_tolerance", "0.01"))),
            tier_policy=policies or TierPolicy.defaults(),
            seed=int(data.get("seed", 0)),
            cache_dir=resolve_path("cache_dir") or (base / "cache").resolve(),
            runs_dir=resolve_path("runs_dir") or (base / "runs").resolve(),
            audit_per_stratum=int(data.get("audit_per_stratum", 10)),
        )
