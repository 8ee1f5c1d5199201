import json
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"
E2E = FIXTURES / "e2e"


def write_config(tmp_path: Path, judge: str = "deterministic",
                 strategies=None, seed: int = 7) -> Path:
    """Config over the committed mock corpus, with cache and runs under
    tmp_path."""
    strategies = strategies or ["ext", "self_reflection", "combined_ext",
                                "customised_ext"]
    models = [
        {"model_id": name, "provider": "mock",
         "script": str(E2E / "mock" / f"{name}.json")}
        for name in ("alpha", "beta", "gamma")
    ]
    models.append({"model_id": "judge-mock", "provider": "mock",
                   "script": str(E2E / "mock" / "judge.json")})
    config = {
        "models": models,
        "strategies": strategies,
        "docs_dir": str(E2E / "docs"),
        "gt_dir": str(E2E / "gt"),
        "profiles_dir": str(E2E / "profiles"),
        "judge": judge,
        "judge_model": "judge-mock",
        "seed": seed,
        "cache_dir": str(tmp_path / "cache"),
        "runs_dir": str(tmp_path / "runs"),
    }
    tmp_path.mkdir(parents=True, exist_ok=True)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config, indent=2), encoding="utf-8")
    return path


@pytest.fixture
def mock_config_path(tmp_path):
    return write_config(tmp_path)
