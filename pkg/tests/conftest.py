import numpy as np
import pytest

from rsilab.config import RunConfig
from rsilab.numkit import RngStream
from rsilab.world import build_world


@pytest.fixture
def rng():
    return RngStream(1234)


@pytest.fixture
def world():
    return build_world("rings-8")


def tiny_config(seed: int = 5, **overrides) -> RunConfig:
    """Small, fast run config for loop/service/cli tests."""
    base = {
        "seed": seed,
        "rounds": 2,
        "samples_per_prompt": 4,
        "epochs_per_round": 5,
        "prompts": {"size": 80, "per_round": 30, "per_cluster": 8},
        "curation": {"k_select": 40},
        "evaluation": {"n_samples": 120, "calibration_draws": 1000},
        "base_model": {"draws_per_condition": 3, "epochs": 3},
    }
    _deep_update(base, overrides)
    return RunConfig.model_validate(base)


def acceptance_config(seed: int) -> RunConfig:
    """The lab profile every acceptance experiment runs at.

    rings-8 world, 8 rounds, 1500-sample synthetic pools, 300 selected,
    hard per-round refits. Calibrated so the collapse/mitigation
    phenomena are reproducible across seeds on CPU in seconds per run.
    """
    return RunConfig.model_validate({
        "seed": seed,
        "rounds": 8,
        "samples_per_prompt": 10,
        "epochs_per_round": 120,
        "prompts": {"size": 400, "per_round": 150, "per_cluster": 30,
                    "vague_fraction": 0.35},
        "curation": {"k_select": 300, "alignment_weight": 0.7,
                     "aesthetic_weight": 0.3},
        "evaluation": {"n_samples": 1000, "calibration_draws": 4000},
        "base_model": {"draws_per_condition": 5, "epochs": 8},
        "diffusion": {"embed_dim": 2, "lr": 3e-4, "round_lr": 1e-3,
                      "hidden": [24, 24]},
    })


def _deep_update(base: dict, overrides: dict) -> None:
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value


def read_round_metrics(run_dir: str) -> list[dict]:
    import json
    import os

    with open(os.path.join(run_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    rows = []
    for entry in manifest["rounds"]:
        with open(os.path.join(run_dir, entry["metrics"])) as mf:
            rows.append(json.load(mf))
    return rows
