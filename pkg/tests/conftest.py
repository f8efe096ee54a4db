"""Shared fixtures: small end-to-end runs reused across the pipeline tests.

The tiny runs are session-scoped because synthesizing, summarizing, and
training even a 40-stay cohort is the expensive part of the suite; every
test that only reads artifacts shares one directory.
"""

from __future__ import annotations

import copy

import pytest

from record2vec import pipeline as pl

# Acceptance pass/fail lines collected by tests/test_acceptance.py and echoed
# after the terminal summary so the criterion verdicts are visible in one
# block regardless of pytest's capture settings.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


TINY_CONFIG = {
    "seed": 11,
    "arm": "record2vec",
    "cohort": {
        "n_stays": 40,
        "sites": [
            {"site_id": "site_a"},
            {
                "site_id": "site_b",
                "renames": {"HeartRate": "HR"},
                "unit_rescale": {"Glucose": 18.0},
            },
        ],
    },
    "train": {"site": "site_a", "seeds": [42], "tasks": ["mortality", "los"]},
    "fewshot": {"shots": 4, "seeds": [42], "task": "mortality"},
    "privacy": {"site": "site_a", "seeds": [42]},
}


def tiny_config(**overrides) -> dict:
    cfg = copy.deepcopy(TINY_CONFIG)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    return pl.validate_config(pl._deep_merge(pl.default_config(), cfg))


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory):
    """A complete summarize-then-embed run on a 40-stay two-site cohort."""
    out = tmp_path_factory.mktemp("tiny_run")
    cfg = tiny_config()
    stages = pl.stages_for_arm(cfg["arm"]) + ["transfer", "fewshot", "privacy", "tokens"]
    pl.run_protocol(cfg, out, stages=stages)
    return cfg, pl.RunPaths(out)


@pytest.fixture(scope="session")
def tiny_grid_run(tmp_path_factory):
    """The same cohort through the hourly-grid mean-fill arm."""
    out = tmp_path_factory.mktemp("tiny_grid")
    cfg = tiny_config(arm="grid:mean_fill")
    stages = pl.stages_for_arm(cfg["arm"]) + ["transfer"]
    pl.run_protocol(cfg, out, stages=stages)
    return cfg, pl.RunPaths(out)
