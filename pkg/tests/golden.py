"""Golden-file generation for metrics and transcripts.

Run ``python3 -m tests.golden`` from the repository root to refreeze after an
intentional protocol change; the tests compare against the committed files.
"""

from __future__ import annotations

import json
from pathlib import Path

from talus import flows
from talus.flows import Platform

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN_SEED = 20240601
METRIC_SCENARIOS = ("create", "launch", "attest", "encrypt", "counter-demo", "time-demo")
TRANSCRIPT_SCENARIOS = ("create", "launch", "attest", "encrypt", "counter-demo")


def metrics_for(scenario: str, seed: int = GOLDEN_SEED, pages: int = 3) -> dict:
    result = flows.ScenarioRunner(Platform.build(seed), seed, pages=pages).run(scenario)
    return {flow: m.to_dict() for flow, m in sorted(result.metrics.items())}


def transcript_for(scenario: str, seed: int = GOLDEN_SEED) -> str:
    platform = Platform.build(seed)
    flows.ScenarioRunner(platform, seed).run(scenario)
    return platform.transcript.jsonl()


def metrics_path(scenario: str) -> Path:
    return FIXTURES / f"metrics_{scenario}.json"


def transcript_path(scenario: str) -> Path:
    return FIXTURES / f"transcript_{scenario}.jsonl"


def main() -> None:
    FIXTURES.mkdir(exist_ok=True)
    for name in METRIC_SCENARIOS:
        metrics_path(name).write_text(json.dumps(metrics_for(name), indent=2, sort_keys=True) + "\n")
    for name in TRANSCRIPT_SCENARIOS:
        transcript_path(name).write_text(transcript_for(name))


if __name__ == "__main__":
    main()
