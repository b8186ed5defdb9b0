"""Command-line scenario runner.

    talus run SCENARIO [--seed N] [--state PATH] [--transcript PATH] [--pages N]
                       [--threshold N] [--interrupts none|storm]
    talus inspect [--state PATH]

Exit status: 0 success, 2 protocol error (including a restart-guard ABORT),
3 security violation. ``TALUS_STATE`` overrides ``--state``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from . import adversary, flows
from .errors import FlowError, TalusError
from .flows import Platform, ScenarioRunner
from .tpm import NV_COUNTER, TpmDevice

EXIT_OK = 0
EXIT_PROTOCOL = 2
EXIT_VIOLATION = 3

RUN_SCENARIOS = flows.SCENARIOS + ("attack-suite", "metrics")
METRIC_FLOWS = ("create", "launch", "attest", "encrypt", "counter-demo")


@dataclass
class ScenarioConfig:
    seed: int
    scenario: str
    state_path: Path | None = None
    transcript_path: Path | None = None
    pages: int = 3
    threshold: int = 3
    interrupts: str = "none"

    def validate(self) -> None:
        if self.scenario not in RUN_SCENARIOS:
            raise FlowError("BAD_CONFIG", f"unknown scenario {self.scenario!r}")
        if not 0 <= self.seed < 1 << 64:
            raise FlowError("BAD_CONFIG", "seed must be a 64-bit unsigned integer")
        if self.pages < 1 or self.threshold < 0:
            raise FlowError("BAD_CONFIG", "pages must be >= 1 and threshold >= 0")


def _sidecar(state: Path) -> Path:
    return state.with_name(state.name + ".os")


def _read(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except OSError as exc:
        raise FlowError("IO_ERROR", f"{path}: {exc.strerror}") from exc


def _write(path: Path, data: bytes) -> None:
    try:
        path.write_bytes(data)
    except OSError as exc:
        raise FlowError("IO_ERROR", f"{path}: {exc.strerror}") from exc


def load_platform(cfg: ScenarioConfig) -> Platform:
    if cfg.state_path is None or not cfg.state_path.exists():
        return Platform.build(cfg.seed)
    platform = Platform.from_state(_read(cfg.state_path), cfg.seed)
    side = _sidecar(cfg.state_path)
    if side.exists():
        try:
            files = json.loads(_read(side))
            platform.os_files.update({k: bytes.fromhex(v) for k, v in files.items()})
        except (ValueError, AttributeError) as exc:
            raise FlowError("CORRUPT_STATE", f"{side}: unreadable OS file store") from exc
    return platform


def save_platform(cfg: ScenarioConfig, platform: Platform) -> None:
    if cfg.state_path is None:
        return
    _write(cfg.state_path, platform.tpm.persist())
    files = {k: v.hex() for k, v in sorted(platform.os_files.items())}
    _write(_sidecar(cfg.state_path), json.dumps(files, indent=1).encode())


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _run_metrics(cfg: ScenarioConfig) -> dict:
    out = {}
    for name in METRIC_FLOWS:
        result = ScenarioRunner(Platform.build(cfg.seed), cfg.seed, cfg.pages, cfg.threshold).run(name)
        out[name] = {flow: m.to_dict() for flow, m in result.metrics.items()}
    return out


def run(cfg: ScenarioConfig) -> int:
    cfg.validate()
    if cfg.scenario == "attack-suite":
        suite = adversary.AttackSuite(cfg.seed)
        results = suite.run()
        print(adversary.report_json(results))
        transcript = suite.platform.transcript
        status = EXIT_OK if all(r.verdict == "DEFENDED" for r in results) else EXIT_VIOLATION
    elif cfg.scenario == "metrics":
        _emit(_run_metrics(cfg))
        transcript, status = flows.Transcript(), EXIT_OK
    else:
        platform = load_platform(cfg)
        transcript = platform.transcript
        status = EXIT_OK
        try:
            result = ScenarioRunner(platform, cfg.seed, cfg.pages, cfg.threshold,
                                    storm=cfg.interrupts == "storm").run(cfg.scenario)
            _emit({"scenario": result.name, "outcome": result.outcome, "outputs": result.outputs})
            if result.outcome != "OK":
                transcript.record("cli", "outcome", b"", result.outcome)
                status = EXIT_PROTOCOL
        finally:
            save_platform(cfg, platform)
    if cfg.transcript_path is not None:
        _write(cfg.transcript_path, transcript.jsonl().encode())
    return status


def inspect_state(path: Path) -> str:
    tpm = TpmDevice.restore(_read(path))
    lines = [f"state: {path}",
             f"clock: {tpm.ticks}",
             f"channel_epoch: {tpm.channel_epoch}",
             f"owned: {tpm.owned}",
             "nv indices:"]
    for handle in sorted(tpm.nv):
        n = tpm.nv[handle]
        if n.kind == NV_COUNTER:
            lines.append(f"  {handle:#010x} counter value={n.counter_value}")
        else:
            lines.append(f"  {handle:#010x} data size={n.size} payload={n.data_payload.hex()}")
    lines.append("pcrs:")
    for i, value in enumerate(tpm.pcrs):
        marker = "" if value == tpm.pcr_defaults[i] else " *"
        lines.append(f"  {i:2d} {value.hex()}{marker}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="talus", description="TALUS enclave/TPM simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario")
    r.add_argument("scenario_pos", nargs="?", metavar="SCENARIO", choices=RUN_SCENARIOS)
    r.add_argument("--scenario", choices=RUN_SCENARIOS)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--state", type=Path)
    r.add_argument("--transcript", type=Path)
    r.add_argument("--pages", type=int, default=3)
    r.add_argument("--threshold", type=int, default=3)
    r.add_argument("--interrupts", choices=("none", "storm"), default="none")

    i = sub.add_parser("inspect", help="dump a persisted TPM state file")
    i.add_argument("state_pos", nargs="?", metavar="STATE", type=Path)
    i.add_argument("--state", type=Path)
    return parser


def _state_path(args) -> Path | None:
    env = os.environ.get("TALUS_STATE")
    if env:
        return Path(env)
    return getattr(args, "state_pos", None) or args.state


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "inspect":
            path = _state_path(args)
            if path is None:
                raise FlowError("BAD_CONFIG", "inspect needs a state file")
            print(inspect_state(path))
            return EXIT_OK
        scenario = args.scenario or args.scenario_pos
        if scenario is None:
            raise FlowError("BAD_CONFIG", "no scenario given")
        cfg = ScenarioConfig(args.seed, scenario, _state_path(args), args.transcript,
                             args.pages, args.threshold, args.interrupts)
        return run(cfg)
    except TalusError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VIOLATION if exc.code == "SECURITY_VIOLATION" else EXIT_PROTOCOL


if __name__ == "__main__":
    sys.exit(main())
