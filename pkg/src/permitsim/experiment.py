"""Batch experiments: specs, trial loops, reports.

An experiment names a scenario, a trial count, a base seed and parameter
overrides.  Trial ``i`` runs with seed ``seed_base + i``; every source of
randomness inside a trial is derived from that seed, so a report —
including the sha256 digest of every transcript produced — is a pure
function of the spec.  The ``generated_at`` stamp is the one exception,
and `canonical_report_bytes` strips it for comparisons.

Specs load from YAML (or plain dicts) with strict key checking: unknown
keys anywhere are errors naming the offending path, because a silently
ignored parameter in a measurement config is worse than a crash.
"""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import io
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import yaml

from .errors import ConfigError

_SPEC_KEYS = {"scenario", "trials", "seed_base", "params", "output", "label"}
_OUTPUT_KEYS = {"directory", "retain_transcripts"}


@dataclass
class ExperimentSpec:
    scenario: str
    trials: int = 1
    seed_base: int = 0
    params: dict = field(default_factory=dict)
    output_dir: str | None = None
    retain_transcripts: bool = False
    label: str | None = None

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError("trials must be at least 1")
        if self.seed_base < 0:
            raise ConfigError("seed_base cannot be negative")

    @classmethod
    def from_dict(cls, data: dict, source: str = "spec") -> "ExperimentSpec":
        if not isinstance(data, dict):
            raise ConfigError(f"{source}: expected a mapping")
        unknown = set(data) - _SPEC_KEYS
        if unknown:
            raise ConfigError(f"{source}: unknown keys {sorted(unknown)}")
        if "scenario" not in data:
            raise ConfigError(f"{source}: missing required key 'scenario'")
        params = data.get("params", {})
        if not isinstance(params, dict):
            raise ConfigError(f"{source}.params: expected a mapping")
        output = data.get("output", {}) or {}
        if not isinstance(output, dict):
            raise ConfigError(f"{source}.output: expected a mapping")
        unknown = set(output) - _OUTPUT_KEYS
        if unknown:
            raise ConfigError(f"{source}.output: unknown keys {sorted(unknown)}")
        return cls(
            scenario=str(data["scenario"]),
            trials=int(data.get("trials", 1)),
            seed_base=int(data.get("seed_base", 0)),
            params=dict(params),
            output_dir=output.get("directory"),
            retain_transcripts=bool(output.get("retain_transcripts", False)),
            label=data.get("label"),
        )

    @classmethod
    def from_yaml(cls, path) -> "ExperimentSpec":
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
        return cls.from_dict(data, source=str(path))


class Scenario:
    """One repeatable measurement; subclasses define trials and summary."""

    name = "abstract"
    summary = ""
    defaults: dict = {}

    def resolve_params(self, overrides: dict) -> dict:
        params = dict(self.defaults)
        for key, value in overrides.items():
            if key not in params:
                raise ConfigError(
                    f"scenario {self.name!r} has no parameter {key!r}; "
                    f"known: {sorted(params)}")
            params[key] = _coerce(value, params[key], f"params.{key}")
        return params

    def run_trial(self, params: dict, seed: int,
                  transcript_dir: Path | None = None) -> dict:
        raise NotImplementedError

    def aggregate(self, results: list[dict], params: dict) -> dict:
        return {}


def _coerce(value, default, path: str):
    """Coerce an override (possibly a CLI string) to the default's type."""
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigError(f"{path}: expected true/false, got {value!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
    if isinstance(default, float):
        try:
            return float(Fraction(value) if isinstance(value, str) else value)
        except (TypeError, ValueError, ZeroDivisionError):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
    if isinstance(default, str):
        return str(value)
    if isinstance(default, list):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v != ""]
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        if default and value:
            return [_coerce(v, default[0], path) for v in value]
        return list(value)
    return value


def transcript_digest(transcript) -> str:
    return hashlib.sha256(transcript.to_bytes()).hexdigest()


def run_experiment(spec: ExperimentSpec) -> dict:
    from .scenarios import get_scenario  # local import; scenarios import us

    scenario = get_scenario(spec.scenario)
    params = scenario.resolve_params(spec.params)

    transcript_dir = None
    if spec.output_dir is not None and spec.retain_transcripts:
        transcript_dir = Path(spec.output_dir) / "transcripts"
        transcript_dir.mkdir(parents=True, exist_ok=True)

    results = []
    for trial in range(spec.trials):
        seed = spec.seed_base + trial
        result = scenario.run_trial(params, seed, transcript_dir)
        result = {"trial": trial, "seed": seed, **result}
        results.append(result)

    report = {
        "label": spec.label or scenario.name,
        "scenario": scenario.name,
        "trials": spec.trials,
        "seed_base": spec.seed_base,
        "params": _jsonable(params),
        "generated_at": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "results": results,
        "aggregate": scenario.aggregate(results, params),
    }

    if spec.output_dir is not None:
        out = Path(spec.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_report(report, out)
    return report


def _jsonable(value):
    if isinstance(value, Fraction):
        return str(value)
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def canonical_report_bytes(report: dict) -> bytes:
    """Report serialization with the wall-clock stamp removed."""
    trimmed = {k: v for k, v in report.items() if k != "generated_at"}
    return json.dumps(_jsonable(trimmed), sort_keys=True,
                      separators=(",", ":")).encode()


def write_report(report: dict, directory: Path) -> None:
    directory = Path(directory)
    with open(directory / "report.json", "w", encoding="utf-8") as fh:
        json.dump(_jsonable(report), fh, indent=2, sort_keys=True)
        fh.write("\n")
    results = report.get("results", [])
    if results:
        columns: list[str] = []
        for row in results:
            for key in row:
                if key not in columns and _csv_cell_ok(row[key]):
                    columns.append(key)
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(columns)
        for row in results:
            writer.writerow([_csv_cell(row.get(c)) for c in columns])
        with open(directory / "results.csv", "w", encoding="utf-8") as fh:
            fh.write(buf.getvalue())


def _csv_cell_ok(value) -> bool:
    return isinstance(value, (str, int, float, bool)) or value is None


def _csv_cell(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    return value
