"""Benchmark report structures, assertions, and JSON schema validation.

A ``BenchReport`` captures one benchmark scenario: its parameters, the meter
snapshot, per-method comparison rows, and verdicts.  Every verdict embeds the
formula it asserts together with the expected and measured values, so a report
is self-describing.  Wall-clock figures are carried for information only and
are never asserted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path


@dataclass
class Verdict:
    name: str
    formula: str
    expected: float
    measured: float
    passed: bool

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "formula": self.formula,
            "expected": self.expected,
            "measured": self.measured,
            "passed": self.passed,
        }


@dataclass
class BenchReport:
    scenario: str
    parameters: dict
    meter: dict = field(default_factory=dict)
    wall_time_ms: float = 0.0
    rows: list = field(default_factory=list)
    verdicts: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def add_row(self, method: str, analytic: bool = False, **counts) -> None:
        row = {"method": method, "analytic": analytic}
        row.update(counts)
        self.rows.append(row)

    def check(self, name: str, formula: str, expected, measured,
              mode: str = "le") -> bool:
        if mode == "le":
            ok = measured <= expected
        elif mode == "eq":
            ok = measured == expected
        elif mode == "lt":
            ok = measured < expected
        else:
            raise ValueError(f"unknown verdict mode {mode!r}")
        self.verdicts.append(Verdict(name, formula, expected, measured, ok))
        return ok

    def note(self, text: str) -> None:
        self.notes.append(text)

    @property
    def passed(self) -> bool:
        return all(v.passed for v in self.verdicts)

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "parameters": self.parameters,
            "meter": self.meter,
            "wall_time_ms": self.wall_time_ms,
            "rows": self.rows,
            "verdicts": [v.to_dict() for v in self.verdicts],
            "notes": self.notes,
            "passed": self.passed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def render_text(self) -> str:
        lines = [f"scenario: {self.scenario}"]
        lines.append(f"parameters: {json.dumps(self.parameters, sort_keys=True)}")
        if self.rows:
            keys = sorted({k for row in self.rows for k in row
                           if k not in ("method", "analytic")})
            width = max(12, max((len(k) for k in keys), default=0) + 2)
            lines.append("method".ljust(22) + "".join(k.rjust(width) for k in keys))
            for row in self.rows:
                label = row["method"] + (" (analytic)" if row["analytic"] else "")
                cells = ""
                for k in keys:
                    v = row.get(k, "-")
                    if isinstance(v, float):
                        v = f"{v:.6g}"
                    cells += str(v).rjust(width)
                lines.append(label.ljust(22) + cells)
        for v in self.verdicts:
            status = "PASS" if v.passed else "FAIL"
            lines.append(f"[{status}] {v.name}: {v.formula} -> expected "
                         f"{v.expected}, measured {v.measured}")
        for n in self.notes:
            lines.append(f"note: {n}")
        lines.append(f"wall_time_ms: {self.wall_time_ms:.3f}")
        return "\n".join(lines)


# ----------------------------------------------------------- schema checking


def load_schema(name: str = "bench_report") -> dict:
    with resources.files("packedhe.schemas").joinpath(f"{name}.schema.json").open() as fh:
        return json.load(fh)


class SchemaError(ValueError):
    pass


_TYPES = {
    "object": dict,
    "array": list,
    "string": str,
    "boolean": bool,
    "integer": int,
    "number": (int, float),
}


def validate_schema(value, schema: dict, path: str = "$") -> None:
    """Validate against the JSON-schema subset used by the shipped schemas.

    Supports type, properties, required, additionalProperties, items, and
    enum, which covers every report this package emits.
    """
    expected = schema.get("type")
    if expected is not None:
        options = expected if isinstance(expected, list) else [expected]
        ok = False
        for opt in options:
            if opt == "null":
                ok = ok or value is None
                continue
            good = isinstance(value, _TYPES[opt])
            if opt in ("integer", "number") and isinstance(value, bool):
                good = False
            ok = ok or good
        if not ok:
            raise SchemaError(f"{path}: expected {expected}, "
                              f"got {type(value).__name__}")
    if "enum" in schema and value not in schema["enum"]:
        raise SchemaError(f"{path}: {value!r} not in {schema['enum']}")
    if isinstance(value, dict):
        props = schema.get("properties", {})
        for key in schema.get("required", []):
            if key not in value:
                raise SchemaError(f"{path}: missing required key {key!r}")
        if schema.get("additionalProperties") is False:
            extra = set(value) - set(props)
            if extra:
                raise SchemaError(f"{path}: unexpected keys {sorted(extra)}")
        for key, sub in props.items():
            if key in value:
                validate_schema(value[key], sub, f"{path}.{key}")
    if isinstance(value, list) and "items" in schema:
        for i, item in enumerate(value):
            validate_schema(item, schema["items"], f"{path}[{i}]")


def write_report(report: BenchReport, out_dir, as_json: bool) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = report.to_dict()
    validate_schema(data, load_schema("bench_report"))
    path = out_dir / f"{report.scenario}.json"
    path.write_text(report.to_json() + "\n")
    return path
