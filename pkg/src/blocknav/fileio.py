"""On-disk formats: scenario sets with manifests, rollout traces, metric
reports, and training logs.

Everything is JSON (traces and logs are line-delimited JSON so they can be
streamed). Every file carries `kind` and `format_version` fields and readers
reject unknown versions. Published schemas live in blocknav/schemas/.
"""

from __future__ import annotations

import hashlib
import json
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import FormatError
from .scenario import MetricsReport, RolloutResult, Scenario

FORMAT_VERSION = 1


def _envelope(kind: str, body: dict) -> dict:
    return {"kind": kind, "format_version": FORMAT_VERSION, **body}


def _check(d: dict, kind: str, source="file") -> dict:
    if not isinstance(d, dict):
        raise FormatError(f"{source}: expected a JSON object")
    if d.get("kind") != kind:
        raise FormatError(f"{source}: kind {d.get('kind')!r}, expected {kind!r}")
    if d.get("format_version") != FORMAT_VERSION:
        raise FormatError(
            f"{source}: unsupported format version {d.get('format_version')!r}"
        )
    return d


def _dump(obj: dict) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _load(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from None


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_schema(name: str) -> dict:
    """Published JSON schema by name, e.g. 'scenario' or 'report'."""
    ref = resources.files("blocknav").joinpath(f"schemas/{name}.schema.json")
    return json.loads(ref.read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Scenarios and manifests


def save_scenario(path, scenario: Scenario) -> None:
    Path(path).write_text(_dump(_envelope("scenario", scenario.to_dict())), encoding="utf-8")


def load_scenario(path) -> Scenario:
    return Scenario.from_dict(_check(_load(path), "scenario", path))


def save_scenario_set(directory, scenarios: list[Scenario], seed: int, generator: dict) -> Path:
    """Write one file per scenario plus a manifest listing file digests.

    The manifest is byte-deterministic given the same scenarios, seed, and
    generator settings, so its own hash doubles as a dataset fingerprint.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, scn in enumerate(scenarios):
        name = f"{scn.name or f'scn-{i:03d}'}.json"
        save_scenario(directory / name, scn)
        entries.append({"file": name, "sha256": sha256_file(directory / name)})
    manifest = _envelope(
        "manifest",
        {"seed": int(seed), "generator": generator, "count": len(scenarios), "scenarios": entries},
    )
    out = directory / "manifest.json"
    out.write_text(_dump(manifest), encoding="utf-8")
    return out


def load_scenario_set(manifest_path) -> list[Scenario]:
    manifest = _check(_load(manifest_path), "manifest", manifest_path)
    base = Path(manifest_path).parent
    out = []
    for entry in manifest["scenarios"]:
        path = base / entry["file"]
        if sha256_file(path) != entry["sha256"]:
            raise FormatError(f"{path}: digest does not match the manifest")
        out.append(load_scenario(path))
    return out


# ---------------------------------------------------------------------------
# Traces


def write_trace(path, result: RolloutResult, seed: int, policy: str) -> None:
    """Header line then one line per frame: (id, x, y, group) arrays."""
    if result.frames is None:
        raise FormatError("rollout was run without frame collection")
    header = _envelope(
        "trace",
        {
            "scenario": result.scenario.name,
            "policy": policy,
            "seed": int(seed),
            "steps": len(result.frames) - 1,
            "radius": result.scenario.radius,
            "agents_seen": len(result.records),
        },
    )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for frame in result.frames:
            row = {
                "step": int(frame.step),
                "id": [int(v) for v in frame.ids],
                "x": [float(v) for v in frame.pos[:, 0]],
                "y": [float(v) for v in frame.pos[:, 1]],
                "group": [int(v) for v in frame.groups],
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_trace(path):
    """Returns (header, frames); each frame holds numpy (id, pos, group)."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty trace")
    header = _check(json.loads(lines[0]), "trace", path)
    frames = []
    for line in lines[1:]:
        row = json.loads(line)
        frames.append(
            {
                "step": row["step"],
                "id": np.array(row["id"], dtype=np.int64),
                "pos": np.stack(
                    [np.array(row["x"], dtype=np.float64), np.array(row["y"], dtype=np.float64)],
                    axis=1,
                )
                if row["id"]
                else np.zeros((0, 2)),
                "group": np.array(row["group"], dtype=np.int64),
            }
        )
    return header, frames


# ---------------------------------------------------------------------------
# Reports and logs


def save_report(path, rows: dict[str, MetricsReport], seed: int, runs: int) -> None:
    body = {
        "seed": int(seed),
        "runs": int(runs),
        "policies": [
            {"name": name, **report.to_dict()} for name, report in rows.items()
        ],
    }
    Path(path).write_text(_dump(_envelope("report", body)), encoding="utf-8")


def load_report(path) -> dict:
    return _check(_load(path), "report", path)


def write_log(path, records: list[dict], seed: int, mode: str) -> None:
    """Training log: header line then one JSON record per line, append-only."""
    path = Path(path)
    fresh = not path.exists() or path.stat().st_size == 0
    with open(path, "a", encoding="utf-8") as fh:
        if fresh:
            header = _envelope("training-log", {"seed": int(seed), "mode": mode})
            fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_log(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty log")
    header = _check(json.loads(lines[0]), "training-log", path)
    return header, [json.loads(line) for line in lines[1:]]
