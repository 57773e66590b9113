"""CSV schemas, config files, and manifests for the batch CLI.

Visit tables are long-format, one row per patient-visit, with the declared
history columns followed by A, X, delta, gamma, B. Floats are written with
repr so a write/read cycle is lossless.
"""
from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .engine import EngineError, FeatureRegistry, Trajectory, VisitRecord
from .simlab import SimDataset

__all__ = [
    "ValidationFailure",
    "visit_csv_header",
    "write_visits_csv",
    "read_visits_csv",
    "write_latents_csv",
    "load_config",
    "file_sha256",
    "write_manifest",
]


class ValidationFailure(ValueError):
    """Input config or data failed validation (CLI exit code 2)."""


_FIXED_COLS = ("A", "X", "delta", "gamma", "B")


def visit_csv_header(registry: FeatureRegistry) -> list[str]:
    feature_cols = [n for n in registry.history_names if n != registry.cumulative_time_feature]
    return ["patient_id", "k", *feature_cols, *_FIXED_COLS]


def _fmt(v: float) -> str:
    return repr(float(v))


def write_visits_csv(path, trajectories: Sequence[Trajectory], registry: FeatureRegistry):
    b_idx = registry.b_index
    header = visit_csv_header(registry)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for tr in trajectories:
            for rec in tr.visits:
                feats = [
                    _fmt(rec.history[i])
                    for i in range(len(registry.history_names))
                    if i != b_idx
                ]
                w.writerow(
                    [tr.patient_id, rec.k, *feats, _fmt(rec.action), _fmt(rec.x),
                     rec.delta, rec.gamma, _fmt(rec.b)]
                )


def read_visits_csv(path, registry: FeatureRegistry) -> list[Trajectory]:
    """Parse and validate a long-format visit table.

    Validation failures carry the offending 1-based data row number.
    """
    expected = visit_csv_header(registry)
    per_patient: dict[str, list[tuple[int, VisitRecord]]] = {}
    order: list[str] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != expected:
            raise ValidationFailure(
                f"{path}: header mismatch; expected {expected}, got {header}"
            )
        b_idx = registry.b_index
        n_feat = len(registry.history_names) - 1
        for rownum, row in enumerate(reader, start=1):
            if len(row) != len(expected):
                raise ValidationFailure(f"{path}: row {rownum}: wrong column count")
            try:
                pid = row[0]
                k = int(row[1])
                feats = [float(v) for v in row[2 : 2 + n_feat]]
                a, x = float(row[2 + n_feat]), float(row[3 + n_feat])
                delta, gamma = int(row[4 + n_feat]), int(row[5 + n_feat])
                b = float(row[6 + n_feat])
            except ValueError as exc:
                raise ValidationFailure(f"{path}: row {rownum}: {exc}") from exc
            hist = feats[:b_idx] + [b] + feats[b_idx:]
            try:
                rec = VisitRecord(pid, k, np.array(hist), a, x, delta, gamma, b)
            except EngineError as exc:
                raise ValidationFailure(f"{path}: row {rownum}: {exc}") from exc
            if pid not in per_patient:
                order.append(pid)
            per_patient.setdefault(pid, []).append((rownum, rec))

    trajectories = []
    for pid in order:
        rows = sorted(per_patient[pid], key=lambda t: t[1].k)
        try:
            trajectories.append(Trajectory(pid, tuple(rec for _, rec in rows)))
        except EngineError as exc:
            raise ValidationFailure(
                f"{path}: rows {[rn for rn, _ in rows]}: {exc}"
            ) from exc
    return trajectories


def write_latents_csv(path, dataset: SimDataset):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_index", "k", "T", "U", "C"])
        for row in dataset.latents:
            w.writerow([int(row[0]), int(row[1]), _fmt(row[2]), _fmt(row[3]), _fmt(row[4])])


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError as exc:
        raise ValidationFailure(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationFailure(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ValidationFailure(f"{path}: config must be a JSON object")
    version = cfg.get("version", 1)
    if version != 1:
        raise ValidationFailure(f"{path}: unsupported config version {version}")
    return cfg


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, payload: dict, file_list: Sequence[Path]):
    """Manifest with a checksum for every emitted file; serialized with
    sorted keys so equal runs are byte-identical."""
    base = Path(path).parent
    payload = dict(payload)
    payload["files"] = {
        str(Path(p).relative_to(base)): file_sha256(p) for p in sorted(map(Path, file_list))
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return payload
