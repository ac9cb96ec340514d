"""Checkpoint JSON and metrics CSV formats.

Floats are written with ``repr`` (shortest round-trip form), so loading a
checkpoint reproduces every parameter bit-for-bit.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from lowrank_mtl import model
from lowrank_mtl.errors import DataError
from lowrank_mtl.objective import TERM_NAMES, Hyper, ObjectiveBreakdown
from lowrank_mtl.optimizer import StepRecord, TrainState

METRICS_COLUMNS = ("iter", "total") + TERM_NAMES + ("train_accuracy", "test_accuracy")


def state_to_dict(state: TrainState) -> dict:
    doc = model.params_to_dict(state.params)
    doc.update(
        {
            "iter": state.iter,
            "seed": state.seed,
            "hyper": state.hyper.to_dict(),
            "history": [bd.to_dict() for bd in state.history],
            "steps": [s.to_dict() for s in state.steps],
            "warnings": list(state.warnings),
        }
    )
    return doc


def state_from_dict(doc: dict) -> TrainState:
    try:
        params = model.params_from_dict(doc)
        return TrainState(
            params=params,
            hyper=Hyper.from_dict(doc["hyper"]),
            seed=int(doc.get("seed", 0)),
            iter=int(doc["iter"]),
            history=[ObjectiveBreakdown.from_dict(h) for h in doc["history"]],
            steps=[StepRecord(**s) for s in doc.get("steps", [])],
            warnings=list(doc.get("warnings", [])),
        )
    except KeyError as exc:
        raise DataError(f"checkpoint is missing field {exc}") from None


def dumps(doc: dict) -> str:
    return json.dumps(doc, separators=(",", ":"), allow_nan=False) + "\n"


def save_checkpoint(state: TrainState, path) -> None:
    Path(path).write_text(dumps(state_to_dict(state)))


def load_checkpoint(path) -> TrainState:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed checkpoint JSON ({exc.msg})") from None
    return state_from_dict(doc)


def save_params(params: model.Params, path) -> None:
    Path(path).write_text(dumps(model.params_to_dict(params)))


def load_params(path) -> model.Params:
    return model.params_from_dict(json.loads(Path(path).read_text()))


def fmt(v) -> str:
    if isinstance(v, (int,)) and not isinstance(v, bool):
        return str(v)
    return format(float(v), ".17g")


def metrics_csv(rows, config_comment: dict | None = None) -> str:
    """Render metrics rows (dicts keyed by ``METRICS_COLUMNS``) as CSV text."""
    buf = io.StringIO()
    if config_comment is not None:
        buf.write("# config: " + json.dumps(config_comment, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for row in rows:
        w.writerow([fmt(row[c]) for c in METRICS_COLUMNS])
    return buf.getvalue()


def read_metrics(path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    out = []
    for rec in reader:
        out.append({k: (int(v) if k == "iter" else float(v)) for k, v in rec.items()})
    return out
