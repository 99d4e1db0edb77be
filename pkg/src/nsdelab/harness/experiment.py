"""Config-driven experiment grid: models x defenses x attacks.

A config is JSON. Every section is resolved against the dataclass defaults
before anything runs, and the resolved form is what gets written, so records
never depend on hidden defaults. Outputs in ``out_dir``:

* ``resolved_config.json``
* ``records.jsonl``   one line per (model, defense) cell, no wall-clock fields
* ``roc/*.csv``       one ``fpr,tpr`` curve per attack fold
* ``summary.md``      generalization gaps and TPR@FPR per cell and attack
* ``failures.json``   cells that raised, with the error
* ``timings.json``    wall-clock seconds per cell
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import re
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from ..attacks import ATTACKS, cross_validate, make_shadow_plan
from ..nets import ModelSpec
from ..privacy import PrivacySpec
from ..solvers import SolverConfig
from .data import DatasetSpec, generate_dataset
from .ensemble import Ensemble, finetune_ensemble, train_shadow_ensemble
from .train import Defense, TrainConfig

__all__ = ["ConfigError", "CONFIG_SCHEMA", "resolve_config", "load_config", "ExperimentResult", "run_experiment", "render_summary", "dumps_record"]


class ConfigError(ValueError):
    pass


_OBJ = {"type": "object"}
_MODEL_SCHEMA = {
    "type": "object",
    "required": ["name"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string", "pattern": r"^[A-Za-z0-9_.-]+$"},
        "spec": _OBJ,
        "train": _OBJ,
        "privacy": {"type": ["object", "null"]},
        "finetune_from": {"type": ["string", "null"]},
        "solver": {"type": ["object", "null"]},
        "full_finetune": {"type": "boolean"},
    },
}
CONFIG_SCHEMA = {
    "type": "object",
    "required": ["data", "models"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "master_seed": {"type": "integer", "minimum": 0},
        "n_models": {"type": "integer", "minimum": 2, "multipleOf": 2},
        "data": _OBJ,
        "models": {"type": "array", "items": _MODEL_SCHEMA},
        "defenses": {"type": "array", "items": _OBJ},
        "attacks": {"type": "array", "items": {"enum": list(ATTACKS)}},
        "attack_options": {"type": "object", "additionalProperties": _OBJ},
        "fpr_targets": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0, "maximum": 1}},
        "write_roc": {"type": "boolean"},
    },
}


def _build(cls, d, where):
    try:
        return cls(**(d or {}))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def resolve_config(raw: dict) -> dict:
    """Validate ``raw`` and return it with every default written out."""
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        path = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"{path}: {e.message}") from e
    cfg = {
        "name": raw.get("name", "experiment"),
        "master_seed": raw.get("master_seed", 0),
        "n_models": raw.get("n_models", 16),
        "data": _build(DatasetSpec, raw["data"], "data").to_dict(),
        "defenses": [_build(Defense, d, f"defenses[{i}]").to_dict() for i, d in enumerate(raw.get("defenses", [{"kind": "none"}]))],
        "attacks": list(raw.get("attacks", ["lira"])),
        "attack_options": {a: dict(raw.get("attack_options", {}).get(a, {})) for a in raw.get("attacks", ["lira"])},
        "fpr_targets": [float(t) for t in raw.get("fpr_targets", [0.001, 0.01])],
        "write_roc": raw.get("write_roc", True),
        "models": [],
    }
    seen: dict[str, dict] = {}
    for i, m in enumerate(raw["models"]):
        where = f"models[{i}] ({m['name']})"
        if m["name"] in seen:
            raise ConfigError(f"{where}: duplicate model name")
        train = _build(TrainConfig, m.get("train", {}), f"{where}.train").to_dict()
        privacy = None if m.get("privacy") is None else _build(PrivacySpec, m["privacy"], f"{where}.privacy").to_dict()
        if m.get("finetune_from") is not None:
            base = seen.get(m["finetune_from"])
            if base is None:
                raise ConfigError(f"{where}: finetune_from must name an earlier model")
            solver = _build(SolverConfig, m.get("solver"), f"{where}.solver")
            if not solver.stochastic:
                raise ConfigError(f"{where}: the replacement block needs a stochastic solver")
            entry = {
                "name": m["name"],
                "finetune_from": m["finetune_from"],
                "solver": solver.to_dict(),
                "full_finetune": bool(m.get("full_finetune", False)),
                "train": train,
                "privacy": privacy,
            }
        else:
            if "spec" not in m:
                raise ConfigError(f"{where}: needs a spec")
            spec_d = dict(m["spec"])
            if isinstance(spec_d.get("solver"), dict):
                spec_d["solver"] = _build(SolverConfig, spec_d["solver"], f"{where}.spec.solver")
            spec = _build(ModelSpec, spec_d, f"{where}.spec")
            entry = {"name": m["name"], "spec": spec.to_dict(), "train": train, "privacy": privacy}
        seen[m["name"]] = entry
        cfg["models"].append(entry)
    return cfg


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return resolve_config(raw)


def _finite(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _finite(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_finite(v) for v in x]
    if isinstance(x, np.floating):
        return _finite(float(x))
    if isinstance(x, np.integer):
        return int(x)
    return x


def dumps_record(rec: dict) -> str:
    """Canonical single-line JSON: sorted keys, shortest round-trip floats."""
    return json.dumps(_finite(rec), sort_keys=True, separators=(",", ":"), allow_nan=False)


def _hash(obj) -> str:
    return hashlib.sha256(dumps_record(obj).encode()).hexdigest()[:16]


def _slug(s: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "-", s).strip("-")


@dataclass
class ExperimentResult:
    config: dict
    records: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    ensembles: dict = field(default_factory=dict)
    summary: str = ""

    def record(self, model: str, defense: str = "none") -> dict:
        for r in self.records:
            if r["model"] == model and r["defense"] == defense:
                return r
        raise KeyError((model, defense))


def _cell_record(entry, defense, ens: Ensemble, attacks: dict, resolved_train: dict) -> dict:
    gaps = [r.gap for r in ens.records]
    privacy = [r.privacy for r in ens.records]
    return {
        "model": entry["name"],
        "defense": Defense(**defense).label,
        "spec": ens.specs[0].to_dict() | {"seed": None},
        "train_config": resolved_train,
        "privacy_spec": entry.get("privacy"),
        "hashes": {
            "spec": _hash(ens.specs[0].to_dict() | {"seed": None}),
            "train": _hash(resolved_train),
            "privacy": _hash(entry.get("privacy")),
        },
        "seeds": ens.seeds,
        "members": [r.to_dict() for r in ens.records],
        "train_acc": float(np.mean([r.train_acc for r in ens.records])),
        "test_acc": float(np.mean([r.test_acc for r in ens.records])),
        "gap": float(np.mean(gaps)),
        "gap_sd": float(np.std(gaps)),
        "epsilon": [p.get("epsilon") if p else None for p in privacy],
        "attacks": attacks,
    }


def render_summary(records: list[dict], fpr_targets) -> str:
    """Markdown table: one row per cell, gap plus AUC and TPR@FPR per attack."""
    attacks = sorted({a for r in records for a in r["attacks"]})
    head = ["Model", "Defense", "Train acc", "Test acc", "Gap"]
    for a in attacks:
        head += [f"{a} AUC"] + [f"{a} TPR@{100 * t:g}%FPR" for t in fpr_targets]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in records:
        row = [r["model"], r["defense"], f"{100 * r['train_acc']:.1f}", f"{100 * r['test_acc']:.1f}", f"{100 * r['gap']:.1f}"]
        for a in attacks:
            s = r["attacks"].get(a)
            if s is None:
                row += ["-"] * (1 + len(fpr_targets))
                continue
            row.append(f"{s['summary']['auc'][0]:.3f}")
            row += [f"{100 * s['summary']['tpr_at'][repr(float(t))][0]:.2f}" for t in fpr_targets]
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def run_experiment(config, out_dir=None, n_workers: int | None = None) -> ExperimentResult:
    """Run the grid. ``config`` is a path or a raw dict; failures are recorded, not raised."""
    cfg = load_config(config) if isinstance(config, (str, Path)) else resolve_config(copy.deepcopy(config))
    result = ExperimentResult(cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved_config.json").write_text(json.dumps(cfg, sort_keys=True, indent=2) + "\n")
        (out / "records.jsonl").write_text("")
    master = cfg["master_seed"]
    if cfg["models"]:
        pool = generate_dataset(DatasetSpec.from_dict(cfg["data"]))
        plan = make_shadow_plan(len(pool.y_train), cfg["n_models"], seed=master)

    for defense in cfg["defenses"]:
        dlabel = Defense(**defense).label
        for entry in cfg["models"]:
            key = (entry["name"], dlabel)
            t0 = time.perf_counter()
            try:
                train_cfg = TrainConfig.from_dict(entry["train"] | {"defense": defense})
                privacy = PrivacySpec(**entry["privacy"]) if entry.get("privacy") else None
                if "finetune_from" in entry:
                    base = result.ensembles.get((entry["finetune_from"], dlabel))
                    if base is None:
                        raise RuntimeError(f"base model {entry['finetune_from']!r} has no trained ensemble")
                    ens = finetune_ensemble(
                        base, pool, SolverConfig.from_dict(entry["solver"]), train_cfg, master,
                        entry["full_finetune"], privacy, n_workers,
                    )
                else:
                    ens = train_shadow_ensemble(plan, pool, ModelSpec.from_dict(entry["spec"]), train_cfg, master, privacy, n_workers)
                result.ensembles[key] = ens
                attacks = {}
                for a in cfg["attacks"]:
                    cv = cross_validate(plan, ens.table, a, cfg["attack_options"].get(a), cfg["fpr_targets"])
                    attacks[a] = {"summary": cv.summary(), "folds": [f.to_dict() for f in cv.folds]}
                    if out is not None and cfg["write_roc"]:
                        roc_dir = out / "roc"
                        roc_dir.mkdir(exist_ok=True)
                        for f in cv.folds:
                            name = f"{_slug(entry['name'])}__{_slug(dlabel)}__{a}__fold{f.fold:02d}.csv"
                            (roc_dir / name).write_text(f.roc.to_csv())
                rec = _cell_record(entry, defense, ens, attacks, train_cfg.to_dict())
                result.records.append(rec)
                if out is not None:
                    with open(out / "records.jsonl", "a") as fh:
                        fh.write(dumps_record(rec) + "\n")
            except Exception as e:  # noqa: BLE001
                result.failures.append(
                    {"model": key[0], "defense": key[1], "error": repr(e), "traceback": traceback.format_exc()}
                )
            result.timings[f"{key[0]}|{key[1]}"] = time.perf_counter() - t0

    result.summary = render_summary(result.records, cfg["fpr_targets"])
    if out is not None:
        (out / "summary.md").write_text(result.summary)
        (out / "failures.json").write_text(json.dumps(result.failures, indent=2) + "\n")
        (out / "timings.json").write_text(json.dumps(result.timings, indent=2, sort_keys=True) + "\n")
    return result
