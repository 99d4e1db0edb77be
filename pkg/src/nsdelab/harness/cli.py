"""Command-line entry point: ``nsdelab <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure. The only
environment variable read is ``NSDELAB_WORKERS`` (worker processes for
ensemble training).
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import jsonschema
import numpy as np

from .. import nets
from ..attacks import ATTACKS, OutputTable, ShadowSplitPlan, cross_validate, make_shadow_plan
from ..nets import ModelSpec
from ..privacy import (
    ACCOUNTANTS,
    Accountant,
    PrivacySpec,
    calibrate_sigma_gaussian,
    calibrate_sigma_sde,
    calibrate_sigma_training,
)
from ..solvers import SolverConfig, sigma_of
from .data import DatasetSpec, generate_dataset
from .ensemble import train_shadow_ensemble
from .experiment import ConfigError, dumps_record, render_summary, run_experiment
from .train import TrainConfig, replace_then_finetune, train, train_nsde_private

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

_SECTION = {"type": "object"}
_TRAIN_SCHEMA = {
    "type": "object",
    "required": ["data", "model"],
    "additionalProperties": False,
    "properties": {
        "data": _SECTION,
        "model": _SECTION,
        "train": _SECTION,
        "privacy": {"type": ["object", "null"]},
        "n_models": {"type": "integer", "minimum": 2, "multipleOf": 2},
        "master_seed": {"type": "integer", "minimum": 0},
    },
}
_DEFEND_SCHEMA = {
    "type": "object",
    "required": ["data", "solver"],
    "additionalProperties": False,
    "properties": {
        "data": _SECTION,
        "solver": _SECTION,
        "train": _SECTION,
        "privacy": {"type": ["object", "null"]},
        "full_finetune": {"type": "boolean"},
        "seed": {"type": "integer", "minimum": 0},
    },
}


def _read_json(path: str, schema: dict) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
        jsonschema.validate(raw, schema)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read {path}: {e}") from e
    except jsonschema.ValidationError as e:
        raise ConfigError(f"{path}: {e.message}") from e
    return raw


def _make(cls, d, where):
    try:
        if cls is ModelSpec:
            return ModelSpec.from_dict(d or {})
        return cls(**(d or {}))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def _emit(obj, out: str | None = None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, default=lambda o: None if isinstance(o, float) else str(o))
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _safe(x):
    return None if isinstance(x, float) and not math.isfinite(x) else x


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(a) -> int:
    spec = _make(DatasetSpec, _read_json(a.config, {"type": "object"}) if a.config else {
        k: v for k, v in {
            "name": a.name, "n_train": a.n_train, "n_test": a.n_test, "noise": a.noise,
            "seed": a.seed, "dim": a.dim, "n_classes": a.n_classes,
        }.items() if v is not None
    }, "data")
    ds = generate_dataset(spec)
    header = ",".join([f"x{j}" for j in range(ds.dim)] + ["label", "split"])
    rows = [header]
    for split, x, y in (("train", ds.x_train, ds.y_train), ("test", ds.x_test, ds.y_test)):
        for xi, yi in zip(x, y):
            rows.append(",".join(format(float(v), ".17g") for v in xi) + f",{int(yi)},{split}")
    Path(a.out).write_text("\n".join(rows) + "\n")
    _emit({"dataset": spec.to_dict(), "n_train": len(ds.y_train), "n_test": len(ds.y_test), "out": a.out})
    return EXIT_OK


def cmd_train(a) -> int:
    raw = _read_json(a.config, _TRAIN_SCHEMA)
    ds = generate_dataset(_make(DatasetSpec, raw["data"], "data"))
    spec = _make(ModelSpec, raw["model"], "model")
    cfg = _make(TrainConfig, raw.get("train"), "train")
    params = nets.build_model(spec)
    if raw.get("privacy") is not None:
        privacy = _make(PrivacySpec, raw["privacy"], "privacy")
        try:
            params, rec = train_nsde_private(params, spec, ds, cfg, privacy)
        except ValueError as e:
            raise ConfigError(str(e)) from e
    else:
        params, rec = train(params, spec, ds, cfg)
    nets.save_checkpoint(a.out, params, spec)
    if a.record:
        Path(a.record).write_text(dumps_record(rec.to_dict()) + "\n")
    _emit({"checkpoint": a.out, "train_acc": rec.train_acc, "test_acc": rec.test_acc, "gap": rec.gap, "privacy": rec.privacy})
    return EXIT_OK


def cmd_train_ensemble(a) -> int:
    raw = _read_json(a.config, _TRAIN_SCHEMA)
    pool = generate_dataset(_make(DatasetSpec, raw["data"], "data"))
    spec = _make(ModelSpec, raw["model"], "model")
    cfg = _make(TrainConfig, raw.get("train"), "train")
    privacy = _make(PrivacySpec, raw["privacy"], "privacy") if raw.get("privacy") else None
    master = raw.get("master_seed", 0)
    plan = make_shadow_plan(len(pool.y_train), raw.get("n_models", 16), seed=master)
    ens = train_shadow_ensemble(plan, pool, spec, cfg, master, privacy)
    out = Path(a.out)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    for i, (p, s) in enumerate(zip(ens.params, ens.specs)):
        nets.save_checkpoint(out / "checkpoints" / f"model_{i:02d}.json", p, s)
    np.savez(
        out / "outputs.npz",
        labels=ens.table.labels, probs=ens.table.probs,
        pop_labels=ens.table.pop_labels, pop_probs=ens.table.pop_probs,
        membership=plan.membership, plan_seed=np.array(master),
    )
    with open(out / "records.jsonl", "w") as fh:
        for i, r in enumerate(ens.records):
            fh.write(dumps_record({"model_index": i, "seed": ens.seeds[i], **r.to_dict()}) + "\n")
    _emit({"out": str(out), "n_models": plan.n_models, "mean_gap": ens.mean_gap})
    return EXIT_OK


def _load_outputs(path: str):
    try:
        z = np.load(path)
    except OSError as e:
        raise ConfigError(f"cannot read outputs {path}: {e}") from e
    plan = ShadowSplitPlan(z["membership"], int(z["plan_seed"]))
    table = OutputTable(z["labels"], z["probs"], z["pop_labels"], z["pop_probs"])
    return plan, table


def cmd_attack(a) -> int:
    plan, table = _load_outputs(a.outputs)
    opts = json.loads(a.options) if a.options else {}
    targets = [float(t) for t in a.fpr_targets]
    cv = cross_validate(plan, table, a.attack, opts, targets)
    if a.roc_dir:
        d = Path(a.roc_dir)
        d.mkdir(parents=True, exist_ok=True)
        for f in cv.folds:
            (d / f"{a.attack}__fold{f.fold:02d}.csv").write_text(f.roc.to_csv())
    for f in cv.folds:
        print(dumps_record(f.to_dict()))
    print(dumps_record({"summary": cv.summary()}))
    return EXIT_OK


def cmd_defend(a) -> int:
    raw = _read_json(a.config, _DEFEND_SCHEMA)
    try:
        params, spec = nets.load_checkpoint(a.checkpoint)
    except (OSError, ValueError, KeyError) as e:
        raise ConfigError(f"cannot load checkpoint {a.checkpoint}: {e}") from e
    ds = generate_dataset(_make(DatasetSpec, raw["data"], "data"))
    solver = _make(SolverConfig, raw["solver"], "solver")
    cfg = _make(TrainConfig, raw.get("train"), "train")
    privacy = _make(PrivacySpec, raw["privacy"], "privacy") if raw.get("privacy") else None
    try:
        params, new_spec, rec = replace_then_finetune(
            params, spec, solver, ds, cfg, raw.get("seed", 0), raw.get("full_finetune", False), privacy
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e
    nets.save_checkpoint(a.out, params, new_spec)
    _emit({"checkpoint": a.out, "train_acc": rec.train_acc, "test_acc": rec.test_acc, "gap": rec.gap, "privacy": rec.privacy})
    return EXIT_OK


def cmd_calibrate(a) -> int:
    try:
        if a.kind == "gaussian":
            sigma = calibrate_sigma_gaussian(a.S, a.eps, a.delta)
            out = {"sigma": sigma, "params": {"S": a.S, "epsilon": a.eps, "delta": a.delta}}
        elif a.kind == "sde":
            sigma = calibrate_sigma_sde(a.T, a.L, a.eps, a.delta)
            out = {"sigma": sigma, "params": {"T": a.T, "L": a.L, "epsilon": a.eps, "delta": a.delta}}
        else:
            cal = calibrate_sigma_training(a.K, a.T, a.L, a.eps_prime, a.delta, a.delta_prime)
            out = {
                "sigma": cal.sigma,
                "epsilon": cal.epsilon,
                "delta_total": cal.delta_total,
                "warnings": list(cal.warnings),
                "params": {"K": a.K, "T": a.T, "L": a.L, "epsilon_prime": a.eps_prime, "delta": a.delta, "delta_prime": a.delta_prime},
            }
    except ValueError as e:
        raise ConfigError(str(e)) from e
    out["kind"] = a.kind
    _emit(out)
    return EXIT_OK


def cmd_account(a) -> int:
    params = {"K": a.K, "delta": a.delta, "delta_prime": a.delta_prime}
    if a.sigma_rel is not None:
        sigma_rel = a.sigma_rel
    elif None not in (a.k, a.T, a.s, a.L):
        try:
            sigma = sigma_of(a.k, a.T, a.s)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        sigma_rel = sigma / (a.T * a.L)
        params.update({"k": a.k, "T": a.T, "s": a.s, "L": a.L, "sigma": sigma})
    else:
        raise ConfigError("give --sigma-rel or all of --k --T --s --L")
    params["sigma_rel"] = sigma_rel
    try:
        acc = Accountant(a.method, sigma_rel, a.delta, a.delta_prime, steps=a.K)
        eps = acc.epsilon()
    except ValueError as e:
        raise ConfigError(str(e)) from e
    _emit({"epsilon": _safe(eps), "delta_total": acc.delta_total, "method": acc.method, "params": params})
    return EXIT_OK


def cmd_experiment(a) -> int:
    res = run_experiment(a.config, a.out, n_workers=None)
    print(res.summary, end="")
    if res.failures:
        print(f"{len(res.failures)} cell(s) failed; see {Path(a.out) / 'failures.json'}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_report(a) -> int:
    try:
        lines = Path(a.records).read_text().splitlines()
        records = [json.loads(l) for l in lines if l.strip()]
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read records {a.records}: {e}") from e
    targets = [float(t) for t in a.fpr_targets]
    text = render_summary(records, targets)
    if a.out:
        Path(a.out).write_text(text)
    else:
        print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nsdelab", description="Neural ODE/SDE privacy laboratory")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a dataset as CSV")
    g.add_argument("--config", help="JSON dataset spec (overrides the flags)")
    g.add_argument("--name", choices=["two_moons", "gauss_blobs", "rings"])
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--noise", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--dim", type=int)
    g.add_argument("--n-classes", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--record", help="write the training record as JSON")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("train-ensemble", help="train a shadow ensemble and record outputs")
    e.add_argument("--config", required=True)
    e.add_argument("--out", required=True, help="output directory")
    e.set_defaults(func=cmd_train_ensemble)

    at = sub.add_parser("attack", help="cross-validated membership inference on recorded outputs")
    at.add_argument("--outputs", required=True, help="outputs.npz from train-ensemble")
    at.add_argument("--attack", required=True, choices=ATTACKS)
    at.add_argument("--options", help="JSON attack options")
    at.add_argument("--fpr-targets", nargs="+", default=["0.001", "0.01"])
    at.add_argument("--roc-dir")
    at.set_defaults(func=cmd_attack)

    d = sub.add_parser("defend", help="replace the final block with an NSDE block and finetune")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--config", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_defend)

    c = sub.add_parser("calibrate", help="noise calibration")
    csub = c.add_subparsers(dest="kind", required=True)
    cg = csub.add_parser("gaussian")
    cg.add_argument("--S", type=float, required=True)
    cg.add_argument("--eps", type=float, required=True)
    cg.add_argument("--delta", type=float, required=True)
    cs = csub.add_parser("sde")
    cs.add_argument("--T", type=float, required=True)
    cs.add_argument("--L", type=float, required=True)
    cs.add_argument("--eps", type=float, required=True)
    cs.add_argument("--delta", type=float, required=True)
    ct = csub.add_parser("training")
    ct.add_argument("--K", type=int, required=True)
    ct.add_argument("--T", type=float, required=True)
    ct.add_argument("--L", type=float, required=True)
    ct.add_argument("--eps-prime", type=float, required=True)
    ct.add_argument("--delta", type=float, required=True)
    ct.add_argument("--delta-prime", type=float, required=True)
    c.set_defaults(func=cmd_calibrate)

    ac = sub.add_parser("account", help="compose a per-step Gaussian mechanism")
    ac.add_argument("--method", required=True, choices=list(ACCOUNTANTS) + ["StrongComposition", "RDP", "GDP"])
    ac.add_argument("--K", type=int, required=True)
    ac.add_argument("--sigma-rel", type=float)
    ac.add_argument("--k", type=float)
    ac.add_argument("--T", type=float)
    ac.add_argument("--s", type=float)
    ac.add_argument("--L", type=float)
    ac.add_argument("--delta", type=float, default=1e-5)
    ac.add_argument("--delta-prime", type=float, default=1e-5)
    ac.set_defaults(func=cmd_account)

    x = sub.add_parser("experiment", help="run a models x defenses x attacks grid")
    x.add_argument("--config", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_experiment)

    r = sub.add_parser("report", help="markdown summary from records.jsonl")
    r.add_argument("--records", required=True)
    r.add_argument("--fpr-targets", nargs="+", default=["0.001", "0.01"])
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001
        print(f"runtime failure: {e!r}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
