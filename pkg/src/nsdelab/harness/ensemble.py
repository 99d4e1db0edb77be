"""Shadow-model ensembles trained on the rows of a split plan."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .. import nets
from .._seeding import mix_seed
from ..attacks import OutputTable, ShadowSplitPlan
from ..nets import ModelSpec
from ..privacy import PrivacySpec
from ..solvers import SolverConfig
from .data import Dataset
from .train import TrainConfig, TrainRecord, predict_proba, replace_then_finetune, train, train_nsde_private

__all__ = ["WORKERS_ENV", "Ensemble", "EnsembleError", "model_seed", "train_shadow_ensemble", "finetune_ensemble", "workers"]

WORKERS_ENV = "NSDELAB_WORKERS"


class EnsembleError(RuntimeError):
    def __init__(self, index: int, cause: BaseException):
        super().__init__(f"ensemble model {index} failed: {cause!r}")
        self.index = index


def workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def model_seed(master_seed: int, index: int) -> int:
    return mix_seed(master_seed, "model", index)


@dataclass
class Ensemble:
    """Trained members, their records, and outputs on pool and population."""

    plan: ShadowSplitPlan
    specs: list[ModelSpec]
    params: list[dict[str, np.ndarray]]
    records: list[TrainRecord]
    table: OutputTable
    seeds: list[int]

    @property
    def mean_gap(self) -> float:
        return float(np.mean([r.gap for r in self.records]))


def _member_data(plan: ShadowSplitPlan, index: int, pool: Dataset) -> Dataset:
    rows = plan.train_indices(index)
    return Dataset(pool.name, pool.x_train[rows], pool.y_train[rows], pool.x_test, pool.y_test, pool.seed, pool.noise)


def _outputs(params, spec, pool: Dataset, seed: int):
    eval_seed = mix_seed(seed, "eval")
    return predict_proba(params, spec, pool.x_train, eval_seed), predict_proba(params, spec, pool.x_test, eval_seed)


def _train_one(args):
    index, plan, pool, spec, cfg, privacy, master_seed = args
    seed = model_seed(master_seed, index)
    spec_i = replace(spec, seed=seed)
    cfg_i = replace(cfg, seed=seed)
    data = _member_data(plan, index, pool)
    p0 = nets.build_model(spec_i)
    if privacy is not None:
        params, record = train_nsde_private(p0, spec_i, data, cfg_i, privacy)
    else:
        params, record = train(p0, spec_i, data, cfg_i)
    return spec_i, params, record, _outputs(params, spec_i, pool, seed), seed


def _finetune_one(args):
    index, plan, pool, base_spec, base_params, solver, cfg, full, privacy, master_seed = args
    seed = mix_seed(model_seed(master_seed, index), "finetune")
    data = _member_data(plan, index, pool)
    params, spec, record = replace_then_finetune(
        base_params, base_spec, solver, data, replace(cfg, seed=seed), seed, full, privacy
    )
    return spec, params, record, _outputs(params, spec, pool, seed), seed


def _run(fn, jobs, n_workers):
    results = []
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as ex:
            futures = [ex.submit(fn, j) for j in jobs]
            for i, fut in enumerate(futures):
                try:
                    results.append(fut.result())
                except Exception as e:  # noqa: BLE001
                    raise EnsembleError(i, e) from e
    else:
        for i, j in enumerate(jobs):
            try:
                results.append(fn(j))
            except Exception as e:  # noqa: BLE001
                raise EnsembleError(i, e) from e
    return results


def _assemble(plan, pool, results) -> Ensemble:
    specs, params, records, outs, seeds = zip(*results)
    table = OutputTable(
        labels=pool.y_train,
        probs=np.stack([o[0] for o in outs], axis=1),
        pop_labels=pool.y_test,
        pop_probs=np.stack([o[1] for o in outs], axis=1),
    )
    return Ensemble(plan, list(specs), list(params), list(records), table, list(seeds))


def train_shadow_ensemble(
    plan: ShadowSplitPlan,
    pool: Dataset,
    spec: ModelSpec,
    cfg: TrainConfig,
    master_seed: int,
    privacy: PrivacySpec | None = None,
    n_workers: int | None = None,
) -> Ensemble:
    """Train one model per plan column on its IN rows of ``pool.x_train``.

    ``pool.x_test`` is the population split: never trained on, used for test
    accuracy and as the RMIA population. Model m is seeded with
    ``mix_seed(master_seed, "model", m)``.
    """
    if len(pool.y_train) != plan.n_samples:
        raise ValueError(f"plan covers {plan.n_samples} samples, pool has {len(pool.y_train)}")
    jobs = [(i, plan, pool, spec, cfg, privacy, master_seed) for i in range(plan.n_models)]
    return _assemble(plan, pool, _run(_train_one, jobs, n_workers or workers()))


def finetune_ensemble(
    base: Ensemble,
    pool: Dataset,
    solver: SolverConfig,
    cfg: TrainConfig,
    master_seed: int,
    full_finetune: bool = False,
    privacy: PrivacySpec | None = None,
    n_workers: int | None = None,
) -> Ensemble:
    """Replace-then-finetune every member of ``base`` on its own plan row."""
    jobs = [
        (i, base.plan, pool, base.specs[i], base.params[i], solver, cfg, full_finetune, privacy, master_seed)
        for i in range(base.plan.n_models)
    ]
    return _assemble(base.plan, pool, _run(_finetune_one, jobs, n_workers or workers()))
