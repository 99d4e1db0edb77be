"""Classifier assembly: stem, residual / ODE / SDE blocks, linear head.

A model is a :class:`ModelSpec` (declarative, JSON-serializable) plus a flat
``dict`` of named float64 arrays. The forward pass is::

    h0 = [x @ stem.W + stem.b, 0 * augment]
    h  = block_n(... block_1(h0))
    logits = h @ head.W + head.b

Residual blocks apply ``h + f(h)``; Node blocks integrate ``dh/dt = f(h, t)``
over ``[0, T]``; Nsde blocks add the diffusion ``(sigma / sqrt(T)) dB_t``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable

import numpy as np

from . import autodiff as ad
from ._seeding import mix_seed
from .autodiff import Tape, Var
from .solvers import SolverConfig, SolveTrace, SolverDivergenceError, ode_solve, sde_solve

__all__ = [
    "BLOCK_KINDS",
    "ModelSpec",
    "Layer",
    "DriftNet",
    "ForwardOutput",
    "build_model",
    "param_shapes",
    "param_count",
    "forward",
    "forward_graph",
    "drift_net",
    "replace_final_block",
    "finetune_mask",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_to_json",
    "checkpoint_from_json",
]

BLOCK_KINDS = ("residual", "node", "nsde")
ACTIVATIONS = ("tanh", "relu")
CHECKPOINT_FORMAT = "nsdelab-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a stem + blocks + head classifier.

    ``final_block`` swaps the kind of the last block only (used by
    replace-then-finetune); ``solver`` governs every Node/Nsde block.
    """

    input_dim: int
    state_dim: int
    n_classes: int = 2
    n_blocks: int = 1
    block_kind: str = "node"
    augment_dim: int = 0
    hidden: int = 64
    depth: int = 2
    activation: str = "tanh"
    time_conditioning: bool = True
    solver: SolverConfig = field(default_factory=SolverConfig)
    final_block: str | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if isinstance(self.solver, dict):
            object.__setattr__(self, "solver", SolverConfig.from_dict(self.solver))
        errors = []
        if self.input_dim < 1 or self.state_dim < 1:
            errors.append("input_dim and state_dim must be >= 1")
        if self.n_classes < 2:
            errors.append("n_classes must be >= 2")
        if self.n_blocks not in (1, 2, 3):
            errors.append(f"n_blocks must be 1, 2 or 3 (got {self.n_blocks})")
        if self.block_kind not in BLOCK_KINDS:
            errors.append(f"block_kind must be one of {BLOCK_KINDS} (got {self.block_kind!r})")
        if self.final_block is not None and self.final_block not in BLOCK_KINDS:
            errors.append(f"final_block must be one of {BLOCK_KINDS} (got {self.final_block!r})")
        if self.augment_dim < 0:
            errors.append("augment_dim must be >= 0")
        if self.augment_dim > 0 and "residual" in self.block_kinds:
            errors.append("augment_dim is only allowed with node/nsde blocks")
        if self.hidden < 1 or self.depth < 1:
            errors.append("hidden and depth must be >= 1")
        if self.activation not in ACTIVATIONS:
            errors.append(f"activation must be one of {ACTIVATIONS} (got {self.activation!r})")
        if "nsde" in self.block_kinds and not self.solver.stochastic:
            errors.append("nsde blocks need a stochastic solver method")
        if "node" in self.block_kinds and self.solver.stochastic:
            errors.append("node blocks need a deterministic solver method")
        if errors:
            raise ValueError("invalid ModelSpec: " + "; ".join(errors))

    @property
    def block_kinds(self) -> tuple[str, ...]:
        kinds = [self.block_kind] * self.n_blocks
        if self.final_block is not None:
            kinds[-1] = self.final_block
        return tuple(kinds)

    @property
    def width(self) -> int:
        """Dimension of the evolving state, augmentation included."""
        return self.state_dim + self.augment_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["solver"] = self.solver.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["solver"] = SolverConfig.from_dict(d.get("solver", {}))
        return cls(**d)


@dataclass
class Layer:
    weights: np.ndarray
    bias: np.ndarray
    activation: str


@dataclass
class DriftNet:
    """Dense network ``f(h, t)``; with time conditioning the last input row of
    the first weight matrix multiplies ``t``."""

    layers: list[Layer]
    time_conditioning: bool = False


def _block_layer_shapes(spec: ModelSpec, kind: str) -> list[tuple[int, int]]:
    d = spec.width
    tc = int(kind != "residual" and spec.time_conditioning)
    dims = [d + tc] + [spec.hidden] * spec.depth + [d]
    return list(zip(dims[:-1], dims[1:]))


def param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes."""
    shapes: dict[str, tuple[int, ...]] = {
        "stem.W": (spec.input_dim, spec.state_dim),
        "stem.b": (spec.state_dim,),
    }
    for i, kind in enumerate(spec.block_kinds):
        for j, (fan_in, fan_out) in enumerate(_block_layer_shapes(spec, kind)):
            shapes[f"block{i}.W{j}"] = (fan_in, fan_out)
            shapes[f"block{i}.b{j}"] = (fan_out,)
    shapes["head.W"] = (spec.width, spec.n_classes)
    shapes["head.b"] = (spec.n_classes,)
    return shapes


def param_count(spec: ModelSpec) -> int:
    return int(sum(np.prod(s) for s in param_shapes(spec).values()))


def _he_truncated(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    sd = np.sqrt(2.0 / shape[0])
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return z * sd


def _init_params(names: Iterable[str], shapes: dict, seed: int) -> dict[str, np.ndarray]:
    out = {}
    for name in names:
        shape = shapes[name]
        if len(shape) == 1:
            out[name] = np.zeros(shape)
        else:
            out[name] = _he_truncated(np.random.default_rng(mix_seed(seed, name)), shape)
    return out


def build_model(spec: ModelSpec) -> dict[str, np.ndarray]:
    """Fresh parameters: weights ~ N(0, 2/fan_in) truncated at 2 s.d., zero biases."""
    shapes = param_shapes(spec)
    return _init_params(shapes, shapes, spec.seed)


def drift_net(params: dict[str, np.ndarray], spec: ModelSpec, block: int) -> DriftNet:
    kind = spec.block_kinds[block]
    n_layers = spec.depth + 1
    layers = [
        Layer(
            params[f"block{block}.W{j}"],
            params[f"block{block}.b{j}"],
            spec.activation if j < n_layers - 1 else "identity",
        )
        for j in range(n_layers)
    ]
    return DriftNet(layers, time_conditioning=kind != "residual" and spec.time_conditioning)


_ACT = {"tanh": ad.tanh, "relu": ad.relu}


def _drift_fn(pv: dict[str, Var], spec: ModelSpec, block: int, time_cond: bool):
    n_layers = spec.depth + 1
    Ws = [pv[f"block{block}.W{j}"] for j in range(n_layers)]
    bs = [pv[f"block{block}.b{j}"] for j in range(n_layers)]
    act = _ACT[spec.activation]

    def f(h: Var, t: float) -> Var:
        z = h
        if time_cond:
            z = ad.concat([h, h.tape.const(np.full((h.shape[0], 1), t))])
        for j in range(n_layers):
            z = ad.add(ad.matmul(z, Ws[j]), bs[j])
            if j < n_layers - 1:
                z = act(z)
        return z

    return f


@dataclass
class ForwardOutput:
    logits: Var
    state: Var
    traces: list[SolveTrace | None]
    tape: Tape
    param_vars: dict[str, Var]


def forward_graph(
    tape: Tape,
    pv: dict[str, Var],
    spec: ModelSpec,
    x: np.ndarray,
    noise_seed: int = 0,
) -> ForwardOutput:
    """Build the forward pass on ``tape`` from parameter leaves ``pv``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ad.ShapeError("forward", x.shape, (None, spec.input_dim))
    h = ad.add(ad.matmul(tape.const(x), pv["stem.W"]), pv["stem.b"])
    if spec.augment_dim:
        h = ad.concat([h, tape.const(np.zeros((x.shape[0], spec.augment_dim)))])
    traces: list[SolveTrace | None] = []
    for i, kind in enumerate(spec.block_kinds):
        f = _drift_fn(pv, spec, i, kind != "residual" and spec.time_conditioning)
        if kind == "residual":
            h = ad.add(h, f(h, 0.0))
            if not np.isfinite(h.value).all():
                raise SolverDivergenceError(i, 0.0)
            traces.append(None)
        elif kind == "node":
            res = ode_solve(f, h, spec.solver)
            h = res.state
            traces.append(res.trace)
        else:
            cfg = replace(spec.solver, noise_seed=mix_seed(noise_seed, spec.solver.noise_seed, i))
            res = sde_solve(f, h, cfg)
            h = res.state
            traces.append(res.trace)
    logits = ad.add(ad.matmul(h, pv["head.W"]), pv["head.b"])
    return ForwardOutput(logits, h, traces, tape, pv)


def forward(
    params: dict[str, np.ndarray],
    spec: ModelSpec,
    x: np.ndarray,
    noise_seed: int = 0,
    trainable: Iterable[str] | None = None,
) -> ForwardOutput:
    """Run the model on a batch; parameters in ``trainable`` (default all) become tape leaves."""
    tape = Tape()
    names = set(params if trainable is None else trainable)
    pv = {k: tape.param(v) if k in names else tape.const(v) for k, v in params.items()}
    return forward_graph(tape, pv, spec, x, noise_seed)


def finetune_mask(spec: ModelSpec, full: bool = False) -> list[str]:
    """Names trained during finetuning: last block + head, or everything."""
    names = list(param_shapes(spec))
    if full:
        return names
    last = f"block{spec.n_blocks - 1}."
    return [n for n in names if n.startswith(last) or n.startswith("head.")]


def replace_final_block(
    params: dict[str, np.ndarray],
    spec: ModelSpec,
    solver: SolverConfig,
    seed: int,
    full_finetune: bool = False,
) -> tuple[ModelSpec, dict[str, np.ndarray], list[str]]:
    """Swap the last block for a freshly initialised NSDE block.

    Earlier blocks and the stem are copied verbatim; the new block and the
    head are re-initialised from ``seed``. Returns the new spec, parameters,
    and the finetune mask.
    """
    if spec.n_blocks < 1:
        raise ValueError("model has no blocks to replace")
    if not solver.stochastic:
        raise ValueError("replacement block needs a stochastic solver")
    if spec.augment_dim:
        raise ValueError("replacement assumes an un-augmented state")
    new_spec = replace(spec, final_block="nsde", solver=solver, seed=seed)
    new_shapes = param_shapes(new_spec)
    last = f"block{spec.n_blocks - 1}."
    fresh = [n for n in new_shapes if n.startswith(last) or n.startswith("head.")]
    new_params = _init_params(fresh, new_shapes, seed)
    for name in new_shapes:
        if name in fresh:
            continue
        if params[name].shape != new_shapes[name]:
            raise ValueError(f"dimension mismatch for {name}: {params[name].shape} vs {new_shapes[name]}")
        new_params[name] = params[name].copy()
    ordered = {n: new_params[n] for n in new_shapes}
    return new_spec, ordered, finetune_mask(new_spec, full_finetune)


# ---------------------------------------------------------------- checkpoints


def _render_floats(values: np.ndarray) -> str:
    return "[" + ",".join(format(float(v), ".17g") for v in values.ravel()) + "]"


def checkpoint_to_json(params: dict[str, np.ndarray], spec: ModelSpec) -> str:
    """JSON text with the spec, seed and every parameter at 17 significant digits."""
    for name, v in params.items():
        if not np.isfinite(v).all():
            raise ValueError(f"parameter {name} is not finite")
    head = json.dumps(
        {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "seed": spec.seed, "spec": spec.to_dict()},
        sort_keys=True,
    )
    body = ",".join(
        f'{json.dumps(name)}:{{"shape":{json.dumps(list(v.shape))},"data":{_render_floats(v)}}}'
        for name, v in params.items()
    )
    return head[:-1] + ',"params":{' + body + "}}"


def checkpoint_from_json(text: str) -> tuple[dict[str, np.ndarray], ModelSpec]:
    doc = json.loads(text)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not an nsdelab checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    spec = ModelSpec.from_dict(doc["spec"])
    params = {
        name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in doc["params"].items()
    }
    expected = param_shapes(spec)
    if list(params) != list(expected) or any(params[n].shape != expected[n] for n in expected):
        raise ValueError("checkpoint parameters do not match the spec")
    return params, spec


def save_checkpoint(path, params: dict[str, np.ndarray], spec: ModelSpec) -> None:
    with open(path, "w") as fh:
        fh.write(checkpoint_to_json(params, spec))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], ModelSpec]:
    with open(path) as fh:
        return checkpoint_from_json(fh.read())
