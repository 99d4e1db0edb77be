"""Training loops: plain SGD with momentum, regularised, early-stopped, DP-SGD,
private NSDE training and replace-then-finetune."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import autodiff as ad
from .. import nets
from .._seeding import mix_seed
from ..nets import ModelSpec
from ..privacy import Accountant, PrivacySpec, account_rdp, estimate_lipschitz
from ..solvers import SolverConfig
from .data import Dataset

__all__ = [
    "DEFENSES",
    "Defense",
    "TrainConfig",
    "EpochLog",
    "TrainRecord",
    "TrainingDivergedError",
    "loss_and_grads",
    "predict_proba",
    "accuracy",
    "per_example_grads",
    "dp_sgd_step",
    "noise_multiplier_for",
    "train",
    "train_nsde_private",
    "replace_then_finetune",
]

DEFENSES = ("none", "l1", "l2", "early_stop", "dp_sgd")


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, detail: str = "loss is not finite"):
        super().__init__(f"training diverged at epoch {epoch}: {detail}")
        self.epoch = epoch


@dataclass(frozen=True)
class Defense:
    """One of none / l1(lam) / l2(lam) / early_stop(patience) / dp_sgd(clip, noise, target eps, delta)."""

    kind: str = "none"
    lam: float = 1e-5
    patience: int = 10
    clip: float = 1.0
    noise_multiplier: float | None = None
    target_epsilon: float = 8.0
    delta: float = 1e-5

    def __post_init__(self) -> None:
        if self.kind not in DEFENSES:
            raise ValueError(f"defense must be one of {DEFENSES} (got {self.kind!r})")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.kind == "dp_sgd" and self.clip <= 0:
            raise ValueError("dp_sgd needs clip > 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")

    @property
    def label(self) -> str:
        return {
            "none": "none",
            "l1": f"l1({self.lam:g})",
            "l2": f"l2({self.lam:g})",
            "early_stop": f"early_stop({self.patience})",
            "dp_sgd": f"dp_sgd(eps={self.target_epsilon:g})",
        }[self.kind]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    defense: Defense = field(default_factory=Defense)
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self) -> None:
        if isinstance(self.defense, dict):
            object.__setattr__(self, "defense", Defense(**self.defense))
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and eval_every >= 1 required")
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("lr > 0 and 0 <= momentum < 1 required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["defense"] = self.defense.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float
    epsilon: float | None = None


@dataclass
class TrainRecord:
    log: list[EpochLog] = field(default_factory=list)
    selected_epoch: int = 0
    train_acc: float = float("nan")
    test_acc: float = float("nan")
    epsilon_ledger: list[float] = field(default_factory=list)
    privacy: dict | None = None
    notes: list[str] = field(default_factory=list)
    steps: int = 0

    @property
    def gap(self) -> float:
        """Generalization gap of the returned parameters."""
        return self.train_acc - self.test_acc

    def to_dict(self) -> dict:
        return {
            "log": [asdict(e) for e in self.log],
            "selected_epoch": self.selected_epoch,
            "train_acc": self.train_acc,
            "test_acc": self.test_acc,
            "gap": self.gap,
            "epsilon_ledger": self.epsilon_ledger,
            "privacy": self.privacy,
            "notes": self.notes,
            "steps": self.steps,
        }


# ------------------------------------------------------------------ helpers


def _penalty(pv: dict[str, ad.Var], names: list[str], defense: Defense):
    if defense.kind not in ("l1", "l2") or defense.lam == 0 or not names:
        return None
    norm = ad.l1_norm if defense.kind == "l1" else ad.squared_norm
    total = norm(pv[names[0]])
    for n in names[1:]:
        total = total + norm(pv[n])
    return ad.scale(total, defense.lam)


def loss_and_grads(
    params: dict[str, np.ndarray],
    spec: ModelSpec,
    x: np.ndarray,
    y: np.ndarray,
    trainable: list[str] | None = None,
    noise_seed: int = 0,
    defense: Defense | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy (plus the defense penalty) and its gradients."""
    names = list(params) if trainable is None else [n for n in params if n in set(trainable)]
    out = nets.forward(params, spec, x, noise_seed=noise_seed, trainable=names)
    loss = ad.cross_entropy(out.logits, y)
    pen = _penalty(out.param_vars, names, defense or Defense())
    if pen is not None:
        loss = loss + pen
    grads = ad.backward(out.tape, loss)
    return float(loss.value), dict(zip(names, grads))


def predict_proba(params, spec: ModelSpec, x: np.ndarray, noise_seed: int = 0) -> np.ndarray:
    logits = nets.forward(params, spec, x, noise_seed=noise_seed, trainable=()).logits.value
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def accuracy(probs: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(probs.argmax(axis=1) == y))


def _ce(probs: np.ndarray, y: np.ndarray) -> float:
    return float(-np.mean(np.log(np.clip(probs[np.arange(len(y)), y], 1e-300, None))))


def _evaluate(params, spec, data: Dataset, eval_seed: int):
    ptr = predict_proba(params, spec, data.x_train, eval_seed)
    pte = predict_proba(params, spec, data.x_test, eval_seed)
    return _ce(ptr, data.y_train), accuracy(ptr, data.y_train), _ce(pte, data.y_test), accuracy(pte, data.y_test)


# ------------------------------------------------------------------ DP-SGD


def per_example_grads(params, spec, x, y, trainable, noise_seed: int = 0) -> np.ndarray:
    """Flattened per-example gradient rows, shape (batch, n_trainable_coords)."""
    rows = []
    for i in range(len(y)):
        _, g = loss_and_grads(params, spec, x[i : i + 1], y[i : i + 1], trainable, mix_seed(noise_seed, i))
        rows.append(np.concatenate([g[n].ravel() for n in trainable]))
    return np.array(rows)


def dp_sgd_step(
    grads: np.ndarray,
    C: float,
    noise_multiplier: float,
    rng: np.random.Generator,
    accountant: Accountant | None = None,
    hook=None,
) -> np.ndarray:
    """Clip each row to norm C, sum, add N(0, (z C)^2 I), divide by the batch size."""
    if C <= 0:
        raise ValueError("clip norm C must be > 0")
    grads = np.atleast_2d(np.asarray(grads, dtype=np.float64))
    norms = np.linalg.norm(grads, axis=1)
    factors = np.minimum(1.0, C / np.maximum(norms, 1e-300))
    clipped = grads * factors[:, None]
    if hook is not None:
        hook(clipped)
    total = clipped.sum(axis=0)
    if noise_multiplier > 0:
        total = total + rng.normal(0.0, noise_multiplier * C, total.shape)
    if accountant is not None:
        accountant.step()
    return total / grads.shape[0]


def noise_multiplier_for(target_epsilon: float, steps: int, delta: float) -> float:
    """Smallest noise multiplier whose RDP epsilon after ``steps`` is <= target (bisection)."""
    lo, hi = 1e-3, 1.0
    while account_rdp(steps, hi, delta) > target_epsilon:
        hi *= 2.0
        if hi > 1e8:
            raise ValueError("target epsilon unreachable")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if account_rdp(steps, mid, delta) > target_epsilon:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-10 * hi:
            break
    return hi


# ------------------------------------------------------------------ training loop


def _unflatten(vec: np.ndarray, params: dict, names: list[str]) -> dict[str, np.ndarray]:
    out, k = {}, 0
    for n in names:
        size = params[n].size
        out[n] = vec[k : k + size].reshape(params[n].shape)
        k += size
    return out


def train(
    params: dict[str, np.ndarray],
    spec: ModelSpec,
    data: Dataset,
    cfg: TrainConfig,
    trainable: list[str] | None = None,
    epoch_hook=None,
    dp_hook=None,
) -> tuple[dict[str, np.ndarray], TrainRecord]:
    """Mini-batch SGD with momentum (v <- mu v + g; w <- w - lr v).

    Batch order and NSDE noise derive from ``cfg.seed``. Early stopping
    monitors test loss at each evaluation and restores the best parameters
    after ``patience`` evaluations without improvement. DP-SGD clips and
    noises per-example gradients and accounts one step per iteration with RDP.
    ``epoch_hook(epoch, params, record)`` runs after every epoch.
    """
    params = {k: v.copy() for k, v in params.items()}
    names = list(params) if trainable is None else [n for n in params if n in set(trainable)]
    defense = cfg.defense
    n = len(data.y_train)
    if n == 0:
        raise ValueError("no training samples")
    record = TrainRecord()
    batch_size = min(cfg.batch_size, n)
    if batch_size < cfg.batch_size:
        record.notes.append(f"batch size clamped to the {n} training samples")
    eval_seed = mix_seed(cfg.seed, "eval")
    velocity = {k: np.zeros_like(params[k]) for k in names}
    n_batches = math.ceil(n / batch_size)

    accountant = None
    z = 0.0
    dp_rng = None
    if defense.kind == "dp_sgd":
        steps_total = max(1, cfg.epochs * n_batches)
        z = (
            defense.noise_multiplier
            if defense.noise_multiplier is not None
            else noise_multiplier_for(defense.target_epsilon, steps_total, defense.delta)
        )
        accountant = Accountant("rdp", z, defense.delta) if z > 0 else None
        dp_rng = np.random.default_rng(mix_seed(cfg.seed, "dp-noise"))
        record.privacy = {"mechanism": "dp_sgd", "noise_multiplier": z, "clip": defense.clip, "delta": defense.delta}

    best = (math.inf, None, 0)
    since_best = 0
    ev = _evaluate(params, spec, data, eval_seed)
    record.log.append(EpochLog(0, *ev))
    if defense.kind == "early_stop":
        best = (ev[2], {k: v.copy() for k, v in params.items()}, 0)

    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng(mix_seed(cfg.seed, "batches", epoch)).permutation(n)
        for b in range(n_batches):
            idx = order[b * batch_size : (b + 1) * batch_size]
            noise_seed = mix_seed(cfg.seed, "noise", epoch, b)
            xb, yb = data.x_train[idx], data.y_train[idx]
            if defense.kind == "dp_sgd":
                G = per_example_grads(params, spec, xb, yb, names, noise_seed)
                flat = dp_sgd_step(G, defense.clip, z, dp_rng, accountant, dp_hook)
                grads = _unflatten(flat, params, names)
                loss = 0.0
            else:
                loss, grads = loss_and_grads(params, spec, xb, yb, names, noise_seed, defense)
                if not math.isfinite(loss):
                    raise TrainingDivergedError(epoch)
            for k in names:
                velocity[k] = cfg.momentum * velocity[k] + grads[k]
                params[k] = params[k] - cfg.lr * velocity[k]
            record.steps += 1
        if not all(np.isfinite(params[k]).all() for k in names):
            raise TrainingDivergedError(epoch, "parameters are not finite")
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            ev = _evaluate(params, spec, data, eval_seed)
            if not math.isfinite(ev[0]):
                raise TrainingDivergedError(epoch)
            eps = accountant.epsilon() if accountant is not None else None
            record.log.append(EpochLog(epoch, *ev, epsilon=eps))
            if defense.kind == "early_stop":
                if ev[2] < best[0]:
                    best = (ev[2], {k: v.copy() for k, v in params.items()}, epoch)
                    since_best = 0
                else:
                    since_best += 1
        if epoch_hook is not None:
            epoch_hook(epoch, params, record)
        if defense.kind == "early_stop" and since_best >= defense.patience:
            record.notes.append(f"early stop at epoch {epoch}; restored epoch {best[2]}")
            break

    if defense.kind == "early_stop":
        params = best[1]
        record.selected_epoch = best[2]
    else:
        record.selected_epoch = record.log[-1].epoch
    sel = next(e for e in record.log if e.epoch == record.selected_epoch)
    record.train_acc, record.test_acc = sel.train_acc, sel.test_acc
    if accountant is not None:
        record.epsilon_ledger = list(accountant.ledger)
        record.privacy.update(accountant.to_dict())
    elif defense.kind == "dp_sgd":
        record.notes.append("no formal guarantee: noise multiplier is 0")
    return params, record


# ------------------------------------------------------------------ private NSDE


def _nsde_lipschitz(params, spec: ModelSpec) -> float:
    return max(
        estimate_lipschitz(nets.drift_net(params, spec, i))
        for i, kind in enumerate(spec.block_kinds)
        if kind == "nsde"
    )


def train_nsde_private(
    params: dict[str, np.ndarray],
    spec: ModelSpec,
    data: Dataset,
    cfg: TrainConfig,
    privacy: PrivacySpec,
    trainable: list[str] | None = None,
) -> tuple[dict[str, np.ndarray], TrainRecord]:
    """Ordinary training of an NSDE whose diffusion supplies the privacy.

    The accountant advances once per epoch of disjoint mini-batches (or per
    iteration with ``privacy.per_iteration``) using sigma_rel = sigma / (T L),
    with L either fixed by ``privacy.L`` or the running maximum of the drift
    Lipschitz bound over training.
    """
    if "nsde" not in spec.block_kinds or not spec.solver.stochastic:
        raise ValueError("no diffusion, no guarantee: private training needs a stochastic NSDE block")
    sigma = spec.solver.noise_sigma
    T = spec.solver.T
    state = {"L": privacy.L if privacy.L is not None else _nsde_lipschitz(params, spec)}
    n_batches = math.ceil(len(data.y_train) / min(cfg.batch_size, max(1, len(data.y_train))))
    per_epoch = n_batches if privacy.per_iteration else 1
    ledger: list[float] = []

    def epsilon_after(k_steps: int) -> float:
        acc = Accountant(privacy.accountant, sigma / (T * state["L"]), privacy.delta, privacy.delta_prime)
        return acc.epsilon(k_steps)

    def hook(epoch, p, record):
        if privacy.L is None:
            state["L"] = max(state["L"], _nsde_lipschitz(p, spec))
        if sigma > 0:
            ledger.append(epsilon_after(epoch * per_epoch))
            if record.log and record.log[-1].epoch == epoch:
                record.log[-1].epsilon = ledger[-1]

    params, record = train(params, spec, data, cfg, trainable=trainable, epoch_hook=hook)
    K = len(ledger) * per_epoch if sigma > 0 else cfg.epochs * per_epoch
    record.epsilon_ledger = ledger
    info = {
        "mechanism": "nsde_diffusion",
        "accountant": privacy.accountant,
        "sigma": sigma,
        "T": T,
        "L": state["L"],
        "sigma_rel": sigma / (T * state["L"]) if state["L"] > 0 else math.inf,
        "K": K,
        "delta": privacy.delta,
        "delta_prime": privacy.delta_prime,
        "per_iteration": privacy.per_iteration,
    }
    if sigma == 0:
        info["guarantee"] = "no formal guarantee"
        record.notes.append("no formal guarantee: sigma = 0 is the non-private model")
        info["epsilon"] = None
        info["delta_total"] = None
    else:
        info["epsilon"] = ledger[-1] if ledger else 0.0
        if Accountant(privacy.accountant, 1.0, privacy.delta).method == "strong_composition":
            info["delta_total"] = K * privacy.delta + privacy.delta_prime
        else:
            info["delta_total"] = privacy.delta
    record.privacy = info
    return params, record


def replace_then_finetune(
    params: dict[str, np.ndarray],
    spec: ModelSpec,
    solver: SolverConfig,
    data: Dataset,
    cfg: TrainConfig,
    seed: int,
    full_finetune: bool = False,
    privacy: PrivacySpec | None = None,
) -> tuple[dict[str, np.ndarray], ModelSpec, TrainRecord]:
    """Swap the last block for a fresh NSDE block and train only the masked parameters.

    With ``privacy`` set, the accountant counts finetune iterations only.
    """
    new_spec, new_params, mask = nets.replace_final_block(params, spec, solver, seed, full_finetune)
    if privacy is not None:
        trained, record = train_nsde_private(new_params, new_spec, data, cfg, privacy, trainable=mask)
    else:
        trained, record = train(new_params, new_spec, data, cfg, trainable=mask)
    record.notes.append(f"finetuned {len(mask)} parameter arrays")
    return trained, new_spec, record
