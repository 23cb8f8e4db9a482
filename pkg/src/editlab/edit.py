"""Locate-then-edit: key collection, target optimisation and the ridge closed form.

For one layer with editable matrix ``W`` (``d_model x d_ff``), edit keys ``K_I``,
target values ``M_I`` and preservation keys ``K_J`` (keys are columns), the
update minimising::

    sum_i ||(W + D) k_i - m_i||^2 + lam * sum_j ||D k_j||^2

is ``D = (M_I - W K_I) K_I^T (K_I K_I^T + lam K_J K_J^T)^-1``.  It is computed
with a Cholesky solve, never an explicit inverse.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg

from .errors import NumericalError, OptimizationDiverged, ShapeError
from .model import (
    ToyTransformer,
    _resolve_index,
    _run,
    apply_delta,
    patched_answer_objective,
)
from .vocab import encode_answer, tokenize

log = logging.getLogger(__name__)

SOLUTION_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class EditItem:
    query: str
    target_new: str
    target_old: str | None = None
    decisive_index: int | None = None
    paraphrases: tuple[str, ...] = ()
    neighborhood_queries: tuple[str, ...] = ()
    id: str | None = None

    def __post_init__(self):
        if not self.query or not self.query.strip():
            raise ValueError("edit item query must be non-empty")
        if not self.target_new or not self.target_new.strip():
            raise ValueError("edit item target_new must be non-empty")
        object.__setattr__(self, "paraphrases", tuple(self.paraphrases))
        object.__setattr__(self, "neighborhood_queries", tuple(self.neighborhood_queries))


@dataclass(frozen=True)
class PreservationQuery:
    query: str
    decisive_index: int | None = None
    gt_answer: str | None = None
    id: str | None = None

    def __post_init__(self):
        if not self.query or not self.query.strip():
            raise ValueError("preservation query must be non-empty")


@dataclass(frozen=True)
class KeyMatrix:
    """Keys stacked as columns: ``matrix`` has shape ``(d_ff, n)``."""

    matrix: np.ndarray
    layer: int

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2:
            raise ShapeError("key matrix must be 2-D")
        if not np.all(np.isfinite(m)):
            raise NumericalError("non-finite key")
        object.__setattr__(self, "matrix", m)

    @property
    def columns(self) -> list[np.ndarray]:
        return list(self.matrix.T)

    @property
    def n(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class TargetMatrix:
    """Target output vectors stacked as columns: shape ``(d_model, n)``."""

    matrix: np.ndarray
    layer: int

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2:
            raise ShapeError("target matrix must be 2-D")
        object.__setattr__(self, "matrix", m)

    @property
    def columns(self) -> list[np.ndarray]:
        return list(self.matrix.T)


@dataclass(frozen=True)
class EditSolution:
    lam: float
    layers: tuple[int, ...]
    deltas: dict[int, np.ndarray]
    mean_reg_norm: dict[int, float]
    objective_before: dict[int, float]
    objective_after: dict[int, float]
    jitter: dict[int, float] = field(default_factory=dict)

    @property
    def mean_norm_across_layers(self) -> float:
        return float(np.mean([self.mean_reg_norm[l] for l in self.layers]))

    def to_dict(self, include_deltas: bool = False) -> dict:
        d = {
            "schema_version": SOLUTION_SCHEMA_VERSION,
            "lambda": self.lam,
            "layers": list(self.layers),
            "mean_reg_norm": {str(l): self.mean_reg_norm[l] for l in self.layers},
            "objective_before": {str(l): self.objective_before[l] for l in self.layers},
            "objective_after": {str(l): self.objective_after[l] for l in self.layers},
            "jitter": {str(l): self.jitter.get(l, 0.0) for l in self.layers},
        }
        if include_deltas:
            # same row-major layout as model checkpoints
            d["deltas"] = {
                str(l): {"shape": list(self.deltas[l].shape), "data": self.deltas[l].ravel().tolist()}
                for l in self.layers
            }
        return d

    def to_json(self, include_deltas: bool = False) -> str:
        return json.dumps(self.to_dict(include_deltas), indent=2, sort_keys=True)


@dataclass(frozen=True)
class TargetOptions:
    steps: int = 50
    lr: float = 0.5
    early_stop: bool = True


def _query_of(entry) -> tuple[str, int | None]:
    if isinstance(entry, str):
        return entry, None
    return entry.query, entry.decisive_index


def collect_keys(model: ToyTransformer, entries: Sequence, layer: int) -> KeyMatrix:
    """Keys at ``layer`` for each entry's decisive token, one column per entry in order.

    ``entries`` may be ``EditItem``/``PreservationQuery`` objects or plain strings.
    """
    model._check_layer(layer)
    cols = []
    for entry in entries:
        text, idx = _query_of(entry)
        toks = tokenize(text, model.vocab)
        pos = _resolve_index(toks, idx)
        cols.append(_run(model, toks).hidden_pre_wout[layer, pos])
    mat = np.stack(cols, axis=1) if cols else np.zeros((model.config.d_ff, 0))
    return KeyMatrix(mat, layer)


def current_activation(model: ToyTransformer, item, layer: int) -> np.ndarray:
    """MLP output (``W_out @ k``) at the decisive token of ``item``."""
    text, idx = _query_of(item)
    toks = tokenize(text, model.vocab)
    return _run(model, toks).mlp_out[layer, _resolve_index(toks, idx)]


def compute_target(
    model: ToyTransformer,
    item: EditItem,
    layer: int,
    opts: TargetOptions | None = None,
) -> np.ndarray:
    """Optimise the decisive token's MLP output at ``layer`` towards ``target_new``.

    Starting from the current activation, runs gradient ascent on the mean
    teacher-forced log-probability of ``target_new`` with the candidate vector
    substituted for that MLP output.  Stops early once every target token is
    top-1.  Returns the final vector (``d_model``).
    """
    opts = opts or TargetOptions()
    model._check_layer(layer)
    q = tokenize(item.query, model.vocab)
    ans = encode_answer(item.target_new, model.vocab)
    pos = _resolve_index(q, item.decisive_index)
    z = _run(model, q).mlp_out[layer, pos].copy()
    for step in range(opts.steps):
        obj, grad, score = patched_answer_objective(model, q, ans, layer, pos, z)
        if not np.isfinite(obj) or not np.all(np.isfinite(grad)):
            raise OptimizationDiverged(f"non-finite objective at step {step} for {item.query!r}")
        if opts.early_stop and bool(np.all(score.is_top1)):
            log.debug("target for %r converged after %d steps", item.query, step)
            break
        z = z + opts.lr * grad
    if not np.all(np.isfinite(z)):
        raise OptimizationDiverged(f"non-finite target for {item.query!r}")
    return z


def _check_shapes(W, K_I, M_I, K_J):
    W = np.asarray(W, dtype=np.float64)
    KI = K_I.matrix if isinstance(K_I, KeyMatrix) else np.asarray(K_I, dtype=np.float64)
    MI = M_I.matrix if isinstance(M_I, TargetMatrix) else np.asarray(M_I, dtype=np.float64)
    if K_J is None:
        KJ = np.zeros((W.shape[1], 0))
    else:
        KJ = K_J.matrix if isinstance(K_J, KeyMatrix) else np.asarray(K_J, dtype=np.float64)
    if W.ndim != 2 or KI.ndim != 2 or MI.ndim != 2 or KJ.ndim != 2:
        raise ShapeError("W, K_I, M_I and K_J must all be 2-D")
    d_out, d_in = W.shape
    if KI.shape[0] != d_in or KJ.shape[0] != d_in:
        raise ShapeError(f"key length must equal W's column count {d_in}")
    if MI.shape != (d_out, KI.shape[1]):
        raise ShapeError(f"M_I shape {MI.shape} != ({d_out}, {KI.shape[1]})")
    for name, a in (("W", W), ("K_I", KI), ("M_I", MI), ("K_J", KJ)):
        if not np.all(np.isfinite(a)):
            raise NumericalError(f"{name} contains non-finite values")
    return W, KI, MI, KJ


def solve_delta_with_info(W, K_I, M_I, K_J, lam: float) -> tuple[np.ndarray, float]:
    """Closed-form update plus the ridge jitter that was added (0.0 if none)."""
    W, KI, MI, KJ = _check_shapes(W, K_I, M_I, K_J)
    if lam < 0 or not np.isfinite(lam):
        raise ValueError("lambda must be finite and non-negative")
    gram = KI @ KI.T + lam * (KJ @ KJ.T)
    dim = gram.shape[0]
    scale = max(float(np.max(np.abs(gram))), 1e-300)
    if np.max(np.abs(gram - gram.T)) > 1e-10 * scale:
        raise NumericalError("Gram matrix is not symmetric")
    gram = 0.5 * (gram + gram.T)
    if not np.all(np.isfinite(gram)):
        raise NumericalError("non-finite Gram matrix")
    rhs = (MI - W @ KI) @ KI.T  # (d_out, d_in)
    if not np.any(rhs):
        return np.zeros_like(W), 0.0

    jitter = 0.0
    try:
        factor = linalg.cho_factor(gram, lower=True, check_finite=False)
        diag = np.abs(np.diag(factor[0]))
        singular = diag.min() ** 2 <= dim * np.finfo(float).eps * diag.max() ** 2
    except linalg.LinAlgError:
        singular = True
    if singular:
        jitter = 1e-10 * float(np.trace(gram)) / dim
        if jitter <= 0:
            jitter = 1e-10
        log.info("Gram matrix singular to working precision; adding jitter %.3g", jitter)
        try:
            factor = linalg.cho_factor(gram + jitter * np.eye(dim), lower=True, check_finite=False)
        except linalg.LinAlgError as e:
            raise NumericalError(f"Gram matrix not positive semi-definite: {e}") from e
    delta = linalg.cho_solve(factor, rhs.T, check_finite=False).T
    if not np.all(np.isfinite(delta)):
        raise NumericalError("non-finite update")
    return delta, jitter


def solve_delta(W, K_I, M_I, K_J, lam: float) -> np.ndarray:
    """``(M_I - W K_I) K_I^T (K_I K_I^T + lam K_J K_J^T)^-1`` via a Cholesky solve.

    ``K_J`` may have zero columns (or be ``None``), in which case the update is
    the pure least-squares fit.  If the Gram matrix is singular to working
    precision a ridge ``eps * I`` with ``eps = 1e-10 * trace / dim`` is added.
    """
    return solve_delta_with_info(W, K_I, M_I, K_J, lam)[0]


def objective_value(W, delta, K_I, M_I, K_J, lam: float) -> float:
    W, KI, MI, KJ = _check_shapes(W, K_I, M_I, K_J)
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != W.shape:
        raise ShapeError(f"delta shape {delta.shape} != W shape {W.shape}")
    fit = (W + delta) @ KI - MI
    reg = delta @ KJ
    val = float(np.sum(fit * fit) + lam * np.sum(reg * reg))
    if not np.isfinite(val):
        raise NumericalError("non-finite objective")
    return val


def regularizer_norms(delta, K_J) -> float:
    """Mean over preservation keys of ``||delta @ k_j||``."""
    KJ = K_J.matrix if isinstance(K_J, KeyMatrix) else np.asarray(K_J, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if KJ.ndim != 2 or delta.ndim != 2 or delta.shape[1] != KJ.shape[0]:
        raise ShapeError(f"delta {delta.shape} incompatible with keys {KJ.shape}")
    if KJ.shape[1] == 0:
        raise ShapeError("no preservation keys")
    return float(np.mean(np.linalg.norm(delta @ KJ, axis=0)))


def compute_targets(model, items, layer, opts=None) -> TargetMatrix:
    cols = [compute_target(model, it, layer, opts) for it in items]
    return TargetMatrix(np.stack(cols, axis=1), layer)


def preservation_key_matrices(model, preservation, layers) -> dict[int, KeyMatrix]:
    """Preservation keys per layer, computed once from the (pre-edit) model."""
    return {l: collect_keys(model, preservation, l) for l in layers}


def multi_layer_edit(
    model: ToyTransformer,
    items: Sequence[EditItem],
    layers: Sequence[int],
    lam: float,
    preservation: Sequence[PreservationQuery],
    *,
    targets: TargetMatrix | None = None,
    preservation_keys: dict[int, KeyMatrix] | None = None,
    target_opts: TargetOptions | None = None,
    reg_weighting: str = "mean",
) -> tuple[ToyTransformer, EditSolution]:
    """Edit every item jointly, spreading the residual evenly over ``layers``.

    The target activation ``z`` is optimised at the last layer; the residual
    ``r = z - W_last k_last`` is split as ``r / len(layers)`` and each layer is
    solved in ascending order with edit keys recomputed on the partially edited
    model.  Preservation keys come from the unedited ``model``.

    ``reg_weighting="mean"`` scales the preservation Gram by ``1/u`` so that
    ``lam`` weights the second-moment estimate ``K_J K_J^T / u``; ``"sum"`` uses
    ``K_J K_J^T`` as is.  Reported regulariser norms always use the raw keys.
    """
    layers = tuple(int(l) for l in layers)
    if not layers:
        raise ValueError("at least one layer is required")
    if list(layers) != sorted(set(layers)):
        raise ValueError("layers must be strictly ascending")
    for l in layers:
        model._check_layer(l)
    if not items:
        raise ValueError("no edit items")
    if reg_weighting not in ("mean", "sum"):
        raise ValueError("reg_weighting must be 'mean' or 'sum'")

    last = layers[-1]
    if targets is None:
        targets = compute_targets(model, items, last, target_opts)
    if preservation_keys is None:
        preservation_keys = preservation_key_matrices(model, preservation, layers)

    current_last = np.stack([current_activation(model, it, last) for it in items], axis=1)
    resid = (targets.matrix - current_last) / len(layers)

    edited = model
    deltas, norms, before, after, jitters = {}, {}, {}, {}, {}
    for l in layers:
        K_I = collect_keys(edited, items, l)
        W = edited.w_out(l)
        M_I = TargetMatrix(W @ K_I.matrix + resid, l)
        KJ_raw = preservation_keys[l].matrix
        u = KJ_raw.shape[1]
        KJ = KJ_raw / np.sqrt(u) if (reg_weighting == "mean" and u) else KJ_raw
        delta, jitter = solve_delta_with_info(W, K_I, M_I, KJ, lam)
        before[l] = objective_value(W, np.zeros_like(W), K_I, M_I, KJ, lam)
        after[l] = objective_value(W, delta, K_I, M_I, KJ, lam)
        norms[l] = regularizer_norms(delta, KJ_raw) if u else 0.0
        deltas[l] = delta
        jitters[l] = jitter
        edited = apply_delta(edited, l, delta)

    return edited, EditSolution(
        lam=float(lam),
        layers=layers,
        deltas=deltas,
        mean_reg_norm=norms,
        objective_before=before,
        objective_after=after,
        jitter=jitters,
    )
