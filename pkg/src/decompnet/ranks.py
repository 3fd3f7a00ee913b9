"""Budget -> per-layer rank selection, plus parameter and MACs accounting."""
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidBudgetError, InvalidInputError

CRITERIA = ("sv", "energy", "uniform")
BUDGET_KINDS = ("z", "params", "macs")


@dataclass(frozen=True)
class Budget:
    kind: str
    value: float

    def __post_init__(self):
        if self.kind not in BUDGET_KINDS:
            raise InvalidBudgetError(f"unknown budget kind {self.kind!r}")
        if self.kind == "z" and not 0.0 < self.value <= 1.0:
            raise InvalidBudgetError(f"rank ratio must lie in (0, 1], got {self.value}")
        if self.kind != "z" and self.value <= 0:
            raise InvalidBudgetError(f"{self.kind} target must be positive")

    @classmethod
    def parse(cls, text):
        """``"z=0.5"``, ``"params=12000"`` or ``"macs=3e6"``."""
        key, sep, val = str(text).partition("=")
        if not sep:
            raise InvalidBudgetError(f"budget {text!r} is not of the form kind=value")
        try:
            num = float(val)
        except ValueError:
            raise InvalidBudgetError(f"budget value {val!r} is not a number") from None
        return cls(key.strip().lower(), num)

    def __str__(self):
        return f"{self.kind}={self.value:g}"


@dataclass(frozen=True)
class RankAssignment:
    ranks: tuple
    criterion: str
    budget: Budget = None
    d: int = None

    def to_dict(self):
        return {
            "criterion": self.criterion,
            "budget": None if self.budget is None else {"kind": self.budget.kind, "value": self.budget.value},
            "d": self.d,
            "ranks": [int(r) for r in self.ranks],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        b = d.get("budget")
        return cls(tuple(int(r) for r in d["ranks"]), d["criterion"],
                   None if b is None else Budget(b["kind"], b["value"]), d.get("d"))


def spectra_of(source):
    """Singular values per layer from a model or a list of spectra."""
    if hasattr(source, "layer_factors"):
        return [f.s for f in source.layer_factors()]
    return [np.asarray(s, dtype=np.float64) for s in source]


def _full_ranks(spectra):
    return [len(s) for s in spectra]


def _check_d(spectra, d):
    total = sum(_full_ranks(spectra))
    cap = total - len(spectra)
    if not isinstance(d, (int, np.integer)) or d < 0:
        raise InvalidBudgetError(f"basis count to drop must be a non-negative integer, got {d!r}")
    if d > cap:
        raise InvalidBudgetError(f"cannot drop {d} of {total} bases while keeping one per layer (max {cap})")


def _drop_by_score(spectra, scores, d, criterion):
    """Drop the ``d`` lowest-scoring bases, never the first basis of a layer.

    Ties go to the lower (layer, basis) index. Rank of a layer is its full
    rank minus the number of its bases dropped.
    """
    _check_d(spectra, d)
    entries = [
        (float(sc[i]), layer, i)
        for layer, sc in enumerate(scores)
        for i in range(1, len(sc))
    ]
    entries.sort()
    ranks = _full_ranks(spectra)
    for _, layer, _ in entries[:d]:
        ranks[layer] -= 1
    return RankAssignment(tuple(ranks), criterion, d=int(d))


def select_sv(source, d):
    """Drop the ``d`` globally smallest singular values."""
    spectra = spectra_of(source)
    return _drop_by_score(spectra, spectra, d, "sv")


def energy_scores(s):
    """Share of a layer's energy held by bases ``i`` and beyond.

    Equals ``1 - C'(i-1)`` where ``C'(i) = sum_{k<=i} s_k^2 / sum_j s_j^2`` is
    the accumulated energy ratio, so dropping the lowest scores first is the
    same as raising a per-layer accumulated-energy threshold.
    """
    s = np.asarray(s, dtype=np.float64)
    sq = s * s
    tot = sq.sum()
    if tot == 0:
        return np.zeros_like(s)
    tail = np.cumsum(sq[::-1])[::-1]
    return tail / tot


def accumulated_energy(s):
    sq = np.asarray(s, dtype=np.float64) ** 2
    tot = sq.sum()
    return np.cumsum(sq) / tot if tot > 0 else np.zeros_like(sq)


def select_energy(source, d):
    spectra = spectra_of(source)
    return _drop_by_score(spectra, [energy_scores(s) for s in spectra], d, "energy")


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def select_uniform(source, z):
    """``r = max(1, round(z * R))`` in every layer (halves round up)."""
    if not 0.0 < z <= 1.0:
        raise InvalidBudgetError(f"rank ratio must lie in (0, 1], got {z}")
    if hasattr(source, "full_ranks"):
        full = list(source.full_ranks)
    elif _is_rank_list(source):
        full = list(source)
    else:
        full = _full_ranks(spectra_of(source))
    ranks = tuple(max(1, min(R, _round_half_up(z * R))) for R in full)
    return RankAssignment(ranks, "uniform", Budget("z", z), d=sum(full) - sum(ranks))


def _is_rank_list(source):
    return isinstance(source, (list, tuple)) and all(isinstance(v, (int, np.integer)) for v in source)


def d_for_ratio(total_rank, n_layers, z):
    """``round((1 - z) * sum R)``, capped so every layer keeps one basis."""
    if not 0.0 < z <= 1.0:
        raise InvalidBudgetError(f"rank ratio must lie in (0, 1], got {z}")
    return min(_round_half_up((1.0 - z) * total_rank), total_rank - n_layers)


# --- accounting ----------------------------------------------------------


def factorized_params(m, n, r):
    return (m + n) * r


def layer_params(m, n, r):
    """Weights of one layer at rank ``r``: factorized only below break-even."""
    if r * (m + n) < m * n:
        return factorized_params(m, n, r)
    return m * n


def count_params_macs(model, ranks):
    """Weight parameters and multiply-accumulates at the given ranks.

    MACs sum ``P * H * W`` over layers, ``H x W`` being the output extent
    (1 x 1 for dense layers). Biases and BN parameters are not counted.
    ``ranks=None`` means full rank everywhere.
    """
    ranks = model.full_ranks if ranks is None else tuple(getattr(ranks, "ranks", ranks))
    if len(ranks) != model.n_layers:
        raise InvalidInputError(f"expected {model.n_layers} ranks, got {len(ranks)}")
    params = macs = 0
    for idx, (spec, r) in enumerate(zip(model.layers, ranks)):
        m, n = spec.matrix_shape
        p = layer_params(m, n, int(r))
        h, w = model.output_extent(idx)
        params += p
        macs += p * h * w
    return params, macs


# --- budgets -------------------------------------------------------------


def select(source, criterion, d=None, z=None):
    if criterion == "sv":
        return select_sv(source, d)
    if criterion == "energy":
        return select_energy(source, d)
    if criterion == "uniform":
        return select_uniform(source, z)
    raise InvalidInputError(f"unknown criterion {criterion!r}")


def budget_to_d(model, budget, criterion="sv", spectra=None):
    """Number of bases to drop so the model meets ``budget``.

    Rank ratios map directly. Parameter and MACs targets take the smallest
    ``d`` whose assignment fits, by bisection (cost is non-increasing in d).
    """
    if isinstance(budget, str):
        budget = Budget.parse(budget)
    spectra = spectra_of(model) if spectra is None else spectra
    total, n_layers = sum(len(s) for s in spectra), len(spectra)
    if budget.kind == "z":
        return d_for_ratio(total, n_layers, budget.value)
    if criterion == "uniform":
        raise InvalidInputError("uniform selection takes a rank ratio, not a basis count")
    slot = 0 if budget.kind == "params" else 1

    def cost(d):
        return count_params_macs(model, select(spectra, criterion, d=d).ranks)[slot]

    hi = total - n_layers
    if cost(hi) > budget.value:
        raise InvalidBudgetError(
            f"{budget} is below the smallest reachable size {cost(hi)} (all layers at rank 1)"
        )
    lo = 0
    if cost(lo) <= budget.value:
        return 0
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if cost(mid) <= budget.value:
            hi = mid
        else:
            lo = mid
    return hi


def _uniform_for_target(model, budget):
    slot = 0 if budget.kind == "params" else 1
    full = list(model.full_ranks)

    def cost(z):
        return count_params_macs(model, select_uniform(full, z).ranks)[slot]

    if cost(1e-12) > budget.value:
        raise InvalidBudgetError(f"{budget} is below the smallest reachable size {cost(1e-12)}")
    if cost(1.0) <= budget.value:
        return 1.0
    lo, hi = 1e-12, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if cost(mid) <= budget.value:
            lo = mid
        else:
            hi = mid
    return lo


def assign(model, criterion, budget, spectra=None):
    """Resolve ``budget`` under ``criterion`` into a :class:`RankAssignment`."""
    if isinstance(budget, str):
        budget = Budget.parse(budget)
    if criterion not in CRITERIA:
        raise InvalidInputError(f"unknown criterion {criterion!r}")
    if criterion == "uniform":
        z = budget.value if budget.kind == "z" else _uniform_for_target(model, budget)
        ra = select_uniform(list(model.full_ranks), z)
        return RankAssignment(ra.ranks, "uniform", budget, ra.d)
    spectra = spectra_of(model) if spectra is None else spectra
    d = budget_to_d(model, budget, criterion, spectra)
    ra = select(spectra, criterion, d=d)
    return RankAssignment(ra.ranks, criterion, budget, d)
