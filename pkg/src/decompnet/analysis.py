"""Numerical checks of the layer-wise error, KL bound and Lipschitz claims,
and accuracy-vs-size sweeps."""
import math
from dataclasses import dataclass, field

import numpy as np

from . import network as net
from .errors import DegenerateInputError, InvalidBudgetError, InvalidInputError, UnsupportedModelError
from .linalg import spectral_norm, svd, truncate
from .ranks import assign, count_params_macs
from .training import evaluate

# allowance for round-off when comparing a KL value against its bound
KL_ROUNDOFF = 1e-12


# --- layer-wise error ----------------------------------------------------


@dataclass
class LayerErrorCurve:
    layer: int
    points: list  # (rank, mean squared error over the probe batch)
    max_residual: float = 0.0
    violations: int = 0


def layer_errors(w, x, ranks=None, factors=None):
    """Per-sample ``||y - y_hat(r)||^2`` and telescoping residuals for one layer.

    ``x`` is ``(N, P, m)``: N samples, P positions each (1 for dense layers).
    Returns ``(ranks, errors[N, len(ranks)], residuals[N, R-1])`` where
    ``residuals[:, r-1] = E(r) - E(r+1) - sum_p (v_{r+1}^T y_p)^2``.
    """
    f = svd(w) if factors is None else factors
    full = f.rank_limit
    ranks = list(range(1, full + 1)) if ranks is None else sorted(set(int(r) for r in ranks))
    y = x @ w
    errs = np.empty((x.shape[0], len(ranks)))
    for j, r in enumerate(ranks):
        wt = w if r == full else truncate(f, r)
        diff = y - x @ wt
        errs[:, j] = np.sum(diff * diff, axis=(1, 2))
    every = {}
    for r in range(1, full + 1):
        wt = w if r == full else truncate(f, r)
        diff = y - x @ wt
        every[r] = np.sum(diff * diff, axis=(1, 2))
    proj = np.einsum("npk,kr->npr", y, f.v)
    res = np.empty((x.shape[0], max(full - 1, 0)))
    for r in range(1, full):
        res[:, r - 1] = every[r] - every[r + 1] - np.sum(proj[:, :, r] ** 2, axis=1)
    return ranks, errs, res


def _layer_inputs(model, trace, idx):
    spec = model.layers[idx]
    x = trace.cache[idx]["cols"]
    n = trace.logits.shape[0]
    return x.reshape(n, -1 if spec.kind == "conv" else 1, x.shape[-1])


@dataclass
class Prop1Report:
    curves: list
    skipped: list = field(default_factory=list)

    @property
    def max_residual(self):
        return max((c.max_residual for c in self.curves), default=0.0)

    @property
    def violations(self):
        return sum(c.violations for c in self.curves)


def check_prop1(model, batch, ranks=None, tol=1e-10):
    """Layer-wise error curves on a probe batch.

    ``ranks`` optionally restricts the grid (same list for every layer,
    clipped to each layer's full rank). Spatially decomposed conv layers are
    skipped: their decomposed matrix is not the matrix applied to inputs.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.shape[0] == 0:
        raise InvalidInputError("probe batch is empty")
    trace = net.forward_full(model, batch)
    report = Prop1Report([])
    for idx, spec in enumerate(model.layers):
        if spec.kind == "conv" and spec.decomposition == "spatial":
            report.skipped.append(idx)
            continue
        x = _layer_inputs(model, trace, idx)
        grid = None if ranks is None else [r for r in ranks if 1 <= r <= spec.full_rank]
        rs, errs, res = layer_errors(model.weights[idx], x, grid)
        step = np.diff(errs, axis=1)
        curve = LayerErrorCurve(
            idx,
            [(r, float(e)) for r, e in zip(rs, errs.mean(axis=0))],
            float(np.abs(res).max(initial=0.0)),
            int(np.sum(step > tol)),
        )
        report.curves.append(curve)
    return report


# --- KL bound ------------------------------------------------------------


def _require_bound_class(model):
    for idx, spec in enumerate(model.layers):
        last = idx == model.n_layers - 1
        if spec.kind != "dense" or spec.has_batchnorm:
            raise UnsupportedModelError(f"layer {idx}: the KL bound needs dense layers without batch norm")
        if not last and spec.activation not in ("relu", "identity"):
            raise UnsupportedModelError(f"layer {idx}: hidden activation must be 1-Lipschitz")


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def kl_divergence(logits_p, logits_q):
    """Row-wise ``KL(p || q)`` for softmax(logits) pairs."""
    lp, lq = log_softmax(logits_p), log_softmax(logits_q)
    return np.sum(np.exp(lp) * (lp - lq), axis=1)


@dataclass
class Prop2Report:
    kl: np.ndarray
    bound: np.ndarray

    @property
    def slack(self):
        return self.bound - self.kl

    @property
    def violations(self):
        return int(np.sum(self.kl > self.bound + KL_ROUNDOFF))


def check_prop2(model, ranks, batch):
    """Per-sample ``KL(p || p_tilde)`` against the layer-wise error bound.

    Spectral norms are those of the full weight matrices (equal to the
    truncated ones, since truncation keeps the top singular value).
    Biases are allowed: they cancel in every difference the bound uses.
    """
    _require_bound_class(model)
    ranks = net._check_ranks(model, ranks)
    full = net.forward_full(model, batch, bn="batch")
    mats, _ = net.lowrank_weights(model, ranks)
    low = net.run(model, mats, batch, bn="batch")
    norms_sq = [spectral_norm(w) ** 2 for w in model.weights]
    total = np.zeros(full.logits.shape[0])
    for idx in range(model.n_layers):
        x = full.xs[idx].reshape(full.xs[idx].shape[0], -1)
        diff = x @ (model.weights[idx] - mats[idx])
        err = np.sum(diff * diff, axis=1)
        total += err * math.prod(norms_sq[idx + 1:])
    bound = np.sqrt(2.0 * total)
    kl = kl_divergence(full.logits, low.logits)
    return Prop2Report(kl, bound)


# --- Lipschitz constants -------------------------------------------------


@dataclass
class LipschitzReport:
    omega: list
    omega_hat: list
    big_omega: list
    big_omega_hat: list
    used_samples: list

    def rows(self):
        out = []
        for idx in range(len(self.omega)):
            out.append({
                "layer": idx,
                "omega": self.omega[idx],
                "omega_hat": self.omega_hat[idx],
                "Omega": self.big_omega[idx],
                "Omega_hat": self.big_omega_hat[idx],
                "samples": self.used_samples[idx],
            })
        return out


def _linear_only(model, idx, h, mat):
    spec = model.layers[idx]
    if spec.kind == "dense":
        return h.reshape(h.shape[0], -1) @ mat
    k = spec.kernel
    cols = net.im2col(h, k.k_h, k.k_w, k.stride, spec.padding)
    return (cols @ mat).reshape(h.shape[0], -1)


def lipschitz_report(model, ranks, data):
    """Theoretical and empirical per-layer Lipschitz constants.

    ``omega[l]`` is the spectral norm of the executed (channel-form)
    truncated matrix, times ``sqrt(ceil(k_h/s) * ceil(k_w/s))`` for conv
    layers. ``omega_hat[l]`` is the largest observed ratio
    ``||W_l^T (phi(y) - phi(y~))|| / ||y - y~||`` over samples whose
    previous-layer outputs differ; it is NaN for the first layer and for
    layers where no sample qualifies. ``Omega[l]`` multiplies ``omega[j]``
    over ``j > l`` (the last layer gets the empty product, 1).
    """
    if model.has_batchnorm:
        raise UnsupportedModelError("Lipschitz analysis needs a model without batch norm")
    for idx, spec in enumerate(model.layers[:-1]):
        if spec.activation not in ("relu", "identity"):
            raise UnsupportedModelError(f"layer {idx}: hidden activation must be 1-Lipschitz")
    data = np.asarray(data, dtype=np.float64)
    if data.shape[0] == 0:
        raise InvalidInputError("dataset is empty")
    ranks = net._check_ranks(model, ranks)
    full = net.forward_full(model, data)
    mats, _ = net.lowrank_weights(model, ranks)
    low = net.run(model, mats, data)
    omega, omega_hat, used = [], [], []
    for idx, spec in enumerate(model.layers):
        wx = low.mats[idx]
        factor = 1.0
        if spec.kind == "conv":
            k = spec.kernel
            factor = math.sqrt(math.ceil(k.k_h / k.stride) * math.ceil(k.k_w / k.stride))
        omega.append(spectral_norm(wx) * factor)
        if idx == 0:
            omega_hat.append(float("nan"))
            used.append(0)
            continue
        n = data.shape[0]
        den = np.linalg.norm((full.zs[idx - 1] - low.zs[idx - 1]).reshape(n, -1), axis=1)
        num = np.linalg.norm(
            _linear_only(model, idx, full.outs[idx - 1], wx) - _linear_only(model, idx, low.outs[idx - 1], wx),
            axis=1,
        )
        ok = den > 0
        used.append(int(ok.sum()))
        omega_hat.append(float(np.max(num[ok] / den[ok])) if ok.any() else float("nan"))
    if not any(used):
        raise DegenerateInputError("full- and low-rank activations agree on every sample and layer")
    big = [math.prod(omega[idx + 1:]) for idx in range(len(omega))]
    big_hat = [math.prod(omega_hat[idx + 1:]) for idx in range(len(omega))]
    return LipschitzReport(omega, omega_hat, big, big_hat, used)


# --- sweeps --------------------------------------------------------------

TRADEOFF_COLUMNS = [
    "budget", "criterion", "status", "d", "ranks", "params", "macs",
    "loss", "accuracy", "mean_kl", "mean_kl_bound",
]


def tradeoff_sweep(model, budgets, dataset, criterion="sv", calibration=None):
    """One row per budget: size, accuracy and (for plain ReLU MLPs) the
    mean KL divergence and bound. Infeasible budgets give a marked row."""
    try:
        _require_bound_class(model)
        boundable = True
    except UnsupportedModelError:
        boundable = False
    spectra = [f.s for f in model.layer_factors()]
    rows = []
    for budget in budgets:
        row = dict.fromkeys(TRADEOFF_COLUMNS, "")
        row.update(budget=str(budget), criterion=criterion)
        try:
            ra = assign(model, criterion, budget, spectra)
        except InvalidBudgetError as exc:
            row.update(status=f"infeasible: {exc}")
            rows.append(row)
            continue
        params, macs = count_params_macs(model, ra.ranks)
        loss, acc = evaluate(model, ra.ranks, dataset, calibration)
        row.update(status="ok", d=ra.d, ranks=";".join(str(r) for r in ra.ranks),
                   params=params, macs=macs, loss=loss, accuracy=acc)
        if boundable:
            rep = check_prop2(model, ra.ranks, dataset.x)
            row.update(mean_kl=float(rep.kl.mean()), mean_kl_bound=float(rep.bound.mean()))
        rows.append(row)
    return rows
