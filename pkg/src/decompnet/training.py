"""Joint full-/low-rank training with random rank ratios, and evaluation.

Randomness comes from numpy's Philox4x32-10 counter-based generator.
A root ``SeedSequence(seed)`` is spawned into three independent streams:
weight initialisation, data shuffling and rank-ratio sampling.
"""
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import network as net
from .errors import ConfigError, InvalidInputError, NumericalFailureError
from .reports import write_csv
from .ranks import CRITERIA, d_for_ratio, select, select_uniform
from .svdgrad import DEFAULT_DELTA, ClipConfig

PROBE_Z = (0.05, 0.1, 0.25, 0.5, 1.0)


@dataclass
class TrainConfig:
    lam: float = 0.5
    alpha_l: float = 0.01
    alpha_u: float = 0.25
    eta: float = 5e-4
    batch_size: int = 128
    epochs: int = 200
    lr: float = 0.1
    # fractions of the run at which the rate is multiplied by lr_decay
    lr_milestones: tuple = (0.3, 0.6, 0.8)
    lr_decay: float = 0.2
    momentum: float = 0.9
    nesterov: bool = True
    criterion: str = "sv"
    delta: float = DEFAULT_DELTA
    rebalance: bool = True
    seed: int = 0
    probe_z: tuple = PROBE_Z
    checkpoint_every: int = 0

    def __post_init__(self):
        self.lr_milestones = tuple(self.lr_milestones)
        self.probe_z = tuple(self.probe_z)
        self.validate()

    def validate(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if not 0.0 < self.alpha_l < self.alpha_u <= 1.0:
            raise ConfigError(f"need 0 < alpha_l < alpha_u <= 1, got {self.alpha_l}, {self.alpha_u}")
        if self.eta < 0 or self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("eta >= 0, lr > 0, batch_size >= 1 and epochs >= 1 are required")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.criterion not in CRITERIA:
            raise ConfigError(f"criterion must be one of {CRITERIA}, got {self.criterion!r}")
        if any(not 0 < f < 1 for f in self.lr_milestones):
            raise ConfigError("lr milestones are fractions of the run in (0, 1)")
        if any(not 0 < z <= 1 for z in self.probe_z):
            raise ConfigError("probe rank ratios must lie in (0, 1]")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError(f"delta must lie in (0, 1), got {self.delta}")

    def milestone_epochs(self):
        return sorted({max(1, int(round(f * self.epochs))) for f in self.lr_milestones})

    def lr_at(self, epoch):
        """Learning rate for 0-based ``epoch``."""
        hits = sum(1 for m in self.milestone_epochs() if epoch >= m)
        return self.lr * self.lr_decay ** hits

    def to_dict(self):
        d = asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        d["probe_z"] = list(self.probe_z)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


def streams(seed):
    """Independent ``(init, shuffle, ratio)`` generators for one run."""
    children = np.random.SeedSequence(seed).spawn(3)
    return tuple(np.random.Generator(np.random.Philox(c)) for c in children)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    probe_z: tuple = ()

    @property
    def columns(self):
        return ["epoch", "lr", "loss_full", "loss_low", "z_mean", "z_min", "z_max"] + [
            f"acc_z{z:g}" for z in self.probe_z
        ]

    def to_csv(self, path):
        write_csv(path, self.columns, self.rows)


class NesterovSGD:
    """``buf = mu*buf + g``; ``p -= lr * (g + mu*buf)`` (or ``lr*buf`` without Nesterov)."""

    def __init__(self, momentum=0.9, nesterov=True):
        self.momentum = momentum
        self.nesterov = nesterov
        self.bufs = {}

    def update(self, key, param, grad, lr):
        buf = self.bufs.get(key)
        buf = grad.copy() if buf is None else self.momentum * buf + grad
        self.bufs[key] = buf
        step = grad + self.momentum * buf if self.nesterov else buf
        param -= lr * step


def apply_update(model, opt, result, lr):
    for idx, (w, g) in enumerate(zip(model.weights, result.weight_grads)):
        opt.update(("w", idx), w, g, lr)
    for idx, th in enumerate(model.theta):
        for k in sorted(th):
            opt.update((k, idx), th[k], result.theta_grads[idx][k], lr)


def sample_ranks(model, z, criterion, factors):
    spectra = [f.s for f in factors]
    if criterion == "uniform":
        return select_uniform(list(model.full_ranks), z).ranks
    d = d_for_ratio(sum(model.full_ranks), model.n_layers, z)
    return select(spectra, criterion, d=d).ranks


def train(model, dataset, config, validation=None, on_epoch=None):
    """Train ``model`` in place on ``dataset``; returns ``(model, TrainLog)``.

    Each step draws ``Z ~ U(alpha_l, alpha_u)``, picks ranks by dropping
    ``round((1-Z) * sum R)`` bases under ``config.criterion``, and takes one
    Nesterov step on the joint objective. With ``lam == 0`` no ratio is drawn
    and no SVD is computed. ``on_epoch(epoch, model)`` runs after each epoch.
    """
    if len(dataset) == 0:
        raise InvalidInputError("training set is empty")
    _, shuffle_rng, ratio_rng = streams(config.seed)
    clip = ClipConfig(config.delta)
    opt = NesterovSGD(config.momentum, config.nesterov)
    n = len(dataset)
    probes = config.probe_z if validation is not None else ()
    log = TrainLog(probe_z=probes)
    step = 0
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = shuffle_rng.permutation(n)
        lf, ll, zs = [], [], []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb, yb = dataset.x[idx], dataset.y[idx]
            ranks, factors = None, None
            if config.lam > 0:
                z = float(ratio_rng.uniform(config.alpha_l, config.alpha_u))
                zs.append(z)
                factors = model.layer_factors()
                ranks = sample_ranks(model, z, config.criterion, factors)
            try:
                res = net.joint_loss_and_grads(model, ranks, xb, yb, config.lam, config.eta, clip,
                                               config.rebalance, factors)
            except NumericalFailureError as exc:
                raise NumericalFailureError(str(exc), layer=exc.layer, step=step) from exc
            if not math.isfinite(res.loss):
                raise NumericalFailureError("non-finite training loss", step=step)
            apply_update(model, opt, res, lr)
            lf.append(res.loss_full)
            ll.append(res.loss_low)
            step += 1
        row = {
            "epoch": epoch + 1,
            "lr": lr,
            "loss_full": float(np.mean(lf)),
            "loss_low": float(np.mean(ll)) if zs else float("nan"),
            "z_mean": float(np.mean(zs)) if zs else float("nan"),
            "z_min": float(np.min(zs)) if zs else float("nan"),
            "z_max": float(np.max(zs)) if zs else float("nan"),
        }
        if probes:
            factors = model.layer_factors()
            for z in probes:
                ranks = sample_ranks(model, z, config.criterion, factors)
                _, acc = evaluate(model, ranks, validation, calibration=dataset)
                row[f"acc_z{z:g}"] = acc
        log.rows.append(row)
        if on_epoch is not None:
            on_epoch(epoch + 1, model)
    return model, log


def evaluate(model, ranks, dataset, calibration=None):
    """Mean cross-entropy and top-1 accuracy at ``ranks`` (``None`` = full).

    Batch-norm statistics are recomputed at these ranks first, on
    ``calibration`` when given and on ``dataset`` otherwise.
    """
    if len(dataset) == 0:
        raise InvalidInputError("evaluation set is empty")
    ranks = None if ranks is None else tuple(getattr(ranks, "ranks", ranks))
    if model.has_batchnorm:
        net.recalibrate_bn(model, ranks, (dataset if calibration is None else calibration).x)
    if ranks is None:
        trace = net.forward_full(model, dataset.x, bn="stored")
    else:
        trace = net.forward_lowrank(model, ranks, dataset.x, bn="stored")
    loss, _ = net.cross_entropy(trace.logits, dataset.y)
    acc = float(np.mean(trace.logits.argmax(axis=1) == dataset.y))
    return loss, acc
