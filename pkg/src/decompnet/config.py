"""Run configuration files (YAML) and model construction from them.

Example::

    seed: 3
    out: runs/moons
    dataset: {source: two_moons, n: 1000, noise: 0.1, seed: 0}
    validation: {source: two_moons, n: 500, noise: 0.1, seed: 1}
    model: {hidden: [64, 64], activation: relu}
    train: {lam: 0.5, epochs: 50, lr: 0.05, batch_size: 64}

Command-line flags override the file; the file overrides built-in defaults.
"""
import math
from dataclasses import dataclass, field

import yaml

from . import network as net
from .errors import ConfigError, InvalidInputError
from .training import TrainConfig

TOP_KEYS = {"seed", "out", "dataset", "validation", "model", "train"}
MLP_KEYS = {"hidden", "activation", "bias", "batchnorm"}
CONV_KEYS = {"conv", "channels", "stride", "padding", "decomposition", "pool", "activation", "bias", "batchnorm"}
DENSE_KEYS = {"dense", "activation", "bias", "batchnorm"}


@dataclass
class RunConfig:
    dataset: dict
    model: dict
    train: TrainConfig = field(default_factory=TrainConfig)
    validation: dict = None
    seed: int = 0
    out: str = "run"

    def to_dict(self):
        return {
            "seed": self.seed,
            "out": self.out,
            "dataset": self.dataset,
            "validation": self.validation,
            "model": self.model,
            "train": self.train.to_dict(),
        }


def _source(value, what):
    from .data import parse_source

    if isinstance(value, str):
        return parse_source(value)
    if not isinstance(value, dict) or "source" not in value:
        raise ConfigError(f"{what} must be a mapping with a 'source' key or a 'kind:k=v' string")
    return dict(value)


def parse_config(text, overrides=None):
    """Parse YAML text into a validated :class:`RunConfig`.

    ``overrides`` maps top-level keys (``seed``, ``out``) or ``train.*``
    keys to values that win over the file.
    """
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(raw) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in ("dataset", "model"):
        if key not in raw:
            raise ConfigError(f"config is missing '{key}'")
    train = dict(raw.get("train") or {})
    seed = raw.get("seed", train.get("seed", 0))
    out = raw.get("out", "run")
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key == "seed":
            seed = val
        elif key == "out":
            out = val
        elif key.startswith("train."):
            train[key[6:]] = val
        else:
            raise ConfigError(f"unknown override {key!r}")
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    train["seed"] = seed
    model = raw["model"]
    if not isinstance(model, dict):
        raise ConfigError("model must be a mapping")
    _check_model(model)
    validation = raw.get("validation")
    return RunConfig(
        dataset=_source(raw["dataset"], "dataset"),
        model=model,
        train=TrainConfig.from_dict(train),
        validation=None if validation is None else _source(validation, "validation"),
        seed=seed,
        out=str(out),
    )


def load_config(path, overrides=None):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, overrides)


def _check_model(model):
    if "layers" in model:
        extra = set(model) - {"layers", "activation", "bias", "batchnorm"}
        if extra:
            raise ConfigError(f"unknown model keys: {sorted(extra)}")
        for i, layer in enumerate(model["layers"]):
            if not isinstance(layer, dict):
                raise ConfigError(f"model.layers[{i}] must be a mapping")
            keys = CONV_KEYS if "conv" in layer else DENSE_KEYS if "dense" in layer else None
            if keys is None:
                raise ConfigError(f"model.layers[{i}] needs a 'conv' or 'dense' key")
            if set(layer) - keys:
                raise ConfigError(f"model.layers[{i}]: unknown keys {sorted(set(layer) - keys)}")
    elif set(model) - MLP_KEYS:
        raise ConfigError(f"unknown model keys: {sorted(set(model) - MLP_KEYS)}")


def build_model(model, input_shape, n_classes, rng, meta=None):
    """Instantiate the architecture described by a config ``model`` mapping.

    A final dense softmax layer with ``n_classes`` outputs is appended.
    """
    _check_model(model)
    act = model.get("activation", "relu")
    bias = model.get("bias", True)
    bn = model.get("batchnorm", False)
    layers = []
    shape = tuple(input_shape)
    if "layers" not in model:
        sizes = [int(h) for h in model.get("hidden", [])]
        return net.mlp([math.prod(shape)] + sizes + [n_classes], rng, act, bias, bn, meta)
    try:
        for layer in model["layers"]:
            a = layer.get("activation", act)
            b = layer.get("bias", bias)
            n = layer.get("batchnorm", bn)
            if "conv" in layer:
                spec = net.conv(
                    layer["conv"], shape[-1], int(layer["channels"]), layer.get("stride", 1),
                    layer.get("padding", 0), layer.get("decomposition", "channel"), a, b, n,
                    layer.get("pool"),
                )
            else:
                spec = net.dense(math.prod(shape), int(layer["dense"]), a, b, n)
            layers.append(spec)
            _, shape = net.infer_shapes(layers, input_shape)
        layers.append(net.dense(math.prod(shape), n_classes, "softmax", bias, False))
        return net.NetworkModel.build(layers, input_shape, rng, meta)
    except (KeyError, TypeError, InvalidInputError) as exc:
        raise ConfigError(f"bad layer description: {exc}") from None
