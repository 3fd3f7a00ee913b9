"""Layer graph, parameters, and full-/low-rank execution.

Layer ``l`` computes ``y = x @ W + b`` (so ``y = W^T x`` per sample), then
optional batch norm, activation and 2x2 pooling. Weights are stored in the
matrix form that gets decomposed: ``(in, out)`` for dense layers and the
channel or spatial matricization for conv layers. Image tensors are NHWC.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, InvalidRankError, NumericalFailureError
from .linalg import ConvKernelShape, dematricize, matricize, resolve_mode, svd
from .svdgrad import ClipConfig, lowrank_backward, lowrank_forward, rebalance_lambda

BN_EPS = 1e-5
ACTIVATIONS = ("relu", "identity", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int = 0
    out_dim: int = 0
    kernel: ConvKernelShape = None
    padding: int = 0
    decomposition: str = "channel"
    has_bias: bool = True
    has_batchnorm: bool = False
    activation: str = "relu"
    pool: str = None

    def __post_init__(self):
        if self.kind == "dense":
            if self.in_dim < 1 or self.out_dim < 1:
                raise InvalidInputError("dense layers need positive in_dim and out_dim")
        elif self.kind == "conv":
            if self.kernel is None:
                raise InvalidInputError("conv layers need a kernel shape")
            # 1x1 kernels always use the channel form
            object.__setattr__(self, "decomposition", resolve_mode(self.kernel, self.decomposition))
            if self.padding < 0:
                raise InvalidInputError("padding must be non-negative")
        else:
            raise InvalidInputError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {self.activation!r}")
        if self.pool not in (None, "max", "avg"):
            raise InvalidInputError(f"unknown pooling {self.pool!r}")

    @property
    def width(self):
        return self.out_dim if self.kind == "dense" else self.kernel.c_out

    @property
    def matrix_shape(self):
        if self.kind == "dense":
            return (self.in_dim, self.out_dim)
        return self.kernel.matrix_shape(self.decomposition)

    @property
    def full_rank(self):
        return min(self.matrix_shape)

    def to_dict(self):
        d = {
            "kind": self.kind,
            "has_bias": self.has_bias,
            "has_batchnorm": self.has_batchnorm,
            "activation": self.activation,
            "pool": self.pool,
        }
        if self.kind == "dense":
            d.update(in_dim=self.in_dim, out_dim=self.out_dim)
        else:
            k = self.kernel
            d.update(
                kernel=[k.k_h, k.k_w, k.c_in, k.c_out],
                stride=k.stride,
                padding=self.padding,
                decomposition=self.decomposition,
            )
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("kind") == "conv":
            kh, kw, ci, co = d.pop("kernel")
            d["kernel"] = ConvKernelShape(kh, kw, ci, co, d.pop("stride", 1))
        return cls(**d)


def dense(in_dim, out_dim, activation="relu", bias=True, batchnorm=False):
    return LayerSpec("dense", in_dim, out_dim, has_bias=bias, has_batchnorm=batchnorm, activation=activation)


def conv(k, c_in, c_out, stride=1, padding=0, decomposition="channel", activation="relu",
         bias=True, batchnorm=False, pool=None):
    kh, kw = (k, k) if isinstance(k, int) else k
    return LayerSpec(
        "conv",
        kernel=ConvKernelShape(kh, kw, c_in, c_out, stride),
        padding=padding,
        decomposition=decomposition,
        has_bias=bias,
        has_batchnorm=batchnorm,
        activation=activation,
        pool=pool,
    )


def _conv_out(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def infer_shapes(layers, input_shape):
    """Per-layer ``(in_shape, out_hw)``; raises on incompatible neighbours."""
    shape = tuple(input_shape)
    plan = []
    for idx, spec in enumerate(layers):
        if spec.activation == "softmax" and idx != len(layers) - 1:
            raise InvalidInputError("softmax is only allowed on the final layer")
        if spec.kind == "dense":
            flat = int(np.prod(shape))
            if flat != spec.in_dim:
                raise InvalidInputError(f"layer {idx}: expected {spec.in_dim} inputs, got {flat}")
            plan.append((shape, (1, 1)))
            shape = (spec.out_dim,)
            if spec.pool:
                raise InvalidInputError(f"layer {idx}: pooling needs a conv layer")
        else:
            k = spec.kernel
            if len(shape) != 3 or shape[2] != k.c_in:
                raise InvalidInputError(f"layer {idx}: expected NHWC input with {k.c_in} channels, got {shape}")
            oh = _conv_out(shape[0], k.k_h, k.stride, spec.padding)
            ow = _conv_out(shape[1], k.k_w, k.stride, spec.padding)
            if oh < 1 or ow < 1:
                raise InvalidInputError(f"layer {idx}: kernel larger than input")
            plan.append((shape, (oh, ow)))
            if spec.pool:
                oh, ow = oh // 2, ow // 2
                if oh < 1 or ow < 1:
                    raise InvalidInputError(f"layer {idx}: feature map too small to pool")
            shape = (oh, ow, k.c_out)
    if layers and layers[-1].kind != "dense" and layers[-1].activation == "softmax":
        raise InvalidInputError("the softmax output layer must be dense")
    return plan, shape


@dataclass
class NetworkModel:
    """Layer specs plus parameters.

    ``weights`` are always stored at full rank. ``theta`` holds one dict per
    layer (``bias``, ``gamma``, ``beta``) used by both execution modes.
    ``bn_stats`` holds post-training ``(mean, var)`` per BN layer and
    ``bn_ranks`` records the rank assignment they were computed for.
    """

    layers: list
    input_shape: tuple
    weights: list
    theta: list
    bn_stats: list = None
    bn_ranks: tuple = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.plan, self.output_shape = infer_shapes(self.layers, self.input_shape)
        if len(self.weights) != len(self.layers) or len(self.theta) != len(self.layers):
            raise InvalidInputError("one weight matrix and one theta dict per layer required")
        for idx, (spec, w) in enumerate(zip(self.layers, self.weights)):
            if w.shape != spec.matrix_shape:
                raise InvalidInputError(f"layer {idx}: weight shape {w.shape} != {spec.matrix_shape}")
        if self.bn_stats is None:
            self.bn_stats = [None] * len(self.layers)

    @classmethod
    def build(cls, layers, input_shape, rng, meta=None):
        """He-normal weights, zero biases, BN with gamma=1 and beta=0."""
        weights, theta = [], []
        for spec in layers:
            fan_in = spec.in_dim if spec.kind == "dense" else spec.kernel.k_h * spec.kernel.k_w * spec.kernel.c_in
            weights.append(rng.standard_normal(spec.matrix_shape) * np.sqrt(2.0 / fan_in))
            th = {}
            if spec.has_bias:
                th["bias"] = np.zeros(spec.width)
            if spec.has_batchnorm:
                th["gamma"] = np.ones(spec.width)
                th["beta"] = np.zeros(spec.width)
            theta.append(th)
        return cls(list(layers), input_shape, weights, theta, meta=dict(meta or {}))

    @property
    def n_layers(self):
        return len(self.layers)

    @property
    def full_ranks(self):
        return tuple(spec.full_rank for spec in self.layers)

    @property
    def has_batchnorm(self):
        return any(spec.has_batchnorm for spec in self.layers)

    @property
    def n_classes(self):
        return self.layers[-1].width

    def output_extent(self, idx):
        """``(H, W)`` of layer ``idx``'s output before pooling; (1, 1) for dense."""
        return self.plan[idx][1]

    def layer_factors(self):
        return [svd(w) for w in self.weights]

    def copy(self):
        return NetworkModel(
            list(self.layers),
            self.input_shape,
            [w.copy() for w in self.weights],
            [{k: v.copy() for k, v in th.items()} for th in self.theta],
            [None if st is None else (st[0].copy(), st[1].copy()) for st in self.bn_stats],
            self.bn_ranks,
            dict(self.meta),
        )


def mlp(sizes, rng, activation="relu", bias=True, batchnorm=False, meta=None):
    """Fully connected net; the last layer emits softmax logits."""
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        layers.append(dense(a, b, "softmax" if last else activation, bias, batchnorm and not last))
    return NetworkModel.build(layers, (sizes[0],), rng, meta)


# --- primitive ops -------------------------------------------------------


def im2col(x, k_h, k_w, stride, pad):
    """NHWC input -> ``(N*oh*ow, k_h*k_w*C)`` patch rows, ordered to match
    the channel matricization."""
    n, h, w, c = x.shape
    oh, ow = _conv_out(h, k_h, stride, pad), _conv_out(w, k_w, stride, pad)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    cols = np.empty((n, oh, ow, k_h, k_w, c))
    for i in range(k_h):
        for j in range(k_w):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :]
    return cols.reshape(n * oh * ow, k_h * k_w * c)


def col2im(cols, x_shape, k_h, k_w, stride, pad):
    n, h, w, c = x_shape
    oh, ow = _conv_out(h, k_h, stride, pad), _conv_out(w, k_w, stride, pad)
    cols = cols.reshape(n, oh, ow, k_h, k_w, c)
    xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c))
    for i in range(k_h):
        for j in range(k_w):
            xp[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += cols[:, :, :, i, j, :]
    return xp[:, pad:pad + h, pad:pad + w, :]


def _pool_forward(z, mode):
    n, h, w, c = z.shape
    h2, w2 = h // 2, w // 2
    win = z[:, :2 * h2, :2 * w2, :].reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4)
    if mode == "avg":
        return win.mean(axis=-1), None
    arg = win.argmax(axis=-1)
    return np.take_along_axis(win, arg[..., None], axis=-1)[..., 0], arg


def _pool_backward(dout, arg, in_shape, mode):
    n, h, w, c = in_shape
    h2, w2 = h // 2, w // 2
    if mode == "avg":
        dwin = np.repeat(dout[..., None] / 4.0, 4, axis=-1)
    else:
        dwin = np.zeros(dout.shape + (4,))
        np.put_along_axis(dwin, arg[..., None], dout[..., None], axis=-1)
    dz = np.zeros(in_shape)
    dz[:, :2 * h2, :2 * w2, :] = dwin.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c)
    return dz


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    n = logits.shape[0]
    loss = float(np.mean(logsum - z[np.arange(n), labels]))
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


# --- forward / backward --------------------------------------------------


@dataclass
class ForwardTrace:
    """Per-layer tensors from one pass.

    ``xs[l]`` is the layer input as fed to the matmul (flattened for dense),
    ``ys[l]`` the linear output ``x @ W + b``, ``zs[l]`` the value after batch
    norm (the pre-activation), ``outs[l]`` the layer output.
    """

    xs: list
    ys: list
    zs: list
    outs: list
    logits: np.ndarray
    probs: np.ndarray
    mats: list
    cache: list = field(default=None, repr=False)


def _exec_matrix(spec, w):
    """Matrix actually multiplied in forward: channel form for conv."""
    if spec.kind == "conv" and spec.decomposition == "spatial":
        return matricize(dematricize(w, spec.kernel, "spatial"), spec.kernel, "channel")
    return w


def _grad_to_storage(spec, g):
    if spec.kind == "conv" and spec.decomposition == "spatial":
        return matricize(dematricize(g, spec.kernel, "channel"), spec.kernel, "spatial")
    return g


def _check_batch(model, batch):
    batch = np.asarray(batch, dtype=np.float64)
    want = model.input_shape
    if batch.ndim == 2 and len(want) == 3 and batch.shape[1] == int(np.prod(want)):
        batch = batch.reshape((batch.shape[0],) + want)
    if batch.shape[1:] != want or batch.shape[0] < 1:
        raise InvalidInputError(f"batch shape {batch.shape} does not match input shape {want}")
    if not np.all(np.isfinite(batch)):
        raise InvalidInputError("batch contains non-finite values")
    return batch


def run(model, mats, batch, bn="auto"):
    """Forward pass with explicit per-layer matrices (storage form).

    ``bn`` selects batch-norm statistics: ``"batch"`` uses the statistics of
    this batch, ``"stored"`` uses ``model.bn_stats``, ``"auto"`` uses stored
    statistics where available and batch statistics otherwise.
    """
    h = _check_batch(model, batch)
    xs, ys, zs, outs, cache, exec_mats = [], [], [], [], [], []
    for idx, spec in enumerate(model.layers):
        th = model.theta[idx]
        wx = _exec_matrix(spec, mats[idx])
        exec_mats.append(wx)
        c = {"in_shape": h.shape}
        if spec.kind == "dense":
            x = h.reshape(h.shape[0], -1)
            y = x @ wx
            c["cols"] = x
        else:
            k = spec.kernel
            cols = im2col(h, k.k_h, k.k_w, k.stride, spec.padding)
            oh, ow = model.output_extent(idx)
            y = (cols @ wx).reshape(h.shape[0], oh, ow, k.c_out)
            c["cols"] = cols
            x = h
        if spec.has_bias:
            y = y + th["bias"]
        z = y
        if spec.has_batchnorm:
            axes = tuple(range(y.ndim - 1))
            stored = model.bn_stats[idx]
            use_stored = bn == "stored" or (bn == "auto" and stored is not None)
            if use_stored:
                if stored is None:
                    raise InvalidInputError(f"layer {idx}: no stored batch-norm statistics")
                mu, var = stored
            else:
                mu, var = y.mean(axis=axes), y.var(axis=axes)
            inv = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (y - mu) * inv
            z = th["gamma"] * xhat + th["beta"]
            c.update(bn_batch=not use_stored, xhat=xhat, inv=inv, axes=axes)
        if spec.activation == "relu":
            a = np.maximum(z, 0.0)
        else:
            a = z
        if spec.pool:
            c["pre_pool"] = a.shape
            a, c["arg"] = _pool_forward(a, spec.pool)
        xs.append(x)
        ys.append(y)
        zs.append(z)
        outs.append(a)
        cache.append(c)
        h = a
    logits = outs[-1].reshape(outs[-1].shape[0], -1)
    return ForwardTrace(xs, ys, zs, outs, logits, softmax(logits), exec_mats, cache)


def backward(model, trace, dlogits):
    """Backpropagate ``dL/dlogits``.

    Returns ``(weight_grads, theta_grads)``; weight gradients are with respect
    to the matrices passed to :func:`run`, in storage form.
    """
    wgrads = [None] * model.n_layers
    tgrads = [dict() for _ in range(model.n_layers)]
    d = dlogits.reshape(trace.outs[-1].shape)
    for idx in range(model.n_layers - 1, -1, -1):
        spec, c, th = model.layers[idx], trace.cache[idx], model.theta[idx]
        if spec.pool:
            d = _pool_backward(d, c["arg"], c["pre_pool"], spec.pool)
        if spec.activation == "relu":
            d = d * (trace.zs[idx] > 0)
        if spec.has_batchnorm:
            axes, xhat, inv = c["axes"], c["xhat"], c["inv"]
            tgrads[idx]["gamma"] = np.sum(d * xhat, axis=axes)
            tgrads[idx]["beta"] = np.sum(d, axis=axes)
            dxhat = d * th["gamma"]
            if c["bn_batch"]:
                cnt = int(np.prod([d.shape[a] for a in axes]))
                d = inv / cnt * (cnt * dxhat - dxhat.sum(axis=axes) - xhat * np.sum(dxhat * xhat, axis=axes))
            else:
                d = dxhat * inv
        if spec.has_bias:
            tgrads[idx]["bias"] = d.reshape(-1, d.shape[-1]).sum(axis=0)
        d2 = d.reshape(-1, d.shape[-1])
        gw = c["cols"].T @ d2
        wgrads[idx] = _grad_to_storage(spec, gw)
        if idx == 0:
            break
        dcols = d2 @ trace.mats[idx].T
        if spec.kind == "dense":
            d = dcols.reshape(c["in_shape"])
        else:
            k = spec.kernel
            d = col2im(dcols, c["in_shape"], k.k_h, k.k_w, k.stride, spec.padding)
    return wgrads, tgrads


def _check_ranks(model, ranks):
    ranks = tuple(getattr(ranks, "ranks", ranks))
    if len(ranks) != model.n_layers:
        raise InvalidRankError(f"expected {model.n_layers} ranks, got {len(ranks)}")
    for idx, (r, full) in enumerate(zip(ranks, model.full_ranks)):
        if not (isinstance(r, (int, np.integer)) and 1 <= r <= full):
            raise InvalidRankError(f"layer {idx}: rank {r} outside [1, {full}]")
    return ranks


def lowrank_weights(model, ranks, factors=None):
    """Truncated weights plus backward workspaces. Layers at full rank keep
    their original matrix (and a ``None`` workspace)."""
    ranks = _check_ranks(model, ranks)
    mats, spaces = [], []
    for idx, (w, r) in enumerate(zip(model.weights, ranks)):
        if r == model.layers[idx].full_rank:
            mats.append(w)
            spaces.append(None)
            continue
        wt, ws = lowrank_forward(w, r, None if factors is None else factors[idx])
        mats.append(wt)
        spaces.append(ws)
    return mats, spaces


def forward_full(model, batch, bn="auto"):
    return run(model, model.weights, batch, bn)


def forward_lowrank(model, ranks, batch, bn="auto", factors=None):
    mats, _ = lowrank_weights(model, ranks, factors)
    return run(model, mats, batch, bn)


@dataclass
class JointResult:
    loss: float
    loss_full: float
    loss_low: float
    weight_grads: list
    theta_grads: list
    lambdas: list


def joint_loss_and_grads(model, ranks, batch, labels, lam, eta, clip=ClipConfig(),
                         rebalance=True, factors=None):
    """Joint objective ``(1-lam)*L_full + lam*L_low + eta/2 * sum ||W||_F^2``.

    Weight gradients are ``(1-lam)*g_full + lam'*g_low + eta*W`` where ``lam'``
    is rebalanced per layer (unless ``rebalance`` is off). Theta gradients are
    the plain ``lam``-weighted mix. With ``lam == 0`` the low-rank path, and
    hence the SVD, is skipped entirely; ``ranks`` may then be ``None``.
    """
    if not 0.0 <= lam <= 1.0:
        raise InvalidInputError(f"lambda must lie in [0, 1], got {lam}")
    if eta < 0:
        raise InvalidInputError("eta must be non-negative")
    labels = np.asarray(labels, dtype=np.int64)
    full = run(model, model.weights, batch, bn="batch")
    loss_f, dlog = cross_entropy(full.logits, labels)
    if not np.isfinite(loss_f):
        raise NumericalFailureError("non-finite full-rank loss")
    gf, tf = backward(model, full, dlog)
    reg = 0.5 * sum(float(np.sum(w * w)) for w in model.weights)
    if lam == 0.0:
        wgrads = [g + eta * w for g, w in zip(gf, model.weights)]
        return JointResult(loss_f + eta * reg, loss_f, float("nan"), wgrads, tf, [0.0] * model.n_layers)

    mats, spaces = lowrank_weights(model, ranks, factors)
    low = run(model, mats, batch, bn="batch")
    loss_l, dlog_l = cross_entropy(low.logits, labels)
    if not np.isfinite(loss_l):
        raise NumericalFailureError("non-finite low-rank loss")
    gl_tilde, tl = backward(model, low, dlog_l)
    wgrads, lams = [], []
    for idx, (w, g_full, g_t, ws) in enumerate(zip(model.weights, gf, gl_tilde, spaces)):
        g_low = g_t.copy() if ws is None else lowrank_backward(ws, g_t, clip, layer=idx)
        lam_w = rebalance_lambda(lam, np.linalg.norm(g_full), np.linalg.norm(g_low)) if rebalance else lam
        lams.append(lam_w)
        wgrads.append((1.0 - lam) * g_full + lam_w * g_low + eta * w)
    tgrads = [
        {k: (1.0 - lam) * tf[idx][k] + lam * tl[idx][k] for k in tf[idx]}
        for idx in range(model.n_layers)
    ]
    loss = (1.0 - lam) * loss_f + lam * loss_l + eta * reg
    return JointResult(loss, loss_f, loss_l, wgrads, tgrads, lams)


def recalibrate_bn(model, ranks, data):
    """Recompute BN ``(mean, var)`` over the whole of ``data`` at ``ranks``.

    Statistics are exact population values: layer ``l`` is normalised with
    its final statistics before layer ``l+1``'s are measured. ``ranks=None``
    means full rank. gamma and beta are not touched.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.shape[0] == 0:
        raise InvalidInputError("cannot recalibrate batch norm on an empty dataset")
    if not model.has_batchnorm:
        return model.bn_stats
    if ranks is None:
        mats, key = model.weights, None
    else:
        mats, _ = lowrank_weights(model, ranks)
        key = _check_ranks(model, ranks)
        if key == model.full_ranks:
            key = None
    trace = run(model, mats, data, bn="batch")
    stats = []
    for idx, spec in enumerate(model.layers):
        if spec.has_batchnorm:
            y = trace.ys[idx]
            axes = tuple(range(y.ndim - 1))
            stats.append((y.mean(axis=axes), y.var(axis=axes)))
        else:
            stats.append(None)
    model.bn_stats = stats
    model.bn_ranks = key
    return stats
