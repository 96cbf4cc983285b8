"""Mixture density network: shared trunk, three heads, hand-derived gradients.

The network maps tendon displacements to a 3D Gaussian mixture. A shared
fully-connected trunk feeds three independent fully-connected heads:

  * weight head  -> n logits, softmax to mixture weights
  * mean head    -> 3n reals, reshaped to component means (meters)
  * factor head  -> 6n reals, the raw upper-triangular precision entries

Gradients of the reduced negative log-likelihood are computed by explicit
reverse-mode accumulation for this fixed topology; there is no autodiff
framework underneath.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InvalidInputError, ParseError, TrainingDivergedError
from .gmm import Gmm3, reduced_nll

MAGIC = "mdn-v1"


@dataclass
class DenseLayer:
    weights: np.ndarray   # (out, in)
    bias: np.ndarray      # (out,)
    activation: str       # "relu" or "linear"

    @property
    def out_size(self) -> int:
        return self.weights.shape[0]

    @property
    def in_size(self) -> int:
        return self.weights.shape[1]


@dataclass
class MdnParams:
    """All network parameters plus the component count and input width."""

    trunk: list
    weight_head: list
    mean_head: list
    u_head: list
    n_components: int
    n_inputs: int

    def layers(self):
        """All layers in canonical order (trunk, weight, mean, u heads)."""
        yield from self.trunk
        yield from self.weight_head
        yield from self.mean_head
        yield from self.u_head

    def validate(self) -> None:
        size = self.n_inputs
        for layer in self.trunk:
            if layer.in_size != size:
                raise ConfigurationError(
                    f"trunk layer expects {layer.in_size} inputs, previous width is {size}")
            size = layer.out_size
        trunk_out = size
        for head, final in ((self.weight_head, self.n_components),
                            (self.mean_head, 3 * self.n_components),
                            (self.u_head, 6 * self.n_components)):
            size = trunk_out
            for layer in head:
                if layer.in_size != size:
                    raise ConfigurationError(
                        f"head layer expects {layer.in_size} inputs, previous width is {size}")
                size = layer.out_size
            if size != final:
                raise ConfigurationError(
                    f"head produces {size} outputs, expected {final}")
        for layer in self.layers():
            if not (np.all(np.isfinite(layer.weights)) and np.all(np.isfinite(layer.bias))):
                raise InvalidInputError("network parameters must be finite")

    def copy(self) -> "MdnParams":
        def cp(layers):
            return [DenseLayer(l.weights.copy(), l.bias.copy(), l.activation) for l in layers]
        return MdnParams(cp(self.trunk), cp(self.weight_head), cp(self.mean_head),
                         cp(self.u_head), self.n_components, self.n_inputs)


@dataclass
class Dataset:
    """(config, cloud) pairs plus a split tag; ids track grid enumeration."""

    entries: list           # list of (config (m,), cloud (P, 3))
    split: str = "train"
    ids: list | None = None

    def __post_init__(self):
        for config, cloud in self.entries:
            if np.asarray(cloud).shape[0] == 0:
                raise InvalidInputError("dataset contains an empty point cloud")
        if self.ids is not None and len(self.ids) != len(self.entries):
            raise InvalidInputError("ids must parallel entries")


@dataclass
class TrainSettings:
    epochs: int = 200
    step_size: float = 1e-3
    batch_size: int = 16
    points_per_config: int = 512
    seed: int = 0
    heldout: Dataset | None = None


@dataclass
class TrainReport:
    train_nll: list = field(default_factory=list)
    heldout_nll: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)
    collapse_fraction: float = 0.0
    collapsed: bool = False


def _glorot(rng: np.random.Generator, out_size: int, in_size: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (in_size + out_size))
    return rng.uniform(-bound, bound, size=(out_size, in_size))


def init_params(n_inputs: int, n_components: int, trunk_sizes=(128, 128),
                head_hidden=(64,), seed: int = 0, mean_center=None) -> MdnParams:
    """Seed-controlled uniform initialization.

    ``mean_center`` (a workspace point) preloads the mean head's final bias
    so every component starts at the data centroid; this keeps the very
    first loss evaluations away from overflow territory.
    """
    rng = np.random.default_rng(seed)

    def dense_chain(in_size, hidden, out_size):
        layers = []
        size = in_size
        for h in hidden:
            layers.append(DenseLayer(_glorot(rng, h, size), np.zeros(h), "relu"))
            size = h
        layers.append(DenseLayer(_glorot(rng, out_size, size), np.zeros(out_size), "linear"))
        return layers

    trunk = []
    size = n_inputs
    for h in trunk_sizes:
        trunk.append(DenseLayer(_glorot(rng, h, size), np.zeros(h), "relu"))
        size = h
    params = MdnParams(
        trunk=trunk,
        weight_head=dense_chain(size, head_hidden, n_components),
        mean_head=dense_chain(size, head_hidden, 3 * n_components),
        u_head=dense_chain(size, head_hidden, 6 * n_components),
        n_components=n_components,
        n_inputs=n_inputs,
    )
    if mean_center is not None:
        center = np.asarray(mean_center, dtype=float).reshape(3)
        params.mean_head[-1].bias[:] = np.tile(center, n_components)
    params.validate()
    return params


def _apply(layer: DenseLayer, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    z = a @ layer.weights.T + layer.bias
    if layer.activation == "relu":
        return z, np.maximum(z, 0.0)
    return z, z


def _forward_chain(layers, a, cache):
    for layer in layers:
        z, out = _apply(layer, a)
        cache.append((a, z))
        a = out
    return a


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _forward_raw(params: MdnParams, configs: np.ndarray, caches=None):
    """Run trunk and heads on a (B, m) batch of configs.

    Returns per-config weights (B, n), means (B, n, 3) and raw factor
    entries (B, n, 6). When ``caches`` is a dict, pre-activation values are
    stored for the backward pass.
    """
    B = configs.shape[0]
    n = params.n_components
    record = caches is not None
    tc, wc, mc, uc = [], [], [], []
    trunk_out = _forward_chain(params.trunk, configs, tc)
    logits = _forward_chain(params.weight_head, trunk_out, wc)
    means = _forward_chain(params.mean_head, trunk_out, mc)
    u_raw = _forward_chain(params.u_head, trunk_out, uc)
    weights = _softmax_rows(logits)
    if record:
        caches.update(trunk=tc, weight=wc, mean=mc, u=uc, weights=weights)
    return weights, means.reshape(B, n, 3), u_raw.reshape(B, n, 6)


def mdn_forward(params: MdnParams, config: np.ndarray) -> Gmm3:
    """Evaluate the network at one tendon configuration."""
    config = np.asarray(config, dtype=float).reshape(-1)
    if config.shape[0] != params.n_inputs:
        raise ConfigurationError(
            f"config has {config.shape[0]} entries, network expects {params.n_inputs}")
    if not np.all(np.isfinite(config)):
        raise InvalidInputError("config must be finite")
    w, mu, u = _forward_raw(params, config[None, :])
    return Gmm3.from_arrays(w[0], mu[0], u[0])


def _factors_from_raw(u: np.ndarray) -> np.ndarray:
    """(..., 6) raw entries -> (..., 3, 3) upper-triangular factors."""
    shape = u.shape[:-1] + (3, 3)
    out = np.zeros(shape)
    d = np.exp(u[..., :3])
    out[..., 0, 0] = d[..., 0]
    out[..., 1, 1] = d[..., 1]
    out[..., 2, 2] = d[..., 2]
    out[..., 0, 1] = u[..., 3]
    out[..., 0, 2] = u[..., 4]
    out[..., 1, 2] = u[..., 5]
    return out


def _entry_loss_terms(weights, means, u_raw, points):
    """Stabilized per-point mixture terms for one batch entry.

    Returns (nll, responsibilities (P, n), diffs (P, n, 3), ydiff (P, n, 3),
    factors (n, 3, 3)).
    """
    factors = _factors_from_raw(u_raw)                     # (n, 3, 3)
    diffs = points[:, None, :] - means[None, :, :]         # (P, n, 3)
    ydiff = np.einsum("nij,pnj->pni", factors, diffs)
    quad = np.einsum("pni,pni->pn", ydiff, ydiff)
    terms = np.log(weights)[None, :] + u_raw[:, :3].sum(axis=1)[None, :] - 0.5 * quad
    tmax = terms.max(axis=1)
    e = np.exp(terms - tmax[:, None])
    denom = e.sum(axis=1)
    nll = float(-(tmax + np.log(denom)).mean())
    resp = e / denom[:, None]
    return nll, resp, diffs, ydiff, factors


def _check_batch(params: MdnParams, batch) -> list:
    if len(batch) == 0:
        raise InvalidInputError("batch is empty")
    prepared = []
    for config, cloud in batch:
        config = np.asarray(config, dtype=float).reshape(-1)
        cloud = np.asarray(cloud, dtype=float).reshape(-1, 3)
        if config.shape[0] != params.n_inputs:
            raise ConfigurationError(
                f"config has {config.shape[0]} entries, network expects {params.n_inputs}")
        if cloud.shape[0] == 0:
            raise InvalidInputError("batch contains an empty point cloud")
        prepared.append((config, cloud))
    return prepared


def mdn_loss(params: MdnParams, batch) -> float:
    """Mean reduced NLL over (config, cloud) batch entries."""
    batch = _check_batch(params, batch)
    configs = np.stack([c for c, _ in batch])
    w, mu, u = _forward_raw(params, configs)
    total = 0.0
    for e, (_, cloud) in enumerate(batch):
        nll, *_ = _entry_loss_terms(w[e], mu[e], u[e], cloud)
        total += nll
    return total / len(batch)


@dataclass
class LayerGrad:
    weights: np.ndarray
    bias: np.ndarray


@dataclass
class MdnGrad:
    trunk: list
    weight_head: list
    mean_head: list
    u_head: list

    def layers(self):
        yield from self.trunk
        yield from self.weight_head
        yield from self.mean_head
        yield from self.u_head


def _backward_chain(layers, cache, delta):
    """Propagate output-side gradients through a dense chain.

    ``delta`` is dLoss/d(chain output). Returns (per-layer grads,
    dLoss/d(chain input)).
    """
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        a_in, z = cache[i]
        if layers[i].activation == "relu":
            delta = delta * (z > 0)
        grads[i] = LayerGrad(delta.T @ a_in, delta.sum(axis=0))
        delta = delta @ layers[i].weights
    return grads, delta


def mdn_grad(params: MdnParams, batch) -> MdnGrad:
    """Exact gradient of :func:`mdn_loss` with respect to every parameter."""
    loss, grad = mdn_loss_and_grad(params, batch)
    return grad


def mdn_loss_and_grad(params: MdnParams, batch) -> tuple[float, MdnGrad]:
    batch = _check_batch(params, batch)
    B = len(batch)
    n = params.n_components
    configs = np.stack([c for c, _ in batch])
    caches = {}
    w, mu, u = _forward_raw(params, configs, caches)

    d_logits = np.zeros((B, n))
    d_means = np.zeros((B, n, 3))
    d_u = np.zeros((B, n, 6))
    total = 0.0
    for e, (_, cloud) in enumerate(batch):
        P = cloud.shape[0]
        nll, resp, diffs, ydiff, factors = _entry_loss_terms(w[e], mu[e], u[e], cloud)
        total += nll
        scale = 1.0 / (B * P)
        # d nll / d t_i = -resp_i for each point; t_i = log w_i + sum(diag u)
        # - 0.5 ||Ubar (x - mu)||^2.
        resp_sum = resp.sum(axis=0)                         # (n,)
        d_logits[e] = scale * (P * w[e] - resp_sum)
        # mean: d t / d mu = Ubar^T ydiff, so d nll / d mu = -resp Ubar^T y
        uty = np.einsum("nji,pnj->pni", factors, ydiff)     # Ubar^T y, (P, n, 3)
        d_means[e] = -scale * np.einsum("pn,pni->ni", resp, uty)
        # factor entries: off-diagonal (j,k) gets resp * y_j * diff_k;
        # diagonal j gets resp * (y_j * diff_j * exp(u_jj) - 1).
        ryd = scale * np.einsum("pn,pni,pnk->nik", resp, ydiff, diffs)  # (n, 3, 3)
        expdiag = np.exp(u[e][:, :3])
        d_u[e, :, 0] = ryd[:, 0, 0] * expdiag[:, 0] - scale * resp_sum
        d_u[e, :, 1] = ryd[:, 1, 1] * expdiag[:, 1] - scale * resp_sum
        d_u[e, :, 2] = ryd[:, 2, 2] * expdiag[:, 2] - scale * resp_sum
        d_u[e, :, 3] = ryd[:, 0, 1]
        d_u[e, :, 4] = ryd[:, 0, 2]
        d_u[e, :, 5] = ryd[:, 1, 2]

    wg, d_trunk_w = _backward_chain(params.weight_head, caches["weight"], d_logits)
    mg, d_trunk_m = _backward_chain(params.mean_head, caches["mean"], d_means.reshape(B, 3 * n))
    ug, d_trunk_u = _backward_chain(params.u_head, caches["u"], d_u.reshape(B, 6 * n))
    tg, _ = _backward_chain(params.trunk, caches["trunk"], d_trunk_w + d_trunk_m + d_trunk_u)
    return total / B, MdnGrad(tg, wg, mg, ug)


def detect_mode_collapse(g: Gmm3, epsilon_w: float = 1e-3) -> bool:
    """True iff any mixture weight is strictly below ``epsilon_w``."""
    return bool(np.any(g.weights < epsilon_w))


def _adam_state(params: MdnParams):
    return [(np.zeros_like(l.weights), np.zeros_like(l.bias),
             np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in params.layers()]


def _heldout_nll(params: MdnParams, entries) -> float:
    return mdn_loss(params, entries)


def train(init: MdnParams, data: Dataset, settings: TrainSettings) -> tuple[MdnParams, TrainReport]:
    """Adam-driven minimization of the reduced NLL over mini-batches.

    Every epoch re-subsamples ``points_per_config`` points from each
    config's cloud and reshuffles the mini-batch order; both streams come
    from the single settings seed, so a rerun is bit-identical.
    """
    if len(data.entries) == 0:
        raise InvalidInputError("training dataset is empty")
    params = init.copy()
    params.validate()
    report = TrainReport()
    rng = np.random.default_rng(np.random.SeedSequence([settings.seed, 0x7261]))
    heldout_entries = None
    if settings.heldout is not None and settings.heldout.entries:
        h_rng = np.random.default_rng(np.random.SeedSequence([settings.seed, 0x6865]))
        heldout_entries = [
            (cfg, _subsample(cloud, settings.points_per_config, h_rng))
            for cfg, cloud in settings.heldout.entries
        ]

    beta1, beta2, eps = 0.9, 0.999, 1e-8
    state = _adam_state(params)
    step_count = 0
    n_entries = len(data.entries)

    for epoch in range(settings.epochs):
        t0 = time.perf_counter()
        epoch_points = [
            _subsample(cloud, settings.points_per_config, rng)
            for _, cloud in data.entries
        ]
        order = rng.permutation(n_entries)
        epoch_losses = []
        for lo in range(0, n_entries, settings.batch_size):
            chosen = order[lo:lo + settings.batch_size]
            batch = [(data.entries[i][0], epoch_points[i]) for i in chosen]
            loss, grad = mdn_loss_and_grad(params, batch)
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch)
            epoch_losses.append(loss)
            step_count += 1
            bc1 = 1.0 - beta1 ** step_count
            bc2 = 1.0 - beta2 ** step_count
            for layer, g, (mw, mb, vw, vb) in zip(params.layers(), grad.layers(), state):
                mw *= beta1; mw += (1 - beta1) * g.weights
                mb *= beta1; mb += (1 - beta1) * g.bias
                vw *= beta2; vw += (1 - beta2) * g.weights ** 2
                vb *= beta2; vb += (1 - beta2) * g.bias ** 2
                layer.weights -= settings.step_size * (mw / bc1) / (np.sqrt(vw / bc2) + eps)
                layer.bias -= settings.step_size * (mb / bc1) / (np.sqrt(vb / bc2) + eps)
        report.train_nll.append(float(np.mean(epoch_losses)))
        if heldout_entries is not None:
            report.heldout_nll.append(_heldout_nll(params, heldout_entries))
        report.epoch_seconds.append(time.perf_counter() - t0)

    probe = settings.heldout if heldout_entries is not None else data
    flags = [detect_mode_collapse(mdn_forward(params, cfg)) for cfg, _ in probe.entries]
    report.collapse_fraction = float(np.mean(flags)) if flags else 0.0
    report.collapsed = report.collapse_fraction >= 0.5
    return params, report


def _subsample(cloud: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    cloud = np.asarray(cloud)
    if cloud.shape[0] <= count:
        return cloud
    idx = rng.choice(cloud.shape[0], size=count, replace=False)
    return cloud[idx]


# ---------------------------------------------------------------------------
# Persistence: plain-text model files.
# ---------------------------------------------------------------------------

def save_params(params: MdnParams) -> bytes:
    """Serialize to the text model format (17 significant digits)."""
    params.validate()
    trunk_sizes = ",".join(str(l.out_size) for l in params.trunk)
    head_hidden = ",".join(str(l.out_size) for l in params.weight_head[:-1])
    for head in (params.mean_head, params.u_head):
        hh = ",".join(str(l.out_size) for l in head[:-1])
        if hh != head_hidden:
            raise ConfigurationError("model file requires identical hidden sizes across heads")
    lines = [MAGIC,
             f"m={params.n_inputs}",
             f"n={params.n_components}",
             f"trunk={trunk_sizes}",
             f"heads={head_hidden}"]
    for layer in params.layers():
        lines.append(f"layer {layer.out_size} {layer.in_size}")
        flat = np.concatenate([layer.weights.reshape(-1), layer.bias])
        for lo in range(0, flat.size, 8):
            lines.append(" ".join(f"{v:.17g}" for v in flat[lo:lo + 8]))
    return ("\n".join(lines) + "\n").encode()


class _Tokens:
    """Whitespace tokenizer that remembers byte offsets for error reports."""

    def __init__(self, data: bytes):
        self.text = data.decode("utf-8", errors="strict")
        self.pos = 0

    def next_line(self) -> str:
        end = self.text.find("\n", self.pos)
        if end < 0:
            if self.pos >= len(self.text):
                raise ParseError("unexpected end of file", self.pos)
            end = len(self.text)
        line = self.text[self.pos:end]
        self.pos = end + 1
        return line

    def floats(self, count: int) -> np.ndarray:
        out = np.empty(count)
        got = 0
        while got < count:
            start = self.pos
            line = self.next_line()
            for tok in line.split():
                if got >= count:
                    raise ParseError("more values than the declared shape holds", start)
                try:
                    out[got] = float(tok)
                except ValueError:
                    raise ParseError(f"malformed real value {tok!r}", start) from None
                got += 1
        return out


def load_params(data: bytes) -> MdnParams:
    """Parse a model file; raises :class:`ParseError` with a byte offset."""
    toks = _Tokens(data)
    start = toks.pos
    if toks.next_line().strip() != MAGIC:
        raise ParseError(f"missing '{MAGIC}' header", start)

    def int_field(name):
        at = toks.pos
        line = toks.next_line().strip()
        if not line.startswith(name + "="):
            raise ParseError(f"expected '{name}=' line", at)
        try:
            return [int(v) for v in line[len(name) + 1:].split(",") if v != ""]
        except ValueError:
            raise ParseError(f"malformed '{name}=' line", at) from None

    m = int_field("m")[0]
    n = int_field("n")[0]
    trunk_sizes = int_field("trunk")
    head_hidden = int_field("heads")

    def read_layer(expect_out, expect_in, activation):
        at = toks.pos
        parts = toks.next_line().split()
        if len(parts) != 3 or parts[0] != "layer":
            raise ParseError("expected 'layer <rows> <cols>' line", at)
        try:
            rows, cols = int(parts[1]), int(parts[2])
        except ValueError:
            raise ParseError("malformed layer dimensions", at) from None
        if rows != expect_out or cols != expect_in:
            raise ConfigurationError(
                f"layer declared {rows}x{cols}, header implies {expect_out}x{expect_in}")
        vals = toks.floats(rows * cols + rows)
        return DenseLayer(vals[:rows * cols].reshape(rows, cols), vals[rows * cols:], activation)

    def read_chain(in_size, hidden, out_size):
        layers = []
        size = in_size
        for h in hidden:
            layers.append(read_layer(h, size, "relu"))
            size = h
        layers.append(read_layer(out_size, size, "linear"))
        return layers

    trunk = []
    size = m
    for h in trunk_sizes:
        trunk.append(read_layer(h, size, "relu"))
        size = h
    trunk_out = size
    params = MdnParams(
        trunk=trunk,
        weight_head=read_chain(trunk_out, head_hidden, n),
        mean_head=read_chain(trunk_out, head_hidden, 3 * n),
        u_head=read_chain(trunk_out, head_hidden, 6 * n),
        n_components=n,
        n_inputs=m,
    )
    tail = toks.text[toks.pos:].strip()
    if tail:
        raise ParseError("trailing data after final layer", toks.pos)
    params.validate()
    return params
