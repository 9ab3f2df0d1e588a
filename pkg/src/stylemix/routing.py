"""Noisy top-k gating and sparse expert combination.

The gating network scores each expert with a small convolutional trunk
(shared between the clean-logit head and the noise-scale head), adds
seeded standard-normal noise scaled by a softplus of a learned
projection, keeps the top-k logits and softmaxes them so that masked
entries get exactly zero weight. The combined output is the
weight-averaged sum of the selected experts only; the dense ensemble
baseline averages all experts uniformly.

Functions here take and return :class:`~stylemix.numcore.Tensor`
values; wrapping into the embedding types happens one layer up in
:mod:`stylemix.experts`. Per-sample entry points mirror the batched
ones (the trainer uses the batched path, tests pin both to each other).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numcore as nc
from .exceptions import ConfigError, DimensionError, EmptyInputError
from .numcore import Tensor


@dataclass
class GatingConfig:
    """Expert count, sparsity levels and router hyperparameters."""

    n_experts: int
    k_train: int = 1
    k_infer: int = 1
    noisy: bool = True
    router_channels: tuple[int, ...] = (12, 12)
    router_kernel_width: int = 3
    # When False, the softplus noise scale is treated as a constant in
    # backward, so w_noise only shapes the noise, never receives grads.
    noise_grad: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_experts < 1:
            raise ConfigError(f"n_experts must be >= 1, got {self.n_experts}")
        for name in ("k_train", "k_infer"):
            k = getattr(self, name)
            if not 1 <= k <= self.n_experts:
                raise ConfigError(
                    f"{name}={k} outside [1, n_experts={self.n_experts}]"
                )
        if not self.router_channels:
            raise ConfigError("router_channels must name at least one layer")
        if self.router_kernel_width < 1:
            raise ConfigError("router_kernel_width must be >= 1")


@dataclass
class RouterParams:
    """Trainable gating-network parameters.

    A stack of same-padded 1-D convolutions, mean-pooled over frames,
    feeds two heads: an affine map to the n clean logits and a bias-free
    noise matrix (the per-expert noise scale before softplus).
    """

    conv_stack: list[tuple[Tensor, Tensor]]
    final_w: Tensor
    final_b: Tensor
    w_noise: Tensor

    @classmethod
    def initialize(cls, in_channels: int, cfg: GatingConfig, seed: int) -> "RouterParams":
        rng = np.random.default_rng(seed)
        stack = []
        prev = in_channels
        w = cfg.router_kernel_width
        for ch in cfg.router_channels:
            fan_in = prev * w
            kern = Tensor(nc.uniform_init(rng, (ch, w, prev), fan_in), requires_grad=True)
            bias = Tensor(nc.uniform_init(rng, (ch,), fan_in), requires_grad=True)
            stack.append((kern, bias))
            prev = ch
        n = cfg.n_experts
        final_w = Tensor(nc.uniform_init(rng, (prev, n), prev), requires_grad=True)
        final_b = Tensor(nc.uniform_init(rng, (n,), prev), requires_grad=True)
        w_noise = Tensor(nc.uniform_init(rng, (prev, n), prev), requires_grad=True)
        return cls(stack, final_w, final_b, w_noise)

    @property
    def hidden_dim(self) -> int:
        return self.final_w.shape[0]

    @property
    def n_experts(self) -> int:
        return self.final_w.shape[1]

    def named_parameters(self, prefix: str = "router") -> list[tuple[str, Tensor]]:
        out = []
        for i, (kern, bias) in enumerate(self.conv_stack):
            out.append((f"{prefix}.conv{i}.kernels", kern))
            out.append((f"{prefix}.conv{i}.bias", bias))
        out.append((f"{prefix}.final.w", self.final_w))
        out.append((f"{prefix}.final.b", self.final_b))
        out.append((f"{prefix}.w_noise", self.w_noise))
        return out

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.named_parameters())


class NoiseSource:
    """Standard-normal draws for the gate, with three modes.

    ``train`` samples from a seeded generator, ``eval`` always emits
    zeros (so noisy logits equal clean logits exactly), and ``replay``
    consumes a fixed list of draws, which makes the noisy path
    reproducible enough for finite-difference checks.
    """

    def __init__(self, mode: str, rng: np.random.Generator | None = None,
                 draws: Sequence[np.ndarray] | None = None):
        if mode not in ("train", "eval", "replay"):
            raise ConfigError(f"unknown noise mode {mode!r}")
        self.mode = mode
        self._rng = rng
        self._draws = list(draws) if draws is not None else []
        self._cursor = 0

    @classmethod
    def training(cls, seed: int) -> "NoiseSource":
        return cls("train", rng=np.random.default_rng(seed))

    @classmethod
    def disabled(cls) -> "NoiseSource":
        return cls("eval")

    @classmethod
    def replay(cls, draws: Sequence) -> "NoiseSource":
        return cls("replay", draws=[np.asarray(d, dtype=np.float64) for d in draws])

    def draw(self, shape: tuple[int, ...]) -> np.ndarray:
        if self.mode == "eval":
            return np.zeros(shape)
        if self.mode == "train":
            return self._rng.standard_normal(shape)
        if self._cursor >= len(self._draws):
            raise ConfigError("replay noise source exhausted")
        d = self._draws[self._cursor]
        self._cursor += 1
        if d.size != int(np.prod(shape)):
            raise DimensionError(
                f"replay draw has {d.size} values, need shape {shape}"
            )
        return d.reshape(shape)


@dataclass
class GateDecision:
    """Routing outcome for one sample: logits, selection and weights."""

    clean_logits: Tensor
    noise_scale: Tensor
    noisy_logits: Tensor
    selected: tuple[int, ...]
    weights: Tensor


def top_k_mask(values: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k largest entries per row, lower index wins ties."""
    n = values.shape[-1]
    if not 1 <= k <= n:
        raise ConfigError(f"k={k} outside [1, {n}]")
    order = np.argsort(-values, axis=-1, kind="stable")
    mask = np.zeros(values.shape, dtype=bool)
    np.put_along_axis(mask, order[..., :k], True, axis=-1)
    return mask


def top_k_indices(values: np.ndarray, k: int) -> tuple[int, ...]:
    """Indices of the k largest entries of a vector, best first."""
    order = np.argsort(-values, kind="stable")
    return tuple(int(i) for i in order[:k])


def keep_top_k(v: Tensor, k: int) -> Tensor:
    """Preserve the k largest entries per row, set the rest to -inf.

    Boundary ties are broken toward the lower index. Gradients pass
    through kept entries only.
    """
    return nc.mask_keep(v, top_k_mask(v.data, k))


def _frames(x) -> Tensor:
    """Accept ReferenceFeatures or a raw frames tensor."""
    return x.frames if hasattr(x, "frames") else x


def router_forward_batch(features: Tensor, p: RouterParams) -> tuple[Tensor, Tensor]:
    """Conv trunk + mean pool + linear head over ``[B, T, F]`` features.

    Returns ``(clean_logits [B, n], pooled [B, hidden])``; the pooled
    vector also feeds the noise-scale head.
    """
    h = features
    for kern, bias in p.conv_stack:
        h = nc.relu(nc.conv1d(h, kern, 1, bias=bias))
    pooled = nc.mean_pool(h)
    clean = nc.linear(pooled, p.final_w, p.final_b)
    return clean, pooled


def router_forward(x, p: RouterParams) -> tuple[Tensor, Tensor]:
    """Per-sample router pass: ``[T, F] -> ([n], [hidden])``."""
    frames = _frames(x)
    if frames.data.ndim != 2:
        raise DimensionError(f"router input must be [T, F], got {frames.shape}")
    if frames.shape[0] == 0:
        raise EmptyInputError("router received an empty sequence")
    clean, pooled = router_forward_batch(nc.reshape(frames, (1,) + frames.shape), p)
    n = clean.shape[-1]
    return nc.reshape(clean, (n,)), nc.reshape(pooled, (pooled.shape[-1],))


@dataclass
class GateBatchResult:
    """Batched gating output: the sparse weight matrix plus diagnostics."""

    gates: Tensor                 # [B, n], exact zeros outside the selection
    clean_logits: Tensor          # [B, n]
    noise_scale: Tensor           # [B, n]
    noisy_logits: Tensor          # [B, n]
    keep: np.ndarray              # [B, n] bool


def gate_batch(features: Tensor, p: RouterParams, cfg: GatingConfig,
               noise: NoiseSource, k: int) -> GateBatchResult:
    """Noisy top-k gating over a batch of feature sequences."""
    if not 1 <= k <= cfg.n_experts:
        raise ConfigError(f"k={k} outside [1, n_experts={cfg.n_experts}]")
    clean, pooled = router_forward_batch(features, p)
    raw = nc.linear(pooled, p.w_noise)
    scl = nc.softplus(raw)
    if cfg.noisy:
        eps = noise.draw(clean.shape)
    else:
        eps = np.zeros(clean.shape)
    if cfg.noise_grad:
        noisy = nc.add(clean, nc.mul(Tensor(eps), scl))
    else:
        noisy = nc.add(clean, Tensor(eps * scl.data))
    keep = top_k_mask(noisy.data, k)
    # k == n keeps everything; masking would be an identity op
    masked = noisy if k == cfg.n_experts else nc.mask_keep(noisy, keep)
    gates = nc.softmax(masked)
    return GateBatchResult(gates, clean, scl, noisy, keep)


def noisy_gate(x, p: RouterParams, cfg: GatingConfig, noise: NoiseSource,
               k: int) -> GateDecision:
    """Per-sample gate: route one feature sequence to k experts."""
    frames = _frames(x)
    res = gate_batch(nc.reshape(frames, (1,) + frames.shape), p, cfg, noise, k)
    n = cfg.n_experts
    flat = lambda t: nc.reshape(t, (n,))
    selected = top_k_indices(res.noisy_logits.data[0], k)
    return GateDecision(
        clean_logits=flat(res.clean_logits),
        noise_scale=flat(res.noise_scale),
        noisy_logits=flat(res.noisy_logits),
        selected=selected,
        weights=flat(res.gates),
    )


def moe_forward(x, experts: Sequence, gate: GateDecision) -> Tensor:
    """Weighted sum of the selected experts only (sparse combination).

    Experts outside the selection are never evaluated; each expert's
    evaluation counter advances once per call.
    """
    if gate.weights.shape[-1] != len(experts):
        raise DimensionError(
            f"gate has {gate.weights.shape[-1]} weights for {len(experts)} experts"
        )
    total: Tensor | None = None
    for i in gate.selected:
        term = nc.mul(nc.take(gate.weights, i), experts[i].encode(x))
        total = term if total is None else nc.add(total, term)
    assert total is not None
    return total


def ensemble_forward(x, experts: Sequence) -> Tensor:
    """Uniform average of all expert outputs (the dense baseline)."""
    if len(experts) == 0:
        raise ConfigError("ensemble requires at least one expert")
    total: Tensor | None = None
    for e in experts:
        out = e.encode(x)
        total = out if total is None else nc.add(total, out)
    return nc.scale(total, 1.0 / len(experts))


def moe_forward_batch(features: Tensor, experts: Sequence, gates: Tensor,
                      segments=None) -> Tensor:
    """Batched sparse dispatch: rows go only to experts gating them.

    ``gates`` is ``[B, n]`` with exact zeros outside each row's
    selection. Expert outputs of shape ``[b_i, D]`` (or ``[b_i, S, D]``)
    are weighted by their gate values and scattered back into a
    ``[B, ...]`` output.
    """
    n_batch = features.shape[0]
    if gates.shape != (n_batch, len(experts)):
        raise DimensionError(
            f"gates shape {gates.shape} incompatible with batch {n_batch} "
            f"and {len(experts)} experts"
        )
    out: Tensor | None = None
    for i, expert in enumerate(experts):
        idx = np.nonzero(gates.data[:, i] > 0.0)[0]
        if idx.size == 0:
            continue
        dense = idx.size == n_batch
        sub = features if dense else Tensor(features.data[idx])
        values = expert.encode_batch(sub, segments=segments)
        if values.data.ndim == 3:                   # [b, S, D] -> summary [b, D]
            values = nc.mean_pool(values)
        w = nc.take_column(gates, i)
        if dense:
            contrib = nc.mul(w, values)
            out = contrib if out is None else nc.add(out, contrib)
        else:
            contrib = nc.mul(nc.gather_rows(w, idx), values)
            if out is None:
                out = nc.zeros((n_batch, values.shape[-1]))
            out = nc.scatter_add_rows(out, idx, contrib)
    if out is None:
        raise EmptyInputError("no expert received any sample")
    return out


def ensemble_forward_batch(features: Tensor, experts: Sequence,
                           segments=None) -> Tensor:
    """Batched uniform averaging over all experts (dense baseline)."""
    if len(experts) == 0:
        raise ConfigError("ensemble requires at least one expert")
    total: Tensor | None = None
    for e in experts:
        values = e.encode_batch(features, segments=segments)
        if values.data.ndim == 3:
            values = nc.mean_pool(values)
        total = values if total is None else nc.add(total, values)
    return nc.scale(total, 1.0 / len(experts))


def cv_squared(importance: Tensor) -> Tensor:
    """Squared coefficient of variation (population variance / mean^2)."""
    n = importance.size
    mu = nc.scale(nc.vsum(importance), 1.0 / n)
    cent = nc.sub(importance, mu)
    var = nc.scale(nc.vsum(nc.mul(cent, cent)), 1.0 / n)
    return nc.div(var, nc.mul(mu, mu))


def importance_loss(decisions: Sequence[GateDecision]) -> Tensor:
    """CV^2 of per-expert summed gate weights across a batch of decisions.

    Zero when every expert carries the same total weight; grows as usage
    concentrates. Off by default in training (coefficient 0).
    """
    if not decisions:
        raise EmptyInputError("importance_loss requires a nonempty batch")
    imp: Tensor | None = None
    for d in decisions:
        imp = d.weights if imp is None else nc.add(imp, d.weights)
    return cv_squared(imp)


def importance_loss_from_gates(gates: Tensor) -> Tensor:
    """Batched form of :func:`importance_loss` over a ``[B, n]`` gate matrix."""
    n_batch, n = gates.shape
    ones = Tensor(np.ones((1, n_batch)))
    imp = nc.reshape(nc.matmul(ones, gates), (n,))
    return cv_squared(imp)
