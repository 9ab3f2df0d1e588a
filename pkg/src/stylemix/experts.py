"""Style expert encoders, the hierarchical stack, and the decoder analog.

Every expert in a layer shares one architecture (a small conv stack, a
resolution-specific pooling step, and a linear projection to the
embedding dimension) and differs only in parameter values. Levels of
the hierarchy encode the same reference sequence at three resolutions
(whole sequence, segments, frames) and each level routes through its
own gating network, independently of the others.

The decoder analog maps the per-level style summaries plus a content
vector to a target feature sequence, so the whole stack can be trained
jointly against a regression objective.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numcore as nc
from . import routing
from .exceptions import ConfigError, DimensionError, EmptyInputError
from .numcore import Tensor
from .routing import GateDecision, GatingConfig, NoiseSource, RouterParams

logger = logging.getLogger(__name__)

RESOLUTIONS = ("sequence", "segment", "frame")
VARIANTS = ("single", "ensemble", "moe")


@dataclass
class ReferenceFeatures:
    """A reference feature sequence ``[T, F]`` with optional segment ranges."""

    frames: Tensor
    segments: list[tuple[int, int]] | None = None

    def __post_init__(self):
        if self.frames.data.ndim != 2:
            raise DimensionError(f"frames must be [T, F], got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise EmptyInputError("reference needs at least one frame")
        if self.segments is not None:
            t_len = self.frames.shape[0]
            prev_end = 0
            for start, end in self.segments:
                if not (0 <= start < end <= t_len):
                    raise DimensionError(
                        f"segment ({start}, {end}) outside [0, {t_len})"
                    )
                if start < prev_end:
                    raise DimensionError("segments must be sorted and disjoint")
                prev_end = end


@dataclass
class StyleEmbedding:
    """A fixed-dimension style vector."""

    values: Tensor


def equal_segments(t_len: int, count: int) -> list[tuple[int, int]]:
    """Partition ``[0, t_len)`` into ``count`` near-equal ranges."""
    if count < 1 or count > t_len:
        raise ConfigError(f"cannot cut {t_len} frames into {count} segments")
    edges = np.linspace(0, t_len, count + 1).astype(int)
    return [(int(edges[i]), int(edges[i + 1])) for i in range(count)]


@dataclass(frozen=True)
class ExpertArch:
    """Architecture shared by all experts within one MoE layer."""

    in_channels: int
    conv_channels: tuple[int, ...] = (24, 24)
    kernel_width: int = 3
    embed_dim: int = 16
    pooling: str = "sequence"

    def __post_init__(self):
        if self.pooling not in RESOLUTIONS:
            raise ConfigError(f"unknown pooling mode {self.pooling!r}")
        if not self.conv_channels:
            raise ConfigError("expert needs at least one conv layer")

    def spec_json(self) -> str:
        """Canonical serialized form; byte-identical across layer peers."""
        return json.dumps({
            "in_channels": self.in_channels,
            "conv_channels": list(self.conv_channels),
            "kernel_width": self.kernel_width,
            "embed_dim": self.embed_dim,
            "pooling": self.pooling,
        }, sort_keys=True)


class StyleExpert:
    """One expert encoder: conv stack, resolution pooling, projection."""

    def __init__(self, arch: ExpertArch, conv_stack, proj_w: Tensor, proj_b: Tensor):
        self.arch = arch
        self.conv_stack = conv_stack
        self.proj_w = proj_w
        self.proj_b = proj_b
        self.eval_count = 0

    @classmethod
    def initialize(cls, arch: ExpertArch, seed: int) -> "StyleExpert":
        rng = np.random.default_rng(seed)
        stack = []
        prev = arch.in_channels
        w = arch.kernel_width
        for ch in arch.conv_channels:
            fan_in = prev * w
            stack.append((
                Tensor(nc.uniform_init(rng, (ch, w, prev), fan_in), requires_grad=True),
                Tensor(nc.uniform_init(rng, (ch,), fan_in), requires_grad=True),
            ))
            prev = ch
        proj_w = Tensor(nc.uniform_init(rng, (prev, arch.embed_dim), prev), requires_grad=True)
        proj_b = Tensor(nc.uniform_init(rng, (arch.embed_dim,), prev), requires_grad=True)
        return cls(arch, stack, proj_w, proj_b)

    def arch_spec(self) -> str:
        return self.arch.spec_json()

    def named_parameters(self, prefix: str = "expert") -> list[tuple[str, Tensor]]:
        out = []
        for i, (kern, bias) in enumerate(self.conv_stack):
            out.append((f"{prefix}.conv{i}.kernels", kern))
            out.append((f"{prefix}.conv{i}.bias", bias))
        out.append((f"{prefix}.proj.w", self.proj_w))
        out.append((f"{prefix}.proj.b", self.proj_b))
        return out

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    def encode_batch(self, features: Tensor, segments=None) -> Tensor:
        """Encode ``[B, T, F]`` to ``[B, D]``, ``[B, S, D]`` or ``[B, T, D]``."""
        h = features
        for kern, bias in self.conv_stack:
            h = nc.relu(nc.conv1d(h, kern, 1, bias=bias))
        if self.arch.pooling == "sequence":
            pooled = nc.mean_pool(h)
        elif self.arch.pooling == "segment":
            if not segments:
                raise EmptyInputError(
                    "segment pooling requires segment boundaries"
                )
            pooled = nc.segment_mean_pool(h, segments)
        else:
            pooled = h
        self.eval_count += features.shape[0]
        return nc.linear(pooled, self.proj_w, self.proj_b)

    def encode(self, x) -> Tensor:
        """Per-sample encode: ``[T, F] -> [D]`` (or ``[S, D]`` / ``[T, D]``)."""
        frames = x.frames if isinstance(x, ReferenceFeatures) else x
        segments = x.segments if isinstance(x, ReferenceFeatures) else None
        batched = self.encode_batch(
            nc.reshape(frames, (1,) + frames.shape), segments=segments
        )
        return nc.reshape(batched, batched.shape[1:])


def expert_forward(x: ReferenceFeatures, e: StyleExpert):
    """Spec-level expert pass, wrapping values into embeddings.

    Sequence pooling returns one :class:`StyleEmbedding`; segment and
    frame pooling return a list with one embedding per segment / frame.
    """
    values = e.encode(x)
    if values.data.ndim == 1:
        return StyleEmbedding(values)
    count = values.shape[0]
    dim = values.shape[1]
    return [
        StyleEmbedding(nc.reshape(nc.gather_rows(values, np.array([i])), (dim,)))
        for i in range(count)
    ]


@dataclass
class MoELevel:
    """One hierarchical level: its own gate, router and expert pool."""

    resolution: str
    gating: GatingConfig
    router: RouterParams
    experts: list[StyleExpert]

    def expert_evaluations(self) -> int:
        return sum(e.eval_count for e in self.experts)


@dataclass
class HierarchicalStyleMoE:
    levels: list[MoELevel]

    def reset_eval_counts(self) -> None:
        for level in self.levels:
            for e in level.experts:
                e.eval_count = 0


@dataclass
class DecoderParams:
    """Two-layer decoder from (content, style summaries) to a sequence."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    out_shape: tuple[int, int]

    @classmethod
    def initialize(cls, in_dim: int, hidden: int, out_shape: tuple[int, int],
                   seed: int) -> "DecoderParams":
        rng = np.random.default_rng(seed)
        out_dim = out_shape[0] * out_shape[1]
        return cls(
            w1=Tensor(nc.uniform_init(rng, (in_dim, hidden), in_dim), requires_grad=True),
            b1=Tensor(nc.uniform_init(rng, (hidden,), in_dim), requires_grad=True),
            w2=Tensor(nc.uniform_init(rng, (hidden, out_dim), hidden), requires_grad=True),
            b2=Tensor(nc.uniform_init(rng, (out_dim,), hidden), requires_grad=True),
            out_shape=out_shape,
        )

    def named_parameters(self, prefix: str = "decoder") -> list[tuple[str, Tensor]]:
        return [
            (f"{prefix}.w1", self.w1),
            (f"{prefix}.b1", self.b1),
            (f"{prefix}.w2", self.w2),
            (f"{prefix}.b2", self.b2),
        ]

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.named_parameters())


def _level_summary(output) -> Tensor:
    """Reduce a level output to one [D] vector for conditioning."""
    if isinstance(output, StyleEmbedding):
        return output.values
    if isinstance(output, Tensor):
        return output if output.data.ndim == 1 else nc.mean_pool(output)
    # list of embeddings from a segment/frame level
    parts = [nc.reshape(e.values, (1,) + e.values.shape) for e in output]
    return nc.mean_pool(nc.concat(parts, axis=0))


def condition_decoder(level_outputs: Sequence, content: Tensor,
                      dec: DecoderParams) -> Tensor:
    """Decode target sequences from content plus style summaries.

    With a 1-D content vector, level outputs may be embeddings or
    sequences of them and are mean-summarized per level. With a 2-D
    ``[B, C]`` content batch, each level output must already be a
    ``[B, D]`` summary tensor.
    """
    if content.data.ndim == 2:
        summaries = list(level_outputs)
        for s in summaries:
            if not isinstance(s, Tensor) or s.data.ndim != 2:
                raise DimensionError("batched decoding needs [B, D] summaries")
    else:
        summaries = [_level_summary(o) for o in level_outputs]
    inp = nc.concat([content] + summaries, axis=-1)
    if inp.shape[-1] != dec.w1.shape[0]:
        raise ConfigError(
            f"decoder expects input dim {dec.w1.shape[0]}, got {inp.shape[-1]}"
        )
    h = nc.relu(nc.linear(inp, dec.w1, dec.b1))
    flat = nc.linear(h, dec.w2, dec.b2)
    t_len, f_ch = dec.out_shape
    if flat.data.ndim == 1:
        return nc.reshape(flat, (t_len, f_ch))
    return nc.reshape(flat, (flat.shape[0], t_len, f_ch))


@dataclass
class ModelConfig:
    """Architecture and variant description, enough to rebuild a model."""

    variant: str = "moe"
    n_experts: int = 2
    k_train: int = 2
    k_infer: int = 1
    noisy: bool = True
    noise_grad: bool = True
    levels: tuple[str, ...] = RESOLUTIONS
    expert_channels: tuple[int, ...] = (24, 24)
    expert_kernel_width: int = 3
    embed_dim: int = 16
    router_channels: tuple[int, ...] = (12, 12)
    router_kernel_width: int = 3
    decoder_hidden: int = 96
    in_channels: int = 8
    t_frames: int = 32
    content_dim: int = 8
    segment_count: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.variant == "single" and self.n_experts != 1:
            raise ConfigError("single variant requires n_experts=1")
        for res in self.levels:
            if res not in RESOLUTIONS:
                raise ConfigError(f"unknown level resolution {res!r}")
        if not self.levels:
            raise ConfigError("model needs at least one level")

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "n_experts": self.n_experts,
            "k_train": self.k_train,
            "k_infer": self.k_infer,
            "noisy": self.noisy,
            "noise_grad": self.noise_grad,
            "levels": list(self.levels),
            "expert_channels": list(self.expert_channels),
            "expert_kernel_width": self.expert_kernel_width,
            "embed_dim": self.embed_dim,
            "router_channels": list(self.router_channels),
            "router_kernel_width": self.router_kernel_width,
            "decoder_hidden": self.decoder_hidden,
            "in_channels": self.in_channels,
            "t_frames": self.t_frames,
            "content_dim": self.content_dim,
            "segment_count": self.segment_count,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("levels", "expert_channels", "router_channels"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


# Deterministic seed derivation: levels are offset by a large prime and
# expert sub-seeds are the level seed XOR the expert index.
_LEVEL_STRIDE = 1_000_003
_ROUTER_OFFSET = 524_287
_DECODER_OFFSET = 999_983


def _level_seed(seed: int, level_index: int) -> int:
    return seed + _LEVEL_STRIDE * (level_index + 1)


@dataclass
class StyleModel:
    """A full variant: hierarchical encoder stack plus decoder analog."""

    config: ModelConfig
    hierarchy: HierarchicalStyleMoE
    decoder: DecoderParams

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for li, level in enumerate(self.hierarchy.levels):
            out.extend(level.router.named_parameters(f"level{li}.router"))
            for ei, expert in enumerate(level.experts):
                out.extend(expert.named_parameters(f"level{li}.expert{ei}"))
        out.extend(self.decoder.named_parameters("decoder"))
        return out

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    def segments(self) -> list[tuple[int, int]]:
        return equal_segments(self.config.t_frames, self.config.segment_count)

    def reset_eval_counts(self) -> None:
        self.hierarchy.reset_eval_counts()

    def forward_batch(self, content: Tensor, features: Tensor, mode: str = "infer",
                      noises: Sequence[NoiseSource] | None = None,
                      k_override: int | None = None):
        """Batched forward pass for training and evaluation.

        Returns ``(pred [B, T, F], gate_weight_rows)`` where the second
        element holds one ``[B, n]`` array of gate weights per level
        (uniform for the ensemble variant).
        """
        if mode not in ("train", "infer"):
            raise ConfigError(f"unknown mode {mode!r}")
        cfg = self.config
        segments = self.segments()
        summaries = []
        gate_rows = []
        n_batch = features.shape[0]
        for li, level in enumerate(self.hierarchy.levels):
            seg = segments if level.resolution == "segment" else None
            if cfg.variant == "ensemble":
                summary = routing.ensemble_forward_batch(
                    features, level.experts, segments=seg
                )
                gate_rows.append(np.full((n_batch, cfg.n_experts), 1.0 / cfg.n_experts))
            else:
                k = k_override if k_override is not None else (
                    cfg.k_train if mode == "train" else cfg.k_infer
                )
                if mode == "train" and cfg.noisy:
                    noise = noises[li] if noises is not None else NoiseSource.disabled()
                else:
                    noise = NoiseSource.disabled()
                res = routing.gate_batch(features, level.router, level.gating, noise, k)
                summary = routing.moe_forward_batch(
                    features, level.experts, res.gates, segments=seg
                )
                gate_rows.append(res.gates.data)
            summaries.append(summary)
        pred = condition_decoder(summaries, content, self.decoder)
        return pred, gate_rows


def build_model(cfg: ModelConfig) -> StyleModel:
    """Instantiate a variant from its config, deterministically seeded."""
    levels = []
    for li, resolution in enumerate(cfg.levels):
        lseed = _level_seed(cfg.seed, li)
        gating = GatingConfig(
            n_experts=cfg.n_experts,
            k_train=cfg.k_train,
            k_infer=cfg.k_infer,
            noisy=cfg.noisy,
            router_channels=cfg.router_channels,
            router_kernel_width=cfg.router_kernel_width,
            noise_grad=cfg.noise_grad,
            seed=lseed,
        )
        router = RouterParams.initialize(cfg.in_channels, gating, lseed + _ROUTER_OFFSET)
        arch = ExpertArch(
            in_channels=cfg.in_channels,
            conv_channels=cfg.expert_channels,
            kernel_width=cfg.expert_kernel_width,
            embed_dim=cfg.embed_dim,
            pooling=resolution,
        )
        experts = [
            StyleExpert.initialize(arch, lseed ^ ei)
            for ei in range(cfg.n_experts)
        ]
        levels.append(MoELevel(resolution, gating, router, experts))
    in_dim = cfg.content_dim + len(cfg.levels) * cfg.embed_dim
    decoder = DecoderParams.initialize(
        in_dim, cfg.decoder_hidden, (cfg.t_frames, cfg.in_channels),
        cfg.seed + _DECODER_OFFSET,
    )
    model = StyleModel(cfg, HierarchicalStyleMoE(levels), decoder)
    per_expert = levels[0].experts[0].parameter_count() if levels else 0
    logger.info(
        "built %s model: %d levels, %d experts/level, %d params/expert, %d total",
        cfg.variant, len(levels), cfg.n_experts, per_expert, model.parameter_count(),
    )
    return model


def hierarchical_forward(x: ReferenceFeatures, h: HierarchicalStyleMoE,
                         mode: str = "infer",
                         noises: Sequence[NoiseSource] | None = None,
                         k_override: int | None = None):
    """Per-sample pass through every level's gate and expert pool.

    Each level routes independently. Returns the per-level combined
    outputs (a :class:`StyleEmbedding`, or a list of them for segment
    and frame levels) and the per-level :class:`GateDecision` values.
    """
    if mode not in ("train", "infer"):
        raise ConfigError(f"unknown mode {mode!r}")
    outputs = []
    decisions: list[GateDecision] = []
    for li, level in enumerate(h.levels):
        cfg = level.gating
        k = k_override if k_override is not None else (
            cfg.k_train if mode == "train" else cfg.k_infer
        )
        if mode == "train" and cfg.noisy:
            noise = noises[li] if noises is not None else NoiseSource.training(cfg.seed)
        else:
            noise = NoiseSource.disabled()
        decision = routing.noisy_gate(x, level.router, cfg, noise, k)
        combined = routing.moe_forward(x, level.experts, decision)
        if combined.data.ndim == 1:
            outputs.append(StyleEmbedding(combined))
        else:
            dim = combined.shape[1]
            outputs.append([
                StyleEmbedding(nc.reshape(nc.gather_rows(combined, np.array([i])), (dim,)))
                for i in range(combined.shape[0])
            ])
        decisions.append(decision)
    return outputs, decisions
