"""Normalized self-attention over dilated spatio-temporal neighbourhoods.

Each query pixel attends, per channel group, to the ``(2k+1)^2`` window
around its own location (stride ``d_i`` for group ``i``) in every key frame.
Affinity rows are softmax distributions over those ``T_k (2k+1)^2`` slots;
the per-pixel maximum affinity across all groups reweights the output.

Layouts: features are ``[T, H, W, C]``. Sampled neighbourhoods and
affinities are stored pixel-major (``[H, W, ...]``) because the window of a
pixel is shared by all query frames at that pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Module, he_normal
from .tensor import Parameter, ShapeError, Tensor, from_op

NORM_AXES = ("channel", "temporal")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NsConfig:
    channels: int
    groups: int = 4
    kernel: int = 3
    dilations: tuple[int, ...] = (3, 4, 3, 4)
    use_soft_attention: bool = True
    use_normalization: bool = True
    norm_axis: str = "channel"
    eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.channels < 1 or self.groups < 1:
            raise ConfigError("channels and groups must be positive")
        if self.channels % self.groups:
            raise ConfigError(f"channels={self.channels} not divisible by groups={self.groups}")
        if self.kernel < 0:
            raise ConfigError("kernel must be non-negative")
        if len(self.dilations) != self.groups:
            raise ConfigError(f"need {self.groups} dilations, got {len(self.dilations)}")
        if any(d < 1 for d in self.dilations):
            raise ConfigError("dilations must be positive")
        if self.norm_axis not in NORM_AXES:
            raise ConfigError(f"norm_axis must be one of {NORM_AXES}")

    @property
    def group_channels(self) -> int:
        return self.channels // self.groups

    @property
    def window(self) -> int:
        return (2 * self.kernel + 1) ** 2

    def slots(self, t_k: int) -> int:
        return t_k * self.window


@dataclass
class SampledNeighborhood:
    """Per-pixel gathered key or value vectors.

    ``values`` is ``[H, W, S, c]`` with slot ``s = t*(2k+1)^2 + (j+k)*(2k+1) + (l+k)``
    holding frame ``t`` at ``(x + j*d, y + l*d)``. ``valid`` is ``[H, W, S]``;
    out-of-bounds slots are zero vectors with ``valid == False``.
    """

    values: Tensor
    valid: np.ndarray


@dataclass
class AffinityMatrix:
    """Row-stochastic affinities of one group, stored as ``[H, W, T_q, S]``."""

    values: Tensor
    valid: np.ndarray
    group: int = 0

    def as_matrix(self) -> np.ndarray:
        """The ``(T_q*H*W) x S`` matrix with rows in (t, x, y) order."""
        h, w, tq, s = self.values.shape
        return self.values.data.transpose(2, 0, 1, 3).reshape(tq * h * w, s)


def split_channels(x: Tensor, groups: int) -> list[Tensor]:
    c = x.shape[-1]
    if c % groups:
        raise ShapeError(f"{c} channels cannot be split into {groups} groups")
    step = c // groups
    return [x[..., i * step : (i + 1) * step] for i in range(groups)]


def _window_offsets(kernel: int, dilation: int) -> list[tuple[int, int]]:
    r = range(-kernel, kernel + 1)
    return [(j * dilation, l * dilation) for j in r for l in r]


def sample_neighborhood(x: Tensor, kernel: int, dilation: int) -> SampledNeighborhood:
    """Gather the dilated window of every pixel across all frames of ``x``."""
    if x.ndim != 4:
        raise ShapeError("sample_neighborhood expects [T, H, W, c]")
    tk, h, w, c = x.shape
    pad = kernel * dilation
    offsets = _window_offsets(kernel, dilation)
    k2 = len(offsets)
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    out = np.empty((h, w, tk, k2, c))
    inside = np.zeros((h + 2 * pad, w + 2 * pad), dtype=bool)
    inside[pad : pad + h, pad : pad + w] = True
    valid = np.empty((h, w, k2), dtype=bool)
    for o, (dr, dc) in enumerate(offsets):
        r0, c0 = pad + dr, pad + dc
        out[:, :, :, o, :] = xp[:, r0 : r0 + h, c0 : c0 + w, :].transpose(1, 2, 0, 3)
        valid[:, :, o] = inside[r0 : r0 + h, c0 : c0 + w]

    def bw(g):
        g = g.reshape(h, w, tk, k2, c)
        gp = np.zeros(xp.shape)
        for o, (dr, dc) in enumerate(offsets):
            r0, c0 = pad + dr, pad + dc
            gp[:, r0 : r0 + h, c0 : c0 + w, :] += g[:, :, :, o, :].transpose(2, 0, 1, 3)
        return (gp[:, pad : pad + h, pad : pad + w, :],)

    values = from_op(out.reshape(h, w, tk * k2, c), (x,), bw)
    return SampledNeighborhood(values, np.tile(valid, (1, 1, tk)))


def normalize_query(
    q: Tensor,
    cfg: NsConfig,
    gamma: Tensor | None = None,
    beta: Tensor | None = None,
) -> Tensor:
    """Fix the query distribution; identity when normalisation is disabled.

    ``channel`` normalises each pixel's group channels; ``temporal``
    normalises each pixel/channel across the query frames (degenerates to
    zeros when there is a single query frame).
    """
    if not cfg.use_normalization:
        return q
    axis = -1 if cfg.norm_axis == "channel" else 0
    return T.channel_norm(q, gamma, beta, eps=cfg.eps, axis=axis)


def relevance_measuring(q_hat: Tensor, keys: SampledNeighborhood, cfg: NsConfig, group: int = 0) -> AffinityMatrix:
    """Scaled dot-product affinity between queries and their sampled keys."""
    tq, h, w, c = q_hat.shape
    if keys.values.shape[:2] != (h, w) or keys.values.shape[-1] != c:
        raise ShapeError(f"query {q_hat.shape} vs sampled keys {keys.values.shape}")
    qp = T.transpose(q_hat, (1, 2, 0, 3))  # [H, W, Tq, c]
    scores = T.matmul(qp, T.transpose(keys.values, (0, 1, 3, 2))) / np.sqrt(cfg.group_channels)
    aff = T.softmax_lastdim(scores, mask=keys.valid[:, :, None, :])
    return AffinityMatrix(aff, keys.valid, group)


def st_aggregate(aff: AffinityMatrix, values: SampledNeighborhood) -> Tensor:
    """Affinity-weighted sum of sampled values, ``[H, W, T_q, c]``."""
    if aff.values.shape[-1] != values.values.shape[-2]:
        raise ShapeError(f"affinity has {aff.values.shape[-1]} slots, values have {values.values.shape[-2]}")
    return T.matmul(aff.values, values.values)


def soft_attention_map(affs: list[AffinityMatrix], cfg: NsConfig) -> Tensor:
    """Per-query maximum over all groups' affinity entries, ``[H, W, T_q, 1]``."""
    if not cfg.use_soft_attention:
        return Tensor(np.ones(affs[0].values.shape[:-1] + (1,)))
    stacked = T.concat([a.values for a in affs], axis=-1)
    return T.amax(stacked, axis=-1, keepdims=True)


class NsWeights(Module):
    """Learnable pieces of one block: three embeddings, query affine, output map."""

    def __init__(self, rng: np.random.Generator, cfg: NsConfig):
        c, n, cg = cfg.channels, cfg.groups, cfg.group_channels
        self.theta_w = Parameter(he_normal(rng, (c, c), c))
        self.theta_b = Parameter(np.zeros(c))
        self.phi_w = Parameter(he_normal(rng, (c, c), c))
        self.phi_b = Parameter(np.zeros(c))
        self.g_w = Parameter(he_normal(rng, (c, c), c))
        self.g_b = Parameter(np.zeros(c))
        self.norm_gamma = Parameter(np.ones((n, cg)))
        self.norm_beta = Parameter(np.zeros((n, cg)))
        self.w_t = Parameter(he_normal(rng, (c, c), c))


def _check_qkv(q: Tensor, k: Tensor, v: Tensor, cfg: NsConfig) -> None:
    for name, t in (("Q", q), ("K", k), ("V", v)):
        if t.ndim != 4:
            raise ShapeError(f"{name} must be [T, H, W, C], got {t.shape}")
        if t.shape[-1] != cfg.channels:
            raise ShapeError(f"{name} has {t.shape[-1]} channels, config expects {cfg.channels}")
    if k.shape != v.shape:
        raise ShapeError(f"K {k.shape} and V {v.shape} differ")
    if q.shape[1:3] != k.shape[1:3]:
        raise ShapeError(f"Q {q.shape} and K {k.shape} differ spatially")


def ns_forward(q: Tensor, k: Tensor, v: Tensor, cfg: NsConfig, weights: NsWeights) -> Tensor:
    """Apply the block; returns ``[T_q, H, W, C]``."""
    _check_qkv(q, k, v, cfg)
    tq, h, w, c = q.shape
    n, cg = cfg.groups, cfg.group_channels
    qe = T.pointwise_linear(q, weights.theta_w, weights.theta_b)
    ke = T.pointwise_linear(k, weights.phi_w, weights.phi_b)
    ve = T.pointwise_linear(v, weights.g_w, weights.g_b)
    qn = normalize_query(T.reshape(qe, (tq, h, w, n, cg)), cfg, weights.norm_gamma, weights.norm_beta)
    qn = T.reshape(qn, (tq, h, w, c))

    affs: list[AffinityMatrix] = []
    aggregated: list[Tensor] = []
    for i, (qi, ki, vi) in enumerate(zip(split_channels(qn, n), split_channels(ke, n), split_channels(ve, n))):
        d = cfg.dilations[i]
        aff = relevance_measuring(qi, sample_neighborhood(ki, cfg.kernel, d), cfg, group=i)
        affs.append(aff)
        aggregated.append(st_aggregate(aff, sample_neighborhood(vi, cfg.kernel, d)))

    y = T.pointwise_linear(T.concat(aggregated, axis=-1), weights.w_t)
    if cfg.use_soft_attention:
        y = y * soft_attention_map(affs, cfg)
    return T.transpose(y, (2, 0, 1, 3))


def ns_affinities(q: Tensor, k: Tensor, cfg: NsConfig, weights: NsWeights) -> list[AffinityMatrix]:
    """The per-group affinity matrices ``ns_forward`` would use."""
    _check_qkv(q, k, k, cfg)
    tq, h, w, c = q.shape
    qe = T.pointwise_linear(q, weights.theta_w, weights.theta_b)
    ke = T.pointwise_linear(k, weights.phi_w, weights.phi_b)
    qn = normalize_query(
        T.reshape(qe, (tq, h, w, cfg.groups, cfg.group_channels)), cfg, weights.norm_gamma, weights.norm_beta
    )
    qn = T.reshape(qn, (tq, h, w, c))
    return [
        relevance_measuring(qi, sample_neighborhood(ki, cfg.kernel, cfg.dilations[i]), cfg, group=i)
        for i, (qi, ki) in enumerate(zip(split_channels(qn, cfg.groups), split_channels(ke, cfg.groups)))
    ]


def brute_force_oracle(q, k, v, cfg: NsConfig, weights: NsWeights) -> np.ndarray:
    """Reference evaluation with one explicit loop per query pixel.

    Plain numpy on raw arrays; each query materialises its neighbourhood slot
    by slot. Slow by design.
    """
    Q = np.asarray(q.data if isinstance(q, Tensor) else q, dtype=np.float64)
    K = np.asarray(k.data if isinstance(k, Tensor) else k, dtype=np.float64)
    V = np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
    p = {name: t.data for name, t in weights.named_parameters()}
    qe = Q @ p["theta_w"] + p["theta_b"]
    ke = K @ p["phi_w"] + p["phi_b"]
    ve = V @ p["g_w"] + p["g_b"]
    tq, h, w, c = qe.shape
    tk = ke.shape[0]
    n, cg, kr = cfg.groups, cfg.group_channels, cfg.kernel
    scale = np.sqrt(cg)
    out = np.zeros((tq, h, w, c))

    for t in range(tq):
        for x in range(h):
            for y in range(w):
                parts = []
                best = -np.inf
                for i in range(n):
                    sl = slice(i * cg, (i + 1) * cg)
                    qi = qe[t, x, y, sl]
                    if cfg.use_normalization:
                        if cfg.norm_axis == "channel":
                            mu, var = qi.mean(), qi.var()
                        else:
                            col = qe[:, x, y, sl]
                            mu, var = col.mean(axis=0), col.var(axis=0)
                        qi = (qi - mu) / np.sqrt(var + cfg.eps) * p["norm_gamma"][i] + p["norm_beta"][i]
                    d = cfg.dilations[i]
                    keys, vals = [], []
                    for s in range(tk):
                        for j in range(-kr, kr + 1):
                            for l in range(-kr, kr + 1):
                                xx, yy = x + j * d, y + l * d
                                if 0 <= xx < h and 0 <= yy < w:
                                    keys.append(ke[s, xx, yy, sl])
                                    vals.append(ve[s, xx, yy, sl])
                    scores = np.array([qi @ kv for kv in keys]) / scale
                    e = np.exp(scores - scores.max())
                    prob = e / e.sum()
                    parts.append(prob @ np.array(vals))
                    best = max(best, prob.max())
                yv = np.concatenate(parts) @ p["w_t"]
                if cfg.use_soft_attention:
                    yv = yv * best
                out[t, x, y] = yv
    return out
