"""Mini-batch training and sliding-window inference."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from ..checkpoint import load_params, save_params
from ..io import VideoClip
from ..nn import Adam
from ..tensor import Tensor
from .config import PipelineConfig
from .model import PNSPlus

log = logging.getLogger(__name__)


class ClipTooShortError(ValueError):
    pass


@dataclass
class ClipBatch:
    """Anchor frame 0 plus the window starting at ``start`` (``start >= 1``)."""

    clip_id: str
    anchor: np.ndarray
    frames: np.ndarray
    masks: np.ndarray
    start: int


@dataclass
class TrainResult:
    model: PNSPlus
    losses: list[float] = field(default_factory=list)


def sample_batch(clip: VideoClip, window: int, rng: np.random.Generator) -> ClipBatch:
    n = len(clip)
    if n < window + 1:
        raise ClipTooShortError(f"clip {clip.clip_id!r} has {n} frames, needs at least {window + 1}")
    start = int(rng.integers(1, n - window + 1))
    sl = slice(start, start + window)
    return ClipBatch(clip.clip_id, clip.frames[0], clip.frames[sl], clip.masks[sl], start)


def batch_loss(model: PNSPlus, batch: ClipBatch) -> Tensor:
    logits = model(Tensor(batch.anchor[None]), Tensor(batch.frames))
    return T.bce_with_logits(logits, batch.masks.astype(np.float64))


def train(clips: list[VideoClip], cfg: PipelineConfig, seed: int | None = None, callback=None) -> TrainResult:
    """Adam on BCE; deterministic for a given ``seed`` (defaults to ``cfg.seed``)."""
    if not clips:
        raise ValueError("no training clips")
    seed = cfg.seed if seed is None else seed
    for c in clips:
        if len(c) < cfg.window + 1:
            raise ClipTooShortError(f"clip {c.clip_id!r} has {len(c)} frames, needs at least {cfg.window + 1}")
    model = PNSPlus(cfg, seed=seed)
    opt = Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(seed + 1)
    result = TrainResult(model)
    for step in range(cfg.steps):
        opt.zero_grad()
        picks = rng.integers(0, len(clips), size=cfg.batch_clips)
        total = None
        for idx in picks:
            loss = batch_loss(model, sample_batch(clips[idx], cfg.window, rng))
            total = loss if total is None else total + loss
        total = total / float(cfg.batch_clips)
        T.backward(total)
        opt.step()
        result.losses.append(float(total.data))
        if callback is not None:
            callback(step, result.losses[-1])
        if step % 50 == 0:
            log.debug("step %d loss %.5f", step, result.losses[-1])
    return result


def infer_clip(clip: VideoClip | np.ndarray, model: PNSPlus) -> np.ndarray:
    """Probability maps for frames ``1..n-1``; frame 0 is the anchor.

    Frames are processed in consecutive windows; a short final window is
    padded by repeating its last frame and the padded outputs dropped.
    """
    frames = clip.frames if isinstance(clip, VideoClip) else np.asarray(clip)
    n = len(frames)
    if n == 0:
        raise ValueError("empty clip")
    if n < 2:
        raise ClipTooShortError("need an anchor and at least one frame")
    win = model.cfg.window
    anchor = Tensor(frames[0][None])
    anchor_feat = model.encode_global(anchor)
    out = []
    for start in range(1, n, win):
        chunk = frames[start : start + win]
        real = len(chunk)
        if real < win:
            chunk = np.concatenate([chunk, np.repeat(chunk[-1:], win - real, axis=0)])
        low, high = model.encode_local(Tensor(chunk))
        logits = model.decode(low, model.temporal_features(anchor_feat, high))
        out.append(T.sigmoid(logits).data[:real])
    return np.concatenate(out)


def save_checkpoint(model: PNSPlus, path) -> None:
    save_params(path, list(model.state_dict().items()))


def load_checkpoint(path, cfg: PipelineConfig) -> PNSPlus:
    model = PNSPlus(cfg)
    model.load_state_dict(load_params(path))
    return model
