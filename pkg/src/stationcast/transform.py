"""Embedding-space transfer from monitored source stations to an
unmonitored target.

A single fully connected layer maps each position of a source station's
encoder embedding, concatenated with the normalized source and target
locations, to an estimate of the target's embedding at that position:

    est[p] = W @ concat(emb[p], loc_src, loc_tar) + b

Estimates from several sources are blended by a convex combination whose
weights come from one learnable logit per source station (softplus then
sum-normalization, so the blend is always well-posed). The layer starts
as the identity on the embedding slice with zero location weights, so an
untrained transform reproduces the plain mean-of-sources backbone.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Normalizer, StationMeta, WindowPair
from .model import Seq2Seq

D_LOC = 3  # (lat, lon, elevation); synthetic elevation is zero-padded

TRANSFORM_NS = "transform/"


@dataclass(frozen=True)
class SourceWindow:
    """A source station's window plus its combinator slot and location."""

    index: int  # position in the train-station ordering (combinator slot)
    window: WindowPair
    meta: StationMeta


class ZeroShotTransform:
    """Owns the 'transform/' parameter namespace: the layer and the logits."""

    def __init__(self, d_model: int, n_sources: int):
        if n_sources < 1:
            raise ValueError("need at least one source station")
        self.d_model = d_model
        self.n_sources = n_sources
        w = np.zeros((d_model + 2 * D_LOC, d_model))
        w[:d_model] = np.eye(d_model)  # identity start: no transformation
        self.params: dict[str, Tensor] = {
            "transform/delta/w": Tensor(w, name="transform/delta/w"),
            "transform/delta/b": Tensor(np.zeros(d_model), name="transform/delta/b"),
            "transform/logits": Tensor(np.zeros(n_sources), name="transform/logits"),
        }

    def transform_embedding(self, emb, loc_src: np.ndarray, loc_tar: np.ndarray) -> Tensor:
        """Position-wise transfer of one (..., L, d_model) embedding."""
        loc_src = np.asarray(loc_src, dtype=np.float64)
        loc_tar = np.asarray(loc_tar, dtype=np.float64)
        if loc_src.shape != (D_LOC,) or loc_tar.shape != (D_LOC,):
            raise ad.ShapeError(
                f"locations must have shape ({D_LOC},), got {loc_src.shape} and {loc_tar.shape}"
            )
        shape = emb.shape[:-1] + (2 * D_LOC,)
        locs = np.broadcast_to(np.concatenate([loc_src, loc_tar]), shape)
        return self._delta(emb, locs)

    def _delta(self, emb, locs: np.ndarray) -> Tensor:
        joined = ad.concat([emb, locs], axis=-1)
        return ad.add(
            ad.matmul(joined, self.params["transform/delta/w"]),
            self.params["transform/delta/b"],
        )

    def weights(self, indices: Sequence[int]) -> Tensor:
        """Normalized positive combination weights for a subset of sources."""
        idx = np.asarray(indices, dtype=np.int64)
        raw = ad.softplus(ad.take(self.params["transform/logits"], idx))
        return ad.div(raw, raw.sum())

    def effective_weights(self, indices: Sequence[int]) -> np.ndarray:
        return self.weights(indices).data

    def combine(self, embeddings: Sequence, indices: Sequence[int]) -> Tensor:
        """Convex combination of same-shaped embeddings.

        Sources are re-ordered by station index before summation, so jointly
        permuting (embeddings, indices) yields bitwise-identical output.
        """
        if len(embeddings) == 0:
            raise ValueError("no source embeddings to combine")
        if len(embeddings) != len(indices):
            raise ValueError("one index per embedding required")
        order = np.argsort(np.asarray(indices, dtype=np.int64), kind="stable")
        if len(embeddings) == 1:
            e = embeddings[0]
            return e if isinstance(e, Tensor) else Tensor(e)
        stacked = ad.stack([embeddings[i] for i in order], axis=0)
        w = self.weights([indices[i] for i in order])
        return self._weighted_sum(stacked, w)

    @staticmethod
    def _weighted_sum(stacked: Tensor, w: Tensor) -> Tensor:
        wshape = (stacked.shape[0],) + (1,) * (stacked.ndim - 1)
        return ad.mul(stacked, ad.reshape(w, wshape)).sum(axis=0)


def batched_zero_shot(
    model: Seq2Seq,
    transform: ZeroShotTransform,
    normalizer: Normalizer,
    source_x: np.ndarray,  # (S, B, L_x, n) raw
    source_locs: np.ndarray,  # (S, 3) raw
    source_indices: Sequence[int],
    anchors: np.ndarray,  # (B,)
    target_loc: np.ndarray,  # (3,) raw
    target_context: np.ndarray,  # (B, label_len) raw
    rng=None,
) -> Tensor:
    """Normalized (B, L_y) forecasts for a batch of aligned anchors.

    Encodes every source window, transfers each embedding toward the target
    location, blends them, and decodes with the target's warm-start context.
    """
    S, B = source_x.shape[0], source_x.shape[1]
    order = np.argsort(np.asarray(source_indices, dtype=np.int64), kind="stable")
    source_x = source_x[order]
    source_locs = source_locs[order]
    source_indices = [source_indices[i] for i in order]

    cfg = model.config
    flat_x = normalizer.normalize_x(source_x.reshape(S * B, cfg.L_x, cfg.n_features))
    flat_anchors = np.tile(np.asarray(anchors, dtype=np.int64), S)
    memory = model.encode(flat_x, flat_anchors, rng)

    loc_tar = normalizer.normalize_location(target_loc)
    locs = np.empty((S * B, cfg.L_x, 2 * D_LOC))
    for s in range(S):
        loc_src = normalizer.normalize_location(source_locs[s])
        locs[s * B : (s + 1) * B] = np.concatenate([loc_src, loc_tar])
    transformed = transform._delta(memory, locs)

    if S == 1:
        combined = ad.reshape(transformed, (B, cfg.L_x, cfg.d_model))
    else:
        stacked = ad.reshape(transformed, (S, B, cfg.L_x, cfg.d_model))
        combined = transform._weighted_sum(stacked, transform.weights(source_indices))

    ctx = normalizer.normalize_y(np.asarray(target_context, dtype=np.float64))
    return model.decode(combined, ctx, anchors, rng)


def zero_shot_forecast(
    model: Seq2Seq,
    transform: ZeroShotTransform,
    normalizer: Normalizer,
    sources: Sequence[SourceWindow],
    target_loc: np.ndarray,
    target_context: np.ndarray,
    rng=None,
) -> np.ndarray:
    """Denormalized L_y-hour forecast for one anchor.

    Every source window must share the anchor time; the target contributes
    only its location and the ``label_len`` values preceding the anchor.
    """
    if not sources:
        raise ValueError("no source windows provided")
    anchors = {s.window.t for s in sources}
    if len(anchors) != 1:
        raise ValueError(f"source windows disagree on the anchor time: {sorted(anchors)}")
    cfg = model.config
    if len(target_context) != cfg.label_len:
        raise ValueError(
            f"target context must hold {cfg.label_len} values, got {len(target_context)}"
        )
    source_x = np.stack([s.window.x for s in sources])[:, None]  # (S, 1, L, n)
    source_locs = np.stack([s.meta.location() for s in sources])
    out = batched_zero_shot(
        model,
        transform,
        normalizer,
        source_x,
        source_locs,
        [s.index for s in sources],
        np.array([sources[0].window.t]),
        np.asarray(target_loc, dtype=np.float64),
        np.asarray(target_context, dtype=np.float64)[None, :],
        rng=rng,
    )
    return normalizer.denormalize_y(out.data[0])
