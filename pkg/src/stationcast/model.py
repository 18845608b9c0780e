"""Transformer-style encoder-decoder for hourly series.

The encoder turns a normalized input window into a per-position embedding;
the generative decoder consumes a warm-start context (the target channel's
most recent ``label_len`` values followed by zero placeholders) and emits
the whole forecast horizon in one forward pass.

Attention is standard scaled dot-product multi-head attention. Input
embeddings sum a learned value projection, a fixed sinusoidal positional
encoding, and learned hour-of-day / day-of-year tables, so the model can
see both clock and calendar.

Windows are level-anchored inside the model: the encoder sees each window
relative to its own per-channel mean, and the decoded forecast rides on
the mean of the warm-start context. Station levels drift apart over long
spans, so embeddings must stay level-free to be comparable across
stations; the anchor puts the one level that is always observable (the
target's own recent values) back at the end.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import day_of_year

HOURS_PER_DAY = 24
DAYS_PER_YEAR = 366  # table size; leap-year safe

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    d_inner: int = 2048
    n_heads: int = 8
    enc_layers: int = 2
    dec_layers: int = 1
    dropout: float = 0.05
    label_len: int = 24
    L_x: int = 48
    L_y: int = 24
    n_features: int = 1

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.label_len > self.L_x:
            raise ValueError(
                f"label_len {self.label_len} exceeds input window {self.L_x}"
            )

    @property
    def dec_len(self) -> int:
        return self.label_len + self.L_y


def desk_config(n_features: int = 1, L_x: int = 48, L_y: int = 24) -> ModelConfig:
    """Small configuration sized for single-core experiments."""
    return ModelConfig(
        d_model=32, d_inner=64, n_heads=2, enc_layers=2, dec_layers=1,
        dropout=0.05, label_len=min(24, L_x), L_x=L_x, L_y=L_y,
        n_features=n_features,
    )


def micro_config(n_features: int = 1) -> ModelConfig:
    """Tiny configuration for gradient checks and fast unit tests."""
    return ModelConfig(
        d_model=8, d_inner=16, n_heads=1, enc_layers=1, dec_layers=1,
        dropout=0.0, label_len=4, L_x=8, L_y=4, n_features=n_features,
    )


def sinusoidal_encoding(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(d_model // 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / d_model)
    table = np.zeros((length, d_model))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


def encoder_hours(anchors: np.ndarray, L_x: int) -> np.ndarray:
    """Absolute hours of the input positions (t-L_x, t] for each anchor."""
    anchors = np.asarray(anchors, dtype=np.int64).reshape(-1, 1)
    return anchors + np.arange(-L_x + 1, 1)


def decoder_hours(anchors: np.ndarray, label_len: int, L_y: int) -> np.ndarray:
    """Absolute hours of the decoder positions (t-label_len, t+L_y]."""
    anchors = np.asarray(anchors, dtype=np.int64).reshape(-1, 1)
    return anchors + np.arange(-label_len + 1, L_y + 1)


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count for a config (checked against the model)."""
    d, di = cfg.d_model, cfg.d_inner
    attn = 4 * (d * d + d)
    ffn = d * di + di + di * d + d
    ln = 2 * d
    shared = (cfg.n_features * d + d) + (1 * d + d) + HOURS_PER_DAY * d + DAYS_PER_YEAR * d
    enc = cfg.enc_layers * (attn + 2 * ln + ffn)
    dec = cfg.dec_layers * (2 * attn + 3 * ln + ffn)
    head = d + 1
    return shared + enc + dec + head


def params_digest(params: dict) -> str:
    """Order-independent SHA-256 over parameter names and raw bytes."""
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


class Seq2Seq:
    """Encoder-decoder backbone; owns all 'backbone/' parameters."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng([seed, 1])
        d = config.d_model

        self._matrix("backbone/enc_value_proj/w", (config.n_features, d))
        self._vector("backbone/enc_value_proj/b", d)
        self._matrix("backbone/dec_value_proj/w", (1, d))
        self._vector("backbone/dec_value_proj/b", d)
        self._matrix("backbone/hour_embed", (HOURS_PER_DAY, d), fan_in=d)
        self._matrix("backbone/doy_embed", (DAYS_PER_YEAR, d), fan_in=d)

        for i in range(config.enc_layers):
            self._attention_params(f"backbone/enc{i}/attn")
            self._layernorm_params(f"backbone/enc{i}/ln1")
            self._layernorm_params(f"backbone/enc{i}/ln2")
            self._ffn_params(f"backbone/enc{i}/ffn")
        for i in range(config.dec_layers):
            self._attention_params(f"backbone/dec{i}/self_attn")
            self._attention_params(f"backbone/dec{i}/cross_attn")
            self._layernorm_params(f"backbone/dec{i}/ln1")
            self._layernorm_params(f"backbone/dec{i}/ln2")
            self._layernorm_params(f"backbone/dec{i}/ln3")
            self._ffn_params(f"backbone/dec{i}/ffn")

        self._matrix("backbone/head/w", (d, 1))
        self._vector("backbone/head/b", 1)

        self.pos_table = sinusoidal_encoding(max(config.L_x, config.dec_len), d)
        self._causal_mask = np.triu(
            np.full((config.dec_len, config.dec_len), -np.inf), k=1
        )

    # -- parameter construction ------------------------------------------

    def _matrix(self, name, shape, fan_in=None):
        fan = shape[0] if fan_in is None else fan_in
        scale = 1.0 / np.sqrt(fan)
        self.params[name] = Tensor(self._rng.uniform(-scale, scale, size=shape), name=name)

    def _vector(self, name, size):
        self.params[name] = Tensor(np.zeros(size), name=name)

    def _attention_params(self, prefix):
        d = self.config.d_model
        for part in ("q", "k", "v", "o"):
            self._matrix(f"{prefix}/w{part}", (d, d))
            self._vector(f"{prefix}/b{part}", d)

    def _layernorm_params(self, prefix):
        d = self.config.d_model
        self.params[f"{prefix}/gain"] = Tensor(np.ones(d), name=f"{prefix}/gain")
        self.params[f"{prefix}/bias"] = Tensor(np.zeros(d), name=f"{prefix}/bias")

    def _ffn_params(self, prefix):
        d, di = self.config.d_model, self.config.d_inner
        self._matrix(f"{prefix}/w1", (d, di))
        self._vector(f"{prefix}/b1", di)
        self._matrix(f"{prefix}/w2", (di, d))
        self._vector(f"{prefix}/b2", d)

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- forward pieces ----------------------------------------------------

    def _drop(self, x: Tensor, rng) -> Tensor:
        if rng is None or self.config.dropout == 0.0:
            return x
        return ad.dropout(x, self.config.dropout, seed=int(rng.integers(2**63 - 1)))

    def _linear(self, x, prefix):
        return ad.add(ad.matmul(x, self.params[f"{prefix}/w"]), self.params[f"{prefix}/b"])

    def _time_embedding(self, values, hours, proj_prefix, rng):
        emb = self._linear(values, proj_prefix)
        L = hours.shape[1]
        emb = ad.add(emb, self.pos_table[:L])
        emb = ad.add(emb, ad.take(self.params["backbone/hour_embed"], hours % 24))
        emb = ad.add(emb, ad.take(self.params["backbone/doy_embed"], day_of_year(hours)))
        return self._drop(emb, rng)

    def embed_input(self, x: np.ndarray, hours: np.ndarray, rng=None) -> Tensor:
        """Project a normalized (B, L_x, n_features) window into model space."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.config.n_features:
            raise ad.ShapeError(
                f"expected {self.config.n_features} features, got {x.shape[-1]}"
            )
        return self._time_embedding(x, hours, "backbone/enc_value_proj", rng)

    def _attention(self, prefix, q_in, kv_in, mask, rng):
        cfg = self.config
        B, Lq, d = q_in.shape
        Lk = kv_in.shape[1]
        H, dh = cfg.n_heads, d // cfg.n_heads

        def heads(t, L):
            return ad.transpose(ad.reshape(t, (B, L, H, dh)), (0, 2, 1, 3))

        q = heads(ad.add(ad.matmul(q_in, self.params[f"{prefix}/wq"]),
                         self.params[f"{prefix}/bq"]), Lq)
        k = heads(ad.add(ad.matmul(kv_in, self.params[f"{prefix}/wk"]),
                         self.params[f"{prefix}/bk"]), Lk)
        v = heads(ad.add(ad.matmul(kv_in, self.params[f"{prefix}/wv"]),
                         self.params[f"{prefix}/bv"]), Lk)

        q = ad.mul(q, 1.0 / np.sqrt(dh))  # scale q, not the L x L score array
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
        attn = ad.softmax(scores, axis=-1, mask=mask)
        ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (B, Lq, d))
        return ad.add(ad.matmul(ctx, self.params[f"{prefix}/wo"]), self.params[f"{prefix}/bo"])

    def _ffn(self, prefix, x):
        h = ad.gelu(ad.add(ad.matmul(x, self.params[f"{prefix}/w1"]),
                           self.params[f"{prefix}/b1"]))
        return ad.add(ad.matmul(h, self.params[f"{prefix}/w2"]), self.params[f"{prefix}/b2"])

    def _ln(self, prefix, x):
        return ad.layer_norm(x, self.params[f"{prefix}/gain"], self.params[f"{prefix}/bias"])

    def encode(self, x: np.ndarray, anchors: np.ndarray, rng=None) -> Tensor:
        """Per-position embedding of shape (B, L_x, d_model).

        The window is centered on its own per-channel mean first, so the
        embedding describes shape, not station level.
        """
        x = np.asarray(x, dtype=np.float64)
        x = x - x.mean(axis=1, keepdims=True)
        hours = encoder_hours(anchors, self.config.L_x)
        h = self.embed_input(x, hours, rng)
        for i in range(self.config.enc_layers):
            a = self._attention(f"backbone/enc{i}/attn", h, h, None, rng)
            h = self._ln(f"backbone/enc{i}/ln1", ad.add(h, self._drop(a, rng)))
            f = self._ffn(f"backbone/enc{i}/ffn", h)
            h = self._ln(f"backbone/enc{i}/ln2", ad.add(h, self._drop(f, rng)))
        return h

    def decode(self, memory: Tensor, context: np.ndarray, anchors: np.ndarray,
               rng=None) -> Tensor:
        """Normalized forecasts (B, L_y) from encoder memory + warm-start context.

        ``context`` holds the target channel's last ``label_len`` normalized
        values per batch row; the L_y placeholder positions are zeros.
        """
        cfg = self.config
        context = np.asarray(context, dtype=np.float64)
        B = context.shape[0]
        if context.shape[1] != cfg.label_len:
            raise ad.ShapeError(
                f"decoder context must have length {cfg.label_len}, got {context.shape[1]}"
            )
        # residual decoding: forecasts ride on the context's last value, so
        # the decoder predicts the change since the anchor hour and works
        # level-free like the encoder memory it cross-attends to
        level = context[:, -1:]
        values = np.zeros((B, cfg.dec_len, 1))
        values[:, : cfg.label_len, 0] = context - level
        hours = decoder_hours(anchors, cfg.label_len, cfg.L_y)

        h = self._time_embedding(values, hours, "backbone/dec_value_proj", rng)
        for i in range(cfg.dec_layers):
            a = self._attention(f"backbone/dec{i}/self_attn", h, h, self._causal_mask, rng)
            h = self._ln(f"backbone/dec{i}/ln1", ad.add(h, self._drop(a, rng)))
            c = self._attention(f"backbone/dec{i}/cross_attn", h, memory, None, rng)
            h = self._ln(f"backbone/dec{i}/ln2", ad.add(h, self._drop(c, rng)))
            f = self._ffn(f"backbone/dec{i}/ffn", h)
            h = self._ln(f"backbone/dec{i}/ln3", ad.add(h, self._drop(f, rng)))
        out = self._linear(h, "backbone/head")
        return ad.add(out[:, -cfg.L_y :, 0], level)

    def forecast(self, x: np.ndarray, anchors: np.ndarray, context: np.ndarray,
                 rng=None) -> Tensor:
        """Full forward pass; normalized (B, L_y) forecasts."""
        return self.decode(self.encode(x, anchors, rng), context, anchors, rng)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, config: ModelConfig, params: dict, meta: Optional[dict] = None):
    """One .npz holding named parameter arrays plus a JSON manifest."""
    manifest = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "config": asdict(config),
        "params_digest": params_digest(params),
    }
    if meta:
        manifest.update(meta)
    arrays = {f"param/{k}": v.data for k, v in params.items()}
    np.savez(path, __manifest__=np.frombuffer(
        json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8), **arrays)
    return manifest["params_digest"]


def load_checkpoint(path):
    """Returns (config, {name: ndarray}, manifest)."""
    with np.load(path) as z:
        manifest = json.loads(bytes(z["__manifest__"]).decode())
        if manifest.get("checkpoint_version") != CHECKPOINT_VERSION:
            raise ValueError(
                f"unsupported checkpoint version {manifest.get('checkpoint_version')}"
            )
        arrays = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    config = ModelConfig(**manifest["config"])
    return config, arrays, manifest


def restore_params(params: dict, arrays: dict, prefix: str = "") -> None:
    """Copy checkpoint arrays into live tensors, validating names and shapes."""
    names = {n for n in params if n.startswith(prefix)}
    stored = {n for n in arrays if n.startswith(prefix)}
    if names != stored:
        missing, extra = names - stored, stored - names
        raise ValueError(f"checkpoint mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
    for name in names:
        arr = arrays[name]
        if arr.shape != params[name].data.shape:
            raise ValueError(
                f"shape mismatch for {name}: checkpoint {arr.shape}, "
                f"model {params[name].data.shape}"
            )
        params[name].data = arr.astype(np.float64).copy()
