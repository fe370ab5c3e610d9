"""The BACHI network.

Pipeline per piece::

    piano roll (T x 88)
      -> patch embedding: strided conv (kernel 6) + GLU + sinusoidal positions   (L = T/6 tokens)
      -> pre-LN transformer encoder                                              H  (L x d)
      -> boundary MLP                                                            e  (L logits)
      -> FiLM on [H_t; sigmoid(e_t)]:  Z_t = LN(H_t) * (1 + gamma_t) + beta_t
      -> context per token:  C_t = [Z_t, H_{t-r}, ..., H_{t+r}]                 (2r+2 x d)
      -> one decoder block over the 3 element slots (self-attn, cross-attn on C_t, FFN)
      -> separate root / quality / bass heads

All weights live in a flat :class:`~bachi.numerics.ParamStore`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch

from . import numerics as nx
from .chord_vocab import N_BASSES, N_QUALITIES, N_ROOTS
from .score_io import FRAMES_PER_BEAT, N_KEYS, PATCH_SIZE

SLOT_NAMES = ("root", "quality", "bass")
MASKED = -1


@dataclass
class ModelConfig:
    d_model: int = 64
    encoder_layers: int = 2
    heads: int = 4
    ffn_mult: int = 4
    context_radius: int = 2
    patch_size: int = PATCH_SIZE
    frames_per_beat: int = FRAMES_PER_BEAT
    n_pitches: int = N_KEYS
    n_roots: int = N_ROOTS
    n_qualities: int = N_QUALITIES
    n_basses: int = N_BASSES
    dropout: float = 0.1
    use_boundary: bool = True
    use_iterative: bool = True
    positional_encoding: bool = True

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.d_model % 2:
            raise ValueError("d_model must be even for the sinusoidal position table")
        if self.context_radius < 0:
            raise ValueError("context_radius must be >= 0")

    @property
    def class_counts(self) -> tuple[int, int, int]:
        return (self.n_roots, self.n_qualities, self.n_basses)

    @property
    def context_rows(self) -> int:
        return 2 * self.context_radius + 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class ForwardOutput:
    boundary_logits: torch.Tensor  # (B, L)
    logits: tuple[torch.Tensor, torch.Tensor, torch.Tensor]  # (B, L, C_s) per slot
    H: torch.Tensor
    Z: torch.Tensor
    valid: torch.Tensor  # (B, L) bool


def sinusoidal_positions(length: int, d: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, d, 2, dtype=torch.float64) * (-math.log(10000.0) / d))
    pe = torch.zeros(length, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)
    return pe.to(dtype)


class BACHIModel:
    def __init__(self, config: ModelConfig | None = None, seed: int = 0, dtype: torch.dtype = torch.float32):
        self.config = config or ModelConfig()
        self.dtype = dtype
        self.params = nx.ParamStore(dtype)
        self._init_params(seed)

    # ------------------------------------------------------------ parameters

    def _init_params(self, seed: int) -> None:
        cfg = self.config
        d, ff = cfg.d_model, cfg.d_model * cfg.ffn_mult
        rng = np.random.default_rng(seed)
        P = self.params

        def dense(name, n_in, n_out, bias=True):
            P.add(f"{name}.W", rng.normal(0.0, 1.0 / math.sqrt(n_in), (n_in, n_out)))
            if bias:
                P.add(f"{name}.b", np.zeros(n_out))

        def norm(name, n):
            P.add(f"{name}.g", np.ones(n))
            P.add(f"{name}.b", np.zeros(n))

        def attention(name):
            for proj in "qkvo":
                P.add(f"{name}.W{proj}", rng.normal(0.0, 1.0 / math.sqrt(d), (d, d)))
                P.add(f"{name}.b{proj}", np.zeros(d))

        fan_in = cfg.patch_size * cfg.n_pitches
        P.add("patch.W", rng.normal(0.0, 1.0 / math.sqrt(fan_in), (cfg.patch_size, cfg.n_pitches, 2 * d)))
        P.add("patch.b", np.zeros(2 * d))
        for i in range(cfg.encoder_layers):
            norm(f"enc.{i}.ln1", d)
            attention(f"enc.{i}.attn")
            norm(f"enc.{i}.ln2", d)
            dense(f"enc.{i}.ff1", d, ff)
            dense(f"enc.{i}.ff2", ff, d)
        norm("enc.ln_f", d)

        dense("boundary.fc1", d, d)
        dense("boundary.fc2", d, 1)

        norm("film.ln", d + 1)
        for mlp in ("gamma", "beta"):
            dense(f"film.{mlp}.fc1", d + 1, d)
            dense(f"film.{mlp}.fc2", d, d)

        P.add("dec.mask_emb", rng.normal(0.0, 0.1, d))
        P.add("dec.slot_emb", rng.normal(0.0, 0.1, (3, d)))
        for slot, n in zip(SLOT_NAMES, cfg.class_counts):
            P.add(f"dec.class_emb.{slot}", rng.normal(0.0, 0.1, (n, d)))
        P.add("dec.ctx_pos", rng.normal(0.0, 0.1, (cfg.context_rows, d)))
        norm("dec.ln_sa", d)
        attention("dec.sa")
        norm("dec.ln_ca", d)
        attention("dec.ca")
        norm("dec.ln_ff", d)
        dense("dec.ff1", d, ff)
        dense("dec.ff2", ff, d)
        norm("dec.ln_out", d)
        for slot, n in zip(SLOT_NAMES, cfg.class_counts):
            dense(f"head.{slot}", d, n)

    def no_decay_names(self) -> frozenset[str]:
        """Biases, norms, and embeddings are excluded from weight decay."""
        return frozenset(
            name for name in self.params
            if name.endswith((".b", ".g")) or "emb" in name or name == "dec.ctx_pos"
        )

    # ------------------------------------------------------------ stages

    def _dense(self, name, x):
        return nx.linear(x, self.params[f"{name}.W"], self.params[f"{name}.b"])

    def _norm(self, name, x):
        return nx.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def patch_embed(self, frames: torch.Tensor) -> torch.Tensor:
        """``(..., T, 88)`` binary frames -> ``(..., T/6, d)`` tokens."""
        frames = torch.as_tensor(frames, dtype=self.dtype)
        x = nx.conv1d_patches(frames, self.params["patch.W"], self.params["patch.b"],
                              stride=self.config.patch_size)
        x = nx.glu(x)
        if self.config.positional_encoding:
            x = x + sinusoidal_positions(x.shape[-2], self.config.d_model, self.dtype)
        return x

    def encode(self, tokens: torch.Tensor, valid: torch.Tensor | None = None,
               training: bool = False, generator: torch.Generator | None = None) -> torch.Tensor:
        cfg = self.config
        x = nx.dropout(tokens, cfg.dropout, training, generator)
        for i in range(cfg.encoder_layers):
            h = self._norm(f"enc.{i}.ln1", x)
            h = nx.multi_head_attention(h, h, self.params.group(f"enc.{i}.attn"), cfg.heads, key_mask=valid)
            x = x + nx.dropout(h, cfg.dropout, training, generator)
            h = self._norm(f"enc.{i}.ln2", x)
            h = self._dense(f"enc.{i}.ff2", nx.gelu(self._dense(f"enc.{i}.ff1", h)))
            x = x + nx.dropout(h, cfg.dropout, training, generator)
        return self._norm("enc.ln_f", x)

    def predict_boundaries(self, H: torch.Tensor) -> torch.Tensor:
        h = nx.gelu(self._dense("boundary.fc1", H))
        return self._dense("boundary.fc2", h).squeeze(-1)

    def film_condition(self, H: torch.Tensor, boundary_feature: torch.Tensor):
        """Return ``(Z, gamma, beta)``; ``boundary_feature`` is one scalar per token."""
        e = torch.as_tensor(boundary_feature, dtype=self.dtype)
        u = self._norm("film.ln", torch.cat([H, e.unsqueeze(-1)], dim=-1))
        gamma = self._dense("film.gamma.fc2", nx.gelu(self._dense("film.gamma.fc1", u)))
        beta = self._dense("film.beta.fc2", nx.gelu(self._dense("film.beta.fc1", u)))
        Z = nx.layer_norm(H) * (1.0 + gamma) + beta
        return Z, gamma, beta

    def assemble_context(self, Z: torch.Tensor, H: torch.Tensor, t: int) -> torch.Tensor:
        """Rows ``[Z_t, H_{t-r}, ..., H_{t+r}]`` for one ``(L, d)`` sequence; out-of-range rows are zero."""
        L = H.shape[0]
        if not 0 <= t < L:
            raise IndexError(f"token index {t} out of range for length {L}")
        r = self.config.context_radius
        rows = [Z[t]]
        for j in range(t - r, t + r + 1):
            rows.append(H[j] if 0 <= j < L else torch.zeros_like(H[0]))
        return torch.stack(rows)

    def assemble_contexts(self, Z: torch.Tensor, H: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
        """Batched :meth:`assemble_context` for every token: ``(B, L, d)`` -> ``(B, L, 2r+2, d)``."""
        r = self.config.context_radius
        if valid is not None:
            H = H * valid.unsqueeze(-1).to(H.dtype)
        L = H.shape[-2]
        pad = torch.zeros(*H.shape[:-2], r, H.shape[-1], dtype=H.dtype)
        Hp = torch.cat([pad, H, pad], dim=-2)
        rows = [Z] + [Hp[..., k:k + L, :] for k in range(2 * r + 1)]
        return torch.stack(rows, dim=-2)

    def slot_inputs(self, slot_values: torch.Tensor) -> torch.Tensor:
        """``(..., 3)`` class indices (``MASKED`` = -1) -> ``(..., 3, d)`` decoder inputs."""
        slot_values = torch.as_tensor(slot_values, dtype=torch.long)
        rows = []
        for s, name in enumerate(SLOT_NAMES):
            v = slot_values[..., s]
            table = self.params[f"dec.class_emb.{name}"]
            committed = table[v.clamp(min=0)]
            masked = (v == MASKED).unsqueeze(-1).to(self.dtype)
            emb = masked * self.params["dec.mask_emb"] + (1.0 - masked) * committed
            rows.append(emb + self.params["dec.slot_emb"][s])
        return torch.stack(rows, dim=-2)

    def decode_step(self, X: torch.Tensor, C: torch.Tensor, training: bool = False,
                    generator: torch.Generator | None = None):
        """One decoder block over ``X`` ``(..., 3, d)`` attending to ``C`` ``(..., 2r+2, d)``.

        Returns the three slot logits ``(root, quality, bass)``.
        """
        cfg = self.config
        p = cfg.dropout
        kv = C + self.params["dec.ctx_pos"]
        x = X
        h = self._norm("dec.ln_sa", x)
        x = x + nx.dropout(nx.multi_head_attention(h, h, self.params.group("dec.sa"), cfg.heads),
                           p, training, generator)
        h = self._norm("dec.ln_ca", x)
        x = x + nx.dropout(nx.multi_head_attention(h, kv, self.params.group("dec.ca"), cfg.heads),
                           p, training, generator)
        h = self._norm("dec.ln_ff", x)
        h = self._dense("dec.ff2", nx.gelu(self._dense("dec.ff1", h)))
        x = x + nx.dropout(h, p, training, generator)
        y = self._norm("dec.ln_out", x)
        return tuple(self._dense(f"head.{name}", y[..., s, :]) for s, name in enumerate(SLOT_NAMES))

    # ------------------------------------------------------------ full pass

    def encode_pieces(self, frames, lengths=None, training: bool = False,
                      generator: torch.Generator | None = None, boundary_feature=None):
        """Run everything up to the context windows.

        ``frames`` is ``(B, T, 88)``; ``lengths`` gives valid token counts per
        piece (padding beyond is ignored).  Returns ``(boundary_logits, H, Z, C, valid)``.
        """
        frames = torch.as_tensor(frames, dtype=self.dtype)
        if frames.dim() == 2:
            frames = frames.unsqueeze(0)
        tokens = self.patch_embed(frames)
        B, L = tokens.shape[:2]
        if lengths is None:
            valid = torch.ones(B, L, dtype=torch.bool)
        else:
            valid = torch.arange(L)[None, :] < torch.as_tensor(lengths)[:, None]
        H = self.encode(tokens, valid, training, generator)
        e = self.predict_boundaries(H)
        if self.config.use_boundary:
            feature = torch.sigmoid(e) if boundary_feature is None else torch.as_tensor(
                boundary_feature, dtype=self.dtype)
            Z, _, _ = self.film_condition(H, feature)
        else:
            Z = nx.layer_norm(H)
        C = self.assemble_contexts(Z, H, valid)
        return e, H, Z, C, valid

    def forward(self, frames, slot_values, lengths=None, training: bool = False,
                generator: torch.Generator | None = None, boundary_feature=None) -> ForwardOutput:
        """Joint pass: boundary logits plus per-token slot logits for the given mask pattern.

        ``slot_values`` is ``(B, L, 3)`` with ``MASKED`` marking slots to predict.
        Tokens are folded into the batch dimension for the decoder.
        """
        e, H, Z, C, valid = self.encode_pieces(frames, lengths, training, generator, boundary_feature)
        B, L = e.shape
        X = self.slot_inputs(torch.as_tensor(slot_values).reshape(B * L, 3))
        logits = self.decode_step(X, C.reshape(B * L, *C.shape[2:]), training, generator)
        logits = tuple(lg.reshape(B, L, -1) for lg in logits)
        return ForwardOutput(e, logits, H, Z, valid)

    # ------------------------------------------------------------ persistence

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"param/{k}": v for k, v in self.params.to_numpy().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.params.load_numpy({k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
