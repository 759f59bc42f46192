"""Transformer Neural Decision Process: embedders, masked encoder and the two heads."""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from tndp.core import TNDPInput

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """A weights or checkpoint file is corrupt, truncated or incompatible."""


@dataclass(frozen=True)
class ModelConfig:
    d_x: int
    max_steps: int
    n_decisions: Optional[int] = None
    gamma_dim: int = 0
    embed_dim: int = 32
    n_layers: int = 6
    n_heads: int = 8
    mlp_hidden: int = 128
    embedder_depth: int = 4
    embedder_hidden: int = 32
    head_hidden: int = 32
    std_floor: float = 1e-4

    def __post_init__(self):
        for f in ("d_x", "max_steps", "embed_dim", "n_layers", "n_heads", "mlp_hidden",
                  "embedder_depth", "embedder_hidden", "head_hidden"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")
        if self.gamma_dim not in (0, self.d_x):
            # the task context is embedded with the covariate embedder
            raise ValueError("gamma_dim must be 0 or equal to d_x")
        if self.n_decisions is not None and self.n_decisions <= 0:
            raise ValueError("n_decisions must be positive")

    def signature(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class Batch:
    """Tensors for B episodes sharing the same context/prediction/query sizes."""

    xc: torch.Tensor
    yc: torch.Tensor
    xp: torch.Tensor
    xq: torch.Tensor
    step: torch.Tensor
    tc: Optional[torch.Tensor] = None
    tp: Optional[torch.Tensor] = None
    tq: Optional[torch.Tensor] = None
    gamma: Optional[torch.Tensor] = None

    @property
    def sizes(self) -> tuple[int, int, int]:
        return self.xc.shape[1], self.xp.shape[1], self.xq.shape[1]

    def to(self, dtype: torch.dtype) -> "Batch":
        cast = lambda t: t.to(dtype) if t is not None else None  # noqa: E731
        return Batch(cast(self.xc), cast(self.yc), cast(self.xp), cast(self.xq), self.step,
                     self.tc, self.tp, self.tq, cast(self.gamma))


def _tensor(a, dtype=torch.float32):
    return torch.as_tensor(np.asarray(a), dtype=dtype)


def collate(items: Sequence[dict], dtype=torch.float32) -> Batch:
    """Stack per-episode array dicts (keys as in :class:`Batch`) into a batch."""
    def stack(key, dt):
        vals = [it.get(key) for it in items]
        if any(v is None for v in vals):
            return None
        return _tensor(np.stack([np.asarray(v) for v in vals]), dt)

    gamma = stack("gamma", dtype)
    if gamma is not None and gamma.shape[-1] == 0:
        gamma = None
    return Batch(
        xc=stack("xc", dtype), yc=stack("yc", dtype), xp=stack("xp", dtype), xq=stack("xq", dtype),
        step=_tensor([it["step"] for it in items], torch.long),
        tc=stack("tc", torch.long), tp=stack("tp", torch.long), tq=stack("tq", torch.long),
        gamma=gamma,
    )


def input_to_arrays(inp: TNDPInput, d_x: int) -> dict:
    xc, tc, yc = inp.context.arrays()
    xc = xc.reshape(-1, d_x)

    def designs(ds):
        x = np.array([d.coordinates for d in ds], dtype=float).reshape(-1, d_x)
        tags = [d.decision_tag for d in ds]
        if not ds:
            return x, np.zeros(0, dtype=int)
        return x, (np.array(tags, dtype=int) if all(t is not None for t in tags) else None)

    xp, tp = designs(inp.prediction_designs)
    xq, tq = designs(inp.query_designs)
    if tc is None and len(yc) == 0 and tp is not None:
        tc = np.zeros(0, dtype=int)
    for arr in (xc, xp, xq):
        if arr.shape[1] != d_x:
            raise ValueError(f"design dimension {arr.shape[1]} does not match configured d_x={d_x}")
    return dict(xc=xc, tc=tc, yc=yc, xp=xp, tp=tp, xq=xq, tq=tq,
                step=inp.global_info.step, gamma=np.array(inp.global_info.task_context, dtype=float))


def build_mask(n_c: int, n_p: int, n_q: int, n_gi: int = 1) -> np.ndarray:
    """Boolean attention mask, ``mask[i, j]`` True when token i may attend to token j.

    Token order is context, prediction, query, global info. Context and GI
    tokens see context and GI; each prediction or query token sees itself,
    the context and GI only.
    """
    if min(n_c, n_p, n_q, n_gi) < 0:
        raise ValueError("token counts must be non-negative")
    n = n_c + n_p + n_q + n_gi
    mask = np.zeros((n, n), dtype=bool)
    ctx = slice(0, n_c)
    gi = slice(n - n_gi, n)
    mask[:, ctx] = True
    mask[:, gi] = True
    targets = np.arange(n_c, n_c + n_p + n_q)
    mask[targets, targets] = True
    return mask


def mlp(d_in: int, hidden: int, d_out: int, depth: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    d = d_in
    for _ in range(depth - 1):
        layers += [nn.Linear(d, hidden), nn.ReLU()]
        d = hidden
    layers.append(nn.Linear(d, d_out))
    return nn.Sequential(*layers)


@dataclass
class ModelOutput:
    mean: torch.Tensor
    std: torch.Tensor
    logits: torch.Tensor

    def predictions(self, b: int = 0):
        from tndp.core import GaussianPrediction

        return [GaussianPrediction(float(m), float(s))
                for m, s in zip(self.mean[b].tolist(), self.std[b].tolist())]


def _softmax(s: torch.Tensor) -> torch.Tensor:
    # torch.softmax is slow on CPU for short rows; this is ~4x faster here
    e = (s - s.amax(-1, keepdim=True).detach()).exp()
    return e / e.sum(-1, keepdim=True)


class EncoderLayer(nn.Module):
    """Pre-norm transformer block whose attention follows :func:`build_mask`.

    Context and GI tokens attend to each other; every prediction/query token
    attends to the context, GI and itself. The structured path computes
    exactly that without materialising the full score matrix.
    """

    def __init__(self, d_model: int, n_heads: int, d_ff: int):
        super().__init__()
        self.n_heads = n_heads
        self.in_proj = nn.Linear(d_model, 3 * d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(nn.Linear(d_model, d_ff), nn.ReLU(), nn.Linear(d_ff, d_model))

    def _heads(self, x):
        b, n, d = x.shape
        return x.view(b, n, self.n_heads, d // self.n_heads).transpose(1, 2)

    def attend(self, x: torch.Tensor, n_c: int, mask: Optional[torch.Tensor]) -> torch.Tensor:
        b, n, d = x.shape
        q, k, v = (self._heads(t) for t in self.in_proj(x).chunk(3, dim=-1))
        scale = (d // self.n_heads) ** -0.5
        if mask is not None:
            scores = (q @ k.transpose(-1, -2)) * scale
            scores = scores.masked_fill(~mask, float("-inf"))
            out = torch.softmax(scores, dim=-1) @ v
        else:
            src = torch.cat([torch.arange(n_c), torch.tensor([n - 1])]).to(x.device)
            ks, vs = k[:, :, src], v[:, :, src]
            s_src = (q[:, :, src] @ ks.transpose(-1, -2)) * scale
            out_src = _softmax(s_src) @ vs
            qt, kt, vt = q[:, :, n_c:n - 1], k[:, :, n_c:n - 1], v[:, :, n_c:n - 1]
            s_t = torch.cat([(qt @ ks.transpose(-1, -2)) * scale,
                             (qt * kt).sum(-1, keepdim=True) * scale], dim=-1)
            w = _softmax(s_t)
            out_t = w[..., :-1] @ vs + w[..., -1:] * vt
            out = torch.cat([out_src[:, :, :n_c], out_t, out_src[:, :, n_c:]], dim=2)
        return self.out_proj(out.transpose(1, 2).reshape(b, n, d))

    def forward(self, x, n_c: int, mask: Optional[torch.Tensor] = None):
        x = x + self.attend(self.norm1(x), n_c, mask)
        return x + self.ff(self.norm2(x))


class TNDP(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        self.design_embedder = mlp(c.d_x, c.embedder_hidden, c.embed_dim, c.embedder_depth)
        self.outcome_embedder = mlp(1, c.embedder_hidden, c.embed_dim, c.embedder_depth)
        self.step_embedder = nn.Embedding(c.max_steps + 1, c.embed_dim)
        self.decision_embedder = nn.Embedding(c.n_decisions, c.embed_dim) if c.n_decisions else None
        # N(0, 1) lookup rows would swamp the MLP-embedded designs and task context
        for table in (self.step_embedder, self.decision_embedder):
            if table is not None:
                nn.init.normal_(table.weight, std=0.02)
        self.layers = nn.ModuleList(
            EncoderLayer(c.embed_dim, c.n_heads, c.mlp_hidden) for _ in range(c.n_layers)
        )
        self.final_norm = nn.LayerNorm(c.embed_dim)
        self.prediction_head = mlp(c.embed_dim, c.head_hidden, 2, 2)
        self.query_head = mlp(c.embed_dim, c.head_hidden, 1, 2)
        self._mask_cache: dict[tuple[int, int, int], torch.Tensor] = {}

    def _designs(self, x, tags):
        if x.shape[-1] != self.config.d_x:
            raise ValueError(f"design dimension {x.shape[-1]} does not match d_x={self.config.d_x}")
        e = self.design_embedder(x)
        if self.decision_embedder is not None:
            if tags is None:
                raise ValueError("this model expects decision tags on every design")
            e = e + self.decision_embedder(tags)
        return e

    def embed(self, batch: Batch) -> torch.Tensor:
        """Token embeddings ``[context, prediction, query, GI]`` of width embed_dim."""
        ec = self._designs(batch.xc, batch.tc) + self.outcome_embedder(batch.yc.unsqueeze(-1))
        ep = self._designs(batch.xp, batch.tp)
        eq = self._designs(batch.xq, batch.tq)
        if (batch.step > self.config.max_steps).any():
            raise ValueError(f"step exceeds max_steps={self.config.max_steps}")
        egi = self.step_embedder(batch.step)
        if batch.gamma is not None and self.config.gamma_dim:
            egi = egi + self.design_embedder(batch.gamma)
        return torch.cat([ec, ep, eq, egi.unsqueeze(1)], dim=1)

    def attention_mask(self, n_c: int, n_p: int, n_q: int, device=None) -> torch.Tensor:
        key = (n_c, n_p, n_q)
        if key not in self._mask_cache:
            allowed = torch.from_numpy(build_mask(n_c, n_p, n_q, 1))
            self._mask_cache[key] = allowed
        return self._mask_cache[key].to(device)

    def encode(self, tokens: torch.Tensor, n_c: int, n_p: int, n_q: int, dense: bool = False) -> torch.Tensor:
        """Run the encoder stack. ``dense=True`` applies the full boolean mask
        (reference path); the default exploits its structure."""
        mask = self.attention_mask(n_c, n_p, n_q, tokens.device) if dense else None
        for layer in self.layers:
            tokens = layer(tokens, n_c, mask)
        return self.final_norm(tokens)

    def forward(self, batch: Batch, dense: bool = False) -> ModelOutput:
        n_c, n_p, n_q = batch.sizes
        tokens = self.embed(batch)
        hidden = self.encode(tokens, n_c, n_p, n_q, dense=dense)
        hp = hidden[:, n_c:n_c + n_p]
        hq = hidden[:, n_c + n_p:n_c + n_p + n_q]
        raw = self.prediction_head(hp)
        mean = raw[..., 0]
        std = self.config.std_floor + F.softplus(raw[..., 1])
        logits = self.query_head(hq).squeeze(-1)
        return ModelOutput(mean, std, logits)

    @torch.no_grad()
    def predict_input(self, inp: TNDPInput) -> ModelOutput:
        dtype = next(self.parameters()).dtype
        return self(collate([input_to_arrays(inp, self.config.d_x)], dtype=dtype))


def policy_distribution(logits) -> np.ndarray:
    """Softmax over query logits."""
    z = np.asarray(logits, dtype=float)
    if z.size == 0:
        raise ValueError("policy needs at least one logit")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def atomic_torch_save(obj, path: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(obj, tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def read_checkpoint_file(path: str, kind: str) -> dict:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:  # torch raises several types for corrupt archives
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("format") != kind:
        raise CheckpointError(f"{path} is not a {kind} file")
    if blob.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path} has version {blob.get('version')}, expected {FORMAT_VERSION}")
    return blob


def save_weights(model: TNDP, path: str) -> None:
    atomic_torch_save({
        "format": "tndp-weights",
        "version": FORMAT_VERSION,
        "config": asdict(model.config),
        "signature": model.config.signature(),
        "state_dict": model.state_dict(),
    }, path)


def model_from_blob(blob: dict, path: str, expected: Optional[ModelConfig]) -> TNDP:
    config = ModelConfig.from_dict(blob["config"])
    if config.signature() != blob.get("signature"):
        raise CheckpointError(f"{path}: stored config does not match its signature")
    if expected is not None and expected.signature() != config.signature():
        raise CheckpointError(f"{path}: model config {config} does not match expected {expected}")
    model = TNDP(config)
    state = blob["state_dict"]
    ref = model.state_dict()
    dtype = next(iter(state.values())).dtype if state else torch.float32
    if set(state) != set(ref) or any(state[k].shape != ref[k].shape for k in ref):
        raise CheckpointError(f"{path}: parameter tensors do not match the config")
    model = model.to(dtype)
    model.load_state_dict(state)
    return model


def load_weights(path: str, expected: Optional[ModelConfig] = None) -> TNDP:
    """Load a model saved by :func:`save_weights` (or a training checkpoint)."""
    try:
        blob = read_checkpoint_file(path, "tndp-weights")
    except CheckpointError:
        blob = read_checkpoint_file(path, "tndp-checkpoint")
    return model_from_blob(blob, path, expected)
