"""Span-prediction encoder over discrete units with local + global sparse attention.

Input layout is ``[BOS] z_q [SEP] z_p [EOS]``. ``[BOS]`` and the question
tokens are global: they attend to every position and every position attends
to them. All other tokens see only neighbours within ``local_window`` on
either side. A linear head maps the final hidden states to start and end
logits.

The sparse pattern is applied as a boolean mask over dense scores, which is
exact and cheap at the sequence lengths used here.
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from dualqa.unitizer import IndexSpan

N_SPECIAL = 5  # BOS, SEP, EOS, PAD, MASK
STRATEGIES = ("most_frequent", "least_frequent", "random", "re_init", "scratch")


@dataclass
class ModelConfig:
    n_units: int = 64
    max_len: int = 512
    layers: int = 4
    model_dim: int = 128
    heads: int = 4
    ffn_dim: int = 512
    local_window: int = 32
    dropout: float = 0.1

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")
        if self.max_len < self.local_window:
            raise ValueError("max_len must be >= local_window")
        if self.n_units < 1:
            raise ValueError("n_units must be >= 1")

    @property
    def vocab_size(self) -> int:
        return self.n_units + N_SPECIAL

    @property
    def bos(self) -> int:
        return self.n_units

    @property
    def sep(self) -> int:
        return self.n_units + 1

    @property
    def eos(self) -> int:
        return self.n_units + 2

    @property
    def pad(self) -> int:
        return self.n_units + 3

    @property
    def mask(self) -> int:
        return self.n_units + 4

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class ModelInput:
    tokens: np.ndarray
    passage_mask: np.ndarray
    global_mask: np.ndarray
    target: tuple[int, int] | None = None
    passage_offset: int = 0
    example_id: str = ""
    dropped: bool = False
    truncated: bool = False

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.passage_mask = np.asarray(self.passage_mask, dtype=bool)
        self.global_mask = np.asarray(self.global_mask, dtype=bool)
        n = self.tokens.size
        if self.passage_mask.size != n or self.global_mask.size != n:
            raise ValueError("masks must match the token sequence length")
        if np.any(self.passage_mask & self.global_mask):
            raise ValueError("passage and global masks overlap")
        if self.target is not None:
            s, e = self.target
            if not (0 <= s <= e < n) or not self.passage_mask[s] or not self.passage_mask[e]:
                raise ValueError(f"target {self.target} not inside the passage")


@dataclass
class Batch:
    tokens: torch.Tensor
    valid: torch.Tensor
    global_mask: torch.Tensor
    passage_mask: torch.Tensor
    target: torch.Tensor | None = None


def collate(inputs: Sequence[ModelInput], pad_id: int) -> Batch:
    L = max(inp.tokens.size for inp in inputs)
    B = len(inputs)
    tokens = np.full((B, L), pad_id, dtype=np.int64)
    valid = np.zeros((B, L), dtype=bool)
    glob = np.zeros((B, L), dtype=bool)
    passage = np.zeros((B, L), dtype=bool)
    for b, inp in enumerate(inputs):
        n = inp.tokens.size
        tokens[b, :n] = inp.tokens
        valid[b, :n] = True
        glob[b, :n] = inp.global_mask
        passage[b, :n] = inp.passage_mask
    target = None
    if all(inp.target is not None for inp in inputs):
        target = torch.tensor([inp.target for inp in inputs], dtype=torch.long)
    return Batch(
        torch.from_numpy(tokens),
        torch.from_numpy(valid),
        torch.from_numpy(glob),
        torch.from_numpy(passage),
        target,
    )


def attention_mask(valid: torch.Tensor, global_mask: torch.Tensor, window: int) -> torch.Tensor:
    """Boolean (B, L, L) mask: True where query i may attend to key j."""
    L = valid.shape[1]
    pos = torch.arange(L)
    local = (pos[:, None] - pos[None, :]).abs() <= window
    allowed = local[None] | global_mask[:, :, None] | global_mask[:, None, :]
    allowed = allowed & valid[:, None, :]
    # padded queries keep their own position so no softmax row is empty
    return allowed | torch.eye(L, dtype=torch.bool)[None]


class SparseSelfAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.heads = cfg.heads
        self.head_dim = cfg.model_dim // cfg.heads
        self.q = nn.Linear(cfg.model_dim, cfg.model_dim)
        self.k = nn.Linear(cfg.model_dim, cfg.model_dim)
        self.v = nn.Linear(cfg.model_dim, cfg.model_dim)
        self.out = nn.Linear(cfg.model_dim, cfg.model_dim)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, mask, return_probs=False):
        B, L, D = x.shape

        def split(t):
            return t.view(B, L, self.heads, self.head_dim).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~mask[:, None], float("-inf"))
        probs = torch.softmax(scores, dim=-1)
        ctx = (self.drop(probs) @ v).transpose(1, 2).reshape(B, L, D)
        out = self.out(ctx)
        return (out, probs) if return_probs else out


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.model_dim)
        self.attn = SparseSelfAttention(cfg)
        self.ln2 = nn.LayerNorm(cfg.model_dim)
        self.ff1 = nn.Linear(cfg.model_dim, cfg.ffn_dim)
        self.ff2 = nn.Linear(cfg.ffn_dim, cfg.model_dim)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, mask, return_probs=False):
        a, probs = self.attn(self.ln1(x), mask, return_probs=True)
        x = x + self.drop(a)
        x = x + self.drop(self.ff2(F.gelu(self.ff1(self.ln2(x)))))
        return (x, probs) if return_probs else x


class SpanModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.model_dim)
        self.pos_emb = nn.Embedding(cfg.max_len, cfg.model_dim)
        self.drop = nn.Dropout(cfg.dropout)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(cfg.model_dim)
        self.span_head = nn.Linear(cfg.model_dim, 2)
        # bias of the tied masked-unit prediction head used for donor pretraining
        self.mlm_bias = nn.Parameter(torch.zeros(cfg.vocab_size))

    def encode(self, tokens, valid, global_mask, return_all=False):
        L = tokens.shape[1]
        if L > self.config.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len {self.config.max_len}")
        mask = attention_mask(valid, global_mask, self.config.local_window)
        h = self.drop(self.tok_emb(tokens) + self.pos_emb(torch.arange(L))[None])
        states, probs = [h], []
        for layer in self.layers:
            h, p = layer(h, mask, return_probs=True)
            states.append(h)
            probs.append(p)
        h = self.ln_f(h)
        return (h, states, probs) if return_all else h

    def forward(self, tokens, valid, global_mask):
        logits = self.span_head(self.encode(tokens, valid, global_mask))
        return logits[..., 0], logits[..., 1]

    def mlm_logits(self, tokens, valid, global_mask):
        h = self.encode(tokens, valid, global_mask)
        return h @ self.tok_emb.weight.T + self.mlm_bias


def init_weights(model: SpanModel, seed: int) -> SpanModel:
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias") or name == "mlm_bias":
                p.zero_()
            elif ".ln" in name or name.startswith("ln_f"):
                p.fill_(1.0)
            else:
                p.copy_(torch.randn(p.shape, generator=g) * 0.02)
    return model


def build_model(
    cfg: ModelConfig,
    seed: int = 0,
    donor: SpanModel | None = None,
    strategy: str = "scratch",
    freq_ranking: Sequence[int] | None = None,
) -> SpanModel:
    """Fresh model, optionally warm-started from a pretrained donor.

    Non-scratch strategies copy the donor's positional embeddings, encoder
    layers, final norm and special-token rows; unit rows come from
    :func:`assign_embeddings`. The span head is always freshly initialised.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    model = init_weights(SpanModel(cfg), seed)
    if strategy == "scratch":
        return model
    if donor is None:
        raise ValueError(f"strategy {strategy!r} needs a donor model")
    dc = donor.config
    if (dc.model_dim, dc.layers, dc.heads, dc.ffn_dim) != (cfg.model_dim, cfg.layers, cfg.heads, cfg.ffn_dim):
        raise ValueError("donor architecture does not match the model config")
    if dc.max_len < cfg.max_len:
        raise ValueError("donor max_len is shorter than the model's")
    if freq_ranking is None:
        freq_ranking = list(range(dc.n_units))
    donor_units = donor.tok_emb.weight.detach()[: dc.n_units].cpu().numpy()
    table = assign_embeddings(donor_units, freq_ranking, strategy, cfg.n_units, seed, cfg.model_dim)
    with torch.no_grad():
        model.pos_emb.weight.copy_(donor.pos_emb.weight[: cfg.max_len])
        model.layers.load_state_dict(donor.layers.state_dict())
        model.ln_f.load_state_dict(donor.ln_f.state_dict())
        model.tok_emb.weight[: cfg.n_units] = torch.as_tensor(table, dtype=model.tok_emb.weight.dtype)
        model.tok_emb.weight[cfg.n_units:] = donor.tok_emb.weight[dc.n_units:]
    return model


def assign_embeddings(
    donor: np.ndarray,
    freq_ranking: Sequence[int],
    strategy: str,
    K: int,
    seed: int,
    model_dim: int | None = None,
) -> np.ndarray:
    """Rows of the donor embedding table handed to the K discrete units.

    ``scratch`` draws fresh rows like ``re_init``; the difference between the
    two lives in :func:`build_model`, which skips the donor body for scratch.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    donor = np.asarray(donor, dtype=np.float64)
    V, d = donor.shape
    rng = np.random.default_rng(seed)
    if strategy in ("re_init", "scratch"):
        return rng.normal(0.0, 0.02, size=(K, model_dim or d))
    if V < K:
        raise ValueError(f"donor has {V} rows, fewer than K={K}")
    ranking = np.asarray(freq_ranking, dtype=np.int64)
    if strategy == "most_frequent":
        rows = ranking[:K]
    elif strategy == "least_frequent":
        rows = ranking[-K:]
    else:
        rows = rng.choice(V, size=K, replace=False)
    if rows.size < K:
        raise ValueError(f"freq_ranking has {ranking.size} entries, fewer than K={K}")
    return donor[rows[rng.permutation(K)]].copy()


def forward(model: SpanModel, inp: ModelInput | Sequence[ModelInput]):
    """Start and end logits for one input (1-D tensors) or a list (padded 2-D)."""
    single = isinstance(inp, ModelInput)
    batch = collate([inp] if single else inp, model.config.pad)
    start, end = model(batch.tokens, batch.valid, batch.global_mask)
    if single:
        return start[0], end[0]
    return start, end


def span_loss(start_logits, end_logits, target, passage_mask, reduction: str = "sum"):
    """Negative log-likelihood of the gold start and end, softmaxed over passage positions."""
    start_logits = torch.as_tensor(start_logits)
    end_logits = torch.as_tensor(end_logits)
    passage_mask = torch.as_tensor(passage_mask, dtype=torch.bool)
    target = torch.as_tensor(target, dtype=torch.long)
    if start_logits.dim() == 1:
        start_logits, end_logits = start_logits[None], end_logits[None]
        passage_mask, target = passage_mask[None], target[None]
    rows = torch.arange(target.shape[0])
    if not bool(passage_mask[rows, target[:, 0]].all() and passage_mask[rows, target[:, 1]].all()):
        raise ValueError("target lies outside the passage")
    neg = torch.finfo(start_logits.dtype).min
    ls = torch.log_softmax(start_logits.masked_fill(~passage_mask, neg), dim=-1)
    le = torch.log_softmax(end_logits.masked_fill(~passage_mask, neg), dim=-1)
    per_ex = -(ls[rows, target[:, 0]] + le[rows, target[:, 1]])
    if reduction == "none":
        return per_ex
    return per_ex.mean() if reduction == "mean" else per_ex.sum()


def decode_span(start_logits, end_logits, passage_mask, max_answer_len: int = 64) -> IndexSpan:
    """Best (s, e) with s <= e < s + max_answer_len, both in the passage.

    Ties go to the smallest s, then the smallest e.
    """
    s_log = np.asarray(torch.as_tensor(start_logits).detach().cpu(), dtype=np.float64)
    e_log = np.asarray(torch.as_tensor(end_logits).detach().cpu(), dtype=np.float64)
    pm = np.asarray(passage_mask, dtype=bool)
    if not pm.any():
        raise ValueError("no passage positions to decode from")
    n = s_log.size
    width = max(1, min(max_answer_len, n))
    e_idx = np.arange(n)[:, None] + np.arange(width)[None, :]
    inside = e_idx < n
    e_idx = np.minimum(e_idx, n - 1)
    ok = inside & pm[:, None] & pm[e_idx]
    score = np.where(ok, s_log[:, None] + e_log[e_idx], -np.inf)
    s, k = np.unravel_index(int(np.argmax(score)), score.shape)
    e = s + k
    return IndexSpan(int(s), int(e))


def backward(model: SpanModel, inp: ModelInput | Sequence[ModelInput], target=None) -> dict[str, torch.Tensor]:
    """Gradients of the summed span loss w.r.t. every named parameter."""
    inputs = [inp] if isinstance(inp, ModelInput) else list(inp)
    if target is not None:
        targets = [target] if isinstance(inp, ModelInput) else list(target)
    else:
        targets = [x.target for x in inputs]
    batch = collate(inputs, model.config.pad)
    start, end = model(batch.tokens, batch.valid, batch.global_mask)
    tgt = torch.tensor([tuple(t) if not isinstance(t, IndexSpan) else (t.start_idx, t.end_idx) for t in targets])
    loss = span_loss(start, end, tgt, batch.passage_mask)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss.item()}")
    names, params = zip(*[(n, p) for n, p in model.named_parameters() if p.requires_grad])
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    out = {}
    for n, p, g in zip(names, params, grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in {n}")
        out[n] = g
    return out


# -- checkpoint container -------------------------------------------------
#
# magic "DQCK" | version u32 | header_len u32 | JSON header | f32 LE tensors
# The header lists {name, shape} in payload order plus the model config and
# free-form metadata.

CKPT_MAGIC = b"DQCK"
CKPT_VERSION = 1
_CK_HEADER = struct.Struct("<4sII")


def save_tensors(path, tensors: dict[str, torch.Tensor], config: dict, meta: dict | None = None) -> None:
    entries, blobs = [], []
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = json.dumps({"config": config, "meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(_CK_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(header)) + header + b"".join(blobs))
    os.replace(tmp, path)


def load_tensors(path) -> tuple[dict[str, torch.Tensor], dict, dict]:
    raw = Path(path).read_bytes()
    magic, version, hlen = _CK_HEADER.unpack_from(raw)
    if magic != CKPT_MAGIC or version != CKPT_VERSION:
        raise ValueError(f"{path}: not a version-{CKPT_VERSION} checkpoint")
    header = json.loads(raw[_CK_HEADER.size:_CK_HEADER.size + hlen])
    off = _CK_HEADER.size + hlen
    tensors = {}
    for ent in header["tensors"]:
        n = int(np.prod(ent["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(ent["shape"])
        tensors[ent["name"]] = torch.from_numpy(arr.astype(np.float32))
        off += 4 * n
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    return tensors, header["config"], header["meta"]


def save_model(model: SpanModel, path, meta: dict | None = None) -> None:
    save_tensors(path, dict(model.state_dict()), model.config.to_dict(), meta)


def load_model(path) -> tuple[SpanModel, dict]:
    tensors, config, meta = load_tensors(path)
    model = SpanModel(ModelConfig(**config))
    model.load_state_dict({k: tensors[k] for k in model.state_dict()}, strict=True)
    model.eval()
    return model, meta
