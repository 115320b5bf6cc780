"""The compressed dual encoder.

Each encoder stack is built from a few shared transformer blocks. Every
shared block is expanded into ``multiplex_factor`` effective layers through a
per-layer affine transform of its weight matrices (``W' = W * gamma + beta``,
broadcast over rows) and a private pair of layer norms. The text side looks
tokens up through a rank-``r`` factorised embedding ``A @ B``.
"""

from __future__ import annotations

import math
import warnings
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DegenerateInputError, DimensionError, TokenizationError
from .numerics import generator, get_dtype, l2_normalize

MATRICES = ("wq", "wk", "wv", "wo", "w1", "w2")
# no key bias: it shifts every score of a query equally and softmax cancels it
BIASES = ("bq", "bv", "bo", "b1", "b2")


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int
    num_shared: int
    d: int
    heads: int
    ffn_dim: int
    max_seq_len: int

    def __post_init__(self):
        if min(self.num_layers, self.num_shared, self.d, self.heads, self.ffn_dim, self.max_seq_len) < 1:
            raise ConfigError(f"encoder sizes must be positive: {self}")
        if self.num_layers % self.num_shared:
            raise ConfigError(
                f"num_layers={self.num_layers} is not a multiple of num_shared={self.num_shared}"
            )
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")

    @property
    def multiplex_factor(self) -> int:
        return self.num_layers // self.num_shared

    def unshared(self) -> "EncoderConfig":
        """The same encoder with one private block per layer."""
        return EncoderConfig(self.num_layers, self.num_layers, self.d, self.heads, self.ffn_dim, self.max_seq_len)

    def to_dict(self) -> dict:
        return asdict(self)


def _param(shape, g, std, dtype, device=None, fill=None) -> nn.Parameter:
    if device == "meta" or (device is not None and torch.device(device).type == "meta"):
        return nn.Parameter(torch.empty(shape, dtype=dtype, device="meta"))
    if fill is not None:
        return nn.Parameter(torch.full(shape, float(fill), dtype=dtype))
    return nn.Parameter(torch.randn(shape, generator=g, dtype=dtype) * std)


def _layer_norm(x, weight, bias):
    return F.layer_norm(x, (x.shape[-1],), weight, bias, eps=1e-5)


class MultiplexedBlock(nn.Module):
    """One shared pre-norm transformer block feeding ``n_instances`` effective layers."""

    def __init__(self, d, heads, ffn_dim, n_instances, g, dtype, device=None):
        super().__init__()
        self.d, self.heads, self.ffn_dim, self.n_instances = d, heads, ffn_dim, n_instances
        shapes = {"wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d), "w1": (d, ffn_dim), "w2": (ffn_dim, d)}
        self.shared = nn.ParameterDict()
        for name in MATRICES:
            fan_in = shapes[name][0]
            self.shared[name] = _param(shapes[name], g, 1.0 / math.sqrt(fan_in), dtype, device)
        for name, size in zip(BIASES, (d, d, d, ffn_dim, d)):
            self.shared[name] = _param((size,), g, 0.0, dtype, device, fill=0.0)
        # a factor of 1 is an ordinary unshared block: no transform parameters
        self.transforms = nn.ModuleList()
        if n_instances > 1:
            for _ in range(n_instances):
                t = nn.ParameterDict()
                for name in MATRICES:
                    out = shapes[name][1]
                    t["gamma_" + name] = _param((out,), g, 0.0, dtype, device, fill=1.0)
                    t["beta_" + name] = _param((out,), g, 0.0, dtype, device, fill=0.0)
                self.transforms.append(t)
        self.norms = nn.ModuleList()
        for _ in range(n_instances):
            n = nn.ParameterDict()
            for which in ("ln1", "ln2"):
                n[which + "_w"] = _param((d,), g, 0.0, dtype, device, fill=1.0)
                n[which + "_b"] = _param((d,), g, 0.0, dtype, device, fill=0.0)
            self.norms.append(n)

    def expand(self, instance: int) -> Dict[str, torch.Tensor]:
        if not 0 <= instance < self.n_instances:
            raise IndexError(f"instance {instance} out of range for factor {self.n_instances}")
        out = {}
        for name in MATRICES:
            w = self.shared[name]
            if self.transforms:
                t = self.transforms[instance]
                w = w * t["gamma_" + name] + t["beta_" + name]
            out[name] = w
        for name in BIASES:
            out[name] = self.shared[name]
        out.update(dict(self.norms[instance].items()))
        return out

    def forward(self, x, instance, key_padding=None):
        return block_forward(x, self.expand(instance), self.heads, key_padding)


def multiplex_expand(block: MultiplexedBlock, instance: int) -> Dict[str, torch.Tensor]:
    """Effective weights of one derived layer; differentiable in shared weights and transforms."""
    return block.expand(instance)


def attention(q, k, v, heads, mask=None):
    """Multi-head scaled dot-product attention on (B, L, d) inputs.

    ``mask`` is boolean and broadcastable to (B, 1, Lq, Lk); True marks allowed positions.
    """
    b, lq, d = q.shape
    lk = k.shape[1]
    hd = d // heads
    q = q.view(b, lq, heads, hd).transpose(1, 2)
    k = k.view(b, lk, heads, hd).transpose(1, 2)
    v = v.view(b, lk, heads, hd).transpose(1, 2)
    scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    out = torch.softmax(scores, dim=-1) @ v
    return out.transpose(1, 2).reshape(b, lq, d)


def block_forward(x, w, heads, key_padding=None):
    mask = None
    if key_padding is not None:
        mask = (~key_padding)[:, None, None, :]
    h = _layer_norm(x, w["ln1_w"], w["ln1_b"])
    a = attention(h @ w["wq"] + w["bq"], h @ w["wk"], h @ w["wv"] + w["bv"], heads, mask)
    x = x + a @ w["wo"] + w["bo"]
    h = _layer_norm(x, w["ln2_w"], w["ln2_b"])
    return x + F.gelu(h @ w["w1"] + w["b1"]) @ w["w2"] + w["b2"]


class EncoderStack(nn.Module):
    def __init__(self, cfg: EncoderConfig, g, dtype, device=None):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList(
            MultiplexedBlock(cfg.d, cfg.heads, cfg.ffn_dim, cfg.multiplex_factor, g, dtype, device)
            for _ in range(cfg.num_shared)
        )

    def layer_plan(self) -> List[Tuple[int, int]]:
        """(shared block, instance) for each effective layer; consecutive layers share a block."""
        k = self.cfg.multiplex_factor
        return [(i // k, i % k) for i in range(self.cfg.num_layers)]

    def forward(self, x, key_padding=None):
        for b, inst in self.layer_plan():
            x = self.blocks[b](x, inst, key_padding)
        return x


class DecomposedEmbedding(nn.Module):
    """Token embedding factorised as ``A (V x r) @ B (r x d)``."""

    def __init__(self, vocab, d, rank, g=None, dtype=None, device=None):
        super().__init__()
        dtype = dtype or get_dtype()
        g = g if g is not None else generator(0)
        self.vocab, self.d, self.rank = vocab, d, rank
        self.A = _param((vocab, rank), g, 1.0, dtype, device)
        self.B = _param((rank, d), g, 1.0 / math.sqrt(rank), dtype, device)

    def forward(self, ids):
        return F.embedding(ids, self.A) @ self.B

    def lookup(self, token: int) -> torch.Tensor:
        return self.A[token] @ self.B


class FullEmbedding(nn.Module):
    def __init__(self, vocab, d, g=None, dtype=None, device=None):
        super().__init__()
        dtype = dtype or get_dtype()
        g = g if g is not None else generator(0)
        self.vocab, self.d = vocab, d
        self.weight = _param((vocab, d), g, 1.0, dtype, device)

    def forward(self, ids):
        return F.embedding(ids, self.weight)


def embedding_parameter_count(vocab: int, d: int, rank: Optional[int] = None) -> int:
    return vocab * d if rank is None else vocab * rank + rank * d


class _Embed(nn.Module):
    def __init__(self, n_positions, d, g, dtype, device=None):
        super().__init__()
        self.cls = _param((d,), g, 1.0, dtype, device)
        self.pos = _param((n_positions, d), g, 0.1, dtype, device)

    def forward(self, x):
        b, n, d = x.shape
        cls = self.cls.expand(b, 1, d)
        return torch.cat([cls, x], dim=1) + self.pos[: n + 1]


class _Head(nn.Module):
    def __init__(self, d, joint_dim, g, dtype, device=None):
        super().__init__()
        self.ln_w = _param((d,), g, 0.0, dtype, device, fill=1.0)
        self.ln_b = _param((d,), g, 0.0, dtype, device, fill=0.0)
        self.proj = _param((d, joint_dim), g, 1.0 / math.sqrt(d), dtype, device)

    def forward(self, h):
        return _layer_norm(h, self.ln_w, self.ln_b) @ self.proj


class VisionEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, patch_dim, joint_dim, g, dtype, device=None):
        super().__init__()
        self.cfg, self.patch_dim = cfg, patch_dim
        self.stem = nn.ParameterDict({
            "weight": _param((patch_dim, cfg.d), g, 1.0 / math.sqrt(patch_dim), dtype, device),
            "bias": _param((cfg.d,), g, 0.1, dtype, device),
        })
        for p in self.stem.values():
            p.requires_grad_(False)
        self.embed = _Embed(cfg.max_seq_len + 1, cfg.d, g, dtype, device)
        self.blocks = EncoderStack(cfg, g, dtype, device)
        self.head = _Head(cfg.d, joint_dim, g, dtype, device)

    def load_stem(self, weight: torch.Tensor, bias: torch.Tensor) -> None:
        with torch.no_grad():
            self.stem["weight"].copy_(weight)
            self.stem["bias"].copy_(bias)

    def forward(self, patches):
        """(B, N, patch_dim) -> (v0 (B, J) normalised, V (B, N, J))."""
        if patches.dim() != 3 or patches.shape[-1] != self.patch_dim:
            raise DimensionError(
                f"expected patches (B, N, {self.patch_dim}), got {tuple(patches.shape)}"
            )
        if patches.shape[1] > self.cfg.max_seq_len:
            raise DimensionError(f"{patches.shape[1]} patches exceed max_seq_len={self.cfg.max_seq_len}")
        x = patches.to(self.stem["weight"].dtype) @ self.stem["weight"] + self.stem["bias"]
        h = self.head(self.blocks(self.embed(x)))
        return l2_normalize(h[:, 0]), h[:, 1:]


class TextEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, vocab, rank, joint_dim, g, dtype, device=None):
        super().__init__()
        self.cfg, self.vocab = cfg, vocab
        if rank is None:
            self.token_embedding = FullEmbedding(vocab, cfg.d, g, dtype, device)
        else:
            self.token_embedding = DecomposedEmbedding(vocab, cfg.d, rank, g, dtype, device)
        self.embed = _Embed(cfg.max_seq_len + 1, cfg.d, g, dtype, device)
        self.blocks = EncoderStack(cfg, g, dtype, device)
        self.head = _Head(cfg.d, joint_dim, g, dtype, device)

    def forward(self, ids, lengths=None):
        """(B, L) padded ids -> (u0 (B, J) normalised, U (B, L, J))."""
        b, n = ids.shape
        key_padding = None
        if lengths is not None:
            pos = torch.arange(n + 1)
            key_padding = pos[None, :] > torch.as_tensor(lengths)[:, None]
        h = self.head(self.blocks(self.embed(self.token_embedding(ids)), key_padding))
        return l2_normalize(h[:, 0]), h[:, 1:]


class LCLIPModel(nn.Module):
    def __init__(self, vision_cfg, text_cfg, vocab, rank, joint_dim, patch_dim, seed, dtype=None, device=None):
        super().__init__()
        dtype = dtype or get_dtype()
        g = generator(seed)
        self.vision_cfg, self.text_cfg = vision_cfg, text_cfg
        self.vocab, self.rank, self.joint_dim, self.patch_dim, self.seed = vocab, rank, joint_dim, patch_dim, seed
        self.vision = VisionEncoder(vision_cfg, patch_dim, joint_dim, g, dtype, device)
        self.text = TextEncoder(text_cfg, vocab, rank, joint_dim, g, dtype, device)

    @property
    def dtype(self):
        return self.vision.stem["weight"].dtype

    def config(self) -> dict:
        return {
            "vision": self.vision_cfg.to_dict(),
            "text": self.text_cfg.to_dict(),
            "vocab": self.vocab,
            "rank": self.rank,
            "joint_dim": self.joint_dim,
            "patch_dim": self.patch_dim,
            "seed": self.seed,
        }

    @classmethod
    def from_config(cls, cfg: dict, dtype=None) -> "LCLIPModel":
        return cls(
            EncoderConfig(**cfg["vision"]), EncoderConfig(**cfg["text"]), cfg["vocab"], cfg["rank"],
            cfg["joint_dim"], cfg["patch_dim"], cfg["seed"], dtype=dtype,
        )

    def text_parameters(self):
        return self.text.parameters()

    def vision_parameters(self):
        return self.vision.parameters()

    # -- encode interface -------------------------------------------------
    def encode_image(self, patches: torch.Tensor):
        v0, V = self.encode_images(patches.unsqueeze(0))
        return v0[0], V[0]

    def encode_images(self, patches: torch.Tensor):
        return self.vision(torch.as_tensor(patches))

    def _check_ids(self, ids: Sequence[int]):
        if len(ids) == 0:
            raise DegenerateInputError("empty token sequence")
        if len(ids) > self.text_cfg.max_seq_len:
            raise DimensionError(f"sequence of {len(ids)} tokens exceeds max_seq_len={self.text_cfg.max_seq_len}")
        for t in ids:
            if not 0 <= int(t) < self.vocab:
                raise TokenizationError(f"token id {t} outside vocabulary of size {self.vocab}")

    def encode_text(self, token_ids: Sequence[int]):
        u0, U = self.encode_texts([token_ids])
        return u0[0], U[0][: len(token_ids)]

    def encode_texts(self, batch: Sequence[Sequence[int]]):
        for ids in batch:
            self._check_ids(ids)
        ids, lengths = pad_batch(batch)
        return self.text(ids, lengths)


def pad_batch(batch: Sequence[Sequence[int]], pad_id: int = 0):
    n = max(len(s) for s in batch)
    ids = torch.full((len(batch), n), pad_id, dtype=torch.long)
    for i, s in enumerate(batch):
        ids[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return ids, torch.tensor([len(s) for s in batch])


def build_model(
    vision_cfg: EncoderConfig,
    text_cfg: EncoderConfig,
    vocab: int,
    rank: Optional[int],
    joint_dim: int,
    seed: int,
    patch_dim: int = 32,
    dtype: Optional[torch.dtype] = None,
    device=None,
) -> LCLIPModel:
    """Initialise an L-CLIP model. ``rank=None`` keeps the full V x d embedding."""
    if rank is not None:
        if rank < 1 or rank > min(vocab, text_cfg.d):
            raise ConfigError(f"rank={rank} must lie in [1, min(vocab={vocab}, d={text_cfg.d})]")
        if embedding_parameter_count(vocab, text_cfg.d, rank) >= vocab * text_cfg.d:
            warnings.warn(
                f"rank {rank} factorisation uses {embedding_parameter_count(vocab, text_cfg.d, rank)} "
                f"parameters, not fewer than the full {vocab * text_cfg.d}",
                stacklevel=2,
            )
    if joint_dim < 1 or patch_dim < 1:
        raise ConfigError("joint_dim and patch_dim must be positive")
    return LCLIPModel(vision_cfg, text_cfg, vocab, rank, joint_dim, patch_dim, seed, dtype, device)


def parameter_count(module: nn.Module, depth: int = 2) -> "OrderedDict[str, int]":
    """Per-component parameter counts plus ``trainable``, ``frozen`` and ``total``.

    Components are parameter names truncated to ``depth`` dotted parts.
    ``total`` equals the sum of the components and of trainable + frozen.
    """
    out: "OrderedDict[str, int]" = OrderedDict()
    trainable = frozen = 0
    for name, p in module.named_parameters():
        key = ".".join(name.split(".")[:depth])
        out[key] = out.get(key, 0) + p.numel()
        if p.requires_grad:
            trainable += p.numel()
        else:
            frozen += p.numel()
    out["trainable"] = trainable
    out["frozen"] = frozen
    out["total"] = trainable + frozen
    return out
