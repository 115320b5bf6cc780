"""Toy autoregressive captioner with cross-entropy and self-critical training."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import attention
from .errors import ConfigError, ContractError, DataError, TrainingFailure
from .metric import l_clipscore, ref_l_clipscore
from .ngram import CorpusIDF, cider_d, tokens_of
from .numerics import generator, get_dtype
from .tokenizer import SPECIALS


@dataclass(frozen=True)
class CaptionerConfig:
    vocab: int
    vision_dim: int
    layers: int = 2
    dim: int = 32
    heads: int = 4
    max_len: int = 16
    pad_id: int = 0
    bos_id: int = 1
    eos_id: int = 2
    unk_id: Optional[int] = 3
    suppress_specials: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.max_len < 2:
            raise ConfigError("max_len must be at least 2")
        ids = [self.pad_id, self.bos_id, self.eos_id]
        if len(set(ids)) != 3 or any(not 0 <= i < self.vocab for i in ids):
            raise ConfigError("pad/bos/eos ids must be distinct and inside the vocabulary")
        if self.dim % self.heads:
            raise ConfigError("dim must be divisible by heads")
        if self.layers < 1:
            raise ConfigError("layers must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RewardConfig:
    """``alpha`` weights the embedding score; ``1 - alpha`` weights CIDEr-D."""

    alpha: float = 0.0
    use_refs: bool = False
    w: float = 2.5
    normalize: bool = False

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")

    def to_dict(self) -> dict:
        return asdict(self)


class _DecoderLayer(nn.Module):
    def __init__(self, dim, heads, dtype):
        super().__init__()
        kw = dict(dtype=dtype)
        self.heads = heads
        self.ln1, self.ln2, self.ln3 = (nn.LayerNorm(dim, **kw) for _ in range(3))
        # key projections carry no bias (softmax is invariant to it)
        self.self_q = nn.Linear(dim, dim, **kw)
        self.self_k = nn.Linear(dim, dim, bias=False, **kw)
        self.self_v = nn.Linear(dim, dim, **kw)
        self.self_out = nn.Linear(dim, dim, **kw)
        self.cross_q = nn.Linear(dim, dim, **kw)
        self.cross_k = nn.Linear(dim, dim, bias=False, **kw)
        self.cross_v = nn.Linear(dim, dim, **kw)
        self.cross_out = nn.Linear(dim, dim, **kw)
        self.ff1 = nn.Linear(dim, 4 * dim, **kw)
        self.ff2 = nn.Linear(4 * dim, dim, **kw)

    def forward(self, x, mem, causal):
        h = self.ln1(x)
        x = x + self.self_out(attention(self.self_q(h), self.self_k(h), self.self_v(h), self.heads, causal))
        q = self.cross_q(self.ln2(x))
        x = x + self.cross_out(attention(q, self.cross_k(mem), self.cross_v(mem), self.heads))
        return x + self.ff2(F.gelu(self.ff1(self.ln3(x))))


class Captioner(nn.Module):
    """Pre-norm transformer decoder cross-attending to per-patch vision embeddings."""

    def __init__(self, cfg: CaptionerConfig, dtype=None):
        super().__init__()
        self.cfg = cfg
        dtype = dtype or get_dtype()
        # seeded init without disturbing the caller's global RNG
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.tok = nn.Embedding(cfg.vocab, cfg.dim, dtype=dtype)
            self.pos = nn.Parameter(0.02 * torch.randn(cfg.max_len, cfg.dim, dtype=dtype))
            self.vis = nn.Linear(cfg.vision_dim, cfg.dim, dtype=dtype)
            self.vis_ln = nn.LayerNorm(cfg.dim, dtype=dtype)
            self.layers = nn.ModuleList(_DecoderLayer(cfg.dim, cfg.heads, dtype) for _ in range(cfg.layers))
            self.ln_f = nn.LayerNorm(cfg.dim, dtype=dtype)
            self.out = nn.Linear(cfg.dim, cfg.vocab, dtype=dtype)
        blocked = torch.zeros(cfg.vocab, dtype=torch.bool)
        if cfg.suppress_specials:
            for i in (cfg.pad_id, cfg.bos_id, cfg.unk_id):
                if i is not None:
                    blocked[i] = True
        self.register_buffer("blocked", blocked, persistent=False)

    @property
    def dtype(self):
        return self.pos.dtype

    def log_probs(self, V: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        """Next-token log-probabilities at every position: (B, L) tokens -> (B, L, vocab)."""
        if tokens.shape[1] > self.cfg.max_len:
            raise ContractError(f"prefix length {tokens.shape[1]} exceeds max_len {self.cfg.max_len}")
        L = tokens.shape[1]
        x = self.tok(tokens) + self.pos[:L]
        mem = self.vis_ln(self.vis(V.to(self.dtype)))
        causal = torch.ones(L, L, dtype=torch.bool).tril()[None, None]
        for layer in self.layers:
            x = layer(x, mem, causal)
        logits = self.out(self.ln_f(x)).masked_fill(self.blocked, float("-inf"))
        return torch.log_softmax(logits, dim=-1)

    def forward(self, V, tokens):
        return self.log_probs(V, tokens)


def _batch_V(V: torch.Tensor) -> torch.Tensor:
    V = torch.as_tensor(V)
    return V.unsqueeze(0) if V.dim() == 2 else V


def caption_forward(model: Captioner, V, prefix: Sequence[int]) -> torch.Tensor:
    """Distribution over the next token given a BOS-initial prefix."""
    prefix = list(prefix)
    if not prefix or prefix[0] != model.cfg.bos_id:
        raise ContractError("prefix must start with BOS")
    if len(prefix) >= model.cfg.max_len:
        raise ContractError(f"prefix length {len(prefix)} must be below max_len {model.cfg.max_len}")
    lp = model.log_probs(_batch_V(V), torch.tensor([prefix]))
    return lp[0, -1].exp()


def _gold_tensors(model: Captioner, gold: Sequence[Sequence[int]]) -> Tuple[torch.Tensor, torch.Tensor]:
    cfg = model.cfg
    L = max(len(g) for g in gold)
    if L > cfg.max_len:
        raise ContractError(f"gold length {L} exceeds max_len {cfg.max_len}")
    inp = torch.full((len(gold), L), cfg.pad_id, dtype=torch.long)
    tgt = torch.full((len(gold), L), cfg.pad_id, dtype=torch.long)
    for i, g in enumerate(gold):
        g = list(g)
        if not g or g[-1] != cfg.eos_id:
            raise DataError(f"gold sequence {i} is not EOS-terminated")
        if cfg.pad_id in g or cfg.eos_id in g[:-1]:
            raise DataError(f"gold sequence {i} contains padding or EOS before its end")
        inp[i, : len(g)] = torch.tensor([cfg.bos_id] + g[:-1])
        tgt[i, : len(g)] = torch.tensor(g)
    return inp, tgt


def xe_loss(model: Captioner, V, gold) -> torch.Tensor:
    """Mean token negative log-likelihood of EOS-terminated gold sequences (without BOS)."""
    if gold and isinstance(gold[0], (int, np.integer)):
        gold = [gold]
    V = _batch_V(V)
    inp, tgt = _gold_tensors(model, gold)
    lp = model.log_probs(V, inp)
    mask = tgt != model.cfg.pad_id
    picked = lp.gather(-1, tgt.unsqueeze(-1)).squeeze(-1)
    # suppressed specials have -inf log-prob, so padded slots must be selected out, not multiplied
    return -torch.where(mask, picked, torch.zeros_like(picked)).sum() / mask.sum()


def sequence_logprob(model: Captioner, V, seqs: Sequence[Sequence[int]]) -> torch.Tensor:
    """Differentiable sum of log-probs of each generated sequence (BOS excluded), shape (B,)."""
    cfg = model.cfg
    V = _batch_V(V)
    L = max(1, max(len(s) for s in seqs))
    inp = torch.full((len(seqs), L), cfg.pad_id, dtype=torch.long)
    tgt = torch.full((len(seqs), L), cfg.pad_id, dtype=torch.long)
    mask = torch.zeros(len(seqs), L, dtype=torch.bool)
    for i, s in enumerate(seqs):
        s = list(s)
        inp[i, : len(s)] = torch.tensor([cfg.bos_id] + s[:-1], dtype=torch.long)
        tgt[i, : len(s)] = torch.tensor(s, dtype=torch.long)
        mask[i, : len(s)] = True
    lp = model.log_probs(V, inp).gather(-1, tgt.unsqueeze(-1)).squeeze(-1)
    return torch.where(mask, lp, torch.zeros_like(lp)).sum(dim=1)


@torch.no_grad()
def sample_batch(model: Captioner, V, mode: str = "greedy", g: Optional[torch.Generator] = None):
    """Decode a batch. Returns token lists (EOS kept when produced) and per-token log-probs."""
    if mode not in ("greedy", "multinomial"):
        raise ValueError(f"mode must be greedy or multinomial, got {mode!r}")
    cfg = model.cfg
    V = _batch_V(V)
    B = V.shape[0]
    seq = torch.full((B, 1), cfg.bos_id, dtype=torch.long)
    done = torch.zeros(B, dtype=torch.bool)
    toks: List[List[int]] = [[] for _ in range(B)]
    lps: List[List[float]] = [[] for _ in range(B)]
    for _ in range(cfg.max_len - 1):
        lp = model.log_probs(V, seq)[:, -1]
        if mode == "greedy":
            nxt = lp.argmax(dim=-1)
        else:
            nxt = torch.multinomial(lp.exp(), 1, generator=g).squeeze(-1)
        chosen = lp.gather(-1, nxt[:, None]).squeeze(-1)
        for i in range(B):
            if not done[i]:
                toks[i].append(int(nxt[i]))
                lps[i].append(float(chosen[i]))
        done |= nxt == cfg.eos_id
        if bool(done.all()):
            break
        seq = torch.cat([seq, nxt[:, None]], dim=1)
    return toks, lps


def sample_caption(model: Captioner, V, mode: str = "greedy", seed: int = 0):
    toks, lps = sample_batch(model, V, mode, generator(seed))
    return toks[0], lps[0]


def repetition_rate(caption: Sequence[str]) -> float:
    words = [w for w in caption if w not in SPECIALS]
    if not words:
        return 0.0
    return 1.0 - len(set(words)) / len(words)


def mixed_reward(candidate: Sequence[str], refs, image_emb, u0_fn: Callable[[Sequence[str]], torch.Tensor],
                 idf: Optional[CorpusIDF], cfg: RewardConfig) -> float:
    """``(1 - alpha) * CIDEr-D + alpha * embedding score`` for one caption."""
    a = cfg.alpha
    if (a < 1.0 or cfg.use_refs) and not refs:
        raise ContractError("references are required for this reward configuration")
    cd = 0.0
    if a < 1.0:
        cd = cider_d(list(candidate), refs, idf)
        if cfg.normalize:
            cd /= 10.0
    m = 0.0
    if a > 0.0 and len(candidate):
        u0 = u0_fn(candidate)
        if cfg.use_refs:
            m = ref_l_clipscore(u0, [u0_fn(tokens_of(r)) for r in refs], image_emb, cfg.w)
            if cfg.normalize:
                m /= max(cfg.w, 1.0)
        else:
            m = l_clipscore(image_emb, u0, cfg.w)
            if cfg.normalize:
                m /= cfg.w
    return (1.0 - a) * cd + a * m


def scst_loss(advantage: torch.Tensor, seq_logprob: torch.Tensor) -> torch.Tensor:
    """Self-critical surrogate; advantages are treated as constants."""
    return -(advantage.detach() * seq_logprob).mean()


def scst_step(model: Captioner, V_batch, refs_batch, reward_fn: Callable[[int, List[int]], float],
              seed: int, optimizer: Optional[torch.optim.Optimizer] = None):
    """One self-critical update with the greedy decode as baseline.

    ``reward_fn(i, token_ids)`` scores a decoded caption of batch item ``i``.
    Returns the loss tensor and reward statistics; steps ``optimizer`` when given.
    """
    V_batch = _batch_V(V_batch)
    was_training = model.training
    model.eval()
    sampled, _ = sample_batch(model, V_batch, "multinomial", generator(seed))
    greedy, _ = sample_batch(model, V_batch, "greedy")
    model.train(was_training)
    rs, rg = [], []
    for i in range(len(sampled)):
        try:
            rs.append(float(reward_fn(i, sampled[i])))
            rg.append(float(reward_fn(i, greedy[i])))
        except Exception as exc:
            raise TrainingFailure(f"reward function failed on batch item {i}: {exc}") from exc
    rs_t = torch.tensor(rs, dtype=model.dtype)
    rg_t = torch.tensor(rg, dtype=model.dtype)
    loss = scst_loss(rs_t - rg_t, sequence_logprob(model, V_batch, sampled))
    if optimizer is not None:
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    stats = {"reward_sampled": float(np.mean(rs)), "reward_greedy": float(np.mean(rg)),
             "loss": float(loss.detach())}
    return loss, stats


# ---------------------------------------------------------------- training loop


@dataclass(frozen=True)
class CaptionTrainConfig:
    xe_epochs: int = 15
    scst_epochs: int = 25
    batch_size: int = 32
    xe_lr: float = 1e-3
    scst_lr: float = 1e-4
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


LOG_FIELDS = ("epoch", "mean_reward_sampled", "mean_reward_greedy", "cider", "lclipscore", "repetition_rate")


class RewardModel:
    """Reward side of SCST: an embedding model, its tokenizer and the CIDEr-D statistics."""

    def __init__(self, encoder, tokenizer, idf: CorpusIDF, cfg: RewardConfig):
        self.encoder, self.tokenizer, self.idf, self.cfg = encoder, tokenizer, idf, cfg
        self._cache: Dict[tuple, np.ndarray] = {}

    def words(self, ids: Sequence[int]) -> List[str]:
        return self.tokenizer.decode(ids)

    def u0(self, words: Sequence[str]) -> np.ndarray:
        key = tuple(words)
        if key not in self._cache:
            ids = [self.tokenizer.stoi[w] for w in words]
            self._cache[key] = self.encoder.encode_text(ids)[0].detach().cpu().numpy().astype(np.float64)
        return self._cache[key]

    def reward(self, ids, refs, v0) -> float:
        return mixed_reward(self.words(ids), refs, v0, self.u0, self.idf, self.cfg)

    def evaluate(self, captions: Sequence[Sequence[int]], refs_list, v0s) -> Dict[str, float]:
        cds, ls, reps = [], [], []
        for ids, refs, v0 in zip(captions, refs_list, v0s):
            words = self.words(ids)
            cds.append(cider_d(words, refs, self.idf))
            ls.append(l_clipscore(v0, self.u0(words), self.cfg.w) if words else 0.0)
            reps.append(repetition_rate(words))
        return {"cider": float(np.mean(cds)), "lclipscore": float(np.mean(ls)),
                "repetition_rate": float(np.mean(reps))}


def train_xe(model: Captioner, V: torch.Tensor, gold: Sequence[Sequence[int]], cfg: CaptionTrainConfig,
             log: Optional[list] = None) -> List[float]:
    g = generator(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.xe_lr)
    losses = []
    model.train()
    for epoch in range(cfg.xe_epochs):
        perm = torch.randperm(len(gold), generator=g).tolist()
        total = 0.0
        for s in range(0, len(perm), cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            loss = xe_loss(model, V[idx], [gold[i] for i in idx])
            if not torch.isfinite(loss):
                raise TrainingFailure("non-finite cross-entropy", step=epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        losses.append(total / len(gold))
    return losses


def train_scst(model: Captioner, V: torch.Tensor, refs: Sequence[Sequence[str]], v0s: np.ndarray,
               reward: RewardModel, cfg: CaptionTrainConfig, eval_set=None, log_path=None) -> List[dict]:
    """Self-critical epochs. ``eval_set = (V, refs, v0s)`` drives the per-epoch log; defaults to training data."""
    g = generator(cfg.seed + 1)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.scst_lr)
    eV, erefs, ev0 = eval_set if eval_set is not None else (V, refs, v0s)
    rows = []
    step = 0
    for epoch in range(cfg.scst_epochs):
        perm = torch.randperm(len(refs), generator=g).tolist()
        rs, rg = [], []
        for s in range(0, len(perm), cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]

            def reward_fn(i, ids, idx=idx):
                return reward.reward(ids, refs[idx[i]], v0s[idx[i]])

            loss, stats = scst_step(model, V[idx], [refs[i] for i in idx], reward_fn,
                                    seed=cfg.seed * 1_000_003 + step, optimizer=opt)
            if not math.isfinite(stats["loss"]):
                raise TrainingFailure("non-finite self-critical loss", step=step)
            rs.append(stats["reward_sampled"])
            rg.append(stats["reward_greedy"])
            step += 1
        model.eval()
        caps, _ = sample_batch(model, eV, "greedy")
        ev = reward.evaluate(caps, erefs, ev0)
        rows.append({"epoch": epoch, "mean_reward_sampled": float(np.mean(rs)),
                     "mean_reward_greedy": float(np.mean(rg)), **ev})
    if log_path is not None:
        write_scst_log(log_path, rows)
    return rows


def write_scst_log(dest, rows: Sequence[dict]) -> None:
    """CSV log of per-epoch rewards and held-out metrics; ``dest`` is a path or a text stream."""
    if not hasattr(dest, "write"):
        with open(dest, "w", newline="") as fh:
            return write_scst_log(fh, rows)
    w = csv.DictWriter(dest, fieldnames=LOG_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(float(r[k])) if k != "epoch" else int(r[k])) for k in LOG_FIELDS})


@dataclass
class CaptionTask:
    """Tensors for captioner training built from a planted corpus and a frozen image-text encoder.

    Cross-entropy targets are every reference of every training image.
    """

    V: torch.Tensor  # (n_items, n_patches, joint_dim) per-patch vision embeddings
    v0: np.ndarray  # (n_items, joint_dim) global image embeddings
    refs: List[List[str]]
    train_idx: np.ndarray
    heldout_idx: np.ndarray
    xe_index: List[int]
    xe_gold: List[List[int]]
    idf: CorpusIDF
    tokenizer: object

    def split(self, which: str):
        idx = self.train_idx if which == "train" else self.heldout_idx
        return self.V[idx], [self.refs[i] for i in idx], self.v0[idx]


def build_caption_task(corpus, encoder, tokenizer) -> CaptionTask:
    from .ngram import build_idf

    with torch.no_grad():
        v0, V = encoder.encode_images(torch.as_tensor(corpus.images, dtype=torch.float64))
    tr, he = corpus.train_idx, corpus.heldout_idx
    xe_index = [int(i) for i in tr for _ in corpus.references[i]]
    xe_gold = [tokenizer.encode(r, strict=True) + [tokenizer.eos_id] for i in tr for r in corpus.references[i]]
    idf = build_idf([corpus.references[i] for i in tr])
    return CaptionTask(V.detach().to(torch.float32), v0.detach().double().numpy(), [list(r) for r in corpus.references],
                       tr, he, xe_index, xe_gold, idf, tokenizer)


def pretrain_captioner(task: CaptionTask, cfg: CaptionerConfig, train_cfg: CaptionTrainConfig,
                       dtype=torch.float32) -> Tuple[Captioner, List[float]]:
    model = Captioner(cfg, dtype=dtype)
    losses = train_xe(model, task.V[task.xe_index], task.xe_gold, train_cfg)
    return model, losses


def finetune_scst(model: Captioner, task: CaptionTask, encoder, reward_cfg: RewardConfig,
                  train_cfg: CaptionTrainConfig, log_path=None) -> List[dict]:
    reward = RewardModel(encoder, task.tokenizer, task.idf, reward_cfg)
    V, refs, v0 = task.split("train")
    return train_scst(model, V, refs, v0, reward, train_cfg, eval_set=task.split("heldout"), log_path=log_path)
