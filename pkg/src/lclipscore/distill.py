"""Two-stage distillation of a compressed dual encoder from a teacher.

Stage 1 trains each encoder separately on the single-modal loss
``0.5 * MAE(r_T, r_S) + 0.5 * (1 - cos(r_T, r_S))``. Stage 2 freezes the
text encoder and trains the vision encoder on the similarity regulator
(hinge on the student/teacher similarity matrices) plus the single-modal
loss on image embeddings.

A teacher is any object exposing ``encode_images`` (B, N, P) -> (v0, V) and
``encode_texts`` (list of id lists) -> (u0, U); :class:`SyntheticTeacher`
provides one with a planted alignment structure.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .encoder import LCLIPModel
from .errors import ConfigError, DegenerateInputError, DimensionError, TrainingFailure
from .numerics import generator, get_dtype, l2_normalize
from .synthetic import FUNCTION_WORDS, World

logger = logging.getLogger(__name__)

PAPER_STAGE1_LR = 5e-3
PAPER_STAGE2_LR = 1e-4


# -- losses ----------------------------------------------------------------

def single_modal_loss(r_teacher: torch.Tensor, r_student: torch.Tensor) -> torch.Tensor:
    """Half mean-absolute-error plus half cosine distance; batched rows are averaged."""
    if r_teacher.shape != r_student.shape:
        raise DimensionError(f"teacher {tuple(r_teacher.shape)} vs student {tuple(r_student.shape)}")
    r_teacher = r_teacher.detach()
    mae = (r_teacher - r_student).abs().mean(dim=-1)
    # 1 - cos written as half the squared distance of unit vectors: exact zero (and zero gradient) at r_s == r_t
    dist = 0.5 * (l2_normalize(r_teacher) - l2_normalize(r_student)).pow(2).sum(dim=-1)
    return (0.5 * mae + 0.5 * dist).mean()


def sim_matrix(v0_batch: torch.Tensor, u0_batch: torch.Tensor) -> torch.Tensor:
    """S[i, j] = <v0_i, u0_j> for L2-normalised rows."""
    if v0_batch.dim() != 2 or v0_batch.shape != u0_batch.shape:
        raise DimensionError(
            f"image batch {tuple(v0_batch.shape)} and caption batch {tuple(u0_batch.shape)} must match"
        )
    return v0_batch @ u0_batch.T


def sr_loss(s_teacher: torch.Tensor, s_student: torch.Tensor) -> torch.Tensor:
    """Similarity regulator: raise matched similarities above the teacher's, push the rest below."""
    if s_teacher.shape != s_student.shape or s_student.dim() != 2 or s_student.shape[0] != s_student.shape[1]:
        raise DimensionError(f"need equal square matrices, got {tuple(s_teacher.shape)} and {tuple(s_student.shape)}")
    b = s_student.shape[0]
    if b < 2:
        raise DegenerateInputError("similarity regulator needs a batch of at least 2 pairs")
    s_teacher = s_teacher.detach()
    eye = torch.eye(b, dtype=torch.bool)
    matched = torch.relu(s_teacher.diagonal() - s_student.diagonal()).sum()
    unmatched = torch.relu(s_student - s_teacher)[~eye].sum()
    return matched + unmatched


def contrastive_loss(s_student: torch.Tensor, temperature: float = 0.07) -> torch.Tensor:
    """Symmetric InfoNCE over a similarity matrix; kept only for comparison runs."""
    logits = s_student / temperature
    target = torch.arange(s_student.shape[0])
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def retrieval_r1(v0: torch.Tensor, u0: torch.Tensor) -> float:
    """Image-to-text recall@1 where caption i is the match of image i."""
    s = sim_matrix(v0, u0)
    return float((s.argmax(dim=1) == torch.arange(s.shape[0])).double().mean())


# -- synthetic teacher -----------------------------------------------------

class SyntheticTeacher:
    """Frozen random maps composed with exact latent recovery.

    Images: patches go through a random linear stem, are summed, mapped back
    to attribute counts by a pseudo-inverse, then through a random
    orthonormal map ``Q`` plus a bias. Captions: every attribute word embeds as
    its row of ``Q``, function words as small random vectors, summed with a
    caption-level bias. Outputs are L2-normalised.
    """

    def __init__(self, world: World, joint_dim: int, d: int, seed: int,
                 image_bias: float = 0.5, text_bias: float = 1.5, function_norm: float = 0.5):
        self.world, self.joint_dim, self.d, self.seed = world, joint_dim, d, seed
        rng = np.random.default_rng([seed, 104729])
        p, nv = world.patch_dim, world.n_values
        self.stem_weight = rng.standard_normal((p, d)) / math.sqrt(p)
        self.stem_bias = 0.1 * rng.standard_normal(d)
        if d < p:
            raise ConfigError(f"teacher stem width d={d} must be at least patch_dim={p}")
        # undo the stem, then project onto the appearance basis; distractors vanish
        self.recovery = np.linalg.pinv(self.stem_weight) @ np.linalg.pinv(world.appearance)  # d x nv
        m = rng.standard_normal((max(joint_dim, nv), max(joint_dim, nv)))
        q, _ = np.linalg.qr(m)
        self.Q = q[:nv, :joint_dim] if joint_dim >= nv else rng.standard_normal((nv, joint_dim)) / math.sqrt(joint_dim)
        self.image_bias = image_bias * _unit(rng.standard_normal(joint_dim))
        self.text_bias = text_bias * _unit(rng.standard_normal(joint_dim))
        tok = world.tokenizer()
        self.tokenizer = tok
        table = np.zeros((len(tok), joint_dim))
        vidx = world.value_index()
        for w, i in tok.stoi.items():
            if w in vidx:
                table[i] = self.Q[vidx[w]]
            elif w in FUNCTION_WORDS:
                table[i] = function_norm * _unit(rng.standard_normal(joint_dim))
        self.token_table = table

    @property
    def vocab(self) -> int:
        return len(self.tokenizer)

    def _t(self, x, dtype=None):
        return torch.as_tensor(x, dtype=dtype or get_dtype())

    def encode_images(self, patches):
        patches = torch.as_tensor(patches)
        dtype = patches.dtype if patches.is_floating_point() else get_dtype()
        x = patches.to(torch.float64).numpy()
        h = x @ self.stem_weight  # (B, N, d), stem bias cancels in the recovery
        per_patch = h @ self.recovery @ self.Q
        v = per_patch.sum(axis=1) + self.image_bias
        v0 = v / np.linalg.norm(v, axis=1, keepdims=True)
        return self._t(v0, dtype), self._t(per_patch, dtype)

    def encode_image(self, patches):
        v0, V = self.encode_images(torch.as_tensor(patches).unsqueeze(0))
        return v0[0], V[0]

    def encode_texts(self, batch: Sequence[Sequence[int]]):
        if any(len(s) == 0 for s in batch):
            raise DegenerateInputError("empty token sequence")
        u0, U = [], []
        for ids in batch:
            rows = self.token_table[list(ids)]
            u = rows.sum(axis=0) + self.text_bias
            u0.append(u / np.linalg.norm(u))
            U.append(self._t(rows))
        return self._t(np.stack(u0)), U

    def encode_text(self, token_ids: Sequence[int]):
        u0, U = self.encode_texts([token_ids])
        return u0[0], U[0]


def _unit(x):
    return x / np.linalg.norm(x)


def make_synthetic_teacher(joint_dim: int, seed: int, world: Optional[World] = None, d: int = 32) -> SyntheticTeacher:
    return SyntheticTeacher(world or World(), joint_dim, d, seed)


def student_from_teacher(student: LCLIPModel, teacher) -> LCLIPModel:
    """Copy the teacher's patch stem into the student (it stays frozen there)."""
    if isinstance(teacher, SyntheticTeacher):
        w = torch.as_tensor(teacher.stem_weight)
        b = torch.as_tensor(teacher.stem_bias)
    else:
        w, b = teacher.vision.stem["weight"], teacher.vision.stem["bias"]
    if tuple(w.shape) != tuple(student.vision.stem["weight"].shape):
        raise ConfigError(f"teacher stem {tuple(w.shape)} does not fit student stem {tuple(student.vision.stem['weight'].shape)}")
    student.vision.load_stem(w, b)
    return student


# -- training --------------------------------------------------------------

@dataclass
class StageConfig:
    stage: int
    learning_rate: float
    batch_size: int
    epochs: int
    freeze_text: bool = False
    seed: int = 0
    augmentation: bool = False
    crop_keep: float = 1.0

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.stage == 2 and not self.freeze_text:
            raise ConfigError("stage 2 requires freeze_text=true")
        if self.stage == 1 and self.augmentation:
            raise ConfigError("augmentation is only used in stage 2")
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate < 0:
            raise ConfigError(f"invalid stage config {self}")
        if not 0 < self.crop_keep <= 1:
            raise ConfigError("crop_keep must be in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PairBatch:
    images: torch.Tensor  # (B, N, P)
    captions: List[List[int]]

    def __post_init__(self):
        if len(self.captions) != self.images.shape[0]:
            raise DimensionError("images and captions must pair up index by index")
        if len(self.captions) < 2:
            raise DegenerateInputError("a pair batch needs B >= 2")


def augment_patches(patches: torch.Tensor, g: torch.Generator, crop_keep: float = 1.0) -> torch.Tensor:
    """Semantics-preserving augmentation: horizontal flip and contiguous patch crop."""
    if torch.rand((), generator=g) < 0.5:
        patches = patches.flip(dims=(1,))
    n = patches.shape[1]
    keep = max(1, int(math.ceil(crop_keep * n)))
    if keep < n:
        start = int(torch.randint(0, n - keep + 1, (), generator=g))
        patches = patches[:, start:start + keep]
    return patches


def _check_finite(loss, step):
    if not torch.isfinite(loss):
        raise TrainingFailure("loss diverged to a non-finite value", step=step)


def _batches(n, batch_size, g, drop_last=False):
    perm = torch.randperm(n, generator=g)
    for s in range(0, n, batch_size):
        idx = perm[s:s + batch_size]
        if drop_last and len(idx) < batch_size:
            break
        yield idx


def train_stage1(student: LCLIPModel, teacher, vision_data, text_data: Sequence[Sequence[int]],
                 cfg: StageConfig, callback=None) -> Tuple[LCLIPModel, List[dict]]:
    """Single-modal distillation of both encoders. Returns the student and a per-step loss curve."""
    if cfg.stage != 1:
        raise ConfigError("train_stage1 needs a stage-1 config")
    images = torch.as_tensor(np.asarray(vision_data), dtype=student.dtype)
    texts = [list(t) for t in text_data]
    params = [p for p in student.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    g = generator(cfg.seed)
    with torch.no_grad():
        t_v0_all, _ = teacher.encode_images(images)
        t_u0_all, _ = teacher.encode_texts(texts)
    t_v0_all, t_u0_all = t_v0_all.to(student.dtype), t_u0_all.to(student.dtype)
    curve, step = [], 0
    for epoch in range(cfg.epochs):
        text_batches = list(_batches(len(texts), cfg.batch_size, g))
        for k, idx in enumerate(_batches(len(images), cfg.batch_size, g)):
            tidx = text_batches[k % len(text_batches)]
            s_v0, _ = student.encode_images(images[idx])
            s_u0, _ = student.encode_texts([texts[i] for i in tidx])
            loss_v = single_modal_loss(t_v0_all[idx], s_v0)
            loss_t = single_modal_loss(t_u0_all[tidx], s_u0)
            loss = loss_v + loss_t
            _check_finite(loss, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            row = {"step": step, "epoch": epoch, "loss_total": float(loss.detach()), "loss_sr": 0.0,
                   "loss_d": float(loss.detach()), "loss_d_vision": float(loss_v.detach()), "loss_d_text": float(loss_t.detach())}
            curve.append(row)
            if callback:
                callback(row)
            step += 1
    return student, curve


def train_stage2(student: LCLIPModel, teacher, paired_data, cfg: StageConfig,
                 callback=None) -> Tuple[LCLIPModel, List[dict]]:
    """Similarity-regulator distillation of the vision encoder with the text encoder frozen.

    ``paired_data`` is either ``(images, captions)`` (batched here, incomplete
    final batches dropped) or an iterable of :class:`PairBatch` replayed each epoch.
    """
    if cfg.stage != 2:
        raise ConfigError("train_stage2 needs a stage-2 config")
    if not cfg.freeze_text:
        raise ConfigError("stage 2 requires a frozen text encoder")
    if isinstance(paired_data, tuple) and len(paired_data) == 2:
        images = torch.as_tensor(np.asarray(paired_data[0]), dtype=student.dtype)
        captions = [list(c) for c in paired_data[1]]
        if len(captions) != images.shape[0]:
            raise DimensionError("images and captions must pair up index by index")
        if cfg.batch_size < 2 or len(captions) < 2:
            raise DegenerateInputError("similarity regulator needs batches of at least 2 pairs")
        stream = None
    else:
        stream = [b if isinstance(b, PairBatch) else PairBatch(torch.as_tensor(b[0]), [list(c) for c in b[1]])
                  for b in paired_data]

    text_flags = [(p, p.requires_grad) for p in student.text.parameters()]
    for p, _ in text_flags:
        p.requires_grad_(False)
    try:
        params = [p for p in student.parameters() if p.requires_grad]
        opt = torch.optim.Adam(params, lr=cfg.learning_rate)
        g = generator(cfg.seed)
        curve, step = [], 0
        for epoch in range(cfg.epochs):
            if stream is None:
                batches = ((images[idx], [captions[i] for i in idx])
                           for idx in _batches(len(captions), cfg.batch_size, g, drop_last=True))
            else:
                batches = ((b.images, b.captions) for b in stream)
            for imgs, caps in batches:
                imgs = torch.as_tensor(imgs, dtype=student.dtype)
                PairBatch(imgs, caps)
                if cfg.augmentation:
                    imgs = augment_patches(imgs, g, cfg.crop_keep)
                with torch.no_grad():
                    t_v0, _ = teacher.encode_images(imgs)
                    t_u0, _ = teacher.encode_texts(caps)
                    s_u0, _ = student.encode_texts(caps)
                t_v0, t_u0 = t_v0.to(student.dtype), t_u0.to(student.dtype)
                s_v0, _ = student.encode_images(imgs)
                s_t = sim_matrix(t_v0, t_u0)
                s_s = sim_matrix(s_v0, s_u0)
                l_sr = sr_loss(s_t, s_s)
                l_d = single_modal_loss(t_v0, s_v0)
                loss = l_sr + l_d
                _check_finite(loss, step)
                opt.zero_grad()
                loss.backward()
                opt.step()
                margin = float((s_s.diagonal() - s_t.diagonal()).mean().detach())
                row = {"step": step, "epoch": epoch, "loss_total": float(loss.detach()), "loss_sr": float(l_sr.detach()),
                       "loss_d": float(l_d.detach()), "diag_margin": margin}
                curve.append(row)
                if callback:
                    callback(row)
                step += 1
    finally:
        for p, flag in text_flags:
            p.requires_grad_(flag)
    return student, curve


@torch.no_grad()
def diag_margin(student: LCLIPModel, teacher, images, captions) -> float:
    """mean(diag(S_student) - diag(S_teacher)) over a fixed paired set."""
    images = torch.as_tensor(np.asarray(images), dtype=student.dtype)
    s_v0, _ = student.encode_images(images)
    s_u0, _ = student.encode_texts(captions)
    t_v0, _ = teacher.encode_images(images)
    t_u0, _ = teacher.encode_texts(captions)
    s = (s_v0 * s_u0).sum(-1)
    t = (t_v0.to(s.dtype) * t_u0.to(s.dtype)).sum(-1)
    return float((s - t).mean())


@torch.no_grad()
def heldout_r1(model, images, captions) -> float:
    images = torch.as_tensor(np.asarray(images), dtype=getattr(model, "dtype", get_dtype()))
    v0, _ = model.encode_images(images)
    u0, _ = model.encode_texts(captions)
    return retrieval_r1(v0, u0.to(v0.dtype))
