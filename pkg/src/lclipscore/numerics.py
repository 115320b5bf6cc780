"""Tensor helpers on top of torch plus an independent finite-difference gradient checker.

Tensors are plain ``torch.Tensor`` values; trainable parameters are
``torch.nn.Parameter`` objects. A parameter is *frozen* when
``requires_grad`` is False, which guarantees that no gradient is accumulated
into it during a training step.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, List, Optional, Sequence

import torch

from .errors import DegenerateInputError, DeterminismError, DimensionError

DEFAULT_DTYPE = torch.float64

_dtype = DEFAULT_DTYPE


def get_dtype() -> torch.dtype:
    return _dtype


def set_dtype(dtype: torch.dtype) -> None:
    """Set the compute precision used by constructors that are not given one."""
    global _dtype
    if dtype not in (torch.float32, torch.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _dtype = dtype


@contextlib.contextmanager
def precision(dtype: torch.dtype):
    previous = get_dtype()
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(previous)


def generator(seed: int) -> torch.Generator:
    """A CPU generator seeded explicitly; every stochastic op takes one of these."""
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"cannot multiply {tuple(a.shape)} by {tuple(b.shape)}"
        )
    return a @ b


def cosine_sim(u: torch.Tensor, v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Cosine similarity along ``dim``; zero-norm inputs are an error, never 0."""
    if u.shape[dim] != v.shape[dim] or u.shape[dim] < 1:
        raise DimensionError(
            f"cosine_sim needs equal nonempty lengths, got {tuple(u.shape)} and {tuple(v.shape)}"
        )
    nu = torch.linalg.vector_norm(u, dim=dim)
    nv = torch.linalg.vector_norm(v, dim=dim)
    if bool((nu == 0).any()) or bool((nv == 0).any()):
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    return (u * v).sum(dim=dim) / (nu * nv)


def l2_normalize(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    norm = torch.linalg.vector_norm(x, dim=dim, keepdim=True)
    if bool((norm == 0).any()):
        raise DegenerateInputError("cannot normalize a zero vector")
    return x / norm


def freeze(params: Iterable[torch.nn.Parameter]) -> None:
    for p in params:
        p.requires_grad_(False)
        p.grad = None


def trainable(params: Iterable[torch.nn.Parameter]) -> list:
    return [p for p in params if p.requires_grad]


def _check_deterministic(loss_fn) -> None:
    with torch.no_grad():
        f0 = float(loss_fn())
        f1 = float(loss_fn())
    if f0 != f1:
        raise DeterminismError(f"loss_fn returned {f0!r} then {f1!r} for identical inputs")


def central_differences(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor],
                        eps: float = 1e-6) -> List[torch.Tensor]:
    """``(f(x + eps) - f(x - eps)) / (2 eps)`` for every coordinate of ``params``, in float64."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    _check_deterministic(loss_fn)
    out = []
    with torch.no_grad():
        for p in params:
            flat = p.data.view(-1)
            num = torch.empty(flat.numel(), dtype=torch.float64)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = float(loss_fn())
                flat[i] = orig - eps
                fm = float(loss_fn())
                flat[i] = orig
                num[i] = (fp - fm) / (2 * eps)
            out.append(num.view(p.shape))
    return out


def analytic_gradients(loss_fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor]) -> List[torch.Tensor]:
    with torch.enable_grad():
        grads = torch.autograd.grad(loss_fn(), list(params), allow_unused=True)
    return [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, grads)]


def max_relative_error(analytic: Sequence[torch.Tensor], numeric: Sequence[torch.Tensor]) -> float:
    """Largest ``|a - n| / max(|a|, |n|, 1e-8)`` over all coordinates."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a, n = a.detach().double().reshape(-1), n.detach().double().reshape(-1)
        if a.numel() == 0:
            continue
        den = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, 1e-8))
        worst = max(worst, float(((a - n).abs() / den).max()))
    return worst


def finite_diff_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    eps: float = 1e-6,
    grad_fn: Optional[Callable[[], Sequence[torch.Tensor]]] = None,
) -> float:
    """Largest relative disagreement between analytic and central-difference gradients.

    ``loss_fn`` takes no arguments and reads ``params`` by closure. The
    analytic gradient comes from autograd unless ``grad_fn`` supplies one
    (useful for checking the checker). Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    params = list(params)
    numeric = central_differences(loss_fn, params, eps)
    analytic = analytic_gradients(loss_fn, params) if grad_fn is None else list(grad_fn())
    return max_relative_error(analytic, numeric)
