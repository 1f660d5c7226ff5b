"""Dense linear algebra and gradient utilities.

Reverse-mode differentiation is delegated to ``torch.autograd``; this module
adds the pieces the rest of the package relies on: float64 defaults, a
Cholesky-based Hermitian solve with a clear failure mode, an explicit
``backward`` helper, a central-difference gradient checker and a guard that
reports the first module producing non-finite values.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
import torch
from torch import Tensor, nn

DTYPE = torch.float64
CDTYPE = torch.complex128


class NumericsError(RuntimeError):
    pass


class NotPositiveDefiniteError(NumericsError):
    pass


class NonFiniteError(NumericsError):
    def __init__(self, node: str):
        super().__init__(f"non-finite value produced by {node!r}")
        self.node = node


def as_real(x, device=None) -> Tensor:
    return torch.as_tensor(np.asarray(x), dtype=DTYPE, device=device)


def as_complex(x, device=None) -> Tensor:
    return torch.as_tensor(np.asarray(x), dtype=CDTYPE, device=device)


def complex_to_features(z: Tensor) -> Tensor:
    """Stack real and imaginary parts along a new trailing axis."""
    return torch.stack((z.real, z.imag), dim=-1)


def hermitian_solve(A: Tensor, x: Tensor) -> Tensor:
    """Solve ``A y = x`` for Hermitian positive definite ``A``.

    Batched over leading dimensions. ``x`` may be a vector (``[..., n]``) or a
    matrix of right-hand sides (``[..., n, r]``). Gradients flow through the
    Cholesky factor, so the adjoint is itself a solve rather than an
    elementwise differentiation of ``A^{-1}``.
    """
    A = torch.as_tensor(A)
    x = torch.as_tensor(x)
    if A.shape[-1] != A.shape[-2]:
        raise ValueError(f"A must be square, got {tuple(A.shape)}")
    vector = x.dim() == A.dim() - 1
    rhs = x.unsqueeze(-1) if vector else x
    if rhs.shape[-2] != A.shape[-1]:
        raise ValueError(f"dimension mismatch: A {tuple(A.shape)}, x {tuple(x.shape)}")
    dtype = torch.promote_types(A.dtype, rhs.dtype)
    L, info = torch.linalg.cholesky_ex(A.to(dtype))
    if bool((info > 0).any()):
        raise NotPositiveDefiniteError(f"non-positive pivot at index {int(info.max()) - 1}")
    y = torch.cholesky_solve(rhs.to(dtype), L)
    return y.squeeze(-1) if vector else y


def backward(
    output: Tensor, params: Sequence[Tensor], adjoint: Tensor | None = None, retain_graph: bool = False
) -> list[Tensor]:
    """Return d<adjoint, output>/d param for every parameter.

    Parameters the output does not depend on (including the case of a
    constant output) receive zero gradients.
    """
    if not isinstance(output, Tensor):
        raise NumericsError("backward needs the output tensor of a completed forward pass")
    if adjoint is None:
        if output.numel() != 1:
            raise ValueError("non-scalar output needs an explicit adjoint")
        adjoint = torch.ones_like(output)
    params = list(params)
    if not output.requires_grad:
        return [torch.zeros_like(p) for p in params]
    grads = torch.autograd.grad(output, params, grad_outputs=adjoint, allow_unused=True, retain_graph=retain_graph)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def flat_grad(output: Tensor, params: Sequence[Tensor]) -> Tensor:
    return torch.cat([g.reshape(-1) for g in backward(output, params)])


def finite_diff_check(
    fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    step: float = 1e-6,
    stencil: int = 2,
    rel_floor: float = 0.0,
) -> float:
    """Max elementwise relative error between autograd and central differences.

    ``fn`` is re-evaluated with each parameter entry perturbed in place; it
    must be deterministic (put batch-norm layers in a fixed mode). The
    relative error uses ``max(|g|, rel_floor * max|g|, 1e-8)`` as
    denominator, so ``rel_floor > 0`` keeps round-off on near-zero entries
    from dominating. ``stencil=4`` uses the fourth-order five-point central
    difference.
    """
    if not 1e-8 <= step <= 1e-4:
        raise ValueError("step must lie in [1e-8, 1e-4]")
    if stencil not in (2, 4):
        raise ValueError("stencil must be 2 or 4")
    params = [p for p in params]
    analytic = backward(fn(), params)
    scale = max((float(g.abs().max()) for g in analytic if g.numel()), default=0.0)
    floor = max(rel_floor * scale, 1e-8)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat = p.view(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()

                def at(delta: float) -> float:
                    flat[i] = orig + delta
                    return fn().item()

                if stencil == 2:
                    fd = (at(step) - at(-step)) / (2 * step)
                else:
                    fd = (-at(2 * step) + 8 * at(step) - 8 * at(-step) + at(-2 * step)) / (12 * step)
                flat[i] = orig
                ga = gflat[i].item()
                err = abs(ga - fd) / max(abs(ga), floor)
                worst = max(worst, err)
    return worst


@contextmanager
def finite_guard(module: nn.Module) -> Iterator[None]:
    """Raise ``NonFiniteError`` naming the first submodule whose output is not finite."""

    def hook_for(name: str):
        def hook(_mod, _inp, out):
            tensors = out if isinstance(out, (tuple, list)) else (out,)
            for t in tensors:
                if isinstance(t, Tensor) and not bool(torch.isfinite(t).all()):
                    raise NonFiniteError(name or type(module).__name__)

        return hook

    handles = [m.register_forward_hook(hook_for(n)) for n, m in module.named_modules()]
    try:
        yield
    finally:
        for h in handles:
            h.remove()


@contextmanager
def relu_margin_probe() -> Iterator[list[float]]:
    """Record the smallest |pre-activation| seen by any ReLU inside the block.

    Used to confirm a gradient probe point sits away from ReLU kinks.
    """
    seen: list[float] = []
    orig = torch.relu

    def probe(x: Tensor) -> Tensor:
        if x.numel():
            seen.append(float(x.detach().abs().min()))
        return orig(x)

    torch.relu = probe
    try:
        yield seen
    finally:
        torch.relu = orig
