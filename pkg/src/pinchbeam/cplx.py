"""Complex arithmetic over paired real tape variables."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var


class CVar(NamedTuple):
    """Complex tensor as (re, im) tape variables of identical shape."""

    re: Var
    im: Var

    @property
    def shape(self):
        return self.re.shape

    def value(self) -> np.ndarray:
        return self.re.value + 1j * self.im.value


def constant(tape: Tape, z: np.ndarray) -> CVar:
    z = np.asarray(z, dtype=np.complex128)
    return CVar(tape.constant(z.real.copy()), tape.constant(z.imag.copy()))


def add(a: CVar, b: CVar) -> CVar:
    return CVar(ad.add(a.re, b.re), ad.add(a.im, b.im))


def mul(a: CVar, b: CVar) -> CVar:
    return CVar(ad.sub(ad.mul(a.re, b.re), ad.mul(a.im, b.im)),
                ad.add(ad.mul(a.re, b.im), ad.mul(a.im, b.re)))


def conj(a: CVar) -> CVar:
    return CVar(a.re, ad.neg(a.im))


def scale_real(a: CVar, s: Var) -> CVar:
    """Elementwise multiply by a real (broadcastable) factor."""
    return CVar(ad.mul(a.re, s), ad.mul(a.im, s))


def matmul(a: CVar, b: CVar) -> CVar:
    return CVar(ad.sub(ad.matmul(a.re, b.re), ad.matmul(a.im, b.im)),
                ad.add(ad.matmul(a.re, b.im), ad.matmul(a.im, b.re)))


def htranspose(a: CVar) -> CVar:
    """Conjugate transpose of the last two axes."""
    return CVar(ad.transpose_last2(a.re), ad.neg(ad.transpose_last2(a.im)))


def abs2(a: CVar) -> Var:
    return ad.complex_abs2(a.re, a.im)


def sum_axis(a: CVar, axis, keepdims: bool = False) -> CVar:
    return CVar(ad.sum_axis(a.re, axis, keepdims), ad.sum_axis(a.im, axis, keepdims))


def solve(a: CVar, b: CVar) -> CVar:
    """X with A X = B for complex square A, via the equivalent real block system.

    [[Ar, -Ai], [Ai, Ar]] [Xr; Xi] = [Br; Bi] is the same K x K complex solve
    written over reals, and stays on the tape through a single `solve` node.
    """
    k = a.shape[-1]
    top = ad.concat([a.re, ad.neg(a.im)], axis=-1)
    bot = ad.concat([a.im, a.re], axis=-1)
    block = ad.concat([top, bot], axis=-2)
    rhs = ad.concat([b.re, b.im], axis=-2)
    x = ad.solve(block, rhs)
    return CVar(ad.slice_axis(x, -2, 0, k), ad.slice_axis(x, -2, k, 2 * k))
