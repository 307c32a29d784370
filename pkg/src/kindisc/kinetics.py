"""Integration of single-reaction rate models ``dC_s/dt = nu_s * r(C | theta)``."""

from __future__ import annotations

import os
import sys
import warnings
from contextlib import contextmanager
from typing import Sequence

import numpy as np
from scipy.integrate import odeint

from .expr import Node, call, compile_tree

__all__ = ["IntegrationError", "integrate_model", "RateModel"]


class IntegrationError(RuntimeError):
    """The ODE solver could not reach the end of the requested grid."""


class _Abort(Exception):
    pass


_FLUSHERS: list | None = None


def _fortran_flushers() -> list:
    """``flush`` entry points of every loaded gfortran runtime (best effort, Linux only)."""
    global _FLUSHERS
    if _FLUSHERS is None:
        _FLUSHERS = []
        try:
            import ctypes

            with open("/proc/self/maps") as fh:
                paths = {line.split()[-1] for line in fh if "libgfortran" in line}
            for path in sorted(paths):
                fn = ctypes.CDLL(path)._gfortran_flush_i4
                fn.argtypes = [ctypes.c_void_p]
                _FLUSHERS.append(fn)
        except (OSError, AttributeError):
            pass
    return _FLUSHERS


@contextmanager
def _quiet_fortran():
    """Silence LSODA's diagnostics, which are written straight to file descriptor 1."""
    try:
        fd = sys.stdout.fileno()
    except (AttributeError, ValueError, OSError):
        fd = 1
    try:
        saved = os.dup(fd)
    except OSError:
        yield
        return
    devnull = os.open(os.devnull, os.O_WRONLY)
    try:
        sys.stdout.flush()
        os.dup2(devnull, fd)
        yield
    finally:
        # gfortran buffers unit 6 when stdout is not a terminal; drain it while
        # it still points at the null device
        for flush in _fortran_flushers():
            flush(None)
        os.dup2(saved, fd)
        os.close(saved)
        os.close(devnull)


class RateModel:
    """A rate law bound to its species order and stoichiometric coefficients.

    Parameters
    ----------
    tree : Node
        Rate expression over species names.
    species : sequence of str
        State ordering.
    stoichiometry : sequence of float
        Coefficient multiplying the rate in each species' balance.
    """

    def __init__(self, tree: Node, species: Sequence[str], stoichiometry: Sequence[float]):
        self.tree = tree
        self.species = tuple(species)
        self.nu = np.asarray(stoichiometry, dtype=float)
        if self.nu.shape != (len(self.species),):
            raise ValueError("stoichiometry must have one coefficient per species")
        self.fn = compile_tree(tree)

    def rate(self, theta, states: np.ndarray) -> np.ndarray:
        """Rate at states of shape ``(..., n_species)``."""
        states = np.asarray(states, dtype=float)
        inputs = {s: states[..., j] for j, s in enumerate(self.species)}
        return np.broadcast_to(np.asarray(call(self.fn, theta, inputs), dtype=float), states.shape[:-1])

    def integrate(self, theta, x0s, times, *, rtol: float = 1e-8, atol: float = 1e-10,
                  mxstep: int = 5_000) -> np.ndarray:
        return integrate_model(self, theta, x0s, times, rtol=rtol, atol=atol, mxstep=mxstep)


def integrate_model(model: RateModel, theta, x0s, times, *, rtol: float = 1e-8,
                    atol: float = 1e-10, mxstep: int = 5_000, blowup: float = 1e6) -> np.ndarray:
    """Integrate several initial conditions sharing one time grid in a single solve.

    Parameters
    ----------
    x0s : array, shape (n_exp, n_species)
    times : array, shape (n_t,)
        Increasing grid; ``times[0]`` is the initial time.

    Returns
    -------
    array, shape (n_exp, n_t, n_species)

    Raises
    ------
    IntegrationError
        If the solver fails, or any concentration leaves ``[-blowup, blowup]``.
    """
    theta = np.asarray(theta, dtype=float)
    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    times = np.asarray(times, dtype=float)
    n_exp, n_s = x0s.shape
    nu = model.nu
    fn = model.fn
    species = model.species

    def rhs(y, t):
        if not np.all(np.abs(y) < blowup):
            raise _Abort(t)
        state = y.reshape(n_exp, n_s)
        r = call(fn, theta, {s: state[:, j] for j, s in enumerate(species)})
        r = np.broadcast_to(np.asarray(r, dtype=float), (n_exp,))
        return (r[:, None] * nu[None, :]).ravel()

    try:
        r0 = rhs(x0s.ravel(), times[0])
        if not np.all(np.isfinite(r0)):
            raise IntegrationError(f"rate is not finite at t={times[0]:g}")
        with warnings.catch_warnings(), np.errstate(all="ignore"), _quiet_fortran():
            warnings.simplefilter("ignore")
            sol, info = odeint(rhs, x0s.ravel(), times, rtol=rtol, atol=atol, mxstep=mxstep,
                               full_output=True, printmessg=False)
    except _Abort as exc:
        raise IntegrationError(f"solution left the admissible range near t={float(exc.args[0]):g}") from None
    if info.get("message") != "Integration successful." or not np.all(np.isfinite(sol)):
        tcur = info.get("tcur")
        where = f" near t={float(tcur[-1]):g}" if tcur is not None and len(tcur) else ""
        raise IntegrationError(f"integration failed{where}: {info.get('message')}")
    return sol.reshape(len(times), n_exp, n_s).transpose(1, 0, 2)
