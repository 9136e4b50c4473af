"""Convergence diagnostics: split R-hat and autocorrelation-based ESS."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import PreconditionError


@dataclass(frozen=True)
class Degenerate:
    """Returned instead of a number when every segment has zero variance."""

    reason: str
    means_differ: bool = False

    def __bool__(self):
        return False


def gelman_rubin(chains) -> float | Degenerate:
    """Split potential scale reduction factor.

    Each chain is cut into two halves (a middle draw is dropped for odd
    lengths) and the classic between/within comparison runs on the halves.
    """
    chains = [np.asarray(c, dtype=float).reshape(-1) for c in chains]
    if len(chains) < 2:
        raise PreconditionError("split R-hat needs at least 2 chains")
    n = min(c.size for c in chains)
    if n < 4:
        raise PreconditionError("split R-hat needs at least 4 draws per chain")
    half = n // 2
    segments = np.array([seg for c in chains for seg in (c[:half], c[n - half:n])])
    means = segments.mean(axis=1)
    within = segments.var(axis=1, ddof=1).mean()
    between = half * means.var(ddof=1)
    if within == 0:
        return Degenerate("zero within-chain variance", means_differ=bool(np.ptp(means) > 0))
    var_plus = (half - 1) / half * within + between / half
    return float(np.sqrt(var_plus / within))


def autocorrelation(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n = x.size
    x = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    acov = np.fft.irfft(f * np.conjugate(f), size)[:n] / n
    return acov / acov[0]


def effective_sample_size(draws) -> float | Degenerate:
    """n / (1 + 2 sum rho_k) with Geyer's initial positive sequence, clamped to (0, n]."""
    x = np.asarray(draws, dtype=float).reshape(-1)
    n = x.size
    if n < 10:
        raise PreconditionError("ESS needs at least 10 draws")
    if np.ptp(x) == 0:
        return Degenerate("constant sequence")
    rho = autocorrelation(x)
    # pair sums Gamma_m = rho_2m + rho_2m+1, kept while positive
    n_pairs = n // 2
    pairs = rho[: 2 * n_pairs].reshape(n_pairs, 2).sum(axis=1)
    nonpos = np.flatnonzero(pairs <= 0)
    stop = nonpos[0] if nonpos.size else n_pairs
    tau = -1.0 + 2.0 * pairs[:stop].sum()
    if tau <= 0:
        return float(n)
    return float(min(n / tau, n))


def multi_chain_ess(chains) -> float | Degenerate:
    """Sum of per-chain ESS values."""
    values = [effective_sample_size(c) for c in chains]
    if any(isinstance(v, Degenerate) for v in values):
        return Degenerate("constant chain")
    return float(sum(values))


def summarize(fit) -> dict:
    """R-hat, ESS and acceptance rates for every stored parameter of a fit."""
    out = {"tag": fit.tag, "n_chains": len(fit.chains), "parameters": {}, "accept_rates": []}
    for j, name in enumerate(fit.names):
        per_chain = [c.param_draws[:, j] for c in fit.chains]
        rhat = gelman_rubin(per_chain) if len(per_chain) >= 2 else None
        ess = multi_chain_ess(per_chain)
        out["parameters"][name] = {
            "rhat": _jsonable(rhat),
            "ess": _jsonable(ess),
            "mean": float(np.mean(np.concatenate(per_chain))),
        }
    out["accept_rates"] = [dict(c.accept_rates) for c in fit.chains]
    return out


def _jsonable(value):
    if isinstance(value, Degenerate):
        return {"degenerate": value.reason, "means_differ": value.means_differ}
    return value
