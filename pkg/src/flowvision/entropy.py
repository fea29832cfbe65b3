"""Information model of flow recording.

Per-packet feature values follow a stationary Markov chain with a binomial
stationary distribution; flow lengths are geometric.  For each recording rule
(store everything, store a running sum, store an event indicator, or the
graph's short-sequence / long-histogram split) this module gives closed-form
expected information ``h`` (nats), storage ``l`` and density ``d = h / l``,
plus a Monte Carlo estimator that simulates a concrete chain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

EULER_GAMMA = 0.5772156649015329
P_RANGE = (0.1, 0.9)
Q_RANGE = (0.5, 0.9)
MODES = ("ideal", "hypervision", "sampling", "event")


class EntropyDomainError(ValueError):
    """Parameters outside the domain of a closed form."""


@dataclass(frozen=True)
class DtmcParams:
    s: int
    e_count: float
    p: float
    q: float
    k_thresh: int = 15
    c_agg: float = 1.0
    region_check: bool = True

    def __post_init__(self):
        if int(self.s) != self.s or self.s < 2:
            raise EntropyDomainError(f"s must be an integer >= 2, got {self.s!r}")
        # The simulated chain lives on states 0..s, so up to (s+1)^2 transitions exist.
        if not 2 <= self.e_count <= (self.s + 1) ** 2:
            raise EntropyDomainError(f"e_count must be in [2, (s+1)^2], got {self.e_count!r}")
        if self.k_thresh < 1:
            raise EntropyDomainError("k_thresh must be >= 1")
        if self.c_agg < 1:
            raise EntropyDomainError("c_agg must be >= 1")
        if not (0 < self.p < 1 or (not self.region_check and 0 <= self.p <= 1)):
            raise EntropyDomainError(f"p must lie in (0, 1), got {self.p!r}")
        if not 0 < self.q <= 1:
            raise EntropyDomainError(f"q must lie in (0, 1], got {self.q!r}")
        if self.region_check:
            if not (P_RANGE[0] <= self.p <= P_RANGE[1] and Q_RANGE[0] <= self.q <= Q_RANGE[1]):
                raise EntropyDomainError(
                    f"(p, q) = ({self.p}, {self.q}) outside the feasible region "
                    f"{P_RANGE[0]} <= p <= {P_RANGE[1]}, {Q_RANGE[0]} <= q <= {Q_RANGE[1]}")

    def at(self, p: float, q: float) -> DtmcParams:
        return replace(self, p=p, q=q)


@dataclass(frozen=True)
class ModeMetrics:
    h: float
    l: float

    def __post_init__(self):
        if not self.l > 0:
            raise EntropyDomainError(f"storage must be positive, got {self.l!r}")

    @property
    def d(self) -> float:
        return self.h / self.l


# --------------------------------------------------------------------------- closed forms


def gaussian_binomial_entropy(s: int, p: float) -> float:
    """Normal approximation of the entropy of Binomial(s, p)."""
    var = s * p * (1 - p)
    if var <= 0:
        raise EntropyDomainError("p(1-p) must be positive")
    return 0.5 * math.log(2 * math.pi * math.e * var)


def entropy_rate(params: DtmcParams) -> float:
    """Entropy rate of the equal-weight chain, nats per packet."""
    return math.log(params.e_count) - gaussian_binomial_entropy(params.s, params.p)


def mode_ideal(params: DtmcParams) -> ModeMetrics:
    rate = entropy_rate(params)
    return ModeMetrics(rate / params.q, 1.0 / params.q)


def _short_share(params: DtmcParams) -> float:
    """P-weighted mass of flows no longer than K: 1 - (Kq+1)(1-q)^K."""
    K, q = params.k_thresh, params.q
    return 1.0 - (K * q + 1) * (1 - q) ** K


def hypervision_terms(params: DtmcParams) -> tuple[float, float]:
    """(short-flow information, long-flow information) of the graph recording rule."""
    s, p, q, K = params.s, params.p, params.q, params.k_thresh
    short = _short_share(params) / q * entropy_rate(params)
    bracket = ((1 + s) * math.log(p * s) + 2 * math.log(2 * math.pi * math.e)
               + 2 * q * math.log(K) - 2 * s * (1 + p + EULER_GAMMA))
    long_ = 0.25 * s * (1 - q) ** K * bracket
    return short, long_


def mode_hypervision(params: DtmcParams) -> ModeMetrics:
    s, q, K, C = params.s, params.q, params.k_thresh, params.c_agg
    short, long_ = hypervision_terms(params)
    storage = s * (1 - q) ** K + _short_share(params) / (C * q)
    return ModeMetrics(short + long_, storage)


def mode_sampling(params: DtmcParams) -> ModeMetrics:
    q = params.q
    h = gaussian_binomial_entropy(params.s, params.p) + math.log(2) / 2 * q * (1 - q)
    return ModeMetrics(h, 1.0)


def event_probabilities(params: DtmcParams) -> tuple[float, float]:
    """(theta, firing mass p^s) where theta = P[no event in a flow]."""
    ps = params.p ** params.s
    if ps == 0.0:
        raise EntropyDomainError(f"p^s underflows to 0 for p={params.p}, s={params.s}")
    q = params.q
    zeta = q - q * ps
    eta = q + ps * (1 - q)
    return zeta / eta, ps


def mode_event(params: DtmcParams) -> ModeMetrics:
    """Event indicator recording.

    ``h = -2 theta ln theta``; storage is the firing probability ``p^s / eta``
    (positive; the expression with a leading minus sign has the wrong sign).
    """
    theta, ps = event_probabilities(params)
    q = params.q
    eta = q + ps * (1 - q)
    log_theta = math.log1p(-ps / eta)
    h = -2.0 * theta * log_theta
    return ModeMetrics(h, ps / eta)


def exact_event_entropy(params: DtmcParams) -> float:
    """Two-point entropy of the event indicator, from P[I=0] directly."""
    ps = params.p ** params.s
    q = params.q
    p0 = q * (1 - ps) / (1 - (1 - q) * (1 - ps))
    return -sum(x * math.log(x) for x in (p0, 1 - p0) if x > 0)


MODE_FUNCS: dict[str, Callable[[DtmcParams], ModeMetrics]] = {
    "ideal": mode_ideal,
    "hypervision": mode_hypervision,
    "sampling": mode_sampling,
    "event": mode_event,
}


# --------------------------------------------------------------------------- grids and integrals


def region_grid(grid_n: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """p and q axes of the feasible region: grid_n+1 points in p, grid_n//2+1 in q."""
    if grid_n < 2:
        raise ValueError("grid_n must be >= 2")
    return np.linspace(*P_RANGE, grid_n + 1), np.linspace(*Q_RANGE, grid_n // 2 + 1)


def evaluate_grid(mode: str, base: DtmcParams, grid_n: int = 32, field: str = "d") -> np.ndarray:
    """Matrix [i_p, i_q] of one ModeMetrics field over the region grid."""
    ps, qs = region_grid(grid_n)
    fn = MODE_FUNCS[mode]
    return np.array([[getattr(fn(base.at(float(p), float(q))), field) for q in qs] for p in ps])


def trapezoid_2d(values: np.ndarray, ps: np.ndarray, qs: np.ndarray) -> float:
    return float(np.trapezoid(np.trapezoid(values, qs, axis=1), ps))


def integrate_density(mode: str | Callable[[float, float], float], base: Optional[DtmcParams] = None,
                      grid_n: int = 64) -> float:
    """Composite trapezoid integral of the density over the feasible region.

    ``mode`` is a mode name (needs ``base`` for s, e_count, K, C) or any
    callable ``f(p, q)``.
    """
    if grid_n < 32:
        raise ValueError("grid_n must be >= 32")
    ps, qs = region_grid(grid_n)
    if callable(mode):
        vals = np.array([[mode(float(p), float(q)) for q in qs] for p in ps], dtype=np.float64)
    else:
        if base is None:
            raise ValueError("base parameters required for a named mode")
        vals = evaluate_grid(mode, base, grid_n, "d")
    return trapezoid_2d(vals, ps, qs)


def dpi_gaps(base: DtmcParams, grid_n: int = 32) -> np.ndarray:
    """H_ideal - H_graph over the region grid."""
    return evaluate_grid("ideal", base, grid_n, "h") - evaluate_grid("hypervision", base, grid_n, "h")


# Parameter bundles (s, e_count, K, C) standing in for per-feature calibrations.
PRESETS: dict[str, DtmcParams] = {
    "packet-length": DtmcParams(s=64, e_count=900, p=0.5, q=0.7, k_thresh=15, c_agg=2.0),
    "time-interval": DtmcParams(s=32, e_count=300, p=0.5, q=0.7, k_thresh=15, c_agg=1.5),
    "protocol": DtmcParams(s=8, e_count=40, p=0.5, q=0.7, k_thresh=15, c_agg=1.5),
}


# --------------------------------------------------------------------------- Monte Carlo


def binomial_pmf(s: int, p: float) -> np.ndarray:
    k = np.arange(s + 1)
    logc = np.array([math.lgamma(s + 1) - math.lgamma(i + 1) - math.lgamma(s - i + 1) for i in k])
    with np.errstate(divide="ignore"):
        logp = logc + k * math.log(p) + (s - k) * math.log1p(-p)
    pmf = np.exp(logp)
    return pmf / pmf.sum()


def plugin_entropy(counts: np.ndarray) -> float:
    c = np.asarray(counts, dtype=np.float64)
    c = c[c > 0]
    if c.size == 0:
        return 0.0
    f = c / c.sum()
    return float(-(f * np.log(f)).sum())


@dataclass
class Chain:
    """A concrete stationary chain on states 0..s."""

    mu: np.ndarray
    P: np.ndarray
    W: np.ndarray
    support: np.ndarray

    @property
    def n_states(self) -> int:
        return self.mu.shape[0]

    @property
    def n_edges(self) -> int:
        return int(self.support.sum())

    def entropy_rate(self) -> float:
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(self.P > 0, self.P * np.log(self.P), 0.0)
        return float(-(self.mu * t.sum(axis=1)).sum())

    def effective_edges(self) -> float:
        """exp of the joint pair entropy: the equal-weight edge count with the same rate."""
        w = self.W[self.W > 0]
        return float(math.exp(-(w * np.log(w)).sum()))


def build_chain(params: DtmcParams, seed: int = 0, full_support: bool = False,
                max_iter: int = 5000, tol: float = 1e-13) -> Chain:
    """Chain with Binomial(s, p) stationary law on 0..s.

    The support is a cycle plus every self-loop (enough for a positive
    solution to exist), topped up with seeded random transitions until it has
    ``round(e_count)`` edges.  Pair weights come from iterative proportional
    fitting to the stationary law on both margins.
    """
    n = params.s + 1
    mu = binomial_pmf(params.s, params.p)
    if full_support:
        support = np.ones((n, n), dtype=bool)
    else:
        support = np.eye(n, dtype=bool)
        support[np.arange(n), (np.arange(n) + 1) % n] = True
        target = min(int(round(params.e_count)), n * n)
        free = np.flatnonzero(~support.ravel())
        extra = max(0, target - int(support.sum()))
        if extra:
            rng = np.random.default_rng(seed)
            support.ravel()[rng.choice(free, size=min(extra, free.size), replace=False)] = True
    W = np.where(support, np.outer(mu, mu), 0.0)
    for _ in range(max_iter):
        W *= (mu / W.sum(axis=1))[:, None]
        col = W.sum(axis=0)
        W *= (mu / col)[None, :]
        if np.abs(W.sum(axis=1) - mu).max() < tol:
            break
    P = W / W.sum(axis=1, keepdims=True)
    return Chain(mu, P, W, support)


def calibrated(params: DtmcParams, chain: Chain) -> DtmcParams:
    """Params whose e_count reproduces the chain's pair entropy."""
    return replace(params, e_count=min(chain.effective_edges(), (params.s + 1) ** 2))


@dataclass
class MonteCarloResult:
    metrics: dict[str, ModeMetrics | None]
    params: DtmcParams
    chain: Chain
    lengths: np.ndarray
    rate_estimate: float
    event_rate: float


def simulate_walks(chain: Chain, lengths: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Walk matrix [flow, step] of state indices, -1 past each flow's end."""
    n = lengths.shape[0]
    steps = int(lengths.max())
    out = np.full((n, steps), -1, dtype=np.int16)
    cum_mu = np.cumsum(chain.mu)
    cum_P = np.cumsum(chain.P, axis=1)
    cur = np.minimum(np.searchsorted(cum_mu, rng.random(n), side="right"), chain.n_states - 1)
    out[:, 0] = cur
    for t in range(1, steps):
        live = np.flatnonzero(lengths > t)
        if live.size == 0:
            break
        u = rng.random(live.size)
        prev = out[live, t - 1].astype(np.int64)
        nxt = (u[:, None] >= cum_P[prev]).sum(axis=1)
        out[live, t] = np.minimum(nxt, chain.n_states - 1)
    return out


def _conditional_entropy(keys: np.ndarray, groups: np.ndarray) -> float:
    """sum_g P(g) * H(keys | g) with plug-in estimates."""
    n = keys.shape[0]
    total = 0.0
    for g in np.unique(groups):
        sel = keys[groups == g]
        _, counts = np.unique(sel, axis=0, return_counts=True) if sel.ndim > 1 else np.unique(sel, return_counts=True)
        total += sel.shape[0] / n * plugin_entropy(counts)
    return total


def monte_carlo(params: DtmcParams, n_flows: int = 100_000, seed: int = 0, full_support: bool = False
                ) -> MonteCarloResult:
    """Simulate flows through a concrete chain and estimate each mode's (h, l).

    Closed forms should be compared at ``result.params``, whose ``e_count`` is
    calibrated to the simulated chain.  The event mode has no estimate
    (``None``) when no flow fired.
    """
    if n_flows < 10_000:
        raise ValueError("n_flows must be >= 10^4")
    rng = np.random.default_rng(seed)
    chain = build_chain(params, seed, full_support)
    cal = calibrated(params, chain)
    L = rng.geometric(params.q, size=n_flows).astype(np.int64)
    walks = simulate_walks(chain, L, rng)
    S = chain.n_states

    # Transition counts over all simulated steps give the rate estimate.
    a = walks[:, :-1].astype(np.int64)
    b = walks[:, 1:].astype(np.int64)
    ok = b >= 0
    pair = np.bincount((a[ok] * S + b[ok]), minlength=S * S).reshape(S, S)
    row = pair.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(pair > 0, pair / np.maximum(row, 1), 1.0)
    rate_hat = float(-(pair * np.log(cond)).sum() / max(pair.sum(), 1))
    # The model credits every recorded packet with the chain's entropy rate.
    per_flow_ideal = L * rate_hat
    ideal = ModeMetrics(float(per_flow_ideal.mean()), float(L.mean()))

    total = np.where(walks >= 0, walks, 0).sum(axis=1)
    samp = ModeMetrics(_conditional_entropy(total, L), 1.0)

    fire = rng.random(walks.shape) < params.p ** params.s
    fired = (fire & (walks >= 0)).any(axis=1)
    frac = float(fired.mean())
    event = ModeMetrics(plugin_entropy(np.bincount(fired.astype(np.int64), minlength=2)), frac) if frac > 0 else None

    K, C = params.k_thresh, params.c_agg
    short = L <= K
    h_graph = float(per_flow_ideal[short].sum()) / n_flows
    if (~short).any():
        hist = np.stack([(walks[~short] == v).sum(axis=1) for v in range(S)], axis=1)
        h_graph += _conditional_entropy(hist, L[~short]) * float((~short).mean())
    l_graph = float(np.where(short, L / C, S).mean())
    graph = ModeMetrics(h_graph, l_graph)

    metrics: dict[str, ModeMetrics | None] = {"ideal": ideal, "sampling": samp, "event": event, "hypervision": graph}
    return MonteCarloResult(metrics, cal, chain, L, rate_hat, frac)


def relative_error(closed: float, empirical: float) -> float:
    if closed == 0:
        return math.inf if empirical != 0 else 0.0
    return abs(closed - empirical) / abs(closed)


# --------------------------------------------------------------------------- calibration


def calibrate(flows: Sequence, feature: str = "length", k_thresh: int = 15, c_agg: float = 1.0,
              p: Optional[float] = None) -> DtmcParams:
    """Estimate (s, e_count, q, K, C) from flow records for one per-packet feature.

    States are the distinct bucket codes of the feature; ``e_count`` counts the
    distinct consecutive-code transitions; ``q`` is the geometric MLE
    ``1 / mean length``.  ``p`` defaults to the mean normalized state rank.
    The region check is disabled since measured values need not fall inside it.
    """
    from flowvision.graph import interval_codes, length_codes

    seqs = []
    for f in flows:
        if feature == "length":
            seqs.append(length_codes(f.lengths))
        elif feature == "interval":
            seqs.append(interval_codes(f.intervals))
        elif feature == "protocol":
            seqs.append(f.masks.astype(np.int64))
        else:
            raise ValueError(f"unknown feature {feature!r}")
    if not seqs:
        raise ValueError("no flows to calibrate from")
    codes = np.concatenate(seqs)
    states, ranks = np.unique(codes, return_inverse=True)
    s = max(2, states.shape[0])
    pairs = {(int(x), int(y)) for seq in seqs for x, y in zip(seq[:-1], seq[1:])}
    e_count = float(min(max(2, len(pairs)), (s + 1) ** 2))
    mean_len = float(np.mean([len(x) for x in seqs]))
    q = min(1.0, 1.0 / mean_len)
    if p is None:
        p = float(np.clip(ranks.mean() / max(1, s - 1), 0.01, 0.99))
    return DtmcParams(s=s, e_count=e_count, p=p, q=q, k_thresh=k_thresh, c_agg=max(1.0, c_agg),
                      region_check=False)
