"""Stale-snapshot block coordinate descent, Lyapunov monitors and rate bounds.

Steps are numbered s = 1..S and blocks n = 1..N+1.  ``thetas[s]`` is the
state before step s (index 0 is unused), and Delta^(s) = Theta^(s+1) - Theta^(s).
Block ``m_s`` is updated at step s, round robin with E consecutive steps per
block.  Nodes exchange parameters at the start of every cycle of (N+1)E steps:
the copy node n uses at step s holds its own block at the current value and
every other block at its value at the start of the cycle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.optimize import minimize, minimize_scalar

from fcsim.nn import Mlp, forward_cached, mlp_backward, seeded_init
from fcsim.rng import stream

EPS = np.finfo(np.float64).eps


class AssumptionError(ValueError):
    """Step size or parameters outside the range a result requires."""


# -- schedule ------------------------------------------------------------------------

@dataclass(frozen=True)
class Schedule:
    n_blocks: int  # N + 1
    E: int
    S: int

    def __post_init__(self):
        if self.n_blocks < 1 or self.E < 1 or self.S < 0:
            raise ValueError("need n_blocks >= 1, E >= 1, S >= 0")

    @property
    def N(self) -> int:
        return self.n_blocks - 1

    @property
    def period(self) -> int:
        return self.n_blocks * self.E

    @property
    def tau(self) -> int:
        return (2 * self.N + 1) * self.E

    def block(self, s: int) -> int:
        """Block updated at step s (1-based)."""
        return (s - 1) // self.E % self.n_blocks + 1

    def exchange(self, s: int) -> int:
        """Step at whose start the snapshot used at step s was taken."""
        return (s - 1) // self.period * self.period + 1

    def blocks(self) -> np.ndarray:
        s = np.arange(1, self.S + 1)
        return (s - 1) // self.E % self.n_blocks + 1


def tau(schedule: Schedule) -> int:
    return schedule.tau


def s_prime(s: int, schedule: Schedule) -> int:
    return s // schedule.period * schedule.period


def r_of(s: int, n: int, schedule: Schedule) -> int:
    """Latest step <= s at which block n was updated (0 if none)."""
    if not 1 <= n <= schedule.n_blocks:
        raise ValueError(f"block {n} outside 1..{schedule.n_blocks}")
    if s < 1:
        return 0
    p, e = schedule.period, schedule.E
    c, q = divmod(s - 1, p)
    lo = (n - 1) * e
    if q >= lo:
        return c * p + min(q, n * e - 1) + 1
    return 0 if c == 0 else (c - 1) * p + n * e


# -- objectives ----------------------------------------------------------------------

@dataclass
class BlockObjective:
    """Smooth objective split into disjoint contiguous parameter blocks."""

    value: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    dim: int
    lipschitz: float
    loss_min: float
    theta0: np.ndarray
    name: str = "objective"

    def blocks(self, n_blocks: int) -> list[slice]:
        if n_blocks > self.dim:
            raise ValueError(f"cannot split {self.dim} parameters into {n_blocks} blocks")
        edges = np.linspace(0, self.dim, n_blocks + 1).round().astype(int)
        return [slice(a, b) for a, b in zip(edges[:-1], edges[1:])]


def quadratic_objective(diag: Sequence[float], theta0: Sequence[float]) -> BlockObjective:
    """f = 1/2 sum d_i theta_i^2."""
    d = np.asarray(diag, dtype=np.float64)
    return BlockObjective(
        lambda t: 0.5 * float(np.sum(d * t * t)), lambda t: d * t, d.size, float(d.max()), 0.0,
        np.asarray(theta0, dtype=np.float64), "quadratic",
    )


def coupled_quadratic(a: np.ndarray, theta0: Sequence[float]) -> BlockObjective:
    """f = 1/2 theta^T A theta with symmetric positive definite A."""
    a = np.asarray(a, dtype=np.float64)
    lmax = float(np.linalg.eigvalsh(a).max())
    return BlockObjective(
        lambda t: 0.5 * float(t @ a @ t), lambda t: a @ t, a.shape[0], lmax, 0.0,
        np.asarray(theta0, dtype=np.float64), "coupled_quadratic",
    )


def nonconvex_objective(dim: int = 10, coupling: float = 2.0, seed: int = 0) -> BlockObjective:
    """f = 1/2 theta^T A theta - c sum log cosh(theta_i), eig(A) in [1, 1.5].

    The Hessian A - c diag(sech^2 theta) is indefinite near the origin and
    close to A at the minima; its spectral norm never exceeds
    max(lambda_max(A), c - lambda_min(A)).  The minimum is located by
    multi-start quasi-Newton search.
    """
    rng = stream(seed, "objective", "nonconvex")
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    eig = np.linspace(1.0, 1.5, dim)
    a = (q * eig) @ q.T
    a = 0.5 * (a + a.T)
    log2 = math.log(2.0)

    def value(t):
        return 0.5 * float(t @ a @ t) - coupling * float(np.sum(np.logaddexp(t, -t) - log2))

    def grad(t):
        return a @ t - coupling * np.tanh(t)

    starts = rng.uniform(-3.0, 3.0, size=(40, dim))
    best = min(
        minimize(value, s, jac=grad, method="BFGS", options={"gtol": 1e-12}).fun for s in starts
    )
    theta0 = rng.uniform(-2.5, 2.5, size=dim)
    lip = max(float(eig.max()), coupling - float(eig.min()))
    return BlockObjective(value, grad, dim, lip, float(best), theta0, "nonconvex")


@dataclass
class MlpLeastSquares:
    widths: tuple[int, ...]
    x: np.ndarray
    y: np.ndarray
    template: Mlp

    def value(self, theta: np.ndarray) -> float:
        net = self.template.with_flat(theta)
        out, _ = forward_cached(net, self.x)
        r = out - self.y
        return 0.5 * float(np.mean(np.sum(r * r, axis=1)))

    def grad(self, theta: np.ndarray) -> np.ndarray:
        net = self.template.with_flat(theta)
        out, cache = forward_cached(net, self.x)
        g, _ = mlp_backward(net, self.x, (out - self.y) / self.x.shape[0], cache)
        return np.concatenate([p.ravel() for p in g])


def estimate_lipschitz(
    grad: Callable[[np.ndarray], np.ndarray],
    center: np.ndarray,
    radius: float,
    rng: np.random.Generator,
    pairs: int = 1000,
    safety: float = 2.0,
) -> float:
    """``safety`` times the largest gradient-difference ratio over random pairs in a box.

    Half the pairs are independent points; the other half are close pairs,
    which probe local curvature.
    """
    best = 0.0
    d = center.size
    for i in range(pairs):
        a = center + rng.uniform(-radius, radius, d)
        if i % 2:
            b = center + rng.uniform(-radius, radius, d)
        else:
            b = a + 1e-3 * radius * rng.standard_normal(d)
        dist = np.linalg.norm(a - b)
        if dist > 0:
            best = max(best, float(np.linalg.norm(grad(a) - grad(b)) / dist))
    return safety * best


def mlp_objective(widths: Sequence[int] = (2, 4, 1), n_points: int = 16, seed: int = 0, radius: float = 0.5) -> BlockObjective:
    """Realizable least squares: targets come from a teacher of the same shape, so L* = 0."""
    widths = tuple(int(w) for w in widths)
    rng = stream(seed, "objective", "mlp")
    x = rng.standard_normal((n_points, widths[0]))
    teacher = seeded_init(widths, seed, hidden="tanh", output="identity", stream_key="teacher")
    y, _ = forward_cached(teacher, x)
    student = seeded_init(widths, seed, hidden="tanh", output="identity", stream_key="student")
    prob = MlpLeastSquares(widths, x, y, student)
    theta0 = student.flat()
    lip = estimate_lipschitz(prob.grad, theta0, radius, stream(seed, "objective", "lipschitz"))
    return BlockObjective(prob.value, prob.grad, theta0.size, lip, 0.0, theta0, "mlp")


# -- simulation ---------------------------------------------------------------------

@dataclass
class BoundParams:
    L: float
    loss_init: float
    loss_min: float
    eta: float
    mu2: float = 0.5

    def __post_init__(self):
        if self.L <= 0 or self.eta <= 0:
            raise ValueError("L and eta must be positive")
        if not 0 < self.mu2 < 1:
            raise ValueError("mu^2 must lie in (0, 1)")

    def alpha(self, t: int) -> float:
        return 2.0 / (self.eta * (2 * t + 1))

    def rho0(self, t: int) -> float:
        return 1.0 / (self.eta * (t + 1))


def assumption2(eta: float, t: int) -> bool:
    return 0 < eta < 2.0 / (2 * t + 1)


def assumption5(eta: float, t: int) -> bool:
    return 0 < eta < 1.0 / (t + 1)


def epsilon_root(eta: float, t: int) -> float:
    """Root >= 1 of eps + 1/eps = 1 + (1/tau)(1/eta - 1/2)."""
    c = 1.0 + (1.0 / eta - 0.5) / t
    disc = c * c - 4.0
    if disc < 0:
        raise AssumptionError(f"no real epsilon for eta={eta}, tau={t}")
    return 0.5 * (c + math.sqrt(disc))


@dataclass
class ConvergenceTrace:
    schedule: Schedule
    eta: float
    L: float
    loss_min: float
    thetas: np.ndarray  # (S + 2, d); rows 1..S+1 used
    m: np.ndarray  # (S + 1,); entries 1..S used
    loss: np.ndarray  # (S + 2,)
    grad_norm_sq: np.ndarray  # (S + 2,) full gradient at Theta^(s)
    block_grad_norm_sq: np.ndarray  # (S + 2, N + 1)
    noise: np.ndarray | None  # (S + 1, d)
    block_slices: list[slice] = field(default_factory=list)
    noise_var: tuple[float, ...] | None = None

    @property
    def S(self) -> int:
        return self.schedule.S

    @property
    def deltas(self) -> np.ndarray:
        """Rows 1..S hold Delta^(s); row 0 is zero."""
        d = np.zeros((self.S + 1, self.thetas.shape[1]))
        d[1:] = self.thetas[2:self.S + 2] - self.thetas[1:self.S + 1]
        return d

    @property
    def delta_norm_sq(self) -> np.ndarray:
        d = self.deltas
        return np.sum(d * d, axis=1)

    def snapshot(self, s: int, n: int) -> np.ndarray:
        """Copy of the parameters node n holds at step s."""
        e = self.schedule.exchange(s)
        out = self.thetas[e].copy()
        sl = self.block_slices[n - 1]
        out[sl] = self.thetas[s][sl]
        return out

    def avg_grad_norm_sq(self) -> float:
        return float(np.mean(self.grad_norm_sq[1:self.S + 1])) if self.S else 0.0


def run_abcd(
    objective: BlockObjective,
    schedule: Schedule,
    eta: float,
    noise_var: Sequence[float] | None = None,
    rng: np.random.Generator | None = None,
    theta0: np.ndarray | None = None,
    check: bool = True,
) -> ConvergenceTrace:
    """Simulate Theta^(s+1) = Theta^(s) - (eta/L) (grad_{m_s} L(snapshot) + noise).

    Noise for block n is N(0, sigma_n^2 / d_n I), so its expected squared norm
    is sigma_n^2.  With ``check`` the step size must satisfy the assumption the
    matching bound needs (strict Assumption 2 without noise, Assumption 5 with).
    """
    t = schedule.tau
    noisy = noise_var is not None and any(v > 0 for v in noise_var)
    if check:
        if noisy and not assumption5(eta, t):
            raise AssumptionError(f"eta={eta} violates eta < 1/(tau+1) = {1 / (t + 1)}")
        if not noisy and not assumption2(eta, t):
            raise AssumptionError(f"eta={eta} violates eta < 2/(2 tau+1) = {2 / (2 * t + 1)}")
    if noisy and rng is None:
        raise ValueError("noisy runs need an explicit generator")
    slices = objective.blocks(schedule.n_blocks)
    if noise_var is not None and len(noise_var) != schedule.n_blocks:
        raise ValueError("need one noise variance per block")
    S, d = schedule.S, objective.dim
    L = objective.lipschitz
    thetas = np.zeros((S + 2, d))
    thetas[1] = objective.theta0 if theta0 is None else theta0
    m = np.zeros(S + 1, dtype=np.int64)
    noise = np.zeros((S + 1, d)) if noisy else None
    loss = np.zeros(S + 2)
    gsq = np.zeros(S + 2)
    bgsq = np.zeros((S + 2, schedule.n_blocks))
    snap = thetas[1].copy()
    for s in range(1, S + 2):
        theta = thetas[s]
        g = objective.grad(theta)
        loss[s] = objective.value(theta)
        bgsq[s] = [float(np.sum(g[sl] ** 2)) for sl in slices]
        gsq[s] = float(np.sum(g * g))
        if s == S + 1:
            break
        if schedule.exchange(s) == s:
            snap = theta.copy()
        n = schedule.block(s)
        m[s] = n
        sl = slices[n - 1]
        local = snap.copy()
        local[sl] = theta[sl]
        step = objective.grad(local)[sl]
        if noisy:
            k = sl.stop - sl.start
            eps = math.sqrt(noise_var[n - 1] / k) * rng.standard_normal(k)
            noise[s, sl] = eps
            step = step + eps
        thetas[s + 1] = theta
        thetas[s + 1, sl] = theta[sl] - (eta / L) * step
    return ConvergenceTrace(
        schedule, eta, L, objective.loss_min, thetas, m, loss, gsq, bgsq, noise, slices,
        None if noise_var is None else tuple(float(v) for v in noise_var),
    )


# -- Lyapunov functions -----------------------------------------------------------------

def _window_sums(dsq: np.ndarray, t: int, S: int) -> np.ndarray:
    """W_s = sum_{i=max(1,s-t)}^{s-1} (i - (s - t) + 1) dsq[i] for s = 0..S+1."""
    pad = np.concatenate([np.zeros(t), dsq[1:S + 1]])  # pad[j] = dsq[j - t + 1]
    weights = np.arange(1, t + 1, dtype=np.float64)
    out = np.zeros(S + 2)
    if S == 0:
        return out
    win = sliding_window_view(pad, t)  # row j covers dsq[j-t+1 .. j]
    sums = win @ weights  # j = 0..S
    out[1:S + 2] = sums[:S + 1]
    return out


def _zeta_parts(trace: ConvergenceTrace, eps: float):
    t = trace.schedule.tau
    w = _window_sums(trace.delta_norm_sq, t, trace.S)
    return trace.loss - trace.loss_min, (trace.L / (2.0 * eps)) * w


def lyapunov_zeta(trace: ConvergenceTrace, s: int, eps: float | None = None) -> float:
    eps = epsilon_root(trace.eta, trace.schedule.tau) if eps is None else eps
    gap, extra = _zeta_parts(trace, eps)
    return float(gap[s] + extra[s])


def lyapunov_xi(trace: ConvergenceTrace, s: int) -> float:
    t = trace.schedule.tau
    if not trace.eta <= 1.0 / (t + 1):
        raise AssumptionError(f"xi needs eta <= 1/(tau+1), got eta={trace.eta}, tau={t}")
    rho0 = 1.0 / (trace.eta * (t + 1))
    coef = trace.eta * rho0 * trace.L * (t + 1) / 4.0
    w = _window_sums(trace.delta_norm_sq, t, trace.S)
    return float(trace.loss[s] - trace.loss_min + coef * w[s])


def zeta_series(trace: ConvergenceTrace, eps: float | None = None) -> np.ndarray:
    eps = epsilon_root(trace.eta, trace.schedule.tau) if eps is None else eps
    gap, extra = _zeta_parts(trace, eps)
    out = gap + extra
    out[0] = np.nan
    return out


def xi_series(trace: ConvergenceTrace) -> np.ndarray:
    t = trace.schedule.tau
    if not trace.eta <= 1.0 / (t + 1):
        raise AssumptionError(f"xi needs eta <= 1/(tau+1), got eta={trace.eta}, tau={t}")
    w = _window_sums(trace.delta_norm_sq, t, trace.S)
    out = trace.loss - trace.loss_min + (trace.L / 4.0) * w
    out[0] = np.nan
    return out


# -- monitors -----------------------------------------------------------------------

@dataclass
class MonitorReport:
    name: str
    checked: int
    violations: int
    worst_slack: float
    details: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.violations == 0


def _tol(scale) -> np.ndarray:
    return 64.0 * EPS * (np.abs(scale) + 1.0)


def lemma_slack(trace: ConvergenceTrace, eps: float | None = None) -> np.ndarray:
    """(zeta_s - zeta_{s+1}) - max(L(alpha-1)/2 (tau+1/2) ||Delta^(s)||^2, 0), for s = 1..S (index s)."""
    t = trace.schedule.tau
    if eps is None:
        try:
            eps = epsilon_root(trace.eta, t)
        except AssumptionError:
            eps = 1.0
    gap, extra = _zeta_parts(trace, eps)
    S = trace.S
    dec = (gap[1:S + 1] - gap[2:S + 2]) + (extra[1:S + 1] - extra[2:S + 2])
    alpha = 2.0 / (trace.eta * (2 * t + 1))
    # the chain ends in ">= 0", which only binds when alpha <= 1
    rhs = np.maximum(0.5 * trace.L * (alpha - 1.0) * (t + 0.5) * trace.delta_norm_sq[1:S + 1], 0.0)
    out = np.full(S + 1, np.nan)
    out[1:] = dec - rhs
    return out


def monitor_lemma_noiseless(trace: ConvergenceTrace) -> MonitorReport:
    """Check zeta_s - zeta_{s+1} >= L(alpha-1)/2 (tau+1/2) ||Delta^(s)||^2 >= 0 at every step."""
    t = trace.schedule.tau
    real_root = True
    try:
        eps = epsilon_root(trace.eta, t)
    except AssumptionError:
        eps, real_root = 1.0, False
    slack = lemma_slack(trace, eps)[1:]
    tol = _tol(np.abs(trace.loss[1:trace.S + 1]) + abs(trace.loss_min))
    bad = ~(slack >= -tol)  # NaN from a diverged run counts as a violation
    worst = float(np.nanmin(slack)) if slack.size and not np.all(np.isnan(slack)) else 0.0
    return MonitorReport("lemma1", slack.size, int(bad.sum()), worst,
                         {"epsilon": eps, "epsilon_real": real_root, "first": int(np.argmax(bad)) + 1 if bad.any() else None})


def _prefix(x: np.ndarray) -> np.ndarray:
    c = np.zeros(x.size + 1)
    c[1:] = np.cumsum(x)
    return c


def _range_sum(prefix: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """sum x[i] for i in lo..hi inclusive, where prefix[k] = sum x[0..k-1]."""
    return prefix[hi + 1] - prefix[lo]


def monitor_appendix_inequalities(trace: ConvergenceTrace) -> dict[str, MonitorReport]:
    """Lemma 2, Corollary 2, both squared forms and the block decomposition of ||grad||^2.

    Every node l is checked at every step k.
    """
    sch = trace.schedule
    t, S = sch.tau, trace.S
    dn = np.sqrt(trace.delta_norm_sq)
    dsq = trace.delta_norm_sq
    p1, p2 = _prefix(dn), _prefix(dsq)
    ks = np.arange(1, S + 1)
    lo1 = np.maximum(1, ks - t)
    lo2 = np.maximum(1, ks - 2 * t)
    hi = ks - 1
    win1, win1sq = _range_sum(p1, lo1, hi), _range_sum(p2, lo1, hi)
    win2, win2sq = _range_sum(p1, lo2, hi), _range_sum(p2, lo2, hi)
    ex = (ks - 1) // sch.period * sch.period + 1
    thetas = trace.thetas
    reports = {}
    acc = {name: [0, 0, np.inf] for name in ("lemma2", "corollary2", "lemma2_sq", "corollary2_sq")}

    def record(name, lhs, rhs):
        slack = rhs - lhs
        tol = _tol(rhs) * 4.0 + 1e-300
        r = acc[name]
        r[0] += slack.size
        r[1] += int(np.sum(~(slack >= -tol * np.maximum(1.0, np.abs(lhs)))))
        if slack.size and not np.all(np.isnan(slack)):
            r[2] = min(r[2], float(np.nanmin(slack)))

    for l in range(1, sch.n_blocks + 1):
        sl = trace.block_slices[l - 1]
        diff = thetas[ks] - thetas[ex]
        diff[:, sl] = 0.0
        d1 = np.sqrt(np.sum(diff * diff, axis=1))
        record("lemma2", d1, win1)
        record("lemma2_sq", d1 * d1, 0.5 * (t + 1) * win1sq)
        r = np.array([r_of(int(k), l, sch) for k in ks])
        valid = r >= 1
        kv, rv = ks[valid], r[valid]
        snap = thetas[(rv - 1) // sch.period * sch.period + 1].copy()
        snap[:, sl] = thetas[rv][:, sl]
        diff2 = thetas[kv] - snap
        d2 = np.sqrt(np.sum(diff2 * diff2, axis=1))
        record("corollary2", d2, win2[valid])
        record("corollary2_sq", d2 * d2, (t + 0.5) * win2sq[valid])
    for name, (checked, bad, worst) in acc.items():
        reports[name] = MonitorReport(name, checked, bad, worst if np.isfinite(worst) else 0.0)
    total = trace.grad_norm_sq[1:S + 2]
    parts = trace.block_grad_norm_sq[1:S + 2].sum(axis=1)
    err = np.abs(total - parts)
    bad = err > 1e-12 * np.maximum(total, 1.0)
    reports["decomposition"] = MonitorReport("decomposition", err.size, int(bad.sum()), -float(err.max(initial=0.0)))
    return reports


def staleness_ok(schedule: Schedule) -> bool:
    """Every component of every snapshot is at most tau steps old."""
    for s in range(1, schedule.S + 1):
        if s - schedule.exchange(s) > schedule.tau:
            return False
        for n in range(1, schedule.n_blocks + 1):
            if s - r_of(s_prime(s, schedule), n, schedule) > schedule.tau:
                return False
    return True


# -- bounds ------------------------------------------------------------------------

def theorem2_coefficient(params: BoundParams, schedule: Schedule) -> float:
    """Bracketed coefficient of the noiseless rate bound (tau = (2N+1)E substituted)."""
    N, E = schedule.N, schedule.E
    t = schedule.tau
    if not assumption2(params.eta, t):
        raise AssumptionError("Theorem 2 needs eta < 2/(2 tau + 1)")
    a = params.alpha(t)
    L, mu2 = params.L, params.mu2
    term1 = L * a * a * (2 * N + 1) * E * (4 * (N + 1) * E + 1) / (mu2 * (a - 1.0))
    term2 = 2 * L * (N + 1) * (2 * N + 1) * E * (4 * (2 * N + 1) * E - 1) / (
        (1.0 - mu2) * (a - 1.0) * (2 * (N + 1) * E + 0.5)
    )
    return term1 + term2


def bound_theorem2(params: BoundParams, schedule: Schedule, S: int | None = None) -> float:
    S = schedule.S if S is None else S
    if S < 1:
        raise ValueError("S must be positive")
    return (params.loss_init - params.loss_min) / S * theorem2_coefficient(params, schedule)


def bound_remark1(params: BoundParams, schedule: Schedule, delta: float) -> int:
    """Largest number of exchange rounds before the gradient norm^2 must fall below delta."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    coef = theorem2_coefficient(params, schedule)
    return int(math.floor((params.loss_init - params.loss_min) * coef / (delta * schedule.period)))


def round_bound_growth(ns: Sequence[int] = (1, 2, 4, 8, 16), E: int = 1, delta: float = 1e-3,
                       eta_frac: float = 0.9) -> dict[int, int]:
    """Round bound against network size with L = 1, unit loss gap and fixed delta.

    At fixed E the coefficient grows like N^2, so the bound on rounds grows
    like N, and it scales as 1/delta.
    """
    out = {}
    for n in ns:
        sch = Schedule(n + 1, E, 1)
        params = BoundParams(1.0, 1.0, 0.0, eta_frac * 2.0 / (2 * sch.tau + 1))
        out[int(n)] = bound_remark1(params, sch, delta)
    return out


def bound_theorem3(params: BoundParams, schedule: Schedule, S: int | None, sigma2: float) -> float:
    """Noisy rate bound; ``S=None`` returns the S -> infinity noise floor."""
    N, E = schedule.N, schedule.E
    t = schedule.tau
    eta, L, mu2 = params.eta, params.L, params.mu2
    if not assumption5(eta, t):
        raise AssumptionError("Theorem 3 needs eta < 1/(tau + 1)")
    if sigma2 < 0:
        raise ValueError("noise variance must be non-negative")
    c1 = 1.0 - eta * (t + 1)
    c2 = 4.0 - eta * (3 * t + 4)
    inv_s = 0.0 if S is None else 1.0 / S
    det = (params.loss_init - params.loss_min) * inv_s * (
        t * L / (mu2 * eta * c1) + 2 * eta * L * (N + 1) * (2 * t + 1) * (4 * t - 1) / ((1 - mu2) * c2)
    )
    floor = eta * sigma2 * (
        (t + 2) / (2 * mu2 * (N + 1) * c1)
        + 2 * eta * (N + 1) * (2 * t + 1) / ((1 - mu2) * c2) * (8 * E * (t - 0.5) * inv_s + 4 * E)
    )
    return det + floor


@dataclass(frozen=True)
class Verdict:
    status: str  # "pass", "fail" or "not applicable"
    lhs: float
    rhs: float

    @property
    def margin(self) -> float:
        return self.rhs - self.lhs

    @property
    def passed(self) -> bool:
        return self.status == "pass"


def verify_theorem(traces, params: BoundParams, sigma2: float | None = None) -> Verdict:
    """Compare (1/S) sum ||grad||^2 (seed-averaged for several traces) with the bound.

    ``sigma2=None`` selects the noiseless bound.
    """
    traces = [traces] if isinstance(traces, ConvergenceTrace) else list(traces)
    sch = traces[0].schedule
    lhs = float(np.mean([tr.avg_grad_norm_sq() for tr in traces]))
    try:
        if sigma2 is None:
            rhs = bound_theorem2(params, sch)
        else:
            rhs = bound_theorem3(params, sch, sch.S, sigma2)
    except AssumptionError:
        return Verdict("not applicable", lhs, float("nan"))
    return Verdict("pass" if lhs < rhs else "fail", lhs, rhs)


def params_for(trace: ConvergenceTrace, mu2: float = 0.5) -> BoundParams:
    return BoundParams(trace.L, float(trace.loss[1]), trace.loss_min, trace.eta, mu2)


def trace_rows(trace: ConvergenceTrace) -> list[dict]:
    """Per-step rows for CSV export."""
    zeta = None
    try:
        zeta = zeta_series(trace)
    except AssumptionError:
        pass
    try:
        xi = xi_series(trace)
    except AssumptionError:
        xi = np.full(trace.S + 2, np.nan)
    slack = lemma_slack(trace)
    dsq = trace.delta_norm_sq
    rows = []
    for s in range(1, trace.S + 1):
        rows.append(dict(
            s=s, m_s=int(trace.m[s]), loss=float(trace.loss[s]), grad_norm_sq=float(trace.grad_norm_sq[s]),
            delta_norm_sq=float(dsq[s]), zeta=float("nan") if zeta is None else float(zeta[s]),
            xi=float(xi[s]), lemma_slack=float(slack[s]),
        ))
    return rows


# -- protocol runs ---------------------------------------------------------------------

def secant_lipschitz(points: Sequence[tuple[np.ndarray, np.ndarray]]) -> float:
    """Largest ||g_a - g_b|| / ||p_a - p_b|| over pairs of (params, gradient) points.

    Every secant ratio is a lower bound on the gradient's Lipschitz constant.
    """
    best = 0.0
    for i in range(len(points)):
        for j in range(i):
            dp = np.linalg.norm(points[i][0] - points[j][0])
            if dp > 0:
                best = max(best, float(np.linalg.norm(points[i][1] - points[j][1]) / dp))
    return best


@dataclass(frozen=True)
class Remark1Check:
    rounds: int
    t_bound: int
    delta: float
    loss_init: float
    lipschitz: float
    eta: float

    @property
    def passed(self) -> bool:
        return self.rounds <= self.t_bound


def remark1_check(
    rounds: int,
    loss_init: float,
    grad_norm_sqs: Sequence[float],
    lipschitz: float,
    n_nodes: int,
    E: int,
    loss_min: float = 0.0,
    mu2: float = 0.5,
) -> Remark1Check:
    """Round count of a protocol run against the Remark 1 bound.

    The network's N sensors and the router form N + 1 blocks.  delta is the
    smallest squared gradient norm seen.  The step size is the admissible one
    that minimises the coefficient, so the resulting T_bound is the smallest
    the bound allows; with a lower estimate of L it is smaller still.
    """
    sch = Schedule(n_nodes + 1, max(E, 1), 1)
    t = sch.tau
    hi = 2.0 / (2 * t + 1)
    lip = max(lipschitz, np.finfo(float).tiny)

    def coef(eta):
        return theorem2_coefficient(BoundParams(lip, loss_init, loss_min, eta, mu2), sch)

    res = minimize_scalar(coef, bounds=(1e-6 * hi, hi * (1 - 1e-9)), method="bounded")
    delta = float(min(grad_norm_sqs))
    params = BoundParams(lip, loss_init, loss_min, float(res.x), mu2)
    return Remark1Check(rounds, bound_remark1(params, sch, delta), delta, loss_init, lipschitz, float(res.x))
