"""Sample summaries, Welch's t-test, a permutation oracle and the attack verdict."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from itertools import combinations
from typing import Optional, Sequence

import numpy as np

DEFAULT_ALPHA = 0.05


@dataclass
class SampleSummary:
    n: int
    mean: float
    variance: Optional[float]
    min: float
    max: float
    bin_edges: list = field(default_factory=list)
    counts: list = field(default_factory=list)


def _exact_moments(values: Sequence[int]) -> tuple[float, Optional[float]]:
    n = len(values)
    s = sum(values)
    mean = Fraction(s, n)
    if n < 2:
        return float(mean), None
    ss = sum(v * v for v in values)
    var = Fraction(n * ss - s * s, n * (n - 1))
    return float(mean), float(var)


def _float_moments(x: np.ndarray) -> tuple[float, Optional[float]]:
    # shifted two-pass; the shift keeps large offsets (~1e8 ticks) from cancelling
    shift = x[0]
    d = x - shift
    n = x.size
    mean_d = math.fsum(d) / n
    if n < 2:
        return shift + mean_d, None
    r = d - mean_d
    var = (math.fsum(r * r) - math.fsum(r) ** 2 / n) / (n - 1)
    return float(shift + mean_d), max(var, 0.0)


def moments(samples) -> tuple[float, Optional[float]]:
    """Mean and unbiased variance; exact for integer samples."""
    arr = np.asarray(samples)
    if arr.size == 0:
        raise ValueError("empty sample")
    if np.issubdtype(arr.dtype, np.integer):
        return _exact_moments([int(v) for v in arr.ravel()])
    return _float_moments(arr.astype(np.float64).ravel())


def summarize(samples, bins: int | Sequence[float] = 50) -> SampleSummary:
    arr = np.asarray(samples)
    if arr.size == 0:
        raise ValueError("cannot summarize an empty sample")
    mean, var = moments(arr)
    counts, edges = np.histogram(arr.astype(np.float64), bins=bins)
    return SampleSummary(
        n=int(arr.size), mean=mean, variance=var,
        min=float(arr.min()), max=float(arr.max()),
        bin_edges=edges.tolist(), counts=counts.astype(int).tolist(),
    )


# --- Student t distribution -------------------------------------------------

def _betacf(a: float, b: float, x: float, max_iter: int = 10_000, eps: float = 1e-16) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def _stirling_tail(x: float) -> float:
    x2 = x * x
    return 1.0 / (12 * x) - 1.0 / (360 * x * x2) + 1.0 / (1260 * x * x2 * x2) - 1.0 / (1680 * x * x2 ** 3)


def _log_beta_front(a: float, b: float) -> float:
    """log Gamma(a+b) - log Gamma(a) - log Gamma(b), without cancellation for large a or b."""
    big, small = (a, b) if a >= b else (b, a)
    if big < 10.0:
        return math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
    # Stirling difference for log Gamma(big + small) - log Gamma(big)
    ratio = ((big - 0.5) * math.log1p(small / big) + small * math.log(big + small) - small
             + _stirling_tail(big + small) - _stirling_tail(big))
    return ratio - math.lgamma(small)


def betainc(a: float, b: float, x: float, y: Optional[float] = None) -> float:
    """Regularized incomplete beta I_x(a, b); pass ``y = 1 - x`` when it is known more precisely."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must be in [0, 1]")
    if y is None:
        y = 1.0 - x
    if x == 0.0 or y == 0.0:
        return 0.0 if x == 0.0 else 1.0
    log_x = math.log(x) if x < 0.5 else math.log1p(-y)
    log_y = math.log(y) if y < 0.5 else math.log1p(-x)
    log_front = _log_beta_front(a, b) + a * log_x + b * log_y
    # the fraction converges fast for x < (a+1)/(a+b+2); use symmetry otherwise
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, y) / b


def t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` (real) degrees of freedom."""
    if math.isinf(t):
        return 0.0
    if t == 0.0:
        return 1.0
    t2 = t * t
    x = df / (df + t2)
    y = t2 / (df + t2)
    return min(1.0, max(0.0, betainc(df / 2.0, 0.5, x, y)))


def t_cdf(t: float, df: float) -> float:
    p = 0.5 * t_sf_two_sided(t, df)
    return 1.0 - p if t > 0 else p


# --- tests --------------------------------------------------------------------

@dataclass
class TTestResult:
    t_statistic: float
    degrees_of_freedom: float
    p_value: float
    alpha: float
    reject: bool
    mean_a: float = float("nan")
    mean_b: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)


def welch_t_test(a, b, alpha: float = DEFAULT_ALPHA) -> TTestResult:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.size < 2 or b.size < 2:
        raise ValueError("welch_t_test needs at least two samples per group")
    ma, va = moments(a)
    mb, vb = moments(b)
    na, nb = a.size, b.size
    if va == 0 and vb == 0:
        same = ma == mb
        t = 0.0 if same else math.copysign(math.inf, ma - mb)
        p = 1.0 if same else 0.0
        return TTestResult(t, float(na + nb - 2), p, alpha, p < alpha, ma, mb)
    sa, sb = va / na, vb / nb
    se2 = sa + sb
    t = (ma - mb) / math.sqrt(se2)
    df = se2 * se2 / (sa * sa / (na - 1) + sb * sb / (nb - 1))
    p = t_sf_two_sided(t, df)
    return TTestResult(t, df, p, alpha, p < alpha, ma, mb)


def permutation_test(a, b, iterations: int = 10_000, seed: int = 0) -> float:
    """Two-sided p-value of |mean(a) - mean(b)| under random relabelling.

    When the number of distinct splits does not exceed ``iterations`` they are
    enumerated exactly; otherwise ``iterations`` random permutations are drawn
    and the observed labelling is counted once.
    """
    if iterations < 1000:
        raise ValueError("iterations must be >= 1000")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 1 or b.size < 1:
        raise ValueError("permutation_test needs non-empty groups")
    pooled = np.concatenate([a, b])
    n, na = pooled.size, a.size
    total = pooled.sum()
    observed = abs(a.mean() - b.mean())
    # relative slack so that float ties with the observed statistic count as extreme
    tol = 1e-12 * max(1.0, float(np.abs(pooled).max()))

    def stat(sum_a):
        return np.abs(sum_a / na - (total - sum_a) / (n - na))

    if math.comb(n, na) <= iterations:
        hits = count = 0
        for idx in combinations(range(n), na):
            count += 1
            hits += stat(pooled[list(idx)].sum()) >= observed - tol
        return hits / count
    rng = np.random.Generator(np.random.PCG64(seed))
    hits = 0
    chunk = 1000
    done = 0
    while done < iterations:
        k = min(chunk, iterations - done)
        perms = rng.permuted(np.tile(pooled, (k, 1)), axis=1)
        hits += int(np.count_nonzero(stat(perms[:, :na].sum(axis=1)) >= observed - tol))
        done += k
    return (hits + 1) / (iterations + 1)


# --- verdict ------------------------------------------------------------------

@dataclass
class AttackVerdict:
    config_digest: Optional[str]
    tests: list
    feasible: bool
    reproducible: bool
    mean_shift_ticks: float

    @property
    def min_p_value(self) -> float:
        return min(t.p_value for t in self.tests)

    def to_dict(self) -> dict:
        return {
            "config_digest": self.config_digest,
            "feasible": self.feasible,
            "reproducible": self.reproducible,
            "mean_shift_ticks": self.mean_shift_ticks,
            "tests": [t.to_dict() for t in self.tests],
        }


class DigestMismatch(ValueError):
    pass


def assess(with_attack: list, without_attack: list, alpha: float = DEFAULT_ALPHA) -> AttackVerdict:
    """Pair repetitions, run Welch's test on each pair, and aggregate.

    The channel is feasible only when every repetition rejects equal means.
    """
    if len(with_attack) != len(without_attack):
        raise ValueError("with/without repetition counts differ")
    if not with_attack:
        raise ValueError("no repetitions to assess")
    digests = {t.metadata.get("config_digest") for t in list(with_attack) + list(without_attack)}
    if len(digests) != 1:
        raise DigestMismatch(f"traces come from different configurations: {sorted(map(str, digests))}")
    tests, shifts = [], []
    for w, wo in zip(with_attack, without_attack):
        res = welch_t_test(w.delta_ticks, wo.delta_ticks, alpha)
        tests.append(res)
        shifts.append(res.mean_a - res.mean_b)
    rejects = [t.reject for t in tests]
    return AttackVerdict(
        config_digest=digests.pop(),
        tests=tests,
        feasible=all(rejects),
        reproducible=len(set(rejects)) == 1,
        mean_shift_ticks=float(np.mean(shifts)),
    )


def summary_table(verdict: AttackVerdict) -> str:
    lines = [f"{'rep':>3}  {'t':>12}  {'df':>10}  {'p':>10}  reject"]
    for i, t in enumerate(verdict.tests):
        lines.append(f"{i:>3}  {t.t_statistic:>12.4g}  {t.degrees_of_freedom:>10.1f}  "
                     f"{t.p_value:>10.3g}  {'yes' if t.reject else 'no'}")
    lines.append(f"feasible={verdict.feasible} reproducible={verdict.reproducible} "
                 f"mean_shift_ticks={verdict.mean_shift_ticks:.1f}")
    return "\n".join(lines)
