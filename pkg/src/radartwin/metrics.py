"""Statistical evaluation: MAE, within-1-bin proportions, FP/FN, convergence.

Conventions: estimates and truths are (n, 2) arrays of
(range_bin, doppler_bin).  MAE uses raw (unrounded) estimates; the
within-1-bin proportion rounds estimates to the nearest bin first.
Proportion confidence intervals are exact Clopper-Pearson.
"""

from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.stats import beta as beta_dist

from .errors import ConfigurationError
from .validation import check_bin_pairs, check_same_length


# ---------------------------------------------------------------------------
# Point metrics
# ---------------------------------------------------------------------------


def mae(estimates, truths):
    """Per-dimension mean absolute error and 1-sigma spread, in bins.

    Returns
    -------
    (mae, sigma) : two arrays of shape (2,)
        sigma is the sample standard deviation (ddof=1) of |error|;
        0 for a single pair.
    """
    est = check_bin_pairs(estimates, "estimates")
    tru = check_bin_pairs(truths, "truths")
    check_same_length(est, tru)
    abs_err = np.abs(est - tru)
    mean = abs_err.mean(axis=0)
    sigma = abs_err.std(axis=0, ddof=1) if len(abs_err) > 1 else np.zeros(2)
    return mean, sigma


def clopper_pearson(k: int, n: int, confidence: float = 0.95):
    """Exact binomial confidence interval for k successes out of n."""
    if n <= 0 or not (0 <= k <= n):
        raise ConfigurationError(f"need 0 <= k <= n with n > 0, got k={k}, n={n}")
    alpha = 1.0 - confidence
    lo = 0.0 if k == 0 else float(beta_dist.ppf(alpha / 2.0, k, n - k + 1))
    hi = 1.0 if k == n else float(beta_dist.ppf(1.0 - alpha / 2.0, k + 1, n - k))
    return lo, hi


@dataclass(frozen=True)
class WithinBinReport:
    """Within-1-bin percentages with 95 % Clopper-Pearson intervals (percent)."""

    percent_range: float
    percent_doppler: float
    percent_joint: float
    ci_range: tuple
    ci_doppler: tuple
    ci_joint: tuple
    n: int


def within_one_bin(estimates, truths, radius: float = 1.0,
                   confidence: float = 0.95) -> WithinBinReport:
    """Fraction of samples whose rounded estimate is within ``radius`` bins."""
    est = check_bin_pairs(estimates, "estimates")
    tru = check_bin_pairs(truths, "truths")
    check_same_length(est, tru)
    n = len(est)
    ok = np.abs(np.rint(est) - tru) <= radius
    k_range = int(ok[:, 0].sum())
    k_dopp = int(ok[:, 1].sum())
    k_joint = int(np.all(ok, axis=1).sum())

    def pct_ci(k):
        lo, hi = clopper_pearson(k, n, confidence)
        return 100.0 * k / n, (100.0 * lo, 100.0 * hi)

    p_r, ci_r = pct_ci(k_range)
    p_d, ci_d = pct_ci(k_dopp)
    p_j, ci_j = pct_ci(k_joint)
    return WithinBinReport(p_r, p_d, p_j, ci_r, ci_d, ci_j, n)


def fp_fn_rates(detections_per_map, truths_per_map, match_radius: float = 1.0):
    """False positives per map and false-negative rate.

    Parameters
    ----------
    detections_per_map : sequence of (k_i, 2) arrays (k_i may be 0)
    truths_per_map : sequence of (t_i, 2) arrays or single (2,) pairs
    match_radius : Chebyshev matching radius in bins

    Greedy nearest matching: candidate pairs sorted by distance, each
    detection and truth used at most once.  Unmatched detections are false
    positives, unmatched truths false negatives.
    """
    if match_radius < 0:
        raise ConfigurationError("match_radius must be >= 0")
    check_same_length(detections_per_map, truths_per_map, "detections", "truths")
    n_fp = 0
    n_fn = 0
    n_truth = 0
    for dets, tru in zip(detections_per_map, truths_per_map):
        dets = np.asarray(dets, dtype=np.float64).reshape(-1, 2)
        tru = np.asarray(tru, dtype=np.float64).reshape(-1, 2)
        n_truth += len(tru)
        if len(dets) == 0:
            n_fn += len(tru)
            continue
        if len(tru) == 0:
            n_fp += len(dets)
            continue
        dist = np.max(
            np.abs(dets[:, None, :] - tru[None, :, :]), axis=2
        )  # Chebyshev, (k, t)
        pairs = sorted(
            ((dist[i, j], i, j) for i in range(len(dets)) for j in range(len(tru))),
        )
        used_d, used_t = set(), set()
        for d, i, j in pairs:
            if d > match_radius:
                break
            if i in used_d or j in used_t:
                continue
            used_d.add(i)
            used_t.add(j)
        n_fp += len(dets) - len(used_d)
        n_fn += len(tru) - len(used_t)
    n_maps = len(detections_per_map)
    fp_per_map = n_fp / n_maps if n_maps else 0.0
    fn_rate = n_fn / n_truth if n_truth else 0.0
    return fp_per_map, fn_rate


# ---------------------------------------------------------------------------
# Monte Carlo convergence (Welford)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvergenceState:
    """Running mean/variance of a scalar stream with a CI stopping rule.

    Converged when the 95 % CI half-width (1.96 * s / sqrt(n)) drops below
    the tolerance and at least ``n_min`` samples have been seen.
    """

    n: int = 0
    mean: float = 0.0
    m2: float = 0.0
    n_min: int = 30

    @property
    def variance(self) -> float:
        return self.m2 / (self.n - 1) if self.n > 1 else 0.0

    @property
    def half_width(self) -> float:
        if self.n < 2:
            return float("inf")
        return 1.96 * np.sqrt(self.variance / self.n)

    def converged(self, tolerance: float) -> bool:
        return self.n >= self.n_min and self.half_width < tolerance


def convergence_update(state: ConvergenceState, value: float,
                       tolerance: float = None) -> ConvergenceState:
    """Welford single-sample update; returns a new state."""
    if not np.isfinite(value):
        raise ConfigurationError("convergence stream values must be finite")
    n = state.n + 1
    delta = value - state.mean
    mean = state.mean + delta / n
    m2 = state.m2 + delta * (value - mean)
    return ConvergenceState(n=n, mean=mean, m2=m2, n_min=state.n_min)


def merge_convergence(a: ConvergenceState, b: ConvergenceState) -> ConvergenceState:
    """Combine two partial states (workers reducing independently)."""
    if a.n == 0:
        return b
    if b.n == 0:
        return a
    n = a.n + b.n
    delta = b.mean - a.mean
    mean = a.mean + delta * b.n / n
    m2 = a.m2 + b.m2 + delta**2 * a.n * b.n / n
    return ConvergenceState(n=n, mean=mean, m2=m2, n_min=a.n_min)


# ---------------------------------------------------------------------------
# Gate + aggregate report
# ---------------------------------------------------------------------------


def success_gate(successes: int, n: int, target: float, confidence: float = 0.95):
    """Pass iff the lower confidence bound on the success rate reaches target.

    Returns (passed, lower_bound).
    """
    lo, _ = clopper_pearson(successes, n, confidence)
    return lo >= target, lo


@dataclass
class MetricReport:
    """One algorithm's evaluation on one dataset."""

    algorithm: str
    n: int
    mae_range: float
    mae_doppler: float
    sigma_range: float
    sigma_doppler: float
    within_1bin_range: float  # percent
    within_1bin_doppler: float
    within_1bin_joint: float
    ci95_range: tuple
    ci95_doppler: tuple
    ci95_joint: tuple
    fp_per_map: float = 0.0
    fn_rate: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ci95_range"] = list(self.ci95_range)
        d["ci95_doppler"] = list(self.ci95_doppler)
        d["ci95_joint"] = list(self.ci95_joint)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        d = dict(d)
        for key in ("ci95_range", "ci95_doppler", "ci95_joint"):
            d[key] = tuple(d[key])
        return cls(**d)

    CSV_COLUMNS = (
        "algorithm", "n", "mae_range", "mae_doppler", "sigma_range",
        "sigma_doppler", "within_1bin_range", "within_1bin_doppler",
        "within_1bin_joint", "ci95_range_lo", "ci95_range_hi",
        "ci95_doppler_lo", "ci95_doppler_hi", "ci95_joint_lo", "ci95_joint_hi",
        "fp_per_map", "fn_rate",
    )

    def csv_row(self) -> list:
        return [
            self.algorithm, self.n, self.mae_range, self.mae_doppler,
            self.sigma_range, self.sigma_doppler, self.within_1bin_range,
            self.within_1bin_doppler, self.within_1bin_joint,
            self.ci95_range[0], self.ci95_range[1],
            self.ci95_doppler[0], self.ci95_doppler[1],
            self.ci95_joint[0], self.ci95_joint[1],
            self.fp_per_map, self.fn_rate,
        ]


def compute_report(algorithm: str, estimates, truths, detections_per_map=None,
                   match_radius: float = 1.0) -> MetricReport:
    """Bundle MAE, within-1-bin, and (optionally) FP/FN into one report."""
    mean, sigma = mae(estimates, truths)
    wb = within_one_bin(estimates, truths)
    fp_per_map, fn_rate = 0.0, 0.0
    if detections_per_map is not None:
        truth_list = [np.asarray(t, dtype=np.float64).reshape(-1, 2) for t in truths]
        fp_per_map, fn_rate = fp_fn_rates(detections_per_map, truth_list, match_radius)
    return MetricReport(
        algorithm=algorithm,
        n=wb.n,
        mae_range=float(mean[0]),
        mae_doppler=float(mean[1]),
        sigma_range=float(sigma[0]),
        sigma_doppler=float(sigma[1]),
        within_1bin_range=wb.percent_range,
        within_1bin_doppler=wb.percent_doppler,
        within_1bin_joint=wb.percent_joint,
        ci95_range=wb.ci_range,
        ci95_doppler=wb.ci_doppler,
        ci95_joint=wb.ci_joint,
        fp_per_map=fp_per_map,
        fn_rate=fn_rate,
    )
