"""Numeric checks of the policy-gradient improvement bounds on tabular policies.

Everything here works with the unclipped objective

    J(theta) = E_g sum_a pi_theta(a|g) A(g, a)

for a fixed per-(prompt, action) advantage table ``A``, so that
``grad J = E[Z A]`` holds exactly and all expectations can be enumerated
over the d flat (prompt, action) outcomes.

Fisher quantities are computed on the regularized matrix F + lam_reg I,
which is what makes the whitening well defined for softmax blocks.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .policy import TabularPolicy


class DegenerateAdvantage(ValueError):
    """The advantage table has zero second moment (V = 0)."""


@dataclass(frozen=True)
class TheoryConfig:
    smoothness: float | None = None  # None -> estimate numerically
    safety_factor: float = 2.0
    batch_size: int = 8
    learning_rate: float = 0.5
    mc_samples: int = 10_000
    tolerance: float = 1e-9
    lam_reg: float = 1e-8
    trials: int = 100
    seed: int = 0
    d_max: int = 12
    hessian_segments: int = 32
    hessian_step: float = 1e-4
    lemma1_policies: int = 20
    degenerate_trials: int = 0

    def __post_init__(self):
        for name in ("safety_factor", "batch_size", "learning_rate", "mc_samples", "tolerance",
                     "lam_reg", "d_max", "hessian_segments", "hessian_step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name}: must be > 0")
        if self.smoothness is not None and not self.smoothness > 0:
            raise ValueError("smoothness: must be > 0")
        if self.trials < 0 or self.degenerate_trials < 0:
            raise ValueError("trials: must be >= 0")


@dataclass(frozen=True)
class FisherBundle:
    F: np.ndarray
    lam_max: float
    F_inv_sqrt: np.ndarray
    lam_reg: float
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def lam_max_reg(self) -> float:
        return self.lam_max + self.lam_reg


@dataclass
class BoundReport:
    name: str
    lhs: float
    rhs: float
    satisfied: bool
    margin: float
    trials: int = 1
    exact: bool = True
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _report(name, lhs, rhs, tol, exact=True, **details) -> BoundReport:
    lhs, rhs = float(lhs), float(rhs)
    return BoundReport(name, lhs, rhs, lhs <= rhs + tol, rhs - lhs, 1, exact, details)


# ------------------------------------------------------------------ basics

def fisher(policy: TabularPolicy, lam_reg: float = 1e-8) -> FisherBundle:
    Z = policy.score_matrix()
    w = policy.outcome_weights()
    F = (Z * w[:, None]).T @ Z
    F = 0.5 * (F + F.T)
    try:
        evals, evecs = np.linalg.eigh(F + lam_reg * np.eye(policy.dim))
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"eigendecomposition of the Fisher matrix failed: {exc}") from exc
    if evals.min() <= 0:
        raise RuntimeError("regularized Fisher matrix is not positive definite")
    inv_sqrt = (evecs / np.sqrt(evals)) @ evecs.T
    return FisherBundle(F, float(evals.max() - lam_reg), inv_sqrt, lam_reg, evals - lam_reg, evecs)


@dataclass(frozen=True)
class Moments:
    grad: np.ndarray       # E[Z A]
    V: float               # E[A^2]
    second_moment_x: float  # E||Z A||^2
    var_x: float           # Var(Z A), one-sample estimator variance
    g_inf: float           # max ||Z|| over outcomes with positive probability


def moments(policy: TabularPolicy, adv) -> Moments:
    A = np.asarray(adv, dtype=float).ravel()
    if A.shape != (policy.dim,):
        raise ValueError(f"advantage table must have {policy.dim} entries")
    Z = policy.score_matrix()
    w = policy.outcome_weights()
    grad = Z.T @ (w * A)
    V = float(np.dot(w, A * A))
    znorm2 = np.einsum("ij,ij->i", Z, Z)
    second = float(np.dot(w, znorm2 * A * A))
    g_inf = float(np.sqrt(znorm2[w > 0].max()))
    return Moments(grad, V, second, second - float(grad @ grad), g_inf)


def objective(policy: TabularPolicy, adv, thetas=None) -> np.ndarray | float:
    """J at the policy's own parameters, or at every row of ``thetas``."""
    A = np.ascontiguousarray(adv, dtype=np.float64).ravel()
    weights = np.full(policy.num_prompts, 1.0 / policy.num_prompts)
    if thetas is None:
        return float(kernels.expected_values(policy.theta[None, :].copy(), policy.offsets, A, weights)[0])
    thetas = np.ascontiguousarray(np.atleast_2d(thetas), dtype=np.float64)
    return kernels.expected_values(thetas, policy.offsets, A, weights)


def rho(policy: TabularPolicy, adv, bundle: FisherBundle | None = None, lam_reg: float = 1e-8) -> float:
    bundle = bundle or fisher(policy, lam_reg)
    m = moments(policy, adv)
    if m.V <= 0:
        raise DegenerateAdvantage("degenerate advantage: V = 0")
    eua = bundle.F_inv_sqrt @ m.grad
    return float(np.linalg.norm(eua) / np.sqrt(policy.dim * m.V))


def whitened_second_moment(policy: TabularPolicy, bundle: FisherBundle) -> float:
    """E||U||^2 with U = F^{-1/2} Z (equals the rank of F up to regularization)."""
    U = policy.score_matrix() @ bundle.F_inv_sqrt.T
    return float(np.dot(policy.outcome_weights(), np.einsum("ij,ij->i", U, U)))


def aligned_advantage(policy: TabularPolicy, bundle: FisherBundle) -> np.ndarray:
    """Advantage table whose gradient is the top Fisher eigenvector direction (tight Lemma 2 case)."""
    v = bundle.eigenvectors[:, np.argmax(bundle.eigenvalues)]
    return policy.score_matrix() @ v


# ------------------------------------------------------------- draws of g-hat

def draw_estimates(policy: TabularPolicy, adv, batch_size: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` minibatch REINFORCE estimates ``mean_b Z_b A_b``, shape (n, d)."""
    A = np.ascontiguousarray(adv, dtype=np.float64).ravel()
    w = policy.outcome_weights()
    cdf = np.cumsum(w)
    draws = np.searchsorted(cdf, rng.random((n, batch_size)) * cdf[-1], side="right")
    draws = np.minimum(draws, policy.dim - 1).astype(np.int64)
    return kernels.score_estimates(draws, policy.block_of.astype(np.int64), policy.offsets,
                                   np.ascontiguousarray(policy.flat_probs), A)


def enumerate_estimates(policy: TabularPolicy, adv, batch_size: int, limit: int = 200_000):
    """All d^B minibatch estimates with their probabilities."""
    d = policy.dim
    if d ** batch_size > limit:
        raise ValueError(f"{d}^{batch_size} minibatches exceeds enumeration limit {limit}")
    A = np.asarray(adv, dtype=float).ravel()
    w = policy.outcome_weights()
    X = policy.score_matrix() * A[:, None]
    tuples = np.array(list(itertools.product(range(d), repeat=batch_size)), dtype=np.int64)
    probs = np.prod(w[tuples], axis=1)
    est = X[tuples].mean(axis=1)
    return est, probs


# ------------------------------------------------------------------ bounds

def check_lemma2(policy, adv, cfg: TheoryConfig = TheoryConfig(), bundle=None) -> BoundReport:
    """||grad J||^2 <= lam_max d rho^2 V."""
    bundle = bundle or fisher(policy, cfg.lam_reg)
    m = moments(policy, adv)
    r = rho(policy, adv, bundle)
    lhs = float(m.grad @ m.grad)
    rhs = bundle.lam_max_reg * policy.dim * r * r * m.V
    return _report("lemma2", lhs, rhs, cfg.tolerance, rho=r, V=m.V, lam_max=bundle.lam_max, d=policy.dim)


def check_lemma3(policy, adv, cfg: TheoryConfig = TheoryConfig()) -> BoundReport:
    """Var(g-hat) <= G_inf^2 V / B."""
    m = moments(policy, adv)
    if m.V <= 0:
        raise DegenerateAdvantage("degenerate advantage: V = 0")
    B = cfg.batch_size
    return _report("lemma3", m.var_x / B, m.g_inf ** 2 * m.V / B, cfg.tolerance, g_inf=m.g_inf, V=m.V, B=B)


def check_variance_decomposition(policy, adv, cfg: TheoryConfig = TheoryConfig(), *,
                                 mode: str = "exact", batch_size: int | None = None,
                                 rng: np.random.Generator | None = None) -> BoundReport:
    """E||g-hat||^2 = ||grad J||^2 + Var(g-hat).

    ``exact`` enumerates every minibatch; ``mc`` estimates both sides from
    ``cfg.mc_samples`` draws and passes when they agree within 3 standard errors.
    """
    B = batch_size or (cfg.batch_size if mode == "mc" else 2)
    m = moments(policy, adv)
    grad2 = float(m.grad @ m.grad)
    if mode == "exact":
        est, probs = enumerate_estimates(policy, adv, B)
        second = float(np.dot(probs, np.einsum("ij,ij->i", est, est)))
        dev = est - m.grad
        var = float(np.dot(probs, np.einsum("ij,ij->i", dev, dev)))
        lhs, rhs = second, grad2 + var
        ok = abs(lhs - rhs) <= 1e-10
        return BoundReport("variance_decomposition", lhs, rhs, ok, 1e-10 - abs(lhs - rhs), 1, True,
                           {"B": B, "var": var, "var_formula": m.var_x / B})
    if mode != "mc":
        raise ValueError(f"unknown mode {mode!r}")
    rng = rng or np.random.default_rng(cfg.seed)
    est = draw_estimates(policy, adv, B, cfg.mc_samples, rng)
    n = len(est)
    sq = np.einsum("ij,ij->i", est, est)
    dev = est - m.grad
    dsq = np.einsum("ij,ij->i", dev, dev)
    lhs = float(sq.mean())
    rhs = grad2 + float(dsq.mean())
    # lhs - rhs = mean(2 grad . (g-hat - grad)), a zero-mean average
    cross = 2.0 * dev @ m.grad
    se_cross = float(cross.std(ddof=1) / np.sqrt(n))
    se_sq = float(sq.std(ddof=1) / np.sqrt(n))
    exact_rhs = grad2 + m.var_x / B
    ok = abs(lhs - rhs) <= 3 * se_cross + 1e-12 and abs(lhs - exact_rhs) <= 3 * se_sq + 1e-12
    return BoundReport("variance_decomposition_mc", lhs, rhs, ok, 3 * se_cross - abs(lhs - rhs), n, False,
                       {"B": B, "se": se_cross, "exact_rhs": exact_rhs, "se_second_moment": se_sq})


def finite_difference_hessian(policy: TabularPolicy, adv, theta, h: float = 1e-4) -> np.ndarray:
    d = policy.dim
    eye = np.eye(d) * h
    pts = []
    for i in range(d):
        for j in range(d):
            pts += [theta + eye[i] + eye[j], theta + eye[i] - eye[j], theta - eye[i] + eye[j], theta - eye[i] - eye[j]]
    vals = objective(policy, adv, np.array(pts)).reshape(d, d, 4)
    H = (vals[..., 0] - vals[..., 1] - vals[..., 2] + vals[..., 3]) / (4 * h * h)
    return 0.5 * (H + H.T)


def smoothness_bound(policy: TabularPolicy, adv) -> float:
    """Certified global smoothness constant: 3 max_g range(A_g) / G."""
    A = np.asarray(adv, dtype=float).ravel()
    spans = [np.ptp(A[policy.offsets[g]:policy.offsets[g + 1]]) for g in range(policy.num_prompts)]
    return 3.0 * max(spans) / policy.num_prompts


def estimate_smoothness(policy, adv, cfg: TheoryConfig = TheoryConfig(), rng=None) -> float:
    """Largest |eigenvalue| of finite-difference Hessians at random points on update segments.

    The safety factor is *not* applied here.
    """
    rng = rng or np.random.default_rng(cfg.seed)
    steps = cfg.learning_rate * draw_estimates(policy, adv, cfg.batch_size, cfg.hessian_segments, rng)
    t = rng.random(cfg.hessian_segments)
    best = 0.0
    for s, ti in zip(steps, t):
        H = finite_difference_hessian(policy, adv, policy.theta + ti * s, cfg.hessian_step)
        best = max(best, float(np.abs(np.linalg.eigvalsh(H)).max()))
    # the start point too, so a zero-length segment still yields a curvature
    H0 = finite_difference_hessian(policy, adv, np.array(policy.theta), cfg.hessian_step)
    return max(best, float(np.abs(np.linalg.eigvalsh(H0)).max()))


def check_lemma1(policy, adv, cfg: TheoryConfig = TheoryConfig(), *, smoothness: float | None = None,
                 rng: np.random.Generator | None = None, n_draws: int | None = None) -> BoundReport:
    """E[J(theta + a g-hat) - J(theta)] <= a||grad J||^2 + (a^2 L / 2) E||g-hat||^2.

    Also records the fraction of individual draws satisfying the pointwise
    smoothness form J(theta+) - J(theta) <= a grad.g-hat + (a^2 L/2)||g-hat||^2.
    """
    rng = rng or np.random.default_rng(cfg.seed)
    L = smoothness or cfg.smoothness
    if L is None:
        L = cfg.safety_factor * estimate_smoothness(policy, adv, cfg, rng)
    alpha, B = cfg.learning_rate, cfg.batch_size
    m = moments(policy, adv)
    est = draw_estimates(policy, adv, B, n_draws or cfg.mc_samples, rng)
    j0 = objective(policy, adv)
    delta = objective(policy, adv, policy.theta[None, :] + alpha * est) - j0
    sq = np.einsum("ij,ij->i", est, est)
    pointwise = alpha * est @ m.grad + 0.5 * alpha * alpha * L * sq
    hits = delta <= pointwise + cfg.tolerance
    grad2 = float(m.grad @ m.grad)
    exact_rhs = alpha * grad2 + 0.5 * alpha * alpha * L * (grad2 + m.var_x / B)
    # both sides as sample means over the same draws, so sampling noise cancels
    lhs, rhs = float(delta.mean()), float(pointwise.mean())
    return BoundReport("lemma1", lhs, rhs, lhs <= rhs + cfg.tolerance, rhs - lhs, len(est), False,
                       {"L": float(L), "pointwise_hits": int(hits.sum()), "pointwise_fraction": float(hits.mean()),
                        "alpha": alpha, "B": B, "exact_rhs": exact_rhs})


def check_gradient_ray(policy, adv, smoothness: float, steps) -> BoundReport:
    """Lemma 1 with g-hat = grad J: J(theta + t grad) - J(theta) <= t||grad||^2 + (t^2 L/2)||grad||^2."""
    m = moments(policy, adv)
    grad2 = float(m.grad @ m.grad)
    steps = np.asarray(steps, dtype=float)
    delta = objective(policy, adv, policy.theta[None, :] + steps[:, None] * m.grad[None, :]) - objective(policy, adv)
    bound = steps * grad2 + 0.5 * steps ** 2 * smoothness * grad2
    worst = int(np.argmin(bound - delta))
    return BoundReport("gradient_ray", float(delta[worst]), float(bound[worst]),
                       bool(np.all(delta <= bound + 1e-12)), float((bound - delta).min()), len(steps), False,
                       {"L": smoothness})


def improvement_upper_bound(alpha, L, lam_max, d, rho_, V, g_inf, B) -> tuple[float, float]:
    """(signal, noise) terms of the signal/noise decomposition."""
    signal = alpha * (1 + alpha * L / 2) * lam_max * d * rho_ ** 2 * V
    noise = alpha ** 2 * L / 2 * g_inf ** 2 / B * V
    return signal, noise


def check_theorem1(policy, adv, cfg: TheoryConfig = TheoryConfig(), *, smoothness: float | None = None,
                   bundle=None, rng=None) -> BoundReport:
    """a(1 + aL/2)||grad J||^2 + (a^2 L/2) Var(g-hat) <= signal + noise.

    This chain is exact for any L > 0. The expected improvement itself
    (which needs a valid L) is reported in ``details``.
    """
    bundle = bundle or fisher(policy, cfg.lam_reg)
    L = smoothness or cfg.smoothness
    if L is None:
        L = smoothness_bound(policy, adv)
    alpha, B = cfg.learning_rate, cfg.batch_size
    m = moments(policy, adv)
    r = rho(policy, adv, bundle)
    grad2 = float(m.grad @ m.grad)
    middle = alpha * (1 + alpha * L / 2) * grad2 + alpha ** 2 * L / 2 * m.var_x / B
    signal, noise = improvement_upper_bound(alpha, L, bundle.lam_max_reg, policy.dim, r, m.V, m.g_inf, B)
    details = {"L": float(L), "signal": signal, "noise": noise, "rho": r, "V": m.V}
    try:
        est, probs = enumerate_estimates(policy, adv, min(B, 2))
        # expected improvement with the enumerable batch size
        b_small = min(B, 2)
        delta = objective(policy, adv, policy.theta[None, :] + alpha * est) - objective(policy, adv)
        details["expected_improvement_B"] = b_small
        details["expected_improvement"] = float(np.dot(probs, delta))
        details["middle_at_B"] = alpha * (1 + alpha * L / 2) * grad2 + alpha ** 2 * L / 2 * m.var_x / b_small
    except ValueError:
        pass
    return _report("theorem1", middle, signal + noise, cfg.tolerance, **details)


def ub_difference(alpha, L, lam_max, d, g_inf, B, rho_a, V_a, rho_b, V_b) -> float:
    """U_B - U_A between the improvement upper bounds of two advantage estimators."""
    return (alpha * (1 + alpha * L / 2) * lam_max * d * (rho_b ** 2 * V_b - rho_a ** 2 * V_a)
            + alpha ** 2 * L / 2 * g_inf ** 2 / B * (V_b - V_a))


def check_theorem2(policy, adv_a, adv_b, cfg: TheoryConfig = TheoryConfig(), *, smoothness: float | None = None,
                   bundle=None) -> BoundReport:
    """When rho_B^2 V_B > rho_A^2 V_A and V_B >= V_A, the difference must be positive.

    ``lhs`` is 0 and ``rhs`` the difference; pairs that miss the sufficient
    condition are reported satisfied with ``details['condition'] = False``.
    """
    bundle = bundle or fisher(policy, cfg.lam_reg)
    L = smoothness or cfg.smoothness or max(smoothness_bound(policy, adv_a), smoothness_bound(policy, adv_b))
    ma, mb = moments(policy, adv_a), moments(policy, adv_b)
    ra, rb = rho(policy, adv_a, bundle), rho(policy, adv_b, bundle)
    alpha, B = cfg.learning_rate, cfg.batch_size
    g_inf = ma.g_inf
    diff = ub_difference(alpha, L, bundle.lam_max_reg, policy.dim, g_inf, B, ra, ma.V, rb, mb.V)
    ua = sum(improvement_upper_bound(alpha, L, bundle.lam_max_reg, policy.dim, ra, ma.V, g_inf, B))
    ub = sum(improvement_upper_bound(alpha, L, bundle.lam_max_reg, policy.dim, rb, mb.V, g_inf, B))
    cond = rb ** 2 * mb.V > ra ** 2 * ma.V and mb.V >= ma.V
    ok = (diff > 0) if cond else True
    return BoundReport("theorem2", 0.0, float(diff), bool(ok), float(diff), 1, True,
                       {"condition": bool(cond), "direct_difference": ub - ua,
                        "signal_a": ra ** 2 * ma.V, "signal_b": rb ** 2 * mb.V, "V_a": ma.V, "V_b": mb.V})


# ------------------------------------------------------------ random audits

def random_policy(rng: np.random.Generator, d_max: int = 12, scale: float = 1.5) -> TabularPolicy:
    G = int(rng.integers(1, 4))
    sizes = []
    budget = d_max
    for g in range(G):
        remaining = G - g - 1
        hi = min(5, budget - 2 * remaining)
        if hi < 2:
            break
        m = int(rng.integers(2, hi + 1))
        sizes.append(m)
        budget -= m
    return TabularPolicy([rng.normal(0.0, scale, m) for m in sizes])


def random_advantage(rng: np.random.Generator, policy: TabularPolicy) -> np.ndarray:
    return rng.normal(0.0, 1.0, policy.dim)


@dataclass
class AuditSummary:
    name: str
    trials: int
    violations: int
    skipped: int
    min_margin: float
    worst_lhs: float
    worst_rhs: float
    exact: bool
    details: dict = field(default_factory=dict)

    @property
    def satisfied(self) -> bool:
        return self.violations == 0

    def to_dict(self) -> dict:
        return {**asdict(self), "satisfied": self.satisfied}


def _summarize(name, reports: list[BoundReport], skipped: int, exact: bool) -> AuditSummary:
    if not reports:
        return AuditSummary(name, 0, 0, skipped, float("nan"), float("nan"), float("nan"), exact)
    worst = min(reports, key=lambda r: r.margin)
    return AuditSummary(name, len(reports), sum(not r.satisfied for r in reports), skipped,
                        worst.margin, worst.lhs, worst.rhs, exact)


def run_audit(cfg: TheoryConfig = TheoryConfig()) -> list[AuditSummary]:
    """Randomized audit of every bound. Degenerate (V = 0) trials are skipped and counted."""
    rng = np.random.default_rng(cfg.seed)
    buckets: dict[str, list[BoundReport]] = {k: [] for k in
                                             ("lemma2", "lemma3", "theorem1", "variance_decomposition",
                                              "theorem2")}
    skipped = 0
    total = cfg.trials + cfg.degenerate_trials
    degenerate = set(rng.choice(total, size=cfg.degenerate_trials, replace=False).tolist()) if cfg.degenerate_trials else set()
    for t in range(total):
        policy = random_policy(rng, cfg.d_max)
        adv = np.zeros(policy.dim) if t in degenerate else random_advantage(rng, policy)
        try:
            bundle = fisher(policy, cfg.lam_reg)
            buckets["lemma2"].append(check_lemma2(policy, adv, cfg, bundle))
            buckets["lemma3"].append(check_lemma3(policy, adv, cfg))
            buckets["theorem1"].append(check_theorem1(policy, adv, cfg, bundle=bundle))
            buckets["variance_decomposition"].append(check_variance_decomposition(policy, adv, cfg, mode="exact"))
            # a second estimator with more variance and more aligned signal
            aligned = aligned_advantage(policy, bundle)
            scale = np.sqrt(moments(policy, adv).V / max(moments(policy, aligned).V, 1e-300))
            adv_b = adv + rng.uniform(0.5, 2.0) * scale * aligned
            rep = check_theorem2(policy, adv, adv_b, cfg, bundle=bundle)
            if rep.details["condition"]:
                buckets["theorem2"].append(rep)
        except DegenerateAdvantage:
            skipped += 1
    out = [_summarize(name, reps, skipped, True) for name, reps in buckets.items()]

    l1_reports = []
    for _ in range(cfg.lemma1_policies):
        policy = random_policy(rng, cfg.d_max)
        adv = random_advantage(rng, policy)
        l1_reports.append(check_lemma1(policy, adv, cfg, rng=rng))
    if l1_reports:
        hits = sum(r.details["pointwise_hits"] for r in l1_reports)
        draws = sum(r.trials for r in l1_reports)
        summ = _summarize("lemma1", l1_reports, 0, False)
        summ.details = {"pointwise_fraction": hits / draws, "draws": draws}
        out.append(summ)
    return out
