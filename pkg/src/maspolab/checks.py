"""Oracle and property battery behind ``maspolab verify``.

Each check returns a :class:`CheckResult`; none of them raise on failure.
"""

from __future__ import annotations

import math
from fractions import Fraction
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .advantage import closed_form_advantages, group_advantages
from .gating import GateMethod, GateParams, clip_bounds, maspo_gate, sapo_gate, sigma_neg, sigma_pos, surrogate_terms
from .oracle import exact_expected_reward, finite_diff_grad, mean_exact_expected_reward
from .policy import PolicyParams, sample_batch
from .tasks import make_task, success_probability, verify_batch
from .trainer import TokenBatch, TrainConfig, minibatch_gradient, run_training


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.2f}s)"


def _timed(name: str, limit: float | None, fn: Callable[[], tuple[bool, str]]) -> CheckResult:
    t0 = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as exc:  # a crashing check is a failing check
        ok, detail = False, f"raised {type(exc).__name__}: {exc}"
    dt = time.perf_counter() - t0
    if limit is not None and dt >= limit:
        ok, detail = False, f"{detail}; exceeded {limit}s budget"
    return CheckResult(name, ok, detail, dt)


# 1 ------------------------------------------------------------------------


def check_closed_form_advantages() -> CheckResult:
    def run():
        worst = 0.0
        for n in range(2, 65):
            prev = None
            for x in range(1, n):
                adv = group_advantages([1.0] * x + [-1.0] * (n - x))
                a_plus, a_minus = closed_form_advantages(n, x)
                worst = max(worst, float(np.max(np.abs(adv.values[:x] - a_plus))),
                            float(np.max(np.abs(adv.values[x:] - a_minus))))
                if prev is not None and not (a_plus < prev[0] and a_minus < prev[1]):
                    return False, f"not strictly decreasing at n={n}, x={x}"
                prev = (a_plus, a_minus)
        return worst <= 1e-12, f"max |brute - closed form| = {worst:.2e} (tol 1e-12), monotone in x"

    return _timed("closed-form advantage equivalence", 1.0, run)


# 2 ------------------------------------------------------------------------


def _random_params(rng: np.random.Generator) -> GateParams:
    base = rng.uniform(0.1, 3.0)
    return GateParams(
        sigma_base=base,
        alpha=rng.uniform(0, 1),
        beta_low=rng.uniform(0, 0.5),
        beta_high=rng.uniform(0, 0.5),
        tau_pos=rng.uniform(0.1, 5),
        tau_neg=rng.uniform(0.1, 5),
        sigma_cap=base * rng.uniform(1, 20),
    )


def check_gate_identity_and_bounds(draws: int = 100_000, seed: int = 0) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        n_sets = 100
        per = draws // n_sets
        for _ in range(n_sets):
            params = _random_params(rng)
            rho = np.exp(rng.uniform(-3, 3, per))
            rho[: per // 10] = 1.0
            adv = rng.normal(0, 3, per)
            adv[per // 10 : per // 10 + per // 20] = 0.0
            pi = np.exp(rng.uniform(np.log(1e-8), 0, per))
            calm = np.sign(adv) * (rho - 1) <= 0
            for name, gate in (
                ("maspo", maspo_gate(rho, adv, pi, params)),
                ("sapo", sapo_gate(rho, adv, pi, params)),
                ("sapo_unilateral", sapo_gate(rho, adv, pi, params, unilateral=True)),
            ):
                if not np.all((gate > 0) & (gate <= 1)):
                    return False, f"{name} gate left (0, 1]"
                if not np.all(gate[rho == 1.0] == 1.0):
                    return False, f"{name} gate != 1 at ratio 1"
                if name != "sapo" and not np.all(gate[calm] == 1.0):
                    return False, f"{name} violates the unilateral property"
        return True, f"{n_sets * per} draws: gates in (0,1], exactly 1 at ratio 1, unilateral where sign(A)(ratio-1) <= 0"

    return _timed("gate identity and bounds", 5.0, run)


# 3 ------------------------------------------------------------------------


def check_monotonicity(params: GateParams | None = None, n: int = 50) -> CheckResult:
    params = params or GateParams()

    def run():
        # mass adaptivity: axes (ratio, advantage, pi descending)
        rho = np.linspace(1.01, 3.0, n)[:, None, None]
        adv = np.linspace(0.01, 5.0, n)[None, :, None]
        pi = np.geomspace(1.0, 1e-6, n)[None, None, :]
        g = maspo_gate(rho, adv, pi, params)
        d_pi = np.diff(g, axis=2)
        if np.any(d_pi < 0):
            return False, "gate decreased as pi_old decreased"
        uncapped = (params.sigma_base / pi**params.alpha < params.sigma_cap)[..., 1:]
        uncapped = np.broadcast_to(uncapped, d_pi.shape)
        if np.any(d_pi[uncapped] <= 0):
            return False, "gate not strictly increasing as pi_old decreased below the cap"
        # risk asymmetry, positive side: non-decreasing in A
        if np.any(np.diff(g, axis=1) < 0):
            return False, "gate decreased in A on A > 0"
        # strictly decreasing in |ratio - 1| within the active branch
        if np.any(np.diff(g, axis=0) >= 0):
            return False, "gate not strictly decreasing in |ratio - 1| (A > 0)"

        rho_n = np.linspace(0.99, 0.01, n)[:, None, None]  # |ratio - 1| increasing
        adv_n = -np.linspace(0.01, 50.0, n)[None, :, None]  # |A| increasing
        pi_n = np.geomspace(1.0, 1e-6, n)[None, None, :]
        gn = maspo_gate(rho_n, adv_n, pi_n, params)
        if np.any(np.diff(gn, axis=1) > 0):
            return False, "gate increased in |A| on A < 0"
        if np.any(np.diff(gn, axis=0) >= 0):
            return False, "gate not strictly decreasing in |ratio - 1| (A < 0)"
        if np.any(np.diff(gn, axis=2) < 0):
            return False, "negative-branch gate decreased as pi_old decreased"
        return True, f"{n}x{n}x{n} grids: mass-adaptive, risk-asymmetric and |ratio-1| monotonicity hold"

    return _timed("monotonicity battery", 10.0, run)


# 4 ------------------------------------------------------------------------


def check_stability_clipping() -> CheckResult:
    def run():
        worst = []
        for params in (GateParams(), GateParams(alpha=1.0, beta_low=5.0, beta_high=5.0), GateParams(sigma_base=2.0, alpha=1.0)):
            hi = params.sigma_cap * params.risk_cap
            lo = params.sigma_base * params.risk_floor
            for pi in (1e-12, 1e-300, 1e-6, 0.5, 1.0):
                for a in (1e6, 1e3, 1.0, 1e-9):
                    sp = sigma_pos(pi, a, params)
                    sn = sigma_neg(pi, -a, params)
                    for s in (sp, sn):
                        if not (math.isfinite(s) and lo <= s <= hi):
                            return False, f"width {s} outside [{lo}, {hi}] at pi={pi}, |A|={a}"
                    worst.append((sp, sn))
        return True, f"all widths within [base*floor, cap*risk_cap]; extremes {min(min(w) for w in worst):.3g}..{max(max(w) for w in worst):.3g}"

    return _timed("stability clipping of gate widths", None, run)


# 5 ------------------------------------------------------------------------


def frozen_surrogate(tb: TokenBatch, weight, adv_scale, entropy_coeff: float) -> Callable[[PolicyParams], float]:
    """Mini-batch surrogate with gates / clip branches / reweighting frozen.

    Plain-Python log-softmax, independent of the vectorized trainer path.
    """
    items = list(zip(tb.query.tolist(), tb.pos.tolist(), tb.prev.tolist(), tb.token.tolist(),
                     tb.logp_old.tolist(), tb.advantage.tolist(), list(weight), list(adv_scale)))
    n = len(items)

    def f(params: PolicyParams) -> float:
        total = []
        for q, t, prev, tok, lp_old, adv, w, s in items:
            row = params.logits[q, t, prev].tolist()
            m = max(row)
            lse = m + math.log(sum(math.exp(z - m) for z in row))
            total.append(w * s * adv * math.exp((row[tok] - lse) - lp_old))
            if entropy_coeff:
                total.append(entropy_coeff * -sum(math.exp(z - lse) * (z - lse) for z in row))
        return math.fsum(total) / n

    return f


def _gradient_instance(rng: np.random.Generator, method: GateMethod):
    Q, T, V = int(rng.integers(1, 3)), 2, int(rng.integers(2, 5))
    old = PolicyParams.random(Q, T, V, rng, scale=1.0)
    cur = PolicyParams(old.logits + rng.normal(0, 0.4, old.logits.shape))
    n = int(rng.integers(4, 13))
    query = rng.integers(0, Q, n)
    pos = rng.integers(0, T, n)
    prev = np.where(pos == 0, V, rng.integers(0, V, n))
    token = rng.integers(0, V, n)
    rows = old.logits[query, pos, prev]
    logp_old = rows[np.arange(n), token] - np.log(np.exp(rows).sum(axis=1))
    tb = TokenBatch(query, pos, prev, token, logp_old, rng.normal(0, 1.5, n))
    gate = GateParams(sigma_base=rng.uniform(0.2, 1.0), alpha=0.3, eps_low=0.2, eps_high=0.265)
    config = TrainConfig(
        method=method,
        gate=gate,
        entropy_coeff=float(rng.choice([0.0, 0.05])),
        adv_reweight_alpha=float(rng.choice([0.0, 0.1])),
    )
    return cur, tb, config


def check_gradients(instances: int = 20, seed: int = 1) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        worst = 0.0
        count = 0
        for method in GateMethod:
            for _ in range(instances):
                cur, tb, config = _gradient_instance(rng, method)
                if cur.num_params > 200:
                    return False, "instance exceeds 200 parameters"
                mb = minibatch_gradient(cur.logits, tb, config)
                f = frozen_surrogate(tb, mb.weight, mb.adv_scale, config.entropy_coeff)
                if not method.is_clip and abs(f(cur) - mb.objective) > 1e-12 * max(1.0, abs(mb.objective)):
                    return False, f"{method.value}: frozen objective disagrees with trainer objective"
                for h in (1e-5, 1e-6):
                    fd = finite_diff_grad(f, cur, h)
                    denom = max(np.linalg.norm(mb.grad), np.linalg.norm(fd), 1e-12)
                    rel = np.linalg.norm(mb.grad - fd) / denom
                    worst = max(worst, rel)
                count += 1
        return worst < 1e-6, f"{count} instances over {len(GateMethod)} methods, max relative error {worst:.2e} (tol 1e-6)"

    return _timed("analytic vs finite-difference gradients", 30.0, run)


# 6 ------------------------------------------------------------------------


def _brute_clip_coefficient(ratio: float, adv: float, lo: float, hi: float) -> float:
    """d/d(log pi) of min(ratio*A, clip(ratio, lo, hi)*A) by explicit branch selection.

    Branch values are compared in exact rational arithmetic.
    """
    ratio_f, adv = ratio, Fraction(adv)
    ratio, lo, hi = Fraction(ratio), Fraction(lo), Fraction(hi)
    unclipped = ratio * adv
    clipped_ratio = min(max(ratio, lo), hi)
    clipped_val = clipped_ratio * adv
    clip_slope = adv if lo <= ratio <= hi else 0.0
    if unclipped < clipped_val:
        slope = adv
    elif clipped_val < unclipped:
        slope = clip_slope
    else:
        slope = adv  # tie: ratio inside the window, both branches coincide
    return ratio_f * float(slope)


def check_hard_clip_regions() -> CheckResult:
    def run():
        params = GateParams(eps_low=0.2, eps_high=0.265)
        advs = np.concatenate([np.linspace(-3, 3, 61), [1e-9, -1e-9]])
        checked = 0
        for method in (GateMethod.GRPO, GateMethod.CLIP_HIGHER, GateMethod.DAC):
            for pi in (1.0, 0.5, 0.05):
                lo, hi = clip_bounds(method, pi, params)
                edges = []
                for b in (lo, hi):
                    edges += [b, np.nextafter(b, 0), np.nextafter(b, np.inf)]
                rhos = np.concatenate([np.linspace(0.3, 2.5, 401), edges])
                rhos = rhos[rhos > 0]
                R, A = np.meshgrid(rhos, advs, indexing="ij")
                coef = surrogate_terms(method, R, A, pi, params).coefficient
                zero_region = ((A > 0) & (R > hi)) | ((A < 0) & (R < lo))
                nz = A != 0
                if not np.array_equal(coef[nz] == 0.0, zero_region[nz]):
                    return False, f"{method.value} pi={pi}: zero-gradient set mismatch"
                if not np.all(coef[~zero_region] == (R * A)[~zero_region]):
                    return False, f"{method.value} pi={pi}: active coefficient != ratio*A"
                for r, a, c in zip(R.ravel(), A.ravel(), coef.ravel()):
                    if c != _brute_clip_coefficient(float(r), float(a), lo, hi):
                        return False, f"{method.value}: brute-force branch mismatch at ratio={r}, A={a}"
                checked += R.size
        return True, f"{checked} (ratio, A, pi) points incl. boundary neighbours; zero iff outside window in the harmful direction"

    return _timed("hard-clip zero-gradient regions", None, run)


# 7 ------------------------------------------------------------------------


def check_enumeration_consistency(n: int = 100_000, seed: int = 2) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        parts = []
        for kind in ("copy", "modsum"):
            task = make_task(kind, 4, 3, 2, seed=seed)
            policy = PolicyParams.random(2, 3, 4, rng, scale=1.5)
            for q in range(task.num_queries):
                rep = exact_expected_reward(policy, task, q)
                if abs(rep.expected_reward - (2 * rep.success_probability - 1)) > 1e-12:
                    return False, "expected_reward != 2p - 1"
                if abs(rep.success_probability - success_probability(task, policy, q)) > 1e-12:
                    return False, "enumeration routes disagree on success probability"
                if rep.sequence_count != task.num_sequences:
                    return False, "wrong sequence count"
                rewards = verify_batch(task, q, sample_batch(policy, q, n, rng))
                se = math.sqrt(max(1 - rep.expected_reward**2, 1e-300) / n)
                z = (rewards.mean() - rep.expected_reward) / se
                if abs(z) > 4:
                    return False, f"{kind} q={q}: empirical mean off by {z:.2f} standard errors"
                parts.append(f"{kind}/q{q} z={z:+.2f}")
        return True, f"{n} rollouts each; " + ", ".join(parts)

    return _timed("enumeration consistency", None, run)


# 8, 9 ---------------------------------------------------------------------


def _train(kind: str, method: str, seed: int, steps: int = 200, gate: GateParams | None = None, task_seed: int | None = None):
    task = make_task(kind, 4, 3, 4, seed=seed if task_seed is None else task_seed)
    config = TrainConfig(method=method, gate=gate or GateParams(), seed=seed, total_steps=steps,
                         groups_per_step=4, group_size=8, minibatches_per_step=16)
    t0 = time.perf_counter()
    records, state = [], None
    for state, rec in run_training(task, config):
        records.append(rec)
    return task, state, records, time.perf_counter() - t0


def check_training_improvement(seed: int = 0) -> CheckResult:
    def run():
        parts = []
        ok = True
        task = make_task("copy", 4, 3, 4, seed=seed)
        start = mean_exact_expected_reward(PolicyParams.uniform(4, 3, 4), task)
        if abs(start - (-0.96875)) > 1e-12:
            return False, f"uniform-policy expected reward {start} != -0.96875"
        gates = {"maspo": GateParams(sigma_base=1.0, alpha=0.3, beta_low=0.03, beta_high=0.03),
                 "grpo": GateParams(eps_low=0.2, eps_high=0.2)}
        for method, gate in gates.items():
            task, state, records, secs = _train("copy", method, seed, gate=gate)
            p = math.fsum(exact_expected_reward(state.policy, task, q).success_probability for q in range(4)) / 4
            good = p >= 0.9 and records[-1].success_rate >= 0.9 and secs < 60
            ok &= good
            parts.append(f"{method}: exact success {p:.4f}, last-step success_rate {records[-1].success_rate:.3f}, {secs:.1f}s")
        return ok, f"from expected reward {start}; " + "; ".join(parts)

    return _timed("training improvement on copy", None, run)


def check_entropy_dynamics(seeds: int = 5) -> CheckResult:
    def run():
        wins, finals, parts = 0, {"maspo": [], "grpo": []}, []
        for seed in range(seeds):
            ent = {}
            for method in ("maspo", "grpo"):
                task, state, records, _ = _train("modsum", method, seed)
                ent[method] = math.fsum(r.mean_entropy for r in records) / len(records)
                finals[method].append(mean_exact_expected_reward(state.policy, task))
            wins += ent["maspo"] >= ent["grpo"]
            parts.append(f"{ent['maspo'] - ent['grpo']:+.4f}")
        f_m, f_g = (sum(v) / seeds for v in (finals["maspo"], finals["grpo"]))
        ok = wins >= seeds - 1 and f_m >= f_g - 0.02
        return ok, (f"MASPO entropy >= GRPO in {wins}/{seeds} seeds (per-seed mean diff {', '.join(parts)}); "
                    f"final exact reward MASPO {f_m:.4f} vs GRPO {f_g:.4f}")

    return _timed("entropy dynamics on modsum", None, run)


# 10 -----------------------------------------------------------------------


def check_determinism() -> CheckResult:
    from .config import ExperimentConfig
    from .experiment import METRICS_FILE, read_metrics, run_experiment, run_sweep

    def run():
        cfg = ExperimentConfig(task=make_task("copy", 4, 3, 4, seed=0), train=TrainConfig(total_steps=50))
        with tempfile.TemporaryDirectory() as tmp:
            tmp = Path(tmp)
            if run_experiment(cfg, tmp / "a") or run_experiment(cfg, tmp / "b"):
                return False, "run failed"
            if (tmp / "a" / METRICS_FILE).read_bytes() != (tmp / "b" / METRICS_FILE).read_bytes():
                return False, "metrics differ between identical runs"
            index = run_sweep(cfg, "alpha", [0.1, 0.3, 0.5, 0.8], tmp / "sweep")
            for row in index:
                recs = read_metrics(row["metrics"])
                if row["status"] != 0 or len(recs) != cfg.train.total_steps:
                    return False, f"sweep entry {row['value']} malformed"
        return True, "repeat runs byte-identical; alpha sweep {0.1,0.3,0.5,0.8} wrote 4 well-formed metric files"

    return _timed("determinism and sweep", None, run)


ALL_CHECKS: dict[str, Callable[[], CheckResult]] = {
    "closed_form_advantages": check_closed_form_advantages,
    "gate_identity_bounds": check_gate_identity_and_bounds,
    "monotonicity": check_monotonicity,
    "stability_clipping": check_stability_clipping,
    "gradients": check_gradients,
    "hard_clip_regions": check_hard_clip_regions,
    "enumeration": check_enumeration_consistency,
    "training_improvement": check_training_improvement,
    "entropy_dynamics": check_entropy_dynamics,
    "determinism": check_determinism,
}

SLOW_CHECKS = {"training_improvement", "entropy_dynamics", "determinism"}


def run_all(quick: bool = False) -> list[CheckResult]:
    return [fn() for name, fn in ALL_CHECKS.items() if not (quick and name in SLOW_CHECKS)]
