"""Finite-difference audit of the full training pipeline.

Each instance draws a small synthetic problem, random scores and frozen
Gumbel noise, then compares the analytic gradient of one hypothesis loss in
(scores, coordinates) with central differences along random directions.
Instances next to a discontinuity are detected and excluded: a perturbation
that changes the sample, the selected solution or the cheirality branch, or
a mismatch small enough to be explained by one-sided slopes that disagree
(the step straddles a kink, such as a residual |e| passing through zero).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine, sampling, synthdata

SOLVER_KINDS = {"8pc": "F", "7pc": "F", "5pc": "E", "kabsch": "rigid"}
LOSSES = {"pose": (1.0, 0.0), "epipolar": (0.0, 1.0), "combined": (1.0, 1.0)}
NOISE = {"F": 0.3, "E": 1.0, "rigid": 0.01}
REL_FLOOR = 1e-3


@dataclass
class InstanceCheck:
    solver: str
    loss: str
    seed: int
    error: float = float("nan")
    excluded: str = ""


@dataclass
class SuiteReport:
    tolerance: float
    checks: list = field(default_factory=list)

    def group(self, solver: str, loss: str) -> list:
        return [c for c in self.checks if c.solver == solver and c.loss == loss]

    def summary(self) -> list[dict]:
        out = []
        for solver in SOLVER_KINDS:
            for loss in LOSSES:
                g = self.group(solver, loss)
                if not g:
                    continue
                used = [c.error for c in g if not c.excluded]
                reasons: dict = {}
                for c in g:
                    if c.excluded:
                        reasons[c.excluded] = reasons.get(c.excluded, 0) + 1
                worst = max(used) if used else float("nan")
                out.append({
                    "solver": solver, "loss": loss, "checked": len(used), "excluded": reasons,
                    "max_rel_error": float(worst), "passed": bool(used) and bool(worst < self.tolerance),
                })
        return out

    @property
    def passed(self) -> bool:
        return all(row["passed"] for row in self.summary())


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), REL_FLOOR)


def _same(h, ref) -> bool:
    return h.valid and h.signature == ref.signature


def check_instance(solver: str, loss: str, seed: int, n: int = 20, directions: int = 2,
                   eps: float = 1e-5, tolerance: float = 1e-4) -> InstanceCheck:
    """Directional central differences against the analytic gradient."""
    kind = SOLVER_KINDS[solver]
    out = InstanceCheck(solver, loss, seed)
    rng = np.random.default_rng([seed, 7])
    spec = synthdata.SceneSpec(kind=kind, n=n, inlier_ratio=0.75, noise=NOISE[kind], seed=seed,
                               rotation_max_deg=20.0 if kind != "rigid" else 180.0)
    item = synthdata.generate(spec)
    alpha, beta = LOSSES[loss]
    cfg = engine.EstimationConfig(kind=kind, solver=solver, loss_alpha=alpha, loss_beta=beta)
    problem = engine.Problem.from_item(item, cfg)
    gt = engine.GroundTruth.from_item(item, problem)
    if beta and not gt.inlier_mask.any():
        out.excluded = "empty inlier set"
        return out
    s0 = rng.normal(size=problem.n)
    gamma = sampling.gumbel_from_uniform(rng.random(problem.n))
    ref = engine.evaluate_hypothesis(problem, s0, gt, cfg, gamma=gamma, phi_grad=True)
    if not ref.valid:
        out.excluded = "invalid hypothesis"
        return out
    phi0 = problem.phi
    phi_step = eps * max(1.0, float(np.abs(phi0).max()))

    def probe(ds=None, dphi=None):
        s = s0 if ds is None else s0 + ds
        phi = phi0 if dphi is None else phi0 + dphi
        return engine.evaluate_hypothesis(problem, s, gt, cfg, gamma=gamma, anchor=s0, phi=phi, grad=False)

    worst = 0.0
    for target in ("s", "phi"):
        for _ in range(directions):
            v = rng.normal(size=s0.shape if target == "s" else phi0.shape)
            v /= np.linalg.norm(v)
            if target == "s":
                analytic = float(ref.grad_s @ v)
                base = eps
            else:
                analytic = float(np.sum(ref.grad_phi * v))
                base = phi_step
            # a loose match is retried at smaller steps: large steps meet
            # curvature and kinks, small ones roundoff; the best step counts
            best = None
            for step in base * np.array([1.0, 0.1, 0.03, 0.01, 0.003]):
                if target == "s":
                    hp, hm = probe(ds=step * v), probe(ds=-step * v)
                else:
                    hp, hm = probe(dphi=step * v), probe(dphi=-step * v)
                if not (_same(hp, ref) and _same(hm, ref)):
                    out.excluded = "branch change"
                    return out
                numeric = (hp.loss - hm.loss) / (2.0 * step)
                err = relative_error(analytic, numeric)
                if best is None or err < best[0]:
                    best = (err, step, hp, hm, numeric)
                if err < 0.1 * tolerance:
                    break
            err, step, hp, hm, numeric = best
            if err >= tolerance:
                # at a straddled kink the central difference is off by at most
                # half the jump between the one-sided slopes
                up = (hp.loss - ref.loss) / step
                down = (ref.loss - hm.loss) / step
                if abs(analytic - numeric) <= 0.5 * abs(up - down):
                    out.excluded = "kink"
                    return out
            worst = max(worst, err)
    out.error = float(worst)
    return out


def run_suite(instances: int = 100, solvers=tuple(SOLVER_KINDS), losses=tuple(LOSSES), seed: int = 0,
              tolerance: float = 1e-4, max_attempts: int | None = None) -> SuiteReport:
    """Check ``instances`` usable instances per (solver, loss) pair."""
    report = SuiteReport(tolerance)
    cap = max_attempts if max_attempts is not None else 4 * instances
    for si, solver in enumerate(solvers):
        for li, loss in enumerate(losses):
            used = 0
            for attempt in range(cap):
                if used >= instances:
                    break
                inst_seed = seed * 1_000_003 + si * 100_000 + li * 10_000 + attempt
                c = check_instance(solver, loss, inst_seed, tolerance=tolerance)
                report.checks.append(c)
                used += not c.excluded
    return report
