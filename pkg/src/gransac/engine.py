"""Estimation drivers.

``estimate`` is the test-time loop: weighted sampling, minimal solver,
marginalized scoring, best-model tracking, adaptive termination and a
local-optimization refit.

``train_forward`` draws a fixed number of hypotheses with the Gumbel top-k
sampler, solves each on the differentiation tape, scores it against ground
truth and returns the mean loss with its gradient with respect to the scores
(and optionally the coordinates).
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diff, losses, numkit, sampling, scoring
from .solvers import (
    CheiralityError,
    DegenerateSampleError,
    essential_5pc_d,
    fundamental_7pc_d,
    fundamental_8pc_d,
    kabsch_d,
    select_best_algebraic,
    solve_5pc,
    solve_7pc,
    solve_8pc,
    solve_kabsch,
)
from .solvers.essential import choose_pose, decompose_essential_d, refine_essential
from .solvers.common import canonical_sign, homogeneous

SOLVER_K = {"8pc": 8, "7pc": 7, "5pc": 5, "kabsch": 3}
SOLVER_KIND = {"8pc": "F", "7pc": "F", "5pc": "E", "kabsch": "rigid"}
DEFAULT_SOLVER = {"F": "8pc", "E": "5pc", "rigid": "kabsch"}
DEFAULT_THRESHOLD = {"F": 0.75, "E": 3.0, "rigid": 0.05}
DEFAULT_TRAIN_ITERATIONS = {"F": 1000, "E": 100, "rigid": 100}
SQRT2 = math.sqrt(2.0)

# failures that make a single hypothesis invalid rather than the whole run
HYPOTHESIS_ERRORS = (
    DegenerateSampleError,
    CheiralityError,
    diff.TapeError,
    numkit.NumericalError,
    np.linalg.LinAlgError,
    FloatingPointError,
)


class EstimationError(RuntimeError):
    """No valid hypothesis was found; ``diagnostics`` says why."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class EstimationConfig:
    kind: str = "E"
    solver: str | None = None
    threshold: float | None = None
    confidence: float = 0.99
    max_iterations: int = 5000
    train_iterations: int | None = None
    sampler: str = "weighted"
    scorer: str = "marginalized"
    levels: int = scoring.DEFAULT_LEVELS
    tau: float = 1.0
    seed: int = 0
    top_fraction: float = 1.0
    loss_alpha: float | None = None
    loss_beta: float | None = None
    lo_rounds: int = 4
    threads: int = 1
    chunk: int = 32

    def __post_init__(self):
        if self.kind not in DEFAULT_SOLVER:
            raise ValueError(f"unknown problem kind {self.kind!r}")
        if self.solver is None:
            self.solver = DEFAULT_SOLVER[self.kind]
        if SOLVER_KIND.get(self.solver) != self.kind:
            raise ValueError(f"solver {self.solver!r} does not fit problem kind {self.kind!r}")
        if self.threshold is None:
            self.threshold = DEFAULT_THRESHOLD[self.kind]
        if self.train_iterations is None:
            self.train_iterations = DEFAULT_TRAIN_ITERATIONS[self.kind]
        w = losses.LossWeights.default_for(self.kind)
        if self.loss_alpha is None:
            self.loss_alpha = w.alpha
        if self.loss_beta is None:
            self.loss_beta = w.beta
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")
        if self.train_iterations < 1 or self.max_iterations < 1:
            raise ValueError("iteration counts must be positive")
        if not 0.0 < self.top_fraction <= 1.0:
            raise ValueError("top_fraction must lie in (0, 1]")
        if self.sampler not in ("uniform", "weighted", "prosac"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.scorer not in scoring.SCORERS:
            raise ValueError(f"unknown scorer {self.scorer!r}")
        if self.tau <= 0 or self.threshold <= 0:
            raise ValueError("tau and threshold must be positive")

    @property
    def k(self) -> int:
        return SOLVER_K[self.solver]

    @property
    def weights(self) -> losses.LossWeights:
        return losses.LossWeights(self.loss_alpha, self.loss_beta)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self, exclude=("threads", "chunk")) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in exclude}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _canonical(model) -> np.ndarray:
    m = np.asarray(model, dtype=float).reshape(-1)
    m = m / np.linalg.norm(m)
    return m * canonical_sign(m)


# problem wrapper -------------------------------------------------------------


def _line_weights(F, x1, x2):
    """sqrt(1/a + 1/b) with a, b the squared epipolar line normals under F."""
    l2 = homogeneous(x1) @ F.T
    l1 = homogeneous(x2) @ F
    a = np.maximum(l2[:, 0] ** 2 + l2[:, 1] ** 2, 1e-24)
    b = np.maximum(l1[:, 0] ** 2 + l1[:, 1] ** 2, 1e-24)
    w = np.sqrt(1.0 / a + 1.0 / b)
    return w / np.median(w)


class Problem:
    """Correspondences plus everything a solver and scorer need.

    Coordinates ``x1, x2`` are the raw features (pixels, or scene units for
    rigid). Models live in residual coordinates: pixels for F, normalized
    camera coordinates for E, scene units for rigid. ``threshold`` is given
    in pixels for E as well and converted by the mean focal length.
    """

    def __init__(self, kind, x1, x2, K1=None, K2=None, solver=None, threshold=None, scorer="marginalized",
                 levels=scoring.DEFAULT_LEVELS):
        self.kind = kind
        self.x1 = np.asarray(x1, dtype=float)
        self.x2 = np.asarray(x2, dtype=float)
        if self.x1.shape != self.x2.shape:
            raise ValueError("correspondence arrays must have equal shapes")
        self.K1 = np.eye(3) if K1 is None else np.asarray(K1, dtype=float)
        self.K2 = np.eye(3) if K2 is None else np.asarray(K2, dtype=float)
        self.solver = solver or DEFAULT_SOLVER[kind]
        self.k = SOLVER_K[self.solver]
        thr = DEFAULT_THRESHOLD[kind] if threshold is None else threshold
        self.threshold_input = thr
        if kind == "E":
            f = 0.5 * (self.K1[0, 0] + self.K2[0, 0])
            self.threshold = thr / f
        else:
            self.threshold = thr
        self.r1, self.r2 = self.solver_points(self.x1, self.x2)
        self.scorer_name = scorer
        self.levels = levels
        self.scorer = scoring.make_scorer(scorer, self.threshold, levels)
        self.marginal = scoring.make_scorer("marginalized", self.threshold, levels)

    @classmethod
    def from_item(cls, item, config: EstimationConfig) -> "Problem":
        if item.kind != config.kind:
            raise ValueError(f"dataset kind {item.kind!r} does not match config kind {config.kind!r}")
        return cls(item.kind, item.x1, item.x2, item.K1, item.K2, config.solver, config.threshold,
                   config.scorer, config.levels)

    @property
    def n(self) -> int:
        return len(self.x1)

    @property
    def dim(self) -> int:
        return self.x1.shape[1]

    @property
    def phi(self) -> np.ndarray:
        return np.hstack([self.x1, self.x2])

    def solver_points(self, x1, x2):
        """Map raw coordinates (floats or tape values) to residual coordinates."""
        if self.kind != "E":
            return x1, x2

        def norm(x, K):
            x = np.asarray(x, dtype=object if np.asarray(x).dtype == object else float)
            return np.stack([(x[:, 0] - K[0, 2]) * (1.0 / K[0, 0]), (x[:, 1] - K[1, 2]) * (1.0 / K[1, 1])], axis=1)

        return norm(x1, self.K1), norm(x2, self.K2)

    def residuals(self, model) -> np.ndarray:
        return scoring.residuals(self.kind, model, self.r1, self.r2)

    def solve_points(self, p1, p2) -> list:
        if self.solver == "8pc":
            return solve_8pc(p1, p2)
        if self.solver == "7pc":
            return solve_7pc(p1, p2)
        if self.solver == "5pc":
            return solve_5pc(p1, p2)
        R, t = solve_kabsch(p1, p2)
        return [np.hstack([R, t[:, None]])]

    def solve(self, idx) -> list:
        idx = np.asarray(idx)
        return self.solve_points(self.r1[idx], self.r2[idx])

    def best_solution(self, models):
        """Index, quality and residuals of the highest-scoring candidate.

        Equal scores go to the lexicographically smallest normalized model,
        so the choice does not depend on the order of the sample points.
        """
        quals = []
        res = []
        for m in models:
            r = self.residuals(m)
            res.append(r)
            quals.append(self.scorer(r))
        order = sorted(range(len(models)), key=lambda i: tuple(_canonical(models[i])))
        sel = order[select_best_algebraic([quals[i] for i in order], lambda q: q.score)]
        return sel, quals[sel], res[sel]

    def refit(self, mask, model=None):
        """Non-minimal fit on the masked points, or None if degenerate.

        With a current two-view ``model`` the rows are weighted by its inverse
        epipolar line norms, so the linear fit tracks the geometric residual.
        """
        idx = np.flatnonzero(mask)
        try:
            if self.kind == "rigid":
                if len(idx) < 3:
                    return None
                R, t = solve_kabsch(self.r1[idx], self.r2[idx])
                return np.hstack([R, t[:, None]])
            if len(idx) < 8:
                return None
            weights = None
            if model is not None:
                weights = _line_weights(np.asarray(model, dtype=float), self.r1[idx], self.r2[idx])
            F = solve_8pc(self.r1[idx], self.r2[idx], weights)[0]
            if self.kind == "E":
                start = F if model is None else model
                return refine_essential(start, self.r1[idx], self.r2[idx])
            return F
        except HYPOTHESIS_ERRORS:
            return None

    def essential_of(self, model) -> np.ndarray:
        if self.kind == "F":
            return self.K2.T @ np.asarray(model, dtype=float) @ self.K1
        return np.asarray(model, dtype=float)

    def normalized_points(self):
        if self.kind == "E":
            return self.r1, self.r2
        if self.kind == "F":
            n1 = (self.x1 - self.K1[:2, 2]) / np.diag(self.K1)[:2]
            n2 = (self.x2 - self.K2[:2, 2]) / np.diag(self.K2)[:2]
            return n1, n2
        raise ValueError("rigid problems have no camera coordinates")

    def cheirality_points(self, model, fallback_idx=None):
        """Normalized points used to pick the pose: the model's inliers."""
        n1, n2 = self.normalized_points()
        mask = self.residuals(model) < self.threshold
        if mask.sum() < 5 and fallback_idx is not None:
            mask = np.zeros(self.n, bool)
            mask[list(fallback_idx)] = True
        return n1[mask], n2[mask]

    def pose(self, model, fallback_idx=None):
        """(R, t) of a model as floats; t is unit-norm for two-view problems."""
        model = np.asarray(model, dtype=float)
        if self.kind == "rigid":
            return model[:, :3], model[:, 3]
        p1, p2 = self.cheirality_points(model, fallback_idx)
        R, t = decompose_essential_d(self.essential_of(model), p1, p2)
        R = np.asarray(diff.value_of(np.asarray(R, dtype=object)), dtype=float)
        t = np.asarray(diff.value_of(np.asarray(t, dtype=object)), dtype=float)
        return R, t / np.linalg.norm(t)


@dataclass
class GroundTruth:
    R: np.ndarray
    t: np.ndarray
    model: np.ndarray
    inlier_mask: np.ndarray

    @classmethod
    def from_item(cls, item, problem: Problem) -> "GroundTruth":
        if item.kind == "rigid":
            model = np.hstack([item.R, item.t[:, None]])
        elif item.kind == "E":
            model = item.E * (SQRT2 / np.linalg.norm(item.E))
        else:
            model = item.F
        mask = losses.gt_inlier_mask(item.kind, model, problem.r1, problem.r2, problem.threshold)
        return cls(np.asarray(item.R, float), np.asarray(item.t, float), model, mask)


# differentiable pipeline pieces ----------------------------------------------


def model_d(problem: Problem, models, sel, p1, p2):
    """Selected solution on the tape of the sample points ``p1, p2``."""
    if problem.solver == "8pc":
        return fundamental_8pc_d(p1, p2)
    if problem.solver == "7pc":
        return fundamental_7pc_d(models[sel], p1, p2)
    if problem.solver == "5pc":
        return essential_5pc_d(models[sel], p1, p2)
    R, t = kabsch_d(p1, p2)
    return np.hstack([R, np.asarray(t, dtype=object)[:, None]])


def pose_d(problem: Problem, m_d, fallback_idx=None):
    """Pose of a tape-valued model and the cheirality branch taken."""
    if problem.kind == "rigid":
        return m_d[:, :3], m_d[:, 3], -1
    mv = np.asarray(diff.value_of(np.asarray(m_d, dtype=object)), dtype=float)
    p1, p2 = problem.cheirality_points(mv, fallback_idx)
    E_d = m_d if problem.kind == "E" else problem.K2.T @ m_d @ problem.K1
    branch, _, _ = choose_pose(np.asarray(diff.value_of(np.asarray(E_d, dtype=object)), dtype=float), p1, p2)
    R, t = decompose_essential_d(E_d, p1, p2)
    return R, t, branch


def hypothesis_loss(problem: Problem, m_d, gt: GroundTruth, weights: losses.LossWeights, x1_d, x2_d,
                    fallback_idx=None):
    """Combined loss of one model; returns (loss, cheirality branch)."""
    l_pose = 0.0
    branch = -1
    if weights.alpha:
        R, t, branch = pose_d(problem, m_d, fallback_idx)
        l_pose = losses.pose_loss(R, t, gt.R, gt.t)
    l_epi = 0.0
    if weights.beta:
        idx = np.flatnonzero(gt.inlier_mask)
        if len(idx) == 0:
            raise ValueError("empty ground-truth inlier set")
        q1, q2 = problem.solver_points(np.asarray(x1_d)[idx], np.asarray(x2_d)[idx])
        l_epi = losses.epipolar_loss(problem.kind, m_d, q1, q2, np.ones(len(idx), bool))
    return losses.combined_loss(l_pose, l_epi, weights), branch


@dataclass
class Hypothesis:
    indices: tuple
    valid: bool
    loss: float = float("nan")
    score: float = float("nan")
    model: np.ndarray | None = None
    reason: str = ""
    signature: tuple = ()
    grad_s: np.ndarray | None = None
    grad_phi: np.ndarray | None = None


@dataclass
class HypothesisBatch:
    hypotheses: list

    def __len__(self):
        return len(self.hypotheses)

    @property
    def valid(self) -> list:
        return [h for h in self.hypotheses if h.valid]

    @property
    def losses(self) -> np.ndarray:
        return np.array([h.loss for h in self.valid])

    @property
    def invalid_reasons(self) -> Counter:
        return Counter(h.reason for h in self.hypotheses if not h.valid)

    @property
    def valid_rate(self) -> float:
        return len(self.valid) / max(1, len(self.hypotheses))


def evaluate_hypothesis(problem: Problem, scores, gt: GroundTruth, config: EstimationConfig, u=None,
                        gamma=None, anchor=None, phi=None, grad=True, phi_grad=False) -> Hypothesis:
    """One Gumbel top-k draw pushed through solver, selection and loss.

    With ``grad`` the draw is built on a fresh tape whose leaves are the
    scores (and the coordinates if ``phi_grad``); otherwise everything runs
    on floats. ``anchor`` and ``phi`` override the stop-gradient point and
    the coordinates, which is how finite differences probe the estimator.
    """
    phi = problem.phi if phi is None else np.asarray(phi, dtype=float)
    sample = sampling.gumbel_topk(np.asarray(scores, dtype=float), problem.k, config.tau, u=u, gamma=gamma,
                                  anchor=anchor)
    hyp = Hypothesis(sample.indices, False)
    # the tape starts at the sampled features; scores and coordinates are
    # reached by the exact pullback of the straight-through selection
    hv = sample.feature_values(phi)
    tape = diff.Tape() if grad else None
    h = np.array(tape.leaves(hv.reshape(-1)), dtype=object).reshape(hv.shape) if grad else hv
    # coordinates also enter the epipolar loss directly
    phi_d = np.array(tape.leaves(phi.reshape(-1)), dtype=object).reshape(phi.shape) if (grad and phi_grad) else phi
    c = problem.dim
    try:
        p1, p2 = problem.solver_points(h[:, :c], h[:, c:])
        models = problem.solve_points(*problem.solver_points(hv[:, :c], hv[:, c:]))
        if not models:
            hyp.reason = "no real solution"
            return hyp
        sel, quality, _ = problem.best_solution(models)
        m_d = model_d(problem, models, sel, p1, p2)
        loss, branch = hypothesis_loss(problem, m_d, gt, config.weights, phi_d[:, :c], phi_d[:, c:],
                                       sample.indices)
    except HYPOTHESIS_ERRORS as exc:
        hyp.reason = type(exc).__name__
        return hyp
    value = float(diff.value_of(loss))
    if not math.isfinite(value):
        hyp.reason = "non-finite loss"
        return hyp
    hyp.valid = True
    hyp.loss = value
    hyp.score = quality.score
    hyp.model = models[sel]
    hyp.signature = (sample.indices, len(models), sel, branch)
    if grad:
        adj = tape.backward(loss)
        gs, gp = sample.pullback(adj[: hv.size].reshape(hv.shape), phi)
        hyp.grad_s = gs
        if phi_grad:
            hyp.grad_phi = gp + adj[hv.size: hv.size + phi.size].reshape(phi.shape)
    return hyp


@dataclass
class TrainForward:
    batch: HypothesisBatch
    objective: float
    grad_s: np.ndarray | None
    grad_phi: np.ndarray | None
    kept: list = field(default_factory=list)


class NoValidHypothesis(EstimationError):
    pass


def _objective(batch: HypothesisBatch, top_fraction: float, n: int, phi_shape, grad: bool, phi_grad: bool):
    valid = [i for i, h in enumerate(batch.hypotheses) if h.valid]
    if not valid:
        raise NoValidHypothesis("all hypotheses invalid", dict(batch.invalid_reasons))
    order = sorted(valid, key=lambda i: (batch.hypotheses[i].loss, i))
    m = max(1, int(math.ceil(top_fraction * len(order))))
    kept = order[:m]
    objective = float(np.mean([batch.hypotheses[i].loss for i in kept]))
    gs = gp = None
    if grad:
        gs = np.mean([batch.hypotheses[i].grad_s for i in kept], axis=0)
        if phi_grad:
            gp = np.mean([batch.hypotheses[i].grad_phi for i in kept], axis=0)
    return objective, gs, gp, kept


def _map(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def train_forward(problem: Problem, scores, gt: GroundTruth, config: EstimationConfig, seed=None,
                  iterations=None, grad=True, phi_grad=False, anchor=None, phi=None, memo=None) -> TrainForward:
    """Mean loss over ``iterations`` (default config.train_iterations) hypotheses.

    Hypothesis i takes its Gumbel noise from a counter-based stream keyed by
    ``seed`` (default config.seed), so the result does not depend on the
    thread count. With ``memo`` (a dict) and no gradients, losses are cached
    per unordered sample, which makes very long Monte-Carlo runs affordable.
    """
    t = config.train_iterations if iterations is None else iterations
    seed = config.seed if seed is None else seed
    stream = sampling.HypothesisStream(seed, problem.n)
    phi_arr = problem.phi if phi is None else np.asarray(phi, dtype=float)
    hyps = []
    block = 4096
    for start in range(0, t, block):
        U = stream.uniforms(start, min(block, t - start))
        if memo is not None and not grad:
            for u in U:
                g = sampling.gumbel_from_uniform(u)
                sv = np.asarray(scores, dtype=float)
                idx = sampling._top_k((sv if anchor is None else anchor) + g, problem.k)
                key = tuple(sorted(idx))
                if key not in memo:
                    memo[key] = evaluate_hypothesis(problem, scores, gt, config, gamma=g, anchor=anchor,
                                                    phi=phi_arr, grad=False)
                hyps.append(memo[key])
            continue

        def run(u):
            return evaluate_hypothesis(problem, scores, gt, config, u=u, anchor=anchor, phi=phi_arr, grad=grad,
                                       phi_grad=phi_grad)

        hyps.extend(_map(run, list(U), config.threads))
    batch = HypothesisBatch(hyps)
    objective, gs, gp, kept = _objective(batch, config.top_fraction, problem.n, phi_arr.shape, grad, phi_grad)
    return TrainForward(batch, objective, gs, gp, kept)


def exact_expected_loss(problem: Problem, scores, gt: GroundTruth, config: EstimationConfig,
                        return_mass: bool = False):
    """Plackett-Luce expectation of the hypothesis loss by full enumeration.

    The solver ignores sample order, so the loss is computed once per subset
    and weighted by the summed probability of its orderings. Invalid subsets
    are excluded and the expectation is conditioned on validity, matching
    the Monte-Carlo objective.
    """
    n, k = problem.n, problem.k
    if math.comb(n, k) * math.factorial(k) > 10**6:
        raise ValueError("enumeration too large")
    s = np.asarray(scores, dtype=float)
    num = 0.0
    mass = 0.0
    for combo in itertools.combinations(range(n), k):
        gamma = np.full(n, -1e6)
        gamma[list(combo)] = 0.0
        hyp = evaluate_hypothesis(problem, np.zeros(n), gt, config, gamma=gamma, grad=False)
        if not hyp.valid:
            continue
        p = sum(sampling.pl_probability(s, perm) for perm in itertools.permutations(combo))
        num += p * hyp.loss
        mass += p
    if mass == 0.0:
        raise NoValidHypothesis("no valid subset")
    return (num / mass, mass) if return_mass else num / mass


# test-time estimation --------------------------------------------------------


@dataclass
class EstimationResult:
    model: np.ndarray
    inlier_mask: np.ndarray
    score: float
    iterations: int
    wall_time: float
    best_iteration: int
    lo_improved: bool = False
    lo_flag: str = ""
    R: np.ndarray | None = None
    t: np.ndarray | None = None
    invalid: int = 0


def local_optimize(problem: Problem, model, rounds: int = 4):
    """Iterated inlier refits; a refit is kept only if it raises the score.

    Acceptance also requires the marginalized score not to drop, so the
    returned model never scores lower than the input under either measure.
    Returns (model, improved, flag).
    """
    cur = np.asarray(model, dtype=float)
    r = problem.residuals(cur)
    q = problem.scorer(r).score
    qm = problem.marginal(r).score
    improved = False
    for _ in range(rounds):
        mask = r < problem.threshold
        if mask.sum() < problem.k:
            return cur, improved, "too few inliers"
        new = problem.refit(mask, cur)
        if new is None:
            return cur, improved, "degenerate refit"
        r_new = problem.residuals(new)
        nq = problem.scorer(r_new).score
        nqm = problem.marginal(r_new).score
        if not (nq > q and nqm >= qm):
            break
        cur, r, q, qm, improved = new, r_new, nq, nqm, True
    return cur, improved, ""


class SampleStream:
    """Minimal samples in hypothesis order for the configured test-time sampler."""

    def __init__(self, n: int, k: int, sampler: str, seed: int, scores=None):
        self.n, self.k, self.kind = n, k, sampler
        if sampler == "weighted" and scores is not None:
            self.weights = sampling.draw_log_weights(scores)
            self.stream = sampling.HypothesisStream(seed, n)
        else:
            self.weights = None
            self.stream = sampling.HypothesisStream(seed, k)
        self.prosac = None
        if sampler == "prosac":
            order_scores = np.zeros(n) if scores is None else scores
            self.prosac = sampling.Prosac.from_scores(order_scores, k)
            self._next = 0

    def batch(self, start: int, count: int) -> np.ndarray:
        U = self.stream.uniforms(start, count)
        if self.prosac is not None:
            if start != self._next:
                raise ValueError("PROSAC is sequential; request batches in order")
            self._next = start + count
            return np.array([self.prosac.next(u=u) for u in U], dtype=np.int64)
        if self.weights is not None:
            return sampling.weighted_draw_batch(self.weights, self.k, U, log=True)
        return sampling.uniform_draw_batch(self.n, self.k, U)


def estimate(problem: Problem, scores=None, config: EstimationConfig | None = None) -> EstimationResult:
    """Robust estimation with adaptive termination; deterministic given the seed."""
    config = config or EstimationConfig(kind=problem.kind)
    t0 = time.perf_counter()
    n, k = problem.n, problem.k
    if n < k:
        raise ValueError(f"need at least {k} correspondences, got {n}")
    stream = SampleStream(n, k, config.sampler, config.seed, scores)

    def evaluate(idx):
        try:
            models = problem.solve(idx)
            if not models:
                return None
            sel, quality, _ = problem.best_solution(models)
            return quality.score, quality.n_inliers, models[sel]
        except HYPOTHESIS_ERRORS:
            return None

    best = None
    it = 0
    invalid = 0
    bound = config.max_iterations
    pool = ThreadPoolExecutor(max_workers=config.threads) if config.threads > 1 else None
    try:
        while it < bound:
            count = min(config.chunk, bound - it)
            samples = stream.batch(it, count)
            rows = [tuple(int(i) for i in row) for row in samples]
            results = list(pool.map(evaluate, rows)) if pool else [evaluate(r) for r in rows]
            for res in results:
                it += 1
                if res is None:
                    invalid += 1
                elif best is None or res[0] > best[0]:
                    best = (res[0], res[1], res[2], it)
                    bound = min(config.max_iterations,
                                scoring.termination_iterations(res[1] / n, k, config.confidence, config.max_iterations))
                if it >= bound:
                    break
    finally:
        if pool:
            pool.shutdown()
    if best is None:
        raise EstimationError("no valid hypothesis", {"iterations": it, "invalid": invalid})
    model, improved, flag = local_optimize(problem, best[2], config.lo_rounds)
    r = problem.residuals(model)
    quality = problem.scorer(r)
    R = t = None
    try:
        R, t = problem.pose(model)
    except HYPOTHESIS_ERRORS:
        pass
    return EstimationResult(model, quality.inlier_mask, quality.score, it, time.perf_counter() - t0, best[3],
                            improved, flag, R, t, invalid)
