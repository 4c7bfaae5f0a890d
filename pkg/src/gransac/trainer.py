"""Score learning by stochastic gradient descent on the expected hypothesis loss.

Two parametrizations are supported: free per-item score vectors, and a
shared affine scorer s = side @ w + b over the side features, which also
scores items never seen in training. Both start from the closed-form KL
initialization and are updated with Adam after global-norm clipping.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import log_softmax, softmax

from . import engine, sampling

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    estimation: engine.EstimationConfig = field(default_factory=engine.EstimationConfig)
    scorer: str = "free"
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    tau_init: float = 1.0
    iterations: int | None = None
    max_skip_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.scorer not in ("free", "affine"):
            raise ValueError(f"unknown scorer {self.scorer!r}")
        if self.clip_norm <= 0 or self.tau_init <= 0 or self.lr < 0:
            raise ValueError("clip norm and tau_init must be positive, lr nonnegative")
        if self.iterations is None:
            self.iterations = self.estimation.train_iterations

    def to_dict(self) -> dict:
        d = asdict(self)
        d["estimation"] = self.estimation.to_dict()
        return d

    def digest(self) -> str:
        d = self.to_dict()
        for key in ("threads", "chunk"):
            d["estimation"].pop(key, None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TrainItem:
    """A problem with its ground truth and side features."""

    problem: engine.Problem
    gt: engine.GroundTruth
    side: np.ndarray

    @classmethod
    def from_item(cls, item, config: engine.EstimationConfig) -> "TrainItem":
        problem = engine.Problem.from_item(item, config)
        return cls(problem, engine.GroundTruth.from_item(item, problem), np.asarray(item.side, dtype=float))

    @property
    def inliers(self) -> np.ndarray:
        return self.gt.inlier_mask


# initialization ----------------------------------------------------------------


def kl_target(problem: engine.Problem, gt: engine.GroundTruth, tau_init: float = 1.0) -> np.ndarray:
    """q = softmax(-r / tau_init) over ground-truth residuals r."""
    r = problem.residuals(gt.model)
    return softmax(-r / tau_init)


def init_kl(problem: engine.Problem, gt: engine.GroundTruth, tau_init: float = 1.0) -> np.ndarray:
    """Scores whose softmax equals the KL target exactly: s = log q."""
    r = problem.residuals(gt.model)
    return log_softmax(-r / tau_init)


def fit_affine_kl(items, tau_init: float = 1.0) -> np.ndarray:
    """Affine scorer parameters minimizing the summed KL(q || softmax(side w + b)).

    The objective is convex in (w, b); b is kept for generality although the
    softmax ignores it.
    """
    targets = [kl_target(it.problem, it.gt, tau_init) for it in items]
    design = [np.hstack([it.side, np.ones((len(it.side), 1))]) for it in items]

    def objective(theta):
        total, grad = 0.0, np.zeros_like(theta)
        for q, X in zip(targets, design):
            logp = log_softmax(X @ theta)
            total -= q @ logp
            grad += X.T @ (np.exp(logp) - q)
        return total / len(items), grad / len(items)

    theta0 = np.zeros(design[0].shape[1])
    return minimize(objective, theta0, jac=True, method="L-BFGS-B").x


def kl_divergence(q, s) -> float:
    q = np.asarray(q, dtype=float)
    logp = log_softmax(np.asarray(s, dtype=float))
    m = q > 0
    return float(np.sum(q[m] * (np.log(q[m]) - logp[m])))


# optimizer state -----------------------------------------------------------------


@dataclass
class TrainState:
    """Parameters plus Adam moments, kept per block (one block per item, or one shared)."""

    scorer: str
    params: list
    m: list
    v: list
    steps: list
    clip_norm: float = 1.0
    epoch: int = 0

    @classmethod
    def create(cls, items, config: TrainConfig) -> "TrainState":
        if config.scorer == "free":
            params = [init_kl(it.problem, it.gt, config.tau_init) for it in items]
        else:
            params = [fit_affine_kl(items, config.tau_init)]
        return cls(config.scorer, params, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
                   [0] * len(params), config.clip_norm)

    def block(self, index: int) -> int:
        return index if self.scorer == "free" else 0

    def scores(self, index: int, item: TrainItem) -> np.ndarray:
        if self.scorer == "free":
            return self.params[index]
        return affine_scores(self.params[0], item.side)

    def param_grad(self, grad_s: np.ndarray, item: TrainItem) -> np.ndarray:
        if self.scorer == "free":
            return grad_s
        return np.append(item.side.T @ grad_s, grad_s.sum())

    def step(self, index: int, grad: np.ndarray, config: TrainConfig) -> float:
        """Clip, then one Adam update of the block; returns the pre-clip norm."""
        b = self.block(index)
        g, norm = clip_global_norm(grad, self.clip_norm)
        self.steps[b] += 1
        t = self.steps[b]
        self.m[b] = config.beta1 * self.m[b] + (1 - config.beta1) * g
        self.v[b] = config.beta2 * self.v[b] + (1 - config.beta2) * g * g
        mh = self.m[b] / (1 - config.beta1 ** t)
        vh = self.v[b] / (1 - config.beta2 ** t)
        self.params[b] = self.params[b] - config.lr * mh / (np.sqrt(vh) + config.adam_eps)
        if not np.all(np.isfinite(self.params[b])):
            raise TrainingError("non-finite parameters after update")
        return norm


def affine_scores(theta, side) -> np.ndarray:
    side = np.asarray(side, dtype=float)
    return side @ theta[:-1] + theta[-1]


def clip_global_norm(grad, clip_norm: float):
    g = np.asarray(grad, dtype=float)
    norm = float(np.linalg.norm(g))
    if norm > clip_norm:
        g = g * (clip_norm / norm)
    return g, norm


# training -------------------------------------------------------------------------


@dataclass
class EpochReport:
    epoch: int
    objective: float
    valid_rate: float
    inlier_mass: float
    all_inlier_probability: float
    trained: int
    skipped_invalid: int
    skipped_nan: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)

    def objectives(self) -> list:
        return [e.objective for e in self.epochs]


def item_seed(seed: int, *keys) -> int:
    """Stable 63-bit seed derived from a base seed and integer keys."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(2, np.uint64)[0] >> np.uint64(1))


def inlier_mass(scores, mask) -> float:
    return float(softmax(np.asarray(scores, dtype=float))[np.asarray(mask, bool)].sum())


def all_inlier_probability(scores, mask, k: int, draws: int = 256, seed: int = 0) -> float:
    """Monte-Carlo probability that a weighted test-time draw is all-inlier."""
    w = sampling.draw_log_weights(scores)
    U = np.random.default_rng(seed).random((draws, len(w)))
    idx = sampling.weighted_draw_batch(w, k, U, log=True)
    return float(np.mean(np.all(np.asarray(mask, bool)[idx], axis=1)))


def train_epoch(items, state: TrainState, config: TrainConfig) -> EpochReport:
    """One pass over the items in order: forward, backward, clip, Adam step."""
    est = config.estimation
    k = est.k
    objectives, valid_rates, masses, probs = [], [], [], []
    skipped_invalid = skipped_nan = 0
    epoch = state.epoch
    for i, item in enumerate(items):
        s = state.scores(i, item)
        masses.append(inlier_mass(s, item.inliers))
        probs.append(all_inlier_probability(s, item.inliers, k, seed=item_seed(config.seed, epoch, i, 1)))
        try:
            tf = engine.train_forward(item.problem, s, item.gt, est, seed=item_seed(config.seed, epoch, i),
                                      iterations=config.iterations)
        except engine.NoValidHypothesis:
            skipped_invalid += 1
            continue
        valid_rates.append(tf.batch.valid_rate)
        if not (math.isfinite(tf.objective) and np.all(np.isfinite(tf.grad_s))):
            skipped_nan += 1
            continue
        objectives.append(tf.objective)
        state.step(i, state.param_grad(tf.grad_s, item), config)
    if skipped_nan > config.max_skip_fraction * len(items):
        raise TrainingError(f"{skipped_nan} of {len(items)} items had non-finite gradients")
    state.epoch += 1
    return EpochReport(
        epoch=epoch,
        objective=float(np.mean(objectives)) if objectives else float("nan"),
        valid_rate=float(np.mean(valid_rates)) if valid_rates else 0.0,
        inlier_mass=float(np.mean(masses)),
        all_inlier_probability=float(np.mean(probs)),
        trained=len(objectives),
        skipped_invalid=skipped_invalid,
        skipped_nan=skipped_nan,
    )


def train(items, config: TrainConfig, epochs: int, state: TrainState | None = None, callback=None):
    """Run ``epochs`` epochs; returns (state, report)."""
    if not items:
        raise TrainingError("empty dataset")
    state = TrainState.create(items, config) if state is None else state
    report = TrainReport()
    for _ in range(epochs):
        rep = train_epoch(items, state, config)
        report.epochs.append(rep)
        if callback is not None:
            callback(rep)
    return state, report


def validation_objective(items, state: TrainState, config: TrainConfig, iterations: int | None = None,
                         seed: int = 10**6) -> float:
    """Mean objective over items under a frozen noise set (no gradients)."""
    est = config.estimation
    t = config.iterations if iterations is None else iterations
    vals = []
    for i, item in enumerate(items):
        try:
            tf = engine.train_forward(item.problem, state.scores(i, item), item.gt, est,
                                      seed=item_seed(seed, i), iterations=t, grad=False)
        except engine.NoValidHypothesis:
            continue
        vals.append(tf.objective)
    if not vals:
        raise TrainingError("no item produced a valid hypothesis")
    return float(np.mean(vals))


# sampling efficiency ------------------------------------------------------------------


@dataclass
class SamplingEfficiency:
    weighted: float
    uniform: float
    analytic_uniform: float
    first_success: np.ndarray
    first_success_uniform: np.ndarray

    @property
    def ratio(self) -> float:
        return self.weighted / self.uniform if self.uniform > 0 else float("inf")


def _first_success(ok: np.ndarray) -> np.ndarray:
    """1-based index of the first True per row of a (trials, draws) matrix, 0 if none."""
    hit = ok.any(axis=1)
    return np.where(hit, ok.argmax(axis=1) + 1, 0)


def eval_sampling_efficiency(score_list, masks, k: int, draws: int = 10_000, seed: int = 0,
                             trials: int = 100, horizon: int = 1000) -> SamplingEfficiency:
    """All-inlier probability per draw for weighted and uniform sampling.

    ``draws`` Monte-Carlo draws per item estimate the per-draw probability;
    ``trials`` runs of length ``horizon`` give the first-success distribution.
    """
    pw, pu, pa, fw, fu = [], [], [], [], []
    for i, (s, mask) in enumerate(zip(score_list, masks)):
        mask = np.asarray(mask, bool)
        n = len(mask)
        rng = np.random.default_rng(item_seed(seed, i))
        w = sampling.draw_log_weights(s)
        ok_w = np.all(mask[sampling.weighted_draw_batch(w, k, rng.random((draws, n)), log=True)], axis=1)
        ok_u = np.all(mask[sampling.uniform_draw_batch(n, k, rng.random((draws, k)))], axis=1)
        pw.append(ok_w.mean())
        pu.append(ok_u.mean())
        m = int(mask.sum())
        pa.append(math.comb(m, k) / math.comb(n, k))
        tw = np.all(mask[sampling.weighted_draw_batch(w, k, rng.random((trials * horizon, n)), log=True)], axis=1)
        tu = np.all(mask[sampling.uniform_draw_batch(n, k, rng.random((trials * horizon, k)))], axis=1)
        fw.append(_first_success(tw.reshape(trials, horizon)))
        fu.append(_first_success(tu.reshape(trials, horizon)))
    return SamplingEfficiency(float(np.mean(pw)), float(np.mean(pu)), float(np.mean(pa)),
                              np.concatenate(fw), np.concatenate(fu))


# checkpoints ----------------------------------------------------------------------------


def save_checkpoint(path, state: TrainState, config: TrainConfig) -> None:
    arrays = {"version": np.array(CHECKPOINT_VERSION), "config_hash": np.array(config.digest()),
              "scorer": np.array(state.scorer), "epoch": np.array(state.epoch),
              "clip_norm": np.array(state.clip_norm), "steps": np.array(state.steps, dtype=np.int64),
              "blocks": np.array(len(state.params))}
    for b, (p, m, v) in enumerate(zip(state.params, state.m, state.v)):
        arrays[f"p{b}"], arrays[f"m{b}"], arrays[f"v{b}"] = p, m, v
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_checkpoint(path) -> TrainState:
    """Load parameters without checking the configuration (for inference)."""
    with np.load(path, allow_pickle=False) as z:
        if int(z["version"]) != CHECKPOINT_VERSION:
            raise TrainingError("unsupported checkpoint version")
        blocks = int(z["blocks"])
        return TrainState(str(z["scorer"]), [z[f"p{b}"] for b in range(blocks)],
                          [z[f"m{b}"] for b in range(blocks)], [z[f"v{b}"] for b in range(blocks)],
                          [int(x) for x in z["steps"]], float(z["clip_norm"]), int(z["epoch"]))


def load_checkpoint(path, config: TrainConfig) -> TrainState:
    """Load a checkpoint to resume training under the same configuration."""
    with np.load(path, allow_pickle=False) as z:
        if str(z["config_hash"]) != config.digest():
            raise TrainingError("checkpoint was written under a different configuration")
    return read_checkpoint(path)
