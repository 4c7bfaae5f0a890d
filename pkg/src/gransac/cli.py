"""Command-line entry point: generate | estimate | train | bench | gradcheck.

Reports are JSON lines, one record per item followed by one summary record,
written with sorted keys so equal runs give byte-identical files. Wall-clock
times go to a separate timing file for the same reason.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import engine, gradcheck, losses, metrics, synthdata, trainer

EXIT_OK, EXIT_PARTIAL, EXIT_USAGE = 0, 1, 2
CDF_DEGREES = (1.0, 2.0, 5.0, 10.0, 20.0)
CDF_PIXELS = (0.5, 1.0, 2.0, 5.0, 10.0)
FAIL_DEGREES = 180.0


class CliError(Exception):
    pass


def thread_count(flag: int | None) -> int:
    env = os.environ.get("GRANSAC_THREADS")
    if env:
        return max(1, int(env))
    if flag:
        return max(1, flag)
    return os.cpu_count() or 1


def _dump(path: Path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _load(path) -> list:
    try:
        items = synthdata.load_dataset(path)
    except (OSError, ValueError) as exc:
        raise CliError(str(exc)) from exc
    if not items:
        raise CliError(f"{path}: dataset is empty")
    return items


def _estimation_config(args, kind: str) -> engine.EstimationConfig:
    return engine.EstimationConfig(
        kind=kind, solver=args.solver, threshold=args.threshold, confidence=args.confidence,
        max_iterations=args.max_iterations, train_iterations=args.train_iterations, sampler=args.sampler,
        scorer=args.scorer, tau=args.tau, seed=args.seed, top_fraction=args.top_fraction,
        loss_alpha=args.loss_alpha, loss_beta=args.loss_beta, lo_rounds=args.lo_rounds,
        threads=thread_count(args.threads))


# scores ----------------------------------------------------------------------


def side_prior(side) -> np.ndarray:
    """Logits from the synthetic ratio channel: small ratios are likely inliers."""
    r = np.clip(np.asarray(side, dtype=float)[:, 0], 1e-6, 1.0 - 1e-6)
    return np.log1p(-r) - np.log(r)


def item_scores(item, index: int, learned) -> np.ndarray:
    if learned is None:
        return side_prior(item.side)
    scorer, params = learned
    if scorer == "affine":
        return trainer.affine_scores(params[0], item.side)
    if index >= len(params):
        raise CliError("free-score checkpoint has fewer items than the dataset")
    return params[index]


def load_learned(path):
    if path is None:
        return None
    state = trainer.read_checkpoint(path)
    return state.scorer, state.params


# estimation --------------------------------------------------------------------


def item_record(item, index: int, config: engine.EstimationConfig, scores) -> tuple[dict, float]:
    """Estimate one item; returns the report record and the wall time."""
    problem = engine.Problem.from_item(item, config)
    cfg = replace(config, seed=trainer.item_seed(config.seed, index))
    rec = {"item": index}
    try:
        res = engine.estimate(problem, scores, cfg)
    except engine.EstimationError as exc:
        rec.update(ok=False, error=str(exc))
        return rec, 0.0
    rec.update(ok=True, iterations=res.iterations, best_iteration=res.best_iteration, invalid=res.invalid,
               score=float(res.score), inliers=int(res.inlier_mask.sum()), lo_improved=bool(res.lo_improved),
               f1=metrics.f1_score(res.inlier_mask, item.inlier_mask))
    if item.kind == "rigid":
        rec.update(metrics.registration_errors(res.R, res.t, item.R, item.t, item.x1[item.inlier_mask]))
        return rec, res.wall_time
    if res.R is None:
        rec.update(rotation_error=FAIL_DEGREES, translation_error=FAIL_DEGREES, pose_error=FAIL_DEGREES)
    else:
        rec.update(rotation_error=losses.rotation_angle(res.R, item.R),
                   translation_error=losses.translation_angle(res.t, item.t),
                   pose_error=losses.pose_error_max(res.R, res.t, item.R, item.t))
    F = res.model if item.kind == "F" else np.linalg.inv(item.K2).T @ res.model @ np.linalg.inv(item.K1)
    m = item.inlier_mask
    err = synthdata.symmetric_epipolar(F, item.x1[m], item.x2[m]) if m.any() else np.array([np.nan])
    rec["epipolar_error"] = float(np.median(err))
    return rec, res.wall_time


def summarize(kind: str, records: list) -> dict:
    ok = [r for r in records if r["ok"]]
    out = {"summary": True, "items": len(records), "failed": len(records) - len(ok)}
    if not ok:
        return out
    out["f1"] = float(np.mean([r["f1"] for r in ok]))
    if kind == "rigid":
        rmse = [r["rmse"] for r in ok] + [np.inf] * out["failed"]
        out.update(rre=float(np.median([r["rre"] for r in ok])), rte=float(np.median([r["rte"] for r in ok])),
                   rmse=float(np.median(rmse)), registration_recall=metrics.registration_recall(rmse))
        return out
    pose = [r["pose_error"] for r in ok] + [FAIL_DEGREES] * out["failed"]
    epi = [r["epipolar_error"] for r in ok]
    out["auc"] = {f"{t:g}": v for t, v in metrics.pose_auc(pose).items()}
    out["median_epipolar_error"] = float(np.median(epi))
    out["pose_cdf"] = dict(zip([f"{t:g}" for t in CDF_DEGREES], metrics.error_cdf(pose, CDF_DEGREES).tolist()))
    out["epipolar_cdf"] = dict(zip([f"{t:g}" for t in CDF_PIXELS], metrics.error_cdf(epi, CDF_PIXELS).tolist()))
    return out


def run_estimation(items, config, learned=None, label=None):
    records, times = [], []
    use_scores = config.sampler != "uniform"
    for i, item in enumerate(items):
        scores = item_scores(item, i, learned) if use_scores else None
        rec, wall = item_record(item, i, config, scores)
        if label is not None:
            rec["sampler"] = label
        records.append(rec)
        times.append({"item": i, "wall_time": wall, **({"sampler": label} if label else {})})
    return records, times


# subcommands ---------------------------------------------------------------------


def cmd_generate(args) -> int:
    spec = synthdata.SceneSpec(kind=args.kind, n=args.n, inlier_ratio=args.inlier_ratio, noise=args.noise,
                               focal=args.focal, rotation_max_deg=args.rotation_max_deg,
                               planarity=args.planarity, outlier_margin=args.outlier_margin,
                               side_separation=args.side_separation, seed=args.seed)
    spec.validate()
    if args.count < 1:
        raise CliError("count must be positive")
    items = synthdata.generate_dataset(spec, args.count)
    synthdata.save_dataset(args.out, items)
    if args.text:
        synthdata.export_text(args.text, items)
    print(json.dumps({"written": str(args.out), "items": len(items), "spec": synthdata.spec_to_dict(spec)},
                     sort_keys=True))
    return EXIT_OK


def cmd_estimate(args) -> int:
    items = _load(args.dataset)
    config = _estimation_config(args, items[0].kind)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records, times = run_estimation(items, config, load_learned(args.checkpoint))
    summary = summarize(items[0].kind, records)
    _dump(out / "report.jsonl", records + [summary])
    _dump(out / "timing.jsonl", times)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK if summary["failed"] == 0 else EXIT_PARTIAL


def cmd_bench(args) -> int:
    items = _load(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    learned = load_learned(args.checkpoint)
    samplers = [s.strip() for s in args.samplers.split(",") if s.strip()]
    if "learned" in samplers and learned is None:
        raise CliError("the learned sampler needs --checkpoint")
    records, times, table = [], [], []
    for name in samplers:
        if name not in ("uniform", "weighted", "learned", "prosac"):
            raise CliError(f"unknown sampler {name!r}")
        args.sampler = "weighted" if name == "learned" else name
        config = _estimation_config(args, items[0].kind)
        recs, tms = run_estimation(items, config, learned if name == "learned" else None, label=name)
        records += recs
        times += tms
        table.append({**summarize(items[0].kind, recs), "sampler": name})
    _dump(out / "report.jsonl", records + table)
    _dump(out / "timing.jsonl", times)
    for row in table:
        print(json.dumps(row, sort_keys=True))
    return EXIT_OK if all(row["failed"] == 0 for row in table) else EXIT_PARTIAL


def cmd_train(args) -> int:
    items = _load(args.dataset)
    est = _estimation_config(args, items[0].kind)
    config = trainer.TrainConfig(estimation=est, scorer=args.model, lr=args.lr, clip_norm=args.clip_norm,
                                 tau_init=args.tau_init, iterations=args.train_iterations, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = [trainer.TrainItem.from_item(it, est) for it in items]
    state = trainer.load_checkpoint(args.resume, config) if args.resume else trainer.TrainState.create(data, config)
    before = trainer.validation_objective(data, state, config)
    logs = []
    state, report = trainer.train(data, config, args.epochs, state, callback=lambda r: logs.append(r.to_dict()))
    after = trainer.validation_objective(data, state, config)
    scores = [state.scores(i, it) for i, it in enumerate(data)]
    eff = trainer.eval_sampling_efficiency(scores, [it.inliers for it in data], est.k, seed=args.seed)
    trainer.save_checkpoint(out / "checkpoint.npz", state, config)
    summary = {"summary": True, "epochs": state.epoch, "config_hash": config.digest(),
               "validation_before": before, "validation_after": after,
               "all_inlier_probability": eff.weighted, "uniform_probability": eff.uniform}
    _dump(out / "report.jsonl", logs + [summary])
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    solvers = tuple(s.strip() for s in args.solvers.split(","))
    loss_names = tuple(s.strip() for s in args.losses.split(","))
    for s in solvers:
        if s not in gradcheck.SOLVER_KINDS:
            raise CliError(f"unknown solver {s!r}")
    for name in loss_names:
        if name not in gradcheck.LOSSES:
            raise CliError(f"unknown loss {name!r}")
    t0 = time.perf_counter()
    rep = gradcheck.run_suite(args.instances, solvers, loss_names, args.seed, args.tolerance)
    rows = rep.summary()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _dump(out / "report.jsonl", rows + [{"summary": True, "passed": rep.passed}])
        _dump(out / "timing.jsonl", [{"wall_time": time.perf_counter() - t0}])
    for row in rows:
        print(json.dumps(row, sort_keys=True))
    return EXIT_OK if rep.passed else EXIT_PARTIAL


# argument parsing --------------------------------------------------------------------


def _estimation_flags(p):
    g = p.add_argument_group("estimation")
    g.add_argument("--solver", choices=["8pc", "7pc", "5pc", "kabsch"])
    g.add_argument("--threshold", type=float, help="inlier threshold (pixels for F and E)")
    g.add_argument("--confidence", type=float, default=0.99)
    g.add_argument("--max_iterations", type=int, default=5000)
    g.add_argument("--train_iterations", type=int)
    g.add_argument("--sampler", choices=["uniform", "weighted", "prosac"], default="weighted")
    g.add_argument("--scorer", choices=["count", "msac", "marginalized"], default="marginalized")
    g.add_argument("--tau", type=float, default=1.0)
    g.add_argument("--top_fraction", type=float, default=1.0)
    g.add_argument("--loss_alpha", type=float, default=1.0)
    g.add_argument("--loss_beta", type=float, default=0.0)
    g.add_argument("--lo_rounds", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--threads", type=int, default=None, help="default: all cores; GRANSAC_THREADS overrides")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gransac", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--kind", choices=["F", "E", "rigid"], default="E")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--inlier_ratio", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--focal", type=float, default=800.0)
    p.add_argument("--rotation_max_deg", type=float, default=20.0)
    p.add_argument("--planarity", type=float, default=0.0)
    p.add_argument("--outlier_margin", type=float)
    p.add_argument("--side_separation", type=float, default=1.5)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--text", help="also export a JSON-lines copy")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("estimate", help="robust estimation on every item")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", help="learned scores for the weighted sampler")
    _estimation_flags(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("train", help="learn correspondence scores")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--model", choices=["free", "affine"], default="free")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--clip_norm", type=float, default=1.0)
    p.add_argument("--tau_init", type=float, default=1.0)
    p.add_argument("--resume", help="checkpoint written under the same flags")
    _estimation_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="compare samplers")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--samplers", default="uniform,weighted,prosac")
    p.add_argument("--checkpoint")
    _estimation_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference audit of the gradients")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--solvers", default=",".join(gradcheck.SOLVER_KINDS))
    p.add_argument("--losses", default=",".join(gradcheck.LOSSES))
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ValueError, trainer.TrainingError) as exc:
        print(f"gransac: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
