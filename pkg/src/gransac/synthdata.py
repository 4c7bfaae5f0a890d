"""Synthetic two-view and rigid-registration scenes with exact ground truth.

Inliers are true projections (plus truncated Gaussian noise); outliers are
rejection-sampled so that they violate the ground-truth model by a margin,
which makes the ground-truth inlier mask exact.

On-disk format ``GRDS1`` (little-endian)::

    magic  b"GRDS1"
    header <BIIII>  kind code, N, coordinate dims C, side dims D, item count
    items  x1 (N*C f8) | x2 (N*C f8) | side (N*D f8) | R (9 f8) | t (3 f8)
           | K1 (9 f8) | K2 (9 f8) | inlier mask (ceil(N/8) bytes, packed bits)
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from . import numkit

MAGIC = b"GRDS1"
KIND_CODES = {"F": 0, "E": 1, "rigid": 2}
CODE_KINDS = {v: k for k, v in KIND_CODES.items()}
MAX_RETRIES = 50


@dataclass
class SceneSpec:
    kind: str = "E"
    n: int = 2000
    inlier_ratio: float = 1.0
    noise: float = 0.0
    focal: float = 800.0
    principal: tuple = (320.0, 240.0)
    image_size: tuple = (640, 480)
    rotation_max_deg: float = 20.0
    baseline_range: tuple = (0.5, 1.5)
    depth_range: tuple = (4.0, 12.0)
    planarity: float = 0.0
    outlier_margin: float | None = None
    side_separation: float = 1.5
    seed: int = 0

    def margin(self) -> float:
        if self.outlier_margin is not None:
            return self.outlier_margin
        return 0.5 if self.kind == "rigid" else 20.0

    def validate(self, k: int = 1) -> None:
        if self.kind not in KIND_CODES:
            raise ValueError(f"unknown kind {self.kind!r}")
        if not 0.0 < self.inlier_ratio <= 1.0:
            raise ValueError("inlier_ratio must lie in (0, 1]")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")
        if round(self.inlier_ratio * self.n) < k:
            raise ValueError("too few inliers for the minimal sample size")


@dataclass
class DataItem:
    kind: str
    x1: np.ndarray
    x2: np.ndarray
    side: np.ndarray
    R: np.ndarray
    t: np.ndarray
    K1: np.ndarray = field(default_factory=lambda: np.eye(3))
    K2: np.ndarray = field(default_factory=lambda: np.eye(3))
    inlier_mask: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))

    @property
    def n(self) -> int:
        return len(self.x1)

    @property
    def E(self) -> np.ndarray:
        return np.array(numkit.skew(self.t)) @ self.R

    @property
    def F(self) -> np.ndarray:
        F = np.linalg.inv(self.K2).T @ self.E @ np.linalg.inv(self.K1)
        return F / np.linalg.norm(F)

    @property
    def focal(self) -> float:
        return 0.5 * (self.K1[0, 0] + self.K2[0, 0])

    def normalized(self) -> tuple[np.ndarray, np.ndarray]:
        """Coordinates premultiplied by the inverse intrinsics."""
        return to_camera(self.x1, self.K1), to_camera(self.x2, self.K2)

    def features(self) -> np.ndarray:
        """Geometric features: coordinates of both sides, then side channels."""
        return np.hstack([self.x1, self.x2, self.side])


def to_camera(x: np.ndarray, K: np.ndarray) -> np.ndarray:
    return (x - K[:2, 2]) / np.array([K[0, 0], K[1, 1]])


def intrinsics(focal: float, principal) -> np.ndarray:
    return np.array([[focal, 0.0, principal[0]], [0.0, focal, principal[1]], [0.0, 0.0, 1.0]])


def random_rotation(rng: np.random.Generator, max_deg: float) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = math.radians(rng.uniform(0.0, max_deg))
    return rotation_about(axis, angle)


def rotation_about(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    K = np.array(numkit.skew(axis))
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * K @ K


def _truncated_normal(rng, sigma, shape, cut=3.0):
    out = rng.normal(size=shape)
    bad = np.abs(out) > cut
    while np.any(bad):
        out[bad] = rng.normal(size=int(bad.sum()))
        bad = np.abs(out) > cut
    return sigma * out


def symmetric_epipolar(F: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    h1 = np.hstack([x1, np.ones((len(x1), 1))])
    h2 = np.hstack([x2, np.ones((len(x2), 1))])
    l2 = h1 @ F.T
    l1 = h2 @ F
    e = np.sum(h2 * l2, axis=1)
    a = l2[:, 0] ** 2 + l2[:, 1] ** 2
    b = l1[:, 0] ** 2 + l1[:, 1] ** 2
    return np.abs(e) * np.sqrt(1.0 / np.maximum(a, 1e-300) + 1.0 / np.maximum(b, 1e-300))


def _side_features(rng, mask, separation):
    sign = np.where(mask, 1.0, -1.0)
    logits = separation * sign + rng.normal(size=len(mask))
    return (1.0 / (1.0 + np.exp(logits)))[:, None]


def _visible_points(rng, spec, K, R, t, count):
    w, h = spec.image_size
    Kinv = np.linalg.inv(K)
    pts1, pts2, X = [], [], []
    plane = None
    if spec.planarity > 0:
        normal = np.array([0.0, 0.0, 1.0]) + 0.5 * rng.normal(size=3) * np.array([1.0, 1.0, 0.0])
        normal /= np.linalg.norm(normal)
        depth = np.mean(spec.depth_range)
        plane = (normal, depth * normal[2])
    n_plane = int(round(spec.planarity * count))
    got = 0
    for _ in range(MAX_RETRIES):
        m = 4 * count
        uv = np.column_stack([rng.uniform(0, w, m), rng.uniform(0, h, m), np.ones(m)])
        rays = uv @ Kinv.T
        on_plane = rng.random(m) < spec.planarity
        z = rng.uniform(*spec.depth_range, m)
        P = rays * z[:, None]
        if plane is not None:
            normal, d = plane
            lam = d / (rays @ normal)
            P = np.where(on_plane[:, None], rays * lam[:, None], P)
        P2 = P @ R.T + t
        ok = (P[:, 2] > 0.1) & (P2[:, 2] > 0.1)
        x2 = (P2 @ K.T)
        x2 = x2[:, :2] / np.where(ok, x2[:, 2], 1.0)[:, None]
        ok &= (x2[:, 0] >= 0) & (x2[:, 0] < w) & (x2[:, 1] >= 0) & (x2[:, 1] < h)
        if plane is not None:
            # planar points first, then free points, in the requested proportion
            idx_plane = np.flatnonzero(ok & on_plane)[: n_plane]
            idx_free = np.flatnonzero(ok & ~on_plane)[: count - n_plane]
            if len(idx_plane) == n_plane and len(idx_free) == count - n_plane:
                idx = np.concatenate([idx_plane, idx_free])
                return uv[idx, :2], x2[idx], P[idx]
            continue
        idx = np.flatnonzero(ok)
        take = idx[: count - got]
        pts1.append(uv[take, :2])
        pts2.append(x2[take])
        X.append(P[take])
        got += len(take)
        if got == count:
            return np.vstack(pts1), np.vstack(pts2), np.vstack(X)
    raise RuntimeError("could not place enough visible points; widen the scene ranges")


def generate_two_view(spec: SceneSpec, rng: np.random.Generator | None = None) -> DataItem:
    """Two calibrated cameras, N matches of which round(w N) are true."""
    spec.validate()
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    K = intrinsics(spec.focal, spec.principal)
    n_in = int(round(spec.inlier_ratio * spec.n))
    for _ in range(MAX_RETRIES):
        R = random_rotation(rng, spec.rotation_max_deg)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        t = direction * rng.uniform(*spec.baseline_range)
        if np.linalg.norm(t) > 1e-3:
            break
    x1, x2, _ = _visible_points(rng, spec, K, R, t, n_in)
    if spec.noise > 0:
        x1 = x1 + _truncated_normal(rng, spec.noise, x1.shape)
        x2 = x2 + _truncated_normal(rng, spec.noise, x2.shape)
    item = DataItem(spec.kind, x1, x2, np.zeros((n_in, 1)), R, t, K.copy(), K.copy(), np.ones(n_in, bool))
    n_out = spec.n - n_in
    if n_out:
        F = item.F
        w, h = spec.image_size
        o1, o2 = [], []
        need = n_out
        while need > 0:
            a = np.column_stack([rng.uniform(0, w, 2 * need), rng.uniform(0, h, 2 * need)])
            b = np.column_stack([rng.uniform(0, w, 2 * need), rng.uniform(0, h, 2 * need)])
            keep = symmetric_epipolar(F, a, b) > spec.margin()
            o1.append(a[keep][:need])
            o2.append(b[keep][:need])
            need -= len(o1[-1])
        x1 = np.vstack([x1] + o1)
        x2 = np.vstack([x2] + o2)
    mask = np.arange(spec.n) < n_in
    perm = rng.permutation(spec.n)
    x1, x2, mask = x1[perm], x2[perm], mask[perm]
    side = _side_features(rng, mask, spec.side_separation)
    return DataItem(spec.kind, x1, x2, side, R, t, K, K.copy(), mask)


def generate_rigid(spec: SceneSpec, rng: np.random.Generator | None = None) -> DataItem:
    """Source cloud in [-1, 1]^3 and its rigidly moved, partly corrupted copy."""
    spec.validate()
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    n_in = int(round(spec.inlier_ratio * spec.n))
    R = random_rotation(rng, spec.rotation_max_deg)
    direction = rng.normal(size=3)
    t = direction / np.linalg.norm(direction) * rng.uniform(*spec.baseline_range)
    P = rng.uniform(-1.0, 1.0, size=(spec.n, 3))
    if spec.planarity > 0:
        n_plane = int(round(spec.planarity * spec.n))
        P[:n_plane, 2] = 0.0
    Q = P @ R.T + t
    if spec.noise > 0:
        Q[:n_in] += _truncated_normal(rng, spec.noise, (n_in, 3))
    lo, hi = Q.min(axis=0) - 0.5, Q.max(axis=0) + 0.5
    for i in range(n_in, spec.n):
        while True:
            q = rng.uniform(lo, hi)
            if np.linalg.norm(R @ P[i] + t - q) > spec.margin():
                Q[i] = q
                break
    mask = np.arange(spec.n) < n_in
    perm = rng.permutation(spec.n)
    P, Q, mask = P[perm], Q[perm], mask[perm]
    side = _side_features(rng, mask, spec.side_separation)
    return DataItem("rigid", P, Q, side, R, t, np.eye(3), np.eye(3), mask)


def generate(spec: SceneSpec, rng: np.random.Generator | None = None) -> DataItem:
    return generate_rigid(spec, rng) if spec.kind == "rigid" else generate_two_view(spec, rng)


def generate_dataset(spec: SceneSpec, count: int) -> list[DataItem]:
    """``count`` scenes, item i seeded from (spec.seed, i)."""
    return [generate(spec, np.random.default_rng([spec.seed, i])) for i in range(count)]


def pad(item: DataItem, n: int) -> DataItem:
    """Zero-fill to exactly ``n`` correspondences (padding rows are outliers)."""
    if item.n > n:
        raise ValueError("item has more correspondences than the pad size")
    extra = n - item.n

    def z(a):
        return np.vstack([a, np.zeros((extra, a.shape[1]))])

    return DataItem(item.kind, z(item.x1), z(item.x2), z(item.side), item.R, item.t, item.K1, item.K2,
                    np.concatenate([item.inlier_mask, np.zeros(extra, bool)]))


# serialization -------------------------------------------------------------


def save_dataset(path, items: Iterable[DataItem]) -> None:
    items = list(items)
    if not items:
        raise ValueError("refusing to write an empty dataset")
    kind = items[0].kind
    n, c = items[0].x1.shape
    d = items[0].side.shape[1]
    for it in items:
        if it.kind != kind or it.x1.shape != (n, c) or it.side.shape != (n, d):
            raise ValueError("all items must share kind and shape; pad them first")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BIIII", KIND_CODES[kind], n, c, d, len(items)))
        for it in items:
            for arr in (it.x1, it.x2, it.side, it.R, it.t, it.K1, it.K2):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
            fh.write(np.packbits(it.inlier_mask.astype(np.uint8), bitorder="little").tobytes())


def iter_dataset(path) -> Iterator[DataItem]:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a GRDS1 dataset")
        code, n, c, d, count = struct.unpack("<BIIII", fh.read(struct.calcsize("<BIIII")))
        kind = CODE_KINDS[code]
        sizes = [n * c, n * c, n * d, 9, 3, 9, 9]
        shapes = [(n, c), (n, c), (n, d), (3, 3), (3,), (3, 3), (3, 3)]
        nbytes = (n + 7) // 8
        for _ in range(count):
            arrays = []
            for size, shape in zip(sizes, shapes):
                buf = fh.read(8 * size)
                if len(buf) != 8 * size:
                    raise ValueError(f"{path}: truncated dataset")
                arrays.append(np.frombuffer(buf, dtype="<f8").reshape(shape).astype(float))
            bits = np.frombuffer(fh.read(nbytes), dtype=np.uint8)
            mask = np.unpackbits(bits, bitorder="little")[:n].astype(bool)
            yield DataItem(kind, *arrays, inlier_mask=mask)


def load_dataset(path) -> list[DataItem]:
    return list(iter_dataset(path))


def export_text(path, items: Iterable[DataItem]) -> None:
    """One JSON object per line, for eyeballing and diffing."""
    with open(path, "w") as fh:
        for it in items:
            rec = {
                "kind": it.kind, "n": it.n,
                "x1": it.x1.tolist(), "x2": it.x2.tolist(), "side": it.side.tolist(),
                "R": it.R.tolist(), "t": it.t.tolist(), "K1": it.K1.tolist(), "K2": it.K2.tolist(),
                "inlier_mask": it.inlier_mask.astype(int).tolist(),
            }
            fh.write(json.dumps(rec) + "\n")


def spec_to_dict(spec: SceneSpec) -> dict:
    return asdict(spec)


def dataset_path(path) -> Path:
    return Path(path)
