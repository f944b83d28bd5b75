"""Synthetic source/target scenarios with a controllable domain shift.

Class means sit on a scaled regular simplex embedded in feature space by a
seeded random isometry.  Target samples are drawn around the same means with
inflated noise, then rotated by a fixed angle in each of a set of random
orthogonal 2-planes and translated.  Rotating every plane moves each class
by a different amount, which self-training alone cannot undo.  The first
``dim_global`` coordinates form the global teacher view and the remaining
``dim_local`` the local view.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container

SETTINGS = ("closed", "partial", "open")


@dataclass(frozen=True)
class ScenarioConfig:
    K: int = 26
    dim_global: int = 16
    dim_local: int = 16
    source_per_class: int = 30
    target_per_class: int = 20
    mean_scale: float = 4.0
    source_noise: float = 0.6
    shift_angle: float = 30.0
    shift_translation: float = 2.0
    rotation_planes: int | None = None
    target_noise_factor: float = 1.5
    setting: str = "closed"
    partial_size: int = 0
    open_extra: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.K < 3:
            raise ValueError(f"K must be at least 3, got {self.K}")
        if self.source_per_class < 1 or self.target_per_class < 1:
            raise ValueError("samples per class must be positive")
        if self.dim_global < 1 or self.dim_local < 1:
            raise ValueError("both teacher views need at least one coordinate")
        if self.setting not in SETTINGS:
            raise ValueError(f"setting must be one of {SETTINGS}, got {self.setting!r}")
        if self.setting == "partial" and not 1 <= self.partial_size < self.K:
            raise ValueError("partial setting needs 1 <= partial_size < K")
        if self.setting == "open" and self.open_extra < 1:
            raise ValueError("open setting needs open_extra >= 1")
        if self.rotation_planes is not None and self.rotation_planes < 1:
            raise ValueError("rotation_planes must be positive (None rotates every plane)")
        if min(self.source_noise, self.target_noise_factor, self.mean_scale) < 0:
            raise ValueError("noise and scale parameters must be nonnegative")

    @property
    def dim(self) -> int:
        return self.dim_global + self.dim_local

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class ScenarioBundle:
    config: ScenarioConfig
    source_x: np.ndarray
    source_y: np.ndarray
    target_x: np.ndarray
    target_y: np.ndarray
    source_means: np.ndarray
    target_means: np.ndarray
    target_classes: np.ndarray = field(default=None)

    @property
    def K(self) -> int:
        return self.config.K

    @property
    def global_slice(self) -> slice:
        return slice(0, self.config.dim_global)

    @property
    def local_slice(self) -> slice:
        return slice(self.config.dim_global, self.config.dim)

    @property
    def target_global(self) -> np.ndarray:
        return self.target_x[:, self.global_slice]

    @property
    def target_local(self) -> np.ndarray:
        return self.target_x[:, self.local_slice]

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "source_x": self.source_x, "source_y": self.source_y,
            "target_x": self.target_x, "target_y": self.target_y,
            "source_means": self.source_means, "target_means": self.target_means,
            "target_classes": self.target_classes,
        }

    def __eq__(self, other) -> bool:
        if not isinstance(other, ScenarioBundle) or self.config != other.config:
            return False
        a, b = self.arrays(), other.arrays()
        return all(np.array_equal(a[k], b[k]) and a[k].dtype == b[k].dtype for k in a)


def _simplex_means(K: int, dim: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    centered = np.eye(K) - 1.0 / K
    if dim >= K:
        basis, _ = np.linalg.qr(rng.normal(size=(dim, K)))
        return scale * centered @ basis.T
    # not enough room for a regular simplex: near-equidistant points on a sphere
    pts = rng.normal(size=(K, dim))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    return scale * np.sqrt((K - 1) / K) * pts


def _unknown_means(count: int, dim: int, radius: float, rng: np.random.Generator) -> np.ndarray:
    pts = rng.normal(size=(count, dim))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    return 1.5 * radius * pts


def shift_operator(dim: int, angle_deg: float, translation: float, rng: np.random.Generator,
                   planes: int | None = None):
    """Rotation by ``angle_deg`` in ``planes`` random orthogonal 2-planes, then a
    random translation of norm ``translation``.  ``planes=None`` uses all of them."""
    Q = np.linalg.qr(rng.normal(size=(dim, dim)))[0]
    th = np.deg2rad(angle_deg)
    R = np.eye(dim)
    n = dim // 2 if planes is None else min(planes, dim // 2)
    for p in range(n):
        u, w = Q[:, 2 * p], Q[:, 2 * p + 1]
        R = (R + (np.cos(th) - 1.0) * (np.outer(u, u) + np.outer(w, w))
             + np.sin(th) * (np.outer(w, u) - np.outer(u, w)))
    t = rng.normal(size=dim)
    t *= translation / np.linalg.norm(t)
    return R, t


def generate(config: ScenarioConfig) -> ScenarioBundle:
    rng = np.random.default_rng(config.seed)
    K, D = config.K, config.dim
    means = _simplex_means(K, D, config.mean_scale, rng)
    radius = config.mean_scale * np.sqrt((K - 1) / K)
    R, t = shift_operator(D, config.shift_angle, config.shift_translation, rng,
                          config.rotation_planes)

    classes = np.arange(K)
    if config.setting == "partial":
        classes = np.sort(rng.choice(K, size=config.partial_size, replace=False))
    all_means = means
    if config.setting == "open":
        unknown = _unknown_means(config.open_extra, D, radius, rng)
        all_means = np.vstack([means, unknown])
        classes = np.arange(K + config.open_extra)

    ns, nt = config.source_per_class, config.target_per_class
    source_y = np.repeat(np.arange(K), ns)
    source_x = means[source_y] + config.source_noise * rng.normal(size=(K * ns, D))

    target_y = np.repeat(classes, nt)
    sigma_t = config.source_noise * config.target_noise_factor
    raw = all_means[target_y] + sigma_t * rng.normal(size=(target_y.size, D))
    target_x = raw @ R.T + t
    target_means = all_means @ R.T + t

    order = rng.permutation(target_y.size)
    return ScenarioBundle(
        config=config,
        source_x=source_x,
        source_y=source_y.astype(np.int64),
        target_x=target_x[order],
        target_y=target_y[order].astype(np.int64),
        source_means=all_means,
        target_means=target_means,
        target_classes=classes.astype(np.int64),
    )


def save_bundle(bundle: ScenarioBundle, path) -> None:
    container.save(path, b"B", {"config": bundle.config.to_dict()}, bundle.arrays())


def load_bundle(path) -> ScenarioBundle:
    meta, arrays = container.load(path, b"B")
    try:
        config = ScenarioConfig(**meta["config"])
    except (KeyError, TypeError) as exc:
        raise container.FormatError(f"bundle header lacks a valid config: {exc}") from None
    return ScenarioBundle(config=config, **arrays)


def bundle_path(directory, config: ScenarioConfig) -> Path:
    """Conventional file name for a generated scenario."""
    return Path(directory) / f"scenario_{config.setting}_K{config.K}_seed{config.seed}.dmib"
